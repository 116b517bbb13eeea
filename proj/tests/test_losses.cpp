#include <gtest/gtest.h>

#include <cmath>

#include "fedmix/losses.hpp"
#include "fedmix/oracles.hpp"

namespace fedmix {
namespace {

void expect_grads_equal(const ParamGrads& a, const ParamGrads& b, double tol) {
    auto fa = flatten(a), fb = flatten(b);
    ASSERT_EQ(fa.size(), fb.size());
    for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_NEAR(fa[i], fb[i], tol) << "param " << i;
}

// d value / d w by central differences for an arbitrary loss closure
template <class F>
std::vector<double> fd_grad(const Model& m, F value, double eps = 1e-5) {
    std::vector<double> w = flatten(m), g(w.size());
    Model probe = m;
    for (std::size_t i = 0; i < w.size(); ++i) {
        auto wp = w, wm = w;
        wp[i] += eps;
        wm[i] -= eps;
        unflatten(probe, wp);
        double lp = value(probe);
        unflatten(probe, wm);
        g[i] = (lp - value(probe)) / (2.0 * eps);
    }
    return g;
}

TEST(MixupPair, Endpoints) {
    Tensor xi({1, 2}, {0, 2}), xj({1, 2}, {2, 0}), yi({1, 2}, {1, 0}), yj({1, 2}, {0, 1});
    auto [x0, y0] = mixup_pair(xi, yi, xj, yj, 0.0);
    EXPECT_EQ(x0, xi);
    EXPECT_EQ(y0, yi);
    auto [x1, y1] = mixup_pair(xi, yi, xj, yj, 1.0);
    EXPECT_EQ(x1, xj);
    EXPECT_EQ(y1, yj);
    auto [xh, yh] = mixup_pair(xi, yi, xj, yj, 0.5);
    EXPECT_EQ(xh, Tensor({1, 2}, {1, 1}));
    EXPECT_EQ(yh, Tensor({1, 2}, {0.5, 0.5}));
    EXPECT_THROW(mixup_pair(xi, yi, xj, yj, 1.5), ArgumentError);
    EXPECT_THROW(mixup_pair(xi, yi, Tensor({1, 3}), yj, 0.5), ShapeError);
}

TEST(AllVariants, LambdaZeroIsPlainCrossEntropy) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto inst = oracle::mix_instance(seed, 3);
        LossOutput plain = loss_plain(inst.model, inst.X, inst.Y);
        std::vector<std::size_t> perm(inst.X.rows());
        std::iota(perm.rbegin(), perm.rend(), std::size_t{0});
        std::vector<LossOutput> outs{
            loss_global_mixup(inst.model, inst.X, inst.Y, inst.XJ, inst.YJ, 0.0),
            loss_local_mix(inst.model, inst.X, inst.Y, 0.0, perm),
            loss_naive_mix(inst.model, inst.X, inst.Y, inst.mean, 0.0),
            loss_fedmix(inst.model, inst.X, inst.Y, inst.mean, 0.0),
        };
        for (const auto& o : outs) {
            EXPECT_NEAR(o.value, plain.value, 1e-10 * plain.value);
            expect_grads_equal(o.param_grads, plain.param_grads, 1e-10);
            EXPECT_FALSE(o.fallback);
        }
        // FedMix at zero is bit-exact, terms included
        EXPECT_EQ(outs[3].param_grads, plain.param_grads);
        EXPECT_EQ(outs[3].terms.l2, 0.0);
        EXPECT_EQ(outs[3].terms.l3, 0.0);
    }
}

TEST(GlobalMixup, MatchesPerPairBruteForce) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto inst = oracle::mix_instance(seed, 3);
        double got = loss_global_mixup(inst.model, inst.X, inst.Y, inst.XJ, inst.YJ, 0.1).value;
        double want = oracle::global_mixup_brute(inst.model, inst.X, inst.Y, inst.XJ, inst.YJ, 0.1);
        EXPECT_NEAR(got, want, 1e-12 * want);
    }
}

TEST(GlobalMixup, SelfMixingIsPlain) {
    auto inst = oracle::mix_instance(4, 1);
    Tensor x({1, inst.X.cols()}), y({1, inst.Y.cols()});
    std::copy_n(inst.X.row(0).begin(), x.size(), x.data().begin());
    std::copy_n(inst.Y.row(0).begin(), y.size(), y.data().begin());
    for (double lambda : {0.1, 0.5, 0.9}) {
        auto o = loss_global_mixup(inst.model, x, y, x, y, lambda);
        EXPECT_NEAR(o.value, oracle::loss_at(inst.model, x, y), 1e-12);
    }
}

TEST(GlobalMixup, RejectsEmptyExternalSet) {
    auto inst = oracle::mix_instance(0, 2);
    EXPECT_THROW(loss_global_mixup(inst.model, inst.X, inst.Y, Tensor::matrix(0, inst.X.cols()),
                                   Tensor::matrix(0, inst.Y.cols()), 0.1),
                 ArgumentError);
}

TEST(LocalMix, IdentityPermutationIsPlain) {
    auto inst = oracle::mix_instance(9, 1);
    std::vector<std::size_t> id(inst.X.rows());
    std::iota(id.begin(), id.end(), std::size_t{0});
    auto o = loss_local_mix(inst.model, inst.X, inst.Y, 0.4, id);
    EXPECT_NEAR(o.value, loss_plain(inst.model, inst.X, inst.Y).value, 1e-12);
}

TEST(LocalMix, TwoSampleHalfMixIsTheirMidpoint) {
    Model m;
    m.layers.push_back({Tensor({2, 2}, {1.0, -0.5, 0.25, 0.75}), Tensor({2}, {0.1, -0.1})});
    Tensor X({2, 2}, {1, 0, 0, 1}), Y({2, 2}, {1, 0, 0, 1});
    std::vector<std::size_t> swap{1, 0};
    auto o = loss_local_mix(m, X, Y, 0.5, swap);
    // both mixed rows are x = (0.5, 0.5), y = (0.5, 0.5): z = (0.35, 0.4)
    double z0 = 0.25 + 0.1, z1 = 0.5 - 0.1;
    double lse = std::log(std::exp(z0) + std::exp(z1));
    EXPECT_NEAR(o.value, lse - 0.5 * (z0 + z1), 1e-14);
}

TEST(LocalMix, SingleSampleFallsBack) {
    auto inst = oracle::mix_instance(2, 1);
    Tensor x({1, inst.X.cols()}), y({1, inst.Y.cols()});
    std::copy_n(inst.X.row(0).begin(), x.size(), x.data().begin());
    std::copy_n(inst.Y.row(0).begin(), y.size(), y.data().begin());
    Rng rng(1);
    auto o = loss_local_mix(inst.model, x, y, 0.3, rng);
    EXPECT_TRUE(o.fallback);
    EXPECT_DOUBLE_EQ(o.value, loss_plain(inst.model, x, y).value);
}

TEST(NaiveMix, LambdaOneIgnoresLocalLabels) {
    auto inst = oracle::mix_instance(5, 4);
    auto o = loss_naive_mix(inst.model, inst.X, inst.Y, inst.mean, 1.0);
    Tensor x({1, inst.X.cols()}, inst.mean.x_bar), y({1, inst.Y.cols()}, inst.mean.y_bar);
    EXPECT_NEAR(o.value, oracle::loss_at(inst.model, x, y), 1e-12);
}

TEST(NaiveMix, MatchesCompositionalOracle) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto inst = oracle::mix_instance(seed, 4);
        const double lambda = 0.2;
        double want = 0.0;
        for (std::size_t i = 0; i < inst.X.rows(); ++i) {
            Tensor xi({1, inst.X.cols()}), yi({1, inst.Y.cols()});
            std::copy_n(inst.X.row(i).begin(), xi.size(), xi.data().begin());
            std::copy_n(inst.Y.row(i).begin(), yi.size(), yi.data().begin());
            Tensor xb({1, inst.X.cols()}, inst.mean.x_bar), yb({1, inst.Y.cols()}, inst.mean.y_bar);
            auto [xm, ym] = mixup_pair(xi, yi, xb, yb, lambda);
            Tensor p = forward(inst.model, xm);
            want += (1.0 - lambda) * cross_entropy(p, yi) + lambda * cross_entropy(p, yb);
        }
        want /= static_cast<double>(inst.X.rows());
        EXPECT_NEAR(loss_naive_mix(inst.model, inst.X, inst.Y, inst.mean, lambda).value, want, 1e-12 * want);
    }
}

TEST(FedMix, ZeroMeanOwnLabelCollapses) {
    auto inst = oracle::mix_instance(6, 1);
    Tensor x({1, inst.X.cols()}), y({1, inst.Y.cols()});
    std::copy_n(inst.X.row(0).begin(), x.size(), x.data().begin());
    std::copy_n(inst.Y.row(0).begin(), y.size(), y.data().begin());
    MashedEntry e{std::vector<double>(x.size(), 0.0), std::vector<double>(y.data().begin(), y.data().end()), 1, 0, 0};
    for (double lambda : {0.05, 0.3}) {
        auto o = loss_fedmix(inst.model, x, y, e, lambda);
        EXPECT_NEAR(o.value, oracle::loss_at(inst.model, scaled(x, 1.0 - lambda), y), 1e-12);
        EXPECT_EQ(o.terms.l3, 0.0);
    }
}

TEST(FedMix, TermsAndFlags) {
    auto inst = oracle::mix_instance(8, 3);
    auto o = loss_fedmix(inst.model, inst.X, inst.Y, inst.mean, 0.1);
    EXPECT_NEAR(o.value, o.terms.l1 + o.terms.l2 + o.terms.l3, 1e-15);
    EXPECT_FALSE(o.approximation_flag);
    EXPECT_TRUE(loss_fedmix(inst.model, inst.X, inst.Y, inst.mean, 0.5).approximation_flag);
    MashedEntry bad = inst.mean;
    bad.x_bar.push_back(0.0);
    EXPECT_THROW(loss_fedmix(inst.model, inst.X, inst.Y, bad, 0.1), ShapeError);
}

TEST(FedMix, LinearityOverTheExternalSet) {
    EXPECT_LT(oracle::linearity_residual(50), 1e-10);
}

TEST(FedMix, ApproximationErrorIsSecondOrder) {
    auto s = oracle::taylor_order(50);
    EXPECT_GE(static_cast<double>(s.passing), 0.9 * static_cast<double>(s.total));
}

TEST(Gradients, AllVariantsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        auto inst = oracle::mix_instance(seed, 3, 0.3);
        const double lambda = 0.3;
        std::vector<std::size_t> perm(inst.X.rows());
        std::iota(perm.rbegin(), perm.rend(), std::size_t{0});
        auto check = [&](auto loss) {
            auto analytic = flatten(loss(inst.model).param_grads);
            auto numeric = fd_grad(inst.model, [&](const Model& m) { return loss(m).value; });
            for (std::size_t i = 0; i < analytic.size(); ++i)
                EXPECT_TRUE(oracle::close(analytic[i], numeric[i], 1e-3, 1e-7))
                    << "seed " << seed << " param " << i << ": " << analytic[i] << " vs " << numeric[i];
        };
        check([&](const Model& m) { return loss_fedmix(m, inst.X, inst.Y, inst.mean, lambda); });
        check([&](const Model& m) { return loss_naive_mix(m, inst.X, inst.Y, inst.mean, lambda); });
        check([&](const Model& m) { return loss_global_mixup(m, inst.X, inst.Y, inst.XJ, inst.YJ, lambda); });
        check([&](const Model& m) { return loss_local_mix(m, inst.X, inst.Y, lambda, perm); });
    }
}

TEST(FedProx, Values) {
    Model a;
    a.layers.push_back({Tensor({2, 4}, std::vector<double>(8, 1.0)), Tensor({2}, {1.0, 1.0})});
    Model anchor = zeros_like(a);
    auto p = fedprox_penalty(a, anchor, 0.1);
    EXPECT_NEAR(p.value, 0.5, 1e-15);
    for (double g : flatten(p.grads)) EXPECT_NEAR(g, 0.1, 1e-15);
    auto same = fedprox_penalty(a, a, 0.7);
    EXPECT_EQ(same.value, 0.0);
    for (double g : flatten(same.grads)) EXPECT_EQ(g, 0.0);
    EXPECT_EQ(fedprox_penalty(a, anchor, 0.0).value, 0.0);
    EXPECT_THROW(fedprox_penalty(a, anchor, -1.0), ArgumentError);
}

TEST(DrawLambda, FixedAndBeta) {
    Rng rng(12);
    MixupPolicy fixed;
    for (int i = 0; i < 10; ++i) EXPECT_EQ(draw_lambda(fixed, rng), 0.05);

    MixupPolicy uniform{LambdaMode::beta, 0.0, 1.0};
    double sum = 0.0;
    for (int i = 0; i < 100000; ++i) {
        double l = draw_lambda(uniform, rng);
        ASSERT_GE(l, 0.0);
        ASSERT_LE(l, 1.0);
        sum += l;
    }
    EXPECT_NEAR(sum / 1e5, 0.5, 0.01);

    MixupPolicy peaked{LambdaMode::beta, 0.0, 500.0};
    double dev = 0.0;
    for (int i = 0; i < 2000; ++i) dev = std::max(dev, std::abs(draw_lambda(peaked, rng) - 0.5));
    EXPECT_LT(dev, 0.1);

    EXPECT_THROW((MixupPolicy{LambdaMode::fixed, 1.5, 1.0}.validate()), ArgumentError);
    EXPECT_THROW((MixupPolicy{LambdaMode::beta, 0.0, 0.0}.validate()), ArgumentError);
}

}  // namespace
}  // namespace fedmix
