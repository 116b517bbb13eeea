// Reference computations: central finite differences of forward() +
// cross_entropy(), brute-force loss evaluations and seeded instance families.
// Used by the property suites and the test programs.
#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "fedmix/losses.hpp"
#include "fedmix/model.hpp"

namespace fedmix::oracle {

inline double loss_at(const Model& m, const Tensor& X, const Tensor& Y) { return cross_entropy(forward(m, X), Y); }

// d loss / d w by central differences, flattened in fedmix::flatten order.
inline std::vector<double> fd_param_grad(const Model& m, const Tensor& X, const Tensor& Y, double eps = 1e-5) {
    std::vector<double> w = flatten(m), g(w.size());
    Model probe = m;
    for (std::size_t i = 0; i < w.size(); ++i) {
        auto wp = w, wm = w;
        wp[i] += eps;
        wm[i] -= eps;
        unflatten(probe, wp);
        double lp = loss_at(probe, X, Y);
        unflatten(probe, wm);
        double lm = loss_at(probe, X, Y);
        g[i] = (lp - lm) / (2.0 * eps);
    }
    return g;
}

inline Tensor fd_input_grad(const Model& m, const Tensor& X, const Tensor& Y, double eps = 1e-5) {
    Tensor g(X.shape());
    for (std::size_t i = 0; i < X.size(); ++i) {
        Tensor xp = X, xm = X;
        xp[i] += eps;
        xm[i] -= eps;
        g[i] = (loss_at(m, xp, Y) - loss_at(m, xm, Y)) / (2.0 * eps);
    }
    return g;
}

// [grad_w l(X + eps V) - grad_w l(X - eps V)] / (2 eps). The inner
// gradients come from backward(), which fd_param_grad checks separately; this
// oracle never touches the tangent propagation it is used against.
inline std::vector<double> fd_mixed_grad(const Model& m, const Tensor& X, const Tensor& Y, const Tensor& V,
                                         double eps = 1e-5) {
    auto gp = flatten(backward(m, linear_combination(1.0, X, eps, V), Y).param_grads);
    auto gm = flatten(backward(m, linear_combination(1.0, X, -eps, V), Y).param_grads);
    std::vector<double> g(gp.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (gp[i] - gm[i]) / (2.0 * eps);
    return g;
}

// Relative error with an absolute floor near zero.
inline bool close(double got, double want, double rel, double abs_floor) {
    double diff = std::abs(got - want);
    if (diff <= abs_floor) return true;
    return diff <= rel * std::max(std::abs(got), std::abs(want));
}

// Random instance for gradient checks: d_i <= 8, C <= 4, n <= 4, one hidden
// layer. Rejected when any hidden pre-activation sits within `margin` of the
// rectifier kink (finite differences are meaningless there).
struct Instance {
    Model model;
    Tensor X, Y, V;
};

inline Tensor hidden_preacts(const Model& m, const Tensor& X) { return forward_cached(m, X).preacts.front(); }

inline Instance random_instance(std::uint64_t seed, double margin = 1e-3) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> dpick(2, 8), cpick(2, 4), npick(1, 4), hpick(2, 6);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    for (;;) {
        const std::size_t d = dpick(rng), C = cpick(rng), n = npick(rng), h = hpick(rng);
        std::vector<std::size_t> dims{d, h, C};
        Instance inst;
        inst.model = init_model(dims, rng);
        for (auto& l : inst.model.layers)
            for (auto& b : l.bias.data()) b = 0.3 * nd(rng);
        inst.X = Tensor::matrix(n, d);
        inst.V = Tensor::matrix(n, d);
        for (auto& v : inst.X.data()) v = nd(rng);
        for (auto& v : inst.V.data()) v = nd(rng);
        inst.Y = Tensor::matrix(n, C);
        for (std::size_t i = 0; i < n; ++i) {
            // soft labels: random distribution
            double s = 0.0;
            for (std::size_t c = 0; c < C; ++c) s += (inst.Y(i, c) = ud(rng) + 1e-3);
            for (std::size_t c = 0; c < C; ++c) inst.Y(i, c) /= s;
        }
        Tensor z = hidden_preacts(inst.model, inst.X);
        bool ok = std::all_of(z.data().begin(), z.data().end(), [&](double v) { return std::abs(v) > margin; });
        if (ok) return inst;
    }
}

// Global Mixup evaluated one (i, j) pair at a time and hand-averaged.
inline double global_mixup_brute(const Model& m, const Tensor& X, const Tensor& Y, const Tensor& XJ, const Tensor& YJ,
                                 double lambda) {
    double total = 0.0;
    for (std::size_t i = 0; i < X.rows(); ++i) {
        for (std::size_t j = 0; j < XJ.rows(); ++j) {
            Tensor x({1, X.cols()}), y({1, Y.cols()});
            for (std::size_t k = 0; k < X.cols(); ++k) x[k] = (1.0 - lambda) * X(i, k) + lambda * XJ(j, k);
            for (std::size_t c = 0; c < Y.cols(); ++c) y[c] = (1.0 - lambda) * Y(i, c) + lambda * YJ(j, c);
            total += loss_at(m, x, y);
        }
    }
    return total / static_cast<double>(X.rows() * XJ.rows());
}

// Local batch plus a raw external set J with its mean entry.
struct MixInstance {
    Model model;
    Tensor X, Y, XJ, YJ;
    MashedEntry mean;
};

inline MashedEntry mean_entry(const Tensor& XJ, const Tensor& YJ) {
    MashedEntry e;
    e.x_bar.assign(XJ.cols(), 0.0);
    e.y_bar.assign(YJ.cols(), 0.0);
    for (std::size_t j = 0; j < XJ.rows(); ++j) {
        for (std::size_t k = 0; k < XJ.cols(); ++k) e.x_bar[k] += XJ(j, k);
        for (std::size_t c = 0; c < YJ.cols(); ++c) e.y_bar[c] += YJ(j, c);
    }
    for (auto& v : e.x_bar) v /= static_cast<double>(XJ.rows());
    for (auto& v : e.y_bar) v /= static_cast<double>(XJ.rows());
    e.source_count = XJ.rows();
    return e;
}

inline MashedEntry row_entry(const Tensor& XJ, const Tensor& YJ, std::size_t j) {
    auto x = XJ.row(j);
    auto y = YJ.row(j);
    return {std::vector<double>(x.begin(), x.end()), std::vector<double>(y.begin(), y.end()), 1, 0, j};
}

// One-hot labels, external set of size J. With `smooth_up_to` > 0 the
// instance is rejected unless every hidden rectifier keeps its sign over the
// whole region the Taylor comparison touches: points (1 - a) x_i + b x_j with
// 0 <= b <= a <= smooth_up_to. Hidden pre-activations are affine there, so
// the triangle's vertices decide. Every sample must also keep at least one
// rectifier active.
inline MixInstance mix_instance(std::uint64_t seed, std::size_t J, double smooth_up_to = 0.0) {
    std::mt19937_64 rng(seed ^ 0x5bd1e995u);
    std::uniform_int_distribution<std::size_t> dpick(2, 8), cpick(2, 4), npick(1, 4), hpick(2, 6);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (;;) {
        const std::size_t d = dpick(rng), C = cpick(rng), n = npick(rng), h = hpick(rng);
        std::vector<std::size_t> dims{d, h, C};
        MixInstance inst;
        inst.model = init_model(dims, rng);
        for (auto& l : inst.model.layers)
            for (auto& b : l.bias.data()) b = 0.3 * nd(rng);
        std::uniform_int_distribution<std::size_t> lpick(0, C - 1);
        auto fill = [&](Tensor& Xo, Tensor& Yo, std::size_t rows) {
            Xo = Tensor::matrix(rows, d);
            Yo = Tensor::matrix(rows, C);
            for (auto& v : Xo.data()) v = nd(rng);
            for (std::size_t r = 0; r < rows; ++r) Yo(r, lpick(rng)) = 1.0;
        };
        fill(inst.X, inst.Y, n);
        fill(inst.XJ, inst.YJ, J);
        inst.mean = mean_entry(inst.XJ, inst.YJ);
        if (smooth_up_to <= 0.0) return inst;

        const double a = smooth_up_to;
        Tensor probe = Tensor::matrix(n * (1 + 2 * J), d);
        std::size_t r = 0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < d; ++k) probe(r, k) = inst.X(i, k);
            ++r;
            for (std::size_t j = 0; j < J; ++j) {
                for (std::size_t k = 0; k < d; ++k) {
                    probe(r, k) = (1.0 - a) * inst.X(i, k);
                    probe(r + 1, k) = (1.0 - a) * inst.X(i, k) + a * inst.XJ(j, k);
                }
                r += 2;
            }
        }
        Tensor z = hidden_preacts(inst.model, probe);
        bool ok = true;
        for (std::size_t i = 0, row = 0; i < n && ok; ++i, row += 1 + 2 * J)
            for (std::size_t u = 0; u < h && ok; ++u)
                for (std::size_t q = 1; q < 1 + 2 * J && ok; ++q)
                    ok = (z(row, u) > 1e-3 && z(row + q, u) > 1e-3) || (z(row, u) < -1e-3 && z(row + q, u) < -1e-3);
        // a sample with every rectifier off sees a constant network: both
        // losses agree exactly and the error ratio is undefined
        for (std::size_t i = 0, row = 0; i < n && ok; ++i, row += 1 + 2 * J) {
            bool active = false;
            for (std::size_t u = 0; u < h; ++u) active = active || z(row, u) > 0.0;
            ok = active;
        }
        if (ok) return inst;
    }
}

// |FedMix(mean entry) - Global Mixup(J)| at lambda.
inline double taylor_error(const MixInstance& inst, double lambda) {
    double fm = loss_fedmix(inst.model, inst.X, inst.Y, inst.mean, lambda).value;
    double gm = global_mixup_brute(inst.model, inst.X, inst.Y, inst.XJ, inst.YJ, lambda);
    return std::abs(fm - gm);
}

// Fraction of instances whose error ratios err(l/2)/err(l), l in {0.2, 0.1},
// both lie in [lo, hi].
struct TaylorSummary {
    std::size_t passing = 0;
    std::size_t total = 0;
    std::vector<double> ratios;
};

inline TaylorSummary taylor_order(std::size_t instances, double lo = 0.15, double hi = 0.45) {
    TaylorSummary s;
    for (std::uint64_t seed = 0; seed < instances; ++seed) {
        auto inst = mix_instance(seed, 5, 0.2);
        double e20 = taylor_error(inst, 0.2), e10 = taylor_error(inst, 0.1), e05 = taylor_error(inst, 0.05);
        double r1 = e10 / e20, r2 = e05 / e10;
        s.ratios.push_back(r1);
        s.ratios.push_back(r2);
        ++s.total;
        if (r1 >= lo && r1 <= hi && r2 >= lo && r2 <= hi) ++s.passing;
    }
    return s;
}

// max relative residual between the mean over j of per-entry FedMix values and
// FedMix on the mean entry, across `instances` seeds and |J| in {2, 5, 20}.
inline double linearity_residual(std::size_t instances, double lambda = 0.1) {
    double worst = 0.0;
    for (std::size_t J : {2u, 5u, 20u}) {
        for (std::uint64_t seed = 0; seed < instances; ++seed) {
            auto inst = mix_instance(seed * 31 + J, J);
            // per-j terms built from backward() directly:
            //   (1 - l) loss(X', Y) + l loss(X', y_j) + l <grad_X loss(X', Y), x_j>
            const std::size_t n = inst.X.rows();
            Tensor Xs = scaled(inst.X, 1.0 - lambda);
            GradientBundle base = backward(inst.model, Xs, inst.Y);
            Tensor probs = forward(inst.model, Xs);
            double per_j = 0.0;
            for (std::size_t j = 0; j < J; ++j) {
                auto e = row_entry(inst.XJ, inst.YJ, j);
                per_j += (1.0 - lambda) * base.loss_value + lambda * cross_entropy(probs, broadcast_rows(e.y_bar, n)) +
                         lambda * dot(base.input_grad, broadcast_rows(e.x_bar, n));
            }
            per_j /= static_cast<double>(J);
            double on_mean = loss_fedmix(inst.model, inst.X, inst.Y, inst.mean, lambda).value;
            worst = std::max(worst, std::abs(per_j - on_mean) / std::max(std::abs(on_mean), 1e-300));
        }
    }
    return worst;
}

}  // namespace fedmix::oracle
