#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "fedmix/federation.hpp"
#include "fedmix/oracles.hpp"

namespace fedmix {
namespace {

struct Setup {
    std::vector<ClientShard> shards;
    Dataset test;
};

Setup small_setup(std::size_t N, std::size_t cpc, std::uint64_t seed, std::size_t classes = 4) {
    Dataset full = make_blobs(classes, 6, 40, 1.5, seed);
    auto [train, test] = split_holdout(full, 10, seed);
    return {partition_by_class(train, N, cpc, seed), test};
}

FedConfig small_config(std::size_t N, std::size_t K, std::size_t T, std::uint64_t seed) {
    FedConfig cfg;
    cfg.num_clients = N;
    cfg.clients_per_round = K;
    cfg.rounds = T;
    cfg.local_epochs = 2;
    cfg.local_batch_size = 7;
    cfg.learning_rate = 0.05;
    cfg.hidden_layers = {8};
    cfg.seed = seed;
    return cfg;
}

TEST(SelectClients, EdgeCases) {
    Rng rng(1);
    auto all = select_clients(6, 6, rng);
    EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
    EXPECT_EQ(select_clients(6, 1, rng).size(), 1u);
    EXPECT_THROW(select_clients(3, 4, rng), ArgumentError);
}

TEST(SelectClients, UniformFrequency) {
    std::vector<std::size_t> hits(10, 0);
    for (std::uint64_t s = 0; s < 10000; ++s) {
        Rng rng = make_rng(s, Stream::select);
        auto ids = select_clients(10, 3, rng);
        ASSERT_EQ(std::set<std::size_t>(ids.begin(), ids.end()).size(), 3u);
        for (auto k : ids) ++hits[k];
    }
    for (auto h : hits) EXPECT_NEAR(static_cast<double>(h) / 1e4, 0.3, 0.02);
}

TEST(Aggregate, Cases) {
    Model a, b;
    a.layers.push_back({Tensor({1, 2}, {0.0, 0.0}), Tensor({1}, {0.0})});
    b.layers.push_back({Tensor({1, 2}, {2.0, 2.0}), Tensor({1}, {2.0})});
    std::vector<Model> ms{a, b};
    std::vector<double> half{0.5, 0.5}, first{1.0, 0.0};
    for (double v : flatten(server_aggregate(ms, half))) EXPECT_EQ(v, 1.0);

    Rng rng(3);
    std::vector<std::size_t> dims{5, 4, 3};
    std::vector<Model> rand{init_model(dims, rng), init_model(dims, rng)};
    EXPECT_EQ(server_aggregate(rand, first), rand[0]);
    std::vector<Model> same{rand[0], rand[0]};
    auto ident = flatten(server_aggregate(same, half)), want = flatten(rand[0]);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(ident[i], want[i], 1e-15);

    std::vector<double> bad{0.5, 0.4};
    EXPECT_THROW(server_aggregate(rand, bad), ArgumentError);
    std::vector<std::size_t> other{5, 3};
    std::vector<Model> mixed{rand[0], init_model(other, rng)};
    EXPECT_THROW(server_aggregate(mixed, half), ShapeError);
}

TEST(Aggregate, MatchesElementwiseOracle) {
    Rng rng(9);
    std::vector<std::size_t> dims{4, 6, 3};
    std::vector<Model> ms;
    for (int i = 0; i < 5; ++i) ms.push_back(init_model(dims, rng));
    std::vector<double> p{0.1, 0.3, 0.2, 0.25, 0.15};
    auto got = flatten(server_aggregate(ms, p));
    for (std::size_t i = 0; i < got.size(); ++i) {
        double want = 0.0;
        for (std::size_t k = 0; k < ms.size(); ++k) want += p[k] * flatten(ms[k])[i];
        EXPECT_NEAR(got[i], want, 1e-12);
    }
}

TEST(LocalUpdate, ZeroStepSizeIsBitExact) {
    auto s = small_setup(4, 2, 1);
    Rng rng(2);
    std::vector<std::size_t> dims{6, 8, 4};
    Model w = init_model(dims, rng);
    Model same = w;
    sgd_step(same, backward(w, s.test.X, s.test.Y).param_grads, 0.0);
    EXPECT_EQ(same, w);
}

TEST(LocalUpdate, FedAvgMatchesDirectSgdLoop) {
    auto s = small_setup(4, 2, 2);
    FedConfig cfg = small_config(4, 2, 1, 2);
    cfg.mu_fedprox = 0.0;
    Rng rng(4);
    std::vector<std::size_t> dims{6, 8, 4};
    Model w0 = init_model(dims, rng);
    const auto& shard = s.shards[1];
    const std::size_t round = 3;
    LocalResult res = local_update(shard, w0, cfg, {round, nullptr, nullptr});

    // direct loop: same batch stream, plain gradients, no loss family
    Model w = w0;
    Rng order = make_rng(cfg.seed, Stream::client, {round, shard.client_id, 0});
    const double eta = cfg.learning_rate * std::pow(cfg.learning_decay_rate, 3.0);
    for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
        auto idx = shuffled_indices(shard.size(), order);
        for (std::size_t b = 0; b < idx.size(); b += cfg.local_batch_size) {
            std::vector<std::size_t> rows(idx.begin() + b, idx.begin() + std::min(idx.size(), b + cfg.local_batch_size));
            Dataset batch = subset(shard.data, rows);
            auto g = backward(w, batch.X, batch.Y).param_grads;
            for (std::size_t l = 0; l < w.layers.size(); ++l) {
                for (std::size_t i = 0; i < w.layers[l].weight.size(); ++i)
                    w.layers[l].weight[i] -= eta * g.layers[l].weight[i];
                for (std::size_t i = 0; i < w.layers[l].bias.size(); ++i)
                    w.layers[l].bias[i] -= eta * g.layers[l].bias[i];
            }
        }
    }
    EXPECT_EQ(res.model, w);
    EXPECT_EQ(res.batches, cfg.local_epochs * ((shard.size() + cfg.local_batch_size - 1) / cfg.local_batch_size));
}

TEST(LocalUpdate, OneStepPerEpochWhenBatchCoversShard) {
    auto s = small_setup(4, 2, 3);
    FedConfig cfg = small_config(4, 2, 1, 3);
    cfg.local_epochs = 1;
    cfg.local_batch_size = 1000;
    Rng rng(1);
    std::vector<std::size_t> dims{6, 8, 4};
    EXPECT_EQ(local_update(s.shards[0], init_model(dims, rng), cfg, {}).batches, 1u);
}

TEST(LocalUpdate, EmptyMashFallsBack) {
    auto s = small_setup(4, 2, 5);
    FedConfig cfg = small_config(4, 2, 1, 5);
    cfg.variant = Variant::fedmix;
    Rng rng(1);
    std::vector<std::size_t> dims{6, 8, 4};
    GlobalMash empty;
    auto res = local_update(s.shards[0], init_model(dims, rng), cfg, {0, &empty, nullptr});
    EXPECT_EQ(res.fallback_batches, res.batches);
}

TEST(LocalUpdate, ProximalTermPullsTowardAnchor) {
    auto s = small_setup(4, 2, 6);
    FedConfig cfg = small_config(4, 2, 1, 6);
    cfg.local_epochs = 5;
    cfg.learning_rate = 0.2;
    Rng rng(1);
    std::vector<std::size_t> dims{6, 8, 4};
    Model w0 = init_model(dims, rng);
    auto dist = [&](const Model& m) {
        auto a = flatten(m), b = flatten(w0);
        double d = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
        return d;
    };
    double free = dist(local_update(s.shards[0], w0, cfg, {}).model);
    cfg.mu_fedprox = 1.0;
    double prox = dist(local_update(s.shards[0], w0, cfg, {}).model);
    EXPECT_LT(prox, free);
}

TEST(Run, ZeroRoundsReturnsInitialModel) {
    auto s = small_setup(4, 2, 7);
    FedConfig cfg = small_config(4, 2, 0, 7);
    auto r = run_federation(cfg, s.shards, s.test);
    EXPECT_TRUE(r.metrics.empty());
    std::vector<std::size_t> dims{6, 8, 4};
    Rng init = make_rng(cfg.seed, Stream::init);
    EXPECT_EQ(r.model, init_model(dims, init));
}

TEST(Run, SingleClientEqualsCentralizedSgd) {
    Dataset full = make_blobs(3, 4, 30, 1.0, 8);
    auto [train, test] = split_holdout(full, 5, 8);
    auto shards = partition_by_class(train, 1, 3, 8);
    FedConfig cfg = small_config(1, 1, 3, 8);
    cfg.learning_decay_rate = 0.9;
    auto r = run_federation(cfg, shards, test);

    std::vector<std::size_t> dims{4, 8, 3};
    Rng init = make_rng(cfg.seed, Stream::init);
    Model w = init_model(dims, init);
    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        Rng order = make_rng(cfg.seed, Stream::client, {t, 0, 0});
        const double eta = cfg.learning_rate * std::pow(0.9, static_cast<double>(t));
        for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
            auto idx = shuffled_indices(shards[0].size(), order);
            for (std::size_t b = 0; b < idx.size(); b += cfg.local_batch_size) {
                std::vector<std::size_t> rows(idx.begin() + b,
                                              idx.begin() + std::min(idx.size(), b + cfg.local_batch_size));
                Dataset batch = subset(shards[0].data, rows);
                sgd_step(w, backward(w, batch.X, batch.Y).param_grads, eta);
            }
        }
        // one client with weight 1: the average is the client's model
        EXPECT_EQ(r.metrics[t].test_accuracy, evaluate(w, test).accuracy);
    }
    EXPECT_EQ(r.model, w);
}

TEST(Run, EveryVariantAtLambdaZeroIsFedAvg) {
    auto s = small_setup(6, 2, 9);
    FedConfig base = small_config(6, 3, 4, 9);
    base.local_batch_size = 5;
    auto ref = run_federation(base, s.shards, s.test);
    for (Variant v : {Variant::localmix, Variant::globalmix, Variant::naivemix, Variant::fedmix}) {
        FedConfig cfg = base;
        cfg.variant = v;
        cfg.lambda.lambda = 0.0;
        auto r = run_federation(cfg, s.shards, s.test);
        EXPECT_EQ(r.metrics, ref.metrics) << "variant " << static_cast<int>(v);
        EXPECT_EQ(r.model, ref.model);
    }
}

TEST(Run, MixingVariantsActuallyMix) {
    auto s = small_setup(6, 2, 10);
    FedConfig base = small_config(6, 3, 2, 10);
    auto ref = run_federation(base, s.shards, s.test);
    for (Variant v : {Variant::localmix, Variant::globalmix, Variant::naivemix, Variant::fedmix}) {
        FedConfig cfg = base;
        cfg.variant = v;
        cfg.lambda.lambda = 0.2;
        auto r = run_federation(cfg, s.shards, s.test);
        EXPECT_NE(r.model, ref.model);
        if (v == Variant::fedmix) {
            EXPECT_NE(r.metrics.back().terms.l3, 0.0);
        }
    }
}

TEST(Run, ThreadCountDoesNotChangeResults) {
    auto s = small_setup(8, 2, 11);
    for (Variant v : {Variant::fedavg, Variant::globalmix, Variant::fedmix}) {
        FedConfig cfg = small_config(8, 4, 3, 11);
        cfg.variant = v;
        auto one = run_federation(cfg, s.shards, s.test, 1);
        auto many = run_federation(cfg, s.shards, s.test, 8);
        EXPECT_EQ(one.metrics, many.metrics);
        EXPECT_EQ(one.model, many.model);
    }
}

TEST(Run, MashSourcesAndCosts) {
    auto s = small_setup(6, 2, 12);
    FedConfig cfg = small_config(6, 2, 2, 12);
    cfg.variant = Variant::fedmix;
    auto g = run_federation(cfg, s.shards, s.test);
    EXPECT_EQ(g.mash.size(), 6u);  // whole-shard means, one per client
    EXPECT_GT(g.metrics.back().mash_cost, 0.0);
    EXPECT_EQ(g.metrics[0].mash_cost, g.metrics[1].mash_cost);  // sent once
    EXPECT_EQ(g.metrics[1].param_cost, 2.0 * g.metrics[0].param_cost);

    cfg.mash_source = MashSource::local_means;
    auto l = run_federation(cfg, s.shards, s.test);
    EXPECT_EQ(l.metrics.back().mash_cost, 0.0);
    EXPECT_NE(l.model, g.model);

    cfg.mash_source = MashSource::random_noise;
    auto r = run_federation(cfg, s.shards, s.test);
    EXPECT_EQ(r.mash.size(), 6u);
    EXPECT_NE(r.model, g.model);
}

TEST(Run, ThresholdCanEmptyTheTable) {
    auto s = small_setup(4, 2, 13);
    FedConfig cfg = small_config(4, 2, 1, 13);
    cfg.variant = Variant::naivemix;
    cfg.threshold = 100000;
    auto r = run_federation(cfg, s.shards, s.test);
    EXPECT_TRUE(r.mash.empty());
    EXPECT_GT(r.metrics[0].fallback_batches, 0u);
}

TEST(Run, DivergenceNamesRoundAndClient) {
    auto s = small_setup(4, 2, 14);
    FedConfig cfg = small_config(4, 2, 3, 14);
    cfg.learning_rate = 1e305;
    try {
        run_federation(cfg, s.shards, s.test);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_EQ(e.round, 0u);
        EXPECT_NE(std::string(e.what()).find("client"), std::string::npos);
    }
}

TEST(Run, RejectsBadConfigs) {
    auto s = small_setup(4, 2, 15);
    FedConfig cfg = small_config(4, 5, 1, 15);
    EXPECT_THROW(run_federation(cfg, s.shards, s.test), ConfigError);
    cfg = small_config(5, 2, 1, 15);
    EXPECT_THROW(run_federation(cfg, s.shards, s.test), ConfigError);
    cfg = small_config(4, 2, 1, 15);
    cfg.local_epochs = 0;
    try {
        run_federation(cfg, s.shards, s.test);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.field, "local_epochs");
    }
}

TEST(CommCost, Formulas) {
    auto c = comm_cost(20, 8, 1000, 10, 1.0);
    EXPECT_DOUBLE_EQ(c.ratio, 8e-4);
    EXPECT_DOUBLE_EQ(c.param_cost, 2.0 * 20 * 1000 * 10);
    EXPECT_DOUBLE_EQ(c.mash_cost, 2.0 * 20 * 8);
    EXPECT_DOUBLE_EQ(comm_cost(20, 8, 1000, 1, 1.0).ratio, 8.0 / 1000.0);
    EXPECT_DOUBLE_EQ(comm_cost(20, 8, 1000, 10, 1.0, MashSchedule::every_round).ratio, 8.0 / 1000.0);
    EXPECT_EQ(comm_cost(20, 8, 1000, 0, 1.0).ratio, 0.0);
    EXPECT_THROW(comm_cost(20, 8, 0, 10, 1.0), ArgumentError);
}

TEST(Evaluate, TieBreakAndPerfect) {
    std::vector<std::size_t> dims{3, 2};
    Model zero = zero_model(dims);
    Tensor X = Tensor::matrix(5, 3);
    std::vector<std::size_t> labels{0, 1, 1, 0, 1};
    Dataset ds = make_dataset(X, labels, 2);
    EXPECT_DOUBLE_EQ(evaluate(zero, ds).accuracy, 0.4);
    EXPECT_NEAR(evaluate(zero, ds).loss, std::log(2.0), 1e-15);

    std::vector<std::size_t> four{4, 4};
    Dataset bal = make_blobs(4, 4, 25, 1.0, 3);
    EXPECT_DOUBLE_EQ(evaluate(zero_model(four), bal).accuracy, 0.25);

    Model perfect;
    perfect.layers.push_back({Tensor({2, 2}, {50, 0, 0, 50}), Tensor({2})});
    Tensor Xp({2, 2}, {1, 0, 0, 1});
    std::vector<std::size_t> lp{0, 1};
    EXPECT_EQ(evaluate(perfect, make_dataset(Xp, lp, 2)).accuracy, 1.0);
}

TEST(RoundsToTarget, FirstCrossing) {
    std::vector<RoundMetrics> curve(3);
    for (std::size_t i = 0; i < 3; ++i) {
        curve[i].round = i + 1;
        curve[i].test_accuracy = 0.5 + 0.2 * static_cast<double>(i);
    }
    EXPECT_EQ(rounds_to_target(curve, 0.7), std::optional<std::size_t>(2));
    EXPECT_EQ(rounds_to_target(curve, 0.95), std::nullopt);
}

}  // namespace
}  // namespace fedmix
