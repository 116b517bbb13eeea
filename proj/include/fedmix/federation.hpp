// Round-based parameter-server simulation.
//
// One run: build the averaged-data table once, then for every round select K
// clients, train each locally with the configured loss variant, and replace
// the global model with the n_k-weighted mean of the returned models.
// Every client owns a model copy and random streams derived from
// (seed, round, client id), so the result does not depend on thread count.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedmix/data.hpp"
#include "fedmix/errors.hpp"
#include "fedmix/losses.hpp"
#include "fedmix/mashing.hpp"
#include "fedmix/model.hpp"
#include "fedmix/parallel.hpp"
#include "fedmix/random.hpp"

namespace fedmix {

enum class Variant { fedavg, localmix, globalmix, naivemix, fedmix };

inline bool uses_mash(Variant v) { return v == Variant::naivemix || v == Variant::fedmix; }

inline bool lambda_always_zero(const MixupPolicy& p) { return p.mode == LambdaMode::fixed && p.lambda == 0.0; }

struct FedConfig {
    std::size_t num_clients = 20;        // N
    std::size_t clients_per_round = 5;   // K
    std::size_t rounds = 60;             // T
    std::size_t local_epochs = 2;        // E
    std::size_t local_batch_size = 10;   // B
    double learning_rate = 0.01;         // eta
    double learning_decay_rate = 0.999;  // per round
    Variant variant = Variant::fedavg;
    MashSource mash_source = MashSource::global;
    MixupPolicy lambda;
    std::size_t mash_batch_size = 0;  // M_k; 0 uses the whole shard
    MashSplit mash_split = MashSplit::random;
    double mu_fedprox = 0.0;
    double noise_sigma = 0.0;
    std::size_t threshold = 0;
    std::size_t server_fold = 1;       // m
    std::size_t global_mix_pool = 10;  // |J| raw external samples per batch (globalmix)
    std::vector<std::size_t> hidden_layers{32};
    std::uint64_t seed = 0;

    bool operator==(const FedConfig&) const = default;

    void validate() const {
        if (num_clients < 1) throw ConfigError("num_clients", "must be >= 1");
        if (clients_per_round < 1 || clients_per_round > num_clients)
            throw ConfigError("clients_per_round", "must satisfy 1 <= K <= N");
        if (local_epochs < 1) throw ConfigError("local_epochs", "must be >= 1");
        if (local_batch_size < 1) throw ConfigError("local_batch_size", "must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate", "must be > 0");
        if (!(learning_decay_rate > 0.0 && learning_decay_rate <= 1.0))
            throw ConfigError("learning_decay_rate", "must lie in (0, 1]");
        try {
            lambda.validate();
        } catch (const ArgumentError& e) {
            throw ConfigError("lambda", e.what());
        }
        if (!(mu_fedprox >= 0.0)) throw ConfigError("mu_fedprox", "must be >= 0");
        if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma", "must be >= 0");
        if (server_fold < 1) throw ConfigError("server_fold", "must be >= 1");
        if (variant == Variant::globalmix && global_mix_pool < 1)
            throw ConfigError("global_mix_pool", "must be >= 1");
    }
};

struct RoundMetrics {
    std::size_t round = 0;  // rounds completed, starting at 1
    double test_accuracy = 0.0;
    double test_loss = 0.0;
    double train_loss = 0.0;  // mean batch loss over the round's local steps
    LossTerms terms;          // mean per-term values
    std::size_t fallback_batches = 0;
    double param_cost = 0.0;  // cumulative
    double mash_cost = 0.0;

    bool operator==(const RoundMetrics& o) const {
        return round == o.round && test_accuracy == o.test_accuracy && test_loss == o.test_loss &&
               train_loss == o.train_loss && terms.l1 == o.terms.l1 && terms.l2 == o.terms.l2 &&
               terms.l3 == o.terms.l3 && fallback_batches == o.fallback_batches && param_cost == o.param_cost &&
               mash_cost == o.mash_cost;
    }
};

// Uniform sample of K distinct ids from [0, N), returned sorted.
inline std::vector<std::size_t> select_clients(std::size_t N, std::size_t K, Rng& rng) {
    if (K > N) throw ArgumentError("cannot select more clients than exist");
    std::vector<std::size_t> ids(N);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    for (std::size_t i = 0; i < K; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, N - 1);
        std::swap(ids[i], ids[pick(rng)]);
    }
    ids.resize(K);
    std::sort(ids.begin(), ids.end());
    return ids;
}

// Elementwise weighted mean of models.
inline Model server_aggregate(std::span<const Model> models, std::span<const double> weights) {
    if (models.empty()) throw ArgumentError("nothing to aggregate");
    if (weights.size() != models.size()) throw ArgumentError("one weight per model required");
    double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("aggregation weights must sum to 1");
    for (const auto& m : models) require_same_layout(models.front(), m);
    Model out = zeros_like(models.front());
    for (std::size_t k = 0; k < models.size(); ++k) add_scaled(out, models[k], weights[k]);
    return out;
}

struct Evaluation {
    double accuracy = 0.0;
    double loss = 0.0;
};

// Accuracy with argmax ties broken to the lowest class index.
inline Evaluation evaluate(const Model& m, const Dataset& test) {
    if (test.size() == 0) throw ArgumentError("empty test set");
    Tensor probs = forward(m, test.X);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        auto r = probs.row(i);
        auto pred = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
        if (pred == test.label(i)) ++correct;
    }
    return {static_cast<double>(correct) / static_cast<double>(test.size()), cross_entropy(probs, test.Y)};
}

enum class MashSchedule { once, every_round };

struct CommCost {
    double param_cost = 0.0;
    double mash_cost = 0.0;
    double ratio = 0.0;  // mash / param
};

// Parameters: 2 N p_m per round. Averaged data: 2 N d_i per entry per client,
// sent once (or every round).
inline CommCost comm_cost(std::size_t clients, std::size_t input_dim, std::size_t param_count, std::size_t rounds,
                          double entries_per_client, MashSchedule schedule = MashSchedule::once) {
    if (param_count == 0) throw ArgumentError("parameter count must be positive");
    CommCost c;
    const double N = static_cast<double>(clients);
    c.param_cost = 2.0 * N * static_cast<double>(param_count) * static_cast<double>(rounds);
    double exchanges = schedule == MashSchedule::once ? (rounds > 0 ? 1.0 : 0.0) : static_cast<double>(rounds);
    c.mash_cost = 2.0 * N * static_cast<double>(input_dim) * entries_per_client * exchanges;
    // the 2N factors cancel; written in closed form so the ratio is exactly
    // d_i e / (T p_m) (one-shot) or d_i e / p_m (per round)
    if (rounds > 0) {
        const double de = static_cast<double>(input_dim) * entries_per_client, p = static_cast<double>(param_count);
        c.ratio = schedule == MashSchedule::once ? de / (p * static_cast<double>(rounds)) : de / p;
    }
    return c;
}

inline CommCost comm_cost(const FedConfig& cfg, const Model& model, std::size_t rounds, std::size_t mash_entries,
                          MashSchedule schedule = MashSchedule::once) {
    return comm_cost(cfg.num_clients, model.input_dim(), model.parameter_count(), rounds,
                     static_cast<double>(mash_entries) / static_cast<double>(cfg.num_clients), schedule);
}

// Raw rows of every client, used only by the Global Mixup oracle.
struct RawPool {
    Dataset data;
    std::vector<std::size_t> owner;
};

inline RawPool build_raw_pool(std::span<const ClientShard> shards) {
    RawPool pool;
    std::size_t n = 0;
    for (const auto& s : shards) n += s.size();
    if (shards.empty()) return pool;
    const std::size_t d = shards.front().data.dim(), C = shards.front().data.classes;
    pool.data = {Tensor::matrix(n, d), Tensor::matrix(n, C), C};
    std::size_t r = 0;
    for (const auto& s : shards) {
        for (std::size_t i = 0; i < s.size(); ++i, ++r) {
            std::copy_n(s.data.X.row(i).begin(), d, pool.data.X.row(r).begin());
            std::copy_n(s.data.Y.row(i).begin(), C, pool.data.Y.row(r).begin());
            pool.owner.push_back(s.client_id);
        }
    }
    return pool;
}

struct LocalContext {
    std::size_t round = 0;
    const GlobalMash* mash = nullptr;  // table entries are drawn from
    const RawPool* raw = nullptr;      // globalmix only
};

struct LocalResult {
    Model model;
    double loss_sum = 0.0;
    LossTerms term_sums;
    std::size_t batches = 0;
    std::size_t fallback_batches = 0;
};

namespace detail {

inline std::pair<Tensor, Tensor> sample_external(const RawPool& raw, std::size_t exclude_owner, std::size_t count,
                                                 Rng& rng) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < raw.owner.size(); ++i)
        if (raw.owner[i] != exclude_owner) candidates.push_back(i);
    if (candidates.empty()) return {};
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    std::vector<std::size_t> rows(count);
    for (auto& r : rows) r = candidates[pick(rng)];
    Dataset s = subset(raw.data, rows);
    return {std::move(s.X), std::move(s.Y)};
}

}  // namespace detail

// E epochs of minibatch SGD on one client, starting from the global model.
// Batch order comes from one stream and all mixing randomness (lambda draws,
// entry choice, permutations, external samples) from another, so a variant
// at lambda == 0 walks exactly the FedAvg trajectory.
inline LocalResult local_update(const ClientShard& shard, const Model& global, const FedConfig& cfg,
                                const LocalContext& ctx) {
    if (shard.size() == 0) throw ArgumentError("local_update on an empty shard");
    Rng order_rng = make_rng(cfg.seed, Stream::client, {ctx.round, shard.client_id, 0});
    Rng mix_rng = make_rng(cfg.seed, Stream::client, {ctx.round, shard.client_id, 1});
    const double eta = cfg.learning_rate * std::pow(cfg.learning_decay_rate, static_cast<double>(ctx.round));
    const std::size_t n = shard.size(), B = cfg.local_batch_size;

    LocalResult res;
    res.model = global;
    std::vector<std::size_t> rows;
    for (std::size_t e = 0; e < cfg.local_epochs; ++e) {
        auto order = shuffled_indices(n, order_rng);
        for (std::size_t begin = 0; begin < n; begin += B) {
            const std::size_t len = std::min(B, n - begin);
            rows.assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                        order.begin() + static_cast<std::ptrdiff_t>(begin + len));
            Dataset batch = subset(shard.data, rows);
            const Model& w = res.model;

            LossOutput loss;
            switch (cfg.variant) {
                case Variant::fedavg:
                    loss = loss_plain(w, batch.X, batch.Y);
                    break;
                case Variant::localmix:
                    loss = loss_local_mix(w, batch.X, batch.Y, draw_lambda(cfg.lambda, mix_rng), mix_rng);
                    break;
                case Variant::globalmix: {
                    double lam = draw_lambda(cfg.lambda, mix_rng);
                    auto [XJ, YJ] = ctx.raw ? detail::sample_external(*ctx.raw, shard.client_id, cfg.global_mix_pool, mix_rng)
                                            : std::pair<Tensor, Tensor>{};
                    if (XJ.rows() == 0) {
                        loss = loss_plain(w, batch.X, batch.Y);
                        loss.fallback = true;
                    } else {
                        loss = loss_global_mixup(w, batch.X, batch.Y, XJ, YJ, lam);
                    }
                    break;
                }
                case Variant::naivemix:
                case Variant::fedmix: {
                    double lam = draw_lambda(cfg.lambda, mix_rng);
                    if (!ctx.mash || ctx.mash->empty()) {
                        loss = loss_plain(w, batch.X, batch.Y);
                        loss.fallback = lam != 0.0;
                        break;
                    }
                    std::uniform_int_distribution<std::size_t> pick(0, ctx.mash->size() - 1);
                    const MashedEntry& entry = ctx.mash->entries[pick(mix_rng)];
                    loss = cfg.variant == Variant::fedmix ? loss_fedmix(w, batch.X, batch.Y, entry, lam)
                                                          : loss_naive_mix(w, batch.X, batch.Y, entry, lam);
                    break;
                }
            }
            if (cfg.mu_fedprox > 0.0) {
                PenaltyOutput prox = fedprox_penalty(w, global, cfg.mu_fedprox);
                loss.value += prox.value;
                add_scaled(loss.param_grads, prox.grads, 1.0);
            }
            res.loss_sum += loss.value;
            res.term_sums.l1 += loss.terms.l1;
            res.term_sums.l2 += loss.terms.l2;
            res.term_sums.l3 += loss.terms.l3;
            ++res.batches;
            if (loss.fallback) ++res.fallback_batches;
            sgd_step(res.model, loss.param_grads, eta);
        }
    }
    return res;
}

// Averaged-data phase: threshold, per-client means, ordered merge, m-fold
// server averaging, then Gaussian noise.
inline GlobalMash build_global_mash(std::span<const ClientShard> shards, const FedConfig& cfg) {
    auto passing = apply_threshold(shards, cfg.threshold);
    std::vector<std::vector<MashedEntry>> lists(passing.size());
    for (std::size_t i = 0; i < passing.size(); ++i) {
        const auto& s = passing[i];
        std::size_t m = cfg.mash_batch_size == 0 ? s.size() : std::min(cfg.mash_batch_size, s.size());
        lists[i] = mash_local(s, m, cfg.mash_split, cfg.seed);
    }
    GlobalMash g = aggregate(lists);
    g = server_average(g, cfg.server_fold, cfg.seed);
    return add_gaussian_noise(g, cfg.noise_sigma, cfg.seed);
}

struct FederationResult {
    std::vector<RoundMetrics> metrics;
    Model model;
    GlobalMash mash;
};

using MetricsSink = std::function<void(const RoundMetrics&)>;

inline FederationResult run_federation(const FedConfig& cfg, std::span<const ClientShard> shards, const Dataset& test,
                                       std::size_t threads = 1, const MetricsSink& sink = {}) {
    cfg.validate();
    if (shards.size() != cfg.num_clients)
        throw ConfigError("num_clients", "expected " + std::to_string(cfg.num_clients) + " shards, got " +
                                             std::to_string(shards.size()));
    for (std::size_t k = 0; k < shards.size(); ++k)
        if (shards[k].client_id != k) throw ConfigError("partition", "shards must be ordered by client id");
    if (test.size() == 0) throw ConfigError("test", "held-out test set is empty");

    const std::size_t d = shards.front().data.dim(), C = shards.front().data.classes;
    std::vector<std::size_t> dims{d};
    dims.insert(dims.end(), cfg.hidden_layers.begin(), cfg.hidden_layers.end());
    dims.push_back(C);
    Rng init_rng = make_rng(cfg.seed, Stream::init);

    FederationResult result;
    result.model = init_model(dims, init_rng);

    // averaged data is exchanged once, before the first round
    // with lambda fixed at 0 the table would never be read, so nothing is sent
    const bool exchange = uses_mash(cfg.variant) && !lambda_always_zero(cfg.lambda);
    std::vector<GlobalMash> local_tables;
    if (exchange) {
        switch (cfg.mash_source) {
            case MashSource::global:
                result.mash = build_global_mash(shards, cfg);
                break;
            case MashSource::random_noise: {
                std::size_t entries = build_global_mash(shards, cfg).size();
                result.mash = synthetic_mash(MashSource::random_noise, {d, C, entries, nullptr, 0, cfg.seed});
                break;
            }
            case MashSource::local_means:
                for (const auto& s : shards)
                    local_tables.push_back(
                        synthetic_mash(MashSource::local_means, {d, C, 0, &s, cfg.mash_batch_size, cfg.seed}));
                break;
        }
    }
    std::optional<RawPool> raw;
    if (cfg.variant == Variant::globalmix) raw = build_raw_pool(shards);

    // only a server-built table travels over the network
    const std::size_t mash_entries = exchange && cfg.mash_source == MashSource::global ? result.mash.size() : 0;

    for (std::size_t t = 0; t < cfg.rounds; ++t) {
        Rng select_rng = make_rng(cfg.seed, Stream::select, {t});
        auto selected = select_clients(cfg.num_clients, cfg.clients_per_round, select_rng);

        std::vector<LocalResult> updates(selected.size());
        parallel_for(selected.size(), threads, [&](std::size_t i) {
            const auto& shard = shards[selected[i]];
            LocalContext ctx{t, &result.mash, raw ? &*raw : nullptr};
            if (exchange && cfg.mash_source == MashSource::local_means)
                ctx.mash = &local_tables[shard.client_id];
            updates[i] = local_update(shard, result.model, cfg, ctx);
            if (!updates[i].model.all_finite()) throw DivergenceError(t, shard.client_id);
        });

        std::vector<Model> models;
        std::vector<double> weights;
        double total = 0.0;
        for (auto k : selected) total += static_cast<double>(shards[k].size());
        RoundMetrics rm;
        std::size_t batches = 0;
        for (std::size_t i = 0; i < selected.size(); ++i) {
            models.push_back(std::move(updates[i].model));
            weights.push_back(static_cast<double>(shards[selected[i]].size()) / total);
            rm.train_loss += updates[i].loss_sum;
            rm.terms.l1 += updates[i].term_sums.l1;
            rm.terms.l2 += updates[i].term_sums.l2;
            rm.terms.l3 += updates[i].term_sums.l3;
            rm.fallback_batches += updates[i].fallback_batches;
            batches += updates[i].batches;
        }
        // normalization round-off must not trip the sum-to-one check
        double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
        for (auto& w : weights) w /= wsum;
        result.model = server_aggregate(models, weights);

        const double inv = 1.0 / static_cast<double>(batches);
        rm.train_loss *= inv;
        rm.terms.l1 *= inv;
        rm.terms.l2 *= inv;
        rm.terms.l3 *= inv;
        rm.round = t + 1;
        Evaluation ev = evaluate(result.model, test);
        rm.test_accuracy = ev.accuracy;
        rm.test_loss = ev.loss;
        CommCost cost = comm_cost(cfg, result.model, t + 1, mash_entries);
        rm.param_cost = cost.param_cost;
        rm.mash_cost = cost.mash_cost;
        if (sink) sink(rm);
        result.metrics.push_back(rm);
    }
    return result;
}

// First round whose raw test accuracy reaches `target`.
inline std::optional<std::size_t> rounds_to_target(std::span<const RoundMetrics> curve, double target) {
    for (const auto& m : curve)
        if (m.test_accuracy >= target) return m.round;
    return std::nullopt;
}

}  // namespace fedmix
