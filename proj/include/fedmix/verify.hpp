// Self-contained property suites: gradient checks, the second-order Taylor
// claim, the linearity identity, lambda == 0 degeneracy, mean preservation,
// partition covers and the communication-cost formulas. Each suite returns a
// named pass/fail with the measured values; no dataset files are needed.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fedmix/data.hpp"
#include "fedmix/federation.hpp"
#include "fedmix/mashing.hpp"
#include "fedmix/oracles.hpp"

namespace fedmix::verify {

struct PropertyResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

namespace detail {

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// |a - b| / max(|a|, |b|), or 0 when the absolute gap is under `floor`
inline double rel_err(double a, double b, double floor) {
    double diff = std::abs(a - b);
    if (diff <= floor) return 0.0;
    return diff / std::max(std::abs(a), std::abs(b));
}

inline double median(std::vector<double> v) {
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline bool exact_cover(const Dataset& ds, const std::vector<ClientShard>& shards) {
    std::vector<int> seen(ds.size(), 0);
    for (const auto& s : shards) {
        if (s.indices.size() != s.size()) return false;
        for (std::size_t r = 0; r < s.size(); ++r) {
            std::size_t src = s.indices[r];
            if (src >= ds.size() || seen[src]++) return false;
            for (std::size_t k = 0; k < ds.dim(); ++k)
                if (s.data.X(r, k) != ds.X(src, k)) return false;
            for (std::size_t c = 0; c < ds.classes; ++c)
                if (s.data.Y(r, c) != ds.Y(src, c)) return false;
        }
    }
    return std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; });
}

}  // namespace detail

// Parameter and input gradients against central differences (rel < 1e-4),
// and the mixed term against its directional difference (rel < 1e-3).
inline PropertyResult gradient_fidelity(std::size_t instances = 100) {
    detail::Stopwatch sw;
    double worst = 0.0, worst_mixed = 0.0, max_abs = 0.0, raw_rel = 0.0;
    auto track = [&](double a, double b) {
        max_abs = std::max(max_abs, std::abs(a - b));
        if (std::max(std::abs(a), std::abs(b)) >= 1e-3) raw_rel = std::max(raw_rel, detail::rel_err(a, b, 0.0));
    };
    for (std::uint64_t seed = 0; seed < instances; ++seed) {
        auto inst = oracle::random_instance(seed);
        auto g = backward(inst.model, inst.X, inst.Y);
        auto analytic = flatten(g.param_grads);
        auto numeric = oracle::fd_param_grad(inst.model, inst.X, inst.Y);
        for (std::size_t i = 0; i < analytic.size(); ++i)
        {
            worst = std::max(worst, detail::rel_err(analytic[i], numeric[i], 1e-8));
            track(analytic[i], numeric[i]);
        }
        Tensor gx = oracle::fd_input_grad(inst.model, inst.X, inst.Y);
        for (std::size_t i = 0; i < gx.size(); ++i)
        {
            worst = std::max(worst, detail::rel_err(g.input_grad[i], gx[i], 1e-8));
            track(g.input_grad[i], gx[i]);
        }
        auto mixed = flatten(mixed_grad(inst.model, inst.X, inst.Y, inst.V));
        auto fd_mixed = oracle::fd_mixed_grad(inst.model, inst.X, inst.Y, inst.V);
        for (std::size_t i = 0; i < mixed.size(); ++i)
            worst_mixed = std::max(worst_mixed, detail::rel_err(mixed[i], fd_mixed[i], 1e-8));
    }
    std::ostringstream os;
    os << "instances=" << instances << " max_rel_err=" << worst << " (< 1e-4, abs floor 1e-8) max_mixed_rel_err="
       << worst_mixed << " (< 1e-3) max_abs_gap=" << max_abs << " max_rel_gap_where_|g|>=1e-3=" << raw_rel;
    return {"gradient_fidelity", worst < 1e-4 && worst_mixed < 1e-3, os.str(), sw.seconds()};
}

// err(lambda) = |FedMix - Global Mixup|; halving lambda should quarter it.
inline PropertyResult taylor_order(std::size_t instances = 50) {
    detail::Stopwatch sw;
    auto s = oracle::taylor_order(instances);
    std::vector<double> first, second;
    for (std::size_t i = 0; i + 1 < s.ratios.size(); i += 2) {
        first.push_back(s.ratios[i]);
        second.push_back(s.ratios[i + 1]);
    }
    std::ostringstream os;
    os << "in_band=" << s.passing << "/" << s.total << " (>= 90%, band [0.15, 0.45])"
       << " median_ratio_0.2->0.1=" << detail::median(first) << " median_ratio_0.1->0.05=" << detail::median(second);
    return {"taylor_order", 10 * s.passing >= 9 * s.total, os.str(), sw.seconds()};
}

inline PropertyResult linearity_identity(std::size_t instances = 50) {
    detail::Stopwatch sw;
    double r = oracle::linearity_residual(instances);
    std::ostringstream os;
    os << "instances=" << instances << "x{2,5,20} max_rel_residual=" << r << " (< 1e-10)";
    return {"linearity_identity", r < 1e-10, os.str(), sw.seconds()};
}

// Every variant at lambda == 0 reproduces the FedAvg run bit for bit; a zero
// step leaves a model untouched; aggregation with p = (1, 0) returns the first
// model exactly.
inline PropertyResult degeneracy(const FedConfig& base, std::span<const ClientShard> shards, const Dataset& test,
                                 std::size_t threads = 1) {
    detail::Stopwatch sw;
    FedConfig avg = base;
    avg.variant = Variant::fedavg;
    auto ref = run_federation(avg, shards, test, threads);
    std::vector<std::string> broken;
    const std::pair<Variant, const char*> variants[] = {{Variant::localmix, "localmix"},
                                                        {Variant::globalmix, "globalmix"},
                                                        {Variant::naivemix, "naivemix"},
                                                        {Variant::fedmix, "fedmix"}};
    for (auto [v, name] : variants) {
        FedConfig cfg = avg;
        cfg.variant = v;
        cfg.lambda = {LambdaMode::fixed, 0.0, 1.0};
        auto r = run_federation(cfg, shards, test, threads);
        if (!(r.metrics == ref.metrics && r.model == ref.model)) broken.push_back(name);
    }
    Model w = ref.model;
    sgd_step(w, backward(w, test.X, test.Y).param_grads, 0.0);
    if (!(w == ref.model)) broken.push_back("zero_step");
    Rng rng = make_rng(base.seed, Stream::init, {99});
    Model other = init_model(ref.model.dims(), rng);
    std::vector<Model> pair{ref.model, other};
    std::vector<double> first{1.0, 0.0};
    if (!(server_aggregate(pair, first) == ref.model)) broken.push_back("aggregate_first");

    std::ostringstream os;
    os << "rounds=" << base.rounds << " variants=4 mismatches=" << broken.size();
    for (const auto& b : broken) os << " " << b;
    return {"degeneracy", broken.empty(), os.str(), sw.seconds()};
}

// mash_local -> aggregate -> server_average keeps the source-count-weighted
// mean of the raw data; every partitioner yields a disjoint exact cover.
inline PropertyResult mean_preservation(std::size_t seeds = 20) {
    detail::Stopwatch sw;
    double worst = 0.0;
    std::size_t covers = 0, cover_checks = 0;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
        Dataset ds = make_blobs(4, 6, 25 + seed, 1.5, seed);
        auto shards = partition_by_class(ds, 6, 2, seed);
        std::vector<std::vector<MashedEntry>> lists;
        for (const auto& s : shards) lists.push_back(mash_local(s, 1 + seed % 9, MashSplit::random, seed));
        GlobalMash g = server_average(aggregate(lists), 1 + seed % 5, seed);

        std::vector<double> want(ds.dim(), 0.0), got(ds.dim(), 0.0);
        for (std::size_t i = 0; i < ds.size(); ++i)
            for (std::size_t k = 0; k < ds.dim(); ++k) want[k] += ds.X(i, k);
        double total = 0.0;
        for (const auto& e : g.entries) {
            total += static_cast<double>(e.source_count);
            for (std::size_t k = 0; k < ds.dim(); ++k) got[k] += static_cast<double>(e.source_count) * e.x_bar[k];
        }
        for (std::size_t k = 0; k < ds.dim(); ++k) {
            double w = want[k] / static_cast<double>(ds.size()), o = got[k] / total;
            worst = std::max(worst, std::abs(w - o) / std::max(std::abs(w), 1.0));
        }

        cover_checks += 3;
        covers += detail::exact_cover(ds, shards);
        covers += detail::exact_cover(ds, partition_dirichlet(ds, 6, 0.3, seed));
        covers += detail::exact_cover(ds, partition_sized(ds, 6, 1.5, seed));
    }
    std::ostringstream os;
    os << "seeds=" << seeds << " max_rel_mean_err=" << worst << " (< 1e-12) exact_covers=" << covers << "/"
       << cover_checks;
    return {"mean_preservation", worst < 1e-12 && covers == cover_checks, os.str(), sw.seconds()};
}

// Ratio d_i / (T p_m) for a one-shot exchange and d_i / p_m per round, on
// random (N, d_i, p_m, T).
inline PropertyResult comm_cost_formulas(std::size_t trials = 1000, std::uint64_t seed = 0) {
    detail::Stopwatch sw;
    Rng rng = make_rng(seed, Stream::synthetic, {7});
    std::uniform_int_distribution<std::size_t> N(1, 1000), d(1, 5000), p(1, 10000000), T(1, 5000);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < trials; ++i) {
        std::size_t n = N(rng), di = d(rng), pm = p(rng), t = T(rng);
        const double dd = static_cast<double>(di), pp = static_cast<double>(pm), tt = static_cast<double>(t);
        auto once = comm_cost(n, di, pm, t, 1.0, MashSchedule::once);
        auto every = comm_cost(n, di, pm, t, 1.0, MashSchedule::every_round);
        if (once.ratio != dd / (tt * pp)) ++bad;
        if (every.ratio != dd / pp) ++bad;
        if (once.param_cost != 2.0 * static_cast<double>(n) * pp * tt) ++bad;
        if (once.mash_cost != 2.0 * static_cast<double>(n) * dd) ++bad;
    }
    std::ostringstream os;
    os << "trials=" << trials << " mismatches=" << bad;
    return {"comm_cost_formulas", bad == 0, os.str(), sw.seconds()};
}

}  // namespace fedmix::verify
