// Averaged-data exchange: per-client batch means, the server-side table, and
// the privacy knobs applied to it (cut-off threshold, m-fold averaging,
// Gaussian noise).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "fedmix/data.hpp"
#include "fedmix/errors.hpp"
#include "fedmix/random.hpp"

namespace fedmix {

inline constexpr std::int64_t kSyntheticOrigin = -1;
inline constexpr std::int64_t kServerOrigin = -2;

struct MashedEntry {
    std::vector<double> x_bar;
    std::vector<double> y_bar;  // soft label
    std::size_t source_count = 1;
    std::int64_t origin = kSyntheticOrigin;  // diagnostics only
    std::size_t batch = 0;

    bool operator==(const MashedEntry&) const = default;
};

struct GlobalMash {
    std::vector<MashedEntry> entries;

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }

    bool operator==(const GlobalMash&) const = default;
};

enum class MashSplit { random, same_class };

namespace detail {

inline MashedEntry mean_of_rows(const Dataset& ds, std::span<const std::size_t> rows, std::int64_t origin,
                                std::size_t batch) {
    MashedEntry e;
    e.x_bar.assign(ds.dim(), 0.0);
    e.y_bar.assign(ds.classes, 0.0);
    for (auto r : rows) {
        for (std::size_t k = 0; k < ds.dim(); ++k) e.x_bar[k] += ds.X(r, k);
        for (std::size_t c = 0; c < ds.classes; ++c) e.y_bar[c] += ds.Y(r, c);
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (auto& v : e.x_bar) v *= inv;
    for (auto& v : e.y_bar) v *= inv;
    e.source_count = rows.size();
    e.origin = origin;
    e.batch = batch;
    return e;
}

inline void chunk_means(const Dataset& ds, std::span<const std::size_t> order, std::size_t batch_size,
                        std::int64_t origin, std::vector<MashedEntry>& out) {
    for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
        std::size_t len = std::min(batch_size, order.size() - begin);
        out.push_back(mean_of_rows(ds, order.subspan(begin, len), origin, out.size()));
    }
}

}  // namespace detail

// Means over batches of `batch_size` local rows. A trailing partial batch is
// kept and averaged over its actual size. With `same_class` every batch holds
// a single label, so the entry count is sum_c ceil(n_c / M_k).
inline std::vector<MashedEntry> mash_local(const ClientShard& shard, std::size_t batch_size, MashSplit split,
                                           std::uint64_t seed) {
    const std::size_t n = shard.size();
    if (batch_size < 1 || batch_size > n)
        throw ArgumentError("mash batch size must be in [1, " + std::to_string(n) + "]");
    Rng rng = make_rng(seed, Stream::mash, {shard.client_id});
    const auto origin = static_cast<std::int64_t>(shard.client_id);
    std::vector<MashedEntry> out;
    if (split == MashSplit::random) {
        auto order = shuffled_indices(n, rng);
        detail::chunk_means(shard.data, order, batch_size, origin, out);
    } else {
        std::vector<std::vector<std::size_t>> by_class(shard.data.classes);
        for (std::size_t i = 0; i < n; ++i) by_class[shard.data.label(i)].push_back(i);
        for (auto& group : by_class) {
            std::shuffle(group.begin(), group.end(), rng);
            detail::chunk_means(shard.data, group, batch_size, origin, out);
        }
    }
    return out;
}

// Shards with at least `threshold` samples, in input order.
inline std::vector<ClientShard> apply_threshold(std::span<const ClientShard> shards, std::size_t threshold) {
    std::vector<ClientShard> out;
    for (const auto& s : shards)
        if (s.size() >= threshold) out.push_back(s);
    return out;
}

// Concatenate per-client entry lists ordered by (origin, batch).
inline GlobalMash aggregate(std::span<const std::vector<MashedEntry>> lists) {
    GlobalMash g;
    for (const auto& l : lists) g.entries.insert(g.entries.end(), l.begin(), l.end());
    std::stable_sort(g.entries.begin(), g.entries.end(), [](const MashedEntry& a, const MashedEntry& b) {
        return a.origin != b.origin ? a.origin < b.origin : a.batch < b.batch;
    });
    return g;
}

// source_count-weighted mean of a set of entries.
inline MashedEntry weighted_mean(std::span<const MashedEntry* const> group) {
    MashedEntry out;
    out.x_bar.assign(group.front()->x_bar.size(), 0.0);
    out.y_bar.assign(group.front()->y_bar.size(), 0.0);
    std::size_t total = 0;
    for (const auto* e : group) total += e->source_count;
    for (const auto* e : group) {
        const double w = static_cast<double>(e->source_count) / static_cast<double>(total);
        for (std::size_t k = 0; k < out.x_bar.size(); ++k) out.x_bar[k] += w * e->x_bar[k];
        for (std::size_t c = 0; c < out.y_bar.size(); ++c) out.y_bar[c] += w * e->y_bar[c];
    }
    out.source_count = total;
    out.origin = group.size() == 1 ? group.front()->origin : kServerOrigin;
    return out;
}

// Random groups of `fold` entries, each replaced by its weighted mean.
inline GlobalMash server_average(const GlobalMash& g, std::size_t fold, std::uint64_t seed) {
    if (fold < 1) throw ArgumentError("server averaging fold must be >= 1");
    if (fold == 1 || g.empty()) return g;
    Rng rng = make_rng(seed, Stream::server_average);
    auto order = shuffled_indices(g.size(), rng);
    GlobalMash out;
    for (std::size_t begin = 0; begin < order.size(); begin += fold) {
        std::vector<const MashedEntry*> group;
        for (std::size_t i = begin; i < std::min(begin + fold, order.size()); ++i) group.push_back(&g.entries[order[i]]);
        MashedEntry e = weighted_mean(group);
        e.batch = out.entries.size();
        out.entries.push_back(std::move(e));
    }
    return out;
}

// i.i.d. N(0, sigma^2) on every x_bar coordinate; labels untouched.
inline GlobalMash add_gaussian_noise(const GlobalMash& g, double sigma, std::uint64_t seed) {
    if (!(sigma >= 0.0)) throw ArgumentError("noise sigma must be non-negative");
    if (sigma == 0.0) return g;
    Rng rng = make_rng(seed, Stream::noise);
    std::normal_distribution<double> noise(0.0, sigma);
    GlobalMash out = g;
    for (auto& e : out.entries)
        for (auto& v : e.x_bar) v += noise(rng);
    return out;
}

enum class MashSource { global, random_noise, local_means };

struct SyntheticMashContext {
    std::size_t input_dim = 0;
    std::size_t classes = 0;
    std::size_t entries = 1;             // random_noise only
    const ClientShard* shard = nullptr;  // local_means only
    std::size_t batch_size = 0;          // local_means; 0 means the whole shard
    std::uint64_t seed = 0;
};

// Stand-ins for the global table: standard-normal inputs with uniform labels,
// or the client's own batch means.
inline GlobalMash synthetic_mash(MashSource kind, const SyntheticMashContext& ctx) {
    GlobalMash g;
    if (kind == MashSource::random_noise) {
        if (ctx.input_dim == 0 || ctx.classes == 0) throw ArgumentError("random_noise mash needs shapes");
        Rng rng = make_rng(ctx.seed, Stream::synthetic);
        std::normal_distribution<double> nd(0.0, 1.0);
        for (std::size_t i = 0; i < ctx.entries; ++i) {
            MashedEntry e;
            e.x_bar.resize(ctx.input_dim);
            for (auto& v : e.x_bar) v = nd(rng);
            e.y_bar.assign(ctx.classes, 1.0 / static_cast<double>(ctx.classes));
            e.source_count = 1;
            e.origin = kSyntheticOrigin;
            e.batch = i;
            g.entries.push_back(std::move(e));
        }
    } else if (kind == MashSource::local_means) {
        if (!ctx.shard) throw ArgumentError("local_means mash needs the client's shard");
        std::size_t m = ctx.batch_size == 0 ? ctx.shard->size() : std::min(ctx.batch_size, ctx.shard->size());
        g.entries = mash_local(*ctx.shard, m, MashSplit::random, ctx.seed);
    } else {
        throw ArgumentError("synthetic_mash does not build the global table");
    }
    return g;
}

}  // namespace fedmix
