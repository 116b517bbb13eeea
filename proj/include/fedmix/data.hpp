// Synthetic datasets and non-iid client partitioners.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedmix/errors.hpp"
#include "fedmix/random.hpp"
#include "fedmix/tensor.hpp"

namespace fedmix {

// Inputs with one-hot labels.
struct Dataset {
    Tensor X;  // n x d_i
    Tensor Y;  // n x C, one-hot
    std::size_t classes = 0;

    std::size_t size() const { return X.rows(); }
    std::size_t dim() const { return X.cols(); }

    std::size_t label(std::size_t i) const {
        auto r = Y.row(i);
        return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
    }

    bool operator==(const Dataset&) const = default;
};

inline Dataset make_dataset(Tensor X, std::span<const std::size_t> labels, std::size_t classes) {
    if (X.rank() != 2 || X.rows() != labels.size()) throw ShapeError("one label per input row required");
    if (classes < 1) throw ArgumentError("class count must be positive");
    Tensor Y = Tensor::matrix(labels.size(), classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= classes) throw ArgumentError("label " + std::to_string(labels[i]) + " out of range");
        Y(i, labels[i]) = 1.0;
    }
    return {std::move(X), std::move(Y), classes};
}

inline std::vector<std::size_t> labels_of(const Dataset& ds) {
    std::vector<std::size_t> out(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) out[i] = ds.label(i);
    return out;
}

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> idx) {
    Tensor X = Tensor::matrix(idx.size(), ds.dim());
    Tensor Y = Tensor::matrix(idx.size(), ds.classes);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= ds.size()) throw ArgumentError("subset index out of range");
        std::copy_n(ds.X.row(idx[r]).begin(), ds.dim(), X.row(r).begin());
        std::copy_n(ds.Y.row(idx[r]).begin(), ds.classes, Y.row(r).begin());
    }
    return {std::move(X), std::move(Y), ds.classes};
}

inline std::vector<std::size_t> class_counts(const Dataset& ds) {
    std::vector<std::size_t> counts(ds.classes, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) ++counts[ds.label(i)];
    return counts;
}

struct ClientShard {
    std::size_t client_id = 0;
    std::vector<std::size_t> indices;  // rows of the source dataset
    Dataset data;

    std::size_t size() const { return data.size(); }
};

// Relative weights n_k / sum n over the given shards.
inline std::vector<double> shard_weights(std::span<const ClientShard* const> shards) {
    double total = 0.0;
    for (const auto* s : shards) total += static_cast<double>(s->size());
    std::vector<double> p;
    for (const auto* s : shards) p.push_back(static_cast<double>(s->size()) / total);
    return p;
}

struct BlobsOptions {
    double center_radius = 3.5;   // every center lies on this sphere
    double min_separation = 4.0;  // minimum pairwise center distance
};

// Gaussian clusters, one per class, `per_class` samples each, class-major
// row order. Centers are seeded points on a sphere around the origin,
// pairwise at least `min_separation` apart (the radius grows if rejection
// keeps failing).
inline Dataset make_blobs(std::size_t classes, std::size_t dim, std::size_t per_class, double spread,
                          std::uint64_t seed, const BlobsOptions& opts = {}) {
    if (classes < 2) throw ArgumentError("make_blobs needs at least 2 classes");
    if (dim < 2) throw ArgumentError("make_blobs needs at least 2 input dims");
    if (per_class < 1) throw ArgumentError("make_blobs needs at least 1 sample per class");
    if (!(spread > 0.0)) throw ArgumentError("make_blobs spread must be positive");
    if (!(opts.center_radius > 0.0)) throw ArgumentError("make_blobs center radius must be positive");

    Rng center_rng = make_rng(seed, Stream::dataset, {0});
    std::normal_distribution<double> gauss(0.0, 1.0);
    double radius = opts.center_radius;
    std::vector<std::vector<double>> centers;
    for (int attempt = 1;; ++attempt) {
        if (attempt % 200 == 0) radius *= 1.25;
        centers.assign(classes, std::vector<double>(dim));
        for (auto& c : centers) {
            double norm = 0.0;
            for (auto& v : c) {
                v = gauss(center_rng);
                norm += v * v;
            }
            norm = std::sqrt(norm);
            for (auto& v : c) v *= radius / norm;
        }
        bool ok = true;
        for (std::size_t a = 0; a < classes && ok; ++a) {
            for (std::size_t b = a + 1; b < classes && ok; ++b) {
                double d2 = 0.0;
                for (std::size_t k = 0; k < dim; ++k) d2 += (centers[a][k] - centers[b][k]) * (centers[a][k] - centers[b][k]);
                ok = std::sqrt(d2) >= opts.min_separation;
            }
        }
        if (ok) break;
    }

    Rng sample_rng = make_rng(seed, Stream::dataset, {1});
    std::normal_distribution<double> noise(0.0, spread);
    const std::size_t n = classes * per_class;
    Tensor X = Tensor::matrix(n, dim);
    std::vector<std::size_t> labels(n);
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t s = 0; s < per_class; ++s) {
            std::size_t r = c * per_class + s;
            labels[r] = c;
            for (std::size_t k = 0; k < dim; ++k) X(r, k) = centers[c][k] + noise(sample_rng);
        }
    }
    return make_dataset(std::move(X), labels, classes);
}

// Stratified split: `test_per_class` rows of every class go to the test set.
inline std::pair<Dataset, Dataset> split_holdout(const Dataset& ds, std::size_t test_per_class, std::uint64_t seed) {
    Rng rng = make_rng(seed, Stream::holdout);
    std::vector<std::vector<std::size_t>> by_class(ds.classes);
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.label(i)].push_back(i);
    std::vector<std::size_t> train, test;
    for (auto& pool : by_class) {
        if (pool.size() <= test_per_class) throw ArgumentError("not enough samples per class for the holdout");
        std::shuffle(pool.begin(), pool.end(), rng);
        test.insert(test.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(test_per_class));
        train.insert(train.end(), pool.begin() + static_cast<std::ptrdiff_t>(test_per_class), pool.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {subset(ds, train), subset(ds, test)};
}

namespace detail {

inline std::vector<ClientShard> build_shards(const Dataset& ds, std::vector<std::vector<std::size_t>> assignment) {
    std::vector<ClientShard> shards;
    shards.reserve(assignment.size());
    for (std::size_t k = 0; k < assignment.size(); ++k) {
        if (assignment[k].empty())
            throw PartitionError("client " + std::to_string(k) + " received no samples");
        Dataset part = subset(ds, assignment[k]);
        shards.push_back({k, std::move(assignment[k]), std::move(part)});
    }
    return shards;
}

// Split `count` items into integer parts proportional to `weights`
// (largest-remainder rounding, ties to the lower index).
inline std::vector<std::size_t> proportional_counts(std::size_t count, std::span<const double> weights) {
    double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> out(weights.size(), 0);
    if (total <= 0.0) return out;
    std::vector<double> rem(weights.size());
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
        double exact = static_cast<double>(count) * weights[k] / total;
        out[k] = static_cast<std::size_t>(std::floor(exact));
        rem[k] = exact - static_cast<double>(out[k]);
        assigned += out[k];
    }
    std::vector<std::size_t> order(weights.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t i = 0; assigned < count; ++i, ++assigned) ++out[order[i % order.size()]];
    return out;
}

}  // namespace detail

// Every client draws `classes_per_client` distinct classes, favouring the
// least-assigned ones so that every class has at least one holder. Each
// class's shuffled pool is then cut into equal chunks, one per holder.
inline std::vector<ClientShard> partition_by_class(const Dataset& ds, std::size_t clients,
                                                   std::size_t classes_per_client, std::uint64_t seed) {
    const std::size_t C = ds.classes;
    if (clients < 1) throw PartitionError("need at least one client");
    if (classes_per_client < 1 || classes_per_client > C)
        throw PartitionError("classes_per_client must be in [1, " + std::to_string(C) + "]");
    if (clients * classes_per_client < C)
        throw PartitionError("too few client slots to cover every class");
    if (ds.size() < clients) throw PartitionError("fewer samples than clients");

    Rng rng = make_rng(seed, Stream::partition, {0});
    std::vector<std::size_t> load(C, 0);
    std::vector<std::vector<std::size_t>> holders(C);
    for (std::size_t k = 0; k < clients; ++k) {
        std::vector<std::size_t> order = shuffled_indices(C, rng);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return load[a] < load[b]; });
        for (std::size_t j = 0; j < classes_per_client; ++j) {
            ++load[order[j]];
            holders[order[j]].push_back(k);
        }
    }

    std::vector<std::vector<std::size_t>> by_class(C);
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.label(i)].push_back(i);

    std::vector<std::vector<std::size_t>> assignment(clients);
    for (std::size_t c = 0; c < C; ++c) {
        auto& pool = by_class[c];
        std::shuffle(pool.begin(), pool.end(), rng);
        const std::size_t h = holders[c].size();
        std::size_t begin = 0;
        for (std::size_t j = 0; j < h; ++j) {
            std::size_t chunk = pool.size() / h + (j < pool.size() % h ? 1 : 0);
            auto& dst = assignment[holders[c][j]];
            dst.insert(dst.end(), pool.begin() + static_cast<std::ptrdiff_t>(begin),
                       pool.begin() + static_cast<std::ptrdiff_t>(begin + chunk));
            begin += chunk;
        }
    }
    return detail::build_shards(ds, std::move(assignment));
}

// Per-client class proportions, one Dirichlet(alpha) vector per client.
inline std::vector<std::vector<double>> dirichlet_proportions(std::size_t clients, std::size_t classes, double alpha,
                                                              std::uint64_t seed) {
    if (!(alpha > 0.0)) throw ArgumentError("dirichlet alpha must be positive");
    Rng rng = make_rng(seed, Stream::partition, {1});
    std::vector<std::vector<double>> q;
    q.reserve(clients);
    for (std::size_t k = 0; k < clients; ++k) q.push_back(dirichlet_draw(alpha, classes, rng));
    return q;
}

// Each class's samples are dealt to clients in proportion to the clients'
// Dirichlet weights for that class.
inline std::vector<ClientShard> partition_dirichlet(const Dataset& ds, std::size_t clients, double alpha,
                                                    std::uint64_t seed) {
    if (!(alpha > 0.0)) throw ArgumentError("dirichlet alpha must be positive");
    if (clients < 1) throw PartitionError("need at least one client");
    auto q = dirichlet_proportions(clients, ds.classes, alpha, seed);

    Rng rng = make_rng(seed, Stream::partition, {2});
    std::vector<std::vector<std::size_t>> by_class(ds.classes);
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.label(i)].push_back(i);

    std::vector<std::vector<std::size_t>> assignment(clients);
    for (std::size_t c = 0; c < ds.classes; ++c) {
        auto& pool = by_class[c];
        std::shuffle(pool.begin(), pool.end(), rng);
        std::vector<double> w(clients);
        for (std::size_t k = 0; k < clients; ++k) w[k] = q[k][c];
        auto counts = detail::proportional_counts(pool.size(), w);
        std::size_t begin = 0;
        for (std::size_t k = 0; k < clients; ++k) {
            auto& dst = assignment[k];
            dst.insert(dst.end(), pool.begin() + static_cast<std::ptrdiff_t>(begin),
                       pool.begin() + static_cast<std::ptrdiff_t>(begin + counts[k]));
            begin += counts[k];
        }
    }
    return detail::build_shards(ds, std::move(assignment));
}

// Weights (k + 1)^-exponent for k = 0..clients-1.
inline std::vector<double> power_law_weights(std::size_t clients, double exponent) {
    std::vector<double> w(clients);
    for (std::size_t k = 0; k < clients; ++k) w[k] = std::pow(static_cast<double>(k + 1), -exponent);
    return w;
}

// Shard sizes floor(n * w_k / sum w); the leftover rows go one at a time to
// clients in decreasing weight order. Rows are shuffled before slicing.
inline std::vector<std::size_t> sized_shard_counts(std::size_t n, std::span<const double> weights) {
    if (weights.empty()) throw PartitionError("need at least one client weight");
    for (double w : weights)
        if (!(w > 0.0) || !std::isfinite(w)) throw PartitionError("size weights must be positive");
    double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> sizes(weights.size());
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
        sizes[k] = static_cast<std::size_t>(std::floor(static_cast<double>(n) * weights[k] / total));
        assigned += sizes[k];
    }
    std::vector<std::size_t> order(weights.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++sizes[order[i % order.size()]];
    for (std::size_t k = 0; k < sizes.size(); ++k)
        if (sizes[k] == 0) throw PartitionError("client " + std::to_string(k) + " would receive no samples");
    return sizes;
}

inline std::vector<ClientShard> partition_sized(const Dataset& ds, std::span<const double> weights, std::uint64_t seed) {
    auto sizes = sized_shard_counts(ds.size(), weights);
    Rng rng = make_rng(seed, Stream::partition, {3});
    auto order = shuffled_indices(ds.size(), rng);
    std::vector<std::vector<std::size_t>> assignment(sizes.size());
    std::size_t begin = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
        assignment[k].assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                             order.begin() + static_cast<std::ptrdiff_t>(begin + sizes[k]));
        begin += sizes[k];
    }
    return detail::build_shards(ds, std::move(assignment));
}

inline std::vector<ClientShard> partition_sized(const Dataset& ds, std::size_t clients, double exponent,
                                                std::uint64_t seed) {
    auto w = power_law_weights(clients, exponent);
    return partition_sized(ds, w, seed);
}

// Shannon entropy (nats) of a shard's label histogram.
inline double label_entropy(const Dataset& ds) {
    auto counts = class_counts(ds);
    double h = 0.0;
    for (auto c : counts) {
        if (c == 0) continue;
        double p = static_cast<double>(c) / static_cast<double>(ds.size());
        h -= p * std::log(p);
    }
    return h;
}

}  // namespace fedmix
