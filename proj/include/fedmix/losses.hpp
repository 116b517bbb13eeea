// The Mixup loss family: plain cross-entropy, Global Mixup (mixing with raw
// external samples), LocalMix, NaiveMix and FedMix (mixing with averaged
// external data), plus the FedProx proximal penalty.
//
// Every loss returns its value and its parameter gradient. Mixing convention:
// x~ = (1 - lambda) x_i + lambda x_j, so lambda == 0 is always plain training.
#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fedmix/errors.hpp"
#include "fedmix/mashing.hpp"
#include "fedmix/model.hpp"
#include "fedmix/random.hpp"
#include "fedmix/tensor.hpp"

namespace fedmix {

// Per-term values of a mixed loss, reported in metrics.
struct LossTerms {
    double l1 = 0.0;
    double l2 = 0.0;
    double l3 = 0.0;
};

struct LossOutput {
    double value = 0.0;
    ParamGrads param_grads;
    LossTerms terms;
    bool fallback = false;           // variant degraded to plain cross-entropy
    bool approximation_flag = false;  // FedMix evaluated at lambda >= 0.5
};

enum class LambdaMode { fixed, beta };

struct MixupPolicy {
    LambdaMode mode = LambdaMode::fixed;
    double lambda = 0.05;
    double beta_param = 1.0;

    bool operator==(const MixupPolicy&) const = default;

    void validate() const {
        if (mode == LambdaMode::fixed && !(lambda >= 0.0 && lambda <= 1.0))
            throw ArgumentError("fixed lambda must lie in [0, 1]");
        if (mode == LambdaMode::beta && !(beta_param > 0.0)) throw ArgumentError("beta parameter must be positive");
    }
};

inline double draw_lambda(const MixupPolicy& policy, Rng& rng) {
    if (policy.mode == LambdaMode::fixed) return policy.lambda;
    return beta_draw(policy.beta_param, policy.beta_param, rng);
}

namespace detail {

inline void check_lambda(double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ArgumentError("lambda must lie in [0, 1]");
}

inline void check_entry(const Model& m, const MashedEntry& e) {
    if (e.x_bar.size() != m.input_dim() || e.y_bar.size() != m.class_count())
        throw ShapeError("mashed entry does not match the model's input/class dims");
}

}  // namespace detail

// (x~, y~) = ((1 - lambda) x_i + lambda x_j, (1 - lambda) y_i + lambda y_j)
inline std::pair<Tensor, Tensor> mixup_pair(const Tensor& x_i, const Tensor& y_i, const Tensor& x_j, const Tensor& y_j,
                                            double lambda) {
    detail::check_lambda(lambda);
    return {linear_combination(1.0 - lambda, x_i, lambda, x_j), linear_combination(1.0 - lambda, y_i, lambda, y_j)};
}

inline LossOutput loss_plain(const Model& m, const Tensor& X, const Tensor& Y) {
    GradientBundle b = backward(m, X, Y);
    LossOutput out;
    out.value = b.loss_value;
    out.param_grads = std::move(b.param_grads);
    out.terms.l1 = out.value;
    return out;
}

// Mean over local rows i and external rows j of the loss at the mixed point.
inline LossOutput loss_global_mixup(const Model& m, const Tensor& X, const Tensor& Y, const Tensor& XJ,
                                    const Tensor& YJ, double lambda) {
    detail::check_lambda(lambda);
    if (XJ.rows() == 0) throw ArgumentError("global mixup needs a nonempty external set");
    if (XJ.cols() != X.cols() || YJ.cols() != Y.cols() || YJ.rows() != XJ.rows())
        throw ShapeError("external set does not match the local batch");
    if (lambda == 0.0) return loss_plain(m, X, Y);
    const std::size_t n = X.rows(), J = XJ.rows();
    Tensor Xm = Tensor::matrix(n * J, X.cols());
    Tensor Ym = Tensor::matrix(n * J, Y.cols());
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < J; ++j) {
            std::size_t r = i * J + j;
            for (std::size_t k = 0; k < X.cols(); ++k) Xm(r, k) = (1.0 - lambda) * X(i, k) + lambda * XJ(j, k);
            for (std::size_t c = 0; c < Y.cols(); ++c) Ym(r, c) = (1.0 - lambda) * Y(i, c) + lambda * YJ(j, c);
        }
    }
    return loss_plain(m, Xm, Ym);
}

// Mixup of row i with row perm[i] of the same batch.
inline LossOutput loss_local_mix(const Model& m, const Tensor& X, const Tensor& Y, double lambda,
                                 std::span<const std::size_t> perm) {
    detail::check_lambda(lambda);
    if (lambda == 0.0) return loss_plain(m, X, Y);
    if (X.rows() < 2) {
        LossOutput out = loss_plain(m, X, Y);
        out.fallback = true;
        return out;
    }
    if (perm.size() != X.rows()) throw ShapeError("permutation length must equal the batch size");
    Tensor Xm = Tensor::matrix(X.rows(), X.cols());
    Tensor Ym = Tensor::matrix(Y.rows(), Y.cols());
    for (std::size_t i = 0; i < X.rows(); ++i) {
        std::size_t j = perm[i];
        if (j >= X.rows()) throw ArgumentError("permutation index out of range");
        for (std::size_t k = 0; k < X.cols(); ++k) Xm(i, k) = (1.0 - lambda) * X(i, k) + lambda * X(j, k);
        for (std::size_t c = 0; c < Y.cols(); ++c) Ym(i, c) = (1.0 - lambda) * Y(i, c) + lambda * Y(j, c);
    }
    return loss_plain(m, Xm, Ym);
}

inline LossOutput loss_local_mix(const Model& m, const Tensor& X, const Tensor& Y, double lambda, Rng& rng) {
    if (lambda == 0.0 || X.rows() < 2) return loss_local_mix(m, X, Y, lambda, std::span<const std::size_t>{});
    auto perm = shuffled_indices(X.rows(), rng);
    return loss_local_mix(m, X, Y, lambda, perm);
}

// (1 - lambda) l(f(x'), y_i) + lambda l(f(x'), y_bar) with
// x' = (1 - lambda) x_i + lambda x_bar, averaged over the batch.
inline LossOutput loss_naive_mix(const Model& m, const Tensor& X, const Tensor& Y, const MashedEntry& entry,
                                 double lambda) {
    detail::check_lambda(lambda);
    detail::check_entry(m, entry);
    const std::size_t n = X.rows();
    Tensor Xbar = broadcast_rows(entry.x_bar, n);
    Tensor Ybar = broadcast_rows(entry.y_bar, n);
    Tensor Xm = linear_combination(1.0 - lambda, X, lambda, Xbar);
    Tensor probs = forward(m, Xm);
    LossOutput out;
    out.terms.l1 = (1.0 - lambda) * cross_entropy(probs, Y);
    out.terms.l2 = lambda * cross_entropy(probs, Ybar);
    // the loss is linear in the label, so one backward pass covers both terms
    GradientBundle b = backward(m, Xm, linear_combination(1.0 - lambda, Y, lambda, Ybar));
    out.value = out.terms.l1 + out.terms.l2;
    out.param_grads = std::move(b.param_grads);
    return out;
}

// First-order surrogate of Global Mixup against the mean entry:
//   l1 = (1 - lambda) l(f((1 - lambda) X), Y)
//   l2 = lambda l(f((1 - lambda) X), y_bar)
//   l3 = lambda <d l / d x, x_bar>, derivative at x = (1 - lambda) x_i, y = y_i
// The gradient of l3 with respect to w is the mixed second-order term.
inline LossOutput loss_fedmix(const Model& m, const Tensor& X, const Tensor& Y, const MashedEntry& entry,
                              double lambda) {
    detail::check_lambda(lambda);
    detail::check_entry(m, entry);
    const std::size_t n = X.rows();
    Tensor Xs = scaled(X, 1.0 - lambda);
    Tensor Ybar = broadcast_rows(entry.y_bar, n);
    Tensor V = broadcast_rows(entry.x_bar, n);

    TangentBundle t = backward_with_tangent(m, Xs, Y, V);
    LossOutput out;
    out.approximation_flag = lambda >= 0.5;
    out.terms.l1 = (1.0 - lambda) * t.base.loss_value;

    if (lambda == 0.0) {
        out.value = out.terms.l1;
        out.param_grads = std::move(t.base.param_grads);
        return out;
    }
    GradientBundle lab = backward(m, Xs, linear_combination(1.0 - lambda, Y, lambda, Ybar));
    Tensor probs = forward(m, Xs);
    out.terms.l2 = lambda * cross_entropy(probs, Ybar);
    out.terms.l3 = lambda * t.directional;
    out.value = out.terms.l1 + out.terms.l2 + out.terms.l3;
    out.param_grads = std::move(lab.param_grads);
    add_scaled(out.param_grads, t.mixed, lambda);
    return out;
}

struct PenaltyOutput {
    double value = 0.0;
    ParamGrads grads;
};

// (mu / 2) ||w - anchor||^2 and its gradient mu (w - anchor).
inline PenaltyOutput fedprox_penalty(const Model& w, const Model& anchor, double mu) {
    if (!(mu >= 0.0)) throw ArgumentError("proximal mu must be non-negative");
    require_same_layout(w, anchor);
    PenaltyOutput out;
    out.grads = w;
    add_scaled(out.grads, anchor, -1.0);
    double sq = 0.0;
    for (double d : flatten(out.grads)) sq += d * d;
    out.value = 0.5 * mu * sq;
    scale(out.grads, mu);
    return out;
}

}  // namespace fedmix
