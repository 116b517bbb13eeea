// A dense rectifier classifier with a hand-derived backward pass.
//
// Hidden layers use max(0, z) (subgradient 0 at z == 0), the output layer a
// softmax. Besides the usual parameter and input gradients, the backward pass
// can carry a forward-mode tangent along an input direction V, which yields
// grad_w <grad_X loss, V>: the mixed second-order term the FedMix loss needs.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fedmix/errors.hpp"
#include "fedmix/random.hpp"
#include "fedmix/tensor.hpp"

namespace fedmix {

inline constexpr double kProbabilityFloor = 1e-12;

struct DenseLayer {
    Tensor weight;  // out x in
    Tensor bias;    // out

    std::size_t in() const { return weight.cols(); }
    std::size_t out() const { return weight.rows(); }

    bool operator==(const DenseLayer&) const = default;
};

struct Model {
    std::vector<DenseLayer> layers;

    std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in(); }
    std::size_t class_count() const { return layers.empty() ? 0 : layers.back().out(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    // Layer sizes, input first: {d_i, hidden..., C}.
    std::vector<std::size_t> dims() const {
        std::vector<std::size_t> d;
        if (layers.empty()) return d;
        d.push_back(input_dim());
        for (const auto& l : layers) d.push_back(l.out());
        return d;
    }

    bool all_finite() const {
        for (const auto& l : layers)
            if (!l.weight.all_finite() || !l.bias.all_finite()) return false;
        return true;
    }

    bool operator==(const Model&) const = default;
};

// Gradients share the model's layout.
using ParamGrads = Model;

inline void validate_chain(const Model& m) {
    if (m.layers.empty()) throw ShapeError("model has no layers");
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        const auto& layer = m.layers[l];
        if (layer.weight.rank() != 2 || layer.bias.rank() != 1 || layer.bias.size() != layer.out())
            throw ShapeError("layer " + std::to_string(l) + " has inconsistent weight/bias shapes");
        if (l > 0 && layer.in() != m.layers[l - 1].out())
            throw ShapeError("layer " + std::to_string(l) + " input extent does not chain");
    }
}

inline Model zero_model(std::span<const std::size_t> dims) {
    if (dims.size() < 2) throw ArgumentError("a model needs at least input and output dims");
    Model m;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        if (dims[l] == 0 || dims[l + 1] == 0) throw ArgumentError("layer dims must be positive");
        m.layers.push_back({Tensor::matrix(dims[l + 1], dims[l]), Tensor({dims[l + 1]})});
    }
    return m;
}

// Weights uniform in +-sqrt(6 / (fan_in + fan_out)), biases zero.
inline Model init_model(std::span<const std::size_t> dims, Rng& rng) {
    Model m = zero_model(dims);
    for (auto& layer : m.layers) {
        double limit = std::sqrt(6.0 / static_cast<double>(layer.in() + layer.out()));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (auto& w : layer.weight.data()) w = dist(rng);
    }
    return m;
}

inline ParamGrads zeros_like(const Model& m) {
    ParamGrads g;
    g.layers.reserve(m.layers.size());
    for (const auto& l : m.layers) g.layers.push_back({Tensor(l.weight.shape()), Tensor(l.bias.shape())});
    return g;
}

inline void require_same_layout(const Model& a, const Model& b) {
    if (a.layers.size() != b.layers.size()) throw ShapeError("models differ in layer count");
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        if (a.layers[l].weight.shape() != b.layers[l].weight.shape() ||
            a.layers[l].bias.shape() != b.layers[l].bias.shape())
            throw ShapeError("models differ in layer " + std::to_string(l) + " shape");
    }
}

// dst += a * src
inline void add_scaled(Model& dst, const Model& src, double a) {
    require_same_layout(dst, src);
    for (std::size_t l = 0; l < dst.layers.size(); ++l) {
        auto& dw = dst.layers[l].weight.data();
        auto& db = dst.layers[l].bias.data();
        const auto& sw = src.layers[l].weight.data();
        const auto& sb = src.layers[l].bias.data();
        for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += a * sw[i];
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += a * sb[i];
    }
}

inline void scale(Model& m, double a) {
    for (auto& l : m.layers) {
        for (auto& v : l.weight.data()) v *= a;
        for (auto& v : l.bias.data()) v *= a;
    }
}

// Parameters in a single flat vector, layer by layer, weight then bias.
inline std::vector<double> flatten(const Model& m) {
    std::vector<double> out;
    out.reserve(m.parameter_count());
    for (const auto& l : m.layers) {
        out.insert(out.end(), l.weight.data().begin(), l.weight.data().end());
        out.insert(out.end(), l.bias.data().begin(), l.bias.data().end());
    }
    return out;
}

inline void unflatten(Model& m, std::span<const double> flat) {
    if (flat.size() != m.parameter_count()) throw ShapeError("flat parameter length mismatch");
    std::size_t k = 0;
    for (auto& l : m.layers) {
        for (auto& v : l.weight.data()) v = flat[k++];
        for (auto& v : l.bias.data()) v = flat[k++];
    }
}

// w <- w - eta * g
inline void sgd_step(Model& m, const ParamGrads& g, double eta) {
    if (!(eta >= 0.0)) throw ArgumentError("learning rate must be non-negative");
    if (eta == 0.0) {
        require_same_layout(m, g);
        return;
    }
    add_scaled(m, g, -eta);
}

// Activations kept for the backward pass.
struct ForwardCache {
    std::vector<Tensor> inputs;   // inputs[l] feeds layer l; inputs[0] == X
    std::vector<Tensor> preacts;  // preacts[l] = inputs[l] W_l^T + b_l
    Tensor probs;
};

namespace detail {

inline void check_input(const Model& m, const Tensor& X) {
    validate_chain(m);
    if (X.rank() != 2 || X.cols() != m.input_dim())
        throw ShapeError("input " + shape_string(X) + " does not match model input dim " +
                         std::to_string(m.input_dim()));
    if (!X.all_finite()) throw ArgumentError("input contains non-finite values");
}

// out = A W^T (+ b if given)
inline Tensor affine(const Tensor& A, const DenseLayer& layer, bool with_bias) {
    const std::size_t n = A.rows(), in = layer.in(), out_dim = layer.out();
    Tensor out = Tensor::matrix(n, out_dim);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t o = 0; o < out_dim; ++o) {
            double s = with_bias ? layer.bias[o] : 0.0;
            for (std::size_t k = 0; k < in; ++k) s += A(i, k) * layer.weight(o, k);
            out(i, o) = s;
        }
    }
    return out;
}

inline void softmax_rows(Tensor& z) {
    for (std::size_t i = 0; i < z.rows(); ++i) {
        auto r = z.row(i);
        double mx = *std::max_element(r.begin(), r.end());
        double sum = 0.0;
        for (auto& v : r) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (auto& v : r) v /= sum;
    }
}

}  // namespace detail

inline ForwardCache forward_cached(const Model& m, const Tensor& X) {
    detail::check_input(m, X);
    ForwardCache c;
    c.inputs.push_back(X);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        Tensor z = detail::affine(c.inputs.back(), m.layers[l], true);
        c.preacts.push_back(z);
        if (l + 1 < m.layers.size()) {
            for (auto& v : z.data()) v = v > 0.0 ? v : 0.0;
            c.inputs.push_back(std::move(z));
        } else {
            detail::softmax_rows(z);
            c.probs = std::move(z);
        }
    }
    return c;
}

// Class probabilities, one row per sample.
inline Tensor forward(const Model& m, const Tensor& X) { return forward_cached(m, X).probs; }

// Mean over rows of -sum_c Y[c] log(max(p[c], 1e-12)). Linear in Y.
inline double cross_entropy(const Tensor& probs, const Tensor& Y) {
    require_same_shape(probs, Y, "cross_entropy");
    if (probs.rows() == 0) throw ArgumentError("cross_entropy on an empty batch");
    double total = 0.0;
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        double row = 0.0;
        for (std::size_t c = 0; c < probs.cols(); ++c) {
            double y = Y(i, c);
            if (y != 0.0) row -= y * std::log(std::max(probs(i, c), kProbabilityFloor));
        }
        total += row;
    }
    return total / static_cast<double>(probs.rows());
}

struct GradientBundle {
    ParamGrads param_grads;
    Tensor input_grad;
    double loss_value = 0.0;
};

// Gradients of the batch loss together with their derivative along an input
// direction V.
struct TangentBundle {
    GradientBundle base;
    ParamGrads mixed;          // grad_w <grad_X loss, V>
    double directional = 0.0;  // <grad_X loss, V>
};

namespace detail {

// Shared reverse pass. When `tangent` is non-null, forward-mode derivatives
// along V are pushed through the same pass.
inline TangentBundle backprop(const Model& m, const Tensor& X, const Tensor& Y, const Tensor* V) {
    ForwardCache c = forward_cached(m, X);
    if (Y.rank() != 2 || Y.rows() != X.rows() || Y.cols() != m.class_count())
        throw ShapeError("labels " + shape_string(Y) + " do not match batch of " + std::to_string(X.rows()) +
                         " x " + std::to_string(m.class_count()));
    if (V) require_same_shape(*V, X, "tangent direction");

    const std::size_t n = X.rows(), L = m.layers.size(), C = m.class_count();
    const double inv_n = 1.0 / static_cast<double>(n);

    TangentBundle out;
    out.base.loss_value = cross_entropy(c.probs, Y);
    out.base.param_grads = zeros_like(m);
    if (V) out.mixed = zeros_like(m);

    // tangent of every layer input: dot_inputs[l]
    std::vector<Tensor> dot_inputs;
    std::vector<Tensor> dot_preacts;
    if (V) {
        dot_inputs.push_back(*V);
        for (std::size_t l = 0; l < L; ++l) {
            Tensor dz = affine(dot_inputs.back(), m.layers[l], false);
            if (l + 1 < L) {
                Tensor da = dz;
                for (std::size_t i = 0; i < da.size(); ++i)
                    if (!(c.preacts[l][i] > 0.0)) da[i] = 0.0;
                dot_inputs.push_back(std::move(da));
            }
            dot_preacts.push_back(std::move(dz));
        }
    }

    // delta = d loss / d z_L = (p * sum(Y) - Y) / n
    Tensor delta = Tensor::matrix(n, C);
    Tensor dot_delta;
    if (V) dot_delta = Tensor::matrix(n, C);
    for (std::size_t i = 0; i < n; ++i) {
        double ysum = 0.0;
        for (std::size_t k = 0; k < C; ++k) ysum += Y(i, k);
        double pz = 0.0;
        if (V)
            for (std::size_t k = 0; k < C; ++k) pz += c.probs(i, k) * dot_preacts[L - 1](i, k);
        for (std::size_t k = 0; k < C; ++k) {
            delta(i, k) = (c.probs(i, k) * ysum - Y(i, k)) * inv_n;
            if (V) {
                double dp = c.probs(i, k) * (dot_preacts[L - 1](i, k) - pz);
                dot_delta(i, k) = dp * ysum * inv_n;
            }
        }
    }

    for (std::size_t l = L; l-- > 0;) {
        const auto& layer = m.layers[l];
        const Tensor& a = c.inputs[l];
        const std::size_t in = layer.in(), od = layer.out();
        auto& gw = out.base.param_grads.layers[l].weight;
        auto& gb = out.base.param_grads.layers[l].bias;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t o = 0; o < od; ++o) {
                double d = delta(i, o);
                gb[o] += d;
                for (std::size_t k = 0; k < in; ++k) gw(o, k) += d * a(i, k);
            }
        }
        if (V) {
            auto& mw = out.mixed.layers[l].weight;
            auto& mb = out.mixed.layers[l].bias;
            const Tensor& da = dot_inputs[l];
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t o = 0; o < od; ++o) {
                    double d = delta(i, o), dd = dot_delta(i, o);
                    mb[o] += dd;
                    for (std::size_t k = 0; k < in; ++k) mw(o, k) += dd * a(i, k) + d * da(i, k);
                }
            }
        }

        // propagate to the layer input
        Tensor g = Tensor::matrix(n, in);
        Tensor dg;
        if (V) dg = Tensor::matrix(n, in);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < in; ++k) {
                double s = 0.0, ds = 0.0;
                for (std::size_t o = 0; o < od; ++o) {
                    s += delta(i, o) * layer.weight(o, k);
                    if (V) ds += dot_delta(i, o) * layer.weight(o, k);
                }
                g(i, k) = s;
                if (V) dg(i, k) = ds;
            }
        }
        if (l == 0) {
            out.base.input_grad = std::move(g);
        } else {
            const Tensor& z = c.preacts[l - 1];
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (!(z[i] > 0.0)) {
                    g[i] = 0.0;
                    if (V) dg[i] = 0.0;
                }
            }
            delta = std::move(g);
            if (V) dot_delta = std::move(dg);
        }
    }
    if (V) out.directional = dot(out.base.input_grad, *V);
    return out;
}

}  // namespace detail

// Gradients of cross_entropy(forward(m, X), Y) with respect to the parameters
// and the input batch.
inline GradientBundle backward(const Model& m, const Tensor& X, const Tensor& Y) {
    return detail::backprop(m, X, Y, nullptr).base;
}

// backward() plus the derivative of the input gradient along V.
inline TangentBundle backward_with_tangent(const Model& m, const Tensor& X, const Tensor& Y, const Tensor& V) {
    return detail::backprop(m, X, Y, &V);
}

// grad_w <grad_X loss(f(X; w), Y), V>
inline ParamGrads mixed_grad(const Model& m, const Tensor& X, const Tensor& Y, const Tensor& V) {
    return detail::backprop(m, X, Y, &V).mixed;
}

}  // namespace fedmix
