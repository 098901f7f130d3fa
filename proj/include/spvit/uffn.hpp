#pragma once

// Unified FFN layer: a binary gate per hidden dimension turns the MLP
// expansion ratio into a fine-grained searchable quantity.

#include <string>
#include <vector>

#include "spvit/autodiff.hpp"
#include "spvit/errors.hpp"
#include "spvit/rng.hpp"
#include "spvit/umsa.hpp"

namespace spvit {

struct UffnParams {
    std::size_t c_in = 0;
    std::size_t hidden = 0;  // alpha * c_in in the dense model, |T| after slicing

    Param w_fc1;  // [c_in x hidden]
    Param b_fc1;  // [hidden]
    Param w_fc2;  // [hidden x c_in]
    Param b_fc2;  // [c_in]
    Param theta;  // [hidden] gate logits; empty once materialized

    UffnParams() = default;

    UffnParams(const std::string& prefix, std::size_t c_in_, std::size_t hidden_, double theta_init,
               Rng& rng, double init_std = 0.02)
        : c_in(c_in_), hidden(hidden_) {
        w_fc1 = Param(prefix + ".w_fc1", Tensor({c_in, hidden}));
        w_fc2 = Param(prefix + ".w_fc2", Tensor({hidden, c_in}));
        for (double& v : w_fc1.value.data) v = init_std * rng.normal();
        for (double& v : w_fc2.value.data) v = init_std * rng.normal();
        b_fc1 = Param(prefix + ".b_fc1", Tensor({hidden}));
        b_fc2 = Param(prefix + ".b_fc2", Tensor({c_in}));
        theta = Param(prefix + ".theta_t", Tensor::full({hidden}, theta_init));
    }

    bool searchable() const { return theta.value.numel() > 0 && theta.value.numel() == hidden; }

    void weight_params(std::vector<Param*>& out) {
        if (hidden > 0) out.insert(out.end(), {&w_fc1, &b_fc1, &w_fc2});
        out.push_back(&b_fc2);
    }

    void gate_params(std::vector<Param*>& out) {
        if (searchable()) out.push_back(&theta);
    }
};

enum class UffnMode { Search, Frozen, Dense };

// T = { t : Sigmoid(theta_t) >= 0.5 } = { t : theta_t >= 0 }.
inline std::vector<std::size_t> select_dims(const Tensor& theta) {
    std::vector<std::size_t> kept;
    for (std::size_t t = 0; t < theta.numel(); ++t)
        if (theta.data[t] >= 0.0) kept.push_back(t);
    return kept;
}

inline std::vector<int> sample_ffn_gates(const Tensor& theta, Rng& rng) {
    std::vector<int> g(theta.numel());
    for (std::size_t t = 0; t < theta.numel(); ++t)
        g[t] = rng.uniform() < sigmoid_scalar(theta.data[t]) ? 1 : 0;
    return g;
}

namespace detail {

// All hidden dimensions gone: output is the broadcast output bias, still a
// graph node so the bias trains.
inline Var bias_only_ffn(Tape& tape, Var x, UffnParams& p) {
    Var zeros = tape.leaf(Tensor({x.val().shape[0], p.c_in}));
    return add_rowvec(zeros, tape.param(p.b_fc2));
}

}  // namespace detail

// sum_t g_t GeLU(X W1_{:,t}) W2_{t,:} plus the output bias applied once.
// Search gates the full-width hidden activation; frozen evaluates only the
// kept columns/rows; dense runs the layer as stored (the materialized path).
inline Var uffn_forward(Tape& tape, Var x, UffnParams& p, UffnMode mode,
                        const std::vector<int>* gates = nullptr) {
    if (mode == UffnMode::Search) {
        if (!p.searchable() || gates == nullptr || gates->size() != p.hidden) {
            throw ContractError("uffn_forward: search mode needs gate draws for every hidden dim");
        }
        Var h = gelu(add_rowvec(matmul(x, tape.param(p.w_fc1)), tape.param(p.b_fc1)));
        Var g = ste_bernoulli(tape.param(p.theta), *gates);
        return add_rowvec(matmul(colwise_mul(h, g), tape.param(p.w_fc2)), tape.param(p.b_fc2));
    }
    if (mode == UffnMode::Frozen) {
        if (!p.searchable()) throw ContractError("uffn_forward: frozen mode needs gate logits");
        const std::vector<std::size_t> kept = select_dims(p.theta.value);
        if (kept.empty()) return detail::bias_only_ffn(tape, x, p);
        Var w1 = gather_cols(tape.param(p.w_fc1), kept);
        Var b1 = gather_elems(tape.param(p.b_fc1), kept);
        Var h = gelu(add_rowvec(matmul(x, w1), b1));
        Var w2 = gather_rows(tape.param(p.w_fc2), kept);
        return add_rowvec(matmul(h, w2), tape.param(p.b_fc2));
    }
    if (p.hidden == 0) return detail::bias_only_ffn(tape, x, p);
    Var h = gelu(add_rowvec(matmul(x, tape.param(p.w_fc1)), tape.param(p.b_fc1)));
    return add_rowvec(matmul(h, tape.param(p.w_fc2)), tape.param(p.b_fc2));
}

// Drops W1 columns and W2 rows outside T. Empty T degenerates to a
// bias-plus-residual layer, kept rather than removed.
inline UffnParams materialize_ffn(const UffnParams& p, const std::vector<std::size_t>& kept) {
    UffnParams out;
    out.c_in = p.c_in;
    out.hidden = kept.size();
    out.b_fc2 = Param(p.b_fc2.name, p.b_fc2.value);
    if (kept.empty()) return out;
    out.w_fc1 = Param(p.w_fc1.name, Tensor({p.c_in, kept.size()}));
    out.b_fc1 = Param(p.b_fc1.name, Tensor({kept.size()}));
    out.w_fc2 = Param(p.w_fc2.name, Tensor({kept.size(), p.c_in}));
    for (std::size_t t = 0; t < kept.size(); ++t) {
        for (std::size_t c = 0; c < p.c_in; ++c) {
            out.w_fc1.value.at(c, t) = p.w_fc1.value.at(c, kept[t]);
            out.w_fc2.value.at(t, c) = p.w_fc2.value.at(kept[t], c);
        }
        out.b_fc1.value.data[t] = p.b_fc1.value.data[kept[t]];
    }
    return out;
}

}  // namespace spvit
