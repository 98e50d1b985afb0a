#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "dqd2v/graph.hpp"
#include "dqd2v/rng.hpp"

namespace dqd2v::nn {

using ag::Var;

// Named parameter registry. Iteration order is creation order, which makes
// serialization, EMA pairing and the optimizer walk deterministic.
class ParamStore {
public:
    Var create(const std::string& name, Tensor init, bool trainable = true);
    Var get(const std::string& name) const;
    bool contains(const std::string& name) const { return map_.count(name) > 0; }
    const std::vector<std::string>& names() const { return names_; }
    std::vector<Var> trainable() const;
    // All parameters whose name starts with the prefix, in creation order.
    std::vector<std::string> names_with_prefix(const std::string& prefix) const;
    idx total_params() const;

private:
    std::vector<std::string> names_;
    std::unordered_map<std::string, Var> map_;
};

// --- initializers ---
Tensor randn(Rng& rng, std::vector<idx> shape, double std);

struct Linear {
    Var w;  // [Out, In]
    Var b;  // [Out] (may be empty)
    Var forward(const Var& x) const { return ag::linear(x, w, b); }
};
Linear make_linear(ParamStore& ps, const std::string& prefix, idx in, idx out,
                   Rng& rng, bool trainable = true, bool bias = true);

struct Conv1d {
    Var w;  // [Cout, K, Cin/groups]
    Var b;
    idx stride = 1, pad = 0, groups = 1;
    Var forward(const Var& x) const { return ag::conv1d(x, w, b, stride, pad, groups); }
};
Conv1d make_conv1d(ParamStore& ps, const std::string& prefix, idx cin, idx cout,
                   idx kernel, idx stride, idx pad, idx groups, Rng& rng,
                   bool trainable = true);

struct LayerNorm {
    Var g, b;
    Var forward(const Var& x) const { return ag::layer_norm(x, g, b); }
};
LayerNorm make_layer_norm(ParamStore& ps, const std::string& prefix, idx dim,
                          bool trainable = true);

// Pre-norm transformer block: x + Attn(LN(x)) then + FFN(LN(.)).
// Attention masks padded key positions per the lengths vector.
struct TransformerLayer {
    LayerNorm ln1, ln2;
    Linear wq, wk, wv, wo, ff1, ff2;
    idx heads = 1;
    Var forward(const Var& x, const std::vector<idx>& lengths) const;
};
TransformerLayer make_transformer_layer(ParamStore& ps, const std::string& prefix,
                                        idx dim, idx inner, idx heads, Rng& rng,
                                        bool trainable = true);

// Multi-head self-attention used by TransformerLayer (exposed for tests).
Var self_attention(const Var& x, const Linear& wq, const Linear& wk, const Linear& wv,
                   const Linear& wo, idx heads, const std::vector<idx>& lengths);

// Zero out frames at t >= lengths[b].
Var zero_padded(const Var& x, const std::vector<idx>& lengths);

// AdamW with global-norm gradient clipping. Parameters are registered once;
// step() applies one update and leaves gradients untouched (call zero_grad
// separately so instrumentation can inspect them).
class AdamW {
public:
    struct Config {
        double beta1 = 0.9;
        double beta2 = 0.98;
        double eps = 1e-8;
        double weight_decay = 0.01;
        double clip_norm = 1.0;  // <= 0 disables clipping
    };

    AdamW(std::vector<Var> params, Config cfg);
    void step(double lr);
    void zero_grad();
    // Inactive parameters are skipped entirely (no moments, no weight decay);
    // used for the fine-tuning freeze phase.
    void set_active(const std::vector<bool>& active);
    void set_all_active();
    double last_grad_norm() const { return last_grad_norm_; }
    idx t() const { return t_; }

    // Serialization hooks (moments are keyed by position).
    const std::vector<Var>& params() const { return params_; }
    std::vector<Tensor>& moments_m() { return m_; }
    std::vector<Tensor>& moments_v() { return v_; }
    void set_t(idx t) { t_ = t; }

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    std::vector<bool> active_;
    Config cfg_;
    idx t_ = 0;
    double last_grad_norm_ = 0.0;
};

}  // namespace dqd2v::nn
