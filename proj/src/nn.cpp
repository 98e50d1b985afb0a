#include "dqd2v/nn.hpp"

#include <cmath>

namespace dqd2v::nn {

Var ParamStore::create(const std::string& name, Tensor init, bool trainable) {
    require(map_.count(name) == 0, "ParamStore: duplicate parameter " + name);
    Var v = trainable ? ag::parameter(std::move(init)) : ag::constant(std::move(init));
    names_.push_back(name);
    map_[name] = v;
    return v;
}

Var ParamStore::get(const std::string& name) const {
    auto it = map_.find(name);
    require(it != map_.end(), "ParamStore: unknown parameter " + name);
    return it->second;
}

std::vector<Var> ParamStore::trainable() const {
    std::vector<Var> out;
    for (const auto& n : names_) {
        const Var& v = map_.at(n);
        if (v->requires_grad) out.push_back(v);
    }
    return out;
}

std::vector<std::string> ParamStore::names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& n : names_)
        if (n.rfind(prefix, 0) == 0) out.push_back(n);
    return out;
}

idx ParamStore::total_params() const {
    idx n = 0;
    for (const auto& name : names_) n += map_.at(name)->val.numel();
    return n;
}

Tensor randn(Rng& rng, std::vector<idx> shape, double std) {
    Tensor t(std::move(shape));
    for (idx i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, std);
    return t;
}

Linear make_linear(ParamStore& ps, const std::string& prefix, idx in, idx out,
                   Rng& rng, bool trainable, bool bias) {
    Linear l;
    l.w = ps.create(prefix + ".w", randn(rng, {out, in}, 1.0 / std::sqrt(static_cast<double>(in))),
                    trainable);
    if (bias) l.b = ps.create(prefix + ".b", Tensor::zeros({out}), trainable);
    return l;
}

Conv1d make_conv1d(ParamStore& ps, const std::string& prefix, idx cin, idx cout,
                   idx kernel, idx stride, idx pad, idx groups, Rng& rng,
                   bool trainable) {
    require_config(cin % groups == 0 && cout % groups == 0,
                   "conv1d: groups must divide channel counts");
    Conv1d c;
    const idx fan_in = kernel * (cin / groups);
    c.w = ps.create(prefix + ".w",
                    randn(rng, {cout, kernel, cin / groups},
                          1.0 / std::sqrt(static_cast<double>(fan_in))),
                    trainable);
    c.b = ps.create(prefix + ".b", Tensor::zeros({cout}), trainable);
    c.stride = stride;
    c.pad = pad;
    c.groups = groups;
    return c;
}

LayerNorm make_layer_norm(ParamStore& ps, const std::string& prefix, idx dim,
                          bool trainable) {
    LayerNorm ln;
    ln.g = ps.create(prefix + ".g", Tensor::full({dim}, 1.0), trainable);
    ln.b = ps.create(prefix + ".b", Tensor::zeros({dim}), trainable);
    return ln;
}

Var self_attention(const Var& x, const Linear& wq, const Linear& wk, const Linear& wv,
                   const Linear& wo, idx heads, const std::vector<idx>& lengths) {
    const idx B = x->val.dim(0), T = x->val.dim(1), D = x->val.dim(2);
    require_config(D % heads == 0, "attention: heads must divide model dim");
    const idx dh = D / heads;

    auto split = [&](const Var& v) {
        // [B,T,D] -> [B*H, T, dh]
        Var r = ag::reshape(v, {B, T, heads, dh});
        r = ag::permute(r, {0, 2, 1, 3});
        return ag::reshape(r, {B * heads, T, dh});
    };
    Var q = split(wq.forward(x));
    Var k = split(wk.forward(x));
    Var v = split(wv.forward(x));

    Var scores = ag::scale(ag::bmm(q, k, /*tb=*/true), 1.0 / std::sqrt(static_cast<double>(dh)));

    // Additive key-padding bias, constant w.r.t. the graph.
    Tensor bias({B * heads, T, T});
    for (idx b = 0; b < B; ++b) {
        const idx len = lengths[static_cast<std::size_t>(b)];
        for (idx h = 0; h < heads; ++h)
            for (idx i = 0; i < T; ++i)
                for (idx j = 0; j < T; ++j)
                    bias.at(b * heads + h, i, j) = j < len ? 0.0 : -1e30;
    }
    scores = ag::add(scores, ag::constant(std::move(bias)));
    Var attn = ag::softmax_rows(scores);
    Var ctx = ag::bmm(attn, v);  // [B*H, T, dh]
    ctx = ag::reshape(ctx, {B, heads, T, dh});
    ctx = ag::permute(ctx, {0, 2, 1, 3});
    ctx = ag::reshape(ctx, {B, T, D});
    return wo.forward(ctx);
}

Var TransformerLayer::forward(const Var& x, const std::vector<idx>& lengths) const {
    Var h = ag::add(x, self_attention(ln1.forward(x), wq, wk, wv, wo, heads, lengths));
    Var f = ff2.forward(ag::gelu(ff1.forward(ln2.forward(h))));
    return ag::add(h, f);
}

TransformerLayer make_transformer_layer(ParamStore& ps, const std::string& prefix,
                                        idx dim, idx inner, idx heads, Rng& rng,
                                        bool trainable) {
    TransformerLayer t;
    t.ln1 = make_layer_norm(ps, prefix + ".ln1", dim, trainable);
    t.ln2 = make_layer_norm(ps, prefix + ".ln2", dim, trainable);
    t.wq = make_linear(ps, prefix + ".wq", dim, dim, rng, trainable);
    t.wk = make_linear(ps, prefix + ".wk", dim, dim, rng, trainable);
    t.wv = make_linear(ps, prefix + ".wv", dim, dim, rng, trainable);
    t.wo = make_linear(ps, prefix + ".wo", dim, dim, rng, trainable);
    t.ff1 = make_linear(ps, prefix + ".ff1", dim, inner, rng, trainable);
    t.ff2 = make_linear(ps, prefix + ".ff2", inner, dim, rng, trainable);
    t.heads = heads;
    return t;
}

Var zero_padded(const Var& x, const std::vector<idx>& lengths) {
    const idx B = x->val.dim(0), T = x->val.dim(1);
    Tensor m({B, T});
    for (idx b = 0; b < B; ++b) {
        const idx len = lengths[static_cast<std::size_t>(b)];
        for (idx t = 0; t < T; ++t) m.at(b, t) = t < len ? 1.0 : 0.0;
    }
    return ag::scale_frames(x, m);
}

AdamW::AdamW(std::vector<Var> params, Config cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Var& p : params_) {
        m_.push_back(Tensor::zeros(p->val.shape()));
        v_.push_back(Tensor::zeros(p->val.shape()));
    }
    active_.assign(params_.size(), true);
}

void AdamW::set_active(const std::vector<bool>& active) {
    require(active.size() == params_.size(), "AdamW::set_active: size mismatch");
    active_ = active;
}

void AdamW::set_all_active() { active_.assign(params_.size(), true); }

void AdamW::step(double lr) {
    ++t_;
    double sq = 0.0;
    for (std::size_t j = 0; j < params_.size(); ++j) {
        if (!active_[j]) continue;
        const Var& p = params_[j];
        if (!p->grad.same_shape(p->val)) continue;
        const double* g = p->grad.data();
        for (idx i = 0; i < p->grad.numel(); ++i) sq += g[i] * g[i];
    }
    last_grad_norm_ = std::sqrt(sq);
    double gscale = 1.0;
    if (cfg_.clip_norm > 0.0 && last_grad_norm_ > cfg_.clip_norm)
        gscale = cfg_.clip_norm / last_grad_norm_;

    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t j = 0; j < params_.size(); ++j) {
        if (!active_[j]) continue;
        Var& p = params_[j];
        const bool has_grad = p->grad.same_shape(p->val);
        double* w = p->val.data();
        double* m = m_[j].data();
        double* v = v_[j].data();
        for (idx i = 0; i < p->val.numel(); ++i) {
            const double g = has_grad ? p->grad[i] * gscale : 0.0;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            w[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * w[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (Var& p : params_)
        if (p->grad.same_shape(p->val)) p->grad.fill(0.0);
}

}  // namespace dqd2v::nn
