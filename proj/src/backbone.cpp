#include "dqd2v/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace dqd2v {

idx MaskInfo::masked_count() const {
    idx n = 0;
    for (idx i = 0; i < mask01.numel(); ++i)
        if (mask01[i] != 0.0) ++n;
    return n;
}

MaskInfo span_mask(const std::vector<idx>& lengths, double mask_prob, idx mask_span,
                   Rng& rng) {
    require(mask_span >= 1, "span_mask: mask_span must be >= 1");
    require(mask_prob >= 0.0 && mask_prob <= 1.0, "span_mask: mask_prob must be in [0,1]");
    const idx B = static_cast<idx>(lengths.size());
    idx t_max = 0;
    for (idx len : lengths) t_max = std::max(t_max, len);
    MaskInfo info;
    info.mask01 = Tensor::zeros({B, t_max});
    info.spans.resize(static_cast<std::size_t>(B));
    for (idx b = 0; b < B; ++b) {
        const idx len = lengths[static_cast<std::size_t>(b)];
        for (idx t = 0; t < len; ++t) {
            if (rng.uniform() < mask_prob) {
                const idx end = std::min(t + mask_span, len);
                for (idx s = t; s < end; ++s) info.mask01.at(b, s) = 1.0;
            }
        }
        // merged spans from the realized mask
        auto& spans = info.spans[static_cast<std::size_t>(b)];
        idx start = -1;
        for (idx t = 0; t <= len; ++t) {
            const bool on = t < len && info.mask01.at(b, t) != 0.0;
            if (on && start < 0) start = t;
            if (!on && start >= 0) {
                spans.emplace_back(start, t - start);
                start = -1;
            }
        }
    }
    return info;
}

double ema_tau(idx step, idx anneal_steps, double tau_start, double tau_end) {
    if (anneal_steps <= 0 || step >= anneal_steps) return tau_end;
    const double f = static_cast<double>(step) / static_cast<double>(anneal_steps);
    return tau_start + (tau_end - tau_start) * f;
}

std::vector<Var> ContextEncoder::forward(Var x, const std::vector<idx>& lengths) const {
    Var pos = ag::conv1d(x, pos_conv.w, pos_conv.b, pos_conv.stride, pos_conv.pad,
                         pos_conv.groups);
    x = ag::add(x, ag::gelu(pos));
    x = nn::zero_padded(x, lengths);
    std::vector<Var> outs;
    outs.reserve(layers.size());
    for (const auto& layer : layers) {
        x = layer.forward(x, lengths);
        outs.push_back(x);
    }
    return outs;
}

Var PredictorHead::forward(Var x, const std::vector<idx>& lengths) const {
    for (const auto& layer : ctx) x = layer.forward(x, lengths);
    return out.forward(x);
}

Var Adapter::forward(const Var& y) const {
    Var e = y;
    if (deep1) {
        e = ag::gelu(ag::conv1d(e, deep1->w, deep1->b, 1, deep1->pad, deep1->groups));
        e = ag::conv1d(e, deep2->w, deep2->b, 1, deep2->pad, deep2->groups);
    }
    return ag::conv1d(e, base.w, base.b, 1, 0, base.groups);
}

Var TeacherPathExtra::forward(const Var& y, const std::vector<idx>& lengths) const {
    switch (kind) {
        case TeacherPathBlock::None:
            return y;
        case TeacherPathBlock::Transformer:
            return tf->forward(y, lengths);
        case TeacherPathBlock::Cnn: {
            Var h = ag::gelu(ag::conv1d(y, cnn1->w, cnn1->b, 1, cnn1->pad, cnn1->groups));
            return ag::conv1d(h, cnn2->w, cnn2->b, 1, cnn2->pad, cnn2->groups);
        }
    }
    return y;
}

Adapter make_adapter(nn::ParamStore& ps, const std::string& prefix, idx dim,
                     idx groups, bool enabled_deep, Regime regime, Rng& rng) {
    require_config(!(enabled_deep && regime == Regime::Shallow),
                   "adapter: the deep conv block is only valid in the deep-decoupling "
                   "regime (it collapses shallow training)");
    Adapter a;
    if (enabled_deep) {
        a.deep1 = nn::make_conv1d(ps, prefix + ".deep1", dim, dim, 3, 1, 1, 1, rng);
        a.deep2 = nn::make_conv1d(ps, prefix + ".deep2", dim, dim, 3, 1, 1, 1, rng);
    }
    a.base = nn::make_conv1d(ps, prefix + ".base", dim, dim, 1, 1, 0, groups, rng);
    return a;
}

Model::Model(const ModelConfig& cfg, Regime regime, std::uint64_t seed)
    : cfg_(cfg), regime_(regime) {
    cfg_.validate();
    require_config(cfg_.num_codewords_l >= 1 && cfg_.num_codewords_p >= 1,
                   "model: codeword counts must be resolved before construction");
    Rng rng = Rng::substream(seed, 0x3f0de1);
    const idx D = cfg_.model_dim;

    idx cin = cfg_.feature_dim;
    for (std::size_t i = 0; i < cfg_.conv_layers.size(); ++i) {
        const auto& c = cfg_.conv_layers[i];
        feat_convs.push_back(nn::make_conv1d(params_, "feat.conv" + std::to_string(i), cin,
                                             c.channels, c.kernel, c.stride, 0, 1, rng));
        cin = c.channels;
    }
    feat_proj = nn::make_linear(params_, "feat.proj", cin, D, rng);
    mask_emb = params_.create("student.mask_emb", nn::randn(rng, {D}, 0.1));

    auto build_ctx = [&](const std::string& prefix, bool trainable) {
        ContextEncoder enc;
        enc.pos_conv = nn::make_conv1d(params_, prefix + ".pos_conv", D, D,
                                       cfg_.pos_conv_kernel, 1, cfg_.pos_conv_kernel / 2,
                                       cfg_.pos_conv_groups, rng, trainable);
        for (idx l = 0; l < cfg_.num_layers; ++l)
            enc.layers.push_back(nn::make_transformer_layer(
                params_, prefix + ".layer" + std::to_string(l), D, cfg_.inner_dim,
                cfg_.heads, rng, trainable));
        return enc;
    };
    student = build_ctx("student.ctx", true);
    teacher = build_ctx("teacher.ctx", false);

    // EMA covers the context encoders only; the feature encoder is shared.
    {
        auto s_names = params_.names_with_prefix("student.ctx");
        auto t_names = params_.names_with_prefix("teacher.ctx");
        require(s_names.size() == t_names.size(), "ema: student/teacher param mismatch");
        for (std::size_t i = 0; i < s_names.size(); ++i) {
            Var s = params_.get(s_names[i]);
            Var t = params_.get(t_names[i]);
            require(s->val.same_shape(t->val), "ema: shape mismatch at " + s_names[i]);
            ema_pairs_.emplace_back(t, s);
        }
    }

    pred_t = nn::make_linear(params_, "pred_t", D, D, rng);
    auto build_pred = [&](const std::string& prefix) {
        PredictorHead h;
        for (idx l = 0; l < 2; ++l)
            h.ctx.push_back(nn::make_transformer_layer(params_, prefix + ".ctx" + std::to_string(l),
                                                       D, cfg_.inner_dim, cfg_.heads, rng));
        h.out = nn::make_linear(params_, prefix + ".out", D, D, rng);
        return h;
    };
    pred_l = build_pred("pred_l");
    pred_p = build_pred("pred_p");

    lang_head = nn::make_linear(params_, "lang_head", D, cfg_.num_codewords_l, rng);
    // blank symbol at index 0
    ctc_head = nn::make_linear(params_, "ctc_head", D, cfg_.num_codewords_p + 1, rng);

    const bool deep_block = regime_ == Regime::Deep && cfg_.deep_conv_block;
    adapter_l = make_adapter(params_, "adapter_l", D, cfg_.groups, deep_block, regime_, rng);
    adapter_p = make_adapter(params_, "adapter_p", D, cfg_.groups, deep_block, regime_, rng);

    teacher_extra.kind = cfg_.teacher_path_block;
    if (cfg_.teacher_path_block == TeacherPathBlock::Transformer) {
        teacher_extra.tf = nn::make_transformer_layer(params_, "teacher_extra.tf", D,
                                                      cfg_.inner_dim, cfg_.heads, rng);
    } else if (cfg_.teacher_path_block == TeacherPathBlock::Cnn) {
        teacher_extra.cnn1 = nn::make_conv1d(params_, "teacher_extra.cnn1", D, D, 3, 1, 1, 1, rng);
        teacher_extra.cnn2 = nn::make_conv1d(params_, "teacher_extra.cnn2", D, D, 3, 1, 1, 1, rng);
    }

    const idx sub = D / cfg_.groups;
    const double cb_std = 1.0 / std::sqrt(static_cast<double>(sub));
    codebook_l = params_.create("codebook_l",
                                nn::randn(rng, {cfg_.groups * cfg_.num_codewords_l, sub}, cb_std));
    codebook_p = params_.create("codebook_p",
                                nn::randn(rng, {cfg_.groups * cfg_.num_codewords_p, sub}, cb_std));

    if (cfg_.gumbel_projection_logits) {
        if (cfg_.lqt_type == QuantizerType::Gumbel)
            gumbel_proj_l = nn::make_linear(params_, "gumbel_proj_l", D,
                                            cfg_.groups * cfg_.num_codewords_l, rng);
        if (cfg_.pqt_type == QuantizerType::Gumbel)
            gumbel_proj_p = nn::make_linear(params_, "gumbel_proj_p", D,
                                            cfg_.groups * cfg_.num_codewords_p, rng);
    }

    sync_teacher();
}

Model::Encoded Model::feature_encode(const Tensor& features, const std::vector<idx>& lengths) {
    require(features.ndim() == 3, "feature_encode: expects [B,T,F]");
    require(features.dim(2) == cfg_.feature_dim, "feature_encode: feature_dim mismatch");
    const idx min_len = cfg_.min_input_len();
    std::vector<idx> out_len;
    for (idx len : lengths) {
        require(len >= min_len,
                "feature_encode: utterance of " + std::to_string(len) +
                    " frames is shorter than the conv receptive field (minimum " +
                    std::to_string(min_len) + " frames)");
        out_len.push_back(cfg_.conv_out_len(len));
    }
    Var x = ag::constant(features);
    for (const auto& conv : feat_convs)
        x = ag::gelu(ag::conv1d(x, conv.w, conv.b, conv.stride, 0, 1));
    x = feat_proj.forward(x);
    require(x->val.dim(1) == cfg_.conv_out_len(features.dim(1)),
            "feature_encode: conv length arithmetic mismatch");
    x = nn::zero_padded(x, out_len);
    return {x, out_len};
}

LayerOutputs Model::student_forward(const Var& latents, const MaskInfo* mask,
                                    const std::vector<idx>& lengths) {
    Var x = latents;
    if (mask) {
        const idx B = x->val.dim(0), T = x->val.dim(1);
        require(mask->mask01.dim(0) == B && mask->mask01.dim(1) == T,
                "student_forward: mask shape mismatch");
        Tensor keep = mask->mask01;
        for (idx i = 0; i < keep.numel(); ++i) keep[i] = 1.0 - keep[i];
        x = ag::add(ag::scale_frames(x, keep), ag::frame_outer(mask->mask01, mask_emb));
    }
    LayerOutputs out;
    out.layers = student.forward(x, lengths);
    out.lengths = lengths;
    return out;
}

LayerValues Model::teacher_forward(const Tensor& latents, const std::vector<idx>& lengths) {
    // Teacher parameters are constants and the input is a plain tensor, so
    // nothing here can receive gradient.
    std::vector<Var> outs = teacher.forward(ag::constant(latents), lengths);
    LayerValues vals;
    vals.lengths = lengths;
    vals.layers.reserve(outs.size());
    for (const Var& v : outs) vals.layers.push_back(v->val);
    return vals;
}

Tensor Model::build_regression_target(const LayerValues& teacher_out, idx top_k) const {
    const idx L = static_cast<idx>(teacher_out.layers.size());
    require(top_k >= 1 && top_k <= L, "build_regression_target: K must be in [1, L]");
    Tensor sum;
    Tensor normed;
    for (idx i = L - top_k; i < L; ++i) {
        ag::instance_norm_masked_value(teacher_out.layers[static_cast<std::size_t>(i)],
                                       teacher_out.lengths, normed);
        if (sum.empty()) {
            sum = normed;
        } else {
            for (idx j = 0; j < sum.numel(); ++j) sum[j] += normed[j];
        }
    }
    const double inv = 1.0 / static_cast<double>(top_k);
    for (idx j = 0; j < sum.numel(); ++j) sum[j] *= inv;
    return sum;
}

void Model::ema_update(double tau) {
    require(tau >= 0.0 && tau <= 1.0, "ema_update: tau must be in [0, 1]");
    for (auto& [t, s] : ema_pairs_) {
        require(t->val.same_shape(s->val), "ema_update: parameter structure mismatch");
        double* pt = t->val.data();
        const double* ps = s->val.data();
        for (idx i = 0; i < t->val.numel(); ++i)
            pt[i] = tau * pt[i] + (1.0 - tau) * ps[i];
    }
}

void Model::sync_teacher() {
    for (auto& [t, s] : ema_pairs_) t->val = s->val;
}

std::vector<std::string> Model::trainable_names_for(Regime regime) const {
    std::vector<std::string> out;
    for (const auto& name : params_.names()) {
        Var v = params_.get(name);
        if (!v->requires_grad) continue;
        if (regime == Regime::Shallow &&
            (name.rfind("lang_head", 0) == 0 || name.rfind("ctc_head", 0) == 0))
            continue;
        out.push_back(name);
    }
    return out;
}

std::vector<Var> Model::trainable_for(Regime regime) const {
    std::vector<Var> out;
    for (const auto& name : trainable_names_for(regime)) out.push_back(params_.get(name));
    return out;
}

nn::Linear Model::add_finetune_head(std::uint64_t seed) {
    require(!params_.contains("finetune.ctc_head.w"),
            "finetune head already attached to this model");
    Rng rng = Rng::substream(seed, 0xf17e);
    return nn::make_linear(params_, "finetune.ctc_head", cfg_.model_dim,
                           cfg_.num_codewords_p + 1, rng);
}

Var sl1_loss(const Var& y_pred, const Tensor& y_target, const MaskInfo& mask,
             double beta) {
    return ag::smooth_l1_masked(y_pred, ag::frozen_constant(y_target), mask.mask01, beta);
}

}  // namespace dqd2v
