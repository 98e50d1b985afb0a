#pragma once

#include <optional>
#include <vector>

#include "dqd2v/config.hpp"
#include "dqd2v/nn.hpp"
#include "dqd2v/synthdata.hpp"

namespace dqd2v {

using ag::Var;

struct MaskInfo {
    Tensor mask01;  // [B,T], 1.0 = masked; padded positions are never masked
    std::vector<std::vector<std::pair<idx, idx>>> spans;  // merged (start, len)
    idx masked_count() const;
};

// Span starts drawn i.i.d. per valid frame with probability mask_prob; each
// start masks mask_span frames, clipped at the utterance length.
MaskInfo span_mask(const std::vector<idx>& lengths, double mask_prob, idx mask_span,
                   Rng& rng);

// Linear anneal tau_start -> tau_end over anneal_steps, then constant.
double ema_tau(idx step, idx anneal_steps, double tau_start, double tau_end);

struct LayerOutputs {
    std::vector<Var> layers;  // length L, each [B,T,D]
    std::vector<idx> lengths;
};

struct LayerValues {
    std::vector<Tensor> layers;
    std::vector<idx> lengths;
};

// Positional conv + L pre-norm transformer layers; returns every layer's
// residual stream.
struct ContextEncoder {
    nn::Conv1d pos_conv;
    std::vector<nn::TransformerLayer> layers;
    std::vector<Var> forward(Var x, const std::vector<idx>& lengths) const;
};

// Predictor with context layers (used for the language/phoneme branches).
struct PredictorHead {
    std::vector<nn::TransformerLayer> ctx;
    nn::Linear out;
    Var forward(Var x, const std::vector<idx>& lengths) const;
};

// Adapter between (gradient-stopped) teacher features and a codebook: the
// only trainable path the quantizer losses can reach on the teacher side.
struct Adapter {
    std::optional<nn::Conv1d> deep1, deep2;  // kernel-3 block, deep regime only
    nn::Conv1d base;                         // kernel-1 grouped conv
    Var forward(const Var& y) const;
};

// Optional extra trainable block in the teacher->quantizer path (ablations
// S5/S6; collapses in self-supervised training).
struct TeacherPathExtra {
    TeacherPathBlock kind = TeacherPathBlock::None;
    std::optional<nn::TransformerLayer> tf;
    std::optional<nn::Conv1d> cnn1, cnn2;
    Var forward(const Var& y, const std::vector<idx>& lengths) const;
};

class Model {
public:
    Model(const ModelConfig& cfg, Regime regime, std::uint64_t seed);

    struct Encoded {
        Var latents;  // [B,T',D], padded frames zeroed
        std::vector<idx> lengths;
    };
    // Shared conv feature encoder + projection. Gradients flow through the
    // student path only; the teacher consumes a detached copy.
    Encoded feature_encode(const Tensor& features, const std::vector<idx>& lengths);

    // Masked positions are replaced by the learned mask embedding before the
    // student context encoder. mask may be null (no masking).
    LayerOutputs student_forward(const Var& latents, const MaskInfo* mask,
                                 const std::vector<idx>& lengths);
    // Gradient-stopped by construction: consumes values, returns values.
    LayerValues teacher_forward(const Tensor& latents, const std::vector<idx>& lengths);

    // y_t = mean of InsNorm over the top K teacher layers (valid frames).
    Tensor build_regression_target(const LayerValues& teacher, idx top_k) const;

    Var predictor_t(const Var& x_t) const { return pred_t.forward(x_t); }

    // theta_T <- tau * theta_T + (1 - tau) * theta_S on context-encoder pairs.
    void ema_update(double tau);
    // Copy student context params into the teacher (used at initialization).
    void sync_teacher();

    const ModelConfig& config() const { return cfg_; }
    Regime regime() const { return regime_; }
    nn::ParamStore& params() { return params_; }
    const nn::ParamStore& params() const { return params_; }

    // Trainable parameters for a regime: shallow excludes the supervised
    // heads, deep includes them.
    std::vector<Var> trainable_for(Regime regime) const;
    std::vector<std::string> trainable_names_for(Regime regime) const;

    // Fresh CTC head for fine-tuning, registered under "finetune.ctc_head".
    nn::Linear add_finetune_head(std::uint64_t seed);

    // --- submodules (used by the quantizer/objectives/trainer code) ---
    std::vector<nn::Conv1d> feat_convs;
    nn::Linear feat_proj;
    Var mask_emb;
    ContextEncoder student, teacher;
    nn::Linear pred_t;
    PredictorHead pred_l, pred_p;
    nn::Linear lang_head, ctc_head;
    Adapter adapter_l, adapter_p;
    TeacherPathExtra teacher_extra;
    Var codebook_l;  // [G*N_l, D/G]
    Var codebook_p;  // [G*N_p, D/G]
    std::optional<nn::Linear> gumbel_proj_l, gumbel_proj_p;

private:
    ModelConfig cfg_;
    Regime regime_;
    nn::ParamStore params_;
    std::vector<std::pair<Var, Var>> ema_pairs_;  // (teacher, student)
};

// Adapter factory; throws ConfigError when the deep block is requested in the
// shallow regime (that configuration collapses).
Adapter make_adapter(nn::ParamStore& ps, const std::string& prefix, idx dim,
                     idx groups, bool enabled_deep, Regime regime, Rng& rng);

// Eq.-style smooth-L1 masked prediction loss over masked valid frames.
Var sl1_loss(const Var& y_pred, const Tensor& y_target, const MaskInfo& mask,
             double beta);

}  // namespace dqd2v
