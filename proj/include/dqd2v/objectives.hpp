#pragma once

#include <string>
#include <vector>

#include "dqd2v/quantizer.hpp"

namespace dqd2v {

// Eq.-7 style predictors over student layers.
Var predictor_l(const PredictorHead& head, const Var& x_l, const std::vector<idx>& lengths);
Var predictor_p(const PredictorHead& head, const Var& x_p, const std::vector<idx>& lengths);

// For each masked frame (anchor), n_neg other masked frames of the same
// utterance: distinct when enough exist, sampled with replacement otherwise.
// anchors_per_utt holds, per utterance, the anchor positions as indices into
// the flat quantized-row space. Utterances with fewer than two masked frames
// contribute no anchors.
struct NegativeSet {
    std::vector<idx> anchor_rows;            // [M]
    std::vector<std::vector<idx>> negatives; // [M] x n_neg (row indices)
};
NegativeSet sample_negatives_phoneme(const std::vector<std::vector<idx>>& anchors_per_utt,
                                     idx n_neg, Rng& rng);
// Negatives for utterance b are the other utterances of the batch (all of
// them when n_neg >= B-1). Returns one row set per utterance; empty when B=1.
std::vector<std::vector<idx>> sample_negatives_language(idx batch, idx n_neg, Rng& rng);

// Eq.-8 InfoNCE over cosine similarities. anchors/pos: [M,D]; negatives
// rectangular [M][K] row indices into `bank` ([R,D]).
Var contrastive_loss(const Var& anchors, const Var& positives, const Var& bank,
                     const std::vector<std::vector<idx>>& negatives, double kappa);

// Binary mixing (Eq. 10): exactly floor(n/2) positions take x, the rest q;
// Bernoulli(0.5) when n == 1. Returned mask holds 1 where x is selected.
Tensor draw_mix_mask_utterance(idx batch, Rng& rng);
Tensor draw_mix_mask_frames(const std::vector<idx>& lengths, idx t_max, Rng& rng);
Var mix_rows(const Var& x, const Var& q_st, const Tensor& mask01);        // [B,D]
Var mix_frames(const Var& x, const Var& q_st, const Tensor& mask01);      // [B,T,D]

// CE over the utterance-level unified representation.
Var ce_loss(const Var& u_l, const nn::Linear& lang_head, const std::vector<idx>& language_ids);

// CTC over the frame-level unified representation, averaged over feasible
// high-resource utterances (0 when none). Labels are phoneme ids; symbol
// space shifts by +1 for the blank at 0. Infeasible utterances are skipped
// with a warning.
Var ctc_supervised_loss(const Var& u_p, const nn::Linear& ctc_head,
                        const std::vector<std::vector<idx>>& phoneme_seqs,
                        const std::vector<idx>& lengths,
                        const std::vector<bool>& high_resource_mask);

// Totals.
Var quantization_objective(const Var& ctr, const Var& km);  // Eq. 9
Var shallow_total(const Var& sl1, const Var& qt_l, const Var& qt_p, bool lqt_on,
                  bool pqt_on, const LossWeights& w);        // L_sc
Var deep_total(const Var& l_sc, const Var& ce, const Var& ctc, double gamma3);  // L_dc

struct LossReport {
    double sl1 = 0, km_l = 0, km_p = 0, ctr_l = 0, ctr_p = 0, ce = 0, ctc = 0;
    double total = 0;
    Regime regime = Regime::Shallow;
    // Recomposes the total from the components (the invariant check).
    double composed(const LossWeights& w, bool lqt_on, bool pqt_on) const;
    std::string tsv_header() const;
    std::string tsv_line(idx step, double lr, double tau) const;
};

// All randomness a training step consumes, drawn up front so the loss graph
// is a deterministic function of (parameters, batch, StepRand).
struct StepRand {
    MaskInfo mask;
    std::vector<std::vector<idx>> neg_l;  // per utterance
    NegativeSet neg_p;
    Tensor mix_mask_l;  // [B]
    Tensor mix_mask_p;  // [B,T']
    Tensor gumbel_l, gumbel_p;
};
StepRand draw_step_rand(const ModelConfig& cfg, const TrainConfig& tc,
                        const UtteranceBatch& batch, Rng& rng);

struct LossBundle {
    Var total;
    Var sl1, km_l, km_p, ctr_l, ctr_p, ce, ctc;
    std::vector<idx> joint_l, joint_p;      // quantizer assignments this step
    std::vector<idx> indices_l, indices_p;  // per-group indices, row-major
    LossReport report(const TrainConfig& tc, const ModelConfig& cfg) const;
};

// The full per-step loss graph for the configured regime.
LossBundle build_losses(Model& model, const UtteranceBatch& batch, const TrainConfig& tc,
                        const StepRand& sr);

}  // namespace dqd2v
