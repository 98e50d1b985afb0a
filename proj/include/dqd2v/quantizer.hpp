#pragma once

#include <vector>

#include "dqd2v/backbone.hpp"

namespace dqd2v {

// Level-specific pre-processing of teacher layer outputs. Both run on plain
// values: the teacher side is gradient-stopped, and the pre-processing has no
// learnable parameters.
//
// Utterance level (norm = L2): L2Norm(Pool(mean of layers)) -> [B, D].
// The Instance variant (ablation S4) pools after instance norm instead.
Tensor preprocess_utterance_level(const std::vector<Tensor>& y_layers,
                                  const std::vector<idx>& lengths, LevelNorm norm);
// Frame level (norm = Instance): InsNorm(mean of InsNorm(layer)) -> [B, T, D].
// The L2 variant (ablation S3) normalizes each frame vector instead.
Tensor preprocess_frame_level(const std::vector<Tensor>& y_layers,
                              const std::vector<idx>& lengths, LevelNorm norm);

struct QuantizationResult {
    Var q;       // [P, D]: concatenated selected sub-codewords (codebook path)
    Var q_st;    // straight-through wrap: forward q, gradient to e
    std::vector<idx> indices;  // [P * G], row-major per position
    std::vector<idx> joint;    // [P]: sum_g idx_g * N^(G-1-g)
    Var km_loss;               // Eq.-6 value; constant 0 for the Gumbel type
    idx groups = 1;
    idx codewords = 0;  // N

    idx positions() const { return static_cast<idx>(joint.size()); }
};

// Nearest-codeword selection per product-quantization group (ties to the
// lowest index) plus the k-means loss with its stop-gradient routing.
// e: [P, D] rows; codebook: [G*N, D/G].
QuantizationResult kmeans_quantize(const Var& e, const Var& codebook, idx groups,
                                   double gamma_km);

// ||sg(e) - q||^2 + gamma * ||e - sg(q)||^2, mean-reduced.
// Term 1 moves only the codebook; term 2 (the commitment term) moves only
// the encoder-side path.
Var kmeans_codebook_term(const Var& e, const Var& q);
Var kmeans_commit_term(const Var& e, const Var& q);
Var kmeans_loss(const Var& e, const Var& q, double gamma);

// Gumbel-softmax alternative (ablation S1): hard one-hot forward, soft
// backward; the codebook trains through the soft path, so km_loss is 0.
// noise: pre-drawn [P, G*N] standard Gumbel noise. projection, when present,
// supplies learned logits; otherwise logits are negative squared distances.
QuantizationResult gumbel_quantize(const Var& e, const Var& codebook, idx groups,
                                   double temperature, const Tensor& noise,
                                   const nn::Linear* projection);

Tensor draw_gumbel_noise(idx positions, idx groups_times_n, Rng& rng);

// Joint index helper: i_1 * N + i_2 for G = 2.
idx joint_index(const std::vector<idx>& group_indices, idx n);

}  // namespace dqd2v
