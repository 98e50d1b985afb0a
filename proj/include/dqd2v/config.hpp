#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dqd2v/common.hpp"

namespace dqd2v {

enum class Regime { Shallow, Deep };
enum class QuantizerType { KMeans, Gumbel };
enum class LevelNorm { L2, Instance };
// Extra trainable block between teacher pre-processing and the adapter.
// Known to destabilize self-supervised training; exposed for the ablations.
enum class TeacherPathBlock { None, Transformer, Cnn };

std::string to_string(Regime r);
std::string to_string(QuantizerType q);
std::string to_string(LevelNorm n);
std::string to_string(TeacherPathBlock b);

struct CorpusSpec {
    idx num_languages = 4;
    idx num_phonemes = 12;
    std::vector<double> hours_per_language = {4.0, 2.0, 1.0, 1.0};
    idx total_utterances = 240;
    idx frames_min = 40;
    idx frames_max = 80;
    idx feature_dim = 40;
    idx span_min = 6;   // consecutive raw frames per phoneme token
    idx span_max = 10;
    double noise_std = 0.15;   // per-component Gaussian noise
    double lang_scale = 0.5;   // expected L2 norm of the per-language offset
    double proto_scale = 1.0;  // expected L2 norm of phoneme prototypes
    double shared_phoneme_fraction = 0.5;
    idx high_resource_language = -1;  // -1: the language with the most hours
    std::uint64_t seed = 1234;

    void validate() const;
    idx resolved_high_resource() const;
};

struct ConvLayerSpec {
    idx channels = 0;
    idx kernel = 0;
    idx stride = 0;
};

struct ModelConfig {
    std::vector<ConvLayerSpec> conv_layers = {{64, 4, 2}, {64, 3, 2}};
    idx feature_dim = 40;
    idx num_layers = 8;  // L
    idx model_dim = 64;  // D
    idx inner_dim = 128;
    idx heads = 4;
    idx top_k = 4;  // K: teacher layers averaged into the regression target
    std::vector<idx> y_l_layers = {2, 3, 4};
    std::vector<idx> y_p_layers = {5, 6};
    idx pos_conv_kernel = 9;
    idx pos_conv_groups = 4;
    double mask_prob = 0.2;
    idx mask_span = 3;
    double sl1_beta = 1.0;

    // Quantizer side.
    idx groups = 2;            // product-quantization groups G
    idx num_codewords_l = -1;  // -1: derived from corpus (num_languages)
    idx num_codewords_p = -1;  // -1: derived from corpus (num_phonemes)
    bool lqt_enabled = true;
    bool pqt_enabled = true;
    QuantizerType lqt_type = QuantizerType::KMeans;
    QuantizerType pqt_type = QuantizerType::KMeans;
    LevelNorm lqt_norm = LevelNorm::L2;
    LevelNorm pqt_norm = LevelNorm::Instance;
    bool deep_conv_block = true;  // adapter conv block, deep regime only
    TeacherPathBlock teacher_path_block = TeacherPathBlock::None;
    bool gumbel_projection_logits = false;
    double gumbel_temperature = 0.5;

    idx x_l_layer() const;  // = max(y_l_layers)
    idx x_p_layer() const;  // = max(y_p_layers)
    idx conv_out_len(idx in_len) const;   // conv length arithmetic
    idx min_input_len() const;            // receptive field of the conv stack
    idx total_stride() const;
    void validate() const;
};

struct LossWeights {
    double gamma1 = 0.1;    // language-branch weight
    double gamma2 = 0.2;    // phoneme-branch weight
    double gamma3 = 0.1;    // supervised weight (deep)
    double gamma_km = 0.25; // commitment weight in the k-means loss
    double kappa = 0.1;     // contrastive temperature
    void validate() const;
};

struct TrainConfig {
    Regime regime = Regime::Shallow;
    idx total_updates = 2000;
    double lr_peak = 1e-3;
    double lr_end = 1e-5;
    double warm_pct = 3.0;
    double hold_pct = 90.0;
    double decay_pct = 7.0;
    idx max_tokens = 600;  // raw input frames per batch
    std::uint64_t seed = 1;
    idx eval_every = 250;
    double collapse_min_perplexity = -1.0;  // <0: N/10 per quantizer
    idx collapse_consecutive = 2;
    double max_loss = 1e4;
    double balance_alpha = 0.5;
    double tau_start = 0.999;
    double tau_end = 0.9999;
    double tau_anneal_frac = 0.3;
    double weight_decay = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    idx n_neg_phoneme = 50;
    idx n_neg_language = -1;  // -1: all other utterances in the batch
    LossWeights weights;

    void validate() const;
};

struct FinetuneConfig {
    idx freeze_updates = 150;
    idx total_updates = 400;
    double lr = 5e-4;
    std::string unit = "phoneme";  // or "character-analogue"
    double holdout_fraction = 0.15;
    std::uint64_t seed = 7;
    idx max_tokens = 600;
    void validate() const;
};

struct RunConfig {
    int config_version = 1;
    CorpusSpec corpus;
    ModelConfig model;
    TrainConfig train;
    FinetuneConfig finetune;
    std::string corpus_dir;       // when set, load a corpus instead of generating
    std::string checkpoint_path;  // analyze/finetune input; empty = <out>/checkpoint_final.bin

    // Fills the -1 codeword counts from the corpus and cross-checks dims.
    void resolve();
    void validate() const;
};

// JSON round trip. Loading rejects unknown keys and version mismatches.
RunConfig config_from_json_text(const std::string& text);
std::string config_to_json_text(const RunConfig& cfg);
RunConfig load_config(const std::string& path);
void save_config(const RunConfig& cfg, const std::string& path);

// The default desk-scale setup used by the CLI and the acceptance suite.
RunConfig toy_config();
// A very small model for gradient-suite style tests (< 5k parameters).
RunConfig micro_config();

}  // namespace dqd2v
