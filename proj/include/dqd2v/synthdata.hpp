#pragma once

#include <string>
#include <vector>

#include "dqd2v/config.hpp"
#include "dqd2v/rng.hpp"
#include "dqd2v/tensor.hpp"

namespace dqd2v {

struct Utterance {
    idx id = 0;
    Tensor features;                  // [T, feature_dim]
    idx language_id = 0;
    std::vector<idx> phoneme_frames;  // [T] frame-level ground truth
    std::vector<idx> phoneme_seq;     // runs of phoneme_frames collapsed
    bool is_high_resource = false;

    idx frames() const { return features.dim(0); }
};

struct UtteranceBatch {
    Tensor features;  // [B, T_max, feature_dim], padded positions zero
    std::vector<idx> lengths;
    std::vector<idx> utterance_ids;
    std::vector<idx> language_ids;                 // empty when labels stripped
    std::vector<std::vector<idx>> phoneme_seqs;    // empty when labels stripped
    std::vector<bool> high_resource_mask;

    idx size() const { return static_cast<idx>(lengths.size()); }
    bool has_labels() const { return !language_ids.empty(); }
    void strip_labels();
};

std::vector<idx> collapse_runs(const std::vector<idx>& frames);

// Features are built per frame as language offset + phoneme prototype +
// Gaussian noise; each utterance uses its own seed substream, so generation
// is deterministic and order-independent.
std::vector<Utterance> generate_corpus(const CorpusSpec& spec);

// Draws languages ~ (n_l/N)^alpha (n_l = utterance count), then an utterance
// uniformly within the language. One consumer per instance.
class BalancedSampler {
public:
    BalancedSampler(const std::vector<Utterance>& corpus, double alpha,
                    std::uint64_t seed);
    const Utterance& next();
    const std::vector<double>& language_probs() const { return probs_; }

    std::string save_rng_state() const { return rng_.save_state(); }
    void load_rng_state(const std::string& s) { rng_.load_state(s); }

private:
    const std::vector<Utterance>* corpus_;
    std::vector<std::vector<idx>> by_language_;
    std::vector<double> probs_;  // normalized (n_l/N)^alpha
    std::vector<double> cdf_;
    Rng rng_;
};

// Packs the longest prefix of `utts` whose total frame count fits max_tokens
// into one padded batch. Returns the batch and how many utterances were
// consumed. The first utterance must fit on its own.
UtteranceBatch make_batch(const std::vector<const Utterance*>& utts, idx max_tokens,
                          idx* consumed = nullptr);

// Directory layout: manifest.tsv plus one binary tensor file per utterance.
void export_corpus(const std::vector<Utterance>& corpus, const std::string& dir);
std::vector<Utterance> import_corpus(const std::string& dir);

}  // namespace dqd2v
