#pragma once

#include <string>
#include <vector>

#include "dqd2v/backbone.hpp"

namespace dqd2v {

enum class Level { Language, Phoneme };

// Joint-codeword x label count matrix plus per-group usage (for AGN).
struct CooccurrenceMatrix {
    idx num_codes = 0;   // joint index space, N^G
    idx num_labels = 0;
    std::vector<idx> counts;  // [num_codes * num_labels]
    idx total = 0;
    Level code_axis = Level::Language;
    idx groups = 1;
    idx codewords = 0;                      // N per group
    std::vector<idx> group_usage;           // [G * N]

    idx& at(idx code, idx label) { return counts[static_cast<std::size_t>(code * num_labels + label)]; }
    idx at(idx code, idx label) const { return counts[static_cast<std::size_t>(code * num_labels + label)]; }
    void add(idx code, idx label) { ++at(code, label); ++total; }
};

struct MetricReport {
    double purity = 0.0;
    double nmi = 0.0;
    idx acn = 0;                 // active joint codewords
    std::vector<idx> agn;        // active clusters per group
    std::vector<double> per_label_purity;  // majority agreement per label
};

// Ground-truth frame labels mapped to the conv frame rate by majority vote
// over each output frame's receptive window.
std::vector<idx> downsample_labels(const std::vector<idx>& frame_labels,
                                   const ModelConfig& cfg);

// Runs the teacher-side quantization path over the corpus and counts
// (joint codeword, label) pairs: one per utterance at the language level, one
// per valid frame at the phoneme level. Deterministic (no sampling).
CooccurrenceMatrix collect_counts(Model& model, const std::vector<Utterance>& corpus,
                                  Level level, idx max_tokens);

double purity(const CooccurrenceMatrix& m);
double nmi(const CooccurrenceMatrix& m);
MetricReport metric_report(const CooccurrenceMatrix& m);

// Heatmap data: commented header (ACN/AGN/purity/NMI), then P(label|code)
// with labels as rows (sorted by frequency) and active codes as columns
// (sorted by most-correlated label, ties by code index).
void write_conditional_report(const CooccurrenceMatrix& m, const std::string& path);

// Phoneme-level metrics per language subset.
std::vector<MetricReport> per_language_metrics(Model& model,
                                               const std::vector<Utterance>& corpus,
                                               idx num_languages, idx max_tokens);

// Greedy CTC decoding: argmax per frame, collapse repeats, drop blanks.
std::vector<std::vector<idx>> greedy_ctc_decode(const Tensor& logits,
                                                const std::vector<idx>& lengths);
idx edit_distance(const std::vector<idx>& a, const std::vector<idx>& b);
double token_error_rate(const std::vector<idx>& hyp, const std::vector<idx>& ref);

}  // namespace dqd2v
