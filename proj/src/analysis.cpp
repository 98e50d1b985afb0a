#include "dqd2v/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "dqd2v/objectives.hpp"

namespace dqd2v {

std::vector<idx> downsample_labels(const std::vector<idx>& frame_labels,
                                   const ModelConfig& cfg) {
    const idx T_in = static_cast<idx>(frame_labels.size());
    const idx T_out = cfg.conv_out_len(T_in);
    const idx stride = cfg.total_stride();
    const idx window = cfg.min_input_len();
    std::vector<idx> out(static_cast<std::size_t>(T_out));
    for (idx t = 0; t < T_out; ++t) {
        const idx lo = t * stride;
        const idx hi = std::min(lo + window, T_in);
        std::map<idx, idx> freq;
        for (idx i = lo; i < hi; ++i) ++freq[frame_labels[static_cast<std::size_t>(i)]];
        idx best = -1, best_n = -1;
        for (const auto& [label, n] : freq) {
            if (n > best_n) {  // ties resolve to the smallest label (map order)
                best = label;
                best_n = n;
            }
        }
        out[static_cast<std::size_t>(t)] = best;
    }
    return out;
}

namespace {

// Quantizer assignments for one batch along the teacher path. Argmax is used
// for Gumbel-type quantizers (zero noise), so inference is deterministic.
struct BatchCodes {
    std::vector<idx> joint_l;                 // [B]
    std::vector<idx> indices_l;               // [B*G]
    std::vector<idx> joint_p;                 // per valid frame
    std::vector<idx> indices_p;
    std::vector<idx> lengths;                 // post-conv
};

BatchCodes batch_codes(Model& model, const UtteranceBatch& batch, Level level) {
    const ModelConfig& cfg = model.config();
    Model::Encoded enc = model.feature_encode(batch.features, batch.lengths);
    LayerValues tea = model.teacher_forward(enc.latents->val, enc.lengths);
    const idx B = batch.size();
    const idx T = enc.latents->val.dim(1);
    const idx D = cfg.model_dim;

    auto gather_layers = [&](const std::vector<idx>& which) {
        std::vector<Tensor> out;
        for (idx l : which) out.push_back(tea.layers[static_cast<std::size_t>(l - 1)]);
        return out;
    };
    auto quantize = [&](const Var& e, const Var& codebook, QuantizerType type,
                        const nn::Linear* proj) {
        if (type == QuantizerType::KMeans)
            return kmeans_quantize(e, codebook, cfg.groups, 0.25);
        Tensor no_noise({e->val.dim(0), cfg.groups * (codebook->val.dim(0) / cfg.groups)});
        return gumbel_quantize(e, codebook, cfg.groups, cfg.gumbel_temperature, no_noise,
                               proj);
    };

    BatchCodes out;
    out.lengths = enc.lengths;
    if (level == Level::Language) {
        require(cfg.lqt_enabled, "analysis: language quantizer is disabled in this config");
        Tensor y_l = preprocess_utterance_level(gather_layers(cfg.y_l_layers), enc.lengths,
                                                cfg.lqt_norm);
        Var y = ag::constant(y_l.reshaped({B, 1, D}));
        y = model.teacher_extra.forward(y, std::vector<idx>(static_cast<std::size_t>(B), 1));
        Var e = ag::reshape(model.adapter_l.forward(y), {B, D});
        QuantizationResult q = quantize(e, model.codebook_l, cfg.lqt_type,
                                        model.gumbel_proj_l ? &*model.gumbel_proj_l : nullptr);
        out.joint_l = q.joint;
        out.indices_l = q.indices;
    } else {
        require(cfg.pqt_enabled, "analysis: phoneme quantizer is disabled in this config");
        Tensor y_p = preprocess_frame_level(gather_layers(cfg.y_p_layers), enc.lengths,
                                            cfg.pqt_norm);
        Var y = ag::constant(y_p);
        y = model.teacher_extra.forward(y, enc.lengths);
        Var e_full = model.adapter_p.forward(y);
        std::vector<idx> valid_rows;
        for (idx b = 0; b < B; ++b)
            for (idx t = 0; t < enc.lengths[static_cast<std::size_t>(b)]; ++t)
                valid_rows.push_back(b * T + t);
        Var e = ag::gather_rows(ag::reshape(e_full, {B * T, D}), valid_rows);
        QuantizationResult q = quantize(e, model.codebook_p, cfg.pqt_type,
                                        model.gumbel_proj_p ? &*model.gumbel_proj_p : nullptr);
        out.joint_p = q.joint;
        out.indices_p = q.indices;
    }
    return out;
}

idx ipow(idx base, idx e) {
    idx r = 1;
    for (idx i = 0; i < e; ++i) r *= base;
    return r;
}

}  // namespace

CooccurrenceMatrix collect_counts(Model& model, const std::vector<Utterance>& corpus,
                                  Level level, idx max_tokens) {
    const ModelConfig& cfg = model.config();
    CooccurrenceMatrix m;
    m.code_axis = level;
    m.groups = cfg.groups;
    m.codewords = level == Level::Language ? cfg.num_codewords_l : cfg.num_codewords_p;
    m.num_codes = ipow(m.codewords, m.groups);
    m.num_labels = level == Level::Language ? cfg.num_codewords_l : cfg.num_codewords_p;
    m.counts.assign(static_cast<std::size_t>(m.num_codes * m.num_labels), 0);
    m.group_usage.assign(static_cast<std::size_t>(m.groups * m.codewords), 0);

    std::vector<const Utterance*> ptrs;
    for (const Utterance& u : corpus) ptrs.push_back(&u);
    std::size_t pos = 0;
    while (pos < ptrs.size()) {
        idx consumed = 0;
        std::vector<const Utterance*> rest(ptrs.begin() + static_cast<std::ptrdiff_t>(pos),
                                           ptrs.end());
        UtteranceBatch batch = make_batch(rest, max_tokens, &consumed);
        BatchCodes codes = batch_codes(model, batch, level);
        if (level == Level::Language) {
            for (idx b = 0; b < batch.size(); ++b) {
                const idx code = codes.joint_l[static_cast<std::size_t>(b)];
                m.add(code, batch.language_ids[static_cast<std::size_t>(b)]);
                for (idx g = 0; g < m.groups; ++g)
                    ++m.group_usage[static_cast<std::size_t>(
                        g * m.codewords +
                        codes.indices_l[static_cast<std::size_t>(b * m.groups + g)])];
            }
        } else {
            idx row = 0;
            for (idx b = 0; b < batch.size(); ++b) {
                const Utterance& u = *rest[static_cast<std::size_t>(b)];
                std::vector<idx> labels = downsample_labels(u.phoneme_frames, cfg);
                require(static_cast<idx>(labels.size()) ==
                            codes.lengths[static_cast<std::size_t>(b)],
                        "analysis: downsampled label length mismatch");
                for (idx t = 0; t < codes.lengths[static_cast<std::size_t>(b)]; ++t, ++row) {
                    const idx code = codes.joint_p[static_cast<std::size_t>(row)];
                    m.add(code, labels[static_cast<std::size_t>(t)]);
                    for (idx g = 0; g < m.groups; ++g)
                        ++m.group_usage[static_cast<std::size_t>(
                            g * m.codewords +
                            codes.indices_p[static_cast<std::size_t>(row * m.groups + g)])];
                }
            }
        }
        pos += static_cast<std::size_t>(consumed);
    }
    return m;
}

double purity(const CooccurrenceMatrix& m) {
    require(m.total > 0, "purity: empty matrix");
    idx s = 0;
    for (idx c = 0; c < m.num_codes; ++c) {
        idx best = 0;
        for (idx l = 0; l < m.num_labels; ++l) best = std::max(best, m.at(c, l));
        s += best;
    }
    return static_cast<double>(s) / static_cast<double>(m.total);
}

double nmi(const CooccurrenceMatrix& m) {
    require(m.total > 0, "nmi: empty matrix");
    const double total = static_cast<double>(m.total);
    std::vector<double> pc(static_cast<std::size_t>(m.num_codes), 0.0);
    std::vector<double> pl(static_cast<std::size_t>(m.num_labels), 0.0);
    for (idx c = 0; c < m.num_codes; ++c)
        for (idx l = 0; l < m.num_labels; ++l) {
            const double p = static_cast<double>(m.at(c, l)) / total;
            pc[static_cast<std::size_t>(c)] += p;
            pl[static_cast<std::size_t>(l)] += p;
        }
    double h_label = 0.0;
    for (double p : pl)
        if (p > 0.0) h_label -= p * std::log(p);
    if (h_label == 0.0) return 0.0;
    double mi = 0.0;
    for (idx c = 0; c < m.num_codes; ++c) {
        if (pc[static_cast<std::size_t>(c)] == 0.0) continue;
        for (idx l = 0; l < m.num_labels; ++l) {
            const idx n = m.at(c, l);
            if (n == 0) continue;
            const double p = static_cast<double>(n) / total;
            mi += p * std::log(p / (pc[static_cast<std::size_t>(c)] * pl[static_cast<std::size_t>(l)]));
        }
    }
    return mi / h_label;
}

MetricReport metric_report(const CooccurrenceMatrix& m) {
    MetricReport r;
    r.purity = purity(m);
    r.nmi = nmi(m);
    for (idx c = 0; c < m.num_codes; ++c) {
        idx rowsum = 0;
        for (idx l = 0; l < m.num_labels; ++l) rowsum += m.at(c, l);
        if (rowsum > 0) ++r.acn;
    }
    r.agn.assign(static_cast<std::size_t>(m.groups), 0);
    for (idx g = 0; g < m.groups; ++g)
        for (idx j = 0; j < m.codewords; ++j)
            if (m.group_usage[static_cast<std::size_t>(g * m.codewords + j)] > 0)
                ++r.agn[static_cast<std::size_t>(g)];
    // per-label majority agreement: of this label's frames, the fraction
    // assigned to codes whose majority label is this label
    r.per_label_purity.assign(static_cast<std::size_t>(m.num_labels), 0.0);
    std::vector<idx> label_total(static_cast<std::size_t>(m.num_labels), 0);
    std::vector<idx> label_hit(static_cast<std::size_t>(m.num_labels), 0);
    for (idx c = 0; c < m.num_codes; ++c) {
        idx best_l = 0;
        for (idx l = 1; l < m.num_labels; ++l)
            if (m.at(c, l) > m.at(c, best_l)) best_l = l;
        for (idx l = 0; l < m.num_labels; ++l) {
            label_total[static_cast<std::size_t>(l)] += m.at(c, l);
            if (l == best_l) label_hit[static_cast<std::size_t>(l)] += m.at(c, l);
        }
    }
    for (idx l = 0; l < m.num_labels; ++l)
        if (label_total[static_cast<std::size_t>(l)] > 0)
            r.per_label_purity[static_cast<std::size_t>(l)] =
                static_cast<double>(label_hit[static_cast<std::size_t>(l)]) /
                static_cast<double>(label_total[static_cast<std::size_t>(l)]);
    return r;
}

void write_conditional_report(const CooccurrenceMatrix& m, const std::string& path) {
    MetricReport rep = metric_report(m);

    // labels sorted by frequency descending (ties by label id)
    std::vector<idx> label_freq(static_cast<std::size_t>(m.num_labels), 0);
    for (idx c = 0; c < m.num_codes; ++c)
        for (idx l = 0; l < m.num_labels; ++l)
            label_freq[static_cast<std::size_t>(l)] += m.at(c, l);
    std::vector<idx> label_order(static_cast<std::size_t>(m.num_labels));
    for (idx l = 0; l < m.num_labels; ++l) label_order[static_cast<std::size_t>(l)] = l;
    std::sort(label_order.begin(), label_order.end(), [&](idx a, idx b) {
        if (label_freq[static_cast<std::size_t>(a)] != label_freq[static_cast<std::size_t>(b)])
            return label_freq[static_cast<std::size_t>(a)] > label_freq[static_cast<std::size_t>(b)];
        return a < b;
    });
    std::vector<idx> label_rank(static_cast<std::size_t>(m.num_labels));
    for (idx r = 0; r < m.num_labels; ++r)
        label_rank[static_cast<std::size_t>(label_order[static_cast<std::size_t>(r)])] = r;

    // active codes sorted by the rank of their most-correlated label
    struct Col {
        idx code;
        idx argmax_rank;
        idx rowsum;
    };
    std::vector<Col> cols;
    for (idx c = 0; c < m.num_codes; ++c) {
        idx rowsum = 0, best_l = 0;
        for (idx l = 0; l < m.num_labels; ++l) {
            rowsum += m.at(c, l);
            if (m.at(c, l) > m.at(c, best_l)) best_l = l;
        }
        if (rowsum == 0) continue;  // inactive codes omitted
        cols.push_back({c, label_rank[static_cast<std::size_t>(best_l)], rowsum});
    }
    std::sort(cols.begin(), cols.end(), [](const Col& a, const Col& b) {
        if (a.argmax_rank != b.argmax_rank) return a.argmax_rank < b.argmax_rank;
        return a.code < b.code;
    });

    std::ofstream out(path);
    require(static_cast<bool>(out), "cannot write " + path);
    out << "# level=" << (m.code_axis == Level::Language ? "language" : "phoneme") << "\n";
    out << "# ACN=" << rep.acn << "\n# AGN=";
    for (std::size_t g = 0; g < rep.agn.size(); ++g) out << (g ? "," : "") << rep.agn[g];
    char buf[64];
    std::snprintf(buf, sizeof(buf), "\n# purity=%.6f\n# nmi=%.6f\n", rep.purity, rep.nmi);
    out << buf;
    out << "label";
    for (const Col& c : cols) out << '\t' << c.code;
    out << '\n';
    for (idx r = 0; r < m.num_labels; ++r) {
        const idx l = label_order[static_cast<std::size_t>(r)];
        out << l;
        for (const Col& c : cols) {
            const double p = static_cast<double>(m.at(c.code, l)) / static_cast<double>(c.rowsum);
            std::snprintf(buf, sizeof(buf), "\t%.6f", p);
            out << buf;
        }
        out << '\n';
    }
}

std::vector<MetricReport> per_language_metrics(Model& model,
                                               const std::vector<Utterance>& corpus,
                                               idx num_languages, idx max_tokens) {
    std::vector<MetricReport> out;
    for (idx lang = 0; lang < num_languages; ++lang) {
        std::vector<Utterance> subset;
        for (const Utterance& u : corpus)
            if (u.language_id == lang) subset.push_back(u);
        require(!subset.empty(), "per_language_metrics: language " + std::to_string(lang) +
                                     " has no utterances");
        out.push_back(metric_report(collect_counts(model, subset, Level::Phoneme, max_tokens)));
    }
    return out;
}

std::vector<std::vector<idx>> greedy_ctc_decode(const Tensor& logits,
                                                const std::vector<idx>& lengths) {
    require(logits.ndim() == 3, "greedy_ctc_decode: expects [B,T,V]");
    const idx B = logits.dim(0), V = logits.dim(2);
    std::vector<std::vector<idx>> out(static_cast<std::size_t>(B));
    for (idx b = 0; b < B; ++b) {
        idx prev = -1;
        for (idx t = 0; t < lengths[static_cast<std::size_t>(b)]; ++t) {
            idx best = 0;
            for (idx v = 1; v < V; ++v)
                if (logits.at(b, t, v) > logits.at(b, t, best)) best = v;
            if (best != prev && best != 0) out[static_cast<std::size_t>(b)].push_back(best);
            prev = best;
        }
    }
    return out;
}

idx edit_distance(const std::vector<idx>& a, const std::vector<idx>& b) {
    const idx n = static_cast<idx>(a.size()), m = static_cast<idx>(b.size());
    std::vector<idx> prev(static_cast<std::size_t>(m + 1)), cur(static_cast<std::size_t>(m + 1));
    for (idx j = 0; j <= m; ++j) prev[static_cast<std::size_t>(j)] = j;
    for (idx i = 1; i <= n; ++i) {
        cur[0] = i;
        for (idx j = 1; j <= m; ++j) {
            const idx sub = prev[static_cast<std::size_t>(j - 1)] +
                            (a[static_cast<std::size_t>(i - 1)] == b[static_cast<std::size_t>(j - 1)] ? 0 : 1);
            cur[static_cast<std::size_t>(j)] =
                std::min({sub, prev[static_cast<std::size_t>(j)] + 1,
                          cur[static_cast<std::size_t>(j - 1)] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[static_cast<std::size_t>(m)];
}

double token_error_rate(const std::vector<idx>& hyp, const std::vector<idx>& ref) {
    require(!ref.empty(), "token_error_rate: empty reference");
    return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

}  // namespace dqd2v
