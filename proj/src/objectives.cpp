#include "dqd2v/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace dqd2v {

Var predictor_l(const PredictorHead& head, const Var& x_l, const std::vector<idx>& lengths) {
    return ag::masked_mean_time(head.forward(x_l, lengths), lengths);  // [B,D]
}

Var predictor_p(const PredictorHead& head, const Var& x_p, const std::vector<idx>& lengths) {
    return head.forward(x_p, lengths);  // [B,T,D]
}

NegativeSet sample_negatives_phoneme(const std::vector<std::vector<idx>>& anchors_per_utt,
                                     idx n_neg, Rng& rng) {
    require(n_neg >= 1, "sample_negatives_phoneme: n_neg must be >= 1");
    NegativeSet out;
    for (const auto& rows : anchors_per_utt) {
        const idx m = static_cast<idx>(rows.size());
        if (m < 2) continue;  // no negatives available within the utterance
        for (idx a = 0; a < m; ++a) {
            out.anchor_rows.push_back(rows[static_cast<std::size_t>(a)]);
            std::vector<idx> negs;
            const idx avail = m - 1;
            if (avail >= n_neg) {
                // distinct others: sample positions in [0, avail) without
                // replacement, then skip over the anchor itself
                std::vector<idx> picks = rng.sample_distinct(avail, n_neg);
                for (idx p : picks) {
                    const idx other = p < a ? p : p + 1;
                    negs.push_back(rows[static_cast<std::size_t>(other)]);
                }
            } else {
                for (idx k = 0; k < n_neg; ++k) {
                    const idx p = rng.uniform_int(avail);
                    const idx other = p < a ? p : p + 1;
                    negs.push_back(rows[static_cast<std::size_t>(other)]);
                }
            }
            out.negatives.push_back(std::move(negs));
        }
    }
    return out;
}

std::vector<std::vector<idx>> sample_negatives_language(idx batch, idx n_neg, Rng& rng) {
    std::vector<std::vector<idx>> out;
    if (batch < 2) return out;
    const idx avail = batch - 1;
    const idx k = n_neg < 0 ? avail : std::min(n_neg, avail);
    out.resize(static_cast<std::size_t>(batch));
    for (idx b = 0; b < batch; ++b) {
        if (k == avail) {
            for (idx o = 0; o < batch; ++o)
                if (o != b) out[static_cast<std::size_t>(b)].push_back(o);
        } else {
            std::vector<idx> picks = rng.sample_distinct(avail, k);
            for (idx p : picks)
                out[static_cast<std::size_t>(b)].push_back(p < b ? p : p + 1);
        }
    }
    return out;
}

Var contrastive_loss(const Var& anchors, const Var& positives, const Var& bank,
                     const std::vector<std::vector<idx>>& negatives, double kappa) {
    require(kappa > 0.0, "contrastive_loss: kappa must be positive");
    const idx M = anchors->val.dim(0);
    require(M >= 1, "contrastive_loss: no anchors");
    require(positives->val.dim(0) == M, "contrastive_loss: positives mismatch");
    require(static_cast<idx>(negatives.size()) == M, "contrastive_loss: negatives mismatch");
    const idx K = static_cast<idx>(negatives[0].size());
    require(K >= 1, "contrastive_loss: need at least one negative");
    std::vector<idx> flat;
    flat.reserve(static_cast<std::size_t>(M * K));
    for (const auto& row : negatives) {
        require(static_cast<idx>(row.size()) == K, "contrastive_loss: ragged negatives");
        for (idx r : row) flat.push_back(r);
    }

    Var a_n = ag::l2norm_rows(anchors);
    Var p_n = ag::l2norm_rows(positives);
    Var neg = ag::l2norm_rows(ag::gather_rows(bank, flat));  // [M*K, D]

    Var cos_pos = ag::sum_rows(ag::mul(a_n, p_n));  // [M]
    const idx D = anchors->val.dim(1);
    Var a_rep = ag::reshape(ag::expand_mid(a_n, K), {M * K, D});
    Var cos_neg = ag::reshape(ag::sum_rows(ag::mul(a_rep, neg)), {M, K});

    Var logits = ag::concat_lastdim({ag::reshape(cos_pos, {M, 1}), cos_neg});  // [M, 1+K]
    logits = ag::scale(logits, 1.0 / kappa);
    Var lse = ag::logsumexp_rows(logits);                       // [M]
    Var pos_col = ag::reshape(ag::slice_lastdim(logits, 0, 1), {M});
    return ag::mean_all(ag::sub(lse, pos_col));
}

Tensor draw_mix_mask_utterance(idx batch, Rng& rng) {
    Tensor m({batch});
    if (batch == 1) {
        m[0] = rng.bernoulli(0.5) ? 1.0 : 0.0;
        return m;
    }
    std::vector<idx> perm = rng.permutation(batch);
    for (idx i = 0; i < batch / 2; ++i) m[perm[static_cast<std::size_t>(i)]] = 1.0;
    return m;
}

Tensor draw_mix_mask_frames(const std::vector<idx>& lengths, idx t_max, Rng& rng) {
    const idx B = static_cast<idx>(lengths.size());
    Tensor m({B, t_max});
    for (idx b = 0; b < B; ++b) {
        const idx len = lengths[static_cast<std::size_t>(b)];
        if (len == 1) {
            m.at(b, 0) = rng.bernoulli(0.5) ? 1.0 : 0.0;
        } else {
            std::vector<idx> perm = rng.permutation(len);
            for (idx i = 0; i < len / 2; ++i) m.at(b, perm[static_cast<std::size_t>(i)]) = 1.0;
        }
        for (idx t = len; t < t_max; ++t) m.at(b, t) = 1.0;  // padded frames stay on x
    }
    return m;
}

namespace {

Tensor invert01(const Tensor& m) {
    Tensor inv = m;
    for (idx i = 0; i < inv.numel(); ++i) inv[i] = 1.0 - inv[i];
    return inv;
}

}  // namespace

Var mix_rows(const Var& x, const Var& q_st, const Tensor& mask01) {
    return ag::add(ag::scale_rows_const(x, mask01), ag::scale_rows_const(q_st, invert01(mask01)));
}

Var mix_frames(const Var& x, const Var& q_st, const Tensor& mask01) {
    return ag::add(ag::scale_frames(x, mask01), ag::scale_frames(q_st, invert01(mask01)));
}

Var ce_loss(const Var& u_l, const nn::Linear& lang_head, const std::vector<idx>& language_ids) {
    require(!language_ids.empty(),
            "ce_loss: language labels are required in the deep-decoupling regime");
    return ag::cross_entropy(lang_head.forward(u_l), language_ids);
}

Var ctc_supervised_loss(const Var& u_p, const nn::Linear& ctc_head,
                        const std::vector<std::vector<idx>>& phoneme_seqs,
                        const std::vector<idx>& lengths,
                        const std::vector<bool>& high_resource_mask) {
    const idx B = u_p->val.dim(0);
    require(static_cast<idx>(phoneme_seqs.size()) == B,
            "ctc_loss: phoneme labels are required in the deep-decoupling regime");
    Var logits = ctc_head.forward(u_p);  // [B,T,V]
    std::vector<std::vector<idx>> labels(static_cast<std::size_t>(B));
    std::vector<double> weights(static_cast<std::size_t>(B), 0.0);
    idx included = 0;
    for (idx b = 0; b < B; ++b) {
        if (!high_resource_mask[static_cast<std::size_t>(b)]) continue;
        std::vector<idx> lab;
        for (idx p : phoneme_seqs[static_cast<std::size_t>(b)]) lab.push_back(p + 1);
        if (!ag::ctc_feasible(lengths[static_cast<std::size_t>(b)], lab)) {
            warn("ctc: label longer than feasible length, skipping utterance");
            continue;
        }
        labels[static_cast<std::size_t>(b)] = std::move(lab);
        weights[static_cast<std::size_t>(b)] = 1.0;
        ++included;
    }
    if (included == 0) return ag::constant(Tensor::scalar(0.0));
    for (double& w : weights) w /= static_cast<double>(included);
    return ag::ctc_loss(logits, labels, lengths, weights);
}

Var quantization_objective(const Var& ctr, const Var& km) { return ag::add(ctr, km); }

Var shallow_total(const Var& sl1, const Var& qt_l, const Var& qt_p, bool lqt_on,
                  bool pqt_on, const LossWeights& w) {
    const double g1 = lqt_on ? w.gamma1 : 0.0;
    const double g2 = pqt_on ? w.gamma2 : 0.0;
    Var total = ag::scale(sl1, 1.0 - g1 - g2);
    if (lqt_on) total = ag::add(total, ag::scale(qt_l, g1));
    if (pqt_on) total = ag::add(total, ag::scale(qt_p, g2));
    return total;
}

Var deep_total(const Var& l_sc, const Var& ce, const Var& ctc, double gamma3) {
    return ag::add(l_sc, ag::scale(ag::add(ce, ctc), gamma3));
}

double LossReport::composed(const LossWeights& w, bool lqt_on, bool pqt_on) const {
    const double g1 = lqt_on ? w.gamma1 : 0.0;
    const double g2 = pqt_on ? w.gamma2 : 0.0;
    double t = (1.0 - g1 - g2) * sl1;
    if (lqt_on) t += g1 * (ctr_l + km_l);
    if (pqt_on) t += g2 * (ctr_p + km_p);
    if (regime == Regime::Deep) t += w.gamma3 * (ce + ctc);
    return t;
}

std::string LossReport::tsv_header() const {
    return "step\tregime\tsl1\tkm_l\tkm_p\tctr_l\tctr_p\tce\tctc\ttotal\tlr\ttau";
}

std::string LossReport::tsv_line(idx step, double lr, double tau) const {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "%lld\t%s\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g",
                  static_cast<long long>(step), regime == Regime::Shallow ? "shallow" : "deep",
                  sl1, km_l, km_p, ctr_l, ctr_p, ce, ctc, total, lr, tau);
    return buf;
}

StepRand draw_step_rand(const ModelConfig& cfg, const TrainConfig& tc,
                        const UtteranceBatch& batch, Rng& rng) {
    StepRand sr;
    std::vector<idx> lengths;
    for (idx len : batch.lengths) lengths.push_back(cfg.conv_out_len(len));
    idx t_max = 0;
    for (idx len : lengths) t_max = std::max(t_max, len);
    const idx B = static_cast<idx>(lengths.size());

    sr.mask = span_mask(lengths, cfg.mask_prob, cfg.mask_span, rng);

    if (cfg.lqt_enabled)
        sr.neg_l = sample_negatives_language(B, tc.n_neg_language, rng);
    if (cfg.pqt_enabled) {
        // anchor rows live in the flat valid-position index space used by the
        // quantizer: rows are ordered (b asc, t asc) over valid frames
        std::vector<std::vector<idx>> anchors(static_cast<std::size_t>(B));
        idx row = 0;
        for (idx b = 0; b < B; ++b) {
            for (idx t = 0; t < lengths[static_cast<std::size_t>(b)]; ++t, ++row) {
                if (sr.mask.mask01.at(b, t) != 0.0)
                    anchors[static_cast<std::size_t>(b)].push_back(row);
            }
        }
        sr.neg_p = sample_negatives_phoneme(anchors, tc.n_neg_phoneme, rng);
    }

    if (tc.regime == Regime::Deep) {
        sr.mix_mask_l = draw_mix_mask_utterance(B, rng);
        sr.mix_mask_p = draw_mix_mask_frames(lengths, t_max, rng);
    }

    if (cfg.lqt_enabled && cfg.lqt_type == QuantizerType::Gumbel)
        sr.gumbel_l = draw_gumbel_noise(B, cfg.groups * cfg.num_codewords_l, rng);
    if (cfg.pqt_enabled && cfg.pqt_type == QuantizerType::Gumbel) {
        idx valid = 0;
        for (idx len : lengths) valid += len;
        sr.gumbel_p = draw_gumbel_noise(valid, cfg.groups * cfg.num_codewords_p, rng);
    }
    return sr;
}

LossReport LossBundle::report(const TrainConfig& tc, const ModelConfig& cfg) const {
    LossReport r;
    r.regime = tc.regime;
    r.sl1 = sl1->val[0];
    r.km_l = km_l->val[0];
    r.km_p = km_p->val[0];
    r.ctr_l = ctr_l->val[0];
    r.ctr_p = ctr_p->val[0];
    r.ce = ce->val[0];
    r.ctc = ctc->val[0];
    r.total = total->val[0];
    (void)cfg;
    return r;
}

LossBundle build_losses(Model& model, const UtteranceBatch& batch, const TrainConfig& tc,
                        const StepRand& sr) {
    const ModelConfig& cfg = model.config();
    if (tc.regime == Regime::Deep)
        require(batch.has_labels(),
                "deep regime requires language labels on every utterance");

    auto zero = [] { return ag::constant(Tensor::scalar(0.0)); };
    LossBundle out;
    out.sl1 = zero();
    out.km_l = zero();
    out.km_p = zero();
    out.ctr_l = zero();
    out.ctr_p = zero();
    out.ce = zero();
    out.ctc = zero();

    // 1. shared feature encoder
    Model::Encoded enc = model.feature_encode(batch.features, batch.lengths);
    const std::vector<idx>& lengths = enc.lengths;
    const idx B = enc.latents->val.dim(0);
    const idx T = enc.latents->val.dim(1);
    const idx D = cfg.model_dim;

    // 2. student (masked) and teacher (unmasked, gradient-stopped)
    LayerOutputs stu = model.student_forward(enc.latents, &sr.mask, lengths);
    LayerValues tea = model.teacher_forward(enc.latents->val, lengths);

    // 3. masked-prediction loss on the regression target
    Tensor y_t = model.build_regression_target(tea, cfg.top_k);
    Var x_t = model.predictor_t(stu.layers.back());
    out.sl1 = sl1_loss(x_t, y_t, sr.mask, cfg.sl1_beta);

    // flat valid-position rows (b asc, t asc), shared by q_p and the anchors
    std::vector<idx> valid_rows;
    for (idx b = 0; b < B; ++b)
        for (idx t = 0; t < lengths[static_cast<std::size_t>(b)]; ++t)
            valid_rows.push_back(b * T + t);

    auto gather_layers = [&](const std::vector<idx>& which) {
        std::vector<Tensor> out_layers;
        for (idx l : which)
            out_layers.push_back(tea.layers[static_cast<std::size_t>(l - 1)]);
        return out_layers;
    };

    // 4. language quantizer branch
    QuantizationResult ql;
    if (cfg.lqt_enabled) {
        Tensor y_l = preprocess_utterance_level(gather_layers(cfg.y_l_layers), lengths,
                                                cfg.lqt_norm);  // [B,D]
        Var y = ag::frozen_constant(y_l.reshaped({B, 1, D}));
        y = model.teacher_extra.forward(y, std::vector<idx>(static_cast<std::size_t>(B), 1));
        Var e_l = ag::reshape(model.adapter_l.forward(y), {B, D});
        if (cfg.lqt_type == QuantizerType::KMeans) {
            ql = kmeans_quantize(e_l, model.codebook_l, cfg.groups, tc.weights.gamma_km);
        } else {
            ql = gumbel_quantize(e_l, model.codebook_l, cfg.groups, cfg.gumbel_temperature,
                                 sr.gumbel_l,
                                 model.gumbel_proj_l ? &*model.gumbel_proj_l : nullptr);
        }
        out.km_l = ql.km_loss;
        out.joint_l = ql.joint;
        out.indices_l = ql.indices;

        if (B >= 2 && !sr.neg_l.empty()) {
            Var x_l = predictor_l(model.pred_l,
                                  stu.layers[static_cast<std::size_t>(cfg.x_l_layer() - 1)],
                                  lengths);  // [B,D]
            out.ctr_l = contrastive_loss(x_l, ql.q_st, ql.q_st, sr.neg_l, tc.weights.kappa);
        }
    }

    // 5. phoneme quantizer branch
    QuantizationResult qp;
    Var q_p_full;  // [B,T,D] for the mixing path
    if (cfg.pqt_enabled) {
        Tensor y_p = preprocess_frame_level(gather_layers(cfg.y_p_layers), lengths,
                                            cfg.pqt_norm);  // [B,T,D]
        Var y = ag::frozen_constant(y_p);
        y = model.teacher_extra.forward(y, lengths);
        Var e_full = model.adapter_p.forward(y);  // [B,T,D]
        Var e_p = ag::gather_rows(ag::reshape(e_full, {B * T, D}), valid_rows);  // [P,D]
        if (cfg.pqt_type == QuantizerType::KMeans) {
            qp = kmeans_quantize(e_p, model.codebook_p, cfg.groups, tc.weights.gamma_km);
        } else {
            qp = gumbel_quantize(e_p, model.codebook_p, cfg.groups, cfg.gumbel_temperature,
                                 sr.gumbel_p,
                                 model.gumbel_proj_p ? &*model.gumbel_proj_p : nullptr);
        }
        out.km_p = qp.km_loss;
        out.joint_p = qp.joint;
        out.indices_p = qp.indices;

        if (!sr.neg_p.anchor_rows.empty()) {
            Var x_p = predictor_p(model.pred_p,
                                  stu.layers[static_cast<std::size_t>(cfg.x_p_layer() - 1)],
                                  lengths);  // [B,T,D]
            Var x_rows = ag::gather_rows(ag::reshape(x_p, {B * T, D}), valid_rows);
            Var anchors = ag::gather_rows(x_rows, sr.neg_p.anchor_rows);
            Var pos = ag::gather_rows(qp.q_st, sr.neg_p.anchor_rows);
            out.ctr_p = contrastive_loss(anchors, pos, qp.q_st, sr.neg_p.negatives,
                                         tc.weights.kappa);
        }
        if (tc.regime == Regime::Deep)
            q_p_full = ag::reshape(ag::scatter_rows(qp.q_st, valid_rows, B * T), {B, T, D});
    }

    Var qt_l = quantization_objective(out.ctr_l, out.km_l);
    Var qt_p = quantization_objective(out.ctr_p, out.km_p);
    Var l_sc = shallow_total(out.sl1, qt_l, qt_p, cfg.lqt_enabled, cfg.pqt_enabled,
                             tc.weights);

    if (tc.regime == Regime::Shallow) {
        out.total = l_sc;
        return out;
    }

    // 6. deep decoupling: mix student layers with quantized vectors, then CE/CTC
    if (cfg.lqt_enabled) {
        Var x_l_raw = stu.layers[static_cast<std::size_t>(cfg.x_l_layer() - 1)];
        Var pooled = ag::masked_mean_time(x_l_raw, lengths);  // [B,D]
        Var u_l = mix_rows(pooled, ql.q_st, sr.mix_mask_l);
        out.ce = ce_loss(u_l, model.lang_head, batch.language_ids);
    }
    if (cfg.pqt_enabled) {
        Var x_p_raw = stu.layers[static_cast<std::size_t>(cfg.x_p_layer() - 1)];
        Var u_p = mix_frames(x_p_raw, q_p_full, sr.mix_mask_p);
        out.ctc = ctc_supervised_loss(u_p, model.ctc_head, batch.phoneme_seqs, lengths,
                                      batch.high_resource_mask);
    }
    out.total = deep_total(l_sc, out.ce, out.ctc, tc.weights.gamma3);
    return out;
}

}  // namespace dqd2v
