#include "dqd2v/quantizer.hpp"

#include <cmath>

#include "dqd2v/kernels.hpp"

namespace dqd2v {

namespace {

Tensor mean_of_layers(const std::vector<Tensor>& layers) {
    require(!layers.empty(), "preprocess: empty layer list");
    Tensor sum = layers[0];
    for (std::size_t i = 1; i < layers.size(); ++i) {
        require(sum.same_shape(layers[i]), "preprocess: layer shape mismatch");
        const double* p = layers[i].data();
        for (idx j = 0; j < sum.numel(); ++j) sum[j] += p[j];
    }
    const double inv = 1.0 / static_cast<double>(layers.size());
    for (idx j = 0; j < sum.numel(); ++j) sum[j] *= inv;
    return sum;
}

void pool_valid(const Tensor& x, const std::vector<idx>& lengths, Tensor& out) {
    const idx B = x.dim(0), T = x.dim(1), C = x.dim(2);
    (void)T;
    out = Tensor({B, C});
    for (idx b = 0; b < B; ++b) {
        const idx len = lengths[static_cast<std::size_t>(b)];
        for (idx c = 0; c < C; ++c) {
            double s = 0.0;
            for (idx t = 0; t < len; ++t) s += x.at(b, t, c);
            out.at(b, c) = s / static_cast<double>(len);
        }
    }
}

void l2norm_rows_value(Tensor& x) {
    const idx C = x.dim(x.ndim() - 1);
    const idx R = x.numel() / C;
    for (idx r = 0; r < R; ++r) {
        double s = 0.0;
        for (idx c = 0; c < C; ++c) s += x[r * C + c] * x[r * C + c];
        const double inv = 1.0 / (std::sqrt(s) + 1e-12);
        for (idx c = 0; c < C; ++c) x[r * C + c] *= inv;
    }
}

}  // namespace

Tensor preprocess_utterance_level(const std::vector<Tensor>& y_layers,
                                  const std::vector<idx>& lengths, LevelNorm norm) {
    Tensor mean = mean_of_layers(y_layers);
    Tensor pooled;
    if (norm == LevelNorm::L2) {
        pool_valid(mean, lengths, pooled);
        l2norm_rows_value(pooled);
    } else {
        // Ablation S4: instance norm in the utterance-level quantizer.
        Tensor normed;
        ag::instance_norm_masked_value(mean, lengths, normed);
        pool_valid(normed, lengths, pooled);
    }
    return pooled;  // [B, D]
}

Tensor preprocess_frame_level(const std::vector<Tensor>& y_layers,
                              const std::vector<idx>& lengths, LevelNorm norm) {
    if (norm == LevelNorm::Instance) {
        Tensor sum;
        Tensor normed;
        for (const Tensor& y : y_layers) {
            ag::instance_norm_masked_value(y, lengths, normed);
            if (sum.empty()) {
                sum = normed;
            } else {
                for (idx j = 0; j < sum.numel(); ++j) sum[j] += normed[j];
            }
        }
        const double inv = 1.0 / static_cast<double>(y_layers.size());
        for (idx j = 0; j < sum.numel(); ++j) sum[j] *= inv;
        Tensor out;
        ag::instance_norm_masked_value(sum, lengths, out);
        return out;
    }
    // Ablation S3: per-frame L2 norm in the phoneme quantizer.
    Tensor mean = mean_of_layers(y_layers);
    const idx B = mean.dim(0), T = mean.dim(1), C = mean.dim(2);
    l2norm_rows_value(mean);
    for (idx b = 0; b < B; ++b) {
        const idx len = lengths[static_cast<std::size_t>(b)];
        for (idx t = len; t < T; ++t)
            for (idx c = 0; c < C; ++c) mean.at(b, t, c) = 0.0;
    }
    return mean;
}

Var kmeans_codebook_term(const Var& e, const Var& q) {
    Var d = ag::sub(ag::detach(e), q);
    return ag::mean_all(ag::mul(d, d));
}

Var kmeans_commit_term(const Var& e, const Var& q) {
    Var d = ag::sub(e, ag::detach(q));
    return ag::mean_all(ag::mul(d, d));
}

Var kmeans_loss(const Var& e, const Var& q, double gamma) {
    require(gamma > 0.0 && gamma != 1.0, "kmeans_loss: gamma must be positive and != 1");
    return ag::add(kmeans_codebook_term(e, q), ag::scale(kmeans_commit_term(e, q), gamma));
}

idx joint_index(const std::vector<idx>& group_indices, idx n) {
    idx j = 0;
    for (idx g : group_indices) j = j * n + g;
    return j;
}

QuantizationResult kmeans_quantize(const Var& e, const Var& codebook, idx groups,
                                   double gamma_km) {
    const Tensor& E = e->val;
    require(E.ndim() == 2, "kmeans_quantize: e must be [P, D]");
    const idx P = E.dim(0), D = E.dim(1);
    require(D % groups == 0, "kmeans_quantize: groups must divide D");
    const idx sub = D / groups;
    require(codebook->val.ndim() == 2 && codebook->val.dim(1) == sub &&
                codebook->val.dim(0) % groups == 0,
            "kmeans_quantize: codebook must be [G*N, D/G]");
    const idx N = codebook->val.dim(0) / groups;
    for (idx i = 0; i < E.numel(); ++i)
        if (!std::isfinite(E[i]))
            throw DivergenceError("kmeans_quantize: non-finite input (upstream collapse)");

    QuantizationResult res;
    res.groups = groups;
    res.codewords = N;
    res.indices.assign(static_cast<std::size_t>(P * groups), 0);

    std::vector<Var> q_parts;
    for (idx g = 0; g < groups; ++g) {
        // contiguous columns of this group
        Tensor eg({P, sub});
        for (idx p = 0; p < P; ++p)
            for (idx c = 0; c < sub; ++c) eg.at(p, c) = E.at(p, g * sub + c);
        std::vector<idx> sel(static_cast<std::size_t>(P));
        kern::nearest_rows(eg.data(), codebook->val.data() + g * N * sub, P, N, sub,
                           sel.data());
        sel = ag::freeze_index_vec(sel);
        std::vector<idx> rows(static_cast<std::size_t>(P));
        for (idx p = 0; p < P; ++p) {
            res.indices[static_cast<std::size_t>(p * groups + g)] = sel[static_cast<std::size_t>(p)];
            rows[static_cast<std::size_t>(p)] = g * N + sel[static_cast<std::size_t>(p)];
        }
        q_parts.push_back(ag::gather_rows(codebook, rows));
    }
    res.q = groups == 1 ? q_parts[0] : ag::concat_lastdim(q_parts);
    res.q_st = ag::straight_through(e, res.q);
    res.joint.resize(static_cast<std::size_t>(P));
    for (idx p = 0; p < P; ++p) {
        std::vector<idx> gi(static_cast<std::size_t>(groups));
        for (idx g = 0; g < groups; ++g)
            gi[static_cast<std::size_t>(g)] = res.indices[static_cast<std::size_t>(p * groups + g)];
        res.joint[static_cast<std::size_t>(p)] = joint_index(gi, N);
    }
    res.km_loss = kmeans_loss(e, res.q, gamma_km);
    return res;
}

Tensor draw_gumbel_noise(idx positions, idx groups_times_n, Rng& rng) {
    Tensor g({positions, groups_times_n});
    for (idx i = 0; i < g.numel(); ++i) {
        const double u = 1.0 - rng.uniform();  // (0, 1]
        g[i] = -std::log(-std::log(u));
    }
    return g;
}

QuantizationResult gumbel_quantize(const Var& e, const Var& codebook, idx groups,
                                   double temperature, const Tensor& noise,
                                   const nn::Linear* projection) {
    require(temperature > 0.0, "gumbel_quantize: temperature must be positive");
    const Tensor& E = e->val;
    require(E.ndim() == 2, "gumbel_quantize: e must be [P, D]");
    const idx P = E.dim(0), D = E.dim(1);
    const idx sub = D / groups;
    const idx N = codebook->val.dim(0) / groups;
    require(noise.ndim() == 2 && noise.dim(0) == P && noise.dim(1) == groups * N,
            "gumbel_quantize: noise must be [P, G*N]");

    QuantizationResult res;
    res.groups = groups;
    res.codewords = N;
    res.indices.assign(static_cast<std::size_t>(P * groups), 0);

    // Learned logits, when configured, come from one projection over the full
    // feature vector, split per group.
    Var proj_logits;
    if (projection) proj_logits = projection->forward(e);

    std::vector<Var> q_parts;
    for (idx g = 0; g < groups; ++g) {
        Var logits;
        if (projection) {
            logits = ag::slice_lastdim(proj_logits, g * N, N);
        } else {
            // -||e_g - c_j||^2 = 2 e.c - ||e||^2 - ||c||^2
            std::vector<idx> grows(static_cast<std::size_t>(N));
            for (idx j = 0; j < N; ++j) grows[static_cast<std::size_t>(j)] = g * N + j;
            Var cb_g = ag::gather_rows(codebook, grows);             // [N, sub]
            Var e_g = ag::slice_lastdim(e, g * sub, sub);            // [P, sub]
            Var cross = ag::scale(ag::matmul(e_g, cb_g, true), 2.0); // [P, N]
            Var e_sq = ag::sum_rows(ag::mul(e_g, e_g));              // [P]
            Var c_sq = ag::sum_rows(ag::mul(cb_g, cb_g));            // [N]
            logits = cross;
            // subtract ||e||^2 per row and ||c||^2 per column
            Var e_sq_mat = ag::expand_mid(ag::reshape(e_sq, {P, 1}), N);  // [P,N,1]
            logits = ag::sub(logits, ag::reshape(e_sq_mat, {P, N}));
            Var c_sq_rep = ag::expand_mid(ag::reshape(c_sq, {1, N}), P);  // [1,P,N]
            logits = ag::sub(logits, ag::reshape(c_sq_rep, {P, N}));
        }
        // (logits + gumbel) / temperature
        Tensor gn({P, N});
        for (idx p = 0; p < P; ++p)
            for (idx j = 0; j < N; ++j) gn.at(p, j) = noise.at(p, g * N + j);
        Var shifted = ag::scale(ag::add(logits, ag::constant(gn)), 1.0 / temperature);
        Var soft = ag::softmax_rows(shifted);  // [P, N]

        // hard one-hot on the perturbed logits
        std::vector<idx> sel(static_cast<std::size_t>(P));
        for (idx p = 0; p < P; ++p) {
            idx best = 0;
            for (idx j = 1; j < N; ++j)
                if (shifted->val.at(p, j) > shifted->val.at(p, best)) best = j;
            sel[static_cast<std::size_t>(p)] = best;
        }
        sel = ag::freeze_index_vec(sel);
        Tensor hard({P, N});
        for (idx p = 0; p < P; ++p) hard.at(p, sel[static_cast<std::size_t>(p)]) = 1.0;
        // straight-through weights: forward hard, backward soft
        Var weights = ag::add(ag::constant(std::move(hard)), ag::sub(soft, ag::detach(soft)));
        std::vector<idx> grows(static_cast<std::size_t>(N));
        for (idx j = 0; j < N; ++j) grows[static_cast<std::size_t>(j)] = g * N + j;
        Var cb_g = ag::gather_rows(codebook, grows);
        q_parts.push_back(ag::matmul(weights, cb_g));  // [P, sub]

        for (idx p = 0; p < P; ++p)
            res.indices[static_cast<std::size_t>(p * groups + g)] = sel[static_cast<std::size_t>(p)];
    }
    res.q = groups == 1 ? q_parts[0] : ag::concat_lastdim(q_parts);
    // The Gumbel path already carries gradient through the soft weights; use
    // it directly where the k-means type would use the straight-through wrap.
    res.q_st = res.q;
    res.joint.resize(static_cast<std::size_t>(P));
    for (idx p = 0; p < P; ++p) {
        std::vector<idx> gi(static_cast<std::size_t>(groups));
        for (idx g = 0; g < groups; ++g)
            gi[static_cast<std::size_t>(g)] = res.indices[static_cast<std::size_t>(p * groups + g)];
        res.joint[static_cast<std::size_t>(p)] = joint_index(gi, N);
    }
    res.km_loss = ag::constant(Tensor::scalar(0.0));
    return res;
}

}  // namespace dqd2v
