#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dqd2v/tensor.hpp"

namespace dqd2v::ag {

// Reverse-mode autodiff over Tensor values. A graph is built per forward
// pass; backward() walks it once in reverse topological order. Stop-gradient
// boundaries are expressed with detach()/constant() nodes, which is how the
// teacher branch, the codebook commitment terms and the straight-through
// estimator get their exact-zero gradient guarantees.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // allocated on first accumulation; same shape as val
    bool requires_grad = false;
    std::vector<Var> inputs;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (!grad.same_shape(val)) grad = Tensor::zeros(val.shape());
        return grad;
    }
};

Var constant(Tensor v);
Var parameter(Tensor v);  // requires_grad = true leaf
Var detach(const Var& x);
// A constant marking a stop-gradient boundary (teacher outputs, regression
// targets). Participates in the freeze log below.
Var frozen_constant(Tensor v);

// Freeze log for finite-difference checks of composite losses. A stop
// gradient means "hold this branch fixed", so the function a loss graph
// represents is the one where every detached value keeps its nominal value.
// Record the boundaries once at the nominal parameters, then replay them
// while perturbing parameters; call order must be identical (forward passes
// are deterministic given fixed batch and step randomness).
void freeze_begin_record();
void freeze_begin_replay();
void freeze_end();
bool freeze_active();
Tensor freeze_value(const Tensor& v);
std::vector<idx> freeze_index_vec(const std::vector<idx>& v);

// Seeds root->grad with ones (root must be a scalar [1]) and accumulates
// gradients into every reachable node with requires_grad.
void backward(const Var& root);

// --- elementwise / scalar ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double c);
Var gelu(const Var& a);

// --- shape ---
Var reshape(const Var& a, std::vector<idx> shape);
Var permute(const Var& a, const std::vector<int>& perm);
Var slice_lastdim(const Var& a, idx start, idx len);
Var concat_lastdim(const std::vector<Var>& parts);
// x:[R,C] -> [R,k,C], each row repeated k times.
Var expand_mid(const Var& a, idx k);

// --- linear algebra ---
// 2-D product; b is [K,N], or [N,K] when tb.
Var matmul(const Var& a, const Var& b, bool tb = false);
// Batched over leading dim: a:[G,M,K], b:[G,K,N] (or [G,N,K] when tb).
Var bmm(const Var& a, const Var& b, bool tb = false);
// x:[...,In], w:[Out,In], b:[Out] (b may be null Var).
Var linear(const Var& x, const Var& w, const Var& b);
// x:[B,T,Cin] channels-last; w:[Cout,K,Cin/groups].
Var conv1d(const Var& x, const Var& w, const Var& b, idx stride, idx pad, idx groups);

// --- normalization ---
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Per (utterance, channel) over valid frames, no affine; padded rows zeroed.
// Length-1 utterances yield zeros (and a warning).
Var instance_norm_masked(const Var& x, const std::vector<idx>& lengths,
                         double eps = 1e-5);
// Rows of [R,C] scaled to unit L2 norm; the norm gets +1e-12.
Var l2norm_rows(const Var& x);

// --- reductions / selection ---
Var softmax_rows(const Var& x);
Var logsumexp_rows(const Var& x);            // [R,C] -> [R]
Var sum_rows(const Var& x);                  // [R,C] -> [R]
Var mean_all(const Var& x);                  // -> [1]
Var sum_all(const Var& x);                   // -> [1]
Var masked_mean_time(const Var& x, const std::vector<idx>& lengths);  // [B,T,C] -> [B,C]
Var gather_rows(const Var& x, const std::vector<idx>& rows);          // [R,C] -> [M,C]
// rows:[M,C] scattered into an [R,C] zero tensor at the given (unique) rows.
Var scatter_rows(const Var& rows, const std::vector<idx>& row_index, idx total_rows);
Var select_columns(const Var& x, const std::vector<idx>& cols);       // [R,C] -> [R]

// --- masking helpers (mask operands are plain tensors, never diffable) ---
// y[b,t,:] = x[b,t,:] * m[b,t]
Var scale_frames(const Var& x, const Tensor& m);
// y[r,:] = x[r,:] * w[r]
Var scale_rows_const(const Var& x, const Tensor& w);
// y[b,t,c] = m[b,t] * emb[c]
Var frame_outer(const Tensor& m, const Var& emb);

// --- losses ---
// Mean of the smooth-L1 elementwise values over (masked frames x channels).
// Returns 0 (with a warning) when the mask is empty.
Var smooth_l1_masked(const Var& pred, const Var& target, const Tensor& mask01,
                     double beta);
// logits:[B,C], labels in [0,C); mean over rows.
Var cross_entropy(const Var& logits, const std::vector<idx>& labels);
// Forward value is q; gradient passes to e untouched, none to q.
Var straight_through(const Var& e, const Var& q);

// CTC negative log-likelihood. logits:[B,T,V] with blank = 0; labels hold
// symbols in [1,V). weights[b] scales utterance b's NLL in the returned
// scalar (use 0 to exclude an utterance). Infeasible utterances must be
// excluded by the caller (see ctc_feasible).
Var ctc_loss(const Var& logits, const std::vector<std::vector<idx>>& labels,
             const std::vector<idx>& lengths, const std::vector<double>& weights);
bool ctc_feasible(idx T, const std::vector<idx>& label);
// Plain-value NLL of one utterance (no graph); +inf if infeasible.
double ctc_nll_value(const Tensor& logits_bt, idx T, const std::vector<idx>& label);

// Forward-only instance norm on values (shared with the graph op so the
// target path and the student path normalize identically).
void instance_norm_masked_value(const Tensor& x, const std::vector<idx>& lengths,
                                Tensor& out, double eps = 1e-5);

}  // namespace dqd2v::ag
