#include "dqd2v/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <unordered_set>

#include "dqd2v/kernels.hpp"

namespace dqd2v::ag {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Var make_node(Tensor val, std::vector<Var> inputs, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->inputs = std::move(inputs);
    for (const Var& in : n->inputs)
        if (in && in->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backward_fn = std::move(fn);
    return n;
}

// Accumulate g into v's grad if it participates in differentiation.
void acc(const Var& v, const double* g, idx count) {
    if (!v || !v->requires_grad) return;
    Tensor& gr = v->ensure_grad();
    require(gr.numel() == count, "grad accumulation size mismatch");
    double* d = gr.data();
    for (idx i = 0; i < count; ++i) d[i] += g[i];
}

double lse2(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

Var constant(Tensor v) { return make_node(std::move(v), {}, nullptr); }

Var parameter(Tensor v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = true;
    return n;
}

// ------------------------------------------------------------- freeze log --

namespace {

struct FreezeLog {
    bool replaying = false;
    std::vector<Tensor> tensors;
    std::vector<std::vector<idx>> index_vecs;
    std::size_t t_cursor = 0, i_cursor = 0;
};
thread_local std::unique_ptr<FreezeLog> g_freeze;

}  // namespace

void freeze_begin_record() {
    g_freeze = std::make_unique<FreezeLog>();
}

void freeze_begin_replay() {
    require(g_freeze != nullptr, "freeze_begin_replay: nothing recorded");
    g_freeze->replaying = true;
    g_freeze->t_cursor = 0;
    g_freeze->i_cursor = 0;
}

void freeze_end() { g_freeze.reset(); }

bool freeze_active() { return g_freeze != nullptr; }

Tensor freeze_value(const Tensor& v) {
    if (!g_freeze) return v;
    if (!g_freeze->replaying) {
        g_freeze->tensors.push_back(v);
        return v;
    }
    require(g_freeze->t_cursor < g_freeze->tensors.size(),
            "freeze log: tensor replay past the recorded sequence");
    return g_freeze->tensors[g_freeze->t_cursor++];
}

std::vector<idx> freeze_index_vec(const std::vector<idx>& v) {
    if (!g_freeze) return v;
    if (!g_freeze->replaying) {
        g_freeze->index_vecs.push_back(v);
        return v;
    }
    require(g_freeze->i_cursor < g_freeze->index_vecs.size(),
            "freeze log: index replay past the recorded sequence");
    return g_freeze->index_vecs[g_freeze->i_cursor++];
}

Var detach(const Var& x) { return constant(freeze_value(x->val)); }

Var frozen_constant(Tensor v) { return constant(freeze_value(v)); }

void backward(const Var& root) {
    require(root != nullptr && root->val.numel() == 1, "backward: root must be a scalar");
    if (!root->requires_grad) return;

    // Post-order DFS (iterative), pruned at non-differentiable nodes.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    struct Frame {
        Node* n;
        std::size_t next;
    };
    std::vector<Frame> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->inputs.size()) {
            Node* in = f.n->inputs[f.next++].get();
            if (in && in->requires_grad && seen.insert(in).second) stack.push_back({in, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad.fill(0.0);
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.same_shape(n->val)) n->backward_fn(*n);
    }
}

// ------------------------------------------------------------ elementwise --

Var add(const Var& a, const Var& b) {
    require(a->val.same_shape(b->val), "add: shape mismatch");
    Tensor y = a->val;
    const double* pb = b->val.data();
    double* py = y.data();
    for (idx i = 0; i < y.numel(); ++i) py[i] += pb[i];
    return make_node(std::move(y), {a, b}, [](Node& n) {
        acc(n.inputs[0], n.grad.data(), n.grad.numel());
        acc(n.inputs[1], n.grad.data(), n.grad.numel());
    });
}

Var sub(const Var& a, const Var& b) {
    require(a->val.same_shape(b->val), "sub: shape mismatch");
    Tensor y = a->val;
    const double* pb = b->val.data();
    double* py = y.data();
    for (idx i = 0; i < y.numel(); ++i) py[i] -= pb[i];
    return make_node(std::move(y), {a, b}, [](Node& n) {
        acc(n.inputs[0], n.grad.data(), n.grad.numel());
        if (n.inputs[1]->requires_grad) {
            Tensor neg = n.grad;
            double* p = neg.data();
            for (idx i = 0; i < neg.numel(); ++i) p[i] = -p[i];
            acc(n.inputs[1], neg.data(), neg.numel());
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require(a->val.same_shape(b->val), "mul: shape mismatch");
    Tensor y = a->val;
    const double* pb = b->val.data();
    double* py = y.data();
    for (idx i = 0; i < y.numel(); ++i) py[i] *= pb[i];
    return make_node(std::move(y), {a, b}, [](Node& n) {
        const idx cnt = n.grad.numel();
        if (n.inputs[0]->requires_grad) {
            Tensor ga = n.grad;
            const double* pb = n.inputs[1]->val.data();
            double* p = ga.data();
            for (idx i = 0; i < cnt; ++i) p[i] *= pb[i];
            acc(n.inputs[0], ga.data(), cnt);
        }
        if (n.inputs[1]->requires_grad) {
            Tensor gb = n.grad;
            const double* pa = n.inputs[0]->val.data();
            double* p = gb.data();
            for (idx i = 0; i < cnt; ++i) p[i] *= pa[i];
            acc(n.inputs[1], gb.data(), cnt);
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor y = a->val;
    double* py = y.data();
    for (idx i = 0; i < y.numel(); ++i) py[i] *= s;
    return make_node(std::move(y), {a}, [s](Node& n) {
        Tensor g = n.grad;
        double* p = g.data();
        for (idx i = 0; i < g.numel(); ++i) p[i] *= s;
        acc(n.inputs[0], g.data(), g.numel());
    });
}

Var add_scalar(const Var& a, double c) {
    Tensor y = a->val;
    double* py = y.data();
    for (idx i = 0; i < y.numel(); ++i) py[i] += c;
    return make_node(std::move(y), {a}, [](Node& n) {
        acc(n.inputs[0], n.grad.data(), n.grad.numel());
    });
}

Var gelu(const Var& a) {
    Tensor y = a->val;
    double* py = y.data();
    const double* px = a->val.data();
    for (idx i = 0; i < y.numel(); ++i)
        py[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * M_SQRT1_2));
    return make_node(std::move(y), {a}, [](Node& n) {
        const Tensor& x = n.inputs[0]->val;
        Tensor g = n.grad;
        double* p = g.data();
        const double* px = x.data();
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
        for (idx i = 0; i < g.numel(); ++i) {
            const double cdf = 0.5 * (1.0 + std::erf(px[i] * M_SQRT1_2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * px[i] * px[i]);
            p[i] *= cdf + px[i] * pdf;
        }
        acc(n.inputs[0], g.data(), g.numel());
    });
}

// ------------------------------------------------------------------ shape --

Var reshape(const Var& a, std::vector<idx> shape) {
    Tensor y = a->val.reshaped(std::move(shape));
    return make_node(std::move(y), {a}, [](Node& n) {
        acc(n.inputs[0], n.grad.data(), n.grad.numel());
    });
}

Var permute(const Var& a, const std::vector<int>& perm) {
    const Tensor& x = a->val;
    const int nd = x.ndim();
    require(static_cast<int>(perm.size()) == nd && nd <= 4, "permute: bad perm");
    std::vector<idx> out_shape(perm.size());
    for (int i = 0; i < nd; ++i) out_shape[i] = x.dim(perm[i]);

    std::vector<idx> in_stride(nd), out_stride(nd);
    idx s = 1;
    for (int i = nd - 1; i >= 0; --i) {
        in_stride[i] = s;
        s *= x.dim(i);
    }
    s = 1;
    for (int i = nd - 1; i >= 0; --i) {
        out_stride[i] = s;
        s *= out_shape[i];
    }
    // out[i0..] = in[perm(i0)..]: map flat out index -> flat in index.
    std::vector<idx> map(static_cast<std::size_t>(x.numel()));
    std::vector<idx> coord(nd);
    for (idx o = 0; o < x.numel(); ++o) {
        idx rem = o;
        idx src = 0;
        for (int i = 0; i < nd; ++i) {
            coord[i] = rem / out_stride[i];
            rem %= out_stride[i];
            src += coord[i] * in_stride[perm[i]];
        }
        map[static_cast<std::size_t>(o)] = src;
    }
    Tensor y(out_shape);
    double* py = y.data();
    const double* px = x.data();
    for (idx o = 0; o < x.numel(); ++o) py[o] = px[map[static_cast<std::size_t>(o)]];
    return make_node(std::move(y), {a}, [map](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        double* p = gx.data();
        const double* g = n.grad.data();
        for (idx o = 0; o < n.grad.numel(); ++o) p[map[static_cast<std::size_t>(o)]] += g[o];
    });
}

Var slice_lastdim(const Var& a, idx start, idx len) {
    const Tensor& x = a->val;
    const idx C = x.dim(x.ndim() - 1);
    require(start >= 0 && len >= 0 && start + len <= C, "slice_lastdim: out of range");
    const idx R = x.numel() / C;
    std::vector<idx> shape = x.shape();
    shape.back() = len;
    Tensor y(shape);
    for (idx r = 0; r < R; ++r)
        for (idx c = 0; c < len; ++c) y[r * len + c] = x[r * C + start + c];
    return make_node(std::move(y), {a}, [start, len, C, R](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double* g = n.grad.data();
        for (idx r = 0; r < R; ++r)
            for (idx c = 0; c < len; ++c) gx[r * C + start + c] += g[r * len + c];
    });
}

Var concat_lastdim(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_lastdim: empty");
    const Tensor& first = parts[0]->val;
    const idx R = first.numel() / first.dim(first.ndim() - 1);
    idx C = 0;
    std::vector<idx> widths;
    for (const Var& p : parts) {
        const Tensor& t = p->val;
        const idx w = t.dim(t.ndim() - 1);
        require(t.numel() / w == R, "concat_lastdim: row mismatch");
        widths.push_back(w);
        C += w;
    }
    std::vector<idx> shape = first.shape();
    shape.back() = C;
    Tensor y(shape);
    idx off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const Tensor& t = parts[p]->val;
        const idx w = widths[p];
        for (idx r = 0; r < R; ++r)
            for (idx c = 0; c < w; ++c) y[r * C + off + c] = t[r * w + c];
        off += w;
    }
    return make_node(std::move(y), parts, [widths, R, C](Node& n) {
        idx off = 0;
        for (std::size_t p = 0; p < n.inputs.size(); ++p) {
            const idx w = widths[p];
            if (n.inputs[p]->requires_grad) {
                Tensor& gx = n.inputs[p]->ensure_grad();
                const double* g = n.grad.data();
                for (idx r = 0; r < R; ++r)
                    for (idx c = 0; c < w; ++c) gx[r * w + c] += g[r * C + off + c];
            }
            off += w;
        }
    });
}

Var expand_mid(const Var& a, idx k) {
    const Tensor& x = a->val;
    require(x.ndim() == 2, "expand_mid: expects [R,C]");
    const idx R = x.dim(0), C = x.dim(1);
    Tensor y({R, k, C});
    for (idx r = 0; r < R; ++r)
        for (idx j = 0; j < k; ++j)
            for (idx c = 0; c < C; ++c) y[(r * k + j) * C + c] = x[r * C + c];
    return make_node(std::move(y), {a}, [R, k, C](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double* g = n.grad.data();
        for (idx r = 0; r < R; ++r)
            for (idx j = 0; j < k; ++j)
                for (idx c = 0; c < C; ++c) gx[r * C + c] += g[(r * k + j) * C + c];
    });
}

// ---------------------------------------------------------- linear algebra --

Var matmul(const Var& a, const Var& b, bool tb) {
    const Tensor& A = a->val;
    const Tensor& B = b->val;
    require(A.ndim() == 2 && B.ndim() == 2, "matmul: expects 2-D");
    const idx M = A.dim(0), K = A.dim(1);
    const idx N = tb ? B.dim(0) : B.dim(1);
    require((tb ? B.dim(1) : B.dim(0)) == K, "matmul: inner dim mismatch");
    Tensor y({M, N});
    kern::gemm(A.data(), B.data(), y.data(), M, K, N, false, tb, false);
    return make_node(std::move(y), {a, b}, [M, K, N, tb](Node& n) {
        const Tensor& A = n.inputs[0]->val;
        const Tensor& B = n.inputs[1]->val;
        if (n.inputs[0]->requires_grad) {
            Tensor& ga = n.inputs[0]->ensure_grad();
            // tb: gA = g * B ; else gA = g * B^T
            kern::gemm(n.grad.data(), B.data(), ga.data(), M, N, K, false, !tb, true);
        }
        if (n.inputs[1]->requires_grad) {
            Tensor& gb = n.inputs[1]->ensure_grad();
            if (tb)  // gB[N,K] = g^T * A
                kern::gemm(n.grad.data(), A.data(), gb.data(), N, M, K, true, false, true);
            else  // gB[K,N] = A^T * g
                kern::gemm(A.data(), n.grad.data(), gb.data(), K, M, N, true, false, true);
        }
    });
}

Var bmm(const Var& a, const Var& b, bool tb) {
    const Tensor& A = a->val;
    const Tensor& B = b->val;
    require(A.ndim() == 3 && B.ndim() == 3 && A.dim(0) == B.dim(0), "bmm: expects [G,..]");
    const idx G = A.dim(0), M = A.dim(1), K = A.dim(2);
    const idx N = tb ? B.dim(1) : B.dim(2);
    require((tb ? B.dim(2) : B.dim(1)) == K, "bmm: inner dim mismatch");
    Tensor y({G, M, N});
    for (idx g = 0; g < G; ++g)
        kern::gemm(A.data() + g * M * K, B.data() + g * (tb ? N * K : K * N),
                   y.data() + g * M * N, M, K, N, false, tb, false);
    return make_node(std::move(y), {a, b}, [G, M, K, N, tb](Node& n) {
        const Tensor& A = n.inputs[0]->val;
        const Tensor& B = n.inputs[1]->val;
        const idx bstride = tb ? N * K : K * N;
        if (n.inputs[0]->requires_grad) {
            Tensor& ga = n.inputs[0]->ensure_grad();
            for (idx g = 0; g < G; ++g)
                kern::gemm(n.grad.data() + g * M * N, B.data() + g * bstride,
                           ga.data() + g * M * K, M, N, K, false, !tb, true);
        }
        if (n.inputs[1]->requires_grad) {
            Tensor& gb = n.inputs[1]->ensure_grad();
            for (idx g = 0; g < G; ++g) {
                if (tb)
                    kern::gemm(n.grad.data() + g * M * N, A.data() + g * M * K,
                               gb.data() + g * N * K, N, M, K, true, false, true);
                else
                    kern::gemm(A.data() + g * M * K, n.grad.data() + g * M * N,
                               gb.data() + g * K * N, K, M, N, true, false, true);
            }
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const Tensor& X = x->val;
    const Tensor& W = w->val;
    require(W.ndim() == 2, "linear: weight must be [Out,In]");
    const idx In = W.dim(1), Out = W.dim(0);
    require(X.dim(X.ndim() - 1) == In, "linear: input dim mismatch");
    const idx R = X.numel() / In;
    std::vector<idx> shape = X.shape();
    shape.back() = Out;
    Tensor y(shape);
    kern::gemm(X.data(), W.data(), y.data(), R, In, Out, false, true, false);
    if (b) {
        require(b->val.numel() == Out, "linear: bias dim mismatch");
        const double* pb = b->val.data();
        double* py = y.data();
        for (idx r = 0; r < R; ++r)
            for (idx c = 0; c < Out; ++c) py[r * Out + c] += pb[c];
    }
    std::vector<Var> inputs = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_node(std::move(y), std::move(inputs), [R, In, Out](Node& n) {
        const Tensor& X = n.inputs[0]->val;
        const Tensor& W = n.inputs[1]->val;
        if (n.inputs[0]->requires_grad) {
            Tensor& gx = n.inputs[0]->ensure_grad();
            kern::gemm(n.grad.data(), W.data(), gx.data(), R, Out, In, false, false, true);
        }
        if (n.inputs[1]->requires_grad) {
            Tensor& gw = n.inputs[1]->ensure_grad();
            kern::gemm(n.grad.data(), X.data(), gw.data(), Out, R, In, true, false, true);
        }
        if (n.inputs.size() > 2 && n.inputs[2]->requires_grad) {
            Tensor& gb = n.inputs[2]->ensure_grad();
            const double* g = n.grad.data();
            for (idx r = 0; r < R; ++r)
                for (idx c = 0; c < Out; ++c) gb[c] += g[r * Out + c];
        }
    });
}

Var conv1d(const Var& x, const Var& w, const Var& b, idx stride, idx pad, idx groups) {
    const Tensor& X = x->val;
    const Tensor& W = w->val;
    require(X.ndim() == 3 && W.ndim() == 3, "conv1d: x [B,T,Cin], w [Cout,K,Cin/g]");
    const idx B = X.dim(0), T = X.dim(1), Cin = X.dim(2);
    const idx Cout = W.dim(0), K = W.dim(1);
    require(Cin % groups == 0 && Cout % groups == 0, "conv1d: groups must divide channels");
    require(W.dim(2) == Cin / groups, "conv1d: weight in-channel mismatch");
    const idx Tout = (T + 2 * pad - K) / stride + 1;
    require(Tout >= 1, "conv1d: input too short for kernel");
    Tensor y({B, Tout, Cout});
    kern::conv1d(X.data(), W.data(), b ? b->val.data() : nullptr, y.data(), B, T, Cin,
                 Tout, Cout, K, stride, pad, groups);
    std::vector<Var> inputs = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_node(std::move(y), std::move(inputs),
                     [B, T, Cin, Tout, Cout, K, stride, pad, groups](Node& n) {
                         const Tensor& X = n.inputs[0]->val;
                         const Tensor& W = n.inputs[1]->val;
                         if (n.inputs[0]->requires_grad) {
                             Tensor& gx = n.inputs[0]->ensure_grad();
                             kern::conv1d_grad_input(n.grad.data(), W.data(), gx.data(), B, T,
                                                     Cin, Tout, Cout, K, stride, pad, groups);
                         }
                         const bool want_w = n.inputs[1]->requires_grad;
                         const bool want_b = n.inputs.size() > 2 && n.inputs[2]->requires_grad;
                         if (want_w || want_b) {
                             Tensor scratch;
                             Tensor& gw = want_w ? n.inputs[1]->ensure_grad()
                                                 : (scratch = Tensor::zeros(W.shape()), scratch);
                             double* gb = want_b ? n.inputs[2]->ensure_grad().data() : nullptr;
                             kern::conv1d_grad_weight(n.grad.data(), X.data(), gw.data(), gb, B,
                                                      T, Cin, Tout, Cout, K, stride, pad, groups);
                         }
                     });
}

// ---------------------------------------------------------- normalization --

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Tensor& X = x->val;
    const idx C = X.dim(X.ndim() - 1);
    require(gamma->val.numel() == C && beta->val.numel() == C, "layer_norm: affine dims");
    const idx R = X.numel() / C;
    Tensor y(X.shape());
    Tensor xh(X.shape());
    Tensor inv({R});
    const double* px = X.data();
    const double* pg = gamma->val.data();
    const double* pb = beta->val.data();
    for (idx r = 0; r < R; ++r) {
        double mu = 0.0;
        for (idx c = 0; c < C; ++c) mu += px[r * C + c];
        mu /= C;
        double var = 0.0;
        for (idx c = 0; c < C; ++c) {
            const double d = px[r * C + c] - mu;
            var += d * d;
        }
        var /= C;
        const double iv = 1.0 / std::sqrt(var + eps);
        inv[r] = iv;
        for (idx c = 0; c < C; ++c) {
            const double h = (px[r * C + c] - mu) * iv;
            xh[r * C + c] = h;
            y[r * C + c] = pg[c] * h + pb[c];
        }
    }
    return make_node(std::move(y), {x, gamma, beta}, [R, C, xh, inv](Node& n) {
        const double* g = n.grad.data();
        const double* pg = n.inputs[1]->val.data();
        if (n.inputs[0]->requires_grad) {
            Tensor& gx = n.inputs[0]->ensure_grad();
            for (idx r = 0; r < R; ++r) {
                double m1 = 0.0, m2 = 0.0;
                for (idx c = 0; c < C; ++c) {
                    const double gh = g[r * C + c] * pg[c];
                    m1 += gh;
                    m2 += gh * xh[r * C + c];
                }
                m1 /= C;
                m2 /= C;
                for (idx c = 0; c < C; ++c) {
                    const double gh = g[r * C + c] * pg[c];
                    gx[r * C + c] += inv[r] * (gh - m1 - xh[r * C + c] * m2);
                }
            }
        }
        if (n.inputs[1]->requires_grad) {
            Tensor& gg = n.inputs[1]->ensure_grad();
            for (idx r = 0; r < R; ++r)
                for (idx c = 0; c < C; ++c) gg[c] += g[r * C + c] * xh[r * C + c];
        }
        if (n.inputs[2]->requires_grad) {
            Tensor& gb = n.inputs[2]->ensure_grad();
            for (idx r = 0; r < R; ++r)
                for (idx c = 0; c < C; ++c) gb[c] += g[r * C + c];
        }
    });
}

void instance_norm_masked_value(const Tensor& x, const std::vector<idx>& lengths,
                                Tensor& out, double eps) {
    require(x.ndim() == 3, "instance_norm: expects [B,T,C]");
    const idx B = x.dim(0), T = x.dim(1), C = x.dim(2);
    require(static_cast<idx>(lengths.size()) == B, "instance_norm: lengths size");
    if (!out.same_shape(x)) out = Tensor::zeros(x.shape());
    bool warned = false;
    for (idx b = 0; b < B; ++b) {
        const idx len = lengths[static_cast<std::size_t>(b)];
        require(len >= 1 && len <= T, "instance_norm: bad length");
        if (len == 1 && !warned) {
            warn("instance norm: utterance of length 1, output zeroed");
            warned = true;
        }
        for (idx c = 0; c < C; ++c) {
            double mu = 0.0;
            for (idx t = 0; t < len; ++t) mu += x.at(b, t, c);
            mu /= static_cast<double>(len);
            double var = 0.0;
            for (idx t = 0; t < len; ++t) {
                const double d = x.at(b, t, c) - mu;
                var += d * d;
            }
            var /= static_cast<double>(len);
            const double iv = 1.0 / std::sqrt(var + eps);
            for (idx t = 0; t < T; ++t)
                out.at(b, t, c) = t < len ? (x.at(b, t, c) - mu) * iv : 0.0;
        }
    }
}

Var instance_norm_masked(const Var& x, const std::vector<idx>& lengths, double eps) {
    const Tensor& X = x->val;
    Tensor y;
    instance_norm_masked_value(X, lengths, y, eps);
    const idx B = X.dim(0), T = X.dim(1), C = X.dim(2);
    // inv factors recomputed for backward
    Tensor inv({B, C});
    for (idx b = 0; b < B; ++b) {
        const idx len = lengths[static_cast<std::size_t>(b)];
        for (idx c = 0; c < C; ++c) {
            double mu = 0.0;
            for (idx t = 0; t < len; ++t) mu += X.at(b, t, c);
            mu /= static_cast<double>(len);
            double var = 0.0;
            for (idx t = 0; t < len; ++t) {
                const double d = X.at(b, t, c) - mu;
                var += d * d;
            }
            var /= static_cast<double>(len);
            inv.at(b, c) = 1.0 / std::sqrt(var + eps);
        }
    }
    std::vector<idx> lens = lengths;
    return make_node(std::move(y), {x}, [B, T, C, inv, lens](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const Tensor& yv = n.val;
        const double* g = n.grad.data();
        for (idx b = 0; b < B; ++b) {
            const idx len = lens[static_cast<std::size_t>(b)];
            for (idx c = 0; c < C; ++c) {
                double m1 = 0.0, m2 = 0.0;
                for (idx t = 0; t < len; ++t) {
                    const double gv = g[(b * T + t) * C + c];
                    m1 += gv;
                    m2 += gv * yv.at(b, t, c);
                }
                m1 /= static_cast<double>(len);
                m2 /= static_cast<double>(len);
                for (idx t = 0; t < len; ++t) {
                    const double gv = g[(b * T + t) * C + c];
                    gx[(b * T + t) * C + c] +=
                        inv.at(b, c) * (gv - m1 - yv.at(b, t, c) * m2);
                }
            }
        }
    });
}

Var l2norm_rows(const Var& x) {
    const Tensor& X = x->val;
    const idx C = X.dim(X.ndim() - 1);
    const idx R = X.numel() / C;
    constexpr double kEps = 1e-12;
    Tensor y(X.shape());
    Tensor norms({R});
    const double* px = X.data();
    for (idx r = 0; r < R; ++r) {
        double s = 0.0;
        for (idx c = 0; c < C; ++c) s += px[r * C + c] * px[r * C + c];
        const double nrm = std::sqrt(s);
        norms[r] = nrm;
        const double sc = 1.0 / (nrm + kEps);
        for (idx c = 0; c < C; ++c) y[r * C + c] = px[r * C + c] * sc;
    }
    return make_node(std::move(y), {x}, [R, C, norms](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const Tensor& X = n.inputs[0]->val;
        const double* g = n.grad.data();
        for (idx r = 0; r < R; ++r) {
            const double nrm = norms[r];
            const double sc = 1.0 / (nrm + 1e-12);
            double dot = 0.0;
            for (idx c = 0; c < C; ++c) dot += X[r * C + c] * g[r * C + c];
            for (idx c = 0; c < C; ++c) {
                double v = sc * g[r * C + c];
                if (nrm > 0.0) v -= sc * sc * (X[r * C + c] / nrm) * dot;
                gx[r * C + c] += v;
            }
        }
    });
}

// ------------------------------------------------------ reductions / picks --

Var softmax_rows(const Var& x) {
    const Tensor& X = x->val;
    const idx C = X.dim(X.ndim() - 1);
    const idx R = X.numel() / C;
    Tensor y(X.shape());
    kern::softmax_rows(X.data(), y.data(), R, C);
    return make_node(std::move(y), {x}, [R, C](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const Tensor& y = n.val;
        const double* g = n.grad.data();
        for (idx r = 0; r < R; ++r) {
            double dot = 0.0;
            for (idx c = 0; c < C; ++c) dot += g[r * C + c] * y[r * C + c];
            for (idx c = 0; c < C; ++c)
                gx[r * C + c] += y[r * C + c] * (g[r * C + c] - dot);
        }
    });
}

Var logsumexp_rows(const Var& x) {
    const Tensor& X = x->val;
    require(X.ndim() == 2, "logsumexp_rows: expects [R,C]");
    const idx R = X.dim(0), C = X.dim(1);
    Tensor y({R});
    for (idx r = 0; r < R; ++r) {
        const double* xr = X.data() + r * C;
        double m = xr[0];
        for (idx c = 1; c < C; ++c) m = std::max(m, xr[c]);
        double z = 0.0;
        for (idx c = 0; c < C; ++c) z += std::exp(xr[c] - m);
        y[r] = m + std::log(z);
    }
    return make_node(std::move(y), {x}, [R, C](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const Tensor& X = n.inputs[0]->val;
        const double* g = n.grad.data();
        for (idx r = 0; r < R; ++r) {
            const double lse = n.val[r];
            for (idx c = 0; c < C; ++c)
                gx[r * C + c] += std::exp(X[r * C + c] - lse) * g[r];
        }
    });
}

Var sum_rows(const Var& x) {
    const Tensor& X = x->val;
    const idx C = X.dim(X.ndim() - 1);
    const idx R = X.numel() / C;
    std::vector<idx> shape(X.shape().begin(), X.shape().end() - 1);
    if (shape.empty()) shape = {1};
    Tensor y(shape);
    for (idx r = 0; r < R; ++r) {
        double s = 0.0;
        for (idx c = 0; c < C; ++c) s += X[r * C + c];
        y[r] = s;
    }
    return make_node(std::move(y), {x}, [R, C](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double* g = n.grad.data();
        for (idx r = 0; r < R; ++r)
            for (idx c = 0; c < C; ++c) gx[r * C + c] += g[r];
    });
}

Var mean_all(const Var& x) {
    const idx cnt = x->val.numel();
    require(cnt > 0, "mean_all: empty tensor");
    double s = 0.0;
    const double* px = x->val.data();
    for (idx i = 0; i < cnt; ++i) s += px[i];
    Tensor y = Tensor::scalar(s / static_cast<double>(cnt));
    return make_node(std::move(y), {x}, [cnt](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double g = n.grad[0] / static_cast<double>(cnt);
        for (idx i = 0; i < cnt; ++i) gx[i] += g;
    });
}

Var sum_all(const Var& x) {
    const idx cnt = x->val.numel();
    double s = 0.0;
    const double* px = x->val.data();
    for (idx i = 0; i < cnt; ++i) s += px[i];
    Tensor y = Tensor::scalar(s);
    return make_node(std::move(y), {x}, [cnt](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double g = n.grad[0];
        for (idx i = 0; i < cnt; ++i) gx[i] += g;
    });
}

Var masked_mean_time(const Var& x, const std::vector<idx>& lengths) {
    const Tensor& X = x->val;
    require(X.ndim() == 3, "masked_mean_time: expects [B,T,C]");
    const idx B = X.dim(0), T = X.dim(1), C = X.dim(2);
    require(static_cast<idx>(lengths.size()) == B, "masked_mean_time: lengths size");
    Tensor y({B, C});
    for (idx b = 0; b < B; ++b) {
        const idx len = lengths[static_cast<std::size_t>(b)];
        require(len >= 1 && len <= T, "masked_mean_time: bad length");
        for (idx c = 0; c < C; ++c) {
            double s = 0.0;
            for (idx t = 0; t < len; ++t) s += X.at(b, t, c);
            y.at(b, c) = s / static_cast<double>(len);
        }
    }
    std::vector<idx> lens = lengths;
    return make_node(std::move(y), {x}, [B, T, C, lens](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double* g = n.grad.data();
        for (idx b = 0; b < B; ++b) {
            const idx len = lens[static_cast<std::size_t>(b)];
            const double invl = 1.0 / static_cast<double>(len);
            for (idx t = 0; t < len; ++t)
                for (idx c = 0; c < C; ++c)
                    gx[(b * T + t) * C + c] += g[b * C + c] * invl;
        }
    });
}

Var gather_rows(const Var& x, const std::vector<idx>& rows) {
    const Tensor& X = x->val;
    require(X.ndim() == 2, "gather_rows: expects [R,C]");
    const idx R = X.dim(0), C = X.dim(1);
    const idx M = static_cast<idx>(rows.size());
    Tensor y({M, C});
    for (idx m = 0; m < M; ++m) {
        const idx r = rows[static_cast<std::size_t>(m)];
        require(r >= 0 && r < R, "gather_rows: index out of range");
        for (idx c = 0; c < C; ++c) y[m * C + c] = X[r * C + c];
    }
    std::vector<idx> rws = rows;
    return make_node(std::move(y), {x}, [rws, C](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double* g = n.grad.data();
        for (std::size_t m = 0; m < rws.size(); ++m)
            for (idx c = 0; c < C; ++c) gx[rws[m] * C + c] += g[static_cast<idx>(m) * C + c];
    });
}

Var scatter_rows(const Var& rows, const std::vector<idx>& row_index, idx total_rows) {
    const Tensor& X = rows->val;
    require(X.ndim() == 2, "scatter_rows: expects [M,C]");
    const idx M = X.dim(0), C = X.dim(1);
    require(static_cast<idx>(row_index.size()) == M, "scatter_rows: index size");
    Tensor y({total_rows, C});
    for (idx m = 0; m < M; ++m) {
        const idx r = row_index[static_cast<std::size_t>(m)];
        require(r >= 0 && r < total_rows, "scatter_rows: index out of range");
        for (idx c = 0; c < C; ++c) y[r * C + c] = X[m * C + c];
    }
    std::vector<idx> rws = row_index;
    return make_node(std::move(y), {rows}, [rws, C](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double* g = n.grad.data();
        for (std::size_t m = 0; m < rws.size(); ++m)
            for (idx c = 0; c < C; ++c) gx[static_cast<idx>(m) * C + c] += g[rws[m] * C + c];
    });
}

Var select_columns(const Var& x, const std::vector<idx>& cols) {
    const Tensor& X = x->val;
    require(X.ndim() == 2, "select_columns: expects [R,C]");
    const idx R = X.dim(0), C = X.dim(1);
    require(static_cast<idx>(cols.size()) == R, "select_columns: index size");
    Tensor y({R});
    for (idx r = 0; r < R; ++r) {
        const idx c = cols[static_cast<std::size_t>(r)];
        require(c >= 0 && c < C, "select_columns: out of range");
        y[r] = X[r * C + c];
    }
    std::vector<idx> cls = cols;
    return make_node(std::move(y), {x}, [cls, C](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double* g = n.grad.data();
        for (std::size_t r = 0; r < cls.size(); ++r)
            gx[static_cast<idx>(r) * C + cls[r]] += g[static_cast<idx>(r)];
    });
}

// ------------------------------------------------------------ mask helpers --

Var scale_frames(const Var& x, const Tensor& m) {
    const Tensor& X = x->val;
    require(X.ndim() == 3, "scale_frames: expects [B,T,C]");
    const idx B = X.dim(0), T = X.dim(1), C = X.dim(2);
    require(m.ndim() == 2 && m.dim(0) == B && m.dim(1) == T, "scale_frames: mask shape");
    Tensor y(X.shape());
    for (idx b = 0; b < B; ++b)
        for (idx t = 0; t < T; ++t) {
            const double s = m.at(b, t);
            for (idx c = 0; c < C; ++c) y.at(b, t, c) = X.at(b, t, c) * s;
        }
    Tensor mc = m;
    return make_node(std::move(y), {x}, [B, T, C, mc](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double* g = n.grad.data();
        for (idx b = 0; b < B; ++b)
            for (idx t = 0; t < T; ++t) {
                const double s = mc.at(b, t);
                for (idx c = 0; c < C; ++c)
                    gx[(b * T + t) * C + c] += g[(b * T + t) * C + c] * s;
            }
    });
}

Var scale_rows_const(const Var& x, const Tensor& w) {
    const Tensor& X = x->val;
    require(X.ndim() == 2, "scale_rows_const: expects [R,C]");
    const idx R = X.dim(0), C = X.dim(1);
    require(w.numel() == R, "scale_rows_const: weight size");
    Tensor y(X.shape());
    for (idx r = 0; r < R; ++r)
        for (idx c = 0; c < C; ++c) y[r * C + c] = X[r * C + c] * w[r];
    Tensor wc = w;
    return make_node(std::move(y), {x}, [R, C, wc](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double* g = n.grad.data();
        for (idx r = 0; r < R; ++r)
            for (idx c = 0; c < C; ++c) gx[r * C + c] += g[r * C + c] * wc[r];
    });
}

Var frame_outer(const Tensor& m, const Var& emb) {
    require(m.ndim() == 2, "frame_outer: mask [B,T]");
    const idx B = m.dim(0), T = m.dim(1);
    const idx C = emb->val.numel();
    Tensor y({B, T, C});
    const double* pe = emb->val.data();
    for (idx b = 0; b < B; ++b)
        for (idx t = 0; t < T; ++t) {
            const double s = m.at(b, t);
            for (idx c = 0; c < C; ++c) y.at(b, t, c) = s * pe[c];
        }
    Tensor mc = m;
    return make_node(std::move(y), {emb}, [B, T, C, mc](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& ge = n.inputs[0]->ensure_grad();
        const double* g = n.grad.data();
        for (idx b = 0; b < B; ++b)
            for (idx t = 0; t < T; ++t) {
                const double s = mc.at(b, t);
                if (s == 0.0) continue;
                for (idx c = 0; c < C; ++c) ge[c] += s * g[(b * T + t) * C + c];
            }
    });
}

// ------------------------------------------------------------------ losses --

Var smooth_l1_masked(const Var& pred, const Var& target, const Tensor& mask01,
                     double beta) {
    require(beta > 0.0, "smooth_l1: beta must be positive");
    const Tensor& P = pred->val;
    const Tensor& Y = target->val;
    require(P.same_shape(Y), "smooth_l1: shape mismatch");
    require(P.ndim() == 3, "smooth_l1: expects [B,T,C]");
    const idx B = P.dim(0), T = P.dim(1), C = P.dim(2);
    require(mask01.ndim() == 2 && mask01.dim(0) == B && mask01.dim(1) == T,
            "smooth_l1: mask shape");
    idx nm = 0;
    for (idx i = 0; i < mask01.numel(); ++i)
        if (mask01[i] != 0.0) ++nm;
    if (nm == 0) {
        warn("smooth_l1_masked: empty mask, loss is 0");
        return constant(Tensor::scalar(0.0));
    }
    const double denom = static_cast<double>(nm) * static_cast<double>(C);
    double loss = 0.0;
    for (idx b = 0; b < B; ++b)
        for (idx t = 0; t < T; ++t) {
            if (mask01.at(b, t) == 0.0) continue;
            for (idx c = 0; c < C; ++c) {
                const double d = P.at(b, t, c) - Y.at(b, t, c);
                const double a = std::abs(d);
                loss += a <= beta ? 0.5 * d * d / beta : a - 0.5 * beta;
            }
        }
    Tensor y = Tensor::scalar(loss / denom);
    Tensor mc = mask01;
    return make_node(std::move(y), {pred, target}, [B, T, C, mc, beta, denom](Node& n) {
        const Tensor& P = n.inputs[0]->val;
        const Tensor& Y = n.inputs[1]->val;
        const double g = n.grad[0] / denom;
        const bool wp = n.inputs[0]->requires_grad;
        const bool wt = n.inputs[1]->requires_grad;
        Tensor* gp = wp ? &n.inputs[0]->ensure_grad() : nullptr;
        Tensor* gt = wt ? &n.inputs[1]->ensure_grad() : nullptr;
        for (idx b = 0; b < B; ++b)
            for (idx t = 0; t < T; ++t) {
                if (mc.at(b, t) == 0.0) continue;
                for (idx c = 0; c < C; ++c) {
                    const double d = P.at(b, t, c) - Y.at(b, t, c);
                    const double slope =
                        std::abs(d) <= beta ? d / beta : (d > 0.0 ? 1.0 : -1.0);
                    if (wp) (*gp)[(b * T + t) * C + c] += g * slope;
                    if (wt) (*gt)[(b * T + t) * C + c] -= g * slope;
                }
            }
    });
}

Var cross_entropy(const Var& logits, const std::vector<idx>& labels) {
    const Tensor& X = logits->val;
    require(X.ndim() == 2, "cross_entropy: expects [B,C]");
    const idx B = X.dim(0), C = X.dim(1);
    require(static_cast<idx>(labels.size()) == B, "cross_entropy: label count");
    Tensor probs({B, C});
    kern::softmax_rows(X.data(), probs.data(), B, C);
    double loss = 0.0;
    for (idx b = 0; b < B; ++b) {
        const idx y = labels[static_cast<std::size_t>(b)];
        require(y >= 0 && y < C, "cross_entropy: label out of range");
        const double* xr = X.data() + b * C;
        double m = xr[0];
        for (idx c = 1; c < C; ++c) m = std::max(m, xr[c]);
        double z = 0.0;
        for (idx c = 0; c < C; ++c) z += std::exp(xr[c] - m);
        loss += m + std::log(z) - xr[y];
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(B));
    std::vector<idx> labs = labels;
    return make_node(std::move(out), {logits}, [B, C, probs, labs](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double g = n.grad[0] / static_cast<double>(B);
        for (idx b = 0; b < B; ++b) {
            for (idx c = 0; c < C; ++c) gx[b * C + c] += g * probs[b * C + c];
            gx[b * C + labs[static_cast<std::size_t>(b)]] -= g;
        }
    });
}

Var straight_through(const Var& e, const Var& q) {
    require(e->val.same_shape(q->val), "straight_through: shape mismatch");
    Tensor y;
    if (!freeze_active()) {
        y = q->val;  // forward value is q, exactly
    } else {
        // Under the freeze log the node represents e + sg(q - e): record the
        // residual once, re-apply it to the perturbed e on replay.
        Tensor residual = q->val;
        const double* pe = e->val.data();
        for (idx i = 0; i < residual.numel(); ++i) residual[i] -= pe[i];
        residual = freeze_value(residual);
        y = e->val;
        for (idx i = 0; i < y.numel(); ++i) y[i] += residual[i];
    }
    return make_node(std::move(y), {e}, [](Node& n) {
        acc(n.inputs[0], n.grad.data(), n.grad.numel());
    });
}

// --------------------------------------------------------------------- CTC --

bool ctc_feasible(idx T, const std::vector<idx>& label) {
    idx need = static_cast<idx>(label.size());
    for (std::size_t i = 1; i < label.size(); ++i)
        if (label[i] == label[i - 1]) ++need;
    return T >= need && !label.empty();
}

namespace {

// alpha/beta forward-backward over the blank-extended label in log space.
// Returns nll; fills grad_lp (dNLL / d log_prob) if non-null.
double ctc_one(const double* logits, idx T, idx V, const std::vector<idx>& label,
               double* grad_logits) {
    const idx L = static_cast<idx>(label.size());
    const idx S = 2 * L + 1;
    std::vector<idx> ext(static_cast<std::size_t>(S), 0);
    for (idx i = 0; i < L; ++i) ext[static_cast<std::size_t>(2 * i + 1)] = label[static_cast<std::size_t>(i)];

    // log-softmax per frame
    Tensor lp({T, V});
    Tensor probs({T, V});
    for (idx t = 0; t < T; ++t) {
        const double* xr = logits + t * V;
        double m = xr[0];
        for (idx c = 1; c < V; ++c) m = std::max(m, xr[c]);
        double z = 0.0;
        for (idx c = 0; c < V; ++c) z += std::exp(xr[c] - m);
        const double lz = m + std::log(z);
        for (idx c = 0; c < V; ++c) {
            lp.at(t, c) = xr[c] - lz;
            probs.at(t, c) = std::exp(xr[c] - lz);
        }
    }

    auto allow_skip = [&](idx s) {
        return ext[static_cast<std::size_t>(s)] != 0 &&
               s >= 2 && ext[static_cast<std::size_t>(s)] != ext[static_cast<std::size_t>(s - 2)];
    };

    Tensor alpha = Tensor::full({T, S}, kNegInf);
    alpha.at(0, 0) = lp.at(0, ext[0]);
    if (S > 1) alpha.at(0, 1) = lp.at(0, ext[1]);
    for (idx t = 1; t < T; ++t) {
        for (idx s = 0; s < S; ++s) {
            double v = alpha.at(t - 1, s);
            if (s >= 1) v = lse2(v, alpha.at(t - 1, s - 1));
            if (allow_skip(s)) v = lse2(v, alpha.at(t - 1, s - 2));
            alpha.at(t, s) = v == kNegInf ? kNegInf : v + lp.at(t, ext[static_cast<std::size_t>(s)]);
        }
    }
    const double logp = S > 1 ? lse2(alpha.at(T - 1, S - 1), alpha.at(T - 1, S - 2))
                              : alpha.at(T - 1, S - 1);
    const double nll = -logp;
    if (!grad_logits || logp == kNegInf) return nll;

    Tensor beta = Tensor::full({T, S}, kNegInf);
    beta.at(T - 1, S - 1) = lp.at(T - 1, ext[static_cast<std::size_t>(S - 1)]);
    if (S > 1) beta.at(T - 1, S - 2) = lp.at(T - 1, ext[static_cast<std::size_t>(S - 2)]);
    for (idx t = T - 2; t >= 0; --t) {
        for (idx s = 0; s < S; ++s) {
            double v = beta.at(t + 1, s);
            if (s + 1 < S) v = lse2(v, beta.at(t + 1, s + 1));
            if (s + 2 < S && ext[static_cast<std::size_t>(s + 2)] != 0 &&
                ext[static_cast<std::size_t>(s + 2)] != ext[static_cast<std::size_t>(s)])
                v = lse2(v, beta.at(t + 1, s + 2));
            beta.at(t, s) = v == kNegInf ? kNegInf : v + lp.at(t, ext[static_cast<std::size_t>(s)]);
        }
    }

    // dNLL/dlogit[t,k] = softmax[t,k] - posterior[t,k]
    for (idx t = 0; t < T; ++t) {
        std::vector<double> occ(static_cast<std::size_t>(V), kNegInf);
        for (idx s = 0; s < S; ++s) {
            const double ab = alpha.at(t, s) + beta.at(t, s);
            if (ab == kNegInf) continue;
            const idx k = ext[static_cast<std::size_t>(s)];
            const double mass = ab - lp.at(t, k);
            occ[static_cast<std::size_t>(k)] = lse2(occ[static_cast<std::size_t>(k)], mass);
        }
        for (idx k = 0; k < V; ++k) {
            const double post =
                occ[static_cast<std::size_t>(k)] == kNegInf
                    ? 0.0
                    : std::exp(occ[static_cast<std::size_t>(k)] - logp);
            grad_logits[t * V + k] = probs.at(t, k) - post;
        }
    }
    return nll;
}

}  // namespace

double ctc_nll_value(const Tensor& logits_bt, idx T, const std::vector<idx>& label) {
    require(logits_bt.ndim() == 2, "ctc_nll_value: expects [T,V]");
    require(T <= logits_bt.dim(0), "ctc_nll_value: bad length");
    if (!ctc_feasible(T, label)) return std::numeric_limits<double>::infinity();
    return ctc_one(logits_bt.data(), T, logits_bt.dim(1), label, nullptr);
}

Var ctc_loss(const Var& logits, const std::vector<std::vector<idx>>& labels,
             const std::vector<idx>& lengths, const std::vector<double>& weights) {
    const Tensor& X = logits->val;
    require(X.ndim() == 3, "ctc_loss: expects [B,T,V]");
    const idx B = X.dim(0), T = X.dim(1), V = X.dim(2);
    require(static_cast<idx>(labels.size()) == B && static_cast<idx>(lengths.size()) == B &&
                static_cast<idx>(weights.size()) == B,
            "ctc_loss: per-utterance arrays must match batch");
    Tensor grad({B, T, V});
    double total = 0.0;
    for (idx b = 0; b < B; ++b) {
        const double w = weights[static_cast<std::size_t>(b)];
        if (w == 0.0) continue;
        const idx len = lengths[static_cast<std::size_t>(b)];
        const auto& lab = labels[static_cast<std::size_t>(b)];
        require(len >= 1 && len <= T, "ctc_loss: bad length");
        for (idx s : lab) require(s >= 1 && s < V, "ctc_loss: label symbol out of range");
        require(ctc_feasible(len, lab), "ctc_loss: infeasible label (caller must skip)");
        std::vector<double> g(static_cast<std::size_t>(len * V));
        const double nll = ctc_one(X.data() + b * T * V, len, V, lab, g.data());
        total += w * nll;
        for (idx t = 0; t < len; ++t)
            for (idx k = 0; k < V; ++k)
                grad.at(b, t, k) = w * g[static_cast<std::size_t>(t * V + k)];
    }
    Tensor out = Tensor::scalar(total);
    return make_node(std::move(out), {logits}, [grad](Node& n) {
        if (!n.inputs[0]->requires_grad) return;
        Tensor& gx = n.inputs[0]->ensure_grad();
        const double g = n.grad[0];
        for (idx i = 0; i < grad.numel(); ++i) gx[i] += g * grad[i];
    });
}

}  // namespace dqd2v::ag
