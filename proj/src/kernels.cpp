#include "dqd2v/kernels.hpp"

#include <atomic>
#include <cmath>

namespace dqd2v::kern {

namespace {
std::atomic<bool> g_parallel{true};
}

void set_parallel(bool on) { g_parallel.store(on); }
bool parallel_enabled() { return g_parallel.load(); }

// ---------------------------------------------------------------- gemm ----
//
// The serial variants are the reference: plain loop nests, no pointer games.
// The parallel variants split the outermost (output-row) loop across threads
// and keep the per-output accumulation order identical, so results match the
// reference bitwise.

namespace {

// C[m,n] (+)= A[m,k] * B[k,n]
void gemm_nn_serial(const double* a, const double* b, double* c, idx m, idx k, idx n,
                    bool acc) {
    for (idx i = 0; i < m; ++i) {
        for (idx j = 0; j < n; ++j) {
            if (!acc) c[i * n + j] = 0.0;
        }
        for (idx p = 0; p < k; ++p) {
            for (idx j = 0; j < n; ++j) {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
}

void gemm_nn_par(const double* a, const double* b, double* c, idx m, idx k, idx n,
                 bool acc) {
#pragma omp parallel for schedule(static)
    for (idx i = 0; i < m; ++i) {
        double* ci = c + i * n;
        if (!acc)
            for (idx j = 0; j < n; ++j) ci[j] = 0.0;
        const double* ai = a + i * k;
        for (idx p = 0; p < k; ++p) {
            const double aip = ai[p];
            const double* bp = b + p * n;
            for (idx j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
void gemm_nt_serial(const double* a, const double* b, double* c, idx m, idx k, idx n,
                    bool acc) {
    for (idx i = 0; i < m; ++i) {
        for (idx j = 0; j < n; ++j) {
            double s = 0.0;
            for (idx p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
            c[i * n + j] = acc ? c[i * n + j] + s : s;
        }
    }
}

void gemm_nt_par(const double* a, const double* b, double* c, idx m, idx k, idx n,
                 bool acc) {
#pragma omp parallel for schedule(static)
    for (idx i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (idx j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (idx p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = acc ? ci[j] + s : s;
        }
    }
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
void gemm_tn_serial(const double* a, const double* b, double* c, idx m, idx k, idx n,
                    bool acc) {
    for (idx i = 0; i < m; ++i) {
        for (idx j = 0; j < n; ++j) {
            if (!acc) c[i * n + j] = 0.0;
        }
        for (idx p = 0; p < k; ++p) {
            for (idx j = 0; j < n; ++j) {
                c[i * n + j] += a[p * m + i] * b[p * n + j];
            }
        }
    }
}

void gemm_tn_par(const double* a, const double* b, double* c, idx m, idx k, idx n,
                 bool acc) {
#pragma omp parallel for schedule(static)
    for (idx i = 0; i < m; ++i) {
        double* ci = c + i * n;
        if (!acc)
            for (idx j = 0; j < n; ++j) ci[j] = 0.0;
        for (idx p = 0; p < k; ++p) {
            const double api = a[p * m + i];
            const double* bp = b + p * n;
            for (idx j = 0; j < n; ++j) ci[j] += api * bp[j];
        }
    }
}

}  // namespace

void gemm(const double* a, const double* b, double* c, idx m, idx k, idx n,
          bool ta, bool tb, bool accumulate) {
    require(!(ta && tb), "gemm: ta && tb not supported");
    const bool par = parallel_enabled();
    if (!ta && !tb) {
        par ? gemm_nn_par(a, b, c, m, k, n, accumulate)
            : gemm_nn_serial(a, b, c, m, k, n, accumulate);
    } else if (!ta && tb) {
        par ? gemm_nt_par(a, b, c, m, k, n, accumulate)
            : gemm_nt_serial(a, b, c, m, k, n, accumulate);
    } else {
        par ? gemm_tn_par(a, b, c, m, k, n, accumulate)
            : gemm_tn_serial(a, b, c, m, k, n, accumulate);
    }
}

// -------------------------------------------------------------- conv1d ----

namespace {

inline double conv1d_tap(const double* x, const double* w, const double* bias,
                         idx b, idx to, idx oc, idx T, idx Cin, idx K, idx stride,
                         idx pad, idx cin_g, idx cout_g) {
    const idx g = oc / cout_g;
    const idx ic0 = g * cin_g;
    double s = bias ? bias[oc] : 0.0;
    for (idx kk = 0; kk < K; ++kk) {
        const idx t = to * stride + kk - pad;
        if (t < 0 || t >= T) continue;
        for (idx ic = 0; ic < cin_g; ++ic) {
            s += x[(b * T + t) * Cin + ic0 + ic] * w[(oc * K + kk) * cin_g + ic];
        }
    }
    return s;
}

void conv1d_serial(const double* x, const double* w, const double* bias, double* y,
                   idx B, idx T, idx Cin, idx Tout, idx Cout, idx K, idx stride,
                   idx pad, idx groups) {
    const idx cin_g = Cin / groups;
    const idx cout_g = Cout / groups;
    for (idx b = 0; b < B; ++b)
        for (idx to = 0; to < Tout; ++to)
            for (idx oc = 0; oc < Cout; ++oc)
                y[(b * Tout + to) * Cout + oc] =
                    conv1d_tap(x, w, bias, b, to, oc, T, Cin, K, stride, pad, cin_g, cout_g);
}

void conv1d_par(const double* x, const double* w, const double* bias, double* y,
                idx B, idx T, idx Cin, idx Tout, idx Cout, idx K, idx stride,
                idx pad, idx groups) {
    const idx cin_g = Cin / groups;
    const idx cout_g = Cout / groups;
    const idx total = B * Tout;
#pragma omp parallel for schedule(static)
    for (idx bt = 0; bt < total; ++bt) {
        const idx b = bt / Tout;
        const idx to = bt % Tout;
        double* yo = y + (b * Tout + to) * Cout;
        for (idx oc = 0; oc < Cout; ++oc)
            yo[oc] = conv1d_tap(x, w, bias, b, to, oc, T, Cin, K, stride, pad, cin_g, cout_g);
    }
}

inline double conv1d_gx_tap(const double* gy, const double* w, idx b, idx t, idx ic,
                            idx Tout, idx Cout, idx K, idx stride, idx pad,
                            idx cin_g, idx cout_g) {
    const idx g = ic / cin_g;
    const idx icg = ic - g * cin_g;
    double s = 0.0;
    for (idx kk = 0; kk < K; ++kk) {
        const idx num = t + pad - kk;
        if (num < 0 || num % stride != 0) continue;
        const idx to = num / stride;
        if (to >= Tout) continue;
        for (idx ocg = 0; ocg < cout_g; ++ocg) {
            const idx oc = g * cout_g + ocg;
            s += gy[(b * Tout + to) * Cout + oc] * w[(oc * K + kk) * cin_g + icg];
        }
    }
    return s;
}

void conv1d_gi_serial(const double* gy, const double* w, double* gx,
                      idx B, idx T, idx Cin, idx Tout, idx Cout, idx K, idx stride,
                      idx pad, idx groups) {
    const idx cin_g = Cin / groups;
    const idx cout_g = Cout / groups;
    for (idx b = 0; b < B; ++b)
        for (idx t = 0; t < T; ++t)
            for (idx ic = 0; ic < Cin; ++ic)
                gx[(b * T + t) * Cin + ic] +=
                    conv1d_gx_tap(gy, w, b, t, ic, Tout, Cout, K, stride, pad, cin_g, cout_g);
}

void conv1d_gi_par(const double* gy, const double* w, double* gx,
                   idx B, idx T, idx Cin, idx Tout, idx Cout, idx K, idx stride,
                   idx pad, idx groups) {
    const idx cin_g = Cin / groups;
    const idx cout_g = Cout / groups;
    const idx total = B * T;
    // Gather form: each input element sums over the taps that read it, so
    // iterations write disjoint locations.
#pragma omp parallel for schedule(static)
    for (idx bt = 0; bt < total; ++bt) {
        const idx b = bt / T;
        const idx t = bt % T;
        double* gxt = gx + (b * T + t) * Cin;
        for (idx ic = 0; ic < Cin; ++ic)
            gxt[ic] += conv1d_gx_tap(gy, w, b, t, ic, Tout, Cout, K, stride, pad, cin_g, cout_g);
    }
}

void conv1d_gw_one(const double* gy, const double* x, double* gw, double* gbias,
                   idx oc, idx B, idx T, idx Cin, idx Tout, idx Cout, idx K,
                   idx stride, idx pad, idx cin_g, idx cout_g) {
    const idx g = oc / cout_g;
    const idx ic0 = g * cin_g;
    double gb = 0.0;
    for (idx b = 0; b < B; ++b) {
        for (idx to = 0; to < Tout; ++to) {
            const double go = gy[(b * Tout + to) * Cout + oc];
            gb += go;
            for (idx kk = 0; kk < K; ++kk) {
                const idx t = to * stride + kk - pad;
                if (t < 0 || t >= T) continue;
                for (idx ic = 0; ic < cin_g; ++ic)
                    gw[(oc * K + kk) * cin_g + ic] += go * x[(b * T + t) * Cin + ic0 + ic];
            }
        }
    }
    if (gbias) gbias[oc] += gb;
}

void conv1d_gw_serial(const double* gy, const double* x, double* gw, double* gbias,
                      idx B, idx T, idx Cin, idx Tout, idx Cout, idx K, idx stride,
                      idx pad, idx groups) {
    const idx cin_g = Cin / groups;
    const idx cout_g = Cout / groups;
    for (idx oc = 0; oc < Cout; ++oc)
        conv1d_gw_one(gy, x, gw, gbias, oc, B, T, Cin, Tout, Cout, K, stride, pad,
                      cin_g, cout_g);
}

void conv1d_gw_par(const double* gy, const double* x, double* gw, double* gbias,
                   idx B, idx T, idx Cin, idx Tout, idx Cout, idx K, idx stride,
                   idx pad, idx groups) {
    const idx cin_g = Cin / groups;
    const idx cout_g = Cout / groups;
#pragma omp parallel for schedule(static)
    for (idx oc = 0; oc < Cout; ++oc)
        conv1d_gw_one(gy, x, gw, gbias, oc, B, T, Cin, Tout, Cout, K, stride, pad,
                      cin_g, cout_g);
}

}  // namespace

void conv1d(const double* x, const double* w, const double* bias, double* y,
            idx B, idx T, idx Cin, idx Tout, idx Cout, idx K, idx stride, idx pad,
            idx groups) {
    parallel_enabled() ? conv1d_par(x, w, bias, y, B, T, Cin, Tout, Cout, K, stride, pad, groups)
                       : conv1d_serial(x, w, bias, y, B, T, Cin, Tout, Cout, K, stride, pad, groups);
}

void conv1d_grad_input(const double* gy, const double* w, double* gx,
                       idx B, idx T, idx Cin, idx Tout, idx Cout, idx K, idx stride,
                       idx pad, idx groups) {
    parallel_enabled() ? conv1d_gi_par(gy, w, gx, B, T, Cin, Tout, Cout, K, stride, pad, groups)
                       : conv1d_gi_serial(gy, w, gx, B, T, Cin, Tout, Cout, K, stride, pad, groups);
}

void conv1d_grad_weight(const double* gy, const double* x, double* gw, double* gbias,
                        idx B, idx T, idx Cin, idx Tout, idx Cout, idx K, idx stride,
                        idx pad, idx groups) {
    parallel_enabled() ? conv1d_gw_par(gy, x, gw, gbias, B, T, Cin, Tout, Cout, K, stride, pad, groups)
                       : conv1d_gw_serial(gy, x, gw, gbias, B, T, Cin, Tout, Cout, K, stride, pad, groups);
}

// ------------------------------------------------------------- softmax ----

namespace {

inline void softmax_row(const double* xr, double* yr, idx cols) {
    double m = xr[0];
    for (idx c = 1; c < cols; ++c) m = std::max(m, xr[c]);
    double z = 0.0;
    for (idx c = 0; c < cols; ++c) {
        yr[c] = std::exp(xr[c] - m);
        z += yr[c];
    }
    const double inv = 1.0 / z;
    for (idx c = 0; c < cols; ++c) yr[c] *= inv;
}

}  // namespace

void softmax_rows(const double* x, double* y, idx rows, idx cols) {
    if (parallel_enabled()) {
#pragma omp parallel for schedule(static)
        for (idx r = 0; r < rows; ++r) softmax_row(x + r * cols, y + r * cols, cols);
    } else {
        for (idx r = 0; r < rows; ++r) softmax_row(x + r * cols, y + r * cols, cols);
    }
}

// ------------------------------------------------------ nearest_rows ------

namespace {

inline idx nearest_one(const double* ep, const double* cb, idx N, idx d) {
    idx best = 0;
    double best_d = 0.0;
    for (idx j = 0; j < N; ++j) {
        const double* cj = cb + j * d;
        double s = 0.0;
        for (idx c = 0; c < d; ++c) {
            const double diff = ep[c] - cj[c];
            s += diff * diff;
        }
        if (j == 0 || s < best_d) {
            best_d = s;
            best = j;
        }
    }
    return best;
}

}  // namespace

void nearest_rows(const double* e, const double* cb, idx P, idx N, idx d,
                  idx* out_idx) {
    if (parallel_enabled()) {
#pragma omp parallel for schedule(static)
        for (idx p = 0; p < P; ++p) out_idx[p] = nearest_one(e + p * d, cb, N, d);
    } else {
        for (idx p = 0; p < P; ++p) out_idx[p] = nearest_one(e + p * d, cb, N, d);
    }
}

}  // namespace dqd2v::kern
