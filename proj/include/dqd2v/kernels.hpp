#pragma once

#include "dqd2v/common.hpp"

namespace dqd2v::kern {

// Every kernel has a serial reference implementation and an OpenMP one that
// partitions work by output element, so the two produce bit-identical
// results (each output is accumulated in the same order either way).
// set_parallel picks which one the dispatching wrappers call.
void set_parallel(bool on);
bool parallel_enabled();

// C[m,n] (+)= op(A) * op(B). A is stored [m,k] ([k,m] when ta),
// B is stored [k,n] ([n,k] when tb). ta && tb is not supported.
void gemm(const double* a, const double* b, double* c, idx m, idx k, idx n,
          bool ta, bool tb, bool accumulate);

// Channels-last 1-D convolution. x:[B,T,Cin], w:[Cout,K,Cin/groups],
// bias:[Cout] (may be null), y:[B,Tout,Cout].
// Tout = (T + 2*pad - K) / stride + 1; out-of-range taps read zero.
void conv1d(const double* x, const double* w, const double* bias, double* y,
            idx B, idx T, idx Cin, idx Tout, idx Cout, idx K, idx stride, idx pad,
            idx groups);
// gx[B,T,Cin] += dL/dx given gy[B,Tout,Cout].
void conv1d_grad_input(const double* gy, const double* w, double* gx,
                       idx B, idx T, idx Cin, idx Tout, idx Cout, idx K, idx stride,
                       idx pad, idx groups);
// gw[Cout,K,Cin/groups] += and gbias[Cout] += (gbias may be null).
void conv1d_grad_weight(const double* gy, const double* x, double* gw, double* gbias,
                        idx B, idx T, idx Cin, idx Tout, idx Cout, idx K, idx stride,
                        idx pad, idx groups);

// Row-wise softmax, y:[rows,cols].
void softmax_rows(const double* x, double* y, idx rows, idx cols);

// For each row of e:[P,d], the index in cb:[N,d] with the smallest squared
// Euclidean distance; ties resolved to the lowest index.
void nearest_rows(const double* e, const double* cb, idx P, idx N, idx d,
                  idx* out_idx);

}  // namespace dqd2v::kern
