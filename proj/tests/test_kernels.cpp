#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <vector>

#include "dqd2v/kernels.hpp"
#include "dqd2v/rng.hpp"
#include "dqd2v/tensor.hpp"
#include "testutil.hpp"

using namespace dqd2v;

namespace {

// Run a kernel invocation once in serial mode and once in parallel mode and
// require bitwise-identical outputs.
template <typename F>
void check_modes_equal(F&& run, Tensor& out) {
    Tensor serial_out = out;
    kern::set_parallel(false);
    run(serial_out);
    Tensor par_out = out;
    kern::set_parallel(true);
    run(par_out);
    kern::set_parallel(true);
    CHECK(serial_out.equal_data(par_out));
}

}  // namespace

TEST_CASE("gemm NN matches naive oracle") {
    Rng rng(1);
    const idx M = 7, K = 5, N = 9;
    Tensor a = test::random_tensor(rng, {M, K});
    Tensor b = test::random_tensor(rng, {K, N});
    Tensor c({M, N});
    kern::gemm(a.data(), b.data(), c.data(), M, K, N, false, false, false);
    for (idx i = 0; i < M; ++i)
        for (idx j = 0; j < N; ++j) {
            double s = 0.0;
            for (idx p = 0; p < K; ++p) s += a.at(i, p) * b.at(p, j);
            CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("gemm NT and TN match transposed oracle") {
    Rng rng(2);
    const idx M = 4, K = 6, N = 3;
    Tensor a = test::random_tensor(rng, {M, K});
    Tensor bt = test::random_tensor(rng, {N, K});
    Tensor c({M, N});
    kern::gemm(a.data(), bt.data(), c.data(), M, K, N, false, true, false);
    for (idx i = 0; i < M; ++i)
        for (idx j = 0; j < N; ++j) {
            double s = 0.0;
            for (idx p = 0; p < K; ++p) s += a.at(i, p) * bt.at(j, p);
            CHECK(c.at(i, j) == doctest::Approx(s).epsilon(1e-12));
        }

    Tensor at = test::random_tensor(rng, {K, M});
    Tensor b = test::random_tensor(rng, {K, N});
    Tensor c2({M, N});
    kern::gemm(at.data(), b.data(), c2.data(), M, K, N, true, false, false);
    for (idx i = 0; i < M; ++i)
        for (idx j = 0; j < N; ++j) {
            double s = 0.0;
            for (idx p = 0; p < K; ++p) s += at.at(p, i) * b.at(p, j);
            CHECK(c2.at(i, j) == doctest::Approx(s).epsilon(1e-12));
        }
}

TEST_CASE("gemm accumulate adds on top") {
    Rng rng(3);
    const idx M = 3, K = 4, N = 2;
    Tensor a = test::random_tensor(rng, {M, K});
    Tensor b = test::random_tensor(rng, {K, N});
    Tensor c = Tensor::full({M, N}, 1.0);
    kern::gemm(a.data(), b.data(), c.data(), M, K, N, false, false, true);
    Tensor c0({M, N});
    kern::gemm(a.data(), b.data(), c0.data(), M, K, N, false, false, false);
    for (idx i = 0; i < M * N; ++i) CHECK(c[i] == doctest::Approx(1.0 + c0[i]));
}

TEST_CASE("serial and parallel kernels agree bitwise") {
    Rng rng(4);
    const idx M = 33, K = 17, N = 29;
    Tensor a = test::random_tensor(rng, {M, K});
    Tensor b = test::random_tensor(rng, {K, N});
    Tensor bt = test::random_tensor(rng, {N, K});
    Tensor at = test::random_tensor(rng, {K, M});
    Tensor c({M, N});
    check_modes_equal([&](Tensor& out) {
        kern::gemm(a.data(), b.data(), out.data(), M, K, N, false, false, false);
    }, c);
    check_modes_equal([&](Tensor& out) {
        kern::gemm(a.data(), bt.data(), out.data(), M, K, N, false, true, false);
    }, c);
    check_modes_equal([&](Tensor& out) {
        kern::gemm(at.data(), b.data(), out.data(), M, K, N, true, false, false);
    }, c);

    const idx B = 3, T = 21, Cin = 12, Cout = 8, Kk = 5, stride = 2, pad = 2, groups = 2;
    const idx Tout = (T + 2 * pad - Kk) / stride + 1;
    Tensor x = test::random_tensor(rng, {B, T, Cin});
    Tensor w = test::random_tensor(rng, {Cout, Kk, Cin / groups});
    Tensor bias = test::random_tensor(rng, {Cout});
    Tensor y({B, Tout, Cout});
    check_modes_equal([&](Tensor& out) {
        kern::conv1d(x.data(), w.data(), bias.data(), out.data(), B, T, Cin, Tout, Cout,
                     Kk, stride, pad, groups);
    }, y);

    Tensor gy = test::random_tensor(rng, {B, Tout, Cout});
    Tensor gx({B, T, Cin});
    check_modes_equal([&](Tensor& out) {
        out.fill(0.0);
        kern::conv1d_grad_input(gy.data(), w.data(), out.data(), B, T, Cin, Tout, Cout,
                                Kk, stride, pad, groups);
    }, gx);
    Tensor gw({Cout, Kk, Cin / groups});
    check_modes_equal([&](Tensor& out) {
        out.fill(0.0);
        Tensor gb({Cout});
        kern::conv1d_grad_weight(gy.data(), x.data(), out.data(), gb.data(), B, T, Cin,
                                 Tout, Cout, Kk, stride, pad, groups);
    }, gw);

    Tensor sm_in = test::random_tensor(rng, {40, 13});
    Tensor sm({40, 13});
    check_modes_equal([&](Tensor& out) {
        kern::softmax_rows(sm_in.data(), out.data(), 40, 13);
    }, sm);
}

TEST_CASE("conv1d matches direct summation oracle") {
    Rng rng(5);
    const idx B = 2, T = 11, Cin = 6, Cout = 4, K = 3, stride = 2, pad = 1, groups = 2;
    const idx Tout = (T + 2 * pad - K) / stride + 1;
    Tensor x = test::random_tensor(rng, {B, T, Cin});
    Tensor w = test::random_tensor(rng, {Cout, K, Cin / groups});
    Tensor bias = test::random_tensor(rng, {Cout});
    Tensor y({B, Tout, Cout});
    kern::conv1d(x.data(), w.data(), bias.data(), y.data(), B, T, Cin, Tout, Cout, K,
                 stride, pad, groups);
    const idx cig = Cin / groups, cog = Cout / groups;
    for (idx b = 0; b < B; ++b)
        for (idx to = 0; to < Tout; ++to)
            for (idx oc = 0; oc < Cout; ++oc) {
                double s = bias[oc];
                const idx g = oc / cog;
                for (idx kk = 0; kk < K; ++kk) {
                    const idx t = to * stride + kk - pad;
                    if (t < 0 || t >= T) continue;
                    for (idx ic = 0; ic < cig; ++ic)
                        s += x.at(b, t, g * cig + ic) * w.at(oc, kk, ic);
                }
                CHECK(y.at(b, to, oc) == doctest::Approx(s).epsilon(1e-12));
            }
}

TEST_CASE("nearest_rows matches exhaustive search with lowest-index ties") {
    Rng rng(6);
    const idx P = 50, N = 12, d = 7;
    Tensor e = test::random_tensor(rng, {P, d});
    Tensor cb = test::random_tensor(rng, {N, d});
    std::vector<idx> got(P);
    kern::nearest_rows(e.data(), cb.data(), P, N, d, got.data());
    for (idx p = 0; p < P; ++p) {
        idx best = -1;
        double bd = 0.0;
        for (idx j = 0; j < N; ++j) {
            double s = 0.0;
            for (idx c = 0; c < d; ++c) {
                double diff = e.at(p, c) - cb.at(j, c);
                s += diff * diff;
            }
            if (best < 0 || s < bd) {
                bd = s;
                best = j;
            }
        }
        CHECK(got[p] == best);
    }

    // exact tie: duplicate codewords -> lowest index wins
    Tensor cb2 = cb;
    for (idx c = 0; c < d; ++c) cb2.at(5, c) = cb2.at(2, c);
    std::vector<idx> e_as_cw(1);
    kern::nearest_rows(cb2.data() + 2 * d, cb2.data(), 1, N, d, e_as_cw.data());
    CHECK(e_as_cw[0] == 2);
}
