#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dqd2v/backbone.hpp"
#include "dqd2v/config.hpp"
#include "testutil.hpp"

using namespace dqd2v;

namespace {

ModelConfig micro_model() {
    ModelConfig m = micro_config().model;
    return m;
}

Tensor random_batch(Rng& rng, idx B, idx T, idx F) {
    return test::random_tensor(rng, {B, T, F});
}

// independent instance-norm reference for oracle checks
Tensor insnorm_ref(const Tensor& x, const std::vector<idx>& lengths) {
    const idx B = x.dim(0), T = x.dim(1), C = x.dim(2);
    Tensor y({B, T, C});
    for (idx b = 0; b < B; ++b) {
        const idx len = lengths[static_cast<std::size_t>(b)];
        for (idx c = 0; c < C; ++c) {
            double mu = 0, var = 0;
            for (idx t = 0; t < len; ++t) mu += x.at(b, t, c);
            mu /= static_cast<double>(len);
            for (idx t = 0; t < len; ++t) {
                double d = x.at(b, t, c) - mu;
                var += d * d;
            }
            var /= static_cast<double>(len);
            for (idx t = 0; t < len; ++t)
                y.at(b, t, c) = (x.at(b, t, c) - mu) / std::sqrt(var + 1e-5);
        }
    }
    return y;
}

}  // namespace

TEST_CASE("conv length arithmetic: strides (2,2) on T=8 give T'=2") {
    ModelConfig m = micro_model();
    m.conv_layers = {{8, 2, 2}, {8, 2, 2}};
    CHECK(m.conv_out_len(8) == 2);
    CHECK(m.min_input_len() == 4);  // 1 -> (1-1)*2+2=2 -> (2-1)*2+2=4

    // kernel-1 stride-1 stack leaves lengths unchanged
    ModelConfig id = micro_model();
    id.conv_layers = {{8, 1, 1}, {8, 1, 1}};
    for (idx t : {1, 5, 17}) CHECK(id.conv_out_len(t) == t);

    // brute-force oracle over random stacks: simulate length layer by layer
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        ModelConfig r = micro_model();
        r.conv_layers.clear();
        const idx n = 1 + rng.uniform_int(3);
        for (idx i = 0; i < n; ++i)
            r.conv_layers.push_back({8, 1 + rng.uniform_int(4), 1 + rng.uniform_int(3)});
        const idx T = 1 + rng.uniform_int(40);
        idx len = T;
        bool ok = true;
        for (const auto& c : r.conv_layers) {
            if (len < c.kernel) {
                ok = false;
                break;
            }
            len = (len - c.kernel) / c.stride + 1;
        }
        CHECK(r.conv_out_len(T) == (ok ? len : 0));
        if (ok) CHECK(T >= r.min_input_len());
    }
}

TEST_CASE("feature_encode: shapes, lengths, too-short rejection") {
    RunConfig rc = micro_config();
    Model model(rc.model, Regime::Shallow, 5);
    Rng rng(32);
    Tensor feats = random_batch(rng, 2, 14, rc.model.feature_dim);
    auto enc = model.feature_encode(feats, {14, 10});
    CHECK(enc.latents->val.dim(0) == 2);
    CHECK(enc.latents->val.dim(1) == rc.model.conv_out_len(14));
    CHECK(enc.latents->val.dim(2) == rc.model.model_dim);
    CHECK(enc.lengths == std::vector<idx>{rc.model.conv_out_len(14), rc.model.conv_out_len(10)});
    // padded positions zeroed
    for (idx t = enc.lengths[1]; t < enc.latents->val.dim(1); ++t)
        for (idx d = 0; d < rc.model.model_dim; ++d)
            CHECK(enc.latents->val.at(1, t, d) == 0.0);

    const idx min_len = rc.model.min_input_len();
    try {
        model.feature_encode(feats, {14, min_len - 1});
        CHECK(false);
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find(std::to_string(min_len)) != std::string::npos);
    }
}

TEST_CASE("span_mask: degenerate probabilities and target fraction") {
    Rng rng(33);
    std::vector<idx> lens{50, 30};
    MaskInfo none = span_mask(lens, 0.0, 3, rng);
    CHECK(none.masked_count() == 0);

    MaskInfo all = span_mask(lens, 1.0, 1, rng);
    CHECK(all.masked_count() == 80);
    // never masks padding
    for (idx t = 30; t < 50; ++t) CHECK(all.mask01.at(1, t) == 0.0);
    CHECK(all.spans[0].size() == 1);
    CHECK(all.spans[0][0] == std::pair<idx, idx>{0, 50});

    // defaults (p=0.2, span=3) target ~49% of time steps
    std::vector<idx> big(100, 1000);
    MaskInfo m = span_mask(big, 0.2, 3, rng);
    const double frac = static_cast<double>(m.masked_count()) / 100000.0;
    CHECK(frac == doctest::Approx(0.49).epsilon(0.11));  // 0.49 +- 0.05 absolute
    CHECK(std::abs(frac - 0.49) < 0.05);

    // spans are merged and non-overlapping
    for (const auto& spans : m.spans) {
        for (std::size_t i = 1; i < spans.size(); ++i)
            CHECK(spans[i].first > spans[i - 1].first + spans[i - 1].second);
    }
}

TEST_CASE("student_forward: mask replacement and context sensitivity") {
    RunConfig rc = micro_config();
    Model model(rc.model, Regime::Shallow, 6);
    Rng rng(34);
    Tensor feats = random_batch(rng, 2, 16, rc.model.feature_dim);
    auto enc = model.feature_encode(feats, {16, 12});

    LayerOutputs no_mask = model.student_forward(enc.latents, nullptr, enc.lengths);
    CHECK(static_cast<idx>(no_mask.layers.size()) == rc.model.num_layers);

    MaskInfo empty;
    empty.mask01 = Tensor::zeros({2, enc.latents->val.dim(1)});
    empty.spans.resize(2);
    LayerOutputs with_empty = model.student_forward(enc.latents, &empty, enc.lengths);
    for (std::size_t l = 0; l < no_mask.layers.size(); ++l)
        CHECK(no_mask.layers[l]->val.equal_data(with_empty.layers[l]->val));

    // masking changes outputs
    Rng mrng(35);
    MaskInfo some = span_mask(enc.lengths, 0.5, 2, mrng);
    REQUIRE(some.masked_count() > 0);
    LayerOutputs masked = model.student_forward(enc.latents, &some, enc.lengths);
    CHECK(!masked.layers.back()->val.equal_data(no_mask.layers.back()->val));

    // context sensitivity: perturbing one unmasked input frame changes the
    // output at other positions
    Tensor feats2 = feats;
    feats2.at(0, 3, 0) += 0.5;
    auto enc2 = model.feature_encode(feats2, {16, 12});
    LayerOutputs out2 = model.student_forward(enc2.latents, nullptr, enc.lengths);
    const Tensor& a = no_mask.layers.back()->val;
    const Tensor& b = out2.layers.back()->val;
    bool changed_elsewhere = false;
    for (idx t = 0; t < enc.lengths[0]; ++t) {
        if (t == 3 / 2) continue;
        for (idx d = 0; d < rc.model.model_dim; ++d)
            if (a.at(0, t, d) != b.at(0, t, d)) changed_elsewhere = true;
    }
    CHECK(changed_elsewhere);
}

TEST_CASE("teacher equals student at initialization and returns values") {
    RunConfig rc = micro_config();
    Model model(rc.model, Regime::Shallow, 7);
    Rng rng(36);
    Tensor feats = random_batch(rng, 2, 16, rc.model.feature_dim);
    auto enc = model.feature_encode(feats, {16, 16});
    LayerOutputs stu = model.student_forward(enc.latents, nullptr, enc.lengths);
    LayerValues tea = model.teacher_forward(enc.latents->val, enc.lengths);
    REQUIRE(tea.layers.size() == stu.layers.size());
    for (std::size_t l = 0; l < tea.layers.size(); ++l)
        CHECK(tea.layers[l].equal_data(stu.layers[l]->val));

    // after EMA drift they differ
    for (auto& name : model.params().names_with_prefix("student.ctx.layer0.wq")) {
        model.params().get(name)->val[0] += 1.0;
    }
    model.ema_update(0.0);  // teacher := student
    LayerValues tea2 = model.teacher_forward(enc.latents->val, enc.lengths);
    CHECK(!tea2.layers.back().equal_data(tea.layers.back()));
}

TEST_CASE("ema_update arithmetic") {
    RunConfig rc = micro_config();
    Model model(rc.model, Regime::Shallow, 8);
    Var t0 = model.params().get("teacher.ctx.layer0.wq.w");
    Var s0 = model.params().get("student.ctx.layer0.wq.w");
    // set teacher = 1, student = 0 on one entry
    t0->val[0] = 1.0;
    s0->val[0] = 0.0;
    model.ema_update(0.9);
    CHECK(t0->val[0] == doctest::Approx(0.9).epsilon(1e-12));
    t0->val[0] = 1.0;
    model.ema_update(1.0);
    CHECK(t0->val[0] == 1.0);
    model.ema_update(0.0);
    CHECK(t0->val[0] == s0->val[0]);

    CHECK(ema_tau(0, 100, 0.9, 1.0) == doctest::Approx(0.9));
    CHECK(ema_tau(50, 100, 0.9, 1.0) == doctest::Approx(0.95));
    CHECK(ema_tau(100, 100, 0.9, 1.0) == doctest::Approx(1.0));
    CHECK(ema_tau(500, 100, 0.9, 1.0) == doctest::Approx(1.0));
}

TEST_CASE("build_regression_target: normalization laws and K=2 oracle") {
    RunConfig rc = micro_config();
    Model model(rc.model, Regime::Shallow, 9);
    Rng rng(37);

    LayerValues fake;
    fake.lengths = {6, 4};
    fake.layers.push_back(test::random_tensor(rng, {2, 6, 3}));
    fake.layers.push_back(test::random_tensor(rng, {2, 6, 3}));

    // K=1: equals instance-normed top layer
    Tensor y1 = model.build_regression_target(fake, 1);
    Tensor ref1 = insnorm_ref(fake.layers[1], fake.lengths);
    for (idx b = 0; b < 2; ++b)
        for (idx t = 0; t < fake.lengths[static_cast<std::size_t>(b)]; ++t)
            for (idx c = 0; c < 3; ++c)
                CHECK(y1.at(b, t, c) == doctest::Approx(ref1.at(b, t, c)).epsilon(1e-10));

    // normalization law: per-(utterance, channel) mean ~0, var ~1 on valid frames
    for (idx b = 0; b < 2; ++b) {
        const idx len = fake.lengths[static_cast<std::size_t>(b)];
        for (idx c = 0; c < 3; ++c) {
            double mu = 0, var = 0;
            for (idx t = 0; t < len; ++t) mu += y1.at(b, t, c);
            mu /= static_cast<double>(len);
            for (idx t = 0; t < len; ++t) {
                double d = y1.at(b, t, c) - mu;
                var += d * d;
            }
            var /= static_cast<double>(len);
            CHECK(std::abs(mu) < 1e-4);
            CHECK(std::abs(var - 1.0) < 1e-3);
        }
    }

    // K=2: hand-computed average of normalized layers
    Tensor y2 = model.build_regression_target(fake, 2);
    Tensor ref0 = insnorm_ref(fake.layers[0], fake.lengths);
    for (idx b = 0; b < 2; ++b)
        for (idx t = 0; t < fake.lengths[static_cast<std::size_t>(b)]; ++t)
            for (idx c = 0; c < 3; ++c)
                CHECK(y2.at(b, t, c) ==
                      doctest::Approx(0.5 * (ref0.at(b, t, c) + ref1.at(b, t, c))).epsilon(1e-10));

    // length-1 utterance degenerates to zeros with a warning
    reset_warn_count();
    set_warn_quiet(true);
    LayerValues deg;
    deg.lengths = {1};
    deg.layers.push_back(test::random_tensor(rng, {1, 3, 2}));
    Tensor yd = model.build_regression_target(deg, 1);
    set_warn_quiet(false);
    CHECK(warn_count() >= 1);
    for (idx c = 0; c < 2; ++c) CHECK(yd.at(0, 0, c) == 0.0);
}

TEST_CASE("predictor_t: affine contract") {
    RunConfig rc = micro_config();
    Model model(rc.model, Regime::Shallow, 10);
    const idx D = rc.model.model_dim;
    Rng rng(38);

    // zero weights and bias -> zero output
    model.pred_t.w->val.fill(0.0);
    model.pred_t.b->val.fill(0.0);
    Var x = ag::constant(test::random_tensor(rng, {2, 3, D}));
    Var y = model.predictor_t(x);
    for (idx i = 0; i < y->val.numel(); ++i) CHECK(y->val[i] == 0.0);

    // identity fixture
    for (idx i = 0; i < D; ++i) model.pred_t.w->val.at(i, i) = 1.0;
    Var y_id = model.predictor_t(x);
    CHECK(y_id->val.equal_data(x->val));

    // linearity: f(a+b) = f(a) + f(b) - f(0)
    Rng wr(39);
    model.pred_t.w->val = test::random_tensor(wr, {D, D});
    model.pred_t.b->val = test::random_tensor(wr, {D});
    Var a = ag::constant(test::random_tensor(wr, {1, 2, D}));
    Var b = ag::constant(test::random_tensor(wr, {1, 2, D}));
    Var fa = model.predictor_t(a);
    Var fb = model.predictor_t(b);
    Var fab = model.predictor_t(ag::add(a, b));
    Var f0 = model.predictor_t(ag::constant(Tensor::zeros({1, 2, D})));
    for (idx i = 0; i < fab->val.numel(); ++i)
        CHECK(fab->val[i] == doctest::Approx(fa->val[i] + fb->val[i] - f0->val[i]).epsilon(1e-9));
}

TEST_CASE("adapter deep block is rejected in the shallow regime") {
    nn::ParamStore ps;
    Rng rng(40);
    CHECK_THROWS_AS(make_adapter(ps, "a", 8, 2, /*enabled_deep=*/true, Regime::Shallow, rng),
                    ConfigError);
    nn::ParamStore ps2;
    Adapter deep = make_adapter(ps2, "a", 8, 2, true, Regime::Deep, rng);
    CHECK(deep.deep1.has_value());
}
