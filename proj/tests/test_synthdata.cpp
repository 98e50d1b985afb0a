#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "dqd2v/synthdata.hpp"

using namespace dqd2v;

namespace {

CorpusSpec small_spec() {
    CorpusSpec s;
    s.num_languages = 2;
    s.num_phonemes = 4;
    s.hours_per_language = {2.0, 1.0};
    s.total_utterances = 60;
    s.frames_min = 10;
    s.frames_max = 20;
    s.feature_dim = 8;
    s.span_min = 2;
    s.span_max = 4;
    s.noise_std = 0.2;
    s.seed = 99;
    return s;
}

// chi-square critical values at p = 0.01 for df = 1..8
constexpr double kChi2Crit[] = {6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475, 20.090};

}  // namespace

TEST_CASE("generate_corpus is deterministic given (spec, seed)") {
    CorpusSpec spec = small_spec();
    auto a = generate_corpus(spec);
    auto b = generate_corpus(spec);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].features.equal_data(b[i].features));
        CHECK(a[i].language_id == b[i].language_id);
        CHECK(a[i].phoneme_frames == b[i].phoneme_frames);
        CHECK(a[i].phoneme_seq == b[i].phoneme_seq);
        CHECK(a[i].is_high_resource == b[i].is_high_resource);
    }
    spec.seed = 100;
    auto c = generate_corpus(spec);
    bool any_diff = false;
    for (std::size_t i = 0; i < std::min(a.size(), c.size()); ++i)
        if (!a[i].features.equal_data(c[i].features)) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("zero noise makes same (language, phoneme) frames identical") {
    CorpusSpec spec = small_spec();
    spec.noise_std = 0.0;
    spec.shared_phoneme_fraction = 0.0;
    auto corpus = generate_corpus(spec);
    // collect one reference frame per (language, phoneme) and compare all others
    std::map<std::pair<idx, idx>, std::vector<double>> ref;
    for (const auto& u : corpus) {
        for (idx t = 0; t < u.frames(); ++t) {
            const idx p = u.phoneme_frames[static_cast<std::size_t>(t)];
            std::vector<double> frame(static_cast<std::size_t>(spec.feature_dim));
            for (idx f = 0; f < spec.feature_dim; ++f)
                frame[static_cast<std::size_t>(f)] = u.features.at(t, f);
            auto key = std::make_pair(u.language_id, p);
            auto it = ref.find(key);
            if (it == ref.end()) {
                ref[key] = frame;
            } else {
                CHECK(it->second == frame);
            }
        }
    }

    CorpusSpec bad = spec;
    bad.num_languages = 1;
    bad.hours_per_language = {1.0};
    CHECK_THROWS_AS(generate_corpus(bad), ConfigError);
    CorpusSpec neg = spec;
    neg.noise_std = -0.1;
    CHECK_THROWS_AS(generate_corpus(neg), ConfigError);
}

TEST_CASE("utterance counts follow relative durations") {
    CorpusSpec spec = small_spec();
    spec.hours_per_language = {2.0, 1.0};
    spec.total_utterances = 90;
    auto corpus = generate_corpus(spec);
    idx n0 = 0, n1 = 0;
    for (const auto& u : corpus) (u.language_id == 0 ? n0 : n1)++;
    CHECK(n0 + n1 == 90);
    CHECK(std::abs(static_cast<double>(n0) / static_cast<double>(n1) - 2.0) < 0.1);
    // the largest language is flagged high-resource, exactly once
    for (const auto& u : corpus) CHECK(u.is_high_resource == (u.language_id == 0));
}

TEST_CASE("phoneme_seq always equals collapsed phoneme_frames") {
    auto corpus = generate_corpus(small_spec());
    for (const auto& u : corpus) CHECK(collapse_runs(u.phoneme_frames) == u.phoneme_seq);
    CHECK(collapse_runs({1, 1, 2, 2, 2, 1}) == std::vector<idx>{1, 2, 1});
}

TEST_CASE("balanced sampler: 100:1 hours at alpha 0.5 gives ~10:1 draws") {
    CorpusSpec spec = small_spec();
    spec.hours_per_language = {100.0, 1.0};
    spec.total_utterances = 101;
    auto corpus = generate_corpus(spec);
    BalancedSampler sampler(corpus, 0.5, 7);
    idx n0 = 0, n1 = 0;
    const idx draws = 100000;
    for (idx i = 0; i < draws; ++i)
        (sampler.next().language_id == 0 ? n0 : n1)++;
    const double ratio = static_cast<double>(n0) / static_cast<double>(n1);
    CHECK(ratio == doctest::Approx(10.0).epsilon(0.02));
}

TEST_CASE("balanced sampler: degenerate and uniform cases") {
    // single-language corpus (constructed directly) -> probability 1
    auto corpus = generate_corpus(small_spec());
    std::vector<Utterance> mono;
    for (const auto& u : corpus)
        if (u.language_id == 0) mono.push_back(u);
    BalancedSampler ms(mono, 0.5, 3);
    for (int i = 0; i < 200; ++i) CHECK(ms.next().language_id == 0);

    std::vector<Utterance> empty;
    CHECK_THROWS(BalancedSampler(empty, 0.5, 3));
    CHECK_THROWS(BalancedSampler(corpus, 0.0, 3));

    // equal hours -> uniform over languages (chi-square at p > 0.01)
    CorpusSpec eq = small_spec();
    eq.num_languages = 4;
    eq.num_phonemes = 4;
    eq.hours_per_language = {1.0, 1.0, 1.0, 1.0};
    eq.total_utterances = 80;
    auto eq_corpus = generate_corpus(eq);
    BalancedSampler es(eq_corpus, 0.5, 11);
    std::vector<idx> counts(4, 0);
    const idx draws = 100000;
    for (idx i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(es.next().language_id)];
    double chi2 = 0.0;
    const double expected = static_cast<double>(draws) / 4.0;
    for (idx c : counts) {
        const double d = static_cast<double>(c) - expected;
        chi2 += d * d / expected;
    }
    CHECK(chi2 < kChi2Crit[2]);  // df = 3
}

TEST_CASE("balance law: frequencies converge to normalized (n_l/N)^0.5") {
    CorpusSpec spec = small_spec();
    spec.num_languages = 4;
    spec.num_phonemes = 4;
    spec.hours_per_language = {4.0, 2.0, 1.0, 1.0};
    spec.total_utterances = 160;
    auto corpus = generate_corpus(spec);
    std::vector<double> n_l(4, 0.0);
    for (const auto& u : corpus) n_l[static_cast<std::size_t>(u.language_id)] += 1.0;
    std::vector<double> target(4);
    double z = 0.0;
    for (int l = 0; l < 4; ++l) {
        target[static_cast<std::size_t>(l)] =
            std::sqrt(n_l[static_cast<std::size_t>(l)] / static_cast<double>(corpus.size()));
        z += target[static_cast<std::size_t>(l)];
    }
    for (auto& t : target) t /= z;

    BalancedSampler sampler(corpus, 0.5, 21);
    std::vector<idx> counts(4, 0);
    const idx draws = 100000;
    for (idx i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(sampler.next().language_id)];
    double chi2 = 0.0;
    for (int l = 0; l < 4; ++l) {
        const double expected = target[static_cast<std::size_t>(l)] * static_cast<double>(draws);
        const double d = static_cast<double>(counts[static_cast<std::size_t>(l)]) - expected;
        chi2 += d * d / expected;
    }
    CHECK(chi2 < kChi2Crit[2]);
}

TEST_CASE("make_batch: padding contract and packing oracle") {
    auto corpus = generate_corpus(small_spec());
    // hand-built utterances of lengths 5 and 3
    Utterance a, b;
    a.id = 0;
    a.features = Tensor::full({5, 2}, 1.0);
    a.phoneme_frames = {0, 0, 0, 0, 0};
    a.phoneme_seq = {0};
    b.id = 1;
    b.features = Tensor::full({3, 2}, 2.0);
    b.phoneme_frames = {1, 1, 1};
    b.phoneme_seq = {1};
    UtteranceBatch batch = make_batch({&a, &b}, 100);
    CHECK(batch.features.dim(1) == 5);
    CHECK(batch.lengths == std::vector<idx>{5, 3});
    for (idx t = 3; t < 5; ++t)
        for (idx f = 0; f < 2; ++f) CHECK(batch.features.at(1, t, f) == 0.0);
    for (idx t = 0; t < 3; ++t)
        for (idx f = 0; f < 2; ++f) CHECK(batch.features.at(1, t, f) == 2.0);

    UtteranceBatch single = make_batch({&a}, 100);
    CHECK(single.lengths == std::vector<idx>{5});
    CHECK(single.features.dim(1) == 5);

    CHECK_THROWS(make_batch({&a}, 4));  // longer than max_tokens

    // greedy packing oracle: consumed must equal the longest feasible prefix
    std::vector<const Utterance*> ptrs;
    for (const auto& u : corpus) ptrs.push_back(&u);
    for (idx budget : {30, 55, 100, 200}) {
        idx consumed = 0;
        UtteranceBatch packed = make_batch(ptrs, budget, &consumed);
        idx total = 0;
        idx oracle = 0;
        for (const auto* u : ptrs) {
            if (total + u->frames() > budget) break;
            total += u->frames();
            ++oracle;
        }
        CHECK(consumed == oracle);
        CHECK(packed.size() == oracle);
        idx packed_frames = 0;
        for (idx len : packed.lengths) packed_frames += len;
        CHECK(packed_frames <= budget);
        // order preserved
        for (idx i = 0; i < packed.size(); ++i)
            CHECK(packed.utterance_ids[static_cast<std::size_t>(i)] ==
                  ptrs[static_cast<std::size_t>(i)]->id);
    }
}

TEST_CASE("corpus export/import round trip is exact") {
    auto corpus = generate_corpus(small_spec());
    const std::string dir = "/tmp/dqd2v_test_corpus";
    std::filesystem::remove_all(dir);
    export_corpus(corpus, dir);
    auto loaded = import_corpus(dir);
    REQUIRE(loaded.size() == corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        CHECK(loaded[i].id == corpus[i].id);
        CHECK(loaded[i].features.equal_data(corpus[i].features));
        CHECK(loaded[i].language_id == corpus[i].language_id);
        CHECK(loaded[i].phoneme_frames == corpus[i].phoneme_frames);
        CHECK(loaded[i].phoneme_seq == corpus[i].phoneme_seq);
        CHECK(loaded[i].is_high_resource == corpus[i].is_high_resource);
    }
    std::filesystem::remove_all(dir);
}
