#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "dqd2v/analysis.hpp"
#include "dqd2v/rng.hpp"

using namespace dqd2v;

namespace {

CooccurrenceMatrix from_rows(const std::vector<std::vector<idx>>& rows) {
    CooccurrenceMatrix m;
    m.num_codes = static_cast<idx>(rows.size());
    m.num_labels = static_cast<idx>(rows[0].size());
    m.counts.assign(static_cast<std::size_t>(m.num_codes * m.num_labels), 0);
    m.groups = 1;
    m.codewords = m.num_codes;
    m.group_usage.assign(static_cast<std::size_t>(m.num_codes), 0);
    for (idx c = 0; c < m.num_codes; ++c)
        for (idx l = 0; l < m.num_labels; ++l) {
            const idx n = rows[static_cast<std::size_t>(c)][static_cast<std::size_t>(l)];
            m.counts[static_cast<std::size_t>(c * m.num_labels + l)] = n;
            m.total += n;
            m.group_usage[static_cast<std::size_t>(c)] += n;
        }
    return m;
}

// independent oracle: entropies computed from scratch
double nmi_oracle(const CooccurrenceMatrix& m) {
    const double total = static_cast<double>(m.total);
    double h_code = 0, h_label = 0, h_joint = 0;
    for (idx c = 0; c < m.num_codes; ++c) {
        double rc = 0;
        for (idx l = 0; l < m.num_labels; ++l) rc += static_cast<double>(m.at(c, l));
        if (rc > 0) h_code -= rc / total * std::log(rc / total);
    }
    for (idx l = 0; l < m.num_labels; ++l) {
        double cl = 0;
        for (idx c = 0; c < m.num_codes; ++c) cl += static_cast<double>(m.at(c, l));
        if (cl > 0) h_label -= cl / total * std::log(cl / total);
    }
    for (idx c = 0; c < m.num_codes; ++c)
        for (idx l = 0; l < m.num_labels; ++l)
            if (m.at(c, l) > 0) {
                const double p = static_cast<double>(m.at(c, l)) / total;
                h_joint -= p * std::log(p);
            }
    const double mi = h_code + h_label - h_joint;
    return h_label == 0.0 ? 0.0 : mi / h_label;
}

double purity_oracle(const CooccurrenceMatrix& m) {
    double s = 0;
    for (idx c = 0; c < m.num_codes; ++c) {
        idx best = 0;
        for (idx l = 0; l < m.num_labels; ++l) best = std::max(best, m.at(c, l));
        s += static_cast<double>(best);
    }
    return s / static_cast<double>(m.total);
}

}  // namespace

TEST_CASE("purity: fixtures and merge-monotonicity") {
    CHECK(purity(from_rows({{5, 0}, {0, 7}})) == doctest::Approx(1.0));
    CHECK(purity(from_rows({{5, 5}, {5, 5}})) == doctest::Approx(0.5));

    // merging two codes never increases purity (random 4x3 matrices)
    Rng rng(91);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::vector<idx>> rows(4, std::vector<idx>(3));
        for (auto& r : rows)
            for (auto& v : r) v = rng.uniform_int(9);
        CooccurrenceMatrix m = from_rows(rows);
        if (m.total == 0) continue;
        const double p = purity(m);
        for (idx a = 0; a < 4; ++a)
            for (idx b = a + 1; b < 4; ++b) {
                std::vector<std::vector<idx>> merged;
                for (idx c = 0; c < 4; ++c) {
                    if (c == b) continue;
                    merged.push_back(rows[static_cast<std::size_t>(c)]);
                    if (c == a)
                        for (idx l = 0; l < 3; ++l)
                            merged.back()[static_cast<std::size_t>(l)] +=
                                rows[static_cast<std::size_t>(b)][static_cast<std::size_t>(l)];
                }
                CHECK(purity(from_rows(merged)) <= p + 1e-12);
            }
    }
}

TEST_CASE("nmi: bijective is 1, independent is 0, oracle equivalence") {
    CHECK(nmi(from_rows({{4, 0, 0}, {0, 9, 0}, {0, 0, 2}})) == doctest::Approx(1.0));
    // product of marginals: counts c_i * l_j
    CHECK(std::abs(nmi(from_rows({{2, 4, 6}, {4, 8, 12}}))) < 1e-12);
    // [[3,1],[1,3]] against the independent entropy oracle
    CooccurrenceMatrix m = from_rows({{3, 1}, {1, 3}});
    CHECK(nmi(m) == doctest::Approx(nmi_oracle(m)).epsilon(1e-12));

    Rng rng(92);
    for (int trial = 0; trial < 300; ++trial) {
        const idx C = 1 + rng.uniform_int(10), L = 1 + rng.uniform_int(10);
        std::vector<std::vector<idx>> rows(static_cast<std::size_t>(C),
                                           std::vector<idx>(static_cast<std::size_t>(L)));
        bool any = false;
        for (auto& r : rows)
            for (auto& v : r) {
                v = rng.uniform_int(6);
                any = any || v > 0;
            }
        if (!any) rows[0][0] = 1;
        CooccurrenceMatrix mm = from_rows(rows);
        const double v = nmi(mm);
        CHECK(v >= -1e-12);
        CHECK(v <= 1.0 + 1e-12);
        CHECK(v == doctest::Approx(nmi_oracle(mm)).epsilon(1e-12));
        CHECK(purity(mm) == doctest::Approx(purity_oracle(mm)).epsilon(1e-12));
    }
}

TEST_CASE("metric report: ACN/AGN consistency") {
    RunConfig rc = micro_config();
    auto corpus = generate_corpus(rc.corpus);
    Model model(rc.model, Regime::Shallow, 17);
    CooccurrenceMatrix m = collect_counts(model, corpus, Level::Phoneme, 512);
    MetricReport rep = metric_report(m);

    std::set<idx> joint_seen;
    for (idx c = 0; c < m.num_codes; ++c) {
        idx rowsum = 0;
        for (idx l = 0; l < m.num_labels; ++l) rowsum += m.at(c, l);
        if (rowsum > 0) joint_seen.insert(c);
    }
    CHECK(rep.acn == static_cast<idx>(joint_seen.size()));
    REQUIRE(rep.agn.size() == 2);
    CHECK(rep.acn <= rep.agn[0] * rep.agn[1]);
    for (idx g = 0; g < m.groups; ++g) {
        idx used = 0;
        for (idx j = 0; j < m.codewords; ++j)
            if (m.group_usage[static_cast<std::size_t>(g * m.codewords + j)] > 0) ++used;
        CHECK(rep.agn[static_cast<std::size_t>(g)] == used);
    }
}

TEST_CASE("collect_counts: conservation and reproducibility") {
    RunConfig rc = micro_config();
    auto corpus = generate_corpus(rc.corpus);
    Model model(rc.model, Regime::Shallow, 18);

    // language level: one count per utterance
    CooccurrenceMatrix ml = collect_counts(model, corpus, Level::Language, 512);
    CHECK(ml.total == static_cast<idx>(corpus.size()));

    // phoneme level: one count per post-conv frame
    CooccurrenceMatrix mp = collect_counts(model, corpus, Level::Phoneme, 512);
    idx frames = 0;
    for (const auto& u : corpus) frames += rc.model.conv_out_len(u.frames());
    CHECK(mp.total == frames);

    // two passes agree exactly
    CooccurrenceMatrix mp2 = collect_counts(model, corpus, Level::Phoneme, 512);
    CHECK(mp.counts == mp2.counts);

    // single utterance at the language level -> exactly one count
    std::vector<Utterance> one{corpus[0]};
    CooccurrenceMatrix m1 = collect_counts(model, one, Level::Language, 512);
    CHECK(m1.total == 1);
}

TEST_CASE("per-language metrics: single-language equals global, counts partition") {
    RunConfig rc = micro_config();
    auto corpus = generate_corpus(rc.corpus);
    Model model(rc.model, Regime::Shallow, 19);

    auto reports = per_language_metrics(model, corpus, rc.corpus.num_languages, 512);
    REQUIRE(static_cast<idx>(reports.size()) == rc.corpus.num_languages);

    std::vector<Utterance> lang0;
    for (const auto& u : corpus)
        if (u.language_id == 0) lang0.push_back(u);
    CooccurrenceMatrix m0 = collect_counts(model, lang0, Level::Phoneme, 512);
    CHECK(reports[0].purity == doctest::Approx(purity(m0)).epsilon(1e-12));
    CHECK(reports[0].nmi == doctest::Approx(nmi(m0)).epsilon(1e-12));

    idx partition_total = 0;
    for (idx l = 0; l < rc.corpus.num_languages; ++l) {
        std::vector<Utterance> sub;
        for (const auto& u : corpus)
            if (u.language_id == l) sub.push_back(u);
        partition_total += collect_counts(model, sub, Level::Phoneme, 512).total;
    }
    CHECK(partition_total == collect_counts(model, corpus, Level::Phoneme, 512).total);
}

TEST_CASE("conditional report: columns normalize, inactive codes omitted, stable order") {
    CooccurrenceMatrix m = from_rows({{8, 2}, {0, 0}, {1, 9}, {5, 5}});
    const std::string path = "/tmp/dqd2v_heatmap_test.tsv";
    write_conditional_report(m, path);
    std::ifstream in(path);
    REQUIRE(static_cast<bool>(in));
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(in, line)) lines.push_back(line);
    // header comments then label row then 2 label lines
    CHECK(lines[0].rfind("# level=", 0) == 0);
    CHECK(lines[1] == "# ACN=3");

    // parse the matrix: columns are codes, cells P(label | code)
    std::istringstream hdr(lines[5]);
    std::string tok;
    hdr >> tok;  // "label"
    std::vector<idx> codes;
    while (hdr >> tok) codes.push_back(std::stoll(tok));
    CHECK(codes.size() == 3);                      // code 1 is inactive
    for (idx c : codes) CHECK(c != 1);
    // tie-break by code index: code 3 (5,5 -> argmax label 0) sorts after code 0
    std::vector<std::vector<double>> cells;
    for (std::size_t r = 6; r < lines.size(); ++r) {
        std::istringstream row(lines[r]);
        row >> tok;
        std::vector<double> vals;
        double v;
        while (row >> v) vals.push_back(v);
        cells.push_back(vals);
    }
    REQUIRE(cells.size() == 2);
    for (std::size_t c = 0; c < codes.size(); ++c)
        CHECK(cells[0][c] + cells[1][c] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("greedy decode and token error rate") {
    // frames [a, a, blank, a] -> "aa"
    Tensor logits({1, 4, 2});
    auto set_best = [&](idx t, idx v) {
        for (idx k = 0; k < 2; ++k) logits.at(0, t, k) = k == v ? 2.0 : 0.0;
    };
    set_best(0, 1);
    set_best(1, 1);
    set_best(2, 0);
    set_best(3, 1);
    auto hyps = greedy_ctc_decode(logits, {4});
    CHECK(hyps[0] == std::vector<idx>{1, 1});

    CHECK(token_error_rate({1, 2}, {1, 2}) == 0.0);
    CHECK(token_error_rate({1, 2}, {1, 2, 3}) == doctest::Approx(1.0 / 3.0));
    CHECK(edit_distance({1, 2, 3}, {2, 3, 4}) == 2);
    CHECK(edit_distance({}, {1, 2}) == 2);
}

TEST_CASE("label downsampling: majority vote per receptive window") {
    ModelConfig cfg = micro_config().model;  // one conv layer, kernel 2 stride 2
    std::vector<idx> labels{0, 0, 1, 1, 2, 2, 2, 3};
    auto ds = downsample_labels(labels, cfg);
    CHECK(static_cast<idx>(ds.size()) == cfg.conv_out_len(8));
    // window [0,2) -> 0; [2,4) -> 1; [4,6) -> 2; [6,8) -> majority of {2,3} -> 2 (tie, smaller)
    CHECK(ds == std::vector<idx>{0, 1, 2, 2});
}
