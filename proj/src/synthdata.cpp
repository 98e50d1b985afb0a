#include "dqd2v/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace dqd2v {

namespace fs = std::filesystem;

void UtteranceBatch::strip_labels() {
    language_ids.clear();
    phoneme_seqs.clear();
}

std::vector<idx> collapse_runs(const std::vector<idx>& frames) {
    std::vector<idx> out;
    idx prev = -1;
    for (idx p : frames) {
        if (p != prev) out.push_back(p);
        prev = p;
    }
    return out;
}

namespace {

// Per-language utterance counts proportional to the relative durations.
// Every language gets at least one utterance; rounding remainders go to the
// largest languages first.
std::vector<idx> utterance_counts(const CorpusSpec& spec) {
    const idx L = spec.num_languages;
    double total_hours = 0.0;
    for (double h : spec.hours_per_language) total_hours += h;
    std::vector<idx> counts(static_cast<std::size_t>(L), 0);
    idx assigned = 0;
    for (idx l = 0; l < L; ++l) {
        const double share = spec.hours_per_language[static_cast<std::size_t>(l)] / total_hours;
        counts[static_cast<std::size_t>(l)] =
            std::max<idx>(1, static_cast<idx>(std::floor(share * static_cast<double>(spec.total_utterances))));
        assigned += counts[static_cast<std::size_t>(l)];
    }
    std::vector<idx> order(static_cast<std::size_t>(L));
    for (idx l = 0; l < L; ++l) order[static_cast<std::size_t>(l)] = l;
    std::sort(order.begin(), order.end(), [&](idx a, idx b) {
        return spec.hours_per_language[static_cast<std::size_t>(a)] >
               spec.hours_per_language[static_cast<std::size_t>(b)];
    });
    idx i = 0;
    while (assigned < spec.total_utterances) {
        ++counts[static_cast<std::size_t>(order[static_cast<std::size_t>(i % static_cast<std::size_t>(L))])];
        ++assigned;
        ++i;
    }
    while (assigned > spec.total_utterances) {
        // trim from the largest language, never below 1
        for (idx l : order) {
            if (counts[static_cast<std::size_t>(l)] > 1) {
                --counts[static_cast<std::size_t>(l)];
                --assigned;
                break;
            }
        }
        if (assigned > spec.total_utterances &&
            std::all_of(counts.begin(), counts.end(), [](idx c) { return c <= 1; }))
            break;
    }
    return counts;
}

struct Prototypes {
    std::vector<Tensor> lang_offset;            // [L] x [F]
    std::vector<std::vector<Tensor>> phoneme;   // [L][P] x [F]
};

Prototypes build_prototypes(const CorpusSpec& spec) {
    Prototypes proto;
    const double fdim = static_cast<double>(spec.feature_dim);
    Rng rng = Rng::substream(spec.seed, 0);  // stream 0: prototypes
    proto.lang_offset.resize(static_cast<std::size_t>(spec.num_languages));
    for (idx l = 0; l < spec.num_languages; ++l) {
        Tensor t({spec.feature_dim});
        for (idx f = 0; f < spec.feature_dim; ++f)
            t[f] = rng.normal(0.0, spec.lang_scale / std::sqrt(fdim));
        proto.lang_offset[static_cast<std::size_t>(l)] = std::move(t);
    }
    // Shared prototypes model cross-lingual phonemes: the first
    // round(fraction * P) phonemes reuse one prototype across languages.
    const idx shared = static_cast<idx>(
        std::llround(spec.shared_phoneme_fraction * static_cast<double>(spec.num_phonemes)));
    std::vector<Tensor> shared_protos(static_cast<std::size_t>(spec.num_phonemes));
    for (idx p = 0; p < spec.num_phonemes; ++p) {
        Tensor t({spec.feature_dim});
        for (idx f = 0; f < spec.feature_dim; ++f)
            t[f] = rng.normal(0.0, spec.proto_scale / std::sqrt(fdim));
        shared_protos[static_cast<std::size_t>(p)] = std::move(t);
    }
    proto.phoneme.resize(static_cast<std::size_t>(spec.num_languages));
    for (idx l = 0; l < spec.num_languages; ++l) {
        auto& row = proto.phoneme[static_cast<std::size_t>(l)];
        row.resize(static_cast<std::size_t>(spec.num_phonemes));
        for (idx p = 0; p < spec.num_phonemes; ++p) {
            if (p < shared) {
                row[static_cast<std::size_t>(p)] = shared_protos[static_cast<std::size_t>(p)];
            } else {
                Tensor t({spec.feature_dim});
                for (idx f = 0; f < spec.feature_dim; ++f)
                    t[f] = rng.normal(0.0, spec.proto_scale / std::sqrt(fdim));
                row[static_cast<std::size_t>(p)] = std::move(t);
            }
        }
    }
    return proto;
}

Utterance generate_utterance(const CorpusSpec& spec, const Prototypes& proto, idx id,
                             idx language, bool high_resource) {
    Rng rng = Rng::substream(spec.seed, static_cast<std::uint64_t>(id) + 1);
    Utterance u;
    u.id = id;
    u.language_id = language;
    u.is_high_resource = high_resource;
    const idx T = spec.frames_min + rng.uniform_int(spec.frames_max - spec.frames_min + 1);
    u.features = Tensor({T, spec.feature_dim});
    u.phoneme_frames.resize(static_cast<std::size_t>(T));
    idx t = 0;
    while (t < T) {
        const idx phoneme = rng.uniform_int(spec.num_phonemes);
        idx span = spec.span_min + rng.uniform_int(spec.span_max - spec.span_min + 1);
        span = std::min(span, T - t);
        const Tensor& lp = proto.lang_offset[static_cast<std::size_t>(language)];
        const Tensor& pp = proto.phoneme[static_cast<std::size_t>(language)][static_cast<std::size_t>(phoneme)];
        for (idx s = 0; s < span; ++s, ++t) {
            u.phoneme_frames[static_cast<std::size_t>(t)] = phoneme;
            for (idx f = 0; f < spec.feature_dim; ++f)
                u.features.at(t, f) = lp[f] + pp[f] + rng.normal(0.0, spec.noise_std);
        }
    }
    u.phoneme_seq = collapse_runs(u.phoneme_frames);
    return u;
}

}  // namespace

std::vector<Utterance> generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    const Prototypes proto = build_prototypes(spec);
    const std::vector<idx> counts = utterance_counts(spec);
    const idx high = spec.resolved_high_resource();

    std::vector<idx> langs;
    langs.reserve(static_cast<std::size_t>(spec.total_utterances));
    for (idx l = 0; l < spec.num_languages; ++l)
        for (idx c = 0; c < counts[static_cast<std::size_t>(l)]; ++c) langs.push_back(l);

    std::vector<Utterance> corpus(langs.size());
    const idx n = static_cast<idx>(langs.size());
#pragma omp parallel for schedule(dynamic)
    for (idx i = 0; i < n; ++i) {
        const idx l = langs[static_cast<std::size_t>(i)];
        corpus[static_cast<std::size_t>(i)] =
            generate_utterance(spec, proto, i, l, l == high);
    }
    return corpus;
}

BalancedSampler::BalancedSampler(const std::vector<Utterance>& corpus, double alpha,
                                 std::uint64_t seed)
    : corpus_(&corpus), rng_(Rng::substream(seed, 0x5a4d)) {
    require(!corpus.empty(), "balanced_sampler: corpus is empty");
    require(alpha > 0.0 && alpha <= 1.0, "balanced_sampler: alpha must be in (0, 1]");
    idx max_lang = 0;
    for (const auto& u : corpus) max_lang = std::max(max_lang, u.language_id);
    by_language_.assign(static_cast<std::size_t>(max_lang + 1), {});
    for (idx i = 0; i < static_cast<idx>(corpus.size()); ++i)
        by_language_[static_cast<std::size_t>(corpus[static_cast<std::size_t>(i)].language_id)].push_back(i);

    const double total = static_cast<double>(corpus.size());
    double z = 0.0;
    probs_.resize(by_language_.size(), 0.0);
    for (std::size_t l = 0; l < by_language_.size(); ++l) {
        const double nl = static_cast<double>(by_language_[l].size());
        probs_[l] = nl > 0.0 ? std::pow(nl / total, alpha) : 0.0;
        z += probs_[l];
    }
    cdf_.resize(probs_.size());
    double acc = 0.0;
    for (std::size_t l = 0; l < probs_.size(); ++l) {
        probs_[l] /= z;
        acc += probs_[l];
        cdf_[l] = acc;
    }
    cdf_.back() = 1.0;
}

const Utterance& BalancedSampler::next() {
    const double x = rng_.uniform();
    std::size_t lang = 0;
    while (lang + 1 < cdf_.size() && x >= cdf_[lang]) ++lang;
    const auto& pool = by_language_[lang];
    const idx pick = pool[static_cast<std::size_t>(rng_.uniform_int(static_cast<idx>(pool.size())))];
    return (*corpus_)[static_cast<std::size_t>(pick)];
}

UtteranceBatch make_batch(const std::vector<const Utterance*>& utts, idx max_tokens,
                          idx* consumed) {
    require(!utts.empty(), "make_batch: no utterances");
    require(utts[0]->frames() <= max_tokens,
            "make_batch: utterance of " + std::to_string(utts[0]->frames()) +
                " frames exceeds max_tokens " + std::to_string(max_tokens));
    idx used = 0;
    idx total = 0;
    idx t_max = 0;
    for (const Utterance* u : utts) {
        if (total + u->frames() > max_tokens) break;
        total += u->frames();
        t_max = std::max(t_max, u->frames());
        ++used;
    }
    if (consumed) *consumed = used;

    const idx F = utts[0]->features.dim(1);
    UtteranceBatch batch;
    batch.features = Tensor({used, t_max, F});
    for (idx b = 0; b < used; ++b) {
        const Utterance& u = *utts[static_cast<std::size_t>(b)];
        require(u.features.dim(1) == F, "make_batch: feature_dim mismatch");
        batch.lengths.push_back(u.frames());
        batch.utterance_ids.push_back(u.id);
        batch.language_ids.push_back(u.language_id);
        batch.phoneme_seqs.push_back(u.phoneme_seq);
        batch.high_resource_mask.push_back(u.is_high_resource);
        for (idx t = 0; t < u.frames(); ++t)
            for (idx f = 0; f < F; ++f) batch.features.at(b, t, f) = u.features.at(t, f);
    }
    return batch;
}

// ------------------------------------------------------------- corpus I/O --

namespace {

constexpr char kTensorMagic[8] = {'D', 'Q', 'U', 'T', 'T', 'R', '0', '1'};

void write_utterance_file(const Utterance& u, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), "cannot write " + path);
    out.write(kTensorMagic, 8);
    const idx T = u.frames(), F = u.features.dim(1);
    out.write(reinterpret_cast<const char*>(&T), sizeof(T));
    out.write(reinterpret_cast<const char*>(&F), sizeof(F));
    out.write(reinterpret_cast<const char*>(u.features.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(T * F)));
    std::vector<std::int32_t> pf(u.phoneme_frames.begin(), u.phoneme_frames.end());
    out.write(reinterpret_cast<const char*>(pf.data()),
              static_cast<std::streamsize>(sizeof(std::int32_t) * pf.size()));
}

void read_utterance_file(Utterance& u, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), "cannot read " + path);
    char magic[8];
    in.read(magic, 8);
    require(in.good() && std::equal(magic, magic + 8, kTensorMagic),
            "bad utterance tensor file: " + path);
    idx T = 0, F = 0;
    in.read(reinterpret_cast<char*>(&T), sizeof(T));
    in.read(reinterpret_cast<char*>(&F), sizeof(F));
    require(in.good() && T >= 1 && F >= 1, "bad utterance tensor header: " + path);
    u.features = Tensor({T, F});
    in.read(reinterpret_cast<char*>(u.features.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(T * F)));
    std::vector<std::int32_t> pf(static_cast<std::size_t>(T));
    in.read(reinterpret_cast<char*>(pf.data()),
            static_cast<std::streamsize>(sizeof(std::int32_t) * pf.size()));
    require(in.good(), "truncated utterance tensor file: " + path);
    u.phoneme_frames.assign(pf.begin(), pf.end());
}

}  // namespace

void export_corpus(const std::vector<Utterance>& corpus, const std::string& dir) {
    fs::create_directories(dir);
    std::ofstream manifest(fs::path(dir) / "manifest.tsv");
    require(static_cast<bool>(manifest), "cannot write manifest in " + dir);
    manifest << "id\tlength\tlanguage_id\thigh_resource\tphoneme_seq\n";
    for (const Utterance& u : corpus) {
        char name[32];
        std::snprintf(name, sizeof(name), "utt_%06lld.bin", static_cast<long long>(u.id));
        write_utterance_file(u, (fs::path(dir) / name).string());
        manifest << u.id << '\t' << u.frames() << '\t' << u.language_id << '\t'
                 << (u.is_high_resource ? 1 : 0) << '\t';
        for (std::size_t i = 0; i < u.phoneme_seq.size(); ++i) {
            if (i) manifest << ' ';
            manifest << u.phoneme_seq[i];
        }
        manifest << '\n';
    }
}

std::vector<Utterance> import_corpus(const std::string& dir) {
    std::ifstream manifest(fs::path(dir) / "manifest.tsv");
    require(static_cast<bool>(manifest), "cannot read manifest in " + dir);
    std::string line;
    std::getline(manifest, line);  // header
    std::vector<Utterance> corpus;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        Utterance u;
        idx length = 0;
        int high = 0;
        std::string seq;
        is >> u.id >> length >> u.language_id >> high;
        std::getline(is, seq);
        u.is_high_resource = high != 0;
        std::istringstream seq_is(seq);
        idx p;
        while (seq_is >> p) u.phoneme_seq.push_back(p);
        char name[32];
        std::snprintf(name, sizeof(name), "utt_%06lld.bin", static_cast<long long>(u.id));
        read_utterance_file(u, (fs::path(dir) / name).string());
        require(u.frames() == length, "manifest length mismatch for utterance " +
                                          std::to_string(u.id));
        require(collapse_runs(u.phoneme_frames) == u.phoneme_seq,
                "manifest phoneme_seq does not match frame labels for utterance " +
                    std::to_string(u.id));
        corpus.push_back(std::move(u));
    }
    require(!corpus.empty(), "imported corpus is empty: " + dir);
    return corpus;
}

}  // namespace dqd2v
