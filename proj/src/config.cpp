#include "dqd2v/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

namespace dqd2v {

using nlohmann::json;

std::string to_string(Regime r) { return r == Regime::Shallow ? "shallow" : "deep"; }
std::string to_string(QuantizerType q) {
    return q == QuantizerType::KMeans ? "kmeans" : "gumbel";
}
std::string to_string(LevelNorm n) { return n == LevelNorm::L2 ? "l2" : "instance"; }
std::string to_string(TeacherPathBlock b) {
    switch (b) {
        case TeacherPathBlock::None: return "none";
        case TeacherPathBlock::Transformer: return "transformer";
        default: return "cnn";
    }
}

namespace {

Regime regime_from(const std::string& s) {
    if (s == "shallow") return Regime::Shallow;
    if (s == "deep") return Regime::Deep;
    throw ConfigError("unknown regime: " + s);
}
QuantizerType qt_from(const std::string& s) {
    if (s == "kmeans") return QuantizerType::KMeans;
    if (s == "gumbel") return QuantizerType::Gumbel;
    throw ConfigError("unknown quantizer type: " + s);
}
LevelNorm norm_from(const std::string& s) {
    if (s == "l2") return LevelNorm::L2;
    if (s == "instance") return LevelNorm::Instance;
    throw ConfigError("unknown norm: " + s);
}
TeacherPathBlock block_from(const std::string& s) {
    if (s == "none") return TeacherPathBlock::None;
    if (s == "transformer") return TeacherPathBlock::Transformer;
    if (s == "cnn") return TeacherPathBlock::Cnn;
    throw ConfigError("unknown teacher path block: " + s);
}

// Strict object reader: every present key must be consumed.
class Section {
public:
    Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
        if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    }

    template <typename T>
    void get(const char* key, T& target) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            target = it->get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("config key '" + name_ + "." + key + "': " + e.what());
        }
    }

    void get_enum(const char* key, Regime& t) { get_str(key, [&](const std::string& s) { t = regime_from(s); }); }
    void get_enum(const char* key, QuantizerType& t) { get_str(key, [&](const std::string& s) { t = qt_from(s); }); }
    void get_enum(const char* key, LevelNorm& t) { get_str(key, [&](const std::string& s) { t = norm_from(s); }); }
    void get_enum(const char* key, TeacherPathBlock& t) { get_str(key, [&](const std::string& s) { t = block_from(s); }); }

    const json* sub(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError("unknown config key '" + name_ + "." + it.key() + "'");
    }

private:
    template <typename F>
    void get_str(const char* key, F&& f) {
        std::string s;
        bool present = j_.contains(key);
        get(key, s);
        if (present) f(s);
    }

    const json& j_;
    std::string name_;
    std::set<std::string> seen_;
};

}  // namespace

// ------------------------------------------------------------- validation --

void CorpusSpec::validate() const {
    require_config(num_languages >= 2, "corpus: num_languages must be >= 2");
    require_config(num_phonemes >= num_languages, "corpus: num_phonemes must be >= num_languages");
    require_config(static_cast<idx>(hours_per_language.size()) == num_languages,
                   "corpus: hours_per_language size must equal num_languages");
    for (double h : hours_per_language)
        require_config(h > 0.0, "corpus: hours_per_language entries must be positive");
    require_config(frames_min >= 1 && frames_max >= frames_min, "corpus: bad frame range");
    require_config(feature_dim >= 1, "corpus: feature_dim must be >= 1");
    require_config(span_min >= 1 && span_max >= span_min, "corpus: bad phoneme span range");
    require_config(noise_std >= 0.0, "corpus: noise_std must be >= 0");
    require_config(total_utterances >= num_languages,
                   "corpus: total_utterances must cover every language");
    require_config(shared_phoneme_fraction >= 0.0 && shared_phoneme_fraction <= 1.0,
                   "corpus: shared_phoneme_fraction must be in [0,1]");
    require_config(high_resource_language >= -1 && high_resource_language < num_languages,
                   "corpus: bad high_resource_language index");
}

idx CorpusSpec::resolved_high_resource() const {
    if (high_resource_language >= 0) return high_resource_language;
    idx best = 0;
    for (idx l = 1; l < num_languages; ++l)
        if (hours_per_language[static_cast<std::size_t>(l)] >
            hours_per_language[static_cast<std::size_t>(best)])
            best = l;
    return best;
}

idx ModelConfig::x_l_layer() const {
    return *std::max_element(y_l_layers.begin(), y_l_layers.end());
}
idx ModelConfig::x_p_layer() const {
    return *std::max_element(y_p_layers.begin(), y_p_layers.end());
}

idx ModelConfig::conv_out_len(idx in_len) const {
    idx len = in_len;
    for (const auto& c : conv_layers) {
        if (len < c.kernel) return 0;
        len = (len - c.kernel) / c.stride + 1;
    }
    return len;
}

idx ModelConfig::min_input_len() const {
    // Smallest input producing one output frame: receptive field of the stack.
    idx r = 1;
    for (auto it = conv_layers.rbegin(); it != conv_layers.rend(); ++it)
        r = (r - 1) * it->stride + it->kernel;
    return r;
}

idx ModelConfig::total_stride() const {
    idx s = 1;
    for (const auto& c : conv_layers) s *= c.stride;
    return s;
}

void ModelConfig::validate() const {
    require_config(!conv_layers.empty(), "model: conv_layers must be non-empty");
    for (const auto& c : conv_layers)
        require_config(c.channels >= 1 && c.kernel >= 1 && c.stride >= 1,
                       "model: bad conv layer spec");
    require_config(num_layers >= 1, "model: num_layers must be >= 1");
    require_config(model_dim >= 1 && inner_dim >= 1, "model: bad dims");
    require_config(heads >= 1 && model_dim % heads == 0, "model: heads must divide model_dim");
    require_config(top_k >= 1 && top_k <= num_layers, "model: top_k must be in [1, L]");
    auto check_layers = [&](const std::vector<idx>& ls, const char* what) {
        require_config(!ls.empty(), std::string("model: ") + what + " must be non-empty");
        for (idx l : ls)
            require_config(l >= 1 && l <= num_layers,
                           std::string("model: ") + what + " indices must be in [1, L]");
    };
    check_layers(y_l_layers, "y_l_layers");
    check_layers(y_p_layers, "y_p_layers");
    require_config(mask_prob > 0.0 && mask_prob < 1.0,
                   "model: mask_prob must be in (0, 1)");
    require_config(mask_span >= 1, "model: mask_span must be >= 1");
    require_config(sl1_beta > 0.0, "model: sl1_beta must be positive");
    require_config(pos_conv_kernel >= 1 && pos_conv_kernel % 2 == 1,
                   "model: pos_conv_kernel must be odd");
    require_config(pos_conv_groups >= 1 && model_dim % pos_conv_groups == 0,
                   "model: pos_conv_groups must divide model_dim");
    require_config(groups >= 1 && model_dim % groups == 0,
                   "model: quantizer groups must divide model_dim");
    require_config(lqt_enabled || pqt_enabled, "model: at least one quantizer must be enabled");
    require_config(gumbel_temperature > 0.0, "model: gumbel_temperature must be positive");
}

void LossWeights::validate() const {
    require_config(gamma1 >= 0.0 && gamma2 >= 0.0 && gamma3 > 0.0 && gamma_km > 0.0 &&
                       kappa > 0.0,
                   "weights: loss weights must be positive");
    require_config(gamma1 + gamma2 < 1.0, "weights: gamma1 + gamma2 must be < 1");
    require_config(gamma_km != 1.0, "weights: gamma_km must not be 1.0");
}

void TrainConfig::validate() const {
    require_config(total_updates >= 0, "train: total_updates must be >= 0");
    require_config(lr_peak > 0.0 && lr_end >= 0.0, "train: bad learning rates");
    require_config(std::abs(warm_pct + hold_pct + decay_pct - 100.0) < 1e-9,
                   "train: tri-stage percentages must sum to 100");
    require_config(warm_pct >= 0 && hold_pct >= 0 && decay_pct >= 0,
                   "train: tri-stage percentages must be nonnegative");
    require_config(max_tokens >= 1, "train: max_tokens must be >= 1");
    require_config(eval_every >= 1, "train: eval_every must be >= 1");
    require_config(collapse_consecutive >= 1, "train: collapse_consecutive must be >= 1");
    require_config(balance_alpha > 0.0 && balance_alpha <= 1.0,
                   "train: balance_alpha must be in (0, 1]");
    require_config(tau_start >= 0.0 && tau_start <= 1.0 && tau_end >= 0.0 && tau_end <= 1.0,
                   "train: tau must be in [0, 1]");
    require_config(tau_anneal_frac >= 0.0 && tau_anneal_frac <= 1.0,
                   "train: tau_anneal_frac must be in [0, 1]");
    require_config(n_neg_phoneme >= 1, "train: n_neg_phoneme must be >= 1");
    weights.validate();
}

void FinetuneConfig::validate() const {
    require_config(total_updates >= 1, "finetune: total_updates must be >= 1");
    require_config(freeze_updates >= 0 && freeze_updates < total_updates,
                   "finetune: freeze_updates must be < total_updates");
    require_config(lr > 0.0, "finetune: lr must be positive");
    require_config(unit == "phoneme" || unit == "character-analogue",
                   "finetune: unit must be 'phoneme' or 'character-analogue'");
    require_config(holdout_fraction > 0.0 && holdout_fraction < 1.0,
                   "finetune: holdout_fraction must be in (0, 1)");
    require_config(max_tokens >= 1, "finetune: max_tokens must be >= 1");
}

void RunConfig::resolve() {
    if (model.num_codewords_l < 0) model.num_codewords_l = corpus.num_languages;
    if (model.num_codewords_p < 0) model.num_codewords_p = corpus.num_phonemes;
    if (model.feature_dim != corpus.feature_dim) model.feature_dim = corpus.feature_dim;
}

void RunConfig::validate() const {
    require_config(config_version == 1, "config_version must be 1");
    corpus.validate();
    model.validate();
    train.validate();
    finetune.validate();
    require_config(model.feature_dim == corpus.feature_dim,
                   "model.feature_dim must match corpus.feature_dim");
    // Cluster counts track the label inventory they are meant to decouple.
    require_config(model.num_codewords_l == corpus.num_languages,
                   "language codebook size must equal num_languages");
    require_config(model.num_codewords_p == corpus.num_phonemes,
                   "phoneme codebook size must equal num_phonemes");
    require_config(model.conv_out_len(corpus.frames_min) >= 1,
                   "shortest utterance is below the conv receptive field");
}

// ------------------------------------------------------------------- JSON --

namespace {

json corpus_to_json(const CorpusSpec& c) {
    return json{{"num_languages", c.num_languages},
                {"num_phonemes", c.num_phonemes},
                {"hours_per_language", c.hours_per_language},
                {"total_utterances", c.total_utterances},
                {"frames_min", c.frames_min},
                {"frames_max", c.frames_max},
                {"feature_dim", c.feature_dim},
                {"span_min", c.span_min},
                {"span_max", c.span_max},
                {"noise_std", c.noise_std},
                {"lang_scale", c.lang_scale},
                {"proto_scale", c.proto_scale},
                {"shared_phoneme_fraction", c.shared_phoneme_fraction},
                {"high_resource_language", c.high_resource_language},
                {"seed", c.seed}};
}

CorpusSpec corpus_from_json(const json& j) {
    CorpusSpec c;
    Section s(j, "corpus");
    s.get("num_languages", c.num_languages);
    s.get("num_phonemes", c.num_phonemes);
    s.get("hours_per_language", c.hours_per_language);
    s.get("total_utterances", c.total_utterances);
    s.get("frames_min", c.frames_min);
    s.get("frames_max", c.frames_max);
    s.get("feature_dim", c.feature_dim);
    s.get("span_min", c.span_min);
    s.get("span_max", c.span_max);
    s.get("noise_std", c.noise_std);
    s.get("lang_scale", c.lang_scale);
    s.get("proto_scale", c.proto_scale);
    s.get("shared_phoneme_fraction", c.shared_phoneme_fraction);
    s.get("high_resource_language", c.high_resource_language);
    s.get("seed", c.seed);
    s.finish();
    return c;
}

json model_to_json(const ModelConfig& m) {
    json convs = json::array();
    for (const auto& c : m.conv_layers)
        convs.push_back(json::array({c.channels, c.kernel, c.stride}));
    return json{{"conv_layers", convs},
                {"feature_dim", m.feature_dim},
                {"num_layers", m.num_layers},
                {"model_dim", m.model_dim},
                {"inner_dim", m.inner_dim},
                {"heads", m.heads},
                {"top_k", m.top_k},
                {"y_l_layers", m.y_l_layers},
                {"y_p_layers", m.y_p_layers},
                {"pos_conv_kernel", m.pos_conv_kernel},
                {"pos_conv_groups", m.pos_conv_groups},
                {"mask_prob", m.mask_prob},
                {"mask_span", m.mask_span},
                {"sl1_beta", m.sl1_beta},
                {"groups", m.groups},
                {"num_codewords_l", m.num_codewords_l},
                {"num_codewords_p", m.num_codewords_p},
                {"lqt_enabled", m.lqt_enabled},
                {"pqt_enabled", m.pqt_enabled},
                {"lqt_type", to_string(m.lqt_type)},
                {"pqt_type", to_string(m.pqt_type)},
                {"lqt_norm", to_string(m.lqt_norm)},
                {"pqt_norm", to_string(m.pqt_norm)},
                {"deep_conv_block", m.deep_conv_block},
                {"teacher_path_block", to_string(m.teacher_path_block)},
                {"gumbel_projection_logits", m.gumbel_projection_logits},
                {"gumbel_temperature", m.gumbel_temperature}};
}

ModelConfig model_from_json(const json& j) {
    ModelConfig m;
    Section s(j, "model");
    if (const json* convs = s.sub("conv_layers")) {
        m.conv_layers.clear();
        for (const auto& c : *convs) {
            require_config(c.is_array() && c.size() == 3,
                           "model.conv_layers entries must be [channels, kernel, stride]");
            m.conv_layers.push_back({c[0].get<idx>(), c[1].get<idx>(), c[2].get<idx>()});
        }
    }
    s.get("feature_dim", m.feature_dim);
    s.get("num_layers", m.num_layers);
    s.get("model_dim", m.model_dim);
    s.get("inner_dim", m.inner_dim);
    s.get("heads", m.heads);
    s.get("top_k", m.top_k);
    s.get("y_l_layers", m.y_l_layers);
    s.get("y_p_layers", m.y_p_layers);
    s.get("pos_conv_kernel", m.pos_conv_kernel);
    s.get("pos_conv_groups", m.pos_conv_groups);
    s.get("mask_prob", m.mask_prob);
    s.get("mask_span", m.mask_span);
    s.get("sl1_beta", m.sl1_beta);
    s.get("groups", m.groups);
    s.get("num_codewords_l", m.num_codewords_l);
    s.get("num_codewords_p", m.num_codewords_p);
    s.get("lqt_enabled", m.lqt_enabled);
    s.get("pqt_enabled", m.pqt_enabled);
    s.get_enum("lqt_type", m.lqt_type);
    s.get_enum("pqt_type", m.pqt_type);
    s.get_enum("lqt_norm", m.lqt_norm);
    s.get_enum("pqt_norm", m.pqt_norm);
    s.get("deep_conv_block", m.deep_conv_block);
    s.get_enum("teacher_path_block", m.teacher_path_block);
    s.get("gumbel_projection_logits", m.gumbel_projection_logits);
    s.get("gumbel_temperature", m.gumbel_temperature);
    s.finish();
    return m;
}

json weights_to_json(const LossWeights& w) {
    return json{{"gamma1", w.gamma1},
                {"gamma2", w.gamma2},
                {"gamma3", w.gamma3},
                {"gamma_km", w.gamma_km},
                {"kappa", w.kappa}};
}

LossWeights weights_from_json(const json& j) {
    LossWeights w;
    Section s(j, "train.weights");
    s.get("gamma1", w.gamma1);
    s.get("gamma2", w.gamma2);
    s.get("gamma3", w.gamma3);
    s.get("gamma_km", w.gamma_km);
    s.get("kappa", w.kappa);
    s.finish();
    return w;
}

json train_to_json(const TrainConfig& t) {
    return json{{"regime", to_string(t.regime)},
                {"total_updates", t.total_updates},
                {"lr_peak", t.lr_peak},
                {"lr_end", t.lr_end},
                {"tri_stage", json::array({t.warm_pct, t.hold_pct, t.decay_pct})},
                {"max_tokens", t.max_tokens},
                {"seed", t.seed},
                {"eval_every", t.eval_every},
                {"collapse_min_perplexity", t.collapse_min_perplexity},
                {"collapse_consecutive", t.collapse_consecutive},
                {"max_loss", t.max_loss},
                {"balance_alpha", t.balance_alpha},
                {"tau_start", t.tau_start},
                {"tau_end", t.tau_end},
                {"tau_anneal_frac", t.tau_anneal_frac},
                {"weight_decay", t.weight_decay},
                {"adam_beta1", t.adam_beta1},
                {"adam_beta2", t.adam_beta2},
                {"adam_eps", t.adam_eps},
                {"clip_norm", t.clip_norm},
                {"n_neg_phoneme", t.n_neg_phoneme},
                {"n_neg_language", t.n_neg_language},
                {"weights", weights_to_json(t.weights)}};
}

TrainConfig train_from_json(const json& j) {
    TrainConfig t;
    Section s(j, "train");
    s.get_enum("regime", t.regime);
    s.get("total_updates", t.total_updates);
    s.get("lr_peak", t.lr_peak);
    s.get("lr_end", t.lr_end);
    if (const json* tri = s.sub("tri_stage")) {
        require_config(tri->is_array() && tri->size() == 3,
                       "train.tri_stage must be [warm%, hold%, decay%]");
        t.warm_pct = (*tri)[0].get<double>();
        t.hold_pct = (*tri)[1].get<double>();
        t.decay_pct = (*tri)[2].get<double>();
    }
    s.get("max_tokens", t.max_tokens);
    s.get("seed", t.seed);
    s.get("eval_every", t.eval_every);
    s.get("collapse_min_perplexity", t.collapse_min_perplexity);
    s.get("collapse_consecutive", t.collapse_consecutive);
    s.get("max_loss", t.max_loss);
    s.get("balance_alpha", t.balance_alpha);
    s.get("tau_start", t.tau_start);
    s.get("tau_end", t.tau_end);
    s.get("tau_anneal_frac", t.tau_anneal_frac);
    s.get("weight_decay", t.weight_decay);
    s.get("adam_beta1", t.adam_beta1);
    s.get("adam_beta2", t.adam_beta2);
    s.get("adam_eps", t.adam_eps);
    s.get("clip_norm", t.clip_norm);
    s.get("n_neg_phoneme", t.n_neg_phoneme);
    s.get("n_neg_language", t.n_neg_language);
    if (const json* w = s.sub("weights")) t.weights = weights_from_json(*w);
    s.finish();
    return t;
}

json finetune_to_json(const FinetuneConfig& f) {
    return json{{"freeze_updates", f.freeze_updates},
                {"total_updates", f.total_updates},
                {"lr", f.lr},
                {"unit", f.unit},
                {"holdout_fraction", f.holdout_fraction},
                {"seed", f.seed},
                {"max_tokens", f.max_tokens}};
}

FinetuneConfig finetune_from_json(const json& j) {
    FinetuneConfig f;
    Section s(j, "finetune");
    s.get("freeze_updates", f.freeze_updates);
    s.get("total_updates", f.total_updates);
    s.get("lr", f.lr);
    s.get("unit", f.unit);
    s.get("holdout_fraction", f.holdout_fraction);
    s.get("seed", f.seed);
    s.get("max_tokens", f.max_tokens);
    s.finish();
    return f;
}

}  // namespace

RunConfig config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    RunConfig cfg;
    Section s(j, "config");
    s.get("config_version", cfg.config_version);
    require_config(cfg.config_version == 1,
                   "unsupported config_version " + std::to_string(cfg.config_version));
    if (const json* c = s.sub("corpus")) cfg.corpus = corpus_from_json(*c);
    if (const json* m = s.sub("model")) cfg.model = model_from_json(*m);
    if (const json* t = s.sub("train")) cfg.train = train_from_json(*t);
    if (const json* f = s.sub("finetune")) cfg.finetune = finetune_from_json(*f);
    s.get("corpus_dir", cfg.corpus_dir);
    s.get("checkpoint_path", cfg.checkpoint_path);
    s.finish();
    cfg.resolve();
    cfg.validate();
    return cfg;
}

std::string config_to_json_text(const RunConfig& cfg) {
    json j{{"config_version", cfg.config_version},
           {"corpus", corpus_to_json(cfg.corpus)},
           {"model", model_to_json(cfg.model)},
           {"train", train_to_json(cfg.train)},
           {"finetune", finetune_to_json(cfg.finetune)}};
    if (!cfg.corpus_dir.empty()) j["corpus_dir"] = cfg.corpus_dir;
    if (!cfg.checkpoint_path.empty()) j["checkpoint_path"] = cfg.checkpoint_path;
    return j.dump(2);
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return config_from_json_text(text);
}

void save_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    require(static_cast<bool>(out), "cannot write config file: " + path);
    out << config_to_json_text(cfg) << "\n";
}

RunConfig toy_config() {
    RunConfig cfg;  // defaults are the toy preset
    cfg.resolve();
    return cfg;
}

RunConfig micro_config() {
    RunConfig cfg;
    cfg.corpus.num_languages = 3;
    cfg.corpus.num_phonemes = 5;
    cfg.corpus.hours_per_language = {2.0, 1.0, 1.0};
    cfg.corpus.total_utterances = 24;
    cfg.corpus.frames_min = 12;
    cfg.corpus.frames_max = 20;
    cfg.corpus.feature_dim = 6;
    cfg.corpus.span_min = 2;
    cfg.corpus.span_max = 4;
    cfg.corpus.noise_std = 0.3;

    cfg.model.conv_layers = {{8, 2, 2}};
    cfg.model.feature_dim = 6;
    cfg.model.num_layers = 2;
    cfg.model.model_dim = 8;
    cfg.model.inner_dim = 16;
    cfg.model.heads = 2;
    cfg.model.top_k = 2;
    cfg.model.y_l_layers = {1};
    cfg.model.y_p_layers = {2};
    cfg.model.pos_conv_kernel = 3;
    cfg.model.pos_conv_groups = 2;
    cfg.model.mask_prob = 0.3;
    cfg.model.mask_span = 2;
    cfg.model.groups = 2;

    cfg.train.total_updates = 20;
    cfg.train.max_tokens = 64;
    cfg.train.eval_every = 10;

    cfg.finetune.freeze_updates = 2;
    cfg.finetune.total_updates = 6;
    cfg.finetune.max_tokens = 64;

    cfg.resolve();
    return cfg;
}

}  // namespace dqd2v
