#include "dqd2v/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "dqd2v/analysis.hpp"

namespace dqd2v {

namespace fs = std::filesystem;

double lr_schedule(idx step, const TrainConfig& tc) {
    const double total = static_cast<double>(tc.total_updates);
    if (total <= 0.0) return tc.lr_peak;
    const idx warm_end = static_cast<idx>(std::llround(total * tc.warm_pct / 100.0));
    const idx hold_end =
        warm_end + static_cast<idx>(std::llround(total * tc.hold_pct / 100.0));
    if (step < warm_end)
        return tc.lr_peak * static_cast<double>(step) / static_cast<double>(warm_end);
    if (step < hold_end) return tc.lr_peak;
    const idx decay_len = tc.total_updates - hold_end;
    if (decay_len <= 0) return tc.lr_peak;
    const double f = static_cast<double>(step - hold_end) / static_cast<double>(decay_len);
    return tc.lr_peak + (tc.lr_end - tc.lr_peak) * std::min(1.0, f);
}

// -------------------------------------------------------- CollapseMonitor --

CollapseMonitor::CollapseMonitor(idx groups, idx n_l, idx n_p, double thresh_l,
                                 double thresh_p, idx consecutive)
    : groups_(groups), n_l_(n_l), n_p_(n_p), thresh_l_(thresh_l), thresh_p_(thresh_p),
      consecutive_(consecutive) {
    hist_l_.assign(static_cast<std::size_t>(groups_ * n_l_), 0);
    hist_p_.assign(static_cast<std::size_t>(groups_ * n_p_), 0);
}

void CollapseMonitor::observe_language(const std::vector<idx>& indices) {
    const idx P = static_cast<idx>(indices.size()) / groups_;
    for (idx p = 0; p < P; ++p)
        for (idx g = 0; g < groups_; ++g)
            ++hist_l_[static_cast<std::size_t>(g * n_l_ + indices[static_cast<std::size_t>(p * groups_ + g)])];
}

void CollapseMonitor::observe_phoneme(const std::vector<idx>& indices) {
    const idx P = static_cast<idx>(indices.size()) / groups_;
    for (idx p = 0; p < P; ++p)
        for (idx g = 0; g < groups_; ++g)
            ++hist_p_[static_cast<std::size_t>(g * n_p_ + indices[static_cast<std::size_t>(p * groups_ + g)])];
}

namespace {

double min_group_perplexity(const std::vector<idx>& hist, idx groups, idx n) {
    double best = -1.0;
    for (idx g = 0; g < groups; ++g) {
        idx total = 0;
        for (idx j = 0; j < n; ++j) total += hist[static_cast<std::size_t>(g * n + j)];
        if (total == 0) continue;
        double h = 0.0;
        for (idx j = 0; j < n; ++j) {
            const idx c = hist[static_cast<std::size_t>(g * n + j)];
            if (c == 0) continue;
            const double p = static_cast<double>(c) / static_cast<double>(total);
            h -= p * std::log(p);
        }
        const double perp = std::exp(h);
        if (best < 0.0 || perp < best) best = perp;
    }
    return best;
}

}  // namespace

CollapseMonitor::Status CollapseMonitor::evaluate() {
    Status st;
    st.perplexity_l = min_group_perplexity(hist_l_, groups_, n_l_);
    st.perplexity_p = min_group_perplexity(hist_p_, groups_, n_p_);
    bool below = false;
    if (st.perplexity_l >= 0.0 && st.perplexity_l < thresh_l_) below = true;
    if (st.perplexity_p >= 0.0 && st.perplexity_p < thresh_p_) below = true;
    strikes_ = below ? strikes_ + 1 : 0;
    st.collapsed = strikes_ >= consecutive_;
    std::fill(hist_l_.begin(), hist_l_.end(), 0);
    std::fill(hist_p_.begin(), hist_p_.end(), 0);
    return st;
}

std::string CollapseMonitor::save_state() const {
    std::ostringstream os;
    os << strikes_;
    for (idx c : hist_l_) os << ' ' << c;
    for (idx c : hist_p_) os << ' ' << c;
    return os.str();
}

void CollapseMonitor::load_state(const std::string& s) {
    std::istringstream is(s);
    is >> strikes_;
    for (auto& c : hist_l_) is >> c;
    for (auto& c : hist_p_) is >> c;
    require(!is.fail(), "collapse monitor: malformed state");
}

// ------------------------------------------------------------------ Trainer --

bool is_holdout(idx utterance_id, double fraction) {
    const std::uint64_t h = Rng::mix(static_cast<std::uint64_t>(utterance_id) ^ 0x49f6428aull);
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    return u < fraction;
}

Trainer::Trainer(RunConfig cfg, std::vector<Utterance> corpus, std::string out_dir)
    : cfg_(std::move(cfg)), corpus_(std::move(corpus)), out_dir_(std::move(out_dir)),
      train_rng_(Rng::substream(cfg_.train.seed, 0x7e57)) {
    cfg_.resolve();
    cfg_.validate();
    require(!corpus_.empty(), "trainer: corpus is empty");
    fs::create_directories(out_dir_);
    model_ = std::make_unique<Model>(cfg_.model, cfg_.train.regime, cfg_.train.seed);
    opt_names_ = model_->trainable_names_for(cfg_.train.regime);
    nn::AdamW::Config oc;
    oc.beta1 = cfg_.train.adam_beta1;
    oc.beta2 = cfg_.train.adam_beta2;
    oc.eps = cfg_.train.adam_eps;
    oc.weight_decay = cfg_.train.weight_decay;
    oc.clip_norm = cfg_.train.clip_norm;
    opt_ = std::make_unique<nn::AdamW>(model_->trainable_for(cfg_.train.regime), oc);
    sampler_ = std::make_unique<BalancedSampler>(corpus_, cfg_.train.balance_alpha,
                                                 cfg_.train.seed);
    const double tl = cfg_.train.collapse_min_perplexity > 0.0
                          ? cfg_.train.collapse_min_perplexity
                          : static_cast<double>(cfg_.model.num_codewords_l) / 10.0;
    const double tp = cfg_.train.collapse_min_perplexity > 0.0
                          ? cfg_.train.collapse_min_perplexity
                          : static_cast<double>(cfg_.model.num_codewords_p) / 10.0;
    monitor_ = std::make_unique<CollapseMonitor>(cfg_.model.groups, cfg_.model.num_codewords_l,
                                                 cfg_.model.num_codewords_p, tl, tp,
                                                 cfg_.train.collapse_consecutive);
}

std::string Trainer::final_checkpoint_path() const {
    return (fs::path(out_dir_) / "checkpoint_final.bin").string();
}

UtteranceBatch Trainer::next_batch(BalancedSampler& sampler, idx max_tokens) {
    // Repeats are allowed within an epoch but not within a batch; a duplicate
    // draw is re-drawn a bounded number of times, then the batch closes.
    std::vector<const Utterance*> picked;
    std::unordered_set<idx> ids;
    idx frames = 0;
    idx retries = 0;
    while (true) {
        const Utterance& u = sampler.next();
        if (picked.empty())
            require(u.frames() <= max_tokens,
                    "batch: utterance of " + std::to_string(u.frames()) +
                        " frames exceeds max_tokens " + std::to_string(max_tokens));
        if (frames + u.frames() > max_tokens) break;
        if (ids.count(u.id)) {
            if (++retries > 32) break;
            continue;
        }
        picked.push_back(&u);
        ids.insert(u.id);
        frames += u.frames();
    }
    return make_batch(picked, max_tokens);
}

void Trainer::save_state(const std::string& path, idx next_step) {
    std::vector<std::pair<std::string, std::string>> states;
    states.emplace_back("train", train_rng_.save_state());
    states.emplace_back("sampler", sampler_->save_rng_state());
    states.emplace_back("collapse_monitor", monitor_->save_state());
    save_checkpoint(path, cfg_, *model_, opt_.get(), opt_names_, next_step, states);
}

void Trainer::train_loop(idx start_step, const TrainHooks* hooks) {
    const TrainConfig& tc = cfg_.train;
    const idx anneal = static_cast<idx>(
        std::llround(tc.tau_anneal_frac * static_cast<double>(tc.total_updates)));

    const std::string log_path = (fs::path(out_dir_) / "train_log.tsv").string();
    std::ofstream log(log_path, start_step == 0 ? std::ios::trunc : std::ios::app);
    require(static_cast<bool>(log), "trainer: cannot write " + log_path);
    if (start_step == 0) log << LossReport().tsv_header() << '\n';

    for (step_ = start_step; step_ < tc.total_updates; ++step_) {
        const double lr = lr_schedule(step_, tc);
        UtteranceBatch batch = next_batch(*sampler_, tc.max_tokens);
        StepRand sr = draw_step_rand(cfg_.model, tc, batch, train_rng_);
        LossBundle bundle = build_losses(*model_, batch, tc, sr);
        LossReport report = bundle.report(tc, cfg_.model);
        const double tau = ema_tau(step_, anneal, tc.tau_start, tc.tau_end);
        log << report.tsv_line(step_, lr, tau) << '\n';
        log.flush();

        if (!std::isfinite(report.total) || report.total > tc.max_loss)
            throw DivergenceError("loss explosion at step " + std::to_string(step_) +
                                  " (total = " + std::to_string(report.total) + ")");

        opt_->zero_grad();
        ag::backward(bundle.total);
        opt_->step(lr);
        if (hooks && hooks->on_optimizer_step) hooks->on_optimizer_step(step_);
        model_->ema_update(tau);
        if (hooks && hooks->on_ema_update) hooks->on_ema_update(step_);

        if (!bundle.indices_l.empty()) monitor_->observe_language(bundle.indices_l);
        if (!bundle.indices_p.empty()) monitor_->observe_phoneme(bundle.indices_p);

        if ((step_ + 1) % tc.eval_every == 0) {
            CollapseMonitor::Status st = monitor_->evaluate();
            save_state((fs::path(out_dir_) / "checkpoint_latest.bin").string(), step_ + 1);
            if (st.collapsed)
                throw CollapseError(
                    "codeword perplexity collapsed at step " + std::to_string(step_) +
                    " (language " + std::to_string(st.perplexity_l) + ", phoneme " +
                    std::to_string(st.perplexity_p) + ")");
        }

        if (hooks && hooks->on_step_end) hooks->on_step_end(step_, report);
    }
    step_ = tc.total_updates;
    save_state(final_checkpoint_path(), tc.total_updates);
}

void Trainer::pretrain(const TrainHooks* hooks) { train_loop(0, hooks); }

void Trainer::resume(const std::string& checkpoint, const TrainHooks* hooks) {
    CheckpointMeta meta = read_checkpoint_meta(checkpoint);
    require_config(config_to_json_text(meta.cfg) == config_to_json_text(cfg_),
                   "resume: checkpoint config does not match this trainer's config");
    load_checkpoint_state(checkpoint, *model_, opt_.get(), opt_names_);
    for (const auto& [name, state] : meta.rng_states) {
        if (name == "train") train_rng_.load_state(state);
        else if (name == "sampler") sampler_->load_rng_state(state);
        else if (name == "collapse_monitor") monitor_->load_state(state);
    }
    step_ = meta.step;
    train_loop(meta.step, hooks);
}

void Trainer::load_model_from(const std::string& checkpoint) {
    // Name/shape checks inside the loader catch config mismatches.
    load_checkpoint_state(checkpoint, *model_, nullptr, {});
}

FinetuneReport Trainer::finetune(const TrainHooks* hooks) {
    const FinetuneConfig& fc = cfg_.finetune;
    fc.validate();

    std::vector<Utterance> train_split, holdout;
    for (const Utterance& u : corpus_)
        (is_holdout(u.id, fc.holdout_fraction) ? holdout : train_split).push_back(u);
    require(!train_split.empty() && !holdout.empty(),
            "finetune: corpus split produced an empty side");

    nn::Linear head = model_->add_finetune_head(fc.seed);
    // Fine-tune touches the path the CTC loss can reach: shared feature
    // encoder, student context encoder, and the fresh head.
    std::vector<std::string> names;
    for (const auto& n : model_->params().names()) {
        ag::Var v = model_->params().get(n);
        if (!v->requires_grad) continue;
        if (n.rfind("feat.", 0) == 0 || n.rfind("student.", 0) == 0 ||
            n.rfind("finetune.", 0) == 0)
            names.push_back(n);
    }
    std::vector<ag::Var> params;
    std::vector<bool> head_only;
    for (const auto& n : names) {
        params.push_back(model_->params().get(n));
        head_only.push_back(n.rfind("finetune.", 0) == 0);
    }
    nn::AdamW::Config oc;
    oc.clip_norm = cfg_.train.clip_norm;
    oc.weight_decay = 0.0;
    nn::AdamW opt(params, oc);

    BalancedSampler sampler(train_split, cfg_.train.balance_alpha, fc.seed);

    double last_loss = 0.0;
    for (idx step = 0; step < fc.total_updates; ++step) {
        const bool frozen = step < fc.freeze_updates;
        if (frozen)
            opt.set_active(head_only);
        else
            opt.set_all_active();

        UtteranceBatch batch = next_batch(sampler, fc.max_tokens);
        Model::Encoded enc = model_->feature_encode(batch.features, batch.lengths);
        LayerOutputs stu = model_->student_forward(enc.latents, nullptr, enc.lengths);
        std::vector<bool> all_high(batch.lengths.size(), true);
        ag::Var loss = ctc_supervised_loss(stu.layers.back(), head, batch.phoneme_seqs,
                                           enc.lengths, all_high);
        last_loss = loss->val[0];
        if (!std::isfinite(last_loss))
            throw DivergenceError("finetune: non-finite loss at step " + std::to_string(step));
        opt.zero_grad();
        ag::backward(loss);
        opt.step(fc.lr);
        if (hooks && hooks->on_optimizer_step) hooks->on_optimizer_step(step);
    }

    // Greedy decode on the held-out split.
    FinetuneReport rep;
    rep.holdout_utterances = static_cast<idx>(holdout.size());
    rep.final_loss = last_loss;
    std::vector<const Utterance*> ptrs;
    for (const Utterance& u : holdout) ptrs.push_back(&u);
    std::size_t pos = 0;
    while (pos < ptrs.size()) {
        idx consumed = 0;
        std::vector<const Utterance*> rest(ptrs.begin() + static_cast<std::ptrdiff_t>(pos),
                                           ptrs.end());
        UtteranceBatch batch = make_batch(rest, fc.max_tokens, &consumed);
        pos += static_cast<std::size_t>(consumed);
        Model::Encoded enc = model_->feature_encode(batch.features, batch.lengths);
        LayerOutputs stu = model_->student_forward(enc.latents, nullptr, enc.lengths);
        ag::Var logits = head.forward(stu.layers.back());
        std::vector<std::vector<idx>> hyps = greedy_ctc_decode(logits->val, enc.lengths);
        for (idx b = 0; b < batch.size(); ++b) {
            std::vector<idx> ref;
            for (idx p : batch.phoneme_seqs[static_cast<std::size_t>(b)]) ref.push_back(p + 1);
            rep.edit_distance += edit_distance(hyps[static_cast<std::size_t>(b)], ref);
            rep.reference_tokens += static_cast<idx>(ref.size());
        }
    }
    rep.token_error_rate = rep.reference_tokens > 0
                               ? static_cast<double>(rep.edit_distance) /
                                     static_cast<double>(rep.reference_tokens)
                               : 1.0;
    return rep;
}

}  // namespace dqd2v
