#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "dqd2v/checkpoint.hpp"
#include "dqd2v/objectives.hpp"

namespace dqd2v {

// Tri-stage schedule: linear warm to lr_peak, hold, linear decay to lr_end.
double lr_schedule(idx step, const TrainConfig& tc);

struct TrainHooks {
    std::function<void(idx)> on_optimizer_step;
    std::function<void(idx)> on_ema_update;
    std::function<void(idx, const LossReport&)> on_step_end;
};

// Codeword-usage perplexity per quantizer over an eval window; training is
// declared collapsed when the minimum per-group perplexity stays under the
// threshold for `consecutive` evals in a row.
class CollapseMonitor {
public:
    CollapseMonitor(idx groups, idx n_l, idx n_p, double thresh_l, double thresh_p,
                    idx consecutive);
    void observe_language(const std::vector<idx>& indices);  // [P*G] row-major
    void observe_phoneme(const std::vector<idx>& indices);
    struct Status {
        double perplexity_l = -1.0;  // min over groups; -1 when nothing observed
        double perplexity_p = -1.0;
        bool collapsed = false;
    };
    Status evaluate();  // closes the window

    std::string save_state() const;
    void load_state(const std::string& s);

private:
    idx groups_, n_l_, n_p_;
    double thresh_l_, thresh_p_;
    idx consecutive_;
    idx strikes_ = 0;
    std::vector<idx> hist_l_, hist_p_;  // [G*N]
};

struct FinetuneReport {
    double token_error_rate = 1.0;
    idx edit_distance = 0;
    idx reference_tokens = 0;
    idx holdout_utterances = 0;
    double final_loss = 0.0;
};

class Trainer {
public:
    Trainer(RunConfig cfg, std::vector<Utterance> corpus, std::string out_dir);

    // Runs total_updates steps (or the remainder when resuming), writing the
    // per-step log and checkpoints under out_dir. Throws CollapseError /
    // DivergenceError on the corresponding failure modes.
    void pretrain(const TrainHooks* hooks = nullptr);
    void resume(const std::string& checkpoint, const TrainHooks* hooks = nullptr);

    // Attaches a fresh CTC head to the current model (pretrained or not),
    // trains it with the freeze-then-unfreeze schedule and reports greedy
    // token error rate on the held-out split.
    FinetuneReport finetune(const TrainHooks* hooks = nullptr);

    void load_model_from(const std::string& checkpoint);

    Model& model() { return *model_; }
    const RunConfig& config() const { return cfg_; }
    const std::vector<Utterance>& corpus() const { return corpus_; }
    std::string final_checkpoint_path() const;

private:
    UtteranceBatch next_batch(BalancedSampler& sampler, idx max_tokens);
    void save_state(const std::string& path, idx next_step);
    void train_loop(idx start_step, const TrainHooks* hooks);

    RunConfig cfg_;
    std::vector<Utterance> corpus_;
    std::string out_dir_;
    std::unique_ptr<Model> model_;
    std::unique_ptr<nn::AdamW> opt_;
    std::vector<std::string> opt_names_;
    std::unique_ptr<BalancedSampler> sampler_;
    std::unique_ptr<CollapseMonitor> monitor_;
    Rng train_rng_;
    idx step_ = 0;
};

// Deterministic id-hash split; returns true for held-out utterances.
bool is_holdout(idx utterance_id, double fraction);

}  // namespace dqd2v
