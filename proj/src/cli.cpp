#include "dqd2v/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include <CLI11.hpp>

#include "dqd2v/analysis.hpp"
#include "dqd2v/trainer.hpp"

namespace dqd2v::cli {

namespace fs = std::filesystem;

void apply_ablation(RunConfig& cfg, const std::string& id) {
    ModelConfig& m = cfg.model;
    TrainConfig& t = cfg.train;
    // Expected-failure runs are bounded so they terminate inside the budget.
    const idx failure_budget = std::min<idx>(t.total_updates, 600);
    if (id == "S1") {
        t.regime = Regime::Shallow;
        m.lqt_enabled = false;
        m.pqt_enabled = true;
        m.pqt_type = QuantizerType::Gumbel;
    } else if (id == "S2") {
        t.regime = Regime::Shallow;
        m.groups = 1;
    } else if (id == "S3") {
        t.regime = Regime::Shallow;
        m.lqt_enabled = false;
        m.pqt_enabled = true;
        m.pqt_norm = LevelNorm::L2;
        t.total_updates = failure_budget;
    } else if (id == "S4") {
        t.regime = Regime::Shallow;
        m.pqt_enabled = false;
        m.lqt_enabled = true;
        m.lqt_norm = LevelNorm::Instance;
    } else if (id == "S5") {
        t.regime = Regime::Shallow;
        m.lqt_enabled = false;
        m.pqt_enabled = true;
        m.teacher_path_block = TeacherPathBlock::Transformer;
        t.total_updates = failure_budget;
    } else if (id == "S6") {
        t.regime = Regime::Shallow;
        m.lqt_enabled = false;
        m.pqt_enabled = true;
        m.teacher_path_block = TeacherPathBlock::Cnn;
        t.total_updates = failure_budget;
    } else if (id == "S7") {
        t.regime = Regime::Deep;
        m.deep_conv_block = false;
    } else {
        throw ConfigError("unknown ablation id: " + id + " (expected S1..S7)");
    }
}

namespace {

std::vector<Utterance> obtain_corpus(const RunConfig& cfg) {
    if (!cfg.corpus_dir.empty()) return import_corpus(cfg.corpus_dir);
    return generate_corpus(cfg.corpus);
}

void write_metrics(Trainer& trainer, const std::string& out_dir) {
    RunConfig cfg = trainer.config();
    Model& model = trainer.model();
    const std::vector<Utterance>& corpus = trainer.corpus();
    std::ofstream out(fs::path(out_dir) / "metrics.txt");
    require(static_cast<bool>(out), "cannot write metrics in " + out_dir);
    if (cfg.model.lqt_enabled) {
        CooccurrenceMatrix ml = collect_counts(model, corpus, Level::Language,
                                               cfg.train.max_tokens);
        MetricReport rl = metric_report(ml);
        char buf[160];
        std::snprintf(buf, sizeof(buf), "LP=%.6f\nLNMI=%.6f\nL_ACN=%lld\nL_AGN=",
                      rl.purity, rl.nmi, static_cast<long long>(rl.acn));
        out << buf;
        for (std::size_t g = 0; g < rl.agn.size(); ++g) out << (g ? "," : "") << rl.agn[g];
        out << "\n";
        write_conditional_report(ml, (fs::path(out_dir) / "heatmap_language.tsv").string());
    }
    if (cfg.model.pqt_enabled) {
        CooccurrenceMatrix mp = collect_counts(model, corpus, Level::Phoneme,
                                               cfg.train.max_tokens);
        MetricReport rp = metric_report(mp);
        char buf[160];
        std::snprintf(buf, sizeof(buf), "PP=%.6f\nPNMI=%.6f\nP_ACN=%lld\nP_AGN=",
                      rp.purity, rp.nmi, static_cast<long long>(rp.acn));
        out << buf;
        for (std::size_t g = 0; g < rp.agn.size(); ++g) out << (g ? "," : "") << rp.agn[g];
        out << "\n";
        write_conditional_report(mp, (fs::path(out_dir) / "heatmap_phoneme.tsv").string());

        std::ofstream per_lang(fs::path(out_dir) / "per_language.tsv");
        per_lang << "language\tPP\tPNMI\n";
        auto reports = per_language_metrics(model, corpus, cfg.corpus.num_languages,
                                            cfg.train.max_tokens);
        for (std::size_t l = 0; l < reports.size(); ++l) {
            std::snprintf(buf, sizeof(buf), "%zu\t%.6f\t%.6f\n", l, reports[l].purity,
                          reports[l].nmi);
            per_lang << buf;
        }
    }
}

int dispatch(const std::string& command, RunConfig cfg, const std::string& out_dir,
             const std::string& ablation) {
    fs::create_directories(out_dir);

    if (command == "ablate") {
        require_config(!ablation.empty(), "ablate requires --ablation S1..S7");
        apply_ablation(cfg, ablation);
        cfg.resolve();
        cfg.validate();
    } else {
        require_config(ablation.empty(), "--ablation is only valid with the ablate command");
    }
    save_config(cfg, (fs::path(out_dir) / "config.json").string());

    if (command == "gen-data") {
        std::vector<Utterance> corpus = generate_corpus(cfg.corpus);
        export_corpus(corpus, (fs::path(out_dir) / "corpus").string());
        std::printf("wrote %zu utterances to %s/corpus\n", corpus.size(), out_dir.c_str());
        return kOk;
    }

    if (command == "pretrain" || command == "ablate") {
        Trainer trainer(cfg, obtain_corpus(cfg), out_dir);
        trainer.pretrain();
        write_metrics(trainer, out_dir);
        std::printf("pretraining finished after %lld updates\n",
                    static_cast<long long>(cfg.train.total_updates));
        return kOk;
    }

    if (command == "finetune") {
        Trainer trainer(cfg, obtain_corpus(cfg), out_dir);
        std::string ckpt = cfg.checkpoint_path;
        if (ckpt.empty()) {
            warn("finetune: no checkpoint_path set, fine-tuning from random initialization");
        } else {
            trainer.load_model_from(ckpt);
        }
        FinetuneReport rep = trainer.finetune();
        std::ofstream out(fs::path(out_dir) / "finetune_report.txt");
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "token_error_rate=%.6f\nedit_distance=%lld\nreference_tokens=%lld\n"
                      "holdout_utterances=%lld\nfinal_loss=%.6f\n",
                      rep.token_error_rate, static_cast<long long>(rep.edit_distance),
                      static_cast<long long>(rep.reference_tokens),
                      static_cast<long long>(rep.holdout_utterances), rep.final_loss);
        out << buf;
        std::printf("%s", buf);
        return kOk;
    }

    if (command == "analyze") {
        Trainer trainer(cfg, obtain_corpus(cfg), out_dir);
        std::string ckpt = cfg.checkpoint_path.empty()
                               ? (fs::path(out_dir) / "checkpoint_final.bin").string()
                               : cfg.checkpoint_path;
        if (fs::exists(ckpt)) {
            trainer.load_model_from(ckpt);
        } else {
            warn("analyze: checkpoint " + ckpt + " not found, analyzing an untrained model");
        }
        write_metrics(trainer, out_dir);
        std::printf("analysis written to %s\n", out_dir.c_str());
        return kOk;
    }

    throw ConfigError("unknown command: " + command);
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"dqd2v: decoupled-quantization data2vec at desk scale"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", ablation;
    bool has_seed = false;
    std::uint64_t seed = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "config JSON (defaults to the toy preset)");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option("--seed", seed, "override train/finetune seeds")
            ->each([&](const std::string&) { has_seed = true; });
        sub->add_option("--ablation", ablation, "ablation id S1..S7 (ablate only)");
    };
    const char* commands[] = {"gen-data", "pretrain", "finetune", "analyze", "ablate"};
    const char* descs[] = {"generate and export a synthetic corpus",
                           "run self- or weakly-supervised pretraining",
                           "fine-tune with a fresh CTC head and report token error rate",
                           "compute quantizer clustering metrics and heatmap data",
                           "run a preset ablation (S1..S7)"};
    for (int i = 0; i < 5; ++i) add_common(app.add_subcommand(commands[i], descs[i]));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsageError;
    }

    try {
        RunConfig cfg = config_path.empty() ? toy_config() : load_config(config_path);
        if (has_seed) {
            cfg.train.seed = seed;
            cfg.finetune.seed = seed;
        }
        cfg.resolve();
        cfg.validate();
        return dispatch(app.get_subcommands().front()->get_name(), std::move(cfg), out_dir,
                        ablation);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfigError;
    } catch (const CollapseError& e) {
        std::fprintf(stderr, "training collapse: %s\n", e.what());
        return kCollapse;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "loss explosion: %s\n", e.what());
        return kDivergence;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kUsageError;
    }
}

}  // namespace dqd2v::cli
