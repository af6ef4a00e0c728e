// bimix command-line interface: train, eval, generate, ablate.
//
// Anything that affects reproducibility lives in the JSON config; flags only
// select files, modes and budgets. Every command is a pure function of
// (config, files, seed) to (files, exit code).

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "bimix/checkpoint.hpp"
#include "bimix/evaluator.hpp"
#include "bimix/run_config.hpp"
#include "bimix/trainer.hpp"

namespace fs = std::filesystem;
using Model = bimix::TunedModel<float>;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

std::vector<bimix::TokenizedExample> tokenize_checked(const std::vector<bimix::InstructionExample>& examples,
                                                      bimix::TemplateKind kind, int max_seq_len) {
    auto tokens = bimix::tokenize_dataset(examples, kind);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i].prompt.size() + tokens[i].answer.size() > static_cast<std::size_t>(max_seq_len)) {
            throw bimix::ConfigError("example " + std::to_string(i) + " needs " +
                                     std::to_string(tokens[i].prompt.size() + tokens[i].answer.size()) +
                                     " tokens but max_seq_len is " + std::to_string(max_seq_len));
        }
    }
    return tokens;
}

struct RunOutcome {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double accuracy = 0.0;
};

// One deterministic train(+eval) run, used by both train and ablate.
RunOutcome run_one(const bimix::RunConfig& cfg, Model* keep_model, const std::string& eval_mode,
                   const std::string& pattern, int max_new) {
    fs::create_directories(cfg.out_dir);
    bimix::RunDatasets ds = bimix::load_datasets(cfg);
    auto train_tokens = tokenize_checked(ds.train, ds.template_kind, cfg.model.max_seq_len);

    Model model = Model::create(cfg.model, cfg.engine, cfg.peft, cfg.train.seed);
    std::ofstream metrics(cfg.out_dir + "/metrics.csv");
    if (!metrics) throw bimix::IoError("cannot write '" + cfg.out_dir + "/metrics.csv'");
    auto result = bimix::run_training(model, train_tokens, cfg.train, &metrics);

    RunOutcome outcome;
    outcome.initial_loss = result.initial_loss;
    outcome.final_loss = result.final_loss;
    if (eval_mode == "mc") {
        outcome.accuracy = bimix::mc_accuracy(model, ds.eval).accuracy;
    } else if (eval_mode == "gen") {
        outcome.accuracy =
            bimix::generative_exact_match(model, ds.eval, ds.template_kind, pattern, max_new).accuracy;
    }
    if (keep_model) *keep_model = std::move(model);
    return outcome;
}

int cmd_train(const std::string& config_path, const std::string& out_dir_override) {
    bimix::RunConfig cfg = bimix::load_run_config(config_path);
    if (!out_dir_override.empty()) cfg.out_dir = out_dir_override;

    Model model;
    RunOutcome out = run_one(cfg, &model, "none", "", 0);
    bimix::save_checkpoint(model, cfg.out_dir + "/checkpoint.bin");
    std::ofstream snap(cfg.out_dir + "/config.json");
    if (!snap) throw bimix::IoError("cannot write '" + cfg.out_dir + "/config.json'");
    snap << bimix::run_config_to_json(cfg).dump(2) << '\n';

    std::cout << "trained " << cfg.train.update_steps << " steps (variant " << to_string(cfg.engine.variant)
              << ", seed " << cfg.train.seed << "): loss " << out.initial_loss << " -> " << out.final_loss
              << "\nwrote " << cfg.out_dir << "/checkpoint.bin, metrics.csv, config.json\n";
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path, const std::string& mode,
             bool length_normalize, const std::string& pattern, int max_new, const std::string& out_path) {
    Model model = bimix::load_checkpoint<float>(checkpoint_path);
    bimix::RunConfig cfg = bimix::load_run_config(config_path);
    bimix::RunDatasets ds = bimix::load_datasets(cfg);

    nlohmann::json report;
    report["task"] = cfg.data.train_jsonl.empty() ? to_string(cfg.data.kind) : cfg.data.eval_jsonl;
    report["variant"] = to_string(model.engine.variant);
    report["seed"] = model.run_seed;
    report["n"] = static_cast<int>(ds.eval.size());
    report["ties"] = 0;
    report["unparsed"] = 0;
    if (mode == "mc") {
        auto r = bimix::mc_accuracy(model, ds.eval, length_normalize);
        report["accuracy"] = r.accuracy;
        report["ties"] = r.ties;
        report["n"] = r.n;
    } else {
        auto r = bimix::generative_exact_match(model, ds.eval, ds.template_kind, pattern, max_new);
        report["accuracy"] = r.accuracy;
        report["unparsed"] = r.unparsed;
        report["n"] = r.n;
    }
    std::cout << report.dump(2) << '\n';
    if (!out_path.empty()) {
        std::ofstream out(out_path);
        if (!out) throw bimix::IoError("cannot write report '" + out_path + "'");
        out << report.dump(2) << '\n';
    }
    return kExitOk;
}

int cmd_generate(const std::string& checkpoint_path, const std::string& prompt, int max_new, bool wrap_qa) {
    Model model = bimix::load_checkpoint<float>(checkpoint_path);
    std::string text = prompt;
    if (wrap_qa) {
        text = bimix::render_template({prompt, "x", {}, -1}, bimix::TemplateKind::qa).prompt;
    }
    const std::vector<int> ids = bimix::Tokenizer::encode(text);
    const std::vector<int> out = bimix::generate(model, ids, max_new);
    std::cout << bimix::Tokenizer::decode(out) << '\n';
    return kExitOk;
}

struct AblationRun {
    bimix::RunConfig cfg;
    std::string cell;  // variant/peft/theta_init tag
    RunOutcome outcome;
};

int cmd_ablate(const std::string& config_path, const std::string& grid_path, const std::string& out_dir,
               int max_runs, int jobs) {
    bimix::RunConfig base = bimix::load_run_config(config_path);
    std::ifstream grid_in(grid_path);
    if (!grid_in) throw bimix::IoError("cannot open grid file '" + grid_path + "'");
    nlohmann::json grid;
    try {
        grid_in >> grid;
    } catch (const nlohmann::json::exception& e) {
        throw bimix::ConfigError(std::string("grid file: ") + e.what());
    }
    bimix::cfgdetail::reject_unknown(grid, "grid",
                                     {"variants", "peft", "theta_init", "seeds", "eval_mode", "pattern",
                                      "max_new"});

    std::vector<std::string> variants = grid.value("variants", std::vector<std::string>{"full"});
    std::vector<std::string> pefts = grid.value("peft", std::vector<std::string>{to_string(base.peft.kind)});
    std::vector<double> theta_inits = grid.value("theta_init", std::vector<double>{base.engine.theta_init});
    std::vector<std::uint64_t> seeds = grid.value("seeds", std::vector<std::uint64_t>{42, 43, 44});
    const std::string default_mode =
        base.data.effective_template() == bimix::TemplateKind::multiple_choice ? "mc" : "gen";
    const std::string eval_mode = grid.value("eval_mode", default_mode);
    const std::string pattern = grid.value("pattern", std::string("(\\S+)"));
    const int max_new = grid.value("max_new", 8);
    if (eval_mode != "mc" && eval_mode != "gen") {
        throw bimix::ConfigError("grid: eval_mode must be 'mc' or 'gen'");
    }

    const std::size_t total = variants.size() * pefts.size() * theta_inits.size() * seeds.size();
    if (total > static_cast<std::size_t>(max_runs)) {
        throw bimix::ConfigError("ablation grid needs " + std::to_string(total) + " runs, budget is " +
                                 std::to_string(max_runs) + "; raise --max-runs to proceed");
    }

    std::vector<AblationRun> runs;
    for (const auto& v : variants) {
        for (const auto& p : pefts) {
            for (double ti : theta_inits) {
                for (std::uint64_t seed : seeds) {
                    bimix::RunConfig cfg = base;
                    cfg.engine.variant = bimix::variant_from_string(v);
                    cfg.peft.kind = bimix::peft_kind_from_string(p);
                    cfg.engine.theta_init = ti;
                    cfg.train.seed = seed;
                    std::ostringstream tag;
                    tag << v << '_' << p << "_ti" << ti;
                    cfg.out_dir = out_dir + "/" + tag.str() + "/seed" + std::to_string(seed);
                    runs.push_back({std::move(cfg), tag.str(), {}});
                }
            }
        }
    }

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= runs.size()) return;
            runs[i].outcome = run_one(runs[i].cfg, nullptr, eval_mode, pattern, max_new);
        }
    };
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    fs::create_directories(out_dir);
    const std::string table_path = out_dir + "/ablation.csv";
    std::ofstream table(table_path);
    if (!table) throw bimix::IoError("cannot write '" + table_path + "'");
    table << "variant,peft,theta_init,n_seeds,acc_mean,acc_std,initial_loss_mean,final_loss_mean,"
             "final_loss_std\n";
    for (const auto& v : variants) {
        for (const auto& p : pefts) {
            for (double ti : theta_inits) {
                std::vector<const AblationRun*> cell;
                for (const auto& r : runs) {
                    if (to_string(r.cfg.engine.variant) == v && to_string(r.cfg.peft.kind) == p &&
                        r.cfg.engine.theta_init == ti) {
                        cell.push_back(&r);
                    }
                }
                auto stats = [&](auto getter) {
                    double mean = 0.0;
                    for (const auto* r : cell) mean += getter(*r);
                    mean /= cell.size();
                    double var = 0.0;
                    for (const auto* r : cell) var += (getter(*r) - mean) * (getter(*r) - mean);
                    const double sd = cell.size() > 1 ? std::sqrt(var / (cell.size() - 1)) : 0.0;
                    return std::pair<double, double>{mean, sd};
                };
                auto [acc_mean, acc_std] = stats([](const AblationRun& r) { return r.outcome.accuracy; });
                auto [init_mean, init_sd] = stats([](const AblationRun& r) { return r.outcome.initial_loss; });
                auto [fin_mean, fin_sd] = stats([](const AblationRun& r) { return r.outcome.final_loss; });
                (void)init_sd;
                table << v << ',' << p << ',' << ti << ',' << cell.size() << ',' << acc_mean << ','
                      << acc_std << ',' << init_mean << ',' << fin_mean << ',' << fin_sd << '\n';
                std::cout << v << " peft=" << p << " theta_init=" << ti << ": acc " << acc_mean << " +- "
                          << acc_std << ", loss " << init_mean << " -> " << fin_mean << '\n';
            }
        }
    }
    std::cout << "wrote " << table_path << '\n';
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bimix: instruction-tuning a toy decoder-only transformer with dual causal/bidirectional "
                 "prompt passes and learnable KV mixing"};
    app.require_subcommand(1);

    std::string config_path, out_dir_override;
    auto* train = app.add_subcommand("train", "train a model from a JSON config");
    train->add_option("--config", config_path, "path to the run config JSON")->required();
    train->add_option("--out-dir", out_dir_override, "override the config's out_dir");

    std::string eval_ckpt, eval_config, eval_mode = "mc", eval_pattern = "(\\S+)", eval_out;
    bool eval_norm = false;
    int eval_max_new = 8;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the config's eval split");
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint container")->required();
    eval->add_option("--config", eval_config, "run config naming the dataset")->required();
    eval->add_option("--mode", eval_mode, "mc (choice log-likelihood) or gen (exact match)")
        ->check(CLI::IsMember({"mc", "gen"}));
    eval->add_flag("--norm", eval_norm, "length-normalize choice scores (mean per token)");
    eval->add_option("--pattern", eval_pattern, "regex with one capture group for gen mode");
    eval->add_option("--max-new", eval_max_new, "generation budget for gen mode");
    eval->add_option("--out", eval_out, "also write the JSON report here");

    std::string gen_ckpt, gen_prompt;
    int gen_max_new = 32;
    bool gen_wrap_qa = false;
    auto* gen = app.add_subcommand("generate", "greedy-generate an answer for a prompt");
    gen->add_option("--checkpoint", gen_ckpt, "checkpoint container")->required();
    gen->add_option("--prompt", gen_prompt, "prompt text (tokenized as-is)")->required();
    gen->add_option("--max-new", gen_max_new, "maximum generated tokens");
    gen->add_flag("--wrap-qa", gen_wrap_qa, "wrap the prompt in the QA template first");

    std::string ab_config, ab_grid, ab_out = "ablation";
    int ab_max_runs = 60, ab_jobs = 1;
    auto* ablate = app.add_subcommand("ablate", "run a variant/peft/theta_init/seed grid and aggregate");
    ablate->add_option("--config", ab_config, "base run config JSON")->required();
    ablate->add_option("--grid", ab_grid, "grid JSON (variants/peft/theta_init/seeds/eval_mode/pattern)")
        ->required();
    ablate->add_option("--out-dir", ab_out, "directory for per-run artifacts and ablation.csv");
    ablate->add_option("--max-runs", ab_max_runs, "refuse grids needing more runs than this");
    ablate->add_option("--jobs", ab_jobs, "parallel worker threads for grid cells");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(config_path, out_dir_override);
        if (*eval) return cmd_eval(eval_ckpt, eval_config, eval_mode, eval_norm, eval_pattern, eval_max_new,
                                   eval_out);
        if (*gen) return cmd_generate(gen_ckpt, gen_prompt, gen_max_new, gen_wrap_qa);
        if (*ablate) return cmd_ablate(ab_config, ab_grid, ab_out, ab_max_runs, ab_jobs);
    } catch (const bimix::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const bimix::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const bimix::IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kExitIo;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::length_error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return kExitOk;
}
