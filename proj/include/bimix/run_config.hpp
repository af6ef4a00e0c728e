#pragma once

// JSON run configuration: everything affecting reproducibility lives in the
// config file; the resolved snapshot written next to each run replays it
// exactly. Unknown fields are rejected so typos surface as config errors.

#include <json.hpp>

#include "bimix/engine.hpp"
#include "bimix/trainer.hpp"

namespace bimix {

struct DataConfig {
    // synthetic task (default)
    TaskKind kind = TaskKind::key_value_lookup;
    int n_train = 2000;
    int n_eval = 200;
    int n_pairs = 3;
    std::uint64_t data_seed = 1;
    // file-backed datasets override the synthetic generator when set
    std::string train_jsonl;
    std::string eval_jsonl;
    TemplateKind template_kind = TemplateKind::qa;  // applies to jsonl data

    TemplateKind effective_template() const {
        if (!train_jsonl.empty() || !eval_jsonl.empty()) return template_kind;
        return template_for(kind);
    }
};

struct RunConfig {
    ModelConfig model;
    EngineConfig engine;
    PeftConfig peft;
    TrainConfig train;
    DataConfig data;
    std::string out_dir = "out";
};

namespace cfgdetail {

using Json = nlohmann::json;

inline void reject_unknown(const Json& j, const std::string& section,
                           std::initializer_list<const char*> known) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) {
            throw ConfigError("config: unknown field '" + (section.empty() ? it.key() : section + "." + it.key()) +
                              "'");
        }
    }
}

template <typename T>
T get_field(const Json& j, const std::string& section, const char* name, T fallback) {
    if (!j.contains(name)) return fallback;
    try {
        return j.at(name).template get<T>();
    } catch (const Json::exception&) {
        throw ConfigError("config: field '" + section + "." + name + "' has the wrong type");
    }
}

inline std::string get_string(const Json& j, const std::string& section, const char* name,
                              const std::string& fallback) {
    return get_field<std::string>(j, section, name, fallback);
}

}  // namespace cfgdetail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using cfgdetail::get_field;
    using cfgdetail::get_string;
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    cfgdetail::reject_unknown(j, "", {"model", "engine", "peft", "train", "task", "out_dir"});

    RunConfig cfg;
    if (j.contains("model")) {
        const auto& m = j.at("model");
        cfgdetail::reject_unknown(m, "model",
                                  {"n_layers", "n_heads", "d_model", "d_mlp", "vocab_size", "max_seq_len"});
        cfg.model.n_layers = get_field<int>(m, "model", "n_layers", cfg.model.n_layers);
        cfg.model.n_heads = get_field<int>(m, "model", "n_heads", cfg.model.n_heads);
        cfg.model.d_model = get_field<int>(m, "model", "d_model", cfg.model.d_model);
        cfg.model.d_mlp = get_field<int>(m, "model", "d_mlp", cfg.model.d_mlp);
        cfg.model.vocab_size = get_field<int>(m, "model", "vocab_size", cfg.model.vocab_size);
        cfg.model.max_seq_len = get_field<int>(m, "model", "max_seq_len", cfg.model.max_seq_len);
        try {
            cfg.model.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("config: model: ") + e.what());
        }
    }
    if (j.contains("engine")) {
        const auto& e = j.at("engine");
        cfgdetail::reject_unknown(e, "engine",
                                  {"variant", "second_pass_mask", "theta_init", "concurrent_prefill"});
        try {
            cfg.engine.variant = variant_from_string(get_string(e, "engine", "variant", "full"));
            cfg.engine.second_pass_mask =
                mask_kind_from_string(get_string(e, "engine", "second_pass_mask", "bidirectional"));
        } catch (const std::invalid_argument& ex) {
            throw ConfigError(std::string("config: engine: ") + ex.what());
        }
        cfg.engine.theta_init = get_field<double>(e, "engine", "theta_init", cfg.engine.theta_init);
        if (cfg.engine.theta_init <= 0) throw ConfigError("config: engine.theta_init must be positive");
        cfg.engine.concurrent_prefill =
            get_field<bool>(e, "engine", "concurrent_prefill", cfg.engine.concurrent_prefill);
    }
    if (j.contains("peft")) {
        const auto& p = j.at("peft");
        cfgdetail::reject_unknown(p, "peft", {"kind", "rank", "alpha"});
        try {
            cfg.peft.kind = peft_kind_from_string(get_string(p, "peft", "kind", "lora"));
        } catch (const std::invalid_argument& ex) {
            throw ConfigError(std::string("config: peft: ") + ex.what());
        }
        cfg.peft.rank = get_field<int>(p, "peft", "rank", cfg.peft.rank);
        cfg.peft.lora_alpha = get_field<double>(p, "peft", "alpha", cfg.peft.lora_alpha);
        if (cfg.peft.rank < 1) throw ConfigError("config: peft.rank must be >= 1");
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        cfgdetail::reject_unknown(t, "train",
                                  {"learning_rate", "update_steps", "warmup_frac", "micro_batch",
                                   "accum_steps", "seed", "log_interval"});
        cfg.train.learning_rate = get_field<double>(t, "train", "learning_rate", cfg.train.learning_rate);
        cfg.train.update_steps = get_field<int>(t, "train", "update_steps", cfg.train.update_steps);
        cfg.train.warmup_frac = get_field<double>(t, "train", "warmup_frac", cfg.train.warmup_frac);
        cfg.train.micro_batch = get_field<int>(t, "train", "micro_batch", cfg.train.micro_batch);
        cfg.train.accum_steps = get_field<int>(t, "train", "accum_steps", cfg.train.accum_steps);
        cfg.train.seed = get_field<std::uint64_t>(t, "train", "seed", cfg.train.seed);
        cfg.train.log_interval = get_field<int>(t, "train", "log_interval", cfg.train.log_interval);
        try {
            cfg.train.validate();
        } catch (const ConfigError&) {
            throw;
        }
    }
    if (j.contains("task")) {
        const auto& d = j.at("task");
        cfgdetail::reject_unknown(d, "task",
                                  {"kind", "n_train", "n_eval", "n_pairs", "data_seed", "train_jsonl",
                                   "eval_jsonl", "template"});
        cfg.data.kind = task_kind_from_string(get_string(d, "task", "kind", "key_value_lookup"));
        cfg.data.n_train = get_field<int>(d, "task", "n_train", cfg.data.n_train);
        cfg.data.n_eval = get_field<int>(d, "task", "n_eval", cfg.data.n_eval);
        cfg.data.n_pairs = get_field<int>(d, "task", "n_pairs", cfg.data.n_pairs);
        cfg.data.data_seed = get_field<std::uint64_t>(d, "task", "data_seed", cfg.data.data_seed);
        cfg.data.train_jsonl = get_string(d, "task", "train_jsonl", "");
        cfg.data.eval_jsonl = get_string(d, "task", "eval_jsonl", "");
        cfg.data.template_kind = template_kind_from_string(get_string(d, "task", "template", "qa"));
        if (cfg.data.n_train < 1 || cfg.data.n_eval < 1) {
            throw ConfigError("config: task.n_train and task.n_eval must be >= 1");
        }
    }
    cfg.out_dir = get_string(j, "", "out_dir", cfg.out_dir);
    return cfg;
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["model"] = {{"n_layers", cfg.model.n_layers},     {"n_heads", cfg.model.n_heads},
                  {"d_model", cfg.model.d_model},       {"d_mlp", cfg.model.d_mlp},
                  {"vocab_size", cfg.model.vocab_size}, {"max_seq_len", cfg.model.max_seq_len}};
    j["engine"] = {{"variant", to_string(cfg.engine.variant)},
                   {"second_pass_mask", to_string(cfg.engine.second_pass_mask)},
                   {"theta_init", cfg.engine.theta_init},
                   {"concurrent_prefill", cfg.engine.concurrent_prefill}};
    j["peft"] = {{"kind", to_string(cfg.peft.kind)}, {"rank", cfg.peft.rank}, {"alpha", cfg.peft.lora_alpha}};
    j["train"] = {{"learning_rate", cfg.train.learning_rate},
                  {"update_steps", cfg.train.update_steps},
                  {"warmup_frac", cfg.train.warmup_frac},
                  {"micro_batch", cfg.train.micro_batch},
                  {"accum_steps", cfg.train.accum_steps},
                  {"seed", cfg.train.seed},
                  {"log_interval", cfg.train.log_interval}};
    j["task"] = {{"kind", to_string(cfg.data.kind)},       {"n_train", cfg.data.n_train},
                 {"n_eval", cfg.data.n_eval},              {"n_pairs", cfg.data.n_pairs},
                 {"data_seed", cfg.data.data_seed},        {"train_jsonl", cfg.data.train_jsonl},
                 {"eval_jsonl", cfg.data.eval_jsonl},      {"template", to_string(cfg.data.template_kind)}};
    j["out_dir"] = cfg.out_dir;
    return j;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file '" + path + "': " + e.what());
    }
    return parse_run_config(j);
}

// Datasets named by a run config: synthetic task splits or JSONL files.
struct RunDatasets {
    std::vector<InstructionExample> train, eval;
    TemplateKind template_kind;
    int n_filtered_train = 0, n_filtered_eval = 0;
};

inline RunDatasets load_datasets(const RunConfig& cfg) {
    RunDatasets ds;
    ds.template_kind = cfg.data.effective_template();
    if (!cfg.data.train_jsonl.empty() || !cfg.data.eval_jsonl.empty()) {
        if (cfg.data.train_jsonl.empty() || cfg.data.eval_jsonl.empty()) {
            throw ConfigError("config: task.train_jsonl and task.eval_jsonl must both be set");
        }
        auto train = load_jsonl(cfg.data.train_jsonl, ds.template_kind, cfg.model.max_seq_len);
        auto eval = load_jsonl(cfg.data.eval_jsonl, ds.template_kind, cfg.model.max_seq_len);
        ds.train = std::move(train.examples);
        ds.eval = std::move(eval.examples);
        ds.n_filtered_train = train.n_filtered;
        ds.n_filtered_eval = eval.n_filtered;
        return ds;
    }
    TaskSpec train_spec{cfg.data.kind, cfg.data.n_train, cfg.data.data_seed, Split::train, cfg.data.n_pairs};
    TaskSpec eval_spec{cfg.data.kind, cfg.data.n_eval, cfg.data.data_seed, Split::eval, cfg.data.n_pairs};
    ds.train = gen_synthetic(train_spec);
    ds.eval = gen_synthetic(eval_spec);
    return ds;
}

}  // namespace bimix
