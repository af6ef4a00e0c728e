#pragma once

// Data pipeline: byte-level tokenizer, prompt templates, synthetic
// instruction-answer task generators, and JSONL ingestion. Everything here is
// a pure function of its inputs.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "bimix/errors.hpp"

namespace bimix {

// 256 byte tokens plus specials; the model vocabulary is padded past this.
class Tokenizer {
public:
    static constexpr int pad_id = 256;
    static constexpr int sep_id = 257;
    static constexpr int eos_id = 258;
    static constexpr int n_tokens = 259;

    static std::vector<int> encode(std::string_view text) {
        std::vector<int> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(static_cast<int>(c));
        return ids;
    }

    // Byte tokens only; special and padding ids are dropped.
    static std::string decode(std::span<const int> ids) {
        std::string out;
        out.reserve(ids.size());
        for (int id : ids) {
            if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
        }
        return out;
    }
};

struct InstructionExample {
    std::string instruction;
    std::string answer;
    std::vector<std::string> choices;  // empty for free-form tasks
    int gold = -1;                     // index into choices when present

    bool has_choices() const { return !choices.empty(); }
};

enum class TemplateKind { qa, multiple_choice };

inline const char* to_string(TemplateKind kind) {
    return kind == TemplateKind::qa ? "qa" : "multiple_choice";
}

inline TemplateKind template_kind_from_string(const std::string& s) {
    if (s == "qa") return TemplateKind::qa;
    if (s == "multiple_choice") return TemplateKind::multiple_choice;
    throw ConfigError("unknown template kind '" + s + "'");
}

struct RenderedExample {
    std::string prompt;
    std::string answer;  // starts with a space; EOS is appended at tokenization
};

inline RenderedExample render_template(const InstructionExample& ex, TemplateKind kind) {
    if (kind == TemplateKind::qa) {
        if (ex.answer.empty()) throw ConfigError("template: missing field 'answer'");
        return {"Question: " + ex.instruction + "\n\nAnswer:", " " + ex.answer};
    }
    if (ex.choices.empty()) throw ConfigError("template: missing field 'choices'");
    if (ex.gold < 0 || ex.gold >= static_cast<int>(ex.choices.size())) {
        throw ConfigError("template: field 'gold' out of range for " + std::to_string(ex.choices.size()) +
                          " choices");
    }
    std::string prompt = "Question: " + ex.instruction + "\n\nChoices:\n";
    for (std::size_t i = 0; i < ex.choices.size(); ++i) {
        prompt += "(" + std::to_string(i) + ") " + ex.choices[i] + "\n";
    }
    prompt += "\nAnswer:";
    return {std::move(prompt), " (" + std::to_string(ex.gold) + ")"};
}

// The answer text rendered for one candidate choice under the MC template.
inline std::string mc_choice_answer(int index) { return " (" + std::to_string(index) + ")"; }

struct TokenizedExample {
    std::vector<int> prompt;
    std::vector<int> answer;  // SEP seed + answer bytes + EOS
};

inline std::vector<int> answer_token_ids(std::string_view answer_text) {
    std::vector<int> ids{Tokenizer::sep_id};
    for (int id : Tokenizer::encode(answer_text)) ids.push_back(id);
    ids.push_back(Tokenizer::eos_id);
    return ids;
}

inline TokenizedExample tokenize_example(const InstructionExample& ex, TemplateKind kind) {
    RenderedExample r = render_template(ex, kind);
    return {Tokenizer::encode(r.prompt), answer_token_ids(r.answer)};
}

inline std::vector<TokenizedExample> tokenize_dataset(const std::vector<InstructionExample>& examples,
                                                      TemplateKind kind) {
    std::vector<TokenizedExample> out;
    out.reserve(examples.size());
    for (const auto& ex : examples) out.push_back(tokenize_example(ex, kind));
    return out;
}

enum class TaskKind { key_value_lookup, reverse_copy, modular_arithmetic, multiple_choice_lookup };
enum class Split { train, eval };

inline const char* to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::key_value_lookup: return "key_value_lookup";
        case TaskKind::reverse_copy: return "reverse_copy";
        case TaskKind::modular_arithmetic: return "modular_arithmetic";
        case TaskKind::multiple_choice_lookup: return "multiple_choice_lookup";
    }
    return "?";
}

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "key_value_lookup") return TaskKind::key_value_lookup;
    if (s == "reverse_copy") return TaskKind::reverse_copy;
    if (s == "modular_arithmetic") return TaskKind::modular_arithmetic;
    if (s == "multiple_choice_lookup") return TaskKind::multiple_choice_lookup;
    throw ConfigError("unknown task kind '" + s + "'");
}

inline TemplateKind template_for(TaskKind kind) {
    return kind == TaskKind::multiple_choice_lookup ? TemplateKind::multiple_choice : TemplateKind::qa;
}

struct TaskSpec {
    TaskKind kind = TaskKind::key_value_lookup;
    int n = 100;
    std::uint64_t seed = 0;
    Split split = Split::train;
    int n_pairs = 3;  // lookup tasks: bindings per prompt
};

namespace detail {

// Lookup-key universe: letter x digit combinations, partitioned by the parity
// of letter index + digit index. Train and eval keys are disjoint strings but
// every letter and every digit occurs in both splits.
inline constexpr std::string_view kKeyLetters = "bcdfghjk";
inline constexpr std::string_view kKeyDigits = "01234567";
inline constexpr std::string_view kValueChars = "mnprstuw";

inline std::vector<std::string> key_universe(Split split) {
    std::vector<std::string> keys;
    for (std::size_t li = 0; li < kKeyLetters.size(); ++li) {
        for (std::size_t di = 0; di < kKeyDigits.size(); ++di) {
            if (((li + di) % 2 == 0) == (split == Split::train)) {
                keys.push_back(std::string{kKeyLetters[li]} + std::string{kKeyDigits[di]});
            }
        }
    }
    return keys;
}

inline std::mt19937 task_rng(const TaskSpec& spec) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(spec.kind), static_cast<std::uint32_t>(spec.split)};
    return std::mt19937(seq);
}

struct LookupPrompt {
    std::string text;
    std::string value;              // value bound to the queried key
    std::vector<std::string> used;  // values appearing in the prompt
};

// Keys within one prompt have pairwise-distinct letters and digits, so a
// single matching character already identifies the queried binding.
inline LookupPrompt lookup_prompt(const TaskSpec& spec, const std::vector<std::string>& keys,
                                  std::mt19937& rng) {
    std::uniform_int_distribution<std::size_t> key_pick(0, keys.size() - 1);
    std::uniform_int_distribution<std::size_t> val_pick(0, kValueChars.size() - 1);

    std::vector<std::size_t> picked;
    while (picked.size() < static_cast<std::size_t>(spec.n_pairs)) {
        const std::size_t k = key_pick(rng);
        bool clashes = false;
        for (std::size_t other : picked) {
            clashes = clashes || keys[other][0] == keys[k][0] || keys[other][1] == keys[k][1];
        }
        if (!clashes) picked.push_back(k);
    }
    LookupPrompt out;
    std::vector<std::string> values;
    for (std::size_t i = 0; i < picked.size(); ++i) {
        values.push_back(std::string{kValueChars[val_pick(rng)]});
        if (i) out.text += ' ';
        out.text += keys[picked[i]] + ":" + values.back();
    }
    const std::size_t q = std::uniform_int_distribution<std::size_t>(0, picked.size() - 1)(rng);
    out.text += ";" + keys[picked[q]];
    out.value = values[q];
    out.used = std::move(values);
    return out;
}

}  // namespace detail

inline std::vector<InstructionExample> gen_synthetic(const TaskSpec& spec) {
    if (spec.n < 1) throw ConfigError("task: n must be >= 1");
    std::mt19937 rng = detail::task_rng(spec);
    std::vector<InstructionExample> out;
    out.reserve(spec.n);

    switch (spec.kind) {
        case TaskKind::key_value_lookup: {
            const auto keys = detail::key_universe(spec.split);
            const std::size_t max_pairs = detail::kKeyLetters.size();
            if (spec.n_pairs < 1 || static_cast<std::size_t>(spec.n_pairs) > max_pairs) {
                throw ConfigError("task: n_pairs must be in [1," + std::to_string(max_pairs) +
                                  "] to keep key letters and digits distinct");
            }
            for (int i = 0; i < spec.n; ++i) {
                auto p = detail::lookup_prompt(spec, keys, rng);
                out.push_back({p.text, p.value, {}, -1});
            }
            break;
        }
        case TaskKind::reverse_copy: {
            const std::string_view letters =
                spec.split == Split::train ? "abcdefghijklm" : "nopqrstuvwxyz";
            std::uniform_int_distribution<int> len(3, 6);
            std::uniform_int_distribution<std::size_t> pick(0, letters.size() - 1);
            for (int i = 0; i < spec.n; ++i) {
                std::string s;
                const int L = len(rng);
                for (int j = 0; j < L; ++j) s.push_back(letters[pick(rng)]);
                out.push_back({s, std::string(s.rbegin(), s.rend()), {}, -1});
            }
            break;
        }
        case TaskKind::modular_arithmetic: {
            std::uniform_int_distribution<int> lhs(spec.split == Split::train ? 0 : 5,
                                                   spec.split == Split::train ? 4 : 9);
            std::uniform_int_distribution<int> rhs(0, 9);
            for (int i = 0; i < spec.n; ++i) {
                const int a = lhs(rng), b = rhs(rng);
                out.push_back({std::to_string(a) + "+" + std::to_string(b),
                               std::to_string((a + b) % 10), {}, -1});
            }
            break;
        }
        case TaskKind::multiple_choice_lookup: {
            const auto keys = detail::key_universe(spec.split);
            const std::size_t max_pairs = detail::kKeyLetters.size();
            if (spec.n_pairs < 1 || static_cast<std::size_t>(spec.n_pairs) > max_pairs) {
                throw ConfigError("task: n_pairs must be in [1," + std::to_string(max_pairs) +
                                  "] to keep key letters and digits distinct");
            }
            constexpr int n_choices = 4;
            if (detail::kValueChars.size() < n_choices) throw ConfigError("task: value alphabet too small");
            for (int i = 0; i < spec.n; ++i) {
                auto p = detail::lookup_prompt(spec, keys, rng);
                InstructionExample ex;
                ex.instruction = p.text;
                ex.answer = p.value;
                std::vector<std::string> pool;
                for (char c : detail::kValueChars) {
                    std::string v{c};
                    if (v != p.value) pool.push_back(v);
                }
                std::shuffle(pool.begin(), pool.end(), rng);
                ex.choices.assign(pool.begin(), pool.begin() + (n_choices - 1));
                const int slot = std::uniform_int_distribution<int>(0, n_choices - 1)(rng);
                ex.choices.insert(ex.choices.begin() + slot, p.value);
                ex.gold = slot;
                out.push_back(std::move(ex));
            }
            break;
        }
    }
    return out;
}

struct LoadReport {
    std::vector<InstructionExample> examples;
    int n_filtered = 0;
    int n_total = 0;
};

// Order-preserving JSONL load; over-length examples (rendered + tokenized,
// including the seed and EOS tokens) are dropped and counted.
inline LoadReport load_jsonl(const std::string& path, TemplateKind kind, int max_seq_len) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file '" + path + "'");
    LoadReport report;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        if (!j.is_object()) throw ConfigError("line " + std::to_string(line_no) + ": expected a JSON object");
        auto require_string = [&](const char* field) {
            if (!j.contains(field)) {
                throw ConfigError("line " + std::to_string(line_no) + ": missing field '" + field + "'");
            }
            if (!j[field].is_string()) {
                throw ConfigError("line " + std::to_string(line_no) + ": field '" + field +
                                  "' must be a string");
            }
            return j[field].template get<std::string>();
        };
        InstructionExample ex;
        ex.instruction = require_string("instruction");
        ex.answer = require_string("answer");
        if (j.contains("choices")) {
            if (!j["choices"].is_array()) {
                throw ConfigError("line " + std::to_string(line_no) + ": field 'choices' must be an array");
            }
            for (const auto& c : j["choices"]) {
                if (!c.is_string()) {
                    throw ConfigError("line " + std::to_string(line_no) +
                                      ": field 'choices' must contain strings");
                }
                ex.choices.push_back(c.template get<std::string>());
            }
        }
        if (j.contains("gold")) {
            if (!j["gold"].is_number_integer()) {
                throw ConfigError("line " + std::to_string(line_no) + ": field 'gold' must be an integer");
            }
            ex.gold = j["gold"].template get<int>();
        }

        ++report.n_total;
        TokenizedExample tok = tokenize_example(ex, kind);
        if (tok.prompt.size() + tok.answer.size() > static_cast<std::size_t>(max_seq_len)) {
            ++report.n_filtered;
            continue;
        }
        report.examples.push_back(std::move(ex));
    }
    return report;
}

}  // namespace bimix
