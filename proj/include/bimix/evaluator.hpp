#pragma once

// Evaluation harness: multiple-choice scoring by answer log-likelihood,
// generative exact match with regex answer extraction, and mixing-ratio
// reports over the training metrics stream.

#include <istream>
#include <optional>
#include <regex>
#include <sstream>

#include "bimix/engine.hpp"

namespace bimix {

// Sum of answer-token log-probabilities for each candidate answer text, the
// prompt prefilled once per choice. No length normalization by default; the
// normalized variant divides by the scored-token count.
template <typename S>
std::vector<double> score_choices(const TunedModel<S>& m, std::span<const int> prompt_ids,
                                  const std::vector<std::string>& choices, bool length_normalize = false) {
    if (choices.size() < 2) throw std::invalid_argument("score_choices: need at least two choices");
    NoGradGuard ng;
    std::vector<double> scores;
    scores.reserve(choices.size());
    for (const auto& text : choices) {
        const std::vector<int> answer = answer_token_ids(text);
        auto fwd = forward_for_training<S>(m, prompt_ids, answer);
        const double sum_logprob = -static_cast<double>(fwd.loss.item()) * static_cast<double>(fwd.n_scored);
        scores.push_back(length_normalize ? sum_logprob / static_cast<double>(fwd.n_scored) : sum_logprob);
    }
    return scores;
}

// Argmax with ties broken toward the lowest index; reports whether a tie
// occurred at the top.
inline std::pair<std::size_t, bool> argmax_with_ties(const std::vector<double>& scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) best = i;
    }
    bool tie = false;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (i != best && scores[i] == scores[best]) tie = true;
    }
    return {best, tie};
}

struct McReport {
    double accuracy = 0.0;
    int correct = 0;
    int ties = 0;
    int n = 0;
};

template <typename S>
McReport mc_accuracy(const TunedModel<S>& m, const std::vector<InstructionExample>& dataset,
                     bool length_normalize = false) {
    if (dataset.empty()) throw ConfigError("mc_accuracy: empty dataset");
    McReport report;
    for (const auto& ex : dataset) {
        if (!ex.has_choices() || ex.gold < 0 || ex.gold >= static_cast<int>(ex.choices.size())) {
            throw ConfigError("mc_accuracy: example lacks choices or a valid gold index");
        }
        const RenderedExample r = render_template(ex, TemplateKind::multiple_choice);
        const std::vector<int> prompt = Tokenizer::encode(r.prompt);
        std::vector<std::string> candidates;
        for (std::size_t i = 0; i < ex.choices.size(); ++i) candidates.push_back(mc_choice_answer(i));
        const auto scores = score_choices(m, prompt, candidates, length_normalize);
        auto [pred, tie] = argmax_with_ties(scores);
        if (tie) ++report.ties;
        if (static_cast<int>(pred) == ex.gold) ++report.correct;
        ++report.n;
    }
    report.accuracy = static_cast<double>(report.correct) / report.n;
    return report;
}

// Rightmost match start wins; the first capture group is the extracted answer.
inline std::optional<std::string> extract_last_match(const std::string& text, const std::regex& re) {
    std::optional<std::string> last;
    auto begin = text.cbegin();
    std::smatch match;
    while (begin <= text.cend() && std::regex_search(begin, text.cend(), match, re)) {
        last = match[1].str();
        begin = match[0].first + 1;
    }
    return last;
}

inline std::regex compile_answer_pattern(const std::string& pattern) {
    std::regex re;
    try {
        re = std::regex(pattern);
    } catch (const std::regex_error& e) {
        throw ConfigError("invalid answer pattern '" + pattern + "': " + e.what());
    }
    if (re.mark_count() < 1) {
        throw ConfigError("answer pattern '" + pattern + "' needs one capture group");
    }
    return re;
}

inline std::string normalize_answer(std::string s) {
    const auto first = s.find_first_not_of(" \t\n\r");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\n\r");
    return s.substr(first, last - first + 1);
}

struct GenReport {
    double accuracy = 0.0;
    int correct = 0;
    int unparsed = 0;
    int n = 0;
};

// Greedy generation; the last pattern match in the generated text is compared
// to the gold answer after whitespace normalization. Generations without a
// match count as wrong and are tallied separately.
template <typename S>
GenReport generative_exact_match(const TunedModel<S>& m, const std::vector<InstructionExample>& dataset,
                                 TemplateKind kind, const std::string& pattern, int max_new) {
    if (dataset.empty()) throw ConfigError("generative_exact_match: empty dataset");
    const std::regex re = compile_answer_pattern(pattern);
    GenReport report;
    for (const auto& ex : dataset) {
        const RenderedExample r = render_template(ex, kind);
        const std::vector<int> prompt = Tokenizer::encode(r.prompt);
        const std::vector<int> out = generate(m, prompt, max_new);
        const std::string text = Tokenizer::decode(out);
        const auto extracted = extract_last_match(text, re);
        if (!extracted) {
            ++report.unparsed;
        } else if (normalize_answer(*extracted) == normalize_answer(ex.answer)) {
            ++report.correct;
        }
        ++report.n;
    }
    report.accuracy = static_cast<double>(report.correct) / report.n;
    return report;
}

struct RatioReport {
    std::vector<int> steps;
    std::vector<double> mean_alpha_k, mean_alpha_v;  // averaged over layers, per logged step
    std::vector<double> final_alpha_k, final_alpha_v;  // per layer, last logged step
};

// Aggregates the metrics CSV: per-step layer-averaged ratios plus the final
// per-layer table.
inline RatioReport ratio_report(std::istream& csv) {
    std::string header;
    if (!std::getline(csv, header)) throw ConfigError("ratio_report: empty metrics stream");
    std::vector<std::string> columns;
    {
        std::istringstream hs(header);
        std::string col;
        while (std::getline(hs, col, ',')) columns.push_back(col);
    }
    std::vector<std::size_t> k_cols, v_cols;
    std::size_t step_col = std::string::npos;
    for (std::size_t i = 0; i < columns.size(); ++i) {
        if (columns[i] == "step") step_col = i;
        if (columns[i].rfind("alpha_k.", 0) == 0) k_cols.push_back(i);
        if (columns[i].rfind("alpha_v.", 0) == 0) v_cols.push_back(i);
    }
    if (step_col == std::string::npos || k_cols.empty() || v_cols.empty()) {
        throw ConfigError("ratio_report: metrics stream is missing step/alpha columns");
    }

    RatioReport report;
    std::string line;
    std::vector<double> last_k, last_v;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (cells.size() != columns.size()) {
            throw ConfigError("ratio_report: row has " + std::to_string(cells.size()) + " cells, header has " +
                              std::to_string(columns.size()));
        }
        report.steps.push_back(std::stoi(cells[step_col]));
        double sum_k = 0, sum_v = 0;
        last_k.clear();
        last_v.clear();
        for (std::size_t c : k_cols) {
            last_k.push_back(std::stod(cells[c]));
            sum_k += last_k.back();
        }
        for (std::size_t c : v_cols) {
            last_v.push_back(std::stod(cells[c]));
            sum_v += last_v.back();
        }
        report.mean_alpha_k.push_back(sum_k / k_cols.size());
        report.mean_alpha_v.push_back(sum_v / v_cols.size());
    }
    if (report.steps.empty()) throw ConfigError("ratio_report: no metric rows");
    report.final_alpha_k = std::move(last_k);
    report.final_alpha_v = std::move(last_v);
    return report;
}

inline RatioReport ratio_report_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open metrics file '" + path + "'");
    return ratio_report(in);
}

}  // namespace bimix
