#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "grist/corpus.hpp"
#include "grist/error.hpp"
#include "grist/text.hpp"

namespace grist::eval {

// ---------------------------------------------------------------------------
// Rouge
// ---------------------------------------------------------------------------

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

inline RougeScore make_rouge(double overlap, double cand_total, double ref_total) {
    RougeScore s;
    if (cand_total > 0.0) s.precision = overlap / cand_total;
    if (ref_total > 0.0) s.recall = overlap / ref_total;
    if (s.precision + s.recall > 0.0) {
        s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    }
    return s;
}

/// Word n-gram Rouge with clipped (multiset) overlap counts. Texts are
/// lowercased and whitespace-normalized first.
inline RougeScore rouge_n(std::string_view candidate, std::string_view reference, std::size_t n) {
    require(n >= 1, "rouge_n: n must be >= 1");
    auto cand_words = text::normalized_words(candidate);
    auto ref_words = text::normalized_words(reference);
    auto grams = [n](const std::vector<std::string>& words) {
        std::unordered_map<std::string, std::size_t> counts;
        if (words.size() < n) return counts;
        for (std::size_t i = 0; i + n <= words.size(); ++i) {
            std::string key = words[i];
            for (std::size_t j = 1; j < n; ++j) {
                key.push_back('\x1f');
                key += words[i + j];
            }
            ++counts[key];
        }
        return counts;
    };
    auto cand_grams = grams(cand_words);
    auto ref_grams = grams(ref_words);
    std::size_t cand_total = 0;
    std::size_t ref_total = 0;
    std::size_t overlap = 0;
    for (const auto& [g, c] : cand_grams) cand_total += c;
    for (const auto& [g, c] : ref_grams) {
        ref_total += c;
        auto it = cand_grams.find(g);
        if (it != cand_grams.end()) {
            overlap += std::min(c, it->second);
        }
    }
    if (cand_total == 0 || ref_total == 0) {
        return {};
    }
    return make_rouge(static_cast<double>(overlap), static_cast<double>(cand_total),
                      static_cast<double>(ref_total));
}

namespace detail {

/// Positions of reference words hit by one canonical LCS against the
/// candidate (standard DP, deterministic backtrack preferring the shorter
/// reference prefix on ties).
inline std::vector<std::size_t> lcs_hit_positions(const std::vector<std::string>& ref,
                                                  const std::vector<std::string>& cand) {
    const std::size_t n = ref.size();
    const std::size_t m = cand.size();
    std::vector<std::size_t> dp((n + 1) * (m + 1), 0);
    auto at = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j) {
            if (ref[i - 1] == cand[j - 1]) {
                dp[at(i, j)] = dp[at(i - 1, j - 1)] + 1;
            } else {
                dp[at(i, j)] = std::max(dp[at(i - 1, j)], dp[at(i, j - 1)]);
            }
        }
    }
    std::vector<std::size_t> hits;
    std::size_t i = n;
    std::size_t j = m;
    while (i > 0 && j > 0) {
        if (ref[i - 1] == cand[j - 1]) {
            hits.push_back(i - 1);
            --i;
            --j;
        } else if (dp[at(i - 1, j)] >= dp[at(i, j - 1)]) {
            --i;
        } else {
            --j;
        }
    }
    std::reverse(hits.begin(), hits.end());
    return hits;
}

}  // namespace detail

namespace detail {

/// Union of LCS-matched word positions, per sentence of `these` against every
/// sentence of `those`, as a fraction of the total `these` word count.
inline double union_lcs_coverage(const std::vector<std::vector<std::string>>& these,
                                 const std::vector<std::vector<std::string>>& those,
                                 std::size_t total_words) {
    double hits = 0.0;
    for (const auto& sentence : these) {
        std::vector<char> hit(sentence.size(), 0);
        for (const auto& other : those) {
            for (auto pos : lcs_hit_positions(sentence, other)) {
                hit[pos] = 1;
            }
        }
        for (char h : hit) {
            if (h) hits += 1.0;
        }
    }
    return hits / static_cast<double>(total_words);
}

}  // namespace detail

/// Summary-level LCS Rouge: recall is the fraction of reference words covered
/// by the union of sentence-pair LCS matches, precision the same union taken
/// on the candidate side. Swapping candidate and reference exchanges
/// precision and recall exactly.
inline RougeScore rouge_cls(std::string_view candidate, std::string_view reference) {
    auto words_of = [](std::string_view text_in, std::size_t& total) {
        std::vector<std::vector<std::string>> out;
        total = 0;
        for (const auto& s : corpus::sentences(text_in)) {
            out.push_back(text::normalized_words(s));
            total += out.back().size();
        }
        return out;
    };
    std::size_t cand_total = 0;
    std::size_t ref_total = 0;
    auto cand_words = words_of(candidate, cand_total);
    auto ref_words = words_of(reference, ref_total);
    if (cand_total == 0 || ref_total == 0) {
        return {};
    }
    RougeScore s;
    s.recall = detail::union_lcs_coverage(ref_words, cand_words, ref_total);
    s.precision = detail::union_lcs_coverage(cand_words, ref_words, cand_total);
    if (s.precision + s.recall > 0.0) {
        s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Task examples and choice scoring
// ---------------------------------------------------------------------------

enum class TaskType { long_text, medium_text, short_single, short_multi };

inline std::string_view to_string(TaskType t) {
    switch (t) {
        case TaskType::long_text: return "long";
        case TaskType::medium_text: return "medium";
        case TaskType::short_single: return "short_single";
        case TaskType::short_multi: return "short_multi";
    }
    fail("unknown task type");
}

inline TaskType task_type_from_string(std::string_view s) {
    if (s == "long") return TaskType::long_text;
    if (s == "medium") return TaskType::medium_text;
    if (s == "short_single") return TaskType::short_single;
    if (s == "short_multi") return TaskType::short_multi;
    fail("unknown task type \"", s, "\"");
}

inline bool is_choice_task(TaskType t) {
    return t == TaskType::short_single || t == TaskType::short_multi;
}

struct TaskExample {
    std::string id;
    TaskType task_type = TaskType::long_text;
    std::string instruction;
    std::string transcript;
    /// Gold output. For short_multi this is the gold option set instead.
    std::string reference;
    std::vector<std::string> reference_set;
    /// Allowed options for the short (choice) types.
    std::vector<std::string> choices;
};

inline void validate(const TaskExample& ex) {
    if (ex.task_type == TaskType::short_multi) {
        require(!ex.reference_set.empty(), "task \"", ex.id, "\": multi-choice gold set is empty");
    } else {
        require(!ex.reference.empty(), "task \"", ex.id, "\": reference is empty");
    }
    if (is_choice_task(ex.task_type)) {
        require(!ex.choices.empty(), "task \"", ex.id, "\": choice task without choices");
    }
}

struct ChoiceResult {
    bool correct = false;
    /// Set when the prediction names an option outside the allowed set;
    /// counted incorrect, never an error.
    bool flagged_out_of_choices = false;
};

namespace detail {

/// Split a multi-choice prediction into selected options (comma, semicolon,
/// slash, newline, or " and " boundaries).
inline std::vector<std::string> split_selections(std::string_view prediction) {
    std::string s(prediction);
    for (const char* sep : {";", "/", "\n"}) {
        std::size_t pos = 0;
        while ((pos = s.find(sep, pos)) != std::string::npos) {
            s.replace(pos, 1, ",");
        }
    }
    std::size_t pos = 0;
    while ((pos = s.find(" and ", pos)) != std::string::npos) {
        s.replace(pos, 5, ",");
    }
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= s.size()) {
        std::size_t comma = s.find(',', start);
        if (comma == std::string::npos) comma = s.size();
        std::string part = text::strict_normalize(std::string_view(s).substr(start, comma - start));
        if (!part.empty()) parts.push_back(std::move(part));
        start = comma + 1;
    }
    return parts;
}

}  // namespace detail

/// Score one prediction. Single-choice: normalized string equality with the
/// gold answer. Multi-choice: exact set equality of the selected options.
inline ChoiceResult score_choice(std::string_view prediction, const TaskExample& example) {
    validate(example);
    require(is_choice_task(example.task_type), "score_choice: task \"", example.id,
            "\" is not a choice task");
    std::set<std::string> allowed;
    for (const auto& c : example.choices) {
        allowed.insert(text::strict_normalize(c));
    }
    ChoiceResult result;
    if (example.task_type == TaskType::short_single) {
        std::string pred = text::strict_normalize(prediction);
        if (!allowed.count(pred)) {
            result.flagged_out_of_choices = true;
            return result;
        }
        result.correct = pred == text::strict_normalize(example.reference);
        return result;
    }
    std::set<std::string> selected;
    for (auto& part : detail::split_selections(prediction)) {
        if (!allowed.count(part)) {
            result.flagged_out_of_choices = true;
        }
        selected.insert(std::move(part));
    }
    std::set<std::string> gold;
    for (const auto& g : example.reference_set) {
        gold.insert(text::strict_normalize(g));
    }
    result.correct = !result.flagged_out_of_choices && selected == gold;
    return result;
}

/// 100 * correct / total, reported to one decimal place.
inline double aggregate_accuracy(const std::vector<bool>& results) {
    require(!results.empty(), "aggregate_accuracy: empty result list");
    std::size_t correct = 0;
    for (bool r : results) {
        if (r) ++correct;
    }
    double pct = 100.0 * static_cast<double>(correct) / static_cast<double>(results.size());
    return std::round(pct * 10.0) / 10.0;
}

// ---------------------------------------------------------------------------
// Few-shot prompt construction
// ---------------------------------------------------------------------------

/// k exemplar blocks followed by the query block ending at the answer slot.
/// Exemplars are used in their given order; all must share the query's task
/// type and carry a reference.
inline std::string build_fewshot_prompt(const TaskExample& query,
                                        std::span<const TaskExample> exemplars, std::size_t k) {
    require(exemplars.size() >= k, "build_fewshot_prompt: need ", k, " exemplars, have ",
            exemplars.size());
    std::ostringstream out;
    for (std::size_t i = 0; i < k; ++i) {
        const auto& ex = exemplars[i];
        require(ex.task_type == query.task_type, "build_fewshot_prompt: exemplar \"", ex.id,
                "\" has task type ", to_string(ex.task_type), ", query needs ",
                to_string(query.task_type));
        std::string answer = ex.reference;
        if (ex.task_type == TaskType::short_multi) {
            for (std::size_t j = 0; j < ex.reference_set.size(); ++j) {
                if (j > 0) answer += ", ";
                answer += ex.reference_set[j];
            }
        }
        require(!answer.empty(), "build_fewshot_prompt: exemplar \"", ex.id, "\" has no reference");
        out << ex.instruction << "\n"
            << "Transcript: " << ex.transcript << "\n"
            << "Output: " << answer << "\n\n";
    }
    out << query.instruction << "\n"
        << "Transcript: " << query.transcript << "\n"
        << "Output:";
    return out.str();
}

// ---------------------------------------------------------------------------
// Task file IO (one record per line)
// ---------------------------------------------------------------------------

inline TaskExample task_from_json(const nlohmann::json& j) {
    TaskExample ex;
    ex.task_type = task_type_from_string(j.at("task_type").get<std::string>());
    ex.id = j.value("id", std::string{});
    ex.instruction = j.at("instruction").get<std::string>();
    ex.transcript = j.at("transcript").get<std::string>();
    if (j.contains("reference")) {
        if (j.at("reference").is_array()) {
            ex.reference_set = j.at("reference").get<std::vector<std::string>>();
        } else {
            ex.reference = j.at("reference").get<std::string>();
        }
    }
    if (j.contains("choices")) {
        ex.choices = j.at("choices").get<std::vector<std::string>>();
    }
    validate(ex);
    return ex;
}

inline nlohmann::json to_json(const TaskExample& ex) {
    nlohmann::json j{{"id", ex.id},
                     {"task_type", std::string(to_string(ex.task_type))},
                     {"instruction", ex.instruction},
                     {"transcript", ex.transcript}};
    if (ex.task_type == TaskType::short_multi) {
        j["reference"] = ex.reference_set;
    } else {
        j["reference"] = ex.reference;
    }
    if (!ex.choices.empty()) {
        j["choices"] = ex.choices;
    }
    return j;
}

inline std::vector<TaskExample> read_tasks_jsonl(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open task file \"", path, "\"");
    std::vector<TaskExample> tasks;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            fail(path, ": line ", line_no, ": malformed record");
        }
        auto ex = task_from_json(j);
        if (ex.id.empty()) {
            ex.id = "task-" + std::to_string(line_no);
        }
        tasks.push_back(std::move(ex));
    }
    return tasks;
}

// ---------------------------------------------------------------------------
// Entity-level note scoring
// ---------------------------------------------------------------------------

struct EntityRubric {
    std::string transcript_id;
    /// (entity_id, phrase), ids unique.
    std::vector<std::pair<std::string, std::string>> entities;
};

inline void validate(const EntityRubric& r) {
    require(!r.entities.empty(), "rubric \"", r.transcript_id, "\" has no entities");
    std::set<std::string> ids;
    for (const auto& [id, phrase] : r.entities) {
        require(ids.insert(id).second, "rubric \"", r.transcript_id, "\": duplicate entity id \"",
                id, "\"");
    }
}

enum class EntityStatus { captured, missed, incorrect };

inline std::string_view to_string(EntityStatus s) {
    switch (s) {
        case EntityStatus::captured: return "captured";
        case EntityStatus::missed: return "missed";
        case EntityStatus::incorrect: return "incorrect";
    }
    fail("unknown entity status");
}

inline EntityStatus entity_status_from_string(std::string_view s) {
    if (s == "captured") return EntityStatus::captured;
    if (s == "missed") return EntityStatus::missed;
    if (s == "incorrect") return EntityStatus::incorrect;
    fail("unknown entity status \"", s, "\"");
}

/// One judged (transcript, note) unit. Every rubric entity appears exactly
/// once with a status; irrelevant entries reference note spans, not rubric
/// ids.
struct EntityJudgment {
    std::string transcript_id;
    std::string model;
    std::vector<std::pair<std::string, EntityStatus>> entities;
    std::vector<std::string> irrelevant_spans;
    bool provisional = false;
};

struct NoteEvalReport {
    std::string model;
    double avg_incorrect = 0.0;
    double avg_irrelevant = 0.0;
    double avg_missed = 0.0;
    std::size_t n_units = 0;
};

/// Average the three error counts over all judgment units, validating each
/// judgment against its rubric (every entity judged exactly once).
inline NoteEvalReport aggregate_entity_report(std::span<const EntityJudgment> judgments,
                                              std::span<const EntityRubric> rubrics) {
    require(!judgments.empty(), "aggregate_entity_report: no judgments");
    std::map<std::string, const EntityRubric*> by_transcript;
    for (const auto& r : rubrics) {
        validate(r);
        by_transcript[r.transcript_id] = &r;
    }
    NoteEvalReport report;
    report.model = judgments.front().model;
    std::size_t incorrect = 0;
    std::size_t irrelevant = 0;
    std::size_t missed = 0;
    for (const auto& judgment : judgments) {
        require(judgment.model == report.model,
                "aggregate_entity_report: judgments mix models \"", report.model, "\" and \"",
                judgment.model, "\"");
        auto it = by_transcript.find(judgment.transcript_id);
        require(it != by_transcript.end(), "aggregate_entity_report: unknown transcript \"",
                judgment.transcript_id, "\"");
        const auto& rubric = *it->second;
        std::map<std::string, EntityStatus> statuses;
        for (const auto& [id, status] : judgment.entities) {
            require(statuses.emplace(id, status).second,
                    "aggregate_entity_report: entity \"", id, "\" judged twice in transcript \"",
                    judgment.transcript_id, "\"");
        }
        for (const auto& [id, phrase] : rubric.entities) {
            auto st = statuses.find(id);
            require(st != statuses.end(), "aggregate_entity_report: entity \"", id,
                    "\" of transcript \"", judgment.transcript_id, "\" has no status");
            switch (st->second) {
                case EntityStatus::missed: ++missed; break;
                case EntityStatus::incorrect: ++incorrect; break;
                case EntityStatus::captured: break;
            }
            statuses.erase(st);
        }
        require(statuses.empty(), "aggregate_entity_report: judgment for transcript \"",
                judgment.transcript_id, "\" names entities outside the rubric");
        irrelevant += judgment.irrelevant_spans.size();
    }
    report.n_units = judgments.size();
    const auto n = static_cast<double>(report.n_units);
    report.avg_incorrect = static_cast<double>(incorrect) / n;
    report.avg_irrelevant = static_cast<double>(irrelevant) / n;
    report.avg_missed = static_cast<double>(missed) / n;
    return report;
}

/// Word-set Jaccard similarity; words are lowercased with surrounding
/// punctuation stripped.
inline double word_set_jaccard(std::string_view a, std::string_view b) {
    auto wa = text::bare_words(a);
    auto wb = text::bare_words(b);
    std::set<std::string> sa(wa.begin(), wa.end());
    std::set<std::string> sb(wb.begin(), wb.end());
    if (sa.empty() && sb.empty()) return 0.0;
    std::size_t inter = 0;
    for (const auto& w : sa) {
        if (sb.count(w)) ++inter;
    }
    std::size_t uni = sa.size() + sb.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Pre-fill a judgment by matching rubric phrases against note sentences with
/// word-set Jaccard. The result is always flagged provisional: the metric is
/// defined by expert judgment and this only primes the file for review.
inline EntityJudgment auto_match_entities(const EntityRubric& rubric, std::string_view note,
                                          double threshold, const std::string& model = "auto") {
    validate(rubric);
    auto note_sentences = corpus::sentences(note);
    EntityJudgment judgment;
    judgment.transcript_id = rubric.transcript_id;
    judgment.model = model;
    judgment.provisional = true;
    std::vector<char> sentence_matched(note_sentences.size(), 0);
    for (const auto& [id, phrase] : rubric.entities) {
        bool captured = false;
        for (std::size_t i = 0; i < note_sentences.size(); ++i) {
            if (word_set_jaccard(phrase, note_sentences[i]) >= threshold) {
                captured = true;
                sentence_matched[i] = 1;
            }
        }
        judgment.entities.emplace_back(id, captured ? EntityStatus::captured : EntityStatus::missed);
    }
    for (std::size_t i = 0; i < note_sentences.size(); ++i) {
        if (!sentence_matched[i]) {
            judgment.irrelevant_spans.push_back(note_sentences[i]);
        }
    }
    return judgment;
}

// ---------------------------------------------------------------------------
// Rubric/judgment file IO and the report table
// ---------------------------------------------------------------------------

inline EntityRubric rubric_from_json(const nlohmann::json& j) {
    EntityRubric r;
    r.transcript_id = j.at("transcript_id").get<std::string>();
    for (const auto& e : j.at("entities")) {
        r.entities.emplace_back(e.at("id").get<std::string>(), e.at("text").get<std::string>());
    }
    validate(r);
    return r;
}

inline nlohmann::json to_json(const EntityRubric& r) {
    nlohmann::json entities = nlohmann::json::array();
    for (const auto& [id, phrase] : r.entities) {
        entities.push_back({{"id", id}, {"text", phrase}});
    }
    return {{"transcript_id", r.transcript_id}, {"entities", entities}};
}

inline EntityJudgment judgment_from_json(const nlohmann::json& j) {
    EntityJudgment judgment;
    judgment.transcript_id = j.at("transcript_id").get<std::string>();
    judgment.model = j.at("model").get<std::string>();
    for (const auto& e : j.at("entities")) {
        judgment.entities.emplace_back(e.at("id").get<std::string>(),
                                       entity_status_from_string(e.at("status").get<std::string>()));
    }
    if (j.contains("irrelevant")) {
        judgment.irrelevant_spans = j.at("irrelevant").get<std::vector<std::string>>();
    }
    judgment.provisional = j.value("provisional", false);
    return judgment;
}

inline nlohmann::json to_json(const EntityJudgment& judgment) {
    nlohmann::json entities = nlohmann::json::array();
    for (const auto& [id, status] : judgment.entities) {
        entities.push_back({{"id", id}, {"status", std::string(to_string(status))}});
    }
    return {{"transcript_id", judgment.transcript_id},
            {"model", judgment.model},
            {"entities", entities},
            {"irrelevant", judgment.irrelevant_spans},
            {"provisional", judgment.provisional}};
}

template <typename T, typename Parse>
std::vector<T> read_jsonl_as(const std::string& path, Parse&& parse) {
    std::ifstream in(path);
    require(in.good(), "cannot open \"", path, "\"");
    std::vector<T> items;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            fail(path, ": line ", line_no, ": malformed record");
        }
        items.push_back(parse(j));
    }
    return items;
}

inline std::vector<EntityRubric> read_rubrics_jsonl(const std::string& path) {
    return read_jsonl_as<EntityRubric>(path, rubric_from_json);
}

inline std::vector<EntityJudgment> read_judgments_jsonl(const std::string& path) {
    return read_jsonl_as<EntityJudgment>(path, judgment_from_json);
}

/// Aligned text table with one row per model.
inline std::string render_entity_table(std::span<const NoteEvalReport> reports) {
    std::size_t name_width = 5;
    for (const auto& r : reports) {
        name_width = std::max(name_width, r.model.size());
    }
    std::ostringstream out;
    out << std::left << std::setw(static_cast<int>(name_width) + 2) << "Model" << std::right
        << std::setw(11) << "#Incorrect" << std::setw(12) << "#Irrelevant" << std::setw(9)
        << "#Missed" << "\n";
    out << std::string(name_width + 2 + 11 + 12 + 9, '-') << "\n";
    out << std::fixed << std::setprecision(2);
    for (const auto& r : reports) {
        out << std::left << std::setw(static_cast<int>(name_width) + 2) << r.model << std::right
            << std::setw(11) << r.avg_incorrect << std::setw(12) << r.avg_irrelevant << std::setw(9)
            << r.avg_missed << "\n";
    }
    return out.str();
}

}  // namespace grist::eval
