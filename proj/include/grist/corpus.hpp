#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "grist/error.hpp"
#include "grist/text.hpp"

namespace grist::corpus {

enum class DocKind { general, medical, instruction };

inline std::string_view to_string(DocKind k) {
    switch (k) {
        case DocKind::general: return "general";
        case DocKind::medical: return "medical";
        case DocKind::instruction: return "instruction";
    }
    fail("unknown document kind");
}

inline DocKind doc_kind_from_string(std::string_view s) {
    if (s == "general") return DocKind::general;
    if (s == "medical") return DocKind::medical;
    if (s == "instruction") return DocKind::instruction;
    fail("unknown document kind \"", s, "\"");
}

/// One corpus record. Plain-text kinds carry `text`; instruction records
/// carry `prompt` and `response` instead.
struct Document {
    std::string id;
    std::string source;
    DocKind kind = DocKind::general;
    std::string text;
    std::string prompt;
    std::string response;
    std::map<std::string, std::string> meta;

    bool is_instruction() const { return kind == DocKind::instruction; }

    /// The full textual content, used for dedup keys and token accounting.
    std::string content() const {
        if (is_instruction()) {
            return prompt + "\n" + response;
        }
        return text;
    }
};

inline void validate(const Document& doc) {
    require(!doc.id.empty(), "document has empty id");
    if (doc.is_instruction()) {
        require(!doc.response.empty(), "instruction document \"", doc.id, "\" has empty response");
    } else {
        require(!doc.text.empty(), "document \"", doc.id, "\" has empty text");
    }
}

// ---------------------------------------------------------------------------
// Source manifest
// ---------------------------------------------------------------------------

enum class SourceCategory { non_medical_public, medical_public, medical_proprietary };

inline constexpr int kNumCategories = 3;

inline std::string_view to_string(SourceCategory c) {
    switch (c) {
        case SourceCategory::non_medical_public: return "non_medical_public";
        case SourceCategory::medical_public: return "medical_public";
        case SourceCategory::medical_proprietary: return "medical_proprietary";
    }
    fail("unknown source category");
}

inline SourceCategory category_from_string(std::string_view s) {
    if (s == "non_medical_public") return SourceCategory::non_medical_public;
    if (s == "medical_public") return SourceCategory::medical_public;
    if (s == "medical_proprietary") return SourceCategory::medical_proprietary;
    fail("unknown source category \"", s, "\"");
}

struct SourceSpec {
    std::string name;
    SourceCategory category = SourceCategory::non_medical_public;
    std::string path;
    std::uint64_t token_count = 0;
    double weight = 0.0;  // 0 on every source means "unset"
};

struct SourceManifest {
    std::vector<SourceSpec> sources;
    std::uint64_t total_tokens = 0;

    void recompute_totals() {
        total_tokens = 0;
        for (const auto& s : sources) {
            total_tokens += s.token_count;
        }
    }

    bool weights_set() const {
        for (const auto& s : sources) {
            if (s.weight != 0.0) return true;
        }
        return false;
    }
};

inline void validate(const SourceManifest& m) {
    std::uint64_t sum = 0;
    double wsum = 0.0;
    std::unordered_set<std::string> names;
    for (const auto& s : m.sources) {
        require(!s.name.empty(), "manifest source with empty name");
        require(names.insert(s.name).second, "duplicate manifest source \"", s.name, "\"");
        require(s.weight >= 0.0 && s.weight <= 1.0, "source \"", s.name, "\" has weight outside [0,1]");
        sum += s.token_count;
        wsum += s.weight;
    }
    require(sum == m.total_tokens, "manifest total_tokens (", m.total_tokens,
            ") does not match source sum (", sum, ")");
    if (m.weights_set()) {
        require(std::abs(wsum - 1.0) <= 1e-9, "manifest weights sum to ", wsum, ", expected 1");
    }
}

inline nlohmann::json to_json(const SourceManifest& m) {
    nlohmann::json sources = nlohmann::json::array();
    for (const auto& s : m.sources) {
        sources.push_back({{"name", s.name},
                           {"category", std::string(to_string(s.category))},
                           {"path", s.path},
                           {"token_count", s.token_count},
                           {"weight", s.weight}});
    }
    return {{"sources", sources}, {"total_tokens", m.total_tokens}};
}

inline SourceManifest manifest_from_json(const nlohmann::json& j) {
    SourceManifest m;
    require(j.contains("sources") && j.at("sources").is_array(), "manifest is missing \"sources\"");
    for (const auto& js : j.at("sources")) {
        SourceSpec s;
        s.name = js.at("name").get<std::string>();
        s.category = category_from_string(js.at("category").get<std::string>());
        s.path = js.value("path", std::string{});
        s.token_count = js.value("token_count", std::uint64_t{0});
        s.weight = js.value("weight", 0.0);
        m.sources.push_back(std::move(s));
    }
    if (j.contains("total_tokens")) {
        m.total_tokens = j.at("total_tokens").get<std::uint64_t>();
    } else {
        m.recompute_totals();
    }
    validate(m);
    return m;
}

inline SourceManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open manifest file \"", path, "\"");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail("manifest \"", path, "\" is not valid JSON: ", e.what());
    }
    return manifest_from_json(j);
}

inline void save_manifest(const SourceManifest& m, const std::string& path) {
    std::ofstream out(path);
    require(out.good(), "cannot write manifest file \"", path, "\"");
    out << to_json(m).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Byte-level tokenizer: byte b maps to id b+4; ids 0..3 are specials.
// ---------------------------------------------------------------------------

struct TokenizerSpec {
    static constexpr std::int32_t pad = 0;
    static constexpr std::int32_t bos = 1;
    static constexpr std::int32_t eos = 2;
    static constexpr std::int32_t sep = 3;
    static constexpr std::int32_t num_specials = 4;
    static constexpr std::int32_t vocab_size = 256 + num_specials;
};

inline std::vector<std::int32_t> tokenize(std::string_view utf8_text) {
    std::vector<std::int32_t> ids;
    ids.reserve(utf8_text.size());
    for (unsigned char b : utf8_text) {
        ids.push_back(static_cast<std::int32_t>(b) + TokenizerSpec::num_specials);
    }
    return ids;
}

inline std::string detokenize(std::span<const std::int32_t> ids) {
    std::string out;
    out.reserve(ids.size());
    for (std::int32_t id : ids) {
        require(id >= TokenizerSpec::num_specials, "detokenize: id ", id, " is a special token, not text");
        require(id < TokenizerSpec::vocab_size, "detokenize: id ", id, " is out of vocabulary");
        out.push_back(static_cast<char>(id - TokenizerSpec::num_specials));
    }
    return out;
}

inline std::uint64_t token_count(const Document& doc) {
    if (doc.is_instruction()) {
        return doc.prompt.size() + doc.response.size();
    }
    return doc.text.size();
}

// ---------------------------------------------------------------------------
// Sentence segmentation
// ---------------------------------------------------------------------------

/// Half-open byte range [start, end) on UTF-8 character boundaries.
struct SentenceSpan {
    std::size_t start = 0;
    std::size_t end = 0;

    bool operator==(const SentenceSpan&) const = default;
};

inline bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }

/// Split into sentence spans. A sentence ends at a terminator [.!?] followed
/// by whitespace (or end of text), or at a newline. Spans exclude surrounding
/// whitespace; splits happen only at ASCII bytes, so spans always land on
/// UTF-8 character boundaries.
inline std::vector<SentenceSpan> segment_sentences(std::string_view text) {
    std::vector<SentenceSpan> spans;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        while (i < n && text::is_space(text[i])) ++i;
        if (i == n) break;
        std::size_t start = i;
        std::size_t end = n;
        for (std::size_t j = i; j < n; ++j) {
            char c = text[j];
            if (c == '\n') {
                end = j;
                break;
            }
            if (is_terminator(c) && (j + 1 == n || text::is_space(text[j + 1]))) {
                end = j + 1;
                break;
            }
        }
        std::size_t next = end;
        while (end > start && text::is_space(text[end - 1])) --end;
        if (end > start) {
            spans.push_back({start, end});
        }
        i = next > i ? next : i + 1;
    }
    return spans;
}

inline std::vector<std::string> sentences(std::string_view text) {
    std::vector<std::string> out;
    for (const auto& span : segment_sentences(text)) {
        out.emplace_back(text.substr(span.start, span.end - span.start));
    }
    return out;
}

/// Partition the full text at sentence starts. Unlike segment_sentences, the
/// returned slices cover every byte (inter-sentence whitespace attaches to
/// the preceding sentence), so tokenizing the slices conserves the token
/// multiset of the whole document.
inline std::vector<std::string_view> sentence_units(std::string_view text) {
    std::vector<std::string_view> units;
    auto spans = segment_sentences(text);
    if (spans.empty()) {
        if (!text.empty()) units.push_back(text);
        return units;
    }
    std::size_t begin = 0;
    for (std::size_t i = 1; i <= spans.size(); ++i) {
        std::size_t end = (i < spans.size()) ? spans[i].start : text.size();
        units.push_back(text.substr(begin, end - begin));
        begin = end;
    }
    return units;
}

// ---------------------------------------------------------------------------
// JSONL ingestion
// ---------------------------------------------------------------------------

inline Document document_from_json(const nlohmann::json& j) {
    Document doc;
    require(j.is_object(), "record is not an object");
    require(j.contains("id"), "record is missing \"id\"");
    require(j.contains("kind"), "record is missing \"kind\"");
    doc.id = j.at("id").get<std::string>();
    doc.kind = doc_kind_from_string(j.at("kind").get<std::string>());
    if (doc.is_instruction()) {
        require(j.contains("prompt"), "instruction record is missing \"prompt\"");
        require(j.contains("response"), "instruction record is missing \"response\"");
        doc.prompt = j.at("prompt").get<std::string>();
        doc.response = j.at("response").get<std::string>();
    } else {
        require(j.contains("text"), "record is missing \"text\"");
        doc.text = j.at("text").get<std::string>();
    }
    if (j.contains("source")) {
        doc.source = j.at("source").get<std::string>();
    }
    if (j.contains("meta")) {
        for (const auto& [k, v] : j.at("meta").items()) {
            doc.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
        }
    }
    validate(doc);
    return doc;
}

inline nlohmann::json to_json(const Document& doc) {
    nlohmann::json j{{"id", doc.id}, {"kind", std::string(to_string(doc.kind))}};
    if (!doc.source.empty()) j["source"] = doc.source;
    if (doc.is_instruction()) {
        j["prompt"] = doc.prompt;
        j["response"] = doc.response;
    } else {
        j["text"] = doc.text;
    }
    if (!doc.meta.empty()) {
        j["meta"] = doc.meta;
    }
    return j;
}

/// Read one source shard. Documents come back in file order with `source`
/// set from the spec, and the spec's token_count is refreshed from the
/// tokenized lengths. Errors carry the 1-based line number.
inline std::vector<Document> ingest_jsonl(const std::string& path, SourceSpec& spec) {
    std::ifstream in(path);
    require(in.good(), "cannot open corpus file \"", path, "\"");
    std::vector<Document> docs;
    std::unordered_set<std::string> seen_ids;
    std::string line;
    std::size_t line_no = 0;
    std::uint64_t tokens = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;  // blank line
        }
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            fail(path, ": line ", line_no, ": malformed record");
        }
        Document doc;
        try {
            doc = document_from_json(j);
        } catch (const Error& e) {
            fail(path, ": line ", line_no, ": ", e.what());
        } catch (const nlohmann::json::exception& e) {
            fail(path, ": line ", line_no, ": ", e.what());
        }
        require(seen_ids.insert(doc.id).second, path, ": line ", line_no, ": duplicate document id \"",
                doc.id, "\"");
        doc.source = spec.name;
        tokens += token_count(doc);
        docs.push_back(std::move(doc));
    }
    spec.token_count = tokens;
    return docs;
}

inline void write_documents_jsonl(const std::vector<Document>& docs, const std::string& path) {
    std::ofstream out(path);
    require(out.good(), "cannot write \"", path, "\"");
    for (const auto& doc : docs) {
        out << to_json(doc).dump() << "\n";
    }
}

inline std::vector<Document> read_documents_jsonl(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open \"", path, "\"");
    std::vector<Document> docs;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            fail(path, ": line ", line_no, ": malformed record");
        }
        docs.push_back(document_from_json(j));
    }
    return docs;
}

// ---------------------------------------------------------------------------
// Manifest statistics and ablation derivation
// ---------------------------------------------------------------------------

struct CategoryStat {
    SourceCategory category;
    std::uint64_t tokens = 0;
    /// Exact value: 100 * tokens / total.
    double percent = 0.0;
    /// Two-decimal value as rendered in a publication table: every category
    /// truncated, with the rounding residual folded into the last category so
    /// the column sums to exactly 100.00.
    double display_percent = 0.0;
};

struct ManifestStats {
    std::uint64_t total_tokens = 0;
    std::vector<CategoryStat> categories;  // fixed order: the three categories
};

inline ManifestStats manifest_stats(const SourceManifest& m) {
    ManifestStats stats;
    stats.total_tokens = 0;
    std::uint64_t per_category[kNumCategories] = {0, 0, 0};
    for (const auto& s : m.sources) {
        per_category[static_cast<int>(s.category)] += s.token_count;
        stats.total_tokens += s.token_count;
    }
    require(stats.total_tokens > 0, "manifest_stats: manifest has zero total tokens");

    double display_sum = 0.0;
    for (int c = 0; c < kNumCategories; ++c) {
        CategoryStat cs;
        cs.category = static_cast<SourceCategory>(c);
        cs.tokens = per_category[c];
        cs.percent = 100.0 * static_cast<double>(cs.tokens) / static_cast<double>(stats.total_tokens);
        if (c + 1 < kNumCategories) {
            cs.display_percent = std::floor(cs.percent * 100.0) / 100.0;
            display_sum += cs.display_percent;
        } else {
            cs.display_percent = 100.0 - display_sum;
        }
        stats.categories.push_back(cs);
    }
    return stats;
}

enum class AblationMode { MED, PUB };

inline std::string_view to_string(AblationMode m) {
    return m == AblationMode::MED ? "MED" : "PUB";
}

/// Derive the ablation manifests: MED keeps only non-public medical sources,
/// PUB strips every medical source. Totals are recomputed and weights
/// renormalized over the survivors.
inline SourceManifest derive_ablation_manifest(const SourceManifest& m, AblationMode mode) {
    SourceManifest out;
    for (const auto& s : m.sources) {
        bool keep = false;
        if (mode == AblationMode::MED) {
            keep = s.category == SourceCategory::medical_proprietary;
        } else {
            keep = s.category == SourceCategory::non_medical_public;
        }
        if (keep) {
            out.sources.push_back(s);
        }
    }
    require(!out.sources.empty(), "derive_ablation_manifest: mode ", to_string(mode),
            " leaves no sources");
    out.recompute_totals();
    double wsum = 0.0;
    for (const auto& s : out.sources) wsum += s.weight;
    if (wsum > 0.0) {
        for (auto& s : out.sources) s.weight /= wsum;
    }
    return out;
}

}  // namespace grist::corpus
