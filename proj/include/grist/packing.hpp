#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "grist/corpus.hpp"
#include "grist/error.hpp"

namespace grist::packing {

/// Half-open token range [start, end) owned by one document.
struct Segment {
    std::string doc_id;
    std::size_t start = 0;
    std::size_t end = 0;

    bool operator==(const Segment&) const = default;
};

struct PackedExample {
    std::vector<std::int32_t> tokens;
    std::vector<std::uint8_t> loss_mask;
    std::vector<Segment> segments;

    bool operator==(const PackedExample&) const = default;
};

struct PackingStats {
    std::size_t examples = 0;
    double fill_ratio = 0.0;
    std::size_t sentences_split = 0;
    std::size_t instructions_skipped = 0;
};

inline constexpr std::size_t kMinMaxLen = 8;

namespace detail {

struct Builder {
    std::size_t max_len;
    std::vector<PackedExample> out;
    PackedExample current;
    std::size_t total_tokens = 0;

    explicit Builder(std::size_t ml) : max_len(ml) {}

    std::size_t remaining() const { return max_len - current.tokens.size(); }

    void close() {
        if (current.tokens.empty()) return;
        total_tokens += current.tokens.size();
        out.push_back(std::move(current));
        current = PackedExample{};
    }

    /// Append tokens for one document, mask = 1 throughout. Extends the last
    /// segment when it belongs to the same document.
    void append(const std::string& doc_id, std::span<const std::int32_t> tokens) {
        std::size_t start = current.tokens.size();
        current.tokens.insert(current.tokens.end(), tokens.begin(), tokens.end());
        current.loss_mask.insert(current.loss_mask.end(), tokens.size(), 1);
        if (!current.segments.empty() && current.segments.back().doc_id == doc_id &&
            current.segments.back().end == start) {
            current.segments.back().end = current.tokens.size();
        } else {
            current.segments.push_back({doc_id, start, current.tokens.size()});
        }
    }
};

}  // namespace detail

/// Greedy sentence-level packing of plain-text documents. Sentence units are
/// filled in corpus order; a unit that exceeds the remaining space closes the
/// current example; a sentence longer than max_len is hard-split into
/// max_len-sized chunks. BOS/EOS wrap each document and count against
/// max_len. Every input token appears exactly once across the outputs.
inline std::pair<std::vector<PackedExample>, PackingStats> pack_documents(
    const std::vector<corpus::Document>& docs, std::size_t max_len) {
    require(max_len >= kMinMaxLen, "pack_documents: max_len must be >= ", kMinMaxLen, ", got ",
            max_len);
    detail::Builder builder(max_len);
    PackingStats stats;

    for (const auto& doc : docs) {
        require(!doc.is_instruction(), "pack_documents: document \"", doc.id,
                "\" is an instruction; use pack_instruction");
        // Chunk the document into units no longer than max_len.
        std::vector<std::vector<std::int32_t>> units;
        auto slices = corpus::sentence_units(doc.text);
        for (std::size_t si = 0; si < slices.size(); ++si) {
            auto tokens = corpus::tokenize(slices[si]);
            if (si == 0) {
                tokens.insert(tokens.begin(), corpus::TokenizerSpec::bos);
            }
            if (si + 1 == slices.size()) {
                tokens.push_back(corpus::TokenizerSpec::eos);
            }
            if (slices[si].size() > max_len) {
                ++stats.sentences_split;
            }
            if (tokens.size() <= max_len) {
                units.push_back(std::move(tokens));
                continue;
            }
            // Hard split: the sentence's own tokens go into max_len-sized
            // chunks; the BOS/EOS ride along in whichever chunk holds the
            // adjacent text when they fit, otherwise stand alone.
            std::size_t pos = 0;
            bool leading_bos = tokens.front() == corpus::TokenizerSpec::bos && si == 0;
            if (leading_bos) {
                pos = 1;
            }
            std::size_t body_end = tokens.size();
            bool trailing_eos = si + 1 == slices.size();
            if (trailing_eos) {
                --body_end;
            }
            std::vector<std::vector<std::int32_t>> chunks;
            while (pos < body_end) {
                std::size_t take = std::min(max_len, body_end - pos);
                chunks.emplace_back(tokens.begin() + static_cast<std::ptrdiff_t>(pos),
                                    tokens.begin() + static_cast<std::ptrdiff_t>(pos + take));
                pos += take;
            }
            if (chunks.empty()) {
                chunks.emplace_back();
            }
            if (leading_bos) {
                if (chunks.front().size() < max_len) {
                    chunks.front().insert(chunks.front().begin(), corpus::TokenizerSpec::bos);
                } else {
                    chunks.insert(chunks.begin(), {corpus::TokenizerSpec::bos});
                }
            }
            if (trailing_eos) {
                if (chunks.back().size() < max_len) {
                    chunks.back().push_back(corpus::TokenizerSpec::eos);
                } else {
                    chunks.push_back({corpus::TokenizerSpec::eos});
                }
            }
            for (auto& c : chunks) {
                units.push_back(std::move(c));
            }
        }
        if (slices.empty()) {
            // Whitespace-only text still gets its BOS/EOS wrapper.
            units.push_back({corpus::TokenizerSpec::bos, corpus::TokenizerSpec::eos});
        }
        for (auto& unit : units) {
            if (unit.size() > builder.remaining()) {
                builder.close();
            }
            builder.append(doc.id, unit);
        }
    }
    builder.close();

    stats.examples = builder.out.size();
    stats.fill_ratio = stats.examples > 0 ? static_cast<double>(builder.total_tokens) /
                                                (static_cast<double>(stats.examples) *
                                                 static_cast<double>(max_len))
                                          : 0.0;
    return {std::move(builder.out), stats};
}

/// One instruction document as a single atomic example:
///   BOS . prompt tokens . SEP . response tokens . EOS
/// with loss mask 0 through the SEP and 1 on the response and EOS. Oversized
/// examples are skipped (nullopt) rather than truncated.
inline std::optional<PackedExample> pack_instruction(const corpus::Document& doc,
                                                     std::size_t max_len, PackingStats* stats = nullptr) {
    require(doc.is_instruction(), "pack_instruction: document \"", doc.id, "\" is not an instruction");
    require(!doc.response.empty(), "pack_instruction: document \"", doc.id, "\" has empty response");
    auto prompt_tokens = corpus::tokenize(doc.prompt);
    auto response_tokens = corpus::tokenize(doc.response);
    const std::size_t total = prompt_tokens.size() + response_tokens.size() + 3;
    if (total > max_len) {
        if (stats) ++stats->instructions_skipped;
        return std::nullopt;
    }
    PackedExample ex;
    ex.tokens.reserve(total);
    ex.tokens.push_back(corpus::TokenizerSpec::bos);
    ex.tokens.insert(ex.tokens.end(), prompt_tokens.begin(), prompt_tokens.end());
    ex.tokens.push_back(corpus::TokenizerSpec::sep);
    ex.tokens.insert(ex.tokens.end(), response_tokens.begin(), response_tokens.end());
    ex.tokens.push_back(corpus::TokenizerSpec::eos);
    ex.loss_mask.assign(total, 1);
    for (std::size_t i = 0; i < prompt_tokens.size() + 2; ++i) {
        ex.loss_mask[i] = 0;
    }
    ex.segments.push_back({doc.id, 0, total});
    if (stats) ++stats->examples;
    return ex;
}

// ---------------------------------------------------------------------------
// Loss-mask construction from a layout description
// ---------------------------------------------------------------------------

enum class SegmentKind { general, medical, instruction };

struct SegmentLayout {
    SegmentKind kind = SegmentKind::general;
    /// general/medical: token count of the segment.
    std::size_t length = 0;
    /// instruction: token counts of the two halves (specials implied).
    std::size_t prompt_tokens = 0;
    std::size_t response_tokens = 0;
};

inline std::vector<std::uint8_t> build_loss_mask(std::span<const SegmentLayout> layout) {
    std::vector<std::uint8_t> mask;
    for (const auto& seg : layout) {
        switch (seg.kind) {
            case SegmentKind::general:
            case SegmentKind::medical:
                require(seg.length > 0, "build_loss_mask: zero-length segment");
                mask.insert(mask.end(), seg.length, 1);
                break;
            case SegmentKind::instruction:
                require(seg.response_tokens > 0, "build_loss_mask: zero-length response segment");
                // BOS + prompt + SEP masked out, response + EOS kept.
                mask.insert(mask.end(), seg.prompt_tokens + 2, 0);
                mask.insert(mask.end(), seg.response_tokens + 1, 1);
                break;
            default:
                fail("build_loss_mask: unknown segment kind");
        }
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Packed dataset file: one record per line.
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const PackedExample& ex) {
    nlohmann::json segments = nlohmann::json::array();
    for (const auto& s : ex.segments) {
        segments.push_back({s.doc_id, s.start, s.end});
    }
    return {{"tokens", ex.tokens}, {"loss_mask", ex.loss_mask}, {"segments", segments}};
}

inline PackedExample packed_example_from_json(const nlohmann::json& j) {
    PackedExample ex;
    ex.tokens = j.at("tokens").get<std::vector<std::int32_t>>();
    ex.loss_mask = j.at("loss_mask").get<std::vector<std::uint8_t>>();
    for (const auto& s : j.at("segments")) {
        ex.segments.push_back(
            {s.at(0).get<std::string>(), s.at(1).get<std::size_t>(), s.at(2).get<std::size_t>()});
    }
    require(ex.tokens.size() == ex.loss_mask.size(), "packed example: mask/token length mismatch");
    return ex;
}

inline void write_packed_jsonl(const std::vector<PackedExample>& examples, const std::string& path) {
    std::ofstream out(path);
    require(out.good(), "cannot write \"", path, "\"");
    for (const auto& ex : examples) {
        out << to_json(ex).dump() << "\n";
    }
}

inline std::vector<PackedExample> read_packed_jsonl(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open \"", path, "\"");
    std::vector<PackedExample> examples;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            fail(path, ": line ", line_no, ": malformed record");
        }
        examples.push_back(packed_example_from_json(j));
    }
    return examples;
}

}  // namespace grist::packing
