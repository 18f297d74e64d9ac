#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "grist/corpus.hpp"
#include "grist/error.hpp"
#include "grist/rng.hpp"
#include "grist/text.hpp"

namespace grist::dedup {

enum class RemovalReason { exact_shingle, near_dup };

inline std::string_view to_string(RemovalReason r) {
    return r == RemovalReason::exact_shingle ? "exact_shingle" : "near_dup";
}

struct DedupReport {
    std::size_t docs_in = 0;
    std::size_t docs_removed = 0;
    double tokens_removed_fraction = 0.0;
    /// id -> reason, insertion-ordered by scan position.
    std::vector<std::pair<std::string, RemovalReason>> removed;
};

inline nlohmann::json to_json(const DedupReport& r) {
    nlohmann::json removed = nlohmann::json::array();
    for (const auto& [id, reason] : r.removed) {
        removed.push_back({{"id", id}, {"reason", std::string(to_string(reason))}});
    }
    return {{"docs_in", r.docs_in},
            {"docs_removed", r.docs_removed},
            {"tokens_removed_fraction", r.tokens_removed_fraction},
            {"removed", removed}};
}

// ---------------------------------------------------------------------------
// Exact shingle dedup: hash windows of k consecutive normalized sentences.
// ---------------------------------------------------------------------------

/// Shingle keys for one document: hashes of every k-sentence window of the
/// normalized text (joined with single spaces). A document with fewer than k
/// sentences is keyed on its full normalized text.
inline std::vector<std::uint64_t> shingle_keys(const corpus::Document& doc, std::size_t k) {
    require(k >= 1, "shingle window size must be >= 1");
    const std::string content = doc.content();
    std::vector<std::string> sents;
    for (auto& s : corpus::sentences(content)) {
        sents.push_back(text::normalize(s));
    }
    std::vector<std::uint64_t> keys;
    if (sents.size() < k) {
        keys.push_back(rng::hash_bytes(text::normalize(content)));
        return keys;
    }
    for (std::size_t i = 0; i + k <= sents.size(); ++i) {
        std::string window = sents[i];
        for (std::size_t j = 1; j < k; ++j) {
            window.push_back(' ');
            window += sents[i + j];
        }
        keys.push_back(rng::hash_bytes(window));
    }
    return keys;
}

/// Keep-first scan: a document is dropped iff it shares a shingle with an
/// earlier kept document. Removed documents contribute no shingles.
inline std::pair<std::vector<corpus::Document>, DedupReport> exact_shingle_dedup(
    const std::vector<corpus::Document>& docs, std::size_t k = 3) {
    require(k >= 1, "shingle window size must be >= 1");
    std::vector<corpus::Document> kept;
    DedupReport report;
    report.docs_in = docs.size();
    std::unordered_set<std::uint64_t> seen;
    std::uint64_t tokens_in = 0;
    std::uint64_t tokens_removed = 0;
    for (const auto& doc : docs) {
        tokens_in += corpus::token_count(doc);
        auto keys = shingle_keys(doc, k);
        bool dup = false;
        for (auto key : keys) {
            if (seen.count(key)) {
                dup = true;
                break;
            }
        }
        if (dup) {
            report.removed.emplace_back(doc.id, RemovalReason::exact_shingle);
            tokens_removed += corpus::token_count(doc);
            continue;
        }
        seen.insert(keys.begin(), keys.end());
        kept.push_back(doc);
    }
    report.docs_removed = report.removed.size();
    report.tokens_removed_fraction =
        tokens_in > 0 ? static_cast<double>(tokens_removed) / static_cast<double>(tokens_in) : 0.0;
    return {std::move(kept), std::move(report)};
}

// ---------------------------------------------------------------------------
// MinHash over word 5-grams
// ---------------------------------------------------------------------------

inline constexpr std::size_t kGramWords = 5;

struct MinHashSignature {
    std::size_t num_perms = 0;
    std::vector<std::uint64_t> values;
};

/// Distinct word 5-gram hashes of the normalized text. Documents shorter
/// than 5 words contribute one gram covering all their words.
inline std::vector<std::uint64_t> word_gram_hashes(std::string_view content) {
    auto words = text::normalized_words(content);
    std::vector<std::uint64_t> grams;
    if (words.empty()) {
        return grams;
    }
    const std::size_t n = words.size() >= kGramWords ? kGramWords : words.size();
    std::unordered_set<std::uint64_t> distinct;
    for (std::size_t i = 0; i + n <= words.size(); ++i) {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (std::size_t j = 0; j < n; ++j) {
            h = rng::hash_bytes(words[i + j], h);
            h = rng::hash_bytes("\x1f", h);
        }
        if (distinct.insert(h).second) {
            grams.push_back(h);
        }
    }
    return grams;
}

/// Deterministic signature: permutation i is the counter hash keyed on
/// (seed, i), and values[i] is the minimum over the document's gram hashes.
inline MinHashSignature minhash_signature(const corpus::Document& doc, std::size_t num_perms,
                                          std::uint64_t seed) {
    require(num_perms >= 1, "minhash_signature: num_perms must be >= 1");
    auto grams = word_gram_hashes(doc.content());
    require(!grams.empty(), "minhash_signature: document \"", doc.id, "\" has no words");
    MinHashSignature sig;
    sig.num_perms = num_perms;
    sig.values.resize(num_perms);
    for (std::size_t i = 0; i < num_perms; ++i) {
        std::uint64_t perm_key = rng::mix64(seed ^ rng::mix64(i + 1));
        std::uint64_t best = ~0ull;
        for (auto g : grams) {
            std::uint64_t h = rng::mix64(perm_key ^ g);
            if (h < best) best = h;
        }
        sig.values[i] = best;
    }
    return sig;
}

/// Fraction of agreeing positions; an unbiased estimate of the Jaccard
/// similarity of the underlying gram sets.
inline double estimate_jaccard(const MinHashSignature& a, const MinHashSignature& b) {
    require(a.num_perms == b.num_perms, "estimate_jaccard: signatures have ", a.num_perms, " vs ",
            b.num_perms, " permutations");
    require(a.num_perms > 0, "estimate_jaccard: empty signatures");
    std::size_t agree = 0;
    for (std::size_t i = 0; i < a.num_perms; ++i) {
        if (a.values[i] == b.values[i]) ++agree;
    }
    return static_cast<double>(agree) / static_cast<double>(a.num_perms);
}

namespace detail {

/// Compute signatures for all documents, parallelized per document. Output
/// order equals input order regardless of thread count.
inline std::vector<MinHashSignature> all_signatures(const std::vector<corpus::Document>& docs,
                                                    std::size_t num_perms, std::uint64_t seed) {
    std::vector<MinHashSignature> sigs(docs.size());
    std::size_t workers = std::thread::hardware_concurrency();
    if (workers < 1) workers = 1;
    if (workers > docs.size()) workers = docs.size() > 0 ? docs.size() : 1;
    if (workers <= 1 || docs.size() < 16) {
        for (std::size_t i = 0; i < docs.size(); ++i) {
            sigs[i] = minhash_signature(docs[i], num_perms, seed);
        }
        return sigs;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < docs.size(); i += workers) {
                sigs[i] = minhash_signature(docs[i], num_perms, seed);
            }
        });
    }
    for (auto& t : pool) t.join();
    return sigs;
}

inline std::uint64_t band_bucket(const MinHashSignature& sig, std::size_t band, std::size_t rows) {
    std::uint64_t h = rng::mix64(band + 0x9e37u);
    for (std::size_t r = 0; r < rows; ++r) {
        h = rng::mix64(h ^ sig.values[band * rows + r]);
    }
    return h;
}

}  // namespace detail

struct NearDedupParams {
    double threshold = 0.8;
    std::size_t num_perms = 256;
    std::uint64_t seed = 0;
    /// Upper bound on LSH rows per band (bands * rows = num_perms). The scan
    /// shrinks it until banding is lossless for the given threshold.
    std::size_t rows_per_band = 2;
};

namespace detail {

/// Largest rows-per-band that keeps banding lossless: a pair with at least
/// ceil(threshold * n) agreeing positions has fewer disagreeing positions
/// than bands, so by pigeonhole some band agrees fully and the pair always
/// collides in a bucket. rows = 1 satisfies this for any threshold > 0.
inline std::size_t lossless_rows(std::size_t num_perms, double threshold, std::size_t max_rows) {
    auto min_agree = static_cast<std::size_t>(std::ceil(threshold * static_cast<double>(num_perms)));
    if (min_agree > num_perms) min_agree = num_perms;
    std::size_t rows = max_rows < 1 ? 1 : max_rows;
    while (rows > 1 && (num_perms % rows != 0 || num_perms - min_agree >= num_perms / rows)) {
        --rows;
    }
    return rows;
}

}  // namespace detail

/// Keep-first near-duplicate scan. A document is dropped iff its estimated
/// Jaccard against some earlier kept document reaches the threshold.
/// Candidates come from LSH band buckets and every candidate is confirmed
/// with estimate_jaccard; with the lossless band width the result is
/// identical to the brute-force pairwise scan.
inline std::pair<std::vector<corpus::Document>, DedupReport> near_dedup(
    const std::vector<corpus::Document>& docs, const NearDedupParams& params) {
    require(params.threshold > 0.0 && params.threshold <= 1.0,
            "near_dedup: threshold must be in (0,1], got ", params.threshold);
    require(params.num_perms >= 1, "near_dedup: num_perms must be >= 1");
    const std::size_t rows =
        detail::lossless_rows(params.num_perms, params.threshold, params.rows_per_band);
    const std::size_t bands = params.num_perms / rows;

    auto sigs = detail::all_signatures(docs, params.num_perms, params.seed);

    std::vector<corpus::Document> kept;
    std::vector<std::size_t> kept_index;  // index into sigs
    DedupReport report;
    report.docs_in = docs.size();
    // bucket -> kept doc indices
    std::unordered_map<std::uint64_t, std::vector<std::size_t>> buckets;
    std::uint64_t tokens_in = 0;
    std::uint64_t tokens_removed = 0;

    std::vector<std::uint64_t> my_buckets(bands);
    std::vector<char> checked;
    for (std::size_t i = 0; i < docs.size(); ++i) {
        tokens_in += corpus::token_count(docs[i]);
        for (std::size_t b = 0; b < bands; ++b) {
            my_buckets[b] = detail::band_bucket(sigs[i], b, rows);
        }
        checked.assign(kept.size(), 0);
        bool dup = false;
        for (std::size_t b = 0; b < bands && !dup; ++b) {
            auto it = buckets.find(my_buckets[b]);
            if (it == buckets.end()) continue;
            for (std::size_t kj : it->second) {
                if (checked[kj]) continue;
                checked[kj] = 1;
                if (estimate_jaccard(sigs[i], sigs[kept_index[kj]]) >= params.threshold) {
                    dup = true;
                    break;
                }
            }
        }
        if (dup) {
            report.removed.emplace_back(docs[i].id, RemovalReason::near_dup);
            tokens_removed += corpus::token_count(docs[i]);
            continue;
        }
        std::size_t kj = kept.size();
        kept.push_back(docs[i]);
        kept_index.push_back(i);
        for (std::size_t b = 0; b < bands; ++b) {
            buckets[my_buckets[b]].push_back(kj);
        }
    }
    report.docs_removed = report.removed.size();
    report.tokens_removed_fraction =
        tokens_in > 0 ? static_cast<double>(tokens_removed) / static_cast<double>(tokens_in) : 0.0;
    return {std::move(kept), std::move(report)};
}

}  // namespace grist::dedup
