#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace grist::text {

inline bool is_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

/// Lowercase (ASCII), collapse whitespace runs to a single space, trim ends.
/// Non-ASCII bytes pass through untouched.
inline std::string normalize(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char c : s) {
        if (is_space(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) {
            out.push_back(' ');
            pending_space = false;
        }
        out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
}

/// Split on whitespace runs. Tokens keep punctuation as-is.
inline std::vector<std::string> split_words(std::string_view s) {
    std::vector<std::string> words;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && is_space(s[i])) ++i;
        std::size_t start = i;
        while (i < s.size() && !is_space(s[i])) ++i;
        if (i > start) {
            words.emplace_back(s.substr(start, i - start));
        }
    }
    return words;
}

/// Lowercased whitespace-split words; the unit for Rouge and MinHash grams.
inline std::vector<std::string> normalized_words(std::string_view s) {
    return split_words(normalize(s));
}

/// Lowercased words with leading/trailing punctuation stripped per word;
/// the unit for word-set overlap matching (so "80." matches "80").
inline std::vector<std::string> bare_words(std::string_view s) {
    std::vector<std::string> words;
    for (auto& w : split_words(s)) {
        std::size_t begin = 0;
        std::size_t end = w.size();
        while (begin < end && std::ispunct(static_cast<unsigned char>(w[begin]))) ++begin;
        while (end > begin && std::ispunct(static_cast<unsigned char>(w[end - 1]))) --end;
        if (end == begin) continue;
        std::string word;
        for (std::size_t i = begin; i < end; ++i) {
            word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(w[i]))));
        }
        words.push_back(std::move(word));
    }
    return words;
}

/// Lowercase and strip punctuation and whitespace entirely; the choice-answer
/// normalization (so "Yes." and "yes" compare equal).
inline std::string strict_normalize(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        auto uc = static_cast<unsigned char>(c);
        if (is_space(c) || std::ispunct(uc)) {
            continue;
        }
        out.push_back(static_cast<char>(std::tolower(uc)));
    }
    return out;
}

}  // namespace grist::text
