#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "grist/corpus.hpp"
#include "testutil.hpp"

using namespace grist;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
    auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream out(path);
    out << content;
    return path.string();
}

}  // namespace

TEST_CASE("tokenize maps bytes with a 4-special offset") {
    auto ids = corpus::tokenize("Ab");
    REQUIRE(ids.size() == 2);
    CHECK(ids[0] == 69);   // 'A' = 65
    CHECK(ids[1] == 102);  // 'b' = 98
    CHECK(corpus::tokenize("").empty());
}

TEST_CASE("tokenize/detokenize round-trips UTF-8") {
    CHECK(corpus::detokenize(corpus::tokenize("µ-unit")) == "µ-unit");

    // Property: identity on random byte strings.
    auto rng = rng::stream_for(7, "tokenize-roundtrip");
    for (int iter = 0; iter < 200; ++iter) {
        std::string s;
        std::size_t n = rng.next_below(64);
        for (std::size_t i = 0; i < n; ++i) {
            s.push_back(static_cast<char>(rng.next_below(256)));
        }
        auto ids = corpus::tokenize(s);
        CHECK(ids.size() == s.size());
        for (auto id : ids) {
            CHECK(id >= 4);
            CHECK(id <= 259);
        }
        CHECK(corpus::detokenize(ids) == s);
    }
}

TEST_CASE("detokenize rejects specials and out-of-vocab ids") {
    std::vector<std::int32_t> bos{corpus::TokenizerSpec::bos};
    CHECK_THROWS_AS(corpus::detokenize(bos), Error);
    std::vector<std::int32_t> big{260};
    CHECK_THROWS_AS(corpus::detokenize(big), Error);
}

TEST_CASE("segment_sentences splits on terminator plus whitespace") {
    std::string text = "I am fine. Thanks!";
    auto spans = corpus::segment_sentences(text);
    REQUIRE(spans.size() == 2);
    CHECK(text.substr(spans[0].start, spans[0].end - spans[0].start) == "I am fine.");
    CHECK(text.substr(spans[1].start, spans[1].end - spans[1].start) == "Thanks!");
}

TEST_CASE("segment_sentences edge cases") {
    auto one = corpus::segment_sentences("no terminator here");
    REQUIRE(one.size() == 1);
    CHECK(one[0].start == 0);
    CHECK(one[0].end == 18);

    CHECK(corpus::segment_sentences("").empty());

    // Newlines split; a dot inside a token does not.
    auto lines = corpus::sentences("first line\nsecond line");
    REQUIRE(lines.size() == 2);
    CHECK(lines[0] == "first line");
    auto dotted = corpus::segment_sentences("v1.2 is out");
    CHECK(dotted.size() == 1);
}

TEST_CASE("segment_sentences spans partition the non-whitespace bytes") {
    auto rng = rng::stream_for(11, "segment-prop");
    const std::string alphabet = "ab .!?\nx\tY?  z µ";
    for (int iter = 0; iter < 300; ++iter) {
        std::string text;
        std::size_t n = rng.next_below(80);
        for (std::size_t i = 0; i < n; ++i) {
            text.push_back(alphabet[rng.next_below(alphabet.size())]);
        }
        auto spans = corpus::segment_sentences(text);
        std::size_t prev_end = 0;
        std::vector<bool> covered(text.size(), false);
        for (const auto& span : spans) {
            CHECK(span.start < span.end);
            CHECK(span.end <= text.size());
            CHECK(span.start >= prev_end);  // ordered, non-overlapping
            prev_end = span.end;
            for (std::size_t i = span.start; i < span.end; ++i) {
                covered[i] = true;
            }
        }
        for (std::size_t i = 0; i < text.size(); ++i) {
            if (!text::is_space(text[i])) {
                CHECK(covered[i]);
            }
        }
    }
}

TEST_CASE("sentence_units cover the whole text") {
    std::string text = "  One. Two!  Three?  trailing  ";
    auto units = corpus::sentence_units(text);
    std::string joined;
    for (auto u : units) joined += std::string(u);
    CHECK(joined == text);
}

TEST_CASE("ingest_jsonl reads records in order and updates token counts") {
    auto path = write_temp("grist_ingest_ok.jsonl",
                           R"({"id":"a","kind":"general","text":"hello there."})"
                           "\n"
                           R"({"id":"b","kind":"instruction","prompt":"sum","response":"ok"})"
                           "\n");
    corpus::SourceSpec spec;
    spec.name = "src1";
    auto docs = corpus::ingest_jsonl(path, spec);
    REQUIRE(docs.size() == 2);
    CHECK(docs[0].id == "a");
    CHECK(docs[1].id == "b");
    CHECK(docs[0].source == "src1");
    CHECK(spec.token_count == 12 + 3 + 2);  // "hello there." + "sum" + "ok"
    std::remove(path.c_str());
}

TEST_CASE("ingest_jsonl reports the failing line number") {
    auto path = write_temp("grist_ingest_bad.jsonl",
                           R"({"id":"a","kind":"general","text":"x."})"
                           "\n"
                           R"({"id":"b","kind":"general","text":"y."})"
                           "\n"
                           "{not json\n");
    corpus::SourceSpec spec;
    spec.name = "s";
    CHECK_THROWS_WITH_AS(corpus::ingest_jsonl(path, spec), doctest::Contains("line 3"), Error);
    std::remove(path.c_str());
}

TEST_CASE("ingest_jsonl names the missing instruction field") {
    auto path = write_temp("grist_ingest_missing.jsonl",
                           R"({"id":"a","kind":"instruction","prompt":"p"})"
                           "\n");
    corpus::SourceSpec spec;
    spec.name = "s";
    CHECK_THROWS_WITH_AS(corpus::ingest_jsonl(path, spec), doctest::Contains("response"), Error);
    std::remove(path.c_str());
}

TEST_CASE("ingest_jsonl rejects duplicate ids within a shard") {
    auto path = write_temp("grist_ingest_dup.jsonl",
                           R"({"id":"a","kind":"general","text":"x."})"
                           "\n"
                           R"({"id":"a","kind":"general","text":"y."})"
                           "\n");
    corpus::SourceSpec spec;
    spec.name = "s";
    CHECK_THROWS_WITH_AS(corpus::ingest_jsonl(path, spec), doctest::Contains("duplicate"), Error);
    std::remove(path.c_str());
}

namespace {

corpus::SourceManifest billions_manifest() {
    corpus::SourceManifest m;
    m.sources.push_back({"nonmed", corpus::SourceCategory::non_medical_public, "", 5'330'000'000ull, 0.0});
    m.sources.push_back({"medpub", corpus::SourceCategory::medical_public, "", 5'680'000'000ull, 0.0});
    m.sources.push_back({"medprop", corpus::SourceCategory::medical_proprietary, "", 3'880'000'000ull, 0.0});
    m.recompute_totals();
    return m;
}

}  // namespace

TEST_CASE("manifest_stats balances the two-decimal display to 100") {
    auto stats = corpus::manifest_stats(billions_manifest());
    CHECK(stats.total_tokens == 14'890'000'000ull);
    REQUIRE(stats.categories.size() == 3);
    // Exact ratios.
    CHECK(stats.categories[0].percent == doctest::Approx(35.7958).epsilon(1e-4));
    CHECK(stats.categories[1].percent == doctest::Approx(38.1464).epsilon(1e-4));
    CHECK(stats.categories[2].percent == doctest::Approx(26.0578).epsilon(1e-4));
    double raw_sum = stats.categories[0].percent + stats.categories[1].percent +
                     stats.categories[2].percent;
    CHECK(std::abs(raw_sum - 100.0) < 0.01);
    // Two-decimal table rendering balances to exactly 100.00.
    CHECK(stats.categories[0].display_percent == doctest::Approx(35.79).epsilon(1e-9));
    CHECK(stats.categories[1].display_percent == doctest::Approx(38.14).epsilon(1e-9));
    CHECK(stats.categories[2].display_percent == doctest::Approx(26.07).epsilon(1e-9));
}

TEST_CASE("manifest_stats simple ratios") {
    corpus::SourceManifest single;
    single.sources.push_back({"only", corpus::SourceCategory::medical_public, "", 100, 0.0});
    single.recompute_totals();
    auto stats = corpus::manifest_stats(single);
    CHECK(stats.categories[1].percent == doctest::Approx(100.0));

    corpus::SourceManifest two;
    two.sources.push_back({"a", corpus::SourceCategory::non_medical_public, "", 1'000'000'000ull, 0.0});
    two.sources.push_back({"b", corpus::SourceCategory::medical_public, "", 3'000'000'000ull, 0.0});
    two.recompute_totals();
    auto stats2 = corpus::manifest_stats(two);
    CHECK(stats2.categories[0].percent == doctest::Approx(25.0));
    CHECK(stats2.categories[1].percent == doctest::Approx(75.0));
    CHECK(stats2.categories[0].display_percent == doctest::Approx(25.0));
    CHECK(stats2.categories[1].display_percent == doctest::Approx(75.0));
}

TEST_CASE("manifest_stats percentages sum to 100 for random token counts") {
    auto rng = rng::stream_for(3, "manifest-prop");
    for (int iter = 0; iter < 100; ++iter) {
        corpus::SourceManifest m;
        int n = 1 + static_cast<int>(rng.next_below(6));
        for (int i = 0; i < n; ++i) {
            m.sources.push_back({"s" + std::to_string(i),
                                 static_cast<corpus::SourceCategory>(rng.next_below(3)), "",
                                 1 + rng.next_below(1'000'000'000ull), 0.0});
        }
        m.recompute_totals();
        auto stats = corpus::manifest_stats(m);
        double raw = 0.0;
        double display = 0.0;
        for (const auto& c : stats.categories) {
            raw += c.percent;
            display += c.display_percent;
        }
        CHECK(std::abs(raw - 100.0) < 0.01);
        CHECK(std::abs(display - 100.0) < 1e-9);
    }
}

TEST_CASE("manifest_stats rejects an empty manifest") {
    corpus::SourceManifest empty;
    CHECK_THROWS_AS(corpus::manifest_stats(empty), Error);
}

TEST_CASE("derive_ablation_manifest keeps the right categories") {
    auto m = billions_manifest();
    auto med = corpus::derive_ablation_manifest(m, corpus::AblationMode::MED);
    REQUIRE(med.sources.size() == 1);
    CHECK(med.sources[0].name == "medprop");
    CHECK(med.total_tokens == 3'880'000'000ull);

    auto pub = corpus::derive_ablation_manifest(m, corpus::AblationMode::PUB);
    REQUIRE(pub.sources.size() == 1);
    CHECK(pub.sources[0].name == "nonmed");
    CHECK(pub.total_tokens == 5'330'000'000ull);
}

TEST_CASE("derive_ablation_manifest renormalizes weights and is idempotent") {
    corpus::SourceManifest m;
    m.sources.push_back({"a", corpus::SourceCategory::non_medical_public, "", 10, 0.25});
    m.sources.push_back({"b", corpus::SourceCategory::non_medical_public, "", 10, 0.25});
    m.sources.push_back({"c", corpus::SourceCategory::medical_proprietary, "", 10, 0.5});
    m.recompute_totals();
    auto pub = corpus::derive_ablation_manifest(m, corpus::AblationMode::PUB);
    REQUIRE(pub.sources.size() == 2);
    CHECK(pub.sources[0].weight == doctest::Approx(0.5));
    CHECK(pub.sources[1].weight == doctest::Approx(0.5));

    auto twice = corpus::derive_ablation_manifest(pub, corpus::AblationMode::PUB);
    CHECK(twice.sources.size() == pub.sources.size());
    CHECK(twice.total_tokens == pub.total_tokens);

    auto med = corpus::derive_ablation_manifest(m, corpus::AblationMode::MED);
    auto med_twice = corpus::derive_ablation_manifest(med, corpus::AblationMode::MED);
    CHECK(med_twice.sources.size() == med.sources.size());
}

TEST_CASE("derive_ablation_manifest rejects an empty result") {
    corpus::SourceManifest m;
    m.sources.push_back({"medpub", corpus::SourceCategory::medical_public, "", 10, 0.0});
    m.recompute_totals();
    CHECK_THROWS_AS(corpus::derive_ablation_manifest(m, corpus::AblationMode::PUB), Error);
}

TEST_CASE("manifest JSON round-trip and validation") {
    auto m = billions_manifest();
    m.sources[0].weight = 0.2;
    m.sources[1].weight = 0.3;
    m.sources[2].weight = 0.5;
    auto path = (std::filesystem::temp_directory_path() / "grist_manifest.json").string();
    corpus::save_manifest(m, path);
    auto loaded = corpus::load_manifest(path);
    CHECK(loaded.sources.size() == 3);
    CHECK(loaded.total_tokens == m.total_tokens);
    CHECK(loaded.sources[2].weight == doctest::Approx(0.5));
    std::remove(path.c_str());

    corpus::SourceManifest bad = m;
    bad.sources[0].weight = 0.9;  // weights no longer sum to 1
    CHECK_THROWS_AS(corpus::validate(bad), Error);
}
