// Acceptance suite: one check per release criterion, one pass/fail line each.
// Exits nonzero if any criterion fails. Thresholds and tolerances are pinned
// here, not configurable.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "grist/corpus.hpp"
#include "grist/dedup.hpp"
#include "grist/eval.hpp"
#include "grist/packing.hpp"
#include "grist/rope.hpp"
#include "grist/schedule.hpp"
#include "grist/toytrain.hpp"
#include "testutil.hpp"

using namespace grist;
namespace fs = std::filesystem;

namespace {

struct CheckFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <typename... Parts>
[[noreturn]] void check_fail(Parts&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    throw CheckFailure(os.str());
}

void expect(bool ok, const std::string& what) {
    if (!ok) throw CheckFailure(what);
}

void expect_near(double actual, double wanted, double tol, const std::string& what) {
    if (!(std::abs(actual - wanted) <= tol)) {
        check_fail(what, ": got ", actual, ", wanted ", wanted, " +/- ", tol);
    }
}

// --------------------------------------------------------------------------
// 1. Source-mix arithmetic
// --------------------------------------------------------------------------

void criterion_manifest_stats() {
    corpus::SourceManifest m;
    m.sources.push_back({"nm", corpus::SourceCategory::non_medical_public, "", 5'330'000'000ull, 0.0});
    m.sources.push_back({"mp", corpus::SourceCategory::medical_public, "", 5'680'000'000ull, 0.0});
    m.sources.push_back({"pr", corpus::SourceCategory::medical_proprietary, "", 3'880'000'000ull, 0.0});
    m.recompute_totals();
    auto stats = corpus::manifest_stats(m);
    expect(stats.total_tokens == 14'890'000'000ull, "total token count");
    expect_near(stats.categories[0].display_percent, 35.79, 0.01, "non-medical share");
    expect_near(stats.categories[1].display_percent, 38.14, 0.01, "medical-public share");
    expect_near(stats.categories[2].display_percent, 26.07, 0.01, "proprietary share");
    double sum = 0.0;
    for (const auto& c : stats.categories) sum += c.percent;
    expect_near(sum, 100.0, 0.01, "raw percentage sum");
}

// --------------------------------------------------------------------------
// 2. Learning-rate schedule anchors
// --------------------------------------------------------------------------

void criterion_lr_schedule() {
    schedule::LRScheduleParams p;  // 5e-5 -> 1e-5, warmup 50
    p.total_steps = 1000;
    expect(schedule::lr_at(50, p) == 5e-5, "lr at warmup end must be exactly eta_max");
    expect(schedule::lr_at(1000, p) == 1e-5, "lr at total_steps must be exactly eta_min");
    expect_near(schedule::lr_at(525, p), 3e-5, 1e-12, "cosine midpoint");
    expect_near(schedule::lr_at(p.warmup_steps, p), p.eta_max, 1e-12, "warmup-boundary continuity");
}

// --------------------------------------------------------------------------
// 3. Gradient correctness
// --------------------------------------------------------------------------

void criterion_gradients() {
    auto master = rng::stream_for(90210, "acceptance-gradcheck");
    for (int config_idx = 0; config_idx < 5; ++config_idx) {
        toytrain::ToyLMConfig cfg;
        cfg.d_model = 8 + 4 * (config_idx % 2);  // 8 or 12
        cfg.max_len = 12;
        cfg.rope = rope::make_rope_params(cfg.d_model, 10000.0, 12, 12 + 4 * (config_idx % 3));
        auto params = toytrain::init_params(cfg, master.next_u64());
        packing::PackedExample ex;
        std::size_t len = 5 + master.next_below(4);
        for (std::size_t i = 0; i < len; ++i) {
            ex.tokens.push_back(static_cast<std::int32_t>(4 + master.next_below(256)));
            ex.loss_mask.push_back(master.next_below(3) ? 1 : 0);
        }
        ex.loss_mask[len - 1] = 1;
        ex.segments.push_back({"g", 0, len});
        auto result = testutil::finite_difference_check(params, ex, cfg);
        if (result.max_rel_error >= 1e-4) {
            check_fail("config ", config_idx, ": max relative error ", result.max_rel_error,
                       " (checked ", result.checked, " entries)");
        }
    }
}

// --------------------------------------------------------------------------
// 4. Determinism and checkpoint resume
// --------------------------------------------------------------------------

struct ToyRun {
    toytrain::ToyLMConfig cfg;
    toytrain::SubsetExamples train;
    toytrain::SubsetExamples val;
    toytrain::TrainOptions options;

    ToyRun() {
        cfg.d_model = 16;
        cfg.max_len = 16;
        cfg.rope = rope::make_rope_params(16, 10000.0, 16, 16);
        auto rng = rng::stream_for(555, "acceptance-train-data");
        for (const auto& name : {"alpha", "beta"}) {
            for (int i = 0; i < 16; ++i) {
                packing::PackedExample ex;
                for (int t = 0; t < 14; ++t) {
                    ex.tokens.push_back(static_cast<std::int32_t>(4 + rng.next_below(256)));
                    ex.loss_mask.push_back(1);
                }
                ex.segments.push_back({"d", 0, 14});
                train[name].push_back(ex);
            }
            for (int i = 0; i < 4; ++i) {
                val[name].push_back(train[name][static_cast<std::size_t>(i)]);
            }
        }
        options.lr = {1e-3, 1e-4, 10, 200};
        options.phase_boundaries = {100};
        options.batch_size = 4;
    }

    schedule::RunState fresh_state(std::uint64_t seed) const {
        schedule::RunState state;
        state.master_seed = seed;
        state.batch_size = options.batch_size;
        state.weight_decay = cfg.weight_decay;
        state.weights = {{"alpha", 0.5}, {"beta", 0.5}};
        state.rng = rng::stream_for(seed, "run");
        return state;
    }
};

void criterion_determinism_resume() {
    ToyRun setup;
    const std::uint64_t seed = 2718;

    auto params_full = toytrain::init_params(setup.cfg, seed);
    auto opt_full = toytrain::make_optimizer(setup.cfg);
    auto state_full = setup.fresh_state(seed);
    auto log_full = toytrain::train_run(params_full, opt_full, state_full, setup.train, setup.val,
                                        setup.cfg, setup.options, 200);

    // Equal seeds reproduce bit-identical runs.
    auto params_again = toytrain::init_params(setup.cfg, seed);
    auto opt_again = toytrain::make_optimizer(setup.cfg);
    auto state_again = setup.fresh_state(seed);
    auto log_again = toytrain::train_run(params_again, opt_again, state_again, setup.train,
                                         setup.val, setup.cfg, setup.options, 200);
    expect(log_full == log_again, "equal-seed runs must produce identical loss traces");
    expect(params_full == params_again, "equal-seed runs must produce identical parameters");

    // 100 steps + checkpoint + 100 steps == 200 straight steps.
    auto params_a = toytrain::init_params(setup.cfg, seed);
    auto opt_a = toytrain::make_optimizer(setup.cfg);
    auto state_a = setup.fresh_state(seed);
    auto log_a = toytrain::train_run(params_a, opt_a, state_a, setup.train, setup.val, setup.cfg,
                                     setup.options, 100);
    auto ckpt = (fs::temp_directory_path() / "grist_acceptance_resume.bin").string();
    toytrain::save_training_checkpoint(state_a, params_a, opt_a, ckpt);

    schedule::RunState state_b;
    toytrain::ModelParams params_b;
    auto opt_b = toytrain::make_optimizer(setup.cfg);
    toytrain::load_training_checkpoint(ckpt, state_b, params_b, opt_b);
    auto log_b = toytrain::train_run(params_b, opt_b, state_b, setup.train, setup.val, setup.cfg,
                                     setup.options, 100);
    fs::remove(ckpt);

    auto stitched = log_a;
    stitched.insert(stitched.end(), log_b.begin(), log_b.end());
    expect(stitched == log_full, "resumed loss trace must equal the straight run bit-exactly");
    expect(params_b == params_full, "resumed parameters must equal the straight run bit-exactly");
    expect(state_b == state_full, "resumed run state must equal the straight run");
}

// --------------------------------------------------------------------------
// 5. Packing invariants at scale
// --------------------------------------------------------------------------

void criterion_packing() {
    auto rng = rng::stream_for(31337, "acceptance-packing");
    const std::size_t max_len = 64;

    std::vector<corpus::Document> plain;
    std::vector<corpus::Document> instructions;
    std::map<std::int32_t, std::size_t> expected;
    for (int i = 0; i < 850; ++i) {
        auto doc = testutil::make_doc("doc-" + std::to_string(i), testutil::random_text(rng, 1, 8),
                                      rng.next_below(2) ? corpus::DocKind::general
                                                        : corpus::DocKind::medical);
        for (auto t : corpus::tokenize(doc.text)) ++expected[t];
        plain.push_back(std::move(doc));
    }
    for (int i = 0; i < 150; ++i) {
        std::string prompt = testutil::random_sentence(rng, 2, 12);
        std::string response = testutil::random_sentence(rng, 1, 10);
        instructions.push_back(
            testutil::make_instruction("ins-" + std::to_string(i), prompt, response));
    }

    auto [examples, stats] = packing::pack_documents(plain, max_len);
    packing::PackingStats istats;
    std::map<std::int32_t, std::size_t> instruction_expected;
    for (const auto& doc : instructions) {
        auto ex = packing::pack_instruction(doc, max_len, &istats);
        if (ex) {
            for (auto t : corpus::tokenize(doc.prompt)) ++instruction_expected[t];
            for (auto t : corpus::tokenize(doc.response)) ++instruction_expected[t];
            examples.push_back(std::move(*ex));
        }
    }
    for (const auto& [tok, count] : instruction_expected) expected[tok] += count;

    std::map<std::int32_t, std::size_t> actual;
    for (const auto& ex : examples) {
        expect(ex.tokens.size() <= max_len, "example exceeds max_len");
        expect(ex.tokens.size() == ex.loss_mask.size(), "mask/token length mismatch");
        bool any = false;
        for (auto m : ex.loss_mask) any = any || m == 1;
        expect(any, "example with no unmasked position");
        for (auto t : ex.tokens) {
            if (t >= corpus::TokenizerSpec::num_specials) ++actual[t];
        }
        // Mask legality per segment: instruction examples are recognizable by
        // their SEP token; prompts must be all-0 and responses all-1.
        bool has_sep = false;
        std::size_t sep_at = 0;
        for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
            if (ex.tokens[i] == corpus::TokenizerSpec::sep) {
                has_sep = true;
                sep_at = i;
            }
        }
        if (has_sep) {
            for (std::size_t i = 0; i <= sep_at; ++i) {
                expect(ex.loss_mask[i] == 0, "instruction prompt positions must be masked");
            }
            for (std::size_t i = sep_at + 1; i < ex.tokens.size(); ++i) {
                expect(ex.loss_mask[i] == 1, "instruction response positions must be unmasked");
            }
        } else {
            for (auto m : ex.loss_mask) {
                expect(m == 1, "plain segments must be unmasked everywhere");
            }
        }
    }
    expect(actual == expected, "token multiset must be conserved (minus skipped instructions)");

    // Deterministic re-pack, byte-for-byte.
    auto [examples2, stats2] = packing::pack_documents(plain, max_len);
    packing::PackingStats istats2;
    for (const auto& doc : instructions) {
        auto ex = packing::pack_instruction(doc, max_len, &istats2);
        if (ex) examples2.push_back(std::move(*ex));
    }
    std::ostringstream dump1;
    std::ostringstream dump2;
    for (const auto& ex : examples) dump1 << packing::to_json(ex).dump() << "\n";
    for (const auto& ex : examples2) dump2 << packing::to_json(ex).dump() << "\n";
    expect(dump1.str() == dump2.str(), "re-packing must be byte-identical");
}

// --------------------------------------------------------------------------
// 6. Dedup recall and MinHash accuracy
// --------------------------------------------------------------------------

void criterion_dedup() {
    auto rng = rng::stream_for(777, "acceptance-dedup");

    // Clean base corpus: no two documents share a 3-sentence window.
    std::vector<corpus::Document> docs;
    for (int i = 0; i < 200; ++i) {
        std::string text;
        for (int s = 0; s < 4; ++s) {
            text += "doc" + std::to_string(i) + " marker" + std::to_string(s) + " " +
                    testutil::random_sentence(rng) + " ";
        }
        docs.push_back(testutil::make_doc("clean-" + std::to_string(i), text));
    }
    auto [clean_kept, clean_report] = dedup::exact_shingle_dedup(docs, 3);
    expect(clean_report.docs_removed == 0, "clean corpus must see zero removals");

    // Plant 50 exact duplicates and 10 three-sentence-overlap documents after
    // their originals (keep-first must drop the copies, never the originals).
    std::set<std::string> planted;
    auto corpus_with_dups = docs;
    for (int i = 0; i < 50; ++i) {
        auto dup = docs[static_cast<std::size_t>(i * 3 % docs.size())];
        dup.id = "dup-" + std::to_string(i);
        planted.insert(dup.id);
        corpus_with_dups.push_back(std::move(dup));
    }
    for (int i = 0; i < 10; ++i) {
        const auto& base = docs[static_cast<std::size_t>(100 + i)];
        auto sentences = corpus::sentences(base.text);
        // New first sentence, then three sentences shared with the base doc.
        std::string text = "fresh opener " + std::to_string(i) + ". ";
        for (std::size_t s = 1; s < sentences.size(); ++s) {
            text += sentences[s] + " ";
        }
        corpus::Document overlap = testutil::make_doc("overlap-" + std::to_string(i), text);
        planted.insert(overlap.id);
        corpus_with_dups.push_back(overlap);
    }

    auto [kept, report] = dedup::exact_shingle_dedup(corpus_with_dups, 3);
    std::set<std::string> removed;
    for (const auto& [id, reason] : report.removed) removed.insert(id);
    expect(removed == planted, "exact pass must remove exactly the planted duplicates");

    // MinHash estimate accuracy against the exact set-intersection oracle.
    double max_err = 0.0;
    for (int pair = 0; pair < 100; ++pair) {
        std::size_t total_words = 20 + rng.next_below(30);
        std::size_t shared_words = rng.next_below(total_words + 1);
        std::string a_text;
        std::string b_text;
        for (std::size_t w = 0; w < total_words; ++w) {
            std::string shared_word = "s" + std::to_string(pair) + "w" + std::to_string(w) + " ";
            if (w < shared_words) {
                a_text += shared_word;
                b_text += shared_word;
            } else {
                a_text += "a" + std::to_string(pair) + "w" + std::to_string(w) + " ";
                b_text += "b" + std::to_string(pair) + "w" + std::to_string(w) + " ";
            }
        }
        double truth = testutil::exact_gram_jaccard(a_text, b_text);
        auto sa = dedup::minhash_signature(testutil::make_doc("a", a_text), 256, 4242);
        auto sb = dedup::minhash_signature(testutil::make_doc("b", b_text), 256, 4242);
        double est = dedup::estimate_jaccard(sa, sb);
        max_err = std::max(max_err, std::abs(est - truth));
    }
    if (max_err > 0.10) {
        check_fail("MinHash estimate deviates from the exact oracle by ", max_err);
    }
}

// --------------------------------------------------------------------------
// 7. Plateau policy
// --------------------------------------------------------------------------

void criterion_plateau() {
    schedule::PlateauPolicy policy;  // window 3, threshold 1%, decay 0.5
    std::vector<schedule::SeriesPoint> converging{{0, 3.0}, {1, 2.9}, {2, 2.89}, {3, 2.888}};
    expect(schedule::detect_plateau(converging, policy), "converging fixture must fire");

    std::vector<schedule::SeriesPoint> improving;
    double ppl = 8.0;
    for (std::uint64_t i = 0; i < 10; ++i) {
        improving.push_back({i, ppl});
        expect(!schedule::detect_plateau(improving, policy),
               "strictly 5%-improving series must never fire");
        ppl *= 0.95;
    }

    schedule::SamplingWeights w{{"a", 0.5}, {"b", 0.5}};
    auto decayed = schedule::next_phase_weights(w, {"a"}, policy);
    expect_near(decayed["a"], 1.0 / 3.0, 1e-15, "decayed weight a");
    expect_near(decayed["b"], 2.0 / 3.0, 1e-15, "decayed weight b");
    auto all = schedule::next_phase_weights(w, {"a", "b"}, policy);
    expect_near(all["a"], 0.5, 1e-15, "uniform decay must cancel");
    expect_near(all["b"], 0.5, 1e-15, "uniform decay must cancel");
}

// --------------------------------------------------------------------------
// 8. RoPE identities
// --------------------------------------------------------------------------

void criterion_rope() {
    auto half = rope::make_rope_params(16, 10000.0, 2048, 4096);  // scale 0.5
    auto unit = rope::make_rope_params(16, 10000.0, 4096, 4096);
    for (double m : {0.0, 2.0, 100.0, 2047.0}) {
        auto a = rope::rope_angles(m, half);
        auto b = rope::rope_angles(0.5 * m, unit);
        for (std::size_t i = 0; i < a.size(); ++i) {
            expect(a[i] == b[i], "interpolation equivalence must be exact");
        }
    }

    auto p = rope::make_rope_params(16, 10000.0, 4096, 4096);
    auto rng = rng::stream_for(808, "acceptance-rope");
    for (int iter = 0; iter < 1000; ++iter) {
        std::vector<double> q(16);
        std::vector<double> k(16);
        for (auto& x : q) x = 2.0 * rng.next_double() - 1.0;
        for (auto& x : k) x = 2.0 * rng.next_double() - 1.0;
        double m = static_cast<double>(rng.next_below(1024));
        double n = static_cast<double>(rng.next_below(1024));
        double delta = static_cast<double>(rng.next_below(3072));
        double base = rope::rel_attention_score(q, k, m, n, p);
        double shifted = rope::rel_attention_score(q, k, m + delta, n + delta, p);
        if (std::abs(base - shifted) > 1e-9) {
            check_fail("shift invariance violated by ", std::abs(base - shifted));
        }
        auto rotated = rope::apply_rope(q, m, p);
        double nq = 0.0;
        double nr = 0.0;
        for (std::size_t i = 0; i < q.size(); ++i) {
            nq += q[i] * q[i];
            nr += rotated[i] * rotated[i];
        }
        if (std::abs(std::sqrt(nq) - std::sqrt(nr)) > 1e-12) {
            check_fail("norm not preserved");
        }
    }
}

// --------------------------------------------------------------------------
// 9. Metric oracles
// --------------------------------------------------------------------------

void criterion_metrics() {
    struct RougeFixture {
        const char* cand;
        const char* ref;
        std::size_t n;  // 0 = rouge_cls
        double p, r, f1;
    };
    const RougeFixture fixtures[] = {
        {"the cat sat", "the cat", 1, 2.0 / 3.0, 1.0, 0.8},
        {"a b c", "a b c", 1, 1.0, 1.0, 1.0},
        {"x y z", "a b c", 1, 0.0, 0.0, 0.0},
        {"a b c", "a b d", 2, 0.5, 0.5, 0.5},
        {"a a b", "a b b", 1, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0},
        {"", "a b", 1, 0.0, 0.0, 0.0},
        {"The  CAT", "the cat", 1, 1.0, 1.0, 1.0},
        {"a b c d", "a c d", 0, 0.75, 1.0, 6.0 / 7.0},
        {"same words here. again more.", "same words here. again more.", 0, 1.0, 1.0, 1.0},
        {"", "a b", 0, 0.0, 0.0, 0.0},
        {"a b c. x y.", "a b c. d e f.", 0, 0.6, 0.5, 6.0 / 11.0},
        {"a b a", "a a", 0, 2.0 / 3.0, 1.0, 0.8},
    };
    int index = 0;
    for (const auto& fx : fixtures) {
        auto score = fx.n == 0 ? eval::rouge_cls(fx.cand, fx.ref) : eval::rouge_n(fx.cand, fx.ref, fx.n);
        expect_near(score.precision, fx.p, 1e-12, "rouge fixture " + std::to_string(index) + " precision");
        expect_near(score.recall, fx.r, 1e-12, "rouge fixture " + std::to_string(index) + " recall");
        expect_near(score.f1, fx.f1, 1e-12, "rouge fixture " + std::to_string(index) + " f1");
        ++index;
    }

    // Entity aggregation: the 20-unit fixture averaging 0.85 / 0.30 / 4.30.
    std::vector<eval::EntityRubric> rubrics;
    for (int t = 0; t < 10; ++t) {
        eval::EntityRubric r;
        r.transcript_id = "t" + std::to_string(t);
        for (int e = 0; e < 10; ++e) {
            r.entities.emplace_back("e" + std::to_string(e), "phrase " + std::to_string(e));
        }
        rubrics.push_back(std::move(r));
    }
    std::vector<eval::EntityJudgment> judgments;
    for (int unit = 0; unit < 20; ++unit) {
        eval::EntityJudgment j;
        j.transcript_id = "t" + std::to_string(unit / 2);
        j.model = "toy-lm";
        std::size_t incorrect = unit < 17 ? 1 : 0;
        std::size_t missed = unit < 14 ? 4 : 5;
        for (int e = 0; e < 10; ++e) {
            eval::EntityStatus status = eval::EntityStatus::captured;
            if (static_cast<std::size_t>(e) < incorrect) {
                status = eval::EntityStatus::incorrect;
            } else if (static_cast<std::size_t>(e) < incorrect + missed) {
                status = eval::EntityStatus::missed;
            }
            j.entities.emplace_back("e" + std::to_string(e), status);
        }
        if (unit < 6) j.irrelevant_spans.push_back("extra");
        judgments.push_back(std::move(j));
    }
    auto report = eval::aggregate_entity_report(judgments, rubrics);
    expect_near(report.avg_incorrect, 0.85, 1e-12, "20-unit avg incorrect");
    expect_near(report.avg_irrelevant, 0.30, 1e-12, "20-unit avg irrelevant");
    expect_near(report.avg_missed, 4.30, 1e-12, "20-unit avg missed");

    // Two-unit fixture: (1,0,4) and (0,1,5) -> 0.5 / 0.5 / 4.5.
    std::vector<eval::EntityRubric> rubrics2{rubrics[0], rubrics[1]};
    rubrics2[0].transcript_id = "u1";
    rubrics2[1].transcript_id = "u2";
    std::vector<eval::EntityJudgment> judgments2(2);
    judgments2[0].transcript_id = "u1";
    judgments2[1].transcript_id = "u2";
    for (auto& j : judgments2) j.model = "m";
    for (int e = 0; e < 10; ++e) {
        auto id = "e" + std::to_string(e);
        judgments2[0].entities.emplace_back(
            id, e < 1 ? eval::EntityStatus::incorrect
                      : (e < 5 ? eval::EntityStatus::missed : eval::EntityStatus::captured));
        judgments2[1].entities.emplace_back(
            id, e < 5 ? eval::EntityStatus::missed : eval::EntityStatus::captured);
    }
    judgments2[1].irrelevant_spans.push_back("span");
    auto report2 = eval::aggregate_entity_report(judgments2, rubrics2);
    expect_near(report2.avg_incorrect, 0.5, 1e-12, "2-unit avg incorrect");
    expect_near(report2.avg_irrelevant, 0.5, 1e-12, "2-unit avg irrelevant");
    expect_near(report2.avg_missed, 4.5, 1e-12, "2-unit avg missed");

    std::vector<bool> results(1000, false);
    for (int i = 0; i < 784; ++i) results[i] = true;
    expect_near(eval::aggregate_accuracy(results), 78.4, 1e-12, "accuracy fixture");
}

// --------------------------------------------------------------------------
// 10. End-to-end pipeline on the bundled corpus
// --------------------------------------------------------------------------

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    expect(in.good(), "missing artifact " + path.string());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

void criterion_end_to_end() {
    const std::string config = std::string(GRIST_REPO_DIR) + "/data/sample/pipeline.json";
    const fs::path out_dir = fs::temp_directory_path() / "grist_acceptance_e2e";
    fs::remove_all(out_dir);
    const std::string log_path = (out_dir.string() + ".log");

    std::string command = std::string(GRIST_CLI_PATH) + " all " + config + " -o " + out_dir.string() +
                          " > " + log_path + " 2>&1";
    int status = std::system(command.c_str());
    if (status != 0) {
        std::string tail;
        std::ifstream log(log_path);
        std::string line;
        while (std::getline(log, line)) tail = line;
        check_fail("CLI `all` run exited with status ", status, "; last log line: ", tail);
    }

    // Validation perplexity must drop below 0.8x its initial value.
    std::map<std::string, std::pair<double, double>> first_last;  // subset -> (first, last)
    std::istringstream vlog(slurp(out_dir / "train" / "validation_log.jsonl"));
    std::string line;
    std::map<std::string, std::uint64_t> last_step;
    while (std::getline(vlog, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        auto subset = j.at("subset").get<std::string>();
        auto step = j.at("step").get<std::uint64_t>();
        auto ppl = j.at("ppl").get<double>();
        if (!first_last.count(subset)) {
            first_last[subset] = {ppl, ppl};
            last_step[subset] = step;
        } else if (step >= last_step[subset]) {
            first_last[subset].second = ppl;
            last_step[subset] = step;
        }
    }
    expect(!first_last.empty(), "validation log is empty");
    for (const auto& [subset, pair] : first_last) {
        if (!(pair.second < 0.8 * pair.first)) {
            check_fail("subset ", subset, ": final ppl ", pair.second,
                       " did not drop below 0.8 * initial (", pair.first, ")");
        }
    }

    // Stub-oracle suite scores.
    auto long_result = nlohmann::json::parse(slurp(out_dir / "eval" / "long.json"));
    expect_near(long_result["score"]["f1"].get<double>(), 1.0, 1e-12, "long-suite f1");
    auto medium_result = nlohmann::json::parse(slurp(out_dir / "eval" / "medium.json"));
    expect_near(medium_result["score"]["f1"].get<double>(), 1.0, 1e-12, "medium-suite f1");
    auto single_result = nlohmann::json::parse(slurp(out_dir / "eval" / "short_single.json"));
    expect_near(single_result["score"].get<double>(), 100.0, 1e-12, "single-choice accuracy");
    auto multi_result = nlohmann::json::parse(slurp(out_dir / "eval" / "short_multi.json"));
    expect_near(multi_result["score"].get<double>(), 100.0, 1e-12, "multi-choice accuracy");

    // A checkpoint and a report came out of the run.
    expect(fs::exists(out_dir / "train" / "checkpoint.bin"), "missing trained checkpoint");
    expect(fs::exists(out_dir / "report" / "report.txt"), "missing report");
    fs::remove_all(out_dir);
    fs::remove(log_path);
}

}  // namespace

int main() {
    struct Criterion {
        int id;
        const char* name;
        double budget_seconds;
        std::function<void()> run;
    };
    const std::vector<Criterion> criteria = {
        {1, "source-mix arithmetic", 1, criterion_manifest_stats},
        {2, "learning-rate schedule anchors", 1, criterion_lr_schedule},
        {3, "gradient correctness vs finite differences", 30, criterion_gradients},
        {4, "determinism and checkpoint resume", 60, criterion_determinism_resume},
        {5, "packing invariants on 1000 documents", 30, criterion_packing},
        {6, "dedup recall and MinHash accuracy", 60, criterion_dedup},
        {7, "plateau policy fixtures", 1, criterion_plateau},
        {8, "rotary embedding identities", 10, criterion_rope},
        {9, "metric oracles", 5, criterion_metrics},
        {10, "end-to-end pipeline on the bundled corpus", 120, criterion_end_to_end},
    };

    int failures = 0;
    for (const auto& criterion : criteria) {
        auto start = std::chrono::steady_clock::now();
        std::string error;
        try {
            criterion.run();
        } catch (const std::exception& e) {
            error = e.what();
        }
        double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        bool ok = error.empty() && elapsed <= criterion.budget_seconds;
        if (!ok) ++failures;
        std::ostringstream line;
        line << (ok ? "[PASS] " : "[FAIL] ") << criterion.id << ". " << criterion.name << " ("
             << std::fixed << std::setprecision(2) << elapsed << "s / budget "
             << criterion.budget_seconds << "s)";
        if (!error.empty()) {
            line << " -- " << error;
        } else if (!ok) {
            line << " -- exceeded time budget";
        }
        std::cout << line.str() << std::endl;
    }
    if (failures > 0) {
        std::cout << failures << " criterion(s) failed" << std::endl;
        return 1;
    }
    std::cout << "all criteria passed" << std::endl;
    return 0;
}
