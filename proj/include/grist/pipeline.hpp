#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "grist/corpus.hpp"
#include "grist/dedup.hpp"
#include "grist/error.hpp"
#include "grist/eval.hpp"
#include "grist/harness.hpp"
#include "grist/packing.hpp"
#include "grist/rng.hpp"
#include "grist/rope.hpp"
#include "grist/schedule.hpp"
#include "grist/toytrain.hpp"

namespace grist::pipeline {

namespace fs = std::filesystem;

/// Raised for malformed or inconsistent configuration (CLI exit code 3).
class ConfigError : public Error {
public:
    using Error::Error;
};

template <typename... Parts>
[[noreturn]] void config_fail(Parts&&... parts) {
    std::ostringstream os;
    grist::detail::append_all(os, std::forward<Parts>(parts)...);
    throw ConfigError(os.str());
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct DedupConfig {
    std::size_t k = 3;
    std::size_t num_perms = 256;
    double threshold = 0.8;
    std::uint64_t seed = 1234;
};

struct PackingConfig {
    std::size_t max_len = 64;
    double val_fraction = 0.1;
};

struct ScheduleConfig {
    schedule::LRScheduleParams lr{5e-5, 1e-5, 50, 500};
    std::size_t batch = 256;
    double weight_decay = 0.1;
    std::uint64_t master_seed = 42;
    schedule::PlateauPolicy plateau;
    std::vector<std::uint64_t> phases;
};

struct ModelConfig {
    std::size_t d_model = 32;
    std::size_t max_len = 64;
    double init_std = 0.08;
};

struct RopeConfig {
    std::size_t head_dim = 32;
    double theta = 10000.0;
    std::size_t trained_len = 4096;
    std::size_t target_len = 8192;
};

struct EvalConfig {
    std::vector<std::string> task_files;
    std::string exemplars_file;
    std::size_t k = 3;
    harness::EndpointConfig endpoint;
    std::string rubrics_file;
    std::string judgments_file;
};

struct PipelineConfig {
    std::string manifest_path;
    std::string output_dir = "out";
    DedupConfig dedup;
    PackingConfig packing;
    ScheduleConfig sched;
    ModelConfig model;
    RopeConfig rope;
    EvalConfig eval;
    nlohmann::json effective;  // merged view, written next to the outputs
};

namespace detail {

inline void set_json_path(nlohmann::json& j, const std::string& dotted, const nlohmann::json& value) {
    nlohmann::json* node = &j;
    std::size_t start = 0;
    while (true) {
        std::size_t dot = dotted.find('.', start);
        std::string key = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
        require(!key.empty(), "override key has an empty segment: \"", dotted, "\"");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

inline std::string resolve_path(const fs::path& base_dir, const std::string& path) {
    if (path.empty()) return path;
    fs::path p(path);
    if (p.is_absolute()) return p.string();
    return (base_dir / p).lexically_normal().string();
}

}  // namespace detail

/// Parse a "key.path=value" override. Values parse as JSON when possible and
/// fall back to strings.
inline std::pair<std::string, nlohmann::json> parse_override(const std::string& setting) {
    std::size_t eq = setting.find('=');
    if (eq == std::string::npos || eq == 0) {
        config_fail("override \"", setting, "\" is not of the form key=value");
    }
    std::string key = setting.substr(0, eq);
    std::string raw = setting.substr(eq + 1);
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) {
        value = raw;
    }
    return {key, value};
}

inline PipelineConfig parse_config(nlohmann::json j, const fs::path& base_dir) {
    PipelineConfig cfg;
    try {
        if (!j.contains("manifest")) config_fail("config is missing \"manifest\"");
        cfg.manifest_path = detail::resolve_path(base_dir, j.at("manifest").get<std::string>());
        cfg.output_dir = j.value("output_dir", std::string("out"));

        if (j.contains("dedup")) {
            const auto& d = j.at("dedup");
            cfg.dedup.k = d.value("k", cfg.dedup.k);
            cfg.dedup.num_perms = d.value("num_perms", cfg.dedup.num_perms);
            cfg.dedup.threshold = d.value("threshold", cfg.dedup.threshold);
            cfg.dedup.seed = d.value("seed", cfg.dedup.seed);
        }
        if (j.contains("packing")) {
            const auto& p = j.at("packing");
            cfg.packing.max_len = p.value("max_len", cfg.packing.max_len);
            cfg.packing.val_fraction = p.value("val_fraction", cfg.packing.val_fraction);
        }
        if (j.contains("schedule")) {
            const auto& s = j.at("schedule");
            cfg.sched.lr.eta_max = s.value("eta_max", cfg.sched.lr.eta_max);
            cfg.sched.lr.eta_min = s.value("eta_min", cfg.sched.lr.eta_min);
            cfg.sched.lr.warmup_steps = s.value("warmup", cfg.sched.lr.warmup_steps);
            cfg.sched.lr.total_steps = s.value("total_steps", cfg.sched.lr.total_steps);
            cfg.sched.batch = s.value("batch", cfg.sched.batch);
            cfg.sched.weight_decay = s.value("weight_decay", cfg.sched.weight_decay);
            cfg.sched.master_seed = s.value("master_seed", cfg.sched.master_seed);
            if (s.contains("plateau")) {
                const auto& p = s.at("plateau");
                cfg.sched.plateau.window = p.value("window", cfg.sched.plateau.window);
                cfg.sched.plateau.rel_threshold =
                    p.value("rel_threshold", cfg.sched.plateau.rel_threshold);
                cfg.sched.plateau.decay = p.value("decay", cfg.sched.plateau.decay);
            }
            if (s.contains("phases")) {
                cfg.sched.phases = s.at("phases").get<std::vector<std::uint64_t>>();
            }
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            cfg.model.d_model = m.value("d_model", cfg.model.d_model);
            cfg.model.max_len = m.value("max_len", cfg.model.max_len);
            cfg.model.init_std = m.value("init_std", cfg.model.init_std);
        }
        cfg.rope.head_dim = cfg.model.d_model;
        cfg.rope.trained_len = cfg.model.max_len;
        cfg.rope.target_len = cfg.model.max_len;
        if (j.contains("rope")) {
            const auto& r = j.at("rope");
            cfg.rope.head_dim = r.value("head_dim", cfg.rope.head_dim);
            cfg.rope.theta = r.value("theta", cfg.rope.theta);
            cfg.rope.trained_len = r.value("trained_len", cfg.rope.trained_len);
            cfg.rope.target_len = r.value("target_len", cfg.rope.target_len);
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            if (e.contains("tasks")) {
                for (const auto& t : e.at("tasks")) {
                    cfg.eval.task_files.push_back(
                        detail::resolve_path(base_dir, t.get<std::string>()));
                }
            }
            if (e.contains("exemplars")) {
                cfg.eval.exemplars_file =
                    detail::resolve_path(base_dir, e.at("exemplars").get<std::string>());
            }
            cfg.eval.k = e.value("k", cfg.eval.k);
            if (e.contains("endpoint")) {
                const auto& ep = e.at("endpoint");
                cfg.eval.endpoint.base_url = ep.value("base_url", std::string{});
                cfg.eval.endpoint.timeout_seconds =
                    ep.value("timeout_seconds", cfg.eval.endpoint.timeout_seconds);
                cfg.eval.endpoint.max_retries =
                    ep.value("max_retries", cfg.eval.endpoint.max_retries);
                cfg.eval.endpoint.max_tokens = ep.value("max_tokens", cfg.eval.endpoint.max_tokens);
                cfg.eval.endpoint.temperature =
                    ep.value("temperature", cfg.eval.endpoint.temperature);
                cfg.eval.endpoint.backoff_ms = ep.value("backoff_ms", cfg.eval.endpoint.backoff_ms);
                cfg.eval.endpoint.concurrency =
                    ep.value("concurrency", cfg.eval.endpoint.concurrency);
            }
            if (e.contains("rubrics")) {
                cfg.eval.rubrics_file = detail::resolve_path(base_dir, e.at("rubrics").get<std::string>());
            }
            if (e.contains("judgments")) {
                cfg.eval.judgments_file =
                    detail::resolve_path(base_dir, e.at("judgments").get<std::string>());
            }
        }
    } catch (const nlohmann::json::exception& e) {
        config_fail("invalid config: ", e.what());
    }
    if (const char* key = std::getenv("MODEL_API_KEY")) {
        cfg.eval.endpoint.api_key = key;
    }
    cfg.effective = std::move(j);
    return cfg;
}

inline PipelineConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in.good()) {
        config_fail("cannot open config file \"", path, "\"");
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        config_fail("config \"", path, "\" is not valid JSON: ", e.what());
    }
    for (const auto& setting : overrides) {
        auto [key, value] = parse_override(setting);
        try {
            detail::set_json_path(j, key, value);
        } catch (const Error& e) {
            config_fail(e.what());
        }
    }
    return parse_config(std::move(j), fs::path(path).parent_path());
}

/// Validate cross-field invariants before any stage runs.
inline void validate(const PipelineConfig& cfg) {
    try {
        require(fs::exists(cfg.manifest_path), "manifest file \"", cfg.manifest_path,
                "\" does not exist");
        schedule::validate(cfg.sched.lr);
        schedule::validate(cfg.sched.plateau);
        for (auto b : cfg.sched.phases) {
            require(b > 0 && b < cfg.sched.lr.total_steps, "phase boundary ", b,
                    " must be inside (0, total_steps)");
        }
        require(cfg.packing.max_len >= packing::kMinMaxLen, "packing.max_len must be >= ",
                packing::kMinMaxLen);
        require(cfg.packing.val_fraction > 0.0 && cfg.packing.val_fraction < 1.0,
                "packing.val_fraction must be in (0,1)");
        require(cfg.dedup.threshold > 0.0 && cfg.dedup.threshold <= 1.0,
                "dedup.threshold must be in (0,1]");
        require(cfg.dedup.num_perms >= 1, "dedup.num_perms must be >= 1");
        require(cfg.rope.head_dim == cfg.model.d_model,
                "rope.head_dim must equal model.d_model");
        auto rp = rope::make_rope_params(cfg.rope.head_dim, cfg.rope.theta, cfg.rope.trained_len,
                                         cfg.rope.target_len);
        require(cfg.model.max_len <= rp.target_len, "model.max_len must be <= rope.target_len");
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        config_fail(e.what());
    }
}

inline toytrain::ToyLMConfig toy_config(const PipelineConfig& cfg) {
    toytrain::ToyLMConfig toy;
    toy.d_model = cfg.model.d_model;
    toy.max_len = cfg.model.max_len;
    toy.init_std = cfg.model.init_std;
    toy.weight_decay = cfg.sched.weight_decay;
    toy.batch_size = cfg.sched.batch;
    toy.rope = rope::make_rope_params(cfg.rope.head_dim, cfg.rope.theta, cfg.rope.trained_len,
                                      cfg.rope.target_len);
    return toy;
}

// ---------------------------------------------------------------------------
// Stage plumbing: output layout, stamps, config hashes
// ---------------------------------------------------------------------------

struct StageContext {
    PipelineConfig cfg;
    bool force = false;

    fs::path out() const { return fs::path(cfg.output_dir); }
    fs::path stage_dir(const std::string& stage) const { return out() / stage; }
};

namespace detail {

inline std::string hash_hex(const std::string& data) {
    std::uint64_t h = rng::hash_bytes(data);
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

inline std::string file_digest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.good()) return "missing";
    std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return hash_hex(content);
}

inline void write_stamp(const fs::path& dir, const std::string& hash) {
    std::ofstream out(dir / ".stamp.json");
    out << nlohmann::json{{"config_hash", hash}}.dump() << "\n";
}

inline bool stamp_matches(const fs::path& dir, const std::string& hash) {
    std::ifstream in(dir / ".stamp.json");
    if (!in.good()) return false;
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    return !j.is_discarded() && j.value("config_hash", std::string{}) == hash;
}

inline std::string read_stamp(const fs::path& dir) {
    std::ifstream in(dir / ".stamp.json");
    if (!in.good()) return "";
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    return j.is_discarded() ? "" : j.value("config_hash", std::string{});
}

}  // namespace detail

inline std::string ingest_hash(const StageContext& ctx) {
    return detail::hash_hex("ingest|" + ctx.cfg.manifest_path + "|" +
                            detail::file_digest(ctx.cfg.manifest_path));
}

inline std::string dedup_hash(const StageContext& ctx) {
    nlohmann::json d{{"k", ctx.cfg.dedup.k},
                     {"num_perms", ctx.cfg.dedup.num_perms},
                     {"threshold", ctx.cfg.dedup.threshold},
                     {"seed", ctx.cfg.dedup.seed}};
    return detail::hash_hex("dedup|" + detail::read_stamp(ctx.stage_dir("ingest")) + "|" + d.dump());
}

inline std::string pack_hash(const StageContext& ctx) {
    nlohmann::json p{{"max_len", ctx.cfg.packing.max_len},
                     {"val_fraction", ctx.cfg.packing.val_fraction}};
    return detail::hash_hex("pack|" + detail::read_stamp(ctx.stage_dir("dedup")) + "|" + p.dump());
}

inline std::string train_hash(const StageContext& ctx) {
    nlohmann::json t{{"eta_max", ctx.cfg.sched.lr.eta_max},
                     {"eta_min", ctx.cfg.sched.lr.eta_min},
                     {"warmup", ctx.cfg.sched.lr.warmup_steps},
                     {"total_steps", ctx.cfg.sched.lr.total_steps},
                     {"batch", ctx.cfg.sched.batch},
                     {"weight_decay", ctx.cfg.sched.weight_decay},
                     {"master_seed", ctx.cfg.sched.master_seed},
                     {"phases", ctx.cfg.sched.phases},
                     {"window", ctx.cfg.sched.plateau.window},
                     {"rel_threshold", ctx.cfg.sched.plateau.rel_threshold},
                     {"decay", ctx.cfg.sched.plateau.decay},
                     {"d_model", ctx.cfg.model.d_model},
                     {"max_len", ctx.cfg.model.max_len},
                     {"init_std", ctx.cfg.model.init_std},
                     {"rope_trained", ctx.cfg.rope.trained_len},
                     {"rope_target", ctx.cfg.rope.target_len},
                     {"rope_theta", ctx.cfg.rope.theta}};
    return detail::hash_hex("train|" + detail::read_stamp(ctx.stage_dir("pack")) + "|" + t.dump());
}

inline std::string eval_hash(const StageContext& ctx) {
    nlohmann::json e{{"tasks", ctx.cfg.eval.task_files},
                     {"exemplars", ctx.cfg.eval.exemplars_file},
                     {"k", ctx.cfg.eval.k},
                     {"base_url", ctx.cfg.eval.endpoint.base_url},
                     {"max_tokens", ctx.cfg.eval.endpoint.max_tokens},
                     {"temperature", ctx.cfg.eval.endpoint.temperature}};
    return detail::hash_hex("eval|" + e.dump());
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline void run_ingest(const StageContext& ctx) {
    auto manifest = corpus::load_manifest(ctx.cfg.manifest_path);
    const fs::path manifest_dir = fs::path(ctx.cfg.manifest_path).parent_path();
    const fs::path dir = ctx.stage_dir("ingest");
    fs::create_directories(dir);

    std::vector<corpus::Document> all_docs;
    for (auto& spec : manifest.sources) {
        auto docs = corpus::ingest_jsonl(detail::resolve_path(manifest_dir, spec.path), spec);
        for (auto& d : docs) {
            all_docs.push_back(std::move(d));
        }
    }
    manifest.recompute_totals();
    corpus::write_documents_jsonl(all_docs, (dir / "docs.jsonl").string());
    corpus::save_manifest(manifest, (dir / "manifest.json").string());
    detail::write_stamp(dir, ingest_hash(ctx));
}

inline void run_dedup(const StageContext& ctx) {
    const fs::path in_path = ctx.stage_dir("ingest") / "docs.jsonl";
    require(fs::exists(in_path), "dedup: missing ", in_path.string(), " (run ingest first)");
    auto docs = corpus::read_documents_jsonl(in_path.string());
    const fs::path dir = ctx.stage_dir("dedup");
    fs::create_directories(dir);

    auto [after_exact, exact_report] = dedup::exact_shingle_dedup(docs, ctx.cfg.dedup.k);
    dedup::NearDedupParams np;
    np.threshold = ctx.cfg.dedup.threshold;
    np.num_perms = ctx.cfg.dedup.num_perms;
    np.seed = ctx.cfg.dedup.seed;
    auto [kept, near_report] = dedup::near_dedup(after_exact, np);

    dedup::DedupReport report;
    report.docs_in = docs.size();
    report.removed = exact_report.removed;
    report.removed.insert(report.removed.end(), near_report.removed.begin(),
                          near_report.removed.end());
    report.docs_removed = report.removed.size();
    std::uint64_t tokens_in = 0;
    std::uint64_t tokens_kept = 0;
    for (const auto& d : docs) tokens_in += corpus::token_count(d);
    for (const auto& d : kept) tokens_kept += corpus::token_count(d);
    report.tokens_removed_fraction =
        tokens_in > 0
            ? static_cast<double>(tokens_in - tokens_kept) / static_cast<double>(tokens_in)
            : 0.0;

    corpus::write_documents_jsonl(kept, (dir / "docs.jsonl").string());
    std::ofstream rout(dir / "report.json");
    rout << dedup::to_json(report).dump(2) << "\n";
    detail::write_stamp(dir, dedup_hash(ctx));
}

inline void run_pack(const StageContext& ctx) {
    const fs::path in_path = ctx.stage_dir("dedup") / "docs.jsonl";
    require(fs::exists(in_path), "pack: missing ", in_path.string(), " (run dedup first)");
    auto docs = corpus::read_documents_jsonl(in_path.string());
    auto manifest = corpus::load_manifest((ctx.stage_dir("ingest") / "manifest.json").string());
    const fs::path dir = ctx.stage_dir("pack");
    fs::create_directories(dir);

    packing::PackingStats total_stats;
    double fill_sum = 0.0;
    for (const auto& spec : manifest.sources) {
        std::vector<corpus::Document> plain;
        std::vector<corpus::Document> instructions;
        for (const auto& d : docs) {
            if (d.source != spec.name) continue;
            (d.is_instruction() ? instructions : plain).push_back(d);
        }
        auto [examples, stats] = packing::pack_documents(plain, ctx.cfg.packing.max_len);
        fill_sum += stats.fill_ratio * static_cast<double>(stats.examples);
        for (const auto& doc : instructions) {
            auto ex = packing::pack_instruction(doc, ctx.cfg.packing.max_len, &stats);
            if (ex) {
                fill_sum += static_cast<double>(ex->tokens.size()) /
                            static_cast<double>(ctx.cfg.packing.max_len);
                examples.push_back(std::move(*ex));
            }
        }
        total_stats.examples += stats.examples;
        total_stats.sentences_split += stats.sentences_split;
        total_stats.instructions_skipped += stats.instructions_skipped;

        // Deterministic train/validation split: every stride-th example goes
        // to validation.
        std::size_t stride = static_cast<std::size_t>(std::llround(1.0 / ctx.cfg.packing.val_fraction));
        if (stride < 2) stride = 2;
        std::vector<packing::PackedExample> train;
        std::vector<packing::PackedExample> val;
        for (std::size_t i = 0; i < examples.size(); ++i) {
            if (!toytrain::trainable(examples[i])) {
                continue;  // degenerate example (a lone BOS chunk): nothing to predict
            }
            if (i % stride == stride - 1) {
                val.push_back(examples[i]);
            } else {
                train.push_back(examples[i]);
            }
        }
        if (val.empty() && train.size() >= 2) {
            val.push_back(train.back());
            train.pop_back();
        }
        require(!train.empty(), "pack: source \"", spec.name, "\" has no trainable examples");
        require(!val.empty(), "pack: source \"", spec.name, "\" has no validation examples");
        packing::write_packed_jsonl(train, (dir / (spec.name + ".train.jsonl")).string());
        packing::write_packed_jsonl(val, (dir / (spec.name + ".val.jsonl")).string());
    }
    total_stats.fill_ratio =
        total_stats.examples > 0 ? fill_sum / static_cast<double>(total_stats.examples) : 0.0;
    std::ofstream sout(dir / "stats.json");
    sout << nlohmann::json{{"examples", total_stats.examples},
                           {"fill_ratio", total_stats.fill_ratio},
                           {"sentences_split", total_stats.sentences_split},
                           {"instructions_skipped", total_stats.instructions_skipped}}
                .dump(2)
         << "\n";
    detail::write_stamp(dir, pack_hash(ctx));
}

inline schedule::SamplingWeights initial_weights(const corpus::SourceManifest& manifest) {
    schedule::SamplingWeights weights;
    if (manifest.weights_set()) {
        for (const auto& s : manifest.sources) {
            weights[s.name] = s.weight;
        }
        return weights;
    }
    for (const auto& s : manifest.sources) {
        weights[s.name] = static_cast<double>(s.token_count);
    }
    return schedule::normalized(std::move(weights));
}

inline void run_train(const StageContext& ctx) {
    const fs::path pack_dir = ctx.stage_dir("pack");
    auto manifest = corpus::load_manifest((ctx.stage_dir("ingest") / "manifest.json").string());
    const fs::path dir = ctx.stage_dir("train");
    fs::create_directories(dir);

    toytrain::SubsetExamples train;
    toytrain::SubsetExamples val;
    for (const auto& spec : manifest.sources) {
        const fs::path train_path = pack_dir / (spec.name + ".train.jsonl");
        require(fs::exists(train_path), "train: missing ", train_path.string(),
                " (run pack first)");
        train[spec.name] = packing::read_packed_jsonl(train_path.string());
        val[spec.name] = packing::read_packed_jsonl((pack_dir / (spec.name + ".val.jsonl")).string());
    }

    auto toy = toy_config(ctx.cfg);
    auto params = toytrain::init_params(toy, ctx.cfg.sched.master_seed);
    auto opt = toytrain::make_optimizer(toy);

    schedule::RunState state;
    state.master_seed = ctx.cfg.sched.master_seed;
    state.batch_size = ctx.cfg.sched.batch;
    state.weight_decay = ctx.cfg.sched.weight_decay;
    state.weights = initial_weights(manifest);
    state.rng = rng::stream_for(state.master_seed, "run");

    schedule::PhasePlan plan;
    plan.n_subsets = manifest.sources.size();
    plan.phase_boundaries = ctx.cfg.sched.phases;
    plan.policy = ctx.cfg.sched.plateau;
    schedule::validate(plan, ctx.cfg.sched.lr.total_steps);

    toytrain::TrainOptions options;
    options.lr = ctx.cfg.sched.lr;
    options.plateau = plan.policy;
    options.phase_boundaries = plan.phase_boundaries;
    options.batch_size = ctx.cfg.sched.batch;

    auto log = toytrain::train_run(params, opt, state, train, val, toy, options,
                                   ctx.cfg.sched.lr.total_steps);

    toytrain::save_training_checkpoint(state, params, opt, (dir / "checkpoint.bin").string());
    std::ofstream tlog(dir / "train_log.jsonl");
    for (const auto& entry : log) {
        nlohmann::json draws(entry.draw_counts);
        tlog << nlohmann::json{{"step", entry.step},
                               {"lr", entry.lr},
                               {"loss", entry.loss},
                               {"draws", draws}}
                    .dump()
             << "\n";
    }
    std::ofstream vlog(dir / "validation_log.jsonl");
    for (const auto& [subset, points] : state.series) {
        for (const auto& pt : points) {
            vlog << nlohmann::json{{"subset", subset}, {"step", pt.step}, {"ppl", pt.ppl}}.dump()
                 << "\n";
        }
    }
    detail::write_stamp(dir, train_hash(ctx));
}

inline void run_eval(const StageContext& ctx) {
    require(!ctx.cfg.eval.task_files.empty(), "eval: no task files configured");
    require(!ctx.cfg.eval.exemplars_file.empty(), "eval: no exemplars file configured");
    const fs::path dir = ctx.stage_dir("eval");
    fs::create_directories(dir);

    auto exemplars = eval::read_tasks_jsonl(ctx.cfg.eval.exemplars_file);
    std::map<eval::TaskType, std::vector<eval::TaskExample>> exemplars_by_type;
    for (auto& ex : exemplars) {
        exemplars_by_type[ex.task_type].push_back(std::move(ex));
    }

    std::vector<std::vector<eval::TaskExample>> suites;
    for (const auto& file : ctx.cfg.eval.task_files) {
        suites.push_back(eval::read_tasks_jsonl(file));
        require(!suites.back().empty(), "eval: task file \"", file, "\" is empty");
    }

    // A stub:// endpoint spins up the local stub server; evaluation then
    // exercises the real HTTP path against it.
    harness::EndpointConfig endpoint = ctx.cfg.eval.endpoint;
    std::unique_ptr<harness::StubServer> stub;
    if (endpoint.base_url.rfind("stub://", 0) == 0) {
        std::string mode = endpoint.base_url.substr(7);
        std::string fixed_text;
        if (mode.rfind("fixed:", 0) == 0) {
            fixed_text = mode.substr(6);
            mode = "fixed";
        }
        std::map<std::string, std::string> references;
        for (const auto& suite : suites) {
            for (const auto& task : suite) {
                std::string ref = task.reference;
                if (task.task_type == eval::TaskType::short_multi) {
                    ref.clear();
                    for (std::size_t i = 0; i < task.reference_set.size(); ++i) {
                        if (i > 0) ref += ", ";
                        ref += task.reference_set[i];
                    }
                }
                references[task.id] = ref;
            }
        }
        stub = std::make_unique<harness::StubServer>(harness::stub_mode_from_string(mode),
                                                     fixed_text, std::move(references));
        endpoint.base_url = stub->base_url();
    }

    std::ostringstream summary;
    for (const auto& suite : suites) {
        const auto type = suite.front().task_type;
        auto it = exemplars_by_type.find(type);
        require(it != exemplars_by_type.end(), "eval: no exemplars for task type ",
                eval::to_string(type));
        auto result = harness::run_task_suite(endpoint, suite, it->second, ctx.cfg.eval.k);
        const std::string name = std::string(eval::to_string(type));
        std::ofstream out(dir / (name + ".json"));
        out << harness::to_json(result).dump(2) << "\n";
        summary << name << ": " << result.metric << " = ";
        if (result.metric == "accuracy") {
            summary << result.accuracy;
        } else {
            summary << result.rouge.f1;
        }
        summary << " (n=" << result.n_examples << ", failures=" << result.failures << ")\n";
    }
    std::ofstream sout(dir / "summary.txt");
    sout << summary.str();
    detail::write_stamp(dir, eval_hash(ctx));
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

namespace detail {

inline std::string render_manifest_table(const corpus::SourceManifest& manifest) {
    auto stats = corpus::manifest_stats(manifest);
    const bool billions = stats.total_tokens >= 1'000'000'000ull;
    std::ostringstream out;
    out << std::left << std::setw(24) << "Dataset" << std::right << std::setw(18)
        << (billions ? "Tokens (billions)" : "Tokens") << std::setw(22) << "Percentage of total"
        << "\n";
    out << std::string(64, '-') << "\n";
    out << std::fixed;
    auto put_tokens = [&](std::uint64_t tokens) {
        if (billions) {
            out << std::setw(18) << std::setprecision(2) << (static_cast<double>(tokens) / 1e9);
        } else {
            out << std::setw(18) << tokens;
        }
    };
    for (const auto& cs : stats.categories) {
        out << std::left << std::setw(24) << std::string(corpus::to_string(cs.category))
            << std::right;
        put_tokens(cs.tokens);
        out << std::setw(22) << std::setprecision(2) << cs.display_percent << "\n";
    }
    out << std::left << std::setw(24) << "Total" << std::right;
    put_tokens(stats.total_tokens);
    out << std::setw(22) << std::setprecision(2) << 100.00 << "\n";
    return out.str();
}

inline std::string render_ablation_table(const corpus::SourceManifest& manifest) {
    std::ostringstream out;
    for (auto mode : {corpus::AblationMode::MED, corpus::AblationMode::PUB}) {
        out << corpus::to_string(mode) << " (";
        out << (mode == corpus::AblationMode::MED ? "proprietary medical sources only"
                                                  : "non-medical public sources only");
        out << "):\n";
        try {
            auto derived = corpus::derive_ablation_manifest(manifest, mode);
            for (const auto& s : derived.sources) {
                out << "  " << std::left << std::setw(20) << s.name << " tokens=" << s.token_count
                    << " weight=" << std::fixed << std::setprecision(4) << s.weight << "\n";
            }
            out << "  total_tokens=" << derived.total_tokens << "\n";
        } catch (const Error& e) {
            out << "  (not derivable: " << e.what() << ")\n";
        }
    }
    return out.str();
}

}  // namespace detail

inline void run_report(const StageContext& ctx, std::ostream& console) {
    const fs::path dir = ctx.stage_dir("report");
    fs::create_directories(dir);
    std::ostringstream report;

    // Source mix.
    fs::path ingested = ctx.stage_dir("ingest") / "manifest.json";
    auto manifest = corpus::load_manifest(
        fs::exists(ingested) ? ingested.string() : ctx.cfg.manifest_path);
    report << "== Pretraining source mix ==\n";
    if (manifest.total_tokens > 0) {
        report << detail::render_manifest_table(manifest) << "\n";
    } else {
        report << "(token counts not available yet; run ingest first)\n\n";
    }
    report << "== Ablation manifests ==\n" << detail::render_ablation_table(manifest) << "\n";

    // Entity-level note scores.
    if (!ctx.cfg.eval.rubrics_file.empty() && !ctx.cfg.eval.judgments_file.empty()) {
        auto rubrics = eval::read_rubrics_jsonl(ctx.cfg.eval.rubrics_file);
        auto judgments = eval::read_judgments_jsonl(ctx.cfg.eval.judgments_file);
        std::map<std::string, std::vector<eval::EntityJudgment>> by_model;
        for (auto& j : judgments) {
            by_model[j.model].push_back(std::move(j));
        }
        std::vector<eval::NoteEvalReport> reports;
        for (const auto& [model, group] : by_model) {
            reports.push_back(eval::aggregate_entity_report(group, rubrics));
        }
        report << "== Average entity errors ==\n" << eval::render_entity_table(reports) << "\n";
    }

    // Validation perplexity series (plot-ready CSV).
    fs::path vlog = ctx.stage_dir("train") / "validation_log.jsonl";
    if (fs::exists(vlog)) {
        std::map<std::uint64_t, std::map<std::string, double>> by_step;
        std::set<std::string> subsets;
        std::ifstream in(vlog);
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            auto j = nlohmann::json::parse(line);
            by_step[j.at("step").get<std::uint64_t>()][j.at("subset").get<std::string>()] =
                j.at("ppl").get<double>();
            subsets.insert(j.at("subset").get<std::string>());
        }
        std::ofstream csv(dir / "validation_series.csv");
        csv << "step";
        for (const auto& s : subsets) csv << "," << s;
        csv << "\n";
        for (const auto& [step, ppls] : by_step) {
            csv << step;
            for (const auto& s : subsets) {
                csv << ",";
                auto it = ppls.find(s);
                if (it != ppls.end()) csv << it->second;
            }
            csv << "\n";
        }
        report << "== Validation perplexity ==\nseries written to "
               << (dir / "validation_series.csv").string() << "\n";
        for (const auto& s : subsets) {
            auto first = by_step.begin()->second.find(s);
            auto last = by_step.rbegin()->second.find(s);
            if (first != by_step.begin()->second.end() && last != by_step.rbegin()->second.end()) {
                report << "  " << s << ": ppl " << first->second << " (step "
                       << by_step.begin()->first << ") -> " << last->second << " (step "
                       << by_step.rbegin()->first << ")\n";
            }
        }
        report << "\n";
    }

    // Few-shot suite scores.
    fs::path eval_summary = ctx.stage_dir("eval") / "summary.txt";
    if (fs::exists(eval_summary)) {
        std::ifstream in(eval_summary);
        report << "== Few-shot suite scores ==\n" << in.rdbuf() << "\n";
    }

    std::ofstream out(dir / "report.txt");
    out << report.str();
    console << report.str();
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

inline void write_effective_config(const StageContext& ctx) {
    fs::create_directories(ctx.out());
    std::ofstream out(ctx.out() / "effective_config.json");
    out << ctx.cfg.effective.dump(2) << "\n";
}

/// Run one stage if its stamp is stale (or force is set). Returns true when
/// the stage actually ran.
template <typename Stage>
bool run_if_stale(const StageContext& ctx, const std::string& name, const std::string& hash,
                  std::ostream& console, Stage&& stage) {
    if (!ctx.force && detail::stamp_matches(ctx.stage_dir(name), hash)) {
        console << "[skip] " << name << " (up to date)\n";
        return false;
    }
    console << "[run ] " << name << "\n";
    stage();
    return true;
}

inline void run_all(const StageContext& ctx, std::ostream& console) {
    write_effective_config(ctx);
    run_if_stale(ctx, "ingest", ingest_hash(ctx), console, [&] { run_ingest(ctx); });
    run_if_stale(ctx, "dedup", dedup_hash(ctx), console, [&] { run_dedup(ctx); });
    run_if_stale(ctx, "pack", pack_hash(ctx), console, [&] { run_pack(ctx); });
    run_if_stale(ctx, "train", train_hash(ctx), console, [&] { run_train(ctx); });
    run_if_stale(ctx, "eval", eval_hash(ctx), console, [&] { run_eval(ctx); });
    console << "[run ] report\n";
    run_report(ctx, console);
}

}  // namespace grist::pipeline
