#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "grist/error.hpp"
#include "grist/eval.hpp"

namespace grist::harness {

inline constexpr const char* kCompletionPath = "/v1/completions";
inline constexpr const char* kPromptIdHeader = "X-Prompt-Id";

/// Completion endpoint configuration. The API key comes from the environment
/// (MODEL_API_KEY); temperature defaults to 0 for reproducible evaluation.
struct EndpointConfig {
    std::string base_url;
    std::string api_key;
    double timeout_seconds = 30.0;
    std::size_t max_retries = 3;
    std::size_t max_tokens = 256;
    double temperature = 0.0;
    std::size_t backoff_ms = 50;
    std::size_t concurrency = 4;
};

inline void validate(const EndpointConfig& cfg) {
    require(!cfg.base_url.empty(), "endpoint: base_url is empty");
    require(cfg.timeout_seconds > 0.0, "endpoint: timeout must be positive");
    require(cfg.temperature >= 0.0, "endpoint: temperature must be >= 0");
}

namespace detail {

inline bool transient_status(int status) {
    return status == 429 || status >= 500;
}

}  // namespace detail

/// POST one completion request. Body: {"prompt", "max_tokens", "temperature"};
/// the first completion text of {"choices": [{"text": ...}]} comes back.
/// Transient failures (connect errors, 429, 5xx) are retried with exponential
/// backoff up to max_retries.
inline std::string complete(const EndpointConfig& cfg, const std::string& prompt,
                            const httplib::Headers& extra_headers = {}) {
    validate(cfg);
    nlohmann::json body{{"prompt", prompt},
                        {"max_tokens", cfg.max_tokens},
                        {"temperature", cfg.temperature}};
    const std::string payload = body.dump();

    httplib::Client client(cfg.base_url);
    const auto timeout_us =
        std::chrono::microseconds(static_cast<std::int64_t>(cfg.timeout_seconds * 1e6));
    client.set_connection_timeout(timeout_us);
    client.set_read_timeout(timeout_us);
    client.set_write_timeout(timeout_us);

    httplib::Headers headers = extra_headers;
    if (!cfg.api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + cfg.api_key);
    }

    int last_status = 0;
    httplib::Error last_error = httplib::Error::Success;
    for (std::size_t attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        if (attempt > 0 && cfg.backoff_ms > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(cfg.backoff_ms << (attempt - 1)));
        }
        auto res = client.Post(kCompletionPath, headers, payload, "application/json");
        if (!res) {
            last_error = res.error();
            last_status = 0;
            continue;  // transport failure: retry
        }
        last_status = res->status;
        if (res->status < 200 || res->status >= 300) {
            if (detail::transient_status(res->status)) {
                continue;
            }
            fail("endpoint error: status ", res->status);
        }
        nlohmann::json parsed = nlohmann::json::parse(res->body, nullptr, false);
        if (parsed.is_discarded() || !parsed.contains("choices") || !parsed["choices"].is_array() ||
            parsed["choices"].empty() || !parsed["choices"][0].contains("text")) {
            fail("protocol error: response has no completion text");
        }
        return parsed["choices"][0]["text"].get<std::string>();
    }
    if (last_status != 0) {
        fail("endpoint error: status ", last_status, " after ", cfg.max_retries, " retries");
    }
    if (last_error == httplib::Error::ConnectionTimeout || last_error == httplib::Error::Read ||
        last_error == httplib::Error::Write) {
        fail("timeout error: no response after ", cfg.max_retries, " retries");
    }
    fail("endpoint error: connection failed after ", cfg.max_retries, " retries");
}

// ---------------------------------------------------------------------------
// Deterministic stub server for tests and offline runs
// ---------------------------------------------------------------------------

enum class StubMode { echo_reference, fixed, fail };

inline StubMode stub_mode_from_string(std::string_view s) {
    if (s == "echo_reference") return StubMode::echo_reference;
    if (s == "fixed" || s.substr(0, 6) == "fixed:") return StubMode::fixed;
    if (s == "fail") return StubMode::fail;
    fail("unknown stub mode \"", s, "\"");
}

/// Serves the completion wire contract on 127.0.0.1. echo_reference returns
/// the reference keyed by the X-Prompt-Id header; fixed returns one canned
/// string; fail always answers 500.
class StubServer {
public:
    explicit StubServer(StubMode mode, std::string fixed_text = "",
                        std::map<std::string, std::string> references = {})
        : mode_(mode), fixed_text_(std::move(fixed_text)), references_(std::move(references)) {
        server_.Post(kCompletionPath, [this](const httplib::Request& req, httplib::Response& res) {
            handle(req, res);
        });
        port_ = server_.bind_to_any_port("127.0.0.1");
        require(port_ > 0, "stub server: cannot bind a local port");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    StubServer(const StubServer&) = delete;
    StubServer& operator=(const StubServer&) = delete;

    ~StubServer() {
        server_.stop();
        if (thread_.joinable()) {
            thread_.join();
        }
    }

    int port() const { return port_; }

    std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }

    void add_reference(const std::string& id, const std::string& reference) {
        references_[id] = reference;
    }

private:
    void handle(const httplib::Request& req, httplib::Response& res) {
        if (mode_ == StubMode::fail) {
            res.status = 500;
            res.set_content(R"({"error":"stub failure"})", "application/json");
            return;
        }
        std::string completion;
        if (mode_ == StubMode::fixed) {
            completion = fixed_text_;
        } else {
            auto id = req.get_header_value(kPromptIdHeader);
            auto it = references_.find(id);
            if (it == references_.end()) {
                res.status = 404;
                res.set_content(R"({"error":"unknown prompt id"})", "application/json");
                return;
            }
            completion = it->second;
        }
        nlohmann::json body{{"choices", nlohmann::json::array({{{"text", completion}}})}};
        res.set_content(body.dump(), "application/json");
    }

    StubMode mode_;
    std::string fixed_text_;
    std::map<std::string, std::string> references_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = 0;
};

// ---------------------------------------------------------------------------
// Task suite runner
// ---------------------------------------------------------------------------

struct ExampleRecord {
    std::string id;
    std::string response;
    double score = 0.0;  // rouge f1 or 1/0 correctness
    bool failed = false;
    std::string error;
};

struct SuiteResult {
    eval::TaskType task_type = eval::TaskType::long_text;
    std::size_t n_examples = 0;
    std::string metric;
    eval::RougeScore rouge;
    double accuracy = 0.0;
    std::size_t failures = 0;
    std::vector<ExampleRecord> records;
};

inline nlohmann::json to_json(const SuiteResult& r) {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& rec : r.records) {
        records.push_back({{"id", rec.id},
                           {"response", rec.response},
                           {"score", rec.score},
                           {"failed", rec.failed},
                           {"error", rec.error}});
    }
    nlohmann::json j{{"task_type", std::string(eval::to_string(r.task_type))},
                     {"n_examples", r.n_examples},
                     {"metric", r.metric},
                     {"failures", r.failures},
                     {"records", records}};
    if (r.metric == "accuracy") {
        j["score"] = r.accuracy;
    } else {
        j["score"] = {{"precision", r.rouge.precision},
                      {"recall", r.rouge.recall},
                      {"f1", r.rouge.f1}};
    }
    return j;
}

/// Run one task suite: build the k-shot prompt, call the endpoint, score the
/// response (rouge_cls for long/medium, choice accuracy for short). Requests
/// go out with bounded concurrency; records stay in task-file order.
/// Per-example failures are recorded, not fatal; only a fully failed suite is.
inline SuiteResult run_task_suite(const EndpointConfig& cfg, std::span<const eval::TaskExample> tasks,
                                  std::span<const eval::TaskExample> exemplars, std::size_t k = 3) {
    require(!tasks.empty(), "run_task_suite: no tasks");
    SuiteResult result;
    result.task_type = tasks.front().task_type;
    for (const auto& t : tasks) {
        require(t.task_type == result.task_type, "run_task_suite: mixed task types in suite");
    }
    result.n_examples = tasks.size();
    result.metric = eval::is_choice_task(result.task_type) ? "accuracy" : "rouge_cls_f1";
    result.records.resize(tasks.size());

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        while (true) {
            std::size_t i = next.fetch_add(1);
            if (i >= tasks.size()) return;
            auto& rec = result.records[i];
            rec.id = tasks[i].id;
            try {
                std::string prompt = eval::build_fewshot_prompt(tasks[i], exemplars, k);
                rec.response = complete(cfg, prompt, {{kPromptIdHeader, tasks[i].id}});
            } catch (const Error& e) {
                rec.failed = true;
                rec.error = e.what();
            }
        }
    };
    std::size_t workers = cfg.concurrency > 0 ? cfg.concurrency : 1;
    if (workers > tasks.size()) workers = tasks.size();
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back(worker);
        }
        for (auto& t : pool) {
            t.join();
        }
    }

    // Scoring is pure; run it sequentially in task order.
    double p_sum = 0.0;
    double r_sum = 0.0;
    double f_sum = 0.0;
    std::vector<bool> correctness;
    std::size_t scored = 0;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        auto& rec = result.records[i];
        if (rec.failed) {
            ++result.failures;
            continue;
        }
        ++scored;
        if (eval::is_choice_task(result.task_type)) {
            auto choice = eval::score_choice(rec.response, tasks[i]);
            rec.score = choice.correct ? 1.0 : 0.0;
            correctness.push_back(choice.correct);
        } else {
            auto rouge = eval::rouge_cls(rec.response, tasks[i].reference);
            rec.score = rouge.f1;
            p_sum += rouge.precision;
            r_sum += rouge.recall;
            f_sum += rouge.f1;
        }
    }
    require(scored > 0, "run_task_suite: every example failed");
    if (eval::is_choice_task(result.task_type)) {
        result.accuracy = eval::aggregate_accuracy(correctness);
    } else {
        result.rouge.precision = p_sum / static_cast<double>(scored);
        result.rouge.recall = r_sum / static_cast<double>(scored);
        result.rouge.f1 = f_sum / static_cast<double>(scored);
    }
    return result;
}

}  // namespace grist::harness
