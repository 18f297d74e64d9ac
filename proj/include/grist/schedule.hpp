#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "grist/error.hpp"
#include "grist/rng.hpp"

namespace grist::schedule {

// ---------------------------------------------------------------------------
// Cosine learning-rate schedule with linear warmup
// ---------------------------------------------------------------------------

struct LRScheduleParams {
    double eta_max = 5e-5;
    double eta_min = 1e-5;
    std::uint64_t warmup_steps = 50;
    std::uint64_t total_steps = 0;
};

inline void validate(const LRScheduleParams& p) {
    require(p.eta_min > 0.0 && p.eta_min <= p.eta_max, "lr schedule: need 0 < eta_min <= eta_max");
    require(p.warmup_steps < p.total_steps, "lr schedule: need warmup_steps < total_steps");
}

/// Linear 0 -> eta_max over warmup, then cosine eta_max -> eta_min.
/// lr(warmup) = eta_max and lr(total) = eta_min exactly.
inline double lr_at(std::uint64_t step, const LRScheduleParams& p) {
    validate(p);
    require(step <= p.total_steps, "lr_at: step ", step, " exceeds total_steps ", p.total_steps);
    if (step < p.warmup_steps) {
        return p.eta_max * static_cast<double>(step) / static_cast<double>(p.warmup_steps);
    }
    const double u = static_cast<double>(step - p.warmup_steps) /
                     static_cast<double>(p.total_steps - p.warmup_steps);
    return p.eta_min + 0.5 * (p.eta_max - p.eta_min) * (1.0 + std::cos(3.14159265358979323846 * u));
}

// ---------------------------------------------------------------------------
// Validation series and plateau detection
// ---------------------------------------------------------------------------

struct SeriesPoint {
    std::uint64_t step = 0;
    double ppl = 0.0;

    bool operator==(const SeriesPoint&) const = default;
};

/// Per-subset validation perplexity history, steps strictly increasing.
using ValidationSeries = std::map<std::string, std::vector<SeriesPoint>>;

inline void append_point(ValidationSeries& series, const std::string& subset, std::uint64_t step,
                         double ppl) {
    require(ppl > 0.0, "validation series: perplexity must be positive");
    auto& points = series[subset];
    require(points.empty() || points.back().step < step, "validation series for \"", subset,
            "\": steps must be strictly increasing");
    points.push_back({step, ppl});
}

struct PlateauPolicy {
    std::size_t window = 3;
    double rel_threshold = 0.01;
    double decay = 0.5;
};

inline void validate(const PlateauPolicy& p) {
    require(p.window >= 2, "plateau policy: window must be >= 2");
    require(p.rel_threshold > 0.0 && p.rel_threshold < 1.0,
            "plateau policy: rel_threshold must be in (0,1)");
    require(p.decay > 0.0 && p.decay < 1.0, "plateau policy: decay must be in (0,1)");
}

/// A series has plateaued when the best perplexity of the trailing window
/// fails to improve on the best seen up to the window's leading point by at
/// least rel_threshold (relative). The window spans the last `window` points;
/// its leading point belongs to the baseline side. Fewer than window+1 points
/// never fire.
inline bool detect_plateau(const std::vector<SeriesPoint>& points, const PlateauPolicy& policy) {
    validate(policy);
    for (const auto& pt : points) {
        require(pt.ppl > 0.0, "detect_plateau: non-positive perplexity");
    }
    if (points.size() < policy.window + 1) {
        return false;
    }
    const std::size_t tail = policy.window - 1;         // points after the window's leading edge
    const std::size_t split = points.size() - tail;     // baseline = points [0, split)
    double best_before = points[0].ppl;
    for (std::size_t i = 1; i < split; ++i) {
        best_before = std::min(best_before, points[i].ppl);
    }
    double best_in = points[split].ppl;
    for (std::size_t i = split + 1; i < points.size(); ++i) {
        best_in = std::min(best_in, points[i].ppl);
    }
    const double improvement = (best_before - best_in) / best_before;
    return improvement < policy.rel_threshold;
}

// ---------------------------------------------------------------------------
// Sampling weights and phase transitions
// ---------------------------------------------------------------------------

/// subset -> sampling probability; always sums to 1.
using SamplingWeights = std::map<std::string, double>;

inline void validate(const SamplingWeights& w) {
    double sum = 0.0;
    for (const auto& [name, weight] : w) {
        require(weight >= 0.0, "sampling weight for \"", name, "\" is negative");
        sum += weight;
    }
    require(std::abs(sum - 1.0) <= 1e-12, "sampling weights sum to ", sum, ", expected 1");
}

inline SamplingWeights normalized(SamplingWeights w) {
    double sum = 0.0;
    for (const auto& [name, weight] : w) {
        require(weight >= 0.0, "sampling weight for \"", name, "\" is negative");
        sum += weight;
    }
    require(sum > 0.0, "sampling weights are all zero");
    for (auto& [name, weight] : w) {
        weight /= sum;
    }
    return w;
}

/// Multiply each plateaued subset's weight by decay, then renormalize.
/// Non-plateaued subsets keep their relative proportions.
inline SamplingWeights next_phase_weights(const SamplingWeights& w,
                                          const std::set<std::string>& plateaued,
                                          const PlateauPolicy& policy) {
    validate(policy);
    validate(w);
    SamplingWeights out = w;
    for (const auto& name : plateaued) {
        auto it = out.find(name);
        require(it != out.end(), "next_phase_weights: unknown subset \"", name, "\"");
        it->second *= policy.decay;
    }
    return normalized(std::move(out));
}

// ---------------------------------------------------------------------------
// Run state and batch sampling
// ---------------------------------------------------------------------------

struct RunState {
    std::uint64_t master_seed = 0;
    std::uint64_t step = 0;
    rng::CounterRng rng;
    SamplingWeights weights;
    std::uint64_t phase_index = 0;
    std::uint64_t batch_size = 256;
    double weight_decay = 0.1;
    ValidationSeries series;

    bool operator==(const RunState&) const = default;
};

struct PhasePlan {
    std::size_t n_subsets = 0;
    std::vector<std::uint64_t> phase_boundaries;
    PlateauPolicy policy;
};

inline void validate(const PhasePlan& plan, std::uint64_t total_steps) {
    validate(plan.policy);
    require(plan.n_subsets > 0, "phase plan: n_subsets must be positive");
    std::uint64_t prev = 0;
    for (std::size_t i = 0; i < plan.phase_boundaries.size(); ++i) {
        auto b = plan.phase_boundaries[i];
        require(b <= total_steps, "phase plan: boundary ", b, " exceeds total_steps ", total_steps);
        require(i == 0 || b > prev, "phase plan: boundaries must be ascending");
        prev = b;
    }
}

struct BatchDraw {
    std::string subset;
    std::size_t index = 0;
};

/// Draw a batch: subset by the current sampling weights, then an example
/// uniformly within the subset. The stream is keyed on (master_seed, step),
/// so the draw sequence is a pure function of (seed, step, weights) and a
/// resumed run replays the original batches exactly.
inline std::vector<BatchDraw> sample_batch(RunState& state,
                                           const std::map<std::string, std::size_t>& subset_sizes,
                                           std::size_t batch) {
    validate(state.weights);
    auto stream = rng::stream_for(state.master_seed, "batch", state.step);
    std::vector<BatchDraw> draws;
    draws.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        double u = stream.next_double();
        double cum = 0.0;
        const std::string* chosen = nullptr;
        const std::string* last_positive = nullptr;
        for (const auto& [name, weight] : state.weights) {
            if (weight > 0.0) last_positive = &name;
            cum += weight;
            if (u < cum) {
                chosen = &name;
                break;
            }
        }
        if (!chosen) {
            // Rounding spill-over (u landed past the accumulated sum).
            require(last_positive != nullptr, "sample_batch: no subset has positive weight");
            chosen = last_positive;
        }
        auto it = subset_sizes.find(*chosen);
        require(it != subset_sizes.end() && it->second > 0, "sample_batch: subset \"", *chosen,
                "\" is empty");
        draws.push_back({*chosen, static_cast<std::size_t>(stream.next_below(it->second))});
    }
    state.rng = stream;
    return draws;
}

// ---------------------------------------------------------------------------
// Checkpoint container: versioned binary file with bit-exact doubles.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'G', 'R', 'I', 'S', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& buf, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    put_u64(buf, bits);
}

inline void put_str(std::string& buf, const std::string& s) {
    put_u32(buf, static_cast<std::uint32_t>(s.size()));
    buf += s;
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    explicit Reader(const std::string& b) : buf(b) {}

    void need(std::size_t n) const {
        require(pos + n <= buf.size(), "checkpoint: truncated file");
    }

    std::uint32_t get_u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
        return v;
    }

    std::uint64_t get_u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
        return v;
    }

    double get_f64() {
        std::uint64_t bits = get_u64();
        double d;
        std::memcpy(&d, &bits, sizeof(d));
        return d;
    }

    std::string get_str() {
        std::uint32_t n = get_u32();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

/// Named double arrays carried alongside the run state (model parameters,
/// optimizer moments). Map order fixes the on-disk order.
using ArrayMap = std::map<std::string, std::vector<double>>;

inline void checkpoint_save(const RunState& state, const ArrayMap& arrays, const std::string& path) {
    std::string buf;
    buf.append(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put_u32(buf, kCheckpointVersion);
    detail::put_u64(buf, state.master_seed);
    detail::put_u64(buf, state.step);
    detail::put_u64(buf, state.rng.key);
    detail::put_u64(buf, state.rng.counter);
    detail::put_u64(buf, state.phase_index);
    detail::put_u64(buf, state.batch_size);
    detail::put_f64(buf, state.weight_decay);
    detail::put_u32(buf, static_cast<std::uint32_t>(state.weights.size()));
    for (const auto& [name, weight] : state.weights) {
        detail::put_str(buf, name);
        detail::put_f64(buf, weight);
    }
    detail::put_u32(buf, static_cast<std::uint32_t>(state.series.size()));
    for (const auto& [subset, points] : state.series) {
        detail::put_str(buf, subset);
        detail::put_u32(buf, static_cast<std::uint32_t>(points.size()));
        for (const auto& pt : points) {
            detail::put_u64(buf, pt.step);
            detail::put_f64(buf, pt.ppl);
        }
    }
    detail::put_u32(buf, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& [name, values] : arrays) {
        detail::put_str(buf, name);
        detail::put_u64(buf, values.size());
        for (double v : values) {
            detail::put_f64(buf, v);
        }
    }
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "cannot write checkpoint \"", path, "\"");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    require(out.good(), "failed writing checkpoint \"", path, "\"");
}

inline std::pair<RunState, ArrayMap> checkpoint_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "cannot open checkpoint \"", path, "\"");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    detail::Reader r(buf);
    r.need(sizeof(kCheckpointMagic));
    require(std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) == 0,
            "checkpoint: bad magic bytes");
    r.pos = sizeof(kCheckpointMagic);
    std::uint32_t version = r.get_u32();
    require(version == kCheckpointVersion, "checkpoint: unsupported version ", version);
    RunState state;
    state.master_seed = r.get_u64();
    state.step = r.get_u64();
    state.rng.key = r.get_u64();
    state.rng.counter = r.get_u64();
    state.phase_index = r.get_u64();
    state.batch_size = r.get_u64();
    state.weight_decay = r.get_f64();
    std::uint32_t n_weights = r.get_u32();
    for (std::uint32_t i = 0; i < n_weights; ++i) {
        std::string name = r.get_str();
        state.weights[name] = r.get_f64();
    }
    std::uint32_t n_series = r.get_u32();
    for (std::uint32_t i = 0; i < n_series; ++i) {
        std::string subset = r.get_str();
        std::uint32_t n_points = r.get_u32();
        auto& points = state.series[subset];
        for (std::uint32_t j = 0; j < n_points; ++j) {
            SeriesPoint pt;
            pt.step = r.get_u64();
            pt.ppl = r.get_f64();
            points.push_back(pt);
        }
    }
    ArrayMap arrays;
    std::uint32_t n_arrays = r.get_u32();
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
        std::string name = r.get_str();
        std::uint64_t len = r.get_u64();
        std::vector<double> values;
        values.reserve(len);
        for (std::uint64_t j = 0; j < len; ++j) {
            values.push_back(r.get_f64());
        }
        arrays[name] = std::move(values);
    }
    return {std::move(state), std::move(arrays)};
}

}  // namespace grist::schedule
