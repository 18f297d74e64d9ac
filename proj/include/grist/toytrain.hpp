#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "grist/error.hpp"
#include "grist/packing.hpp"
#include "grist/rng.hpp"
#include "grist/rope.hpp"
#include "grist/schedule.hpp"

namespace grist::toytrain {

/// Desk-scale reference model: token embedding, one causal single-head
/// attention block with rotary positions and a residual connection, and an
/// output projection. No MLP, no layer norm; everything in 64-bit floats so
/// checkpoint/resume is bit-exact.
struct ToyLMConfig {
    std::int32_t vocab_size = corpus::TokenizerSpec::vocab_size;
    std::size_t d_model = 32;
    std::size_t max_len = 64;
    rope::RopeParams rope = rope::make_rope_params(32, 10000.0, 64, 64);
    double weight_decay = 0.1;
    std::size_t batch_size = 256;
    double init_std = 0.08;
};

inline void validate(const ToyLMConfig& cfg) {
    require(cfg.d_model > 0 && cfg.d_model % 2 == 0, "toy config: d_model must be even and positive");
    require(cfg.vocab_size >= corpus::TokenizerSpec::num_specials + 1, "toy config: vocab too small");
    rope::validate(cfg.rope);
    require(cfg.rope.head_dim == cfg.d_model, "toy config: rope head_dim must equal d_model");
    require(cfg.max_len >= 2 && cfg.max_len <= cfg.rope.target_len,
            "toy config: max_len must be in [2, rope.target_len]");
}

struct ModelParams {
    std::size_t vocab = 0;
    std::size_t d = 0;
    std::vector<double> embed;     // vocab x d
    std::vector<double> wq;        // d x d, q = Wq x
    std::vector<double> wk;        // d x d
    std::vector<double> wv;        // d x d
    std::vector<double> wo;        // d x d
    std::vector<double> out_proj;  // d x vocab

    bool operator==(const ModelParams&) const = default;
};

template <typename Params, typename Fn>
void for_each_array(Params& p, Fn&& fn) {
    fn("embed", p.embed);
    fn("wq", p.wq);
    fn("wk", p.wk);
    fn("wv", p.wv);
    fn("wo", p.wo);
    fn("out_proj", p.out_proj);
}

inline ModelParams zero_params(const ToyLMConfig& cfg) {
    validate(cfg);
    ModelParams p;
    p.vocab = static_cast<std::size_t>(cfg.vocab_size);
    p.d = cfg.d_model;
    p.embed.assign(p.vocab * p.d, 0.0);
    p.wq.assign(p.d * p.d, 0.0);
    p.wk.assign(p.d * p.d, 0.0);
    p.wv.assign(p.d * p.d, 0.0);
    p.wo.assign(p.d * p.d, 0.0);
    p.out_proj.assign(p.d * p.vocab, 0.0);
    return p;
}

/// Gaussian init, one named stream per array so the layout of draws is
/// stable under refactoring.
inline ModelParams init_params(const ToyLMConfig& cfg, std::uint64_t master_seed) {
    ModelParams p = zero_params(cfg);
    for_each_array(p, [&](const char* name, std::vector<double>& values) {
        auto stream = rng::stream_for(master_seed, std::string("init/") + name);
        for (auto& v : values) {
            v = cfg.init_std * stream.next_gauss();
        }
    });
    return p;
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

struct ForwardCache {
    const ModelParams* params = nullptr;
    rope::RopeParams rope;
    std::size_t len = 0;
    std::size_t n_targets = 0;
    std::vector<std::int32_t> tokens;
    std::vector<std::int32_t> targets;
    std::vector<std::uint8_t> target_mask;
    std::vector<double> x;       // len x d, embeddings
    std::vector<double> q_rot;   // len x d
    std::vector<double> k_rot;   // len x d
    std::vector<double> v;       // len x d
    std::vector<double> attn;    // len x len, rows softmaxed over j <= t
    std::vector<double> o;       // len x d, attention output
    std::vector<double> y;       // len x d, residual + projected attention
    std::vector<double> probs;   // len x vocab, filled only at predicting rows
    std::vector<std::uint8_t> predicts;  // len, 1 where row t-1 feeds a loss term
};

namespace detail {

inline void matvec(std::span<const double> w, std::span<const double> x, std::span<double> out,
                   std::size_t d) {
    for (std::size_t r = 0; r < d; ++r) {
        double acc = 0.0;
        const double* row = w.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
}

/// y += W^T g (gradient of y = W x with respect to x).
inline void matvec_transposed_accum(std::span<const double> w, std::span<const double> g,
                                    std::span<double> out, std::size_t d) {
    for (std::size_t r = 0; r < d; ++r) {
        const double gr = g[r];
        const double* row = w.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) {
            out[c] += row[c] * gr;
        }
    }
}

inline void rotate(std::span<double> vec, const std::vector<double>& angles, bool inverse) {
    for (std::size_t i = 0; i < angles.size(); ++i) {
        const double c = std::cos(angles[i]);
        const double s = inverse ? -std::sin(angles[i]) : std::sin(angles[i]);
        const double a = vec[2 * i];
        const double b = vec[2 * i + 1];
        vec[2 * i] = a * c - b * s;
        vec[2 * i + 1] = a * s + b * c;
    }
}

}  // namespace detail

/// Causal attention forward with explicit targets. Loss = mean cross-entropy
/// over positions t >= 1 with target_mask[t] = 1, where logits at t-1 predict
/// targets[t]. Masked positions feed the forward pass but contribute no loss.
inline std::pair<double, ForwardCache> forward_loss(const ModelParams& params,
                                                    std::span<const std::int32_t> tokens,
                                                    std::span<const std::int32_t> targets,
                                                    std::span<const std::uint8_t> target_mask,
                                                    const ToyLMConfig& cfg) {
    validate(cfg);
    const std::size_t len = tokens.size();
    const std::size_t d = params.d;
    const std::size_t vocab = params.vocab;
    require(len >= 1 && len <= cfg.max_len, "forward_loss: sequence length ", len,
            " outside [1, max_len=", cfg.max_len, "]");
    require(targets.size() == len && target_mask.size() == len,
            "forward_loss: targets/mask length mismatch");
    require(params.d == cfg.d_model && params.vocab == static_cast<std::size_t>(cfg.vocab_size),
            "forward_loss: params do not match config");
    for (std::size_t t = 0; t < len; ++t) {
        require(tokens[t] >= 0 && tokens[t] < cfg.vocab_size, "forward_loss: token id out of range");
    }

    ForwardCache cache;
    cache.params = &params;
    cache.rope = cfg.rope;
    cache.len = len;
    cache.tokens.assign(tokens.begin(), tokens.end());
    cache.targets.assign(targets.begin(), targets.end());
    cache.target_mask.assign(target_mask.begin(), target_mask.end());
    cache.predicts.assign(len, 0);

    std::size_t n_targets = 0;
    for (std::size_t t = 1; t < len; ++t) {
        if (target_mask[t]) {
            require(targets[t] >= 0 && targets[t] < cfg.vocab_size,
                    "forward_loss: target id out of range");
            cache.predicts[t - 1] = 1;
            ++n_targets;
        }
    }
    require(n_targets > 0, "forward_loss: example has no unmasked target positions");
    cache.n_targets = n_targets;

    cache.x.resize(len * d);
    cache.q_rot.resize(len * d);
    cache.k_rot.resize(len * d);
    cache.v.resize(len * d);
    cache.attn.assign(len * len, 0.0);
    cache.o.assign(len * d, 0.0);
    cache.y.resize(len * d);
    cache.probs.assign(len * vocab, 0.0);

    // Embed, project, rotate.
    for (std::size_t t = 0; t < len; ++t) {
        std::span<double> x_t(cache.x.data() + t * d, d);
        const double* row = params.embed.data() + static_cast<std::size_t>(tokens[t]) * d;
        std::copy(row, row + d, x_t.begin());
        std::span<double> q_t(cache.q_rot.data() + t * d, d);
        std::span<double> k_t(cache.k_rot.data() + t * d, d);
        std::span<double> v_t(cache.v.data() + t * d, d);
        detail::matvec(params.wq, x_t, q_t, d);
        detail::matvec(params.wk, x_t, k_t, d);
        detail::matvec(params.wv, x_t, v_t, d);
        auto angles = rope::rope_angles(static_cast<double>(t), cfg.rope);
        detail::rotate(q_t, angles, false);
        detail::rotate(k_t, angles, false);
    }

    // Causal softmax attention.
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> scores(len);
    for (std::size_t t = 0; t < len; ++t) {
        const double* q_t = cache.q_rot.data() + t * d;
        double max_score = -1e300;
        for (std::size_t j = 0; j <= t; ++j) {
            const double* k_j = cache.k_rot.data() + j * d;
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                s += q_t[c] * k_j[c];
            }
            scores[j] = s * inv_sqrt_d;
            max_score = std::max(max_score, scores[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
            scores[j] = std::exp(scores[j] - max_score);
            denom += scores[j];
        }
        double* a_t = cache.attn.data() + t * len;
        double* o_t = cache.o.data() + t * d;
        for (std::size_t j = 0; j <= t; ++j) {
            a_t[j] = scores[j] / denom;
            const double* v_j = cache.v.data() + j * d;
            for (std::size_t c = 0; c < d; ++c) {
                o_t[c] += a_t[j] * v_j[c];
            }
        }
    }

    // Residual + output projection, cross-entropy at predicting rows.
    double loss_sum = 0.0;
    std::vector<double> logits(vocab);
    for (std::size_t t = 0; t < len; ++t) {
        std::span<double> y_t(cache.y.data() + t * d, d);
        detail::matvec(params.wo, std::span<const double>(cache.o.data() + t * d, d), y_t, d);
        for (std::size_t c = 0; c < d; ++c) {
            y_t[c] += cache.x[t * d + c];
        }
        if (!cache.predicts[t]) {
            continue;
        }
        double max_logit = -1e300;
        for (std::size_t w = 0; w < vocab; ++w) {
            double acc = 0.0;
            for (std::size_t r = 0; r < d; ++r) {
                acc += params.out_proj[r * vocab + w] * y_t[r];
            }
            logits[w] = acc;
            max_logit = std::max(max_logit, acc);
        }
        double denom = 0.0;
        for (std::size_t w = 0; w < vocab; ++w) {
            denom += std::exp(logits[w] - max_logit);
        }
        const double lse = max_logit + std::log(denom);
        double* p_t = cache.probs.data() + t * vocab;
        for (std::size_t w = 0; w < vocab; ++w) {
            p_t[w] = std::exp(logits[w] - lse);
        }
        loss_sum += lse - logits[static_cast<std::size_t>(cache.targets[t + 1])];
    }
    return {loss_sum / static_cast<double>(n_targets), std::move(cache)};
}

/// PackedExample entry point: targets are the example tokens themselves,
/// masked by the packing loss mask.
inline std::pair<double, ForwardCache> forward_loss(const ModelParams& params,
                                                    const packing::PackedExample& ex,
                                                    const ToyLMConfig& cfg) {
    return forward_loss(params, ex.tokens, ex.tokens, ex.loss_mask, cfg);
}

/// Full logits matrix (len x vocab) without loss bookkeeping; used by tests
/// (causality) and greedy decoding.
inline std::vector<double> forward_logits(const ModelParams& params,
                                          std::span<const std::int32_t> tokens,
                                          const ToyLMConfig& cfg) {
    std::vector<std::int32_t> targets(tokens.size(), corpus::TokenizerSpec::pad);
    std::vector<std::uint8_t> mask(tokens.size(), 0);
    if (tokens.size() >= 2) {
        mask.back() = 1;  // ensure at least one loss row; probs are discarded
        targets.back() = 0;
    }
    require(tokens.size() >= 2, "forward_logits: need at least 2 tokens");
    auto [loss, cache] = forward_loss(params, tokens, targets, mask, cfg);
    (void)loss;
    const std::size_t d = params.d;
    const std::size_t vocab = params.vocab;
    std::vector<double> logits(tokens.size() * vocab, 0.0);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        for (std::size_t w = 0; w < vocab; ++w) {
            double acc = 0.0;
            for (std::size_t r = 0; r < d; ++r) {
                acc += params.out_proj[r * vocab + w] * cache.y[t * d + r];
            }
            logits[t * vocab + w] = acc;
        }
    }
    return logits;
}

// ---------------------------------------------------------------------------
// Backward pass: exact analytic gradients of forward_loss.
// ---------------------------------------------------------------------------

inline ModelParams backward(const ModelParams& params, const ForwardCache& cache) {
    require(cache.params == &params, "backward: cache was produced from different params");
    const std::size_t len = cache.len;
    const std::size_t d = params.d;
    const std::size_t vocab = params.vocab;

    ModelParams grads;
    grads.vocab = vocab;
    grads.d = d;
    grads.embed.assign(vocab * d, 0.0);
    grads.wq.assign(d * d, 0.0);
    grads.wk.assign(d * d, 0.0);
    grads.wv.assign(d * d, 0.0);
    grads.wo.assign(d * d, 0.0);
    grads.out_proj.assign(d * vocab, 0.0);

    const double inv_m = 1.0 / static_cast<double>(cache.n_targets);
    std::vector<double> dy(len * d, 0.0);

    // Cross-entropy and output projection.
    std::vector<double> dlogit(vocab);
    for (std::size_t t = 0; t < len; ++t) {
        if (!cache.predicts[t]) continue;
        const double* p_t = cache.probs.data() + t * vocab;
        const auto target = static_cast<std::size_t>(cache.targets[t + 1]);
        for (std::size_t w = 0; w < vocab; ++w) {
            dlogit[w] = p_t[w] * inv_m;
        }
        dlogit[target] -= inv_m;
        const double* y_t = cache.y.data() + t * d;
        double* dy_t = dy.data() + t * d;
        for (std::size_t r = 0; r < d; ++r) {
            double acc = 0.0;
            double* gp_row = grads.out_proj.data() + r * vocab;
            const double* pp_row = params.out_proj.data() + r * vocab;
            for (std::size_t w = 0; w < vocab; ++w) {
                gp_row[w] += y_t[r] * dlogit[w];
                acc += pp_row[w] * dlogit[w];
            }
            dy_t[r] += acc;
        }
    }

    // Residual and Wo.
    std::vector<double> dx(len * d, 0.0);
    std::vector<double> do_(len * d, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
        const double* dy_t = dy.data() + t * d;
        const double* o_t = cache.o.data() + t * d;
        double* dx_t = dx.data() + t * d;
        double* do_t = do_.data() + t * d;
        for (std::size_t r = 0; r < d; ++r) {
            dx_t[r] += dy_t[r];
            const double g = dy_t[r];
            double* gwo_row = grads.wo.data() + r * d;
            const double* wo_row = params.wo.data() + r * d;
            for (std::size_t c = 0; c < d; ++c) {
                gwo_row[c] += g * o_t[c];
                do_t[c] += wo_row[c] * g;
            }
        }
    }

    // Attention: softmax rows, scores, rotated projections.
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> dq_rot(len * d, 0.0);
    std::vector<double> dk_rot(len * d, 0.0);
    std::vector<double> dv(len * d, 0.0);
    std::vector<double> da(len);
    for (std::size_t t = 0; t < len; ++t) {
        const double* a_t = cache.attn.data() + t * len;
        const double* do_t = do_.data() + t * d;
        double dot_aa = 0.0;
        for (std::size_t j = 0; j <= t; ++j) {
            const double* v_j = cache.v.data() + j * d;
            double g = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                g += do_t[c] * v_j[c];
            }
            da[j] = g;
            dot_aa += a_t[j] * g;
            double* dv_j = dv.data() + j * d;
            for (std::size_t c = 0; c < d; ++c) {
                dv_j[c] += a_t[j] * do_t[c];
            }
        }
        const double* q_t = cache.q_rot.data() + t * d;
        double* dq_t = dq_rot.data() + t * d;
        for (std::size_t j = 0; j <= t; ++j) {
            const double ds = a_t[j] * (da[j] - dot_aa) * inv_sqrt_d;
            const double* k_j = cache.k_rot.data() + j * d;
            double* dk_j = dk_rot.data() + j * d;
            for (std::size_t c = 0; c < d; ++c) {
                dq_t[c] += ds * k_j[c];
                dk_j[c] += ds * q_t[c];
            }
        }
    }

    // Un-rotate, projections, embedding.
    for (std::size_t t = 0; t < len; ++t) {
        auto angles = rope::rope_angles(static_cast<double>(t), cache.rope);
        std::span<double> dq_t(dq_rot.data() + t * d, d);
        std::span<double> dk_t(dk_rot.data() + t * d, d);
        detail::rotate(dq_t, angles, true);
        detail::rotate(dk_t, angles, true);
        const double* x_t = cache.x.data() + t * d;
        double* dx_t = dx.data() + t * d;
        const double* dv_t = dv.data() + t * d;
        for (std::size_t r = 0; r < d; ++r) {
            double* gq_row = grads.wq.data() + r * d;
            double* gk_row = grads.wk.data() + r * d;
            double* gv_row = grads.wv.data() + r * d;
            for (std::size_t c = 0; c < d; ++c) {
                gq_row[c] += dq_t[r] * x_t[c];
                gk_row[c] += dk_t[r] * x_t[c];
                gv_row[c] += dv_t[r] * x_t[c];
            }
        }
        detail::matvec_transposed_accum(params.wq, dq_t, std::span<double>(dx_t, d), d);
        detail::matvec_transposed_accum(params.wk, dk_t, std::span<double>(dx_t, d), d);
        detail::matvec_transposed_accum(params.wv, std::span<const double>(dv_t, d),
                                        std::span<double>(dx_t, d), d);
        double* ge_row = grads.embed.data() + static_cast<std::size_t>(cache.tokens[t]) * d;
        for (std::size_t c = 0; c < d; ++c) {
            ge_row[c] += dx_t[c];
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Optimizer: adaptive moments with decoupled weight decay.
// ---------------------------------------------------------------------------

struct OptimizerState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.1;
    std::uint64_t step_count = 0;
    ModelParams m;
    ModelParams v;
};

inline OptimizerState make_optimizer(const ToyLMConfig& cfg) {
    OptimizerState opt;
    opt.weight_decay = cfg.weight_decay;
    opt.m = zero_params(cfg);
    opt.v = zero_params(cfg);
    return opt;
}

/// One update. The decay term is decoupled from the gradient step: with zero
/// gradients each parameter shrinks by exactly lr * weight_decay * theta.
inline void adamw_step(ModelParams& params, const ModelParams& grads, OptimizerState& opt,
                       double lr) {
    require(params.d == grads.d && params.vocab == grads.vocab,
            "adamw_step: gradient shape mismatch");
    ++opt.step_count;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step_count));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step_count));
    auto update = [&](std::vector<double>& theta, const std::vector<double>& g,
                      std::vector<double>& m, std::vector<double>& v) {
        require(theta.size() == g.size() && theta.size() == m.size() && theta.size() == v.size(),
                "adamw_step: array size mismatch");
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            const double m_hat = m[i] / bc1;
            const double v_hat = v[i] / bc2;
            theta[i] -= lr * m_hat / (std::sqrt(v_hat) + opt.eps);
            theta[i] -= lr * opt.weight_decay * theta[i];
        }
    };
    update(params.embed, grads.embed, opt.m.embed, opt.v.embed);
    update(params.wq, grads.wq, opt.m.wq, opt.v.wq);
    update(params.wk, grads.wk, opt.m.wk, opt.v.wk);
    update(params.wv, grads.wv, opt.m.wv, opt.v.wv);
    update(params.wo, grads.wo, opt.m.wo, opt.v.wo);
    update(params.out_proj, grads.out_proj, opt.m.out_proj, opt.v.out_proj);
}

// ---------------------------------------------------------------------------
// Validation perplexity
// ---------------------------------------------------------------------------

using SubsetExamples = std::map<std::string, std::vector<packing::PackedExample>>;

/// True when the example can produce at least one loss term.
inline bool trainable(const packing::PackedExample& ex) {
    for (std::size_t t = 1; t < ex.tokens.size(); ++t) {
        if (ex.loss_mask[t]) return true;
    }
    return false;
}

/// Per-subset perplexity: exp of the mean masked cross-entropy over every
/// unmasked target position in the subset.
inline std::map<std::string, double> eval_perplexity(const ModelParams& params,
                                                     const SubsetExamples& validation,
                                                     const ToyLMConfig& cfg) {
    std::map<std::string, double> out;
    for (const auto& [subset, examples] : validation) {
        require(!examples.empty(), "eval_perplexity: validation subset \"", subset, "\" is empty");
        double ce_sum = 0.0;
        std::size_t n = 0;
        for (const auto& ex : examples) {
            auto [loss, cache] = forward_loss(params, ex, cfg);
            ce_sum += loss * static_cast<double>(cache.n_targets);
            n += cache.n_targets;
        }
        require(n > 0, "eval_perplexity: subset \"", subset, "\" has no target positions");
        out[subset] = std::exp(ce_sum / static_cast<double>(n));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
    schedule::LRScheduleParams lr;
    schedule::PlateauPolicy plateau;
    std::vector<std::uint64_t> phase_boundaries;
    std::size_t batch_size = 8;
};

struct StepLog {
    std::uint64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::map<std::string, std::size_t> draw_counts;

    bool operator==(const StepLog&) const = default;
};

using TrainLog = std::vector<StepLog>;

inline void accumulate(ModelParams& into, const ModelParams& grads) {
    auto add = [](std::vector<double>& dst, const std::vector<double>& src) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    };
    add(into.embed, grads.embed);
    add(into.wq, grads.wq);
    add(into.wk, grads.wk);
    add(into.wv, grads.wv);
    add(into.wo, grads.wo);
    add(into.out_proj, grads.out_proj);
}

/// Run `steps_to_run` steps starting at state.step. Per step: sample a batch,
/// sum gradients over it, and apply one optimizer update at lr_at(step).
/// Validation runs at step 0, at each phase boundary (where plateaued subsets
/// get their sampling rate decayed), and at total_steps. The whole procedure
/// is a pure function of (state, params, opt, data), so a checkpointed and
/// resumed run reproduces an uninterrupted one bit-for-bit.
inline TrainLog train_run(ModelParams& params, OptimizerState& opt, schedule::RunState& state,
                          const SubsetExamples& train, const SubsetExamples& validation,
                          const ToyLMConfig& cfg, const TrainOptions& options,
                          std::uint64_t steps_to_run) {
    validate(cfg);
    validate(options.lr);
    validate(options.plateau);
    for (auto b : options.phase_boundaries) {
        require(b < options.lr.total_steps, "train_run: phase boundary ", b,
                " must be before total_steps");
    }
    require(state.step + steps_to_run <= options.lr.total_steps, "train_run: run would exceed total_steps");
    std::map<std::string, std::size_t> sizes;
    for (const auto& [subset, examples] : train) {
        for (const auto& ex : examples) {
            require(trainable(ex), "train_run: subset \"", subset,
                    "\" contains an example with no target positions");
        }
        sizes[subset] = examples.size();
    }

    auto evaluate = [&](std::uint64_t at_step) {
        auto ppls = eval_perplexity(params, validation, cfg);
        for (const auto& [subset, ppl] : ppls) {
            schedule::append_point(state.series, subset, at_step, ppl);
        }
    };

    TrainLog log;
    const std::uint64_t end_step = state.step + steps_to_run;
    for (std::uint64_t s = state.step; s < end_step; ++s) {
        if (s == 0 && state.series.empty()) {
            evaluate(0);
        }
        bool is_boundary = false;
        for (auto b : options.phase_boundaries) {
            if (b == s && s > 0) is_boundary = true;
        }
        if (is_boundary) {
            evaluate(s);
            std::set<std::string> plateaued;
            for (const auto& [subset, points] : state.series) {
                if (schedule::detect_plateau(points, options.plateau)) {
                    plateaued.insert(subset);
                }
            }
            state.weights = schedule::next_phase_weights(state.weights, plateaued, options.plateau);
            ++state.phase_index;
        }

        const double lr = schedule::lr_at(s, options.lr);
        auto draws = schedule::sample_batch(state, sizes, options.batch_size);

        ModelParams grads = zero_params(cfg);
        double loss_sum = 0.0;
        StepLog entry;
        entry.step = s;
        entry.lr = lr;
        for (const auto& draw : draws) {
            const auto& ex = train.at(draw.subset)[draw.index];
            auto [loss, cache] = forward_loss(params, ex, cfg);
            auto g = backward(params, cache);
            accumulate(grads, g);
            loss_sum += loss;
            ++entry.draw_counts[draw.subset];
        }
        entry.loss = loss_sum / static_cast<double>(draws.size());
        adamw_step(params, grads, opt, lr);
        log.push_back(std::move(entry));
        state.step = s + 1;
    }
    if (state.step == options.lr.total_steps) {
        evaluate(state.step);
    }
    return log;
}

// ---------------------------------------------------------------------------
// Checkpointing: model parameters and optimizer moments ride in the schedule
// module's checkpoint container.
// ---------------------------------------------------------------------------

inline schedule::ArrayMap to_arrays(const ModelParams& params, const OptimizerState& opt) {
    schedule::ArrayMap arrays;
    for_each_array(params, [&](const char* name, const std::vector<double>& a) {
        arrays[std::string("param/") + name] = a;
    });
    for_each_array(opt.m, [&](const char* name, const std::vector<double>& a) {
        arrays[std::string("adam_m/") + name] = a;
    });
    for_each_array(opt.v, [&](const char* name, const std::vector<double>& a) {
        arrays[std::string("adam_v/") + name] = a;
    });
    arrays["opt/meta"] = {opt.beta1, opt.beta2, opt.eps, opt.weight_decay,
                          static_cast<double>(opt.step_count)};
    return arrays;
}

inline void from_arrays(const schedule::ArrayMap& arrays, ModelParams& params, OptimizerState& opt) {
    auto fetch = [&](const std::string& name) -> const std::vector<double>& {
        auto it = arrays.find(name);
        require(it != arrays.end(), "checkpoint: missing array \"", name, "\"");
        return it->second;
    };
    for_each_array(params, [&](const char* name, std::vector<double>& a) {
        a = fetch(std::string("param/") + name);
    });
    for_each_array(opt.m, [&](const char* name, std::vector<double>& a) {
        a = fetch(std::string("adam_m/") + name);
    });
    for_each_array(opt.v, [&](const char* name, std::vector<double>& a) {
        a = fetch(std::string("adam_v/") + name);
    });
    const auto& meta = fetch("opt/meta");
    require(meta.size() == 5, "checkpoint: malformed opt/meta");
    opt.beta1 = meta[0];
    opt.beta2 = meta[1];
    opt.eps = meta[2];
    opt.weight_decay = meta[3];
    opt.step_count = static_cast<std::uint64_t>(meta[4]);
}

inline void save_training_checkpoint(const schedule::RunState& state, const ModelParams& params,
                                     const OptimizerState& opt, const std::string& path) {
    schedule::checkpoint_save(state, to_arrays(params, opt), path);
}

inline void load_training_checkpoint(const std::string& path, schedule::RunState& state,
                                     ModelParams& params, OptimizerState& opt) {
    auto [loaded_state, arrays] = schedule::checkpoint_load(path);
    state = std::move(loaded_state);
    from_arrays(arrays, params, opt);
    params.d = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(params.wq.size()))));
    require(params.d * params.d == params.wq.size(), "checkpoint: wq is not square");
    require(params.d > 0 && params.embed.size() % params.d == 0, "checkpoint: malformed embed");
    params.vocab = params.embed.size() / params.d;
    opt.m.d = opt.v.d = params.d;
    opt.m.vocab = opt.v.vocab = params.vocab;
}

}  // namespace grist::toytrain
