#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "grist/error.hpp"

namespace grist::rope {

/// Rotary embedding configuration. For context extension, positions are
/// multiplied by scale = trained_len / target_len so the extended range maps
/// back into the trained position range.
struct RopeParams {
    std::size_t head_dim = 0;
    double theta_base = 10000.0;
    std::size_t trained_len = 0;
    std::size_t target_len = 0;
    double scale = 1.0;
};

inline RopeParams make_rope_params(std::size_t head_dim, double theta_base,
                                   std::size_t trained_len, std::size_t target_len) {
    require(head_dim > 0 && head_dim % 2 == 0, "rope: head_dim must be even and positive, got ",
            head_dim);
    require(trained_len > 0 && target_len > 0, "rope: lengths must be positive");
    require(trained_len <= target_len, "rope: trained_len (", trained_len,
            ") must not exceed target_len (", target_len, ")");
    RopeParams p;
    p.head_dim = head_dim;
    p.theta_base = theta_base;
    p.trained_len = trained_len;
    p.target_len = target_len;
    p.scale = static_cast<double>(trained_len) / static_cast<double>(target_len);
    return p;
}

inline void validate(const RopeParams& p) {
    require(p.head_dim > 0 && p.head_dim % 2 == 0, "rope: head_dim must be even and positive");
    require(p.scale > 0.0 && p.scale <= 1.0, "rope: scale must be in (0,1]");
    require(p.trained_len > 0 && p.target_len > 0 &&
                p.scale == static_cast<double>(p.trained_len) / static_cast<double>(p.target_len),
            "rope: scale must equal trained_len/target_len");
}

/// angle_i = (position * scale) * theta_base^(-2i/head_dim), i in [0, head_dim/2).
/// Position is real-valued so interpolated (non-integer) positions stay exact.
inline std::vector<double> rope_angles(double position, const RopeParams& p) {
    require(position >= 0.0, "rope_angles: negative position");
    require(position < static_cast<double>(p.target_len), "rope_angles: position ", position,
            " is outside target_len ", p.target_len);
    const std::size_t half = p.head_dim / 2;
    std::vector<double> angles(half);
    const double scaled = position * p.scale;
    for (std::size_t i = 0; i < half; ++i) {
        double freq = std::pow(p.theta_base, -2.0 * static_cast<double>(i) /
                                                 static_cast<double>(p.head_dim));
        angles[i] = scaled * freq;
    }
    return angles;
}

/// Rotate consecutive pairs (v[2i], v[2i+1]) by angle_i. Rotations are
/// isometries, so the L2 norm is preserved.
inline std::vector<double> apply_rope(std::span<const double> v, double position,
                                      const RopeParams& p) {
    require(v.size() == p.head_dim, "apply_rope: vector length ", v.size(), " != head_dim ",
            p.head_dim);
    auto angles = rope_angles(position, p);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < angles.size(); ++i) {
        const double c = std::cos(angles[i]);
        const double s = std::sin(angles[i]);
        const double a = v[2 * i];
        const double b = v[2 * i + 1];
        out[2 * i] = a * c - b * s;
        out[2 * i + 1] = a * s + b * c;
    }
    return out;
}

/// dot(apply_rope(q, m), apply_rope(k, n)); by the rotary identity this
/// depends only on m - n for fixed q, k.
inline double rel_attention_score(std::span<const double> q, std::span<const double> k, double m,
                                  double n, const RopeParams& p) {
    auto qr = apply_rope(q, m, p);
    auto kr = apply_rope(k, n, p);
    double dot = 0.0;
    for (std::size_t i = 0; i < qr.size(); ++i) {
        dot += qr[i] * kr[i];
    }
    return dot;
}

}  // namespace grist::rope
