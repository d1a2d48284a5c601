// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "moppa/common.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace moppa {

enum class Path : int { heat = 0, wave = 1, poisson = 2 };
inline constexpr int kPathCount = 3;

using PathMask = std::array<bool, kPathCount>;
inline constexpr PathMask kAllPaths{true, true, true};

/// Learnable path logits of one unit. Inactive paths are excised from the
/// softmax entirely (their weight is exactly zero).
struct RouterState {
    std::array<double, kPathCount> lambda{0.0, 0.0, 0.0};
    PathMask active = kAllPaths;

    int active_count() const { return static_cast<int>(std::count(active.begin(), active.end(), true)); }
};

/// Softmax over the active logits, stabilized by max-subtraction.
inline std::array<double, kPathCount> route_weights(const RouterState& r) {
    std::array<double, kPathCount> alpha{0.0, 0.0, 0.0};
    double m = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < kPathCount; ++i)
        if (r.active[i]) m = std::max(m, r.lambda[i]);
    if (r.active_count() == 0) return alpha;
    double z = 0.0;
    for (int i = 0; i < kPathCount; ++i) {
        if (!r.active[i]) continue;
        alpha[i] = std::exp(r.lambda[i] - m);
        z += alpha[i];
    }
    for (double& a : alpha) a /= z;
    return alpha;
}

/// Negative entropy sum(a log a), with 0 log 0 = 0. Range [-log n, 0].
inline double route_regularization(std::span<const double> alpha) {
    double s = 0.0;
    for (double a : alpha)
        if (a > 0.0) s += a * std::log(a);
    return s;
}

struct ScheduleConfig {
    double w = 0.1;
    long t_total = 1;

    void validate() const {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("schedule coefficient w must be finite and >= 0");
        if (t_total < 1) throw ConfigError("schedule t_total must be >= 1");
    }
};

/// w * max(1 - 2t / t_total, 0): full strength at t = 0, zero from t_total / 2 on.
inline double schedule_weight(double t, const ScheduleConfig& cfg) {
    const double ramp = 1.0 - 2.0 * t / static_cast<double>(cfg.t_total);
    return cfg.w * std::max(ramp, 0.0);
}

/// origin + schedule_weight * mean(regs). Returns `origin` untouched when the
/// schedule weight is zero or there are no routers.
inline double total_loss(double origin, std::span<const double> regs, double t, const ScheduleConfig& cfg) {
    const double weight = schedule_weight(t, cfg);
    if (weight == 0.0 || regs.empty()) return origin;
    double sum = 0.0;
    for (double r : regs) sum += r;
    return origin + weight * (sum / static_cast<double>(regs.size()));
}

}  // namespace moppa
