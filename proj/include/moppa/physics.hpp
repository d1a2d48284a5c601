// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

// Frequency-domain heat, wave and Poisson operators over a token grid and
// their router-weighted mixture.
//
// Parameter layout (L tokens, D channels, N heads):
//   heat.k, wave.c, poisson.h1 : L x N   shared by every channel of a head
//   heat.t, wave.t             : 1 x D   one diffusion/propagation time per channel
//   poisson.h2                 : 1 x D/N shared across heads
// The source spectrum is SD(w, d) = h1(w, head_of(d)) * h2(within_head(d)).

#pragma once

#include "moppa/common.hpp"
#include "moppa/routing.hpp"
#include "moppa/spectral.hpp"

#include <algorithm>
#include <cmath>

namespace moppa {

struct HeadLayout {
    Index tokens = 1;    // L
    Index channels = 1;  // D
    Index heads = 1;     // N

    static HeadLayout make(Index tokens, Index channels, Index heads) {
        if (tokens < 1 || channels < 1 || heads < 1) throw DimensionError("head layout sizes must be positive");
        if (channels % heads != 0) {
            throw DimensionError("heads (" + std::to_string(heads) + ") must divide channels (" +
                                 std::to_string(channels) + ")");
        }
        return HeadLayout{tokens, channels, heads};
    }

    Index head_dim() const noexcept { return channels / heads; }
    Index head_of(Index d) const noexcept { return d / head_dim(); }
    Index within_head(Index d) const noexcept { return d % head_dim(); }
};

struct HeatParams {
    Matrix k;     // L x N
    RowVector t;  // D
};

struct WaveParams {
    Matrix c;     // L x N
    RowVector t;  // D
};

inline constexpr double kDefaultEta = 0.001;

struct PoissonParams {
    Matrix h1;     // L x N
    RowVector h2;  // D / N
    double eta = kDefaultEta;
};

struct MoppaUnitParams {
    HeatParams heat;
    WaveParams wave;
    PoissonParams poisson;
    RouterState router;
    HeadLayout layout;
};

namespace detail {

inline void check_head_matrix(const Matrix& m, const HeadLayout& layout, const char* what) {
    require_shape(m, layout.tokens, layout.heads, what);
}

inline void check_channel_vector(const RowVector& v, Index n, const char* what) {
    if (v.size() != n) {
        throw DimensionError(std::string(what) + ": expected length " + std::to_string(n) + ", got " +
                             std::to_string(v.size()));
    }
}

inline HeadLayout layout_for(const SpatialTensor& x, Index heads) {
    return HeadLayout::make(x.token_count(), x.channels(), heads);
}

}  // namespace detail

/// exp(-k(w, head) * w^2 * t(d)) for every (frequency, channel).
inline Matrix heat_multiplier(const HeatParams& p, const FrequencyGrid& g, const HeadLayout& layout) {
    detail::check_head_matrix(p.k, layout, "heat.k");
    detail::check_channel_vector(p.t, layout.channels, "heat.t");
    if (g.size() != layout.tokens) throw DimensionError("heat: frequency grid does not match token count");
    Matrix m(layout.tokens, layout.channels);
    for (Index f = 0; f < layout.tokens; ++f)
        for (Index d = 0; d < layout.channels; ++d)
            m(f, d) = std::exp(-p.k(f, layout.head_of(d)) * g.omega_sq(f) * p.t(d));
    return m;
}

/// cos(c(w, head) * |w| * t(d)).
inline Matrix wave_multiplier(const WaveParams& p, const FrequencyGrid& g, const HeadLayout& layout) {
    detail::check_head_matrix(p.c, layout, "wave.c");
    detail::check_channel_vector(p.t, layout.channels, "wave.t");
    if (g.size() != layout.tokens) throw DimensionError("wave: frequency grid does not match token count");
    Matrix m(layout.tokens, layout.channels);
    for (Index f = 0; f < layout.tokens; ++f)
        for (Index d = 0; d < layout.channels; ++d)
            m(f, d) = std::cos(p.c(f, layout.head_of(d)) * g.omega_abs(f) * p.t(d));
    return m;
}

/// Source spectrum SD(w, d) = h1(w, head_of(d)) * h2(within_head(d)).
inline Matrix source_spectrum(const PoissonParams& p, const HeadLayout& layout) {
    detail::check_head_matrix(p.h1, layout, "poisson.h1");
    detail::check_channel_vector(p.h2, layout.head_dim(), "poisson.h2");
    Matrix sd(layout.tokens, layout.channels);
    for (Index f = 0; f < layout.tokens; ++f)
        for (Index d = 0; d < layout.channels; ++d)
            sd(f, d) = p.h1(f, layout.head_of(d)) * p.h2(layout.within_head(d));
    return sd;
}

/// SD(w, d) / (w^2 + eta): the Poisson potential in the DCT domain.
inline Matrix poisson_spectrum(const PoissonParams& p, const FrequencyGrid& g, const HeadLayout& layout) {
    if (!(p.eta > 0.0)) throw ParameterError("poisson: eta must be > 0, got " + std::to_string(p.eta));
    if (g.size() != layout.tokens) throw DimensionError("poisson: frequency grid does not match token count");
    Matrix s = source_spectrum(p, layout);
    for (Index f = 0; f < layout.tokens; ++f) s.row(f) /= (g.omega_sq(f) + p.eta);
    return s;
}

inline SpatialTensor heat_apply(const SpatialTensor& x, const HeatParams& p, const FrequencyGrid& g) {
    require_grid_match(g, x.width(), x.height());
    const HeadLayout layout = detail::layout_for(x, p.k.cols());
    DctPlan plan(x.width(), x.height());
    Matrix coeffs = plan.forward(x.tokens());
    coeffs.array() *= heat_multiplier(p, g, layout).array();
    return SpatialTensor(x.width(), x.height(), plan.inverse(coeffs));
}

inline SpatialTensor wave_apply(const SpatialTensor& x, const WaveParams& p, const FrequencyGrid& g) {
    require_grid_match(g, x.width(), x.height());
    const HeadLayout layout = detail::layout_for(x, p.c.cols());
    DctPlan plan(x.width(), x.height());
    Matrix coeffs = plan.forward(x.tokens());
    coeffs.array() *= wave_multiplier(p, g, layout).array();
    return SpatialTensor(x.width(), x.height(), plan.inverse(coeffs));
}

/// Input-independent additive field IDCT(SD / (w^2 + eta)).
inline SpatialTensor poisson_apply(const PoissonParams& p, const FrequencyGrid& g, const HeadLayout& layout) {
    DctPlan plan(g.width, g.height);
    return SpatialTensor(g.width, g.height, plan.inverse(poisson_spectrum(p, g, layout)));
}

namespace detail {

inline void check_unit(const SpatialTensor& x, const MoppaUnitParams& unit, const FrequencyGrid& g) {
    require_grid_match(g, x.width(), x.height());
    if (unit.layout.tokens != x.token_count() || unit.layout.channels != x.channels()) {
        throw DimensionError("unit layout does not match input tensor");
    }
}

}  // namespace detail

/// alpha1 Heat(x) + alpha2 Wave(x) + alpha3 Poisson(), each operator evaluated
/// with its own transform pair.
inline SpatialTensor moppa_forward_unfused(const SpatialTensor& x, const MoppaUnitParams& unit,
                                           const FrequencyGrid& g) {
    detail::check_unit(x, unit, g);
    const auto alpha = route_weights(unit.router);
    Matrix y = Matrix::Zero(x.token_count(), x.channels());
    if (unit.router.active[0]) y += alpha[0] * heat_apply(x, unit.heat, g).tokens();
    if (unit.router.active[1]) y += alpha[1] * wave_apply(x, unit.wave, g).tokens();
    if (unit.router.active[2]) y += alpha[2] * poisson_apply(unit.poisson, g, unit.layout).tokens();
    return SpatialTensor(x.width(), x.height(), std::move(y));
}

/// Single transform pair:
///   Y = IDCT( DCT(X) (a1 e^{-k w^2 t} + a2 cos(c |w| t)) + a3 SD / (w^2 + eta) ).
inline SpatialTensor moppa_forward(const SpatialTensor& x, const MoppaUnitParams& unit, const FrequencyGrid& g) {
    detail::check_unit(x, unit, g);
    const auto alpha = route_weights(unit.router);
    const HeadLayout& layout = unit.layout;
    Matrix filter = Matrix::Zero(layout.tokens, layout.channels);
    if (unit.router.active[0]) filter += alpha[0] * heat_multiplier(unit.heat, g, layout);
    if (unit.router.active[1]) filter += alpha[1] * wave_multiplier(unit.wave, g, layout);

    DctPlan plan(x.width(), x.height());
    Matrix coeffs = plan.forward(x.tokens());
    coeffs.array() *= filter.array();
    if (unit.router.active[2]) coeffs += alpha[2] * poisson_spectrum(unit.poisson, g, layout);
    return SpatialTensor(x.width(), x.height(), plan.inverse(coeffs));
}

// PDE residual checks. Each evaluates the discrete operator at neighbouring
// times and compares the finite-difference time derivative with the spectral
// Laplacian, returning the max-abs residual.

inline HeatParams uniform_heat(const HeadLayout& layout, double k, double t) {
    return HeatParams{Matrix::Constant(layout.tokens, layout.heads, k), RowVector::Constant(layout.channels, t)};
}

inline WaveParams uniform_wave(const HeadLayout& layout, double c, double t) {
    return WaveParams{Matrix::Constant(layout.tokens, layout.heads, c), RowVector::Constant(layout.channels, t)};
}

/// || (H(t + dt) - H(t)) / dt - k Lap(H(t)) ||_inf with scalar diffusivity k.
inline double pde_residual_heat(double k, double t, const SpatialTensor& x, const FrequencyGrid& g, double dt) {
    const HeadLayout layout = detail::layout_for(x, 1);
    const SpatialTensor u0 = heat_apply(x, uniform_heat(layout, k, t), g);
    const SpatialTensor u1 = heat_apply(x, uniform_heat(layout, k, t + dt), g);
    const Matrix lap = spectral_laplacian(u0, g).tokens();
    const Matrix r = (u1.tokens() - u0.tokens()) / dt - k * lap;
    return r.cwiseAbs().maxCoeff();
}

/// || (W(t + dt) - 2 W(t) + W(t - dt)) / dt^2 - c^2 Lap(W(t)) ||_inf.
inline double pde_residual_wave(double c, double t, const SpatialTensor& x, const FrequencyGrid& g, double dt) {
    const HeadLayout layout = detail::layout_for(x, 1);
    const SpatialTensor um = wave_apply(x, uniform_wave(layout, c, t - dt), g);
    const SpatialTensor u0 = wave_apply(x, uniform_wave(layout, c, t), g);
    const SpatialTensor up = wave_apply(x, uniform_wave(layout, c, t + dt), g);
    const Matrix lap = spectral_laplacian(u0, g).tokens();
    const Matrix r = (up.tokens() - 2.0 * u0.tokens() + um.tokens()) / (dt * dt) - c * c * lap;
    return r.cwiseAbs().maxCoeff();
}

/// Central first difference (W(t + dt) - W(t - dt)) / (2 dt); ~0 at t = 0.
inline double wave_velocity(double c, double t, const SpatialTensor& x, const FrequencyGrid& g, double dt) {
    const HeadLayout layout = detail::layout_for(x, 1);
    const SpatialTensor um = wave_apply(x, uniform_wave(layout, c, t - dt), g);
    const SpatialTensor up = wave_apply(x, uniform_wave(layout, c, t + dt), g);
    return ((up.tokens() - um.tokens()) / (2.0 * dt)).cwiseAbs().maxCoeff();
}

/// Closed-form |Lap(u) + SD| at one frequency: eta / (w^2 + eta) * |SD|.
inline double poisson_offset_residual(double omega_sq, double eta, double sd) {
    return eta / (omega_sq + eta) * std::abs(sd);
}

struct PoissonResidual {
    double residual = 0.0;  // max over checked frequencies of |Lap(u) + SD|
    double ratio = 0.0;     // max of residual / |SD| over the same frequencies
    Index checked = 0;      // frequency/channel pairs with w^2 >= 100 eta and SD != 0
};

/// Compares Lap(u_P) against -SD in the DCT domain, restricted to
/// frequencies with w^2 >= 100 eta where the eta offset is negligible.
inline PoissonResidual pde_residual_poisson(const PoissonParams& p, const FrequencyGrid& g,
                                            const HeadLayout& layout) {
    const SpatialTensor u = poisson_apply(p, g, layout);
    const SpatialTensor lap = spectral_laplacian(u, g);
    const Matrix lap_hat = DctPlan(g.width, g.height).forward(lap.tokens());
    const Matrix sd = source_spectrum(p, layout);
    PoissonResidual out;
    for (Index f = 0; f < layout.tokens; ++f) {
        if (g.omega_sq(f) < 100.0 * p.eta) continue;
        for (Index d = 0; d < layout.channels; ++d) {
            const double r = std::abs(lap_hat(f, d) + sd(f, d));
            out.residual = std::max(out.residual, r);
            if (sd(f, d) != 0.0) {
                out.ratio = std::max(out.ratio, r / std::abs(sd(f, d)));
                ++out.checked;
            }
        }
    }
    return out;
}

}  // namespace moppa
