// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

// Orthonormal 2D DCT over a token grid, the matching frequency grid, and the
// spectral Laplacian of the cosine eigenbasis.

#pragma once

#include "moppa/common.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace moppa {

struct SpatialTag {};
struct FrequencyTag {};

/// A width x height x channels grid of reals. Row `y * width + x` of
/// `tokens()` holds the channel vector at grid point (x, y). For the
/// frequency variant, (x, y) read as the DCT indices (p, q).
template <class Tag>
class GridTensor {
public:
    GridTensor() = default;

    GridTensor(Index width, Index height, Index channels) : width_(width), height_(height) {
        if (width < 1 || height < 1 || channels < 1) {
            throw DimensionError("grid tensor dimensions must be positive, got " + std::to_string(width) + "x" +
                                 std::to_string(height) + "x" + std::to_string(channels));
        }
        data_ = Matrix::Zero(width * height, channels);
    }

    GridTensor(Index width, Index height, Matrix tokens) : width_(width), height_(height), data_(std::move(tokens)) {
        if (width < 1 || height < 1 || data_.cols() < 1) {
            throw DimensionError("grid tensor dimensions must be positive");
        }
        if (data_.rows() != width * height) {
            throw DimensionError("token matrix has " + std::to_string(data_.rows()) + " rows, grid needs " +
                                 std::to_string(width * height));
        }
    }

    Index width() const noexcept { return width_; }
    Index height() const noexcept { return height_; }
    Index channels() const noexcept { return data_.cols(); }
    Index token_count() const noexcept { return width_ * height_; }

    double& operator()(Index x, Index y, Index c) { return data_(y * width_ + x, c); }
    double operator()(Index x, Index y, Index c) const { return data_(y * width_ + x, c); }

    const Matrix& tokens() const noexcept { return data_; }
    Matrix& tokens() noexcept { return data_; }

    bool finite() const { return data_.allFinite(); }

    bool same_shape(const GridTensor& other) const noexcept {
        return width_ == other.width_ && height_ == other.height_ && channels() == other.channels();
    }

private:
    Index width_ = 0;
    Index height_ = 0;
    Matrix data_;
};

using SpatialTensor = GridTensor<SpatialTag>;
using FrequencyTensor = GridTensor<FrequencyTag>;

/// Orthonormal DCT-II basis; row p is the p-th cosine mode sampled at n points.
inline Matrix dct_basis(Index n) {
    if (n < 1) throw DimensionError("dct_basis: n must be positive");
    Matrix basis(n, n);
    const double s0 = std::sqrt(1.0 / static_cast<double>(n));
    const double s1 = std::sqrt(2.0 / static_cast<double>(n));
    for (Index p = 0; p < n; ++p) {
        const double s = p == 0 ? s0 : s1;
        for (Index x = 0; x < n; ++x) {
            basis(p, x) = s * std::cos(std::numbers::pi * static_cast<double>((2 * x + 1) * p) /
                                       (2.0 * static_cast<double>(n)));
        }
    }
    return basis;
}

/// Precomputed bases for one grid size. `forward`/`inverse` are separable;
/// `operator_matrix()` is the equivalent L x L Kronecker form used by the tape.
class DctPlan {
public:
    DctPlan(Index width, Index height) : width_(width), height_(height) {
        if (width < 1 || height < 1) throw DimensionError("DctPlan: grid dimensions must be positive");
        basis_w_ = dct_basis(width);
        basis_h_ = dct_basis(height);
        const Index L = width * height;
        kron_.resize(L, L);
        for (Index q = 0; q < height; ++q)
            for (Index p = 0; p < width; ++p)
                for (Index y = 0; y < height; ++y)
                    for (Index x = 0; x < width; ++x)
                        kron_(q * width + p, y * width + x) = basis_h_(q, y) * basis_w_(p, x);
    }

    Index width() const noexcept { return width_; }
    Index height() const noexcept { return height_; }
    const Matrix& basis_w() const noexcept { return basis_w_; }
    const Matrix& basis_h() const noexcept { return basis_h_; }
    const Matrix& operator_matrix() const noexcept { return kron_; }

    Matrix forward(const Matrix& tokens) const { return separable(tokens, basis_w_, basis_h_); }

    Matrix inverse(const Matrix& coeffs) const {
        return separable(coeffs, basis_w_.transpose(), basis_h_.transpose());
    }

private:
    // Applies `along_w` to every grid row, then `along_h` to every grid column.
    Matrix separable(const Matrix& in, const Matrix& along_w, const Matrix& along_h) const {
        if (in.rows() != width_ * height_) {
            throw DimensionError("DCT input has " + std::to_string(in.rows()) + " tokens, plan expects " +
                                 std::to_string(width_ * height_));
        }
        const Index D = in.cols();
        Matrix rows_done(in.rows(), D);
        for (Index y = 0; y < height_; ++y) {
            rows_done.middleRows(y * width_, width_).noalias() = along_w * in.middleRows(y * width_, width_);
        }
        Matrix out = Matrix::Zero(in.rows(), D);
        for (Index q = 0; q < height_; ++q) {
            for (Index y = 0; y < height_; ++y) {
                const double a = along_h(q, y);
                out.middleRows(q * width_, width_) += a * rows_done.middleRows(y * width_, width_);
            }
        }
        return out;
    }

    Index width_;
    Index height_;
    Matrix basis_w_;
    Matrix basis_h_;
    Matrix kron_;
};

inline FrequencyTensor dct2d(const SpatialTensor& x) {
    DctPlan plan(x.width(), x.height());
    return FrequencyTensor(x.width(), x.height(), plan.forward(x.tokens()));
}

inline SpatialTensor idct2d(const FrequencyTensor& f) {
    DctPlan plan(f.width(), f.height());
    return SpatialTensor(f.width(), f.height(), plan.inverse(f.tokens()));
}

/// Angular frequency of each DCT mode: omega_x[p] = pi p / width.
/// `omega_sq` and `omega_abs` are indexed by frequency row `q * width + p`.
struct FrequencyGrid {
    Index width = 0;
    Index height = 0;
    std::vector<double> omega_x;
    std::vector<double> omega_y;
    Eigen::VectorXd omega_sq;
    Eigen::VectorXd omega_abs;

    Index size() const noexcept { return width * height; }
    double sq(Index p, Index q) const { return omega_sq(q * width + p); }
    double abs(Index p, Index q) const { return omega_abs(q * width + p); }
};

inline FrequencyGrid frequency_grid(Index width, Index height) {
    if (width < 1 || height < 1) throw DimensionError("frequency_grid: dimensions must be positive");
    FrequencyGrid g;
    g.width = width;
    g.height = height;
    g.omega_x.resize(static_cast<std::size_t>(width));
    g.omega_y.resize(static_cast<std::size_t>(height));
    for (Index p = 0; p < width; ++p)
        g.omega_x[static_cast<std::size_t>(p)] = std::numbers::pi * static_cast<double>(p) / static_cast<double>(width);
    for (Index q = 0; q < height; ++q)
        g.omega_y[static_cast<std::size_t>(q)] =
            std::numbers::pi * static_cast<double>(q) / static_cast<double>(height);
    g.omega_sq.resize(width * height);
    g.omega_abs.resize(width * height);
    for (Index q = 0; q < height; ++q) {
        for (Index p = 0; p < width; ++p) {
            const double wx = g.omega_x[static_cast<std::size_t>(p)];
            const double wy = g.omega_y[static_cast<std::size_t>(q)];
            g.omega_sq(q * width + p) = wx * wx + wy * wy;
            g.omega_abs(q * width + p) = std::sqrt(wx * wx + wy * wy);
        }
    }
    return g;
}

inline void require_grid_match(const FrequencyGrid& g, Index width, Index height) {
    if (g.width != width || g.height != height) {
        throw DimensionError("frequency grid " + shape_string(g.width, g.height) + " does not match tensor grid " +
                             shape_string(width, height));
    }
}

/// Multiplies every channel's spectrum by a per-frequency factor.
inline SpatialTensor apply_spectral_multiplier(const SpatialTensor& x, const Eigen::VectorXd& multiplier) {
    DctPlan plan(x.width(), x.height());
    Matrix coeffs = plan.forward(x.tokens());
    coeffs.array().colwise() *= multiplier.array();
    return SpatialTensor(x.width(), x.height(), plan.inverse(coeffs));
}

/// Laplacian consistent with the cosine eigenbasis: multiplier -omega^2.
inline SpatialTensor spectral_laplacian(const SpatialTensor& x, const FrequencyGrid& g) {
    require_grid_match(g, x.width(), x.height());
    return apply_spectral_multiplier(x, -g.omega_sq);
}

inline SpatialTensor spectral_laplacian(const SpatialTensor& x) {
    return spectral_laplacian(x, frequency_grid(x.width(), x.height()));
}

/// The spatial field of a single basis function phi_{p,q}, replicated over `channels`.
inline SpatialTensor basis_function(Index width, Index height, Index p, Index q, Index channels = 1) {
    FrequencyTensor f(width, height, channels);
    for (Index c = 0; c < channels; ++c) f(p, q, c) = 1.0;
    return idct2d(f);
}

}  // namespace moppa
