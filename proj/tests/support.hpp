// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "moppa/spectral.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace moppa::testing {

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

inline RowVector random_row(Index n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    RowVector v(n);
    for (Index i = 0; i < n; ++i) v(i) = u(rng);
    return v;
}

inline SpatialTensor random_tensor(Index w, Index h, Index c, std::mt19937_64& rng) {
    return SpatialTensor(w, h, random_matrix(w * h, c, rng));
}

inline double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

// Straight summation of the orthonormal DCT-II, one coefficient at a time.
inline double naive_dct_coefficient(const SpatialTensor& x, Index p, Index q, Index ch) {
    const auto s = [](Index k, Index n) { return k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n); };
    const Index w = x.width();
    const Index h = x.height();
    double acc = 0.0;
    for (Index yy = 0; yy < h; ++yy) {
        for (Index xx = 0; xx < w; ++xx) {
            acc += x(xx, yy, ch) * std::cos(std::numbers::pi * (2 * xx + 1) * p / (2.0 * w)) *
                   std::cos(std::numbers::pi * (2 * yy + 1) * q / (2.0 * h));
        }
    }
    return s(p, w) * s(q, h) * acc;
}

}  // namespace moppa::testing
