// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace moppa {

using Index = Eigen::Index;

/// Row-major dense matrix. Token grids are stored as L x D with token
/// index `y * width + x`.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ParameterError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BudgetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_string(Index rows, Index cols) {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

inline void require_shape(const Matrix& m, Index rows, Index cols, const char* what) {
    if (m.rows() != rows || m.cols() != cols) {
        throw DimensionError(std::string(what) + ": expected " + shape_string(rows, cols) + ", got " +
                             shape_string(m.rows(), m.cols()));
    }
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// FNV-1a over the raw bytes of a matrix; used to prove frozen weights never move.
inline std::uint64_t checksum(const Matrix& m, std::uint64_t seed = 1469598103934665603ULL) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    const auto n = static_cast<std::size_t>(m.size()) * sizeof(double);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace moppa
