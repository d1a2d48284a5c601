// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records primitive applications in evaluation order. Every node keeps
// its forward value; nodes that depend on a trainable Parameter also carry a
// backward closure that pushes the node's adjoint into its inputs. Calling
// backward() on a 1x1 node walks the tape once in reverse and finally adds the
// adjoints of parameter leaves into Parameter::grad.
//
// Broadcasting is limited to scalar (1x1) and per-channel (1xD) operands.

#pragma once

#include "moppa/common.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace moppa::ad {

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    bool trainable = true;
    bool decay = true;  // subject to AdamW weight decay

    Parameter() = default;
    Parameter(std::string n, Matrix v, bool is_trainable = true, bool decays = true)
        : name(std::move(n)), value(std::move(v)), trainable(is_trainable), decay(decays) {
        grad = Matrix::Zero(value.rows(), value.cols());
    }

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    Index size() const noexcept { return value.size(); }
};

class Tape;

class Var {
public:
    Var() = default;

    bool valid() const noexcept { return tape_ != nullptr; }
    Tape* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }

    inline const Matrix& value() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }

private:
    friend class Tape;
    Var(Tape* t, std::size_t i) : tape_(t), id_(i) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Matrix& adjoint, const Matrix& value)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value) {
        nodes_.push_back(Node{std::move(value), {}, false, false, {}, nullptr});
        return Var(this, nodes_.size() - 1);
    }

    /// Leaf bound to a Parameter. Frozen parameters behave like constants.
    Var parameter(Parameter& p) {
        nodes_.push_back(Node{p.value, {}, p.trainable, false, {}, p.trainable ? &p : nullptr});
        return Var(this, nodes_.size() - 1);
    }

    /// Records an op result. The closure is dropped when no input needs a gradient.
    Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
        return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
    }

    Var record(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
        bool rg = false;
        for (const Var& v : inputs) {
            check(v);
            rg = rg || nodes_[v.id_].requires_grad;
        }
        nodes_.push_back(Node{std::move(value), {}, rg, false, rg ? std::move(fn) : BackwardFn{}, nullptr});
        return Var(this, nodes_.size() - 1);
    }

    const Matrix& value(Var v) const {
        check(v);
        return nodes_[v.id_].value;
    }

    bool requires_grad(Var v) const {
        check(v);
        return nodes_[v.id_].requires_grad;
    }

    template <class Derived>
    void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
        Node& n = nodes_[v.id_];
        if (!n.requires_grad) return;
        if (!n.has_adjoint) {
            n.adjoint = g;
            n.has_adjoint = true;
        } else {
            n.adjoint += g;
        }
    }

    void backward(Var loss) {
        check(loss);
        if (backward_done_) throw UsageError("backward already run on this tape");
        const Node& root = nodes_[loss.id_];
        if (root.value.rows() != 1 || root.value.cols() != 1) {
            throw UsageError("backward requires a scalar (1x1) loss, got " +
                             shape_string(root.value.rows(), root.value.cols()));
        }
        backward_done_ = true;
        if (!root.requires_grad) return;
        accumulate(loss, Matrix::Ones(1, 1));
        for (std::size_t i = loss.id_ + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.has_adjoint) continue;
            if (n.backward) n.backward(*this, n.adjoint, n.value);
            if (n.param != nullptr) n.param->grad += n.adjoint;
        }
    }

    /// Adjoint after backward(); zeros for nodes the loss does not reach.
    Matrix adjoint(Var v) const {
        check(v);
        if (!backward_done_) throw UsageError("adjoint requested before backward");
        const Node& n = nodes_[v.id_];
        if (n.has_adjoint) return n.adjoint;
        return Matrix::Zero(n.value.rows(), n.value.cols());
    }

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix adjoint;
        bool requires_grad = false;
        bool has_adjoint = false;
        BackwardFn backward;
        Parameter* param = nullptr;
    };

    void check(Var v) const {
        if (v.tape_ != this || v.id_ >= nodes_.size()) throw UsageError("variable does not belong to this tape");
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

inline const Matrix& Var::value() const {
    if (tape_ == nullptr) throw UsageError("unbound variable");
    return tape_->value(*this);
}

namespace detail {

inline Tape& tape_of(Var a) {
    if (!a.valid()) throw UsageError("unbound variable");
    return *a.tape();
}

inline void same_shape(Var a, Var b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
                             shape_string(b.rows(), b.cols()));
    }
}

}  // namespace detail

// ---- linear algebra -------------------------------------------------------

inline Var matmul(Var a, Var b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: " + shape_string(a.rows(), a.cols()) + " * " + shape_string(b.rows(), b.cols()));
    }
    Tape& t = detail::tape_of(a);
    Matrix v = a.value() * b.value();
    return t.record(std::move(v), {a, b}, [a, b](Tape& tp, const Matrix& g, const Matrix&) {
        if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
        if (tp.requires_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
    });
}

/// a * b^T
inline Var matmul_nt(Var a, Var b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: " + shape_string(a.rows(), a.cols()) + " * (" +
                             shape_string(b.rows(), b.cols()) + ")^T");
    }
    Tape& t = detail::tape_of(a);
    Matrix v = a.value() * b.value().transpose();
    return t.record(std::move(v), {a, b}, [a, b](Tape& tp, const Matrix& g, const Matrix&) {
        if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(b));
        if (tp.requires_grad(b)) tp.accumulate(b, g.transpose() * tp.value(a));
    });
}

/// op * a for a fixed matrix `op`. With an orthonormal `op` (the DCT) the
/// backward pass is the inverse transform of the adjoint.
inline Var left_transform(Var a, const Matrix& op) {
    if (op.cols() != a.rows()) throw DimensionError("left_transform: operator/input size mismatch");
    Tape& t = detail::tape_of(a);
    Matrix v = op * a.value();
    const Matrix* opp = &op;
    return t.record(std::move(v), {a}, [a, opp](Tape& tp, const Matrix& g, const Matrix&) { tp.accumulate(a, opp->transpose() * g); });
}

/// op^T * a
inline Var left_transform_transposed(Var a, const Matrix& op) {
    if (op.rows() != a.rows()) throw DimensionError("left_transform_transposed: operator/input size mismatch");
    Tape& t = detail::tape_of(a);
    Matrix v = op.transpose() * a.value();
    const Matrix* opp = &op;
    return t.record(std::move(v), {a}, [a, opp](Tape& tp, const Matrix& g, const Matrix&) { tp.accumulate(a, (*opp) * g); });
}

// ---- elementwise ------------------------------------------------------------

inline Var add(Var a, Var b) {
    detail::same_shape(a, b, "add");
    Tape& t = detail::tape_of(a);
    return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g, const Matrix&) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

inline Var sub(Var a, Var b) {
    detail::same_shape(a, b, "sub");
    Tape& t = detail::tape_of(a);
    return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& tp, const Matrix& g, const Matrix&) {
        tp.accumulate(a, g);
        tp.accumulate(b, -g);
    });
}

inline Var mul(Var a, Var b) {
    detail::same_shape(a, b, "mul");
    Tape& t = detail::tape_of(a);
    Matrix v = a.value().cwiseProduct(b.value());
    return t.record(std::move(v), {a, b}, [a, b](Tape& tp, const Matrix& g, const Matrix&) {
        if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
        if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
    });
}

inline Var scale(Var a, double s) {
    Tape& t = detail::tape_of(a);
    return t.record(a.value() * s, {a}, [a, s](Tape& tp, const Matrix& g, const Matrix&) { tp.accumulate(a, g * s); });
}

inline Var add_scalar(Var a, double s) {
    Tape& t = detail::tape_of(a);
    Matrix v = a.value().array() + s;
    return t.record(std::move(v), {a}, [a](Tape& tp, const Matrix& g, const Matrix&) { tp.accumulate(a, g); });
}

/// a * s where s is a 1x1 node.
inline Var mul_scalar(Var a, Var s) {
    if (s.rows() != 1 || s.cols() != 1) throw DimensionError("mul_scalar: scalar operand must be 1x1");
    Tape& t = detail::tape_of(a);
    Matrix v = a.value() * s.scalar();
    return t.record(std::move(v), {a, s}, [a, s](Tape& tp, const Matrix& g, const Matrix&) {
        if (tp.requires_grad(a)) tp.accumulate(a, g * tp.value(s)(0, 0));
        if (tp.requires_grad(s)) tp.accumulate(s, Matrix::Constant(1, 1, g.cwiseProduct(tp.value(a)).sum()));
    });
}

/// a(i, j) * v(j) where v is 1 x a.cols().
inline Var mul_channels(Var a, Var v) {
    if (v.rows() != 1 || v.cols() != a.cols()) {
        throw DimensionError("mul_channels: expected 1x" + std::to_string(a.cols()) + " vector, got " +
                             shape_string(v.rows(), v.cols()));
    }
    Tape& t = detail::tape_of(a);
    Matrix out = a.value();
    out.array().rowwise() *= v.value().row(0).array();
    return t.record(std::move(out), {a, v}, [a, v](Tape& tp, const Matrix& g, const Matrix&) {
        if (tp.requires_grad(a)) {
            Matrix ga = g;
            ga.array().rowwise() *= tp.value(v).row(0).array();
            tp.accumulate(a, ga);
        }
        if (tp.requires_grad(v)) tp.accumulate(v, g.cwiseProduct(tp.value(a)).colwise().sum());
    });
}

/// a(i, j) + v(j)
inline Var add_channels(Var a, Var v) {
    if (v.rows() != 1 || v.cols() != a.cols()) throw DimensionError("add_channels: vector length mismatch");
    Tape& t = detail::tape_of(a);
    Matrix out = a.value();
    out.rowwise() += v.value().row(0);
    return t.record(std::move(out), {a, v}, [a, v](Tape& tp, const Matrix& g, const Matrix&) {
        tp.accumulate(a, g);
        if (tp.requires_grad(v)) tp.accumulate(v, g.colwise().sum());
    });
}

inline Var exp(Var a) {
    Tape& t = detail::tape_of(a);
    Matrix v = a.value().array().exp();
    return t.record(std::move(v), {a}, [a](Tape& tp, const Matrix& g, const Matrix& out) {
        tp.accumulate(a, g.cwiseProduct(out));
    });
}

inline Var cos(Var a) {
    Tape& t = detail::tape_of(a);
    Matrix v = a.value().array().cos();
    return t.record(std::move(v), {a}, [a](Tape& tp, const Matrix& g, const Matrix&) {
        tp.accumulate(a, -g.cwiseProduct(Matrix(tp.value(a).array().sin())));
    });
}

inline Var log(Var a) {
    Tape& t = detail::tape_of(a);
    Matrix v = a.value().array().log();
    return t.record(std::move(v), {a}, [a](Tape& tp, const Matrix& g, const Matrix&) {
        tp.accumulate(a, g.cwiseQuotient(tp.value(a)));
    });
}

/// 1 / (a + eta)
inline Var reciprocal_offset(Var a, double eta) {
    Tape& t = detail::tape_of(a);
    Matrix v = (a.value().array() + eta).inverse();
    return t.record(std::move(v), {a}, [a, eta](Tape& tp, const Matrix& g, const Matrix&) {
        const auto z = tp.value(a).array() + eta;
        tp.accumulate(a, Matrix(-g.array() / (z * z)));
    });
}

/// GELU, tanh approximation, with its exact derivative.
inline Var gelu(Var a) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2 / pi)
    constexpr double kA = 0.044715;
    Tape& t = detail::tape_of(a);
    const Matrix& x = a.value();
    Matrix v(x.rows(), x.cols());
    Matrix th(x.rows(), x.cols());
    for (Index i = 0; i < x.size(); ++i) {
        const double z = x.data()[i];
        th.data()[i] = std::tanh(kC * (z + kA * z * z * z));
        v.data()[i] = 0.5 * z * (1.0 + th.data()[i]);
    }
    if (!t.requires_grad(a)) return t.record(std::move(v), {a}, {});
    return t.record(std::move(v), {a}, [a, th = std::move(th)](Tape& tp, const Matrix& g, const Matrix&) {
        const Matrix& xv = tp.value(a);
        Matrix d(xv.rows(), xv.cols());
        for (Index i = 0; i < xv.size(); ++i) {
            const double z = xv.data()[i];
            const double h = th.data()[i];
            const double dinner = kC * (1.0 + 3.0 * kA * z * z);
            d.data()[i] = g.data()[i] * (0.5 * (1.0 + h) + 0.5 * z * (1.0 - h * h) * dinner);
        }
        tp.accumulate(a, d);
    });
}

// ---- row-wise normalizations ------------------------------------------------

inline Var softmax_rows(Var a) {
    Tape& t = detail::tape_of(a);
    Matrix v = a.value();
    for (Index r = 0; r < v.rows(); ++r) {
        auto row = v.row(r);
        row.array() -= row.maxCoeff();
        row = row.array().exp().matrix();
        row /= row.sum();
    }
    return t.record(std::move(v), {a}, [a](Tape& tp, const Matrix& g, const Matrix& s) {
        Matrix ga = s.cwiseProduct(g);
        const Eigen::VectorXd dots = ga.rowwise().sum();
        ga -= s.cwiseProduct(dots.replicate(1, s.cols()));
        tp.accumulate(a, ga);
    });
}

/// Row-wise layer normalization with per-channel gain and bias (1 x D).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-6) {
    const Index D = x.cols();
    if (gain.rows() != 1 || gain.cols() != D || bias.rows() != 1 || bias.cols() != D) {
        throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(D));
    }
    Tape& t = detail::tape_of(x);
    const Matrix& xv = x.value();
    Matrix xhat(xv.rows(), D);
    Eigen::VectorXd inv_std(xv.rows());
    for (Index r = 0; r < xv.rows(); ++r) {
        const double mean = xv.row(r).mean();
        const double var = (xv.row(r).array() - mean).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
    }
    Matrix out = xhat;
    out.array().rowwise() *= gain.value().row(0).array();
    out.rowwise() += bias.value().row(0);
    return t.record(std::move(out), {x, gain, bias},
                    [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, const Matrix& g, const Matrix&) {
                        const Index n = xhat.cols();
                        if (tp.requires_grad(gain)) tp.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
                        if (tp.requires_grad(bias)) tp.accumulate(bias, g.colwise().sum());
                        if (!tp.requires_grad(x)) return;
                        Matrix gh = g;
                        gh.array().rowwise() *= tp.value(gain).row(0).array();
                        Matrix gx(gh.rows(), n);
                        for (Index r = 0; r < gh.rows(); ++r) {
                            const double m1 = gh.row(r).mean();
                            const double m2 = gh.row(r).dot(xhat.row(r)) / static_cast<double>(n);
                            gx.row(r) = inv_std(r) * (gh.row(r).array() - m1 - xhat.row(r).array() * m2);
                        }
                        tp.accumulate(x, gx);
                    });
}

// ---- reductions -------------------------------------------------------------

inline Var sum(Var a) {
    Tape& t = detail::tape_of(a);
    return t.record(Matrix::Constant(1, 1, a.value().sum()), {a}, [a](Tape& tp, const Matrix& g, const Matrix&) {
        const Matrix& v = tp.value(a);
        tp.accumulate(a, Matrix::Constant(v.rows(), v.cols(), g(0, 0)));
    });
}

inline Var mean(Var a) {
    Tape& t = detail::tape_of(a);
    const double n = static_cast<double>(a.value().size());
    return t.record(Matrix::Constant(1, 1, a.value().mean()), {a}, [a, n](Tape& tp, const Matrix& g, const Matrix&) {
        const Matrix& v = tp.value(a);
        tp.accumulate(a, Matrix::Constant(v.rows(), v.cols(), g(0, 0) / n));
    });
}

/// mean((a - b)^2)
inline Var mse(Var a, Var b) {
    detail::same_shape(a, b, "mse");
    Tape& t = detail::tape_of(a);
    const double n = static_cast<double>(a.value().size());
    const double v = (a.value() - b.value()).squaredNorm() / n;
    return t.record(Matrix::Constant(1, 1, v), {a, b}, [a, b, n](Tape& tp, const Matrix& g, const Matrix&) {
        const Matrix diff = (tp.value(a) - tp.value(b)) * (2.0 * g(0, 0) / n);
        tp.accumulate(a, diff);
        tp.accumulate(b, -diff);
    });
}

// ---- indexing -----------------------------------------------------------------

inline Var slice_cols(Var a, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw DimensionError("slice_cols: range out of bounds");
    Tape& t = detail::tape_of(a);
    Matrix v = a.value().middleCols(start, count);
    return t.record(std::move(v), {a}, [a, start, count](Tape& tp, const Matrix& g, const Matrix&) {
        const Matrix& av = tp.value(a);
        Matrix full = Matrix::Zero(av.rows(), av.cols());
        full.middleCols(start, count) = g;
        tp.accumulate(a, full);
    });
}

inline Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    Tape& t = detail::tape_of(parts.front());
    const Index rows = parts.front().rows();
    Index cols = 0;
    for (const Var& p : parts) {
        if (p.rows() != rows) throw DimensionError("concat_cols: row count mismatch");
        cols += p.cols();
    }
    Matrix v(rows, cols);
    std::vector<Index> offsets;
    Index off = 0;
    for (const Var& p : parts) {
        offsets.push_back(off);
        v.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    std::vector<Var> inputs(parts.begin(), parts.end());
    return t.record(std::move(v), parts, [inputs, offsets](Tape& tp, const Matrix& g, const Matrix&) {
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (tp.requires_grad(inputs[i])) tp.accumulate(inputs[i], g.middleCols(offsets[i], inputs[i].cols()));
        }
    });
}

/// out(:, j) = a(:, index[j]). Backward scatter-adds into the source columns.
inline Var gather_cols(Var a, std::vector<Index> index) {
    for (Index j : index)
        if (j < 0 || j >= a.cols()) throw DimensionError("gather_cols: column index out of range");
    Tape& t = detail::tape_of(a);
    const Matrix& av = a.value();
    Matrix v(av.rows(), static_cast<Index>(index.size()));
    for (std::size_t j = 0; j < index.size(); ++j) v.col(static_cast<Index>(j)) = av.col(index[j]);
    return t.record(std::move(v), {a}, [a, index = std::move(index)](Tape& tp, const Matrix& g, const Matrix&) {
        const Matrix& src = tp.value(a);
        Matrix ga = Matrix::Zero(src.rows(), src.cols());
        for (std::size_t j = 0; j < index.size(); ++j) ga.col(index[j]) += g.col(static_cast<Index>(j));
        tp.accumulate(a, ga);
    });
}

/// 1x1 node holding a(r, c).
inline Var select(Var a, Index r, Index c) {
    if (r < 0 || c < 0 || r >= a.rows() || c >= a.cols()) throw DimensionError("select: index out of range");
    Tape& t = detail::tape_of(a);
    return t.record(Matrix::Constant(1, 1, a.value()(r, c)), {a}, [a, r, c](Tape& tp, const Matrix& g, const Matrix&) {
        const Matrix& av = tp.value(a);
        Matrix ga = Matrix::Zero(av.rows(), av.cols());
        ga(r, c) = g(0, 0);
        tp.accumulate(a, ga);
    });
}

// ---- gradient checking ------------------------------------------------------------

struct GradCheckGroup {
    std::string name;
    double max_rel_err = 0.0;
    Index coords_checked = 0;
};

struct GradCheckReport {
    std::vector<GradCheckGroup> groups;

    double max_rel_err() const {
        double m = 0.0;
        for (const auto& g : groups) m = std::max(m, g.max_rel_err);
        return m;
    }
};

struct GradCheckError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline double relative_error(double ad, double fd) {
    return std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
}

namespace detail {

inline Var sum_terms(std::span<const Var> terms) {
    if (terms.empty()) throw UsageError("grad_check: no loss terms");
    Var total = sum(terms.front());
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, sum(terms[i]));
    return total;
}

}  // namespace detail

/// Loss given as a list of term tensors; the loss is the sum of all entries.
using TermBuilder = std::function<std::vector<Var>(Tape&)>;

/// Compares tape gradients with central differences on up to `max_coords`
/// randomly chosen coordinates of each trainable parameter.
///
/// The difference f(p + eps) - f(p - eps) is accumulated entry by entry over
/// the loss terms rather than as the difference of two reduced scalars, so
/// it is not quantized to the ulp of f. `build` must be deterministic.
inline GradCheckReport grad_check_terms(const TermBuilder& build, std::span<Parameter* const> params, double eps,
                                        std::uint64_t seed = 0, Index max_coords = 64) {
    if (eps < 1e-6 || eps > 1e-3) throw UsageError("grad_check: eps must lie in [1e-6, 1e-3]");
    for (Parameter* p : params) p->zero_grad();
    {
        Tape tape;
        const std::vector<Var> terms = build(tape);
        Var loss = detail::sum_terms(terms);
        if (!std::isfinite(loss.scalar())) throw GradCheckError("grad_check: loss is not finite at the base point");
        tape.backward(loss);
    }
    auto eval = [&build](const std::string& where) {
        Tape tape;
        std::vector<Matrix> values;
        for (const Var& v : build(tape)) {
            if (!v.value().allFinite()) throw GradCheckError("grad_check: non-finite loss while perturbing " + where);
            values.push_back(v.value());
        }
        return values;
    };

    std::mt19937_64 rng(seed);
    GradCheckReport report;
    for (Parameter* p : params) {
        if (!p->trainable) continue;
        const Matrix analytic = p->grad;
        std::vector<Index> coords(static_cast<std::size_t>(p->size()));
        for (Index i = 0; i < p->size(); ++i) coords[static_cast<std::size_t>(i)] = i;
        if (p->size() > max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(static_cast<std::size_t>(max_coords));
            std::sort(coords.begin(), coords.end());
        }
        GradCheckGroup group{p->name, 0.0, 0};
        for (Index i : coords) {
            const std::string where = p->name + "[" + std::to_string(i) + "]";
            double& slot = p->value.data()[i];
            const double saved = slot;
            slot = saved + eps;
            const auto plus = eval(where);
            slot = saved - eps;
            const auto minus = eval(where);
            slot = saved;
            double diff = 0.0;
            for (std::size_t k = 0; k < plus.size(); ++k) diff += (plus[k] - minus[k]).sum();
            const double fd = diff / (2.0 * eps);
            group.max_rel_err = std::max(group.max_rel_err, relative_error(analytic.data()[i], fd));
            ++group.coords_checked;
        }
        report.groups.push_back(std::move(group));
    }
    return report;
}

/// Scalar-loss form of grad_check_terms.
inline GradCheckReport grad_check(const std::function<Var(Tape&)>& build, std::span<Parameter* const> params,
                                  double eps, std::uint64_t seed = 0, Index max_coords = 64) {
    return grad_check_terms([&build](Tape& t) { return std::vector<Var>{build(t)}; }, params, eps, seed, max_coords);
}

}  // namespace moppa::ad
