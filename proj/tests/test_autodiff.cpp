// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include "moppa/autodiff.hpp"
#include "moppa/spectral.hpp"
#include "support.hpp"

using namespace moppa;
using moppa::testing::max_abs;
using moppa::testing::random_matrix;

namespace {

using Unary = std::function<ad::Var(ad::Tape&, ad::Var)>;
using Binary = std::function<ad::Var(ad::Tape&, ad::Var, ad::Var)>;

// Checks d/dp sum(W * op(p)) against central differences with a random weighting W.
double check_unary(const Unary& op, Matrix x, std::uint64_t seed, double eps = 1e-5) {
    std::mt19937_64 rng(seed);
    ad::Parameter p("x", std::move(x));
    Matrix w;
    {
        ad::Tape probe;
        const ad::Var y = op(probe, probe.parameter(p));
        w = random_matrix(y.rows(), y.cols(), rng);
    }
    auto build = [&](ad::Tape& t) {
        return std::vector<ad::Var>{ad::mul(t.constant(w), op(t, t.parameter(p)))};
    };
    std::vector<ad::Parameter*> params{&p};
    return ad::grad_check_terms(build, params, eps, seed).max_rel_err();
}

double check_binary(const Binary& op, Matrix a, Matrix b, std::uint64_t seed, double eps = 1e-5) {
    std::mt19937_64 rng(seed);
    ad::Parameter pa("a", std::move(a));
    ad::Parameter pb("b", std::move(b));
    Matrix w;
    {
        ad::Tape probe;
        const ad::Var y = op(probe, probe.parameter(pa), probe.parameter(pb));
        w = random_matrix(y.rows(), y.cols(), rng);
    }
    auto build = [&](ad::Tape& t) {
        return std::vector<ad::Var>{ad::mul(t.constant(w), op(t, t.parameter(pa), t.parameter(pb)))};
    };
    std::vector<ad::Parameter*> params{&pa, &pb};
    return ad::grad_check_terms(build, params, eps, seed).max_rel_err();
}

}  // namespace

TEST_CASE("primitive gradients match finite differences", "[autodiff]") {
    std::mt19937_64 rng(42);
    auto R = [&](Index r, Index c, double lo = -1.0, double hi = 1.0) { return random_matrix(r, c, rng, lo, hi); };
    const double tol = 1e-5;

    SECTION("matmul") {
        CHECK(check_binary([](ad::Tape&, ad::Var a, ad::Var b) { return ad::matmul(a, b); }, R(3, 4), R(4, 5), 1) < tol);
        CHECK(check_binary([](ad::Tape&, ad::Var a, ad::Var b) { return ad::matmul_nt(a, b); }, R(3, 4), R(5, 4), 2) < tol);
    }
    SECTION("elementwise") {
        CHECK(check_binary([](ad::Tape&, ad::Var a, ad::Var b) { return ad::add(a, b); }, R(3, 4), R(3, 4), 3) < tol);
        CHECK(check_binary([](ad::Tape&, ad::Var a, ad::Var b) { return ad::sub(a, b); }, R(3, 4), R(3, 4), 4) < tol);
        CHECK(check_binary([](ad::Tape&, ad::Var a, ad::Var b) { return ad::mul(a, b); }, R(3, 4), R(3, 4), 5) < tol);
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::scale(a, -2.5); }, R(2, 3), 6) < tol);
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::add_scalar(a, 0.3); }, R(2, 3), 7) < tol);
    }
    SECTION("broadcasts") {
        CHECK(check_binary([](ad::Tape&, ad::Var a, ad::Var s) { return ad::mul_scalar(a, s); }, R(3, 4), R(1, 1), 8) < tol);
        CHECK(check_binary([](ad::Tape&, ad::Var a, ad::Var v) { return ad::mul_channels(a, v); }, R(5, 4), R(1, 4), 9) < tol);
        CHECK(check_binary([](ad::Tape&, ad::Var a, ad::Var v) { return ad::add_channels(a, v); }, R(5, 4), R(1, 4), 10) < tol);
    }
    SECTION("nonlinear") {
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::exp(a); }, R(3, 3), 11) < tol);
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::cos(a); }, R(3, 3, -3.0, 3.0), 12) < tol);
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::log(a); }, R(3, 3, 0.5, 2.0), 13) < tol);
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::reciprocal_offset(a, 0.001); }, R(3, 3, 0.1, 2.0), 14) < tol);
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::gelu(a); }, R(4, 5, -3.0, 3.0), 15) < tol);
    }
    SECTION("normalizations") {
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::softmax_rows(a); }, R(4, 6, -2.0, 2.0), 16) < tol);
        ad::Parameter gain("gain", R(1, 6, 0.5, 1.5));
        ad::Parameter bias("bias", R(1, 6));
        ad::Parameter x("x", R(4, 6, -2.0, 2.0));
        Matrix w = R(4, 6);
        auto build = [&](ad::Tape& t) {
            ad::Var y = ad::layer_norm(t.parameter(x), t.parameter(gain), t.parameter(bias));
            return std::vector<ad::Var>{ad::mul(t.constant(w), y)};
        };
        std::vector<ad::Parameter*> params{&x, &gain, &bias};
        CHECK(ad::grad_check_terms(build, params, 1e-5).max_rel_err() < tol);
    }
    SECTION("reductions") {
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::sum(a); }, R(3, 4), 17) < tol);
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::mean(a); }, R(3, 4), 18) < tol);
        CHECK(check_binary([](ad::Tape&, ad::Var a, ad::Var b) { return ad::mse(a, b); }, R(3, 4), R(3, 4), 19) < tol);
    }
    SECTION("indexing") {
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::slice_cols(a, 1, 2); }, R(3, 5), 20) < tol);
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::gather_cols(a, {2, 0, 2, 1}); }, R(3, 3), 21) < tol);
        CHECK(check_unary([](ad::Tape&, ad::Var a) { return ad::select(a, 1, 2); }, R(3, 3), 22) < tol);
        CHECK(check_binary(
                  [](ad::Tape&, ad::Var a, ad::Var b) {
                      const std::array<ad::Var, 3> parts{a, b, a};
                      return ad::concat_cols(parts);
                  },
                  R(3, 2), R(3, 4), 23) < tol);
    }
    SECTION("transforms") {
        const DctPlan plan(4, 3);
        const Matrix& op = plan.operator_matrix();
        CHECK(check_unary([&](ad::Tape&, ad::Var a) { return ad::left_transform(a, op); }, R(12, 3), 24) < tol);
        CHECK(check_unary([&](ad::Tape&, ad::Var a) { return ad::left_transform_transposed(a, op); }, R(12, 3), 25) < tol);
    }
}

TEST_CASE("heat derivative by hand", "[autodiff]") {
    ad::Parameter k("k", Matrix::Constant(1, 1, 0.5));
    ad::Tape t;
    const double w2 = 1.0;
    const double time = 1.0;
    ad::Var y = ad::exp(ad::scale(t.parameter(k), -w2 * time));
    t.backward(y);
    CHECK(std::abs(k.grad(0, 0) + std::exp(-0.5)) < 1e-15);
    CHECK(std::abs(k.grad(0, 0) - (-0.6065306597126334)) < 1e-15);
}

TEST_CASE("DCT backward is the inverse transform", "[autodiff]") {
    std::mt19937_64 rng(3);
    const Index w = 5;
    const Index h = 4;
    const DctPlan plan(w, h);
    ad::Parameter x("x", random_matrix(w * h, 3, rng));
    const Matrix g = random_matrix(w * h, 3, rng);
    {
        ad::Tape t;
        ad::Var y = ad::left_transform(t.parameter(x), plan.operator_matrix());
        t.backward(ad::sum(ad::mul(t.constant(g), y)));
    }
    const Matrix expect = idct2d(FrequencyTensor(w, h, g)).tokens();
    CHECK(max_abs(x.grad - expect) < 1e-12);

    // finite differences on every coordinate
    double worst = 0.0;
    for (Index i = 0; i < x.size(); ++i) {
        const double saved = x.value.data()[i];
        x.value.data()[i] = saved + 1e-6;
        const double fp = g.cwiseProduct(plan.forward(x.value)).sum();
        x.value.data()[i] = saved - 1e-6;
        const double fm = g.cwiseProduct(plan.forward(x.value)).sum();
        x.value.data()[i] = saved;
        worst = std::max(worst, std::abs((fp - fm) / 2e-6 - x.grad.data()[i]));
    }
    CHECK(worst < 1e-7);
}

TEST_CASE("linear functions check exactly", "[autodiff]") {
    std::mt19937_64 rng(4);
    ad::Parameter p("p", random_matrix(6, 5, rng));
    const Matrix a = random_matrix(3, 6, rng);
    auto build = [&](ad::Tape& t) { return ad::sum(ad::matmul(t.constant(a), t.parameter(p))); };
    std::vector<ad::Parameter*> params{&p};
    CHECK(ad::grad_check(build, params, 1e-4).max_rel_err() < 1e-9);
}

TEST_CASE("frozen parameters receive no gradient", "[autodiff]") {
    std::mt19937_64 rng(5);
    ad::Parameter frozen("w", random_matrix(4, 4, rng), false);
    ad::Parameter live("v", random_matrix(4, 4, rng));
    ad::Tape t;
    ad::Var y = ad::gelu(ad::matmul(t.parameter(frozen), t.parameter(live)));
    t.backward(ad::sum(y));
    CHECK(frozen.grad.isZero(0.0));
    CHECK(!live.grad.isZero(0.0));
    CHECK(!t.requires_grad(t.parameter(frozen)));
}

TEST_CASE("multiple consumers accumulate", "[autodiff]") {
    std::mt19937_64 rng(6);
    ad::Parameter p("p", random_matrix(3, 3, rng));
    auto f1 = [](ad::Tape&, ad::Var x) { return ad::sum(ad::exp(x)); };
    auto f2 = [](ad::Tape&, ad::Var x) { return ad::sum(ad::mul(x, x)); };

    Matrix g1, g2;
    {
        ad::Tape t;
        t.backward(f1(t, t.parameter(p)));
        g1 = p.grad;
        p.zero_grad();
    }
    {
        ad::Tape t;
        t.backward(f2(t, t.parameter(p)));
        g2 = p.grad;
        p.zero_grad();
    }
    {
        ad::Tape t;
        ad::Var x = t.parameter(p);
        t.backward(ad::add(f1(t, x), f2(t, x)));
    }
    CHECK(max_abs(p.grad - (g1 + g2)) < 1e-12);
}

TEST_CASE("tape usage errors", "[autodiff]") {
    ad::Parameter p("p", Matrix::Ones(2, 2));
    ad::Tape t;
    ad::Var x = t.parameter(p);
    ad::Var y = ad::sum(x);
    CHECK_THROWS_AS(t.adjoint(y), UsageError);
    CHECK_THROWS_AS(t.backward(x), UsageError);
    t.backward(y);
    CHECK_THROWS_AS(t.backward(y), UsageError);
    CHECK(t.adjoint(x).isOnes(0.0));

    ad::Tape other;
    CHECK_THROWS_AS(other.backward(y), UsageError);
    CHECK_THROWS_AS(ad::Var{}.value(), UsageError);
    CHECK_THROWS_AS(ad::add(x, other.constant(Matrix::Ones(2, 3))), DimensionError);
    CHECK_THROWS_AS(ad::mul_channels(x, other.constant(Matrix::Ones(1, 3))), DimensionError);

    std::vector<ad::Parameter*> params{&p};
    auto build = [](ad::Tape& tp) { return tp.constant(Matrix::Ones(1, 1)); };
    CHECK_THROWS_AS(ad::grad_check(build, params, 1e-7), UsageError);
    CHECK_THROWS_AS(ad::grad_check(build, params, 1e-2), UsageError);
    auto nan = [&](ad::Tape& tp) { return ad::log(ad::add_scalar(ad::sum(tp.parameter(p)), -10.0)); };
    CHECK_THROWS_AS(ad::grad_check(nan, params, 1e-4), ad::GradCheckError);
}

TEST_CASE("gradients are deterministic", "[autodiff]") {
    auto run = [] {
        std::mt19937_64 rng(7);
        ad::Parameter a("a", random_matrix(8, 8, rng));
        ad::Parameter b("b", random_matrix(8, 8, rng));
        ad::Tape t;
        ad::Var y = ad::softmax_rows(ad::matmul(t.parameter(a), t.parameter(b)));
        t.backward(ad::mean(ad::gelu(y)));
        return std::pair{a.grad, b.grad};
    };
    const auto r1 = run();
    const auto r2 = run();
    CHECK(r1.first == r2.first);
    CHECK(r1.second == r2.second);
}

TEST_CASE("grad check reports one group per trainable parameter", "[autodiff]") {
    std::mt19937_64 rng(8);
    ad::Parameter a("a", random_matrix(10, 10, rng));
    ad::Parameter b("b", random_matrix(1, 10, rng), false);
    auto build = [&](ad::Tape& t) { return ad::sum(ad::mul_channels(ad::exp(t.parameter(a)), t.parameter(b))); };
    std::vector<ad::Parameter*> params{&a, &b};
    const ad::GradCheckReport r = ad::grad_check(build, params, 1e-5, 3);
    REQUIRE(r.groups.size() == 1);
    CHECK(r.groups[0].name == "a");
    CHECK(r.groups[0].coords_checked == 64);
    CHECK(r.max_rel_err() < 1e-5);
}
