// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

// The work behind each command-line subcommand. Every command writes its CSV
// report(s) into an output directory and returns the process exit status:
// 0 success, 1 check failure. Configuration problems surface as ConfigError
// (status 2 at the command line).

#pragma once

#include "moppa/experiment.hpp"
#include "moppa/training.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>

namespace moppa {

inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;
inline constexpr int kExitConfig = 2;

inline constexpr double kGradCheckEps = 1e-4;
inline constexpr double kGradCheckTolerance = 1e-5;

// ---- CSV -----------------------------------------------------------------------------

/// Shortest decimal form that reads back to the same double, independent of locale.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

/// Comma-separated rows with LF line endings.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : path_(path) {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        out_.open(path, std::ios::binary | std::ios::trunc);
        if (!out_) throw ConfigError("cannot write '" + path.string() + "'");
        row(header);
    }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
    }

    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

// ---- threading -----------------------------------------------------------------------

/// Thread count from MOPPA_THREADS, defaulting to 1.
inline int default_threads() {
    const char* env = std::getenv("MOPPA_THREADS");
    if (env == nullptr || *env == '\0') return 1;
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*end != '\0' || n < 1) throw ConfigError("MOPPA_THREADS must be a positive integer");
    return static_cast<int>(n);
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Each call must only
/// touch its own state; results are collected by index so output order never
/// depends on scheduling.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(threads, 1)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::mutex mu;
    std::size_t next = 0;
    std::exception_ptr error;
    auto work = [&] {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard lock(mu);
                if (next >= n || error) return;
                i = next++;
            }
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!error) error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// ---- properties ----------------------------------------------------------------------

struct PropertyCheck {
    std::string name;
    std::string group;  // spectral, operators, pde, routing
    double max_error = 0.0;
    double tolerance = 0.0;
    bool strict = false;  // pass needs max_error < tolerance rather than <=
    bool passed = false;
    std::string note;
};

namespace detail {

inline Matrix uniform_matrix(Index rows, Index cols, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

inline double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

inline MoppaUnitParams random_unit(const HeadLayout& l, double eta, std::mt19937_64& rng) {
    MoppaUnitParams u;
    u.layout = l;
    u.heat = HeatParams{uniform_matrix(l.tokens, l.heads, rng, 0.0, 0.5), uniform_matrix(1, l.channels, rng, 0.0, 2.0)};
    u.wave = WaveParams{uniform_matrix(l.tokens, l.heads, rng, -1.0, 1.0), uniform_matrix(1, l.channels, rng, 0.0, 2.0)};
    u.poisson = PoissonParams{uniform_matrix(l.tokens, l.heads, rng, -0.1, 0.1),
                              uniform_matrix(1, l.head_dim(), rng, -1.0, 1.0), eta};
    std::uniform_real_distribution<double> lam(-2.0, 2.0);
    for (double& x : u.router.lambda) x = lam(rng);
    return u;
}

inline double naive_dct(const SpatialTensor& x, Index p, Index q, Index ch) {
    const auto s = [](Index k, Index n) { return k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n); };
    double acc = 0.0;
    for (Index y = 0; y < x.height(); ++y)
        for (Index xx = 0; xx < x.width(); ++xx)
            acc += x(xx, y, ch) * std::cos(std::numbers::pi * (2 * xx + 1) * p / (2.0 * x.width())) *
                   std::cos(std::numbers::pi * (2 * y + 1) * q / (2.0 * x.height()));
    return s(p, x.width()) * s(q, x.height()) * acc;
}

}  // namespace detail

/// Invariant suite over the spectral, operator, PDE and routing layers.
/// `eta` is the Poisson offset used by every Poisson-dependent check.
inline std::vector<PropertyCheck> run_property_suite(double eta = kDefaultEta, std::uint64_t seed = 2024) {
    std::vector<PropertyCheck> out;
    std::mt19937_64 rng(seed);
    auto add = [&](std::string name, std::string group, double tol, bool strict, const std::function<double()>& body) {
        PropertyCheck c{std::move(name), std::move(group), 0.0, tol, strict, false, {}};
        try {
            c.max_error = body();
            c.passed = std::isfinite(c.max_error) && (strict ? c.max_error < tol : c.max_error <= tol);
        } catch (const std::exception& e) {
            c.max_error = std::numeric_limits<double>::quiet_NaN();
            c.note = e.what();
        }
        out.push_back(std::move(c));
    };
    auto tensor = [&](Index w, Index h, Index c) {
        return SpatialTensor(w, h, detail::uniform_matrix(w * h, c, rng, -1.0, 1.0));
    };

    // spectral
    add("dct_roundtrip", "spectral", 1e-10, false, [&] {
        double e = 0.0;
        for (Index n : {4, 8, 14})
            for (Index c : {1, 8, 96}) {
                const SpatialTensor x = tensor(n, n, c);
                e = std::max(e, detail::max_abs(idct2d(dct2d(x)).tokens() - x.tokens()));
            }
        return e;
    });
    add("dct_parseval", "spectral", 1e-10, false, [&] {
        double e = 0.0;
        for (Index n : {4, 8, 14})
            for (Index c : {1, 8, 96}) {
                const SpatialTensor x = tensor(n, n, c);
                e = std::max(e, std::abs(dct2d(x).tokens().norm() - x.tokens().norm()));
            }
        return e;
    });
    add("dct_naive_oracle", "spectral", 1e-10, false, [&] {
        double e = 0.0;
        for (Index n : {4, 8, 14}) {
            const SpatialTensor x = tensor(n, n, 4);
            const FrequencyTensor f = dct2d(x);
            for (Index c = 0; c < 4; ++c)
                for (Index q = 0; q < n; ++q)
                    for (Index p = 0; p < n; ++p) e = std::max(e, std::abs(f(p, q, c) - detail::naive_dct(x, p, q, c)));
        }
        return e;
    });
    add("laplacian_eigenrelation", "spectral", 1e-12, false, [&] {
        double e = 0.0;
        for (Index w = 1; w <= 8; ++w)
            for (Index h = 1; h <= 8; ++h) {
                const FrequencyGrid g = frequency_grid(w, h);
                for (Index q = 0; q < h; ++q)
                    for (Index p = 0; p < w; ++p) {
                        const SpatialTensor phi = basis_function(w, h, p, q);
                        e = std::max(e, detail::max_abs(spectral_laplacian(phi, g).tokens() + g.sq(p, q) * phi.tokens()));
                    }
            }
        return e;
    });

    // operators
    add("identity_at_t0", "operators", 1e-12, false, [&] {
        double e = 0.0;
        for (Index n : {4, 8, 14}) {
            const FrequencyGrid g = frequency_grid(n, n);
            const SpatialTensor x = tensor(n, n, 16);
            const HeatParams hp{detail::uniform_matrix(n * n, 4, rng, 0.0, 1.0), RowVector::Zero(16)};
            const WaveParams wp{detail::uniform_matrix(n * n, 4, rng, -1.0, 1.0), RowVector::Zero(16)};
            e = std::max(e, detail::max_abs(heat_apply(x, hp, g).tokens() - x.tokens()));
            e = std::max(e, detail::max_abs(wave_apply(x, wp, g).tokens() - x.tokens()));
        }
        return e;
    });
    add("heat_semigroup", "operators", 1e-10, false, [&] {
        double e = 0.0;
        for (Index n : {4, 8, 14}) {
            const FrequencyGrid g = frequency_grid(n, n);
            const SpatialTensor x = tensor(n, n, 16);
            const Matrix k = detail::uniform_matrix(n * n, 4, rng, 0.0, 0.5);
            const RowVector t1 = detail::uniform_matrix(1, 16, rng, 0.0, 1.0);
            const RowVector t2 = detail::uniform_matrix(1, 16, rng, 0.0, 1.0);
            const SpatialTensor a = heat_apply(x, HeatParams{k, t1 + t2}, g);
            const SpatialTensor b = heat_apply(heat_apply(x, HeatParams{k, t1}, g), HeatParams{k, t2}, g);
            e = std::max(e, detail::max_abs(a.tokens() - b.tokens()));
        }
        return e;
    });
    add("mean_preservation", "operators", 1e-12, false, [&] {
        double e = 0.0;
        for (Index n : {4, 8, 14}) {
            const FrequencyGrid g = frequency_grid(n, n);
            const SpatialTensor x = tensor(n, n, 16);
            const RowVector mean = x.tokens().colwise().mean();
            const HeatParams hp{detail::uniform_matrix(n * n, 4, rng, 0.0, 1.0), detail::uniform_matrix(1, 16, rng, 0.0, 2.0)};
            const WaveParams wp{detail::uniform_matrix(n * n, 4, rng, -1.0, 1.0), detail::uniform_matrix(1, 16, rng, 0.0, 2.0)};
            e = std::max(e, detail::max_abs(heat_apply(x, hp, g).tokens().colwise().mean() - mean));
            e = std::max(e, detail::max_abs(wave_apply(x, wp, g).tokens().colwise().mean() - mean));
        }
        return e;
    });
    add("poisson_input_independence", "operators", 0.0, false, [&] {
        double e = 0.0;
        for (Index n : {4, 8, 14}) {
            const HeadLayout l = HeadLayout::make(n * n, 16, 4);
            const FrequencyGrid g = frequency_grid(n, n);
            MoppaUnitParams u = detail::random_unit(l, eta, rng);
            u.router.active = {false, false, true};
            const Matrix a = moppa_forward(tensor(n, n, 16), u, g).tokens();
            const Matrix b = moppa_forward(tensor(n, n, 16), u, g).tokens();
            if (detail::max_abs(a) == 0.0) throw ParameterError("poisson field is identically zero");
            e = std::max(e, detail::max_abs(a - b));
        }
        return e;
    });
    add("fusion_identity", "operators", 1e-12, false, [&] {
        const std::array<std::array<Index, 4>, 5> shapes{
            {{8, 8, 16, 4}, {4, 4, 8, 2}, {14, 14, 12, 3}, {5, 7, 6, 6}, {3, 9, 4, 1}}};
        double e = 0.0;
        for (int draw = 0; draw < 100; ++draw) {
            const auto& s = shapes[static_cast<std::size_t>(draw) % shapes.size()];
            const HeadLayout l = HeadLayout::make(s[0] * s[1], s[2], s[3]);
            const FrequencyGrid g = frequency_grid(s[0], s[1]);
            const MoppaUnitParams u = detail::random_unit(l, eta, rng);
            const SpatialTensor x = tensor(s[0], s[1], s[2]);
            e = std::max(e, detail::max_abs(moppa_forward(x, u, g).tokens() - moppa_forward_unfused(x, u, g).tokens()));
        }
        return e;
    });

    // pde
    add("pde_heat", "pde", 1e-4, true, [&] {
        double e = 0.0;
        for (Index n = 4; n <= 14; n += 2) e = std::max(e, pde_residual_heat(0.5, 1.0, tensor(n, n, 1), frequency_grid(n, n), 1e-5));
        return e;
    });
    add("pde_wave", "pde", 1e-3, true, [&] {
        double e = 0.0;
        for (Index n = 4; n <= 14; n += 2) e = std::max(e, pde_residual_wave(1.0, 0.7, tensor(n, n, 1), frequency_grid(n, n), 1e-4));
        return e;
    });
    add("pde_poisson_ratio", "pde", 0.01, false, [&] {
        double e = 0.0;
        for (Index n = 4; n <= 14; n += 2) {
            const HeadLayout l = HeadLayout::make(n * n, 8, 2);
            const PoissonParams p{detail::uniform_matrix(n * n, 2, rng, -1.0, 1.0), detail::uniform_matrix(1, 4, rng, -1.0, 1.0), eta};
            const PoissonResidual r = pde_residual_poisson(p, frequency_grid(n, n), l);
            if (r.checked == 0) throw ParameterError("no frequency satisfies w^2 >= 100 eta");
            e = std::max(e, r.ratio);
        }
        return e;
    });

    // routing
    add("route_reg_uniform", "routing", 1e-12, false, [&] {
        const std::array<double, 3> a{1.0 / 3, 1.0 / 3, 1.0 / 3};
        return std::abs(route_regularization(a) + std::log(3.0));
    });
    add("route_reg_onehot", "routing", 0.0, false, [&] {
        double e = 0.0;
        for (int i = 0; i < 3; ++i) {
            std::array<double, 3> a{0.0, 0.0, 0.0};
            a[static_cast<std::size_t>(i)] = 1.0;
            e = std::max(e, std::abs(route_regularization(a)));
        }
        return e;
    });
    add("route_reg_simplex_bounds", "routing", 1e-12, false, [&] {
        // distance outside [-log 3, 0] anywhere on a 0.05-step simplex grid
        double e = 0.0;
        for (int i = 0; i <= 20; ++i)
            for (int j = 0; i + j <= 20; ++j) {
                const std::array<double, 3> a{i * 0.05, j * 0.05, (20 - i - j) * 0.05};
                const double v = route_regularization(a);
                e = std::max({e, -std::log(3.0) - v, v});
            }
        return e;
    });
    add("route_gradient_flattens", "routing", 0.0, true, [&] {
        // largest change in max(alpha) after one descent step on w L_reg; must be negative
        std::normal_distribution<double> n(0.0, 1.0);
        double worst = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < 50; ++i) {
            ad::Parameter lambda("lambda", Matrix(1, 3));
            for (Index k = 0; k < 3; ++k) lambda.value(0, k) = n(rng);
            ad::Tape tape;
            ad::Var alpha = route_weights(tape.parameter(lambda), kAllPaths);
            const double before = alpha.value().maxCoeff();
            tape.backward(ad::scale(route_regularization(alpha), 0.1));
            lambda.value -= 1e-2 * lambda.grad;
            RouterState r;
            for (int k = 0; k < 3; ++k) r.lambda[static_cast<std::size_t>(k)] = lambda.value(0, k);
            const auto after = route_weights(r);
            worst = std::max(worst, *std::max_element(after.begin(), after.end()) - before);
        }
        return worst;
    });
    add("schedule_endpoints", "routing", 0.0, false, [&] {
        const ScheduleConfig cfg{0.1, 5000};
        double e = std::abs(schedule_weight(0.0, cfg) - 0.1);
        for (long t = 2500; t <= 5000; t += 50) e = std::max(e, std::abs(schedule_weight(static_cast<double>(t), cfg)));
        return e;
    });
    add("route_shift_invariance", "routing", 1e-12, false, [&] {
        std::uniform_real_distribution<double> u(-5.0, 5.0);
        double e = 0.0;
        for (int i = 0; i < 100; ++i) {
            RouterState a;
            for (double& l : a.lambda) l = u(rng);
            RouterState b = a;
            const double c = 20.0 * u(rng);
            for (double& l : b.lambda) l += c;
            const auto wa = route_weights(a);
            const auto wb = route_weights(b);
            for (int k = 0; k < 3; ++k) e = std::max(e, std::abs(wa[static_cast<std::size_t>(k)] - wb[static_cast<std::size_t>(k)]));
        }
        return e;
    });
    return out;
}

inline std::string format_scientific(double v) {
    if (!std::isfinite(v)) return format_double(v);
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::scientific, 1);
    return std::string(buf, res.ptr);
}

inline int cmd_properties(const std::filesystem::path& out_dir, double eta = kDefaultEta) {
    const auto checks = run_property_suite(eta);
    CsvWriter csv(out_dir / "properties.csv", {"name", "max_error", "tolerance", "pass"});
    bool ok = true;
    for (const auto& c : checks) {
        csv.row({c.name, format_scientific(c.max_error), format_scientific(c.tolerance), c.passed ? "pass" : "fail"});
        ok = ok && c.passed;
    }
    return ok ? kExitOk : kExitCheckFailed;
}

// ---- gradcheck ---------------------------------------------------------------------

struct GradCheckRow {
    std::string adapter;
    ad::GradCheckGroup group;
};

/// Checks every trainable group of each configured adapter through the full
/// model and the scheduled loss at its first iteration (regularization active).
inline std::vector<GradCheckRow> run_gradcheck(const ExperimentConfig& cfg, double eps = kGradCheckEps) {
    std::vector<GradCheckRow> rows;
    const std::uint64_t seed = cfg.seeds.front();
    for (AdapterKind kind : cfg.adapter_kinds()) {
        const TrainConfig tc = cfg.train_config(kind, seed);
        Model model(run_model_config(tc));
        const auto task = RegressionTask::make(tc.model.width, tc.model.height, tc.model.channels, seed);
        const double weight = schedule_weight(0.0, ScheduleConfig{tc.w, tc.iterations});
        auto build = [&](ad::Tape& t) { return regression_loss_terms(model, t, task, weight); };
        auto params = model.trainable_parameters();
        // A zero-initialized LoRA up-projection zeroes the gradient of its
        // down-projection, which would pass vacuously.
        std::mt19937_64 rng(seed ^ 0xA5A5A5A5ULL);
        std::normal_distribution<double> nrm(0.0, 0.02);
        for (auto* p : params)
            if (p->value.isZero(0.0))
                for (Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = nrm(rng);
        const ad::GradCheckReport r = ad::grad_check_terms(build, params, eps, seed);
        for (const auto& g : r.groups) rows.push_back({adapter_name(kind), g});
    }
    return rows;
}

inline int cmd_gradcheck(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
    const auto rows = run_gradcheck(cfg);
    CsvWriter csv(out_dir / "gradcheck.csv", {"param", "max_rel_err", "coords", "tolerance", "pass"});
    bool ok = true;
    for (const auto& r : rows) {
        const bool pass = r.group.max_rel_err < kGradCheckTolerance;
        csv.row({r.group.name, format_scientific(r.group.max_rel_err), std::to_string(r.group.coords_checked),
                 format_scientific(kGradCheckTolerance), pass ? "pass" : "fail"});
        ok = ok && pass;
    }
    return ok ? kExitOk : kExitCheckFailed;
}

// ---- regression and ablation --------------------------------------------------------

struct RunOutcome {
    RunMetrics metrics;
    bool diverged = false;
    std::string error;
};

struct ArmSummary {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation
    std::size_t count = 0;
};

inline ArmSummary summarize(const std::vector<double>& v) {
    ArmSummary s;
    s.count = v.size();
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double acc = 0.0;
        for (double x : v) acc += (x - s.mean) * (x - s.mean);
        s.std = std::sqrt(acc / static_cast<double>(v.size() - 1));
    }
    return s;
}

/// One training run; divergence is captured rather than propagated. When
/// `checkpoint` is set the trained adapters are saved there.
inline RunOutcome train_one(const TrainConfig& tc, const std::optional<std::filesystem::path>& checkpoint = {}) {
    RunOutcome o;
    Model model(run_model_config(tc));
    const auto task = RegressionTask::make(tc.model.width, tc.model.height, tc.model.channels, tc.seed);
    try {
        o.metrics = train_adapter(model, task, tc);
    } catch (const DivergenceError& e) {
        o.diverged = true;
        o.error = e.what();
        o.metrics.seed = tc.seed;
        o.metrics.adapter = tc.model.adapter;
        o.metrics.variant = tc.variant;
        o.metrics.iterations = tc.iterations;
        o.metrics.history = e.history;
        o.metrics.final_mse = e.history.empty() ? std::numeric_limits<double>::quiet_NaN() : e.history.back().mse;
        o.metrics.param_count = model.trainable_count();
    } catch (const NonFiniteGradient& e) {
        o.diverged = true;
        o.error = e.what();
        o.metrics.seed = tc.seed;
        o.metrics.adapter = tc.model.adapter;
        o.metrics.iterations = tc.iterations;
        o.metrics.final_mse = std::numeric_limits<double>::quiet_NaN();
        o.metrics.param_count = model.trainable_count();
    }
    if (checkpoint && !o.diverged) {
        std::filesystem::create_directories(checkpoint->parent_path());
        Checkpoint ck = model.to_checkpoint();
        ck.meta["seed"] = std::to_string(tc.seed);
        ck.meta["iterations"] = std::to_string(tc.iterations);
        save_checkpoint(checkpoint->string(), ck);
    }
    return o;
}

struct RegressResult {
    std::vector<RunOutcome> moppa;  // by seed
    std::vector<RunOutcome> lora;

    static std::vector<double> finals(const std::vector<RunOutcome>& runs) {
        std::vector<double> v;
        for (const auto& r : runs)
            if (!r.diverged) v.push_back(r.metrics.final_mse);
        return v;
    }
};

inline RegressResult run_regress(const ExperimentConfig& cfg, int threads,
                                 const std::optional<std::filesystem::path>& checkpoint_dir = {}) {
    struct Job {
        AdapterKind kind;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (AdapterKind kind : {AdapterKind::moppa, AdapterKind::lora})
        for (std::uint64_t s : cfg.seeds) jobs.push_back({kind, s});
    std::vector<RunOutcome> out(jobs.size());
    parallel_for(jobs.size(), threads, [&](std::size_t i) {
        std::optional<std::filesystem::path> ck;
        if (checkpoint_dir) {
            ck = *checkpoint_dir / (std::string(adapter_name(jobs[i].kind)) + "_seed" + std::to_string(jobs[i].seed) + ".ckpt");
        }
        out[i] = train_one(cfg.train_config(jobs[i].kind, jobs[i].seed), ck);
    });
    RegressResult r;
    const std::size_t n = cfg.seeds.size();
    r.moppa.assign(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(n));
    r.lora.assign(out.begin() + static_cast<std::ptrdiff_t>(n), out.end());
    return r;
}

inline void write_history(CsvWriter& csv, const RunMetrics& m, const std::string& label) {
    for (const auto& h : m.history) {
        csv.row({std::to_string(m.seed), label, std::to_string(h.iteration), format_double(h.mse), format_double(h.loss),
                 format_double(h.reg_term)});
    }
}

inline int cmd_regress(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, int threads) {
    const RegressResult r = run_regress(cfg, threads, out_dir / "checkpoints");
    CsvWriter csv(out_dir / "regress.csv",
                  {"seed", "adapter", "iterations", "final_mse", "final_mse_std", "param_count", "status"});
    CsvWriter hist(out_dir / "regress_history.csv", {"seed", "adapter", "iteration", "mse", "loss", "reg_term"});
    for (const auto* arm : {&r.moppa, &r.lora}) {
        for (const auto& o : *arm) {
            const auto& m = o.metrics;
            csv.row({std::to_string(m.seed), adapter_name(m.adapter), std::to_string(m.iterations),
                     format_double(m.final_mse), "", std::to_string(m.param_count), o.diverged ? "diverged" : "ok"});
            write_history(hist, m, adapter_name(m.adapter));
        }
    }
    for (const auto* arm : {&r.moppa, &r.lora}) {
        const ArmSummary s = summarize(RegressResult::finals(*arm));
        const auto& first = arm->front().metrics;
        csv.row({"summary", adapter_name(first.adapter), std::to_string(cfg.iterations), format_double(s.mean),
                 format_double(s.std), std::to_string(first.param_count),
                 s.count == arm->size() ? "ok" : std::to_string(s.count) + "/" + std::to_string(arm->size()) + " ok"});
    }
    return kExitOk;
}

struct AblationCell {
    double w = 0.0;
    RemovedPrior removed = RemovedPrior::none;
    RunOutcome outcome;
};

inline constexpr std::array<RemovedPrior, 5> kAblationVariants{RemovedPrior::none, RemovedPrior::heat, RemovedPrior::wave,
                                                               RemovedPrior::poisson, RemovedPrior::all};

/// {full, no_heat, no_wave, no_poisson, no_adapter} x `weights` x seeds, in that nesting order.
inline std::vector<AblationCell> run_ablate(const ExperimentConfig& cfg, int threads, const std::vector<double>& weights,
                                            const std::vector<RemovedPrior>& variants = {kAblationVariants.begin(),
                                                                                         kAblationVariants.end()}) {
    std::vector<AblationCell> cells;
    for (double w : weights)
        for (RemovedPrior v : variants)
            for (std::uint64_t s : cfg.seeds) {
                AblationCell c;
                c.w = w;
                c.removed = v;
                c.outcome.metrics.seed = s;
                cells.push_back(c);
            }
    parallel_for(cells.size(), threads, [&](std::size_t i) {
        TrainConfig tc = cfg.train_config(AdapterKind::moppa, cells[i].outcome.metrics.seed);
        tc.w = cells[i].w;
        tc = ablation_config(tc, cells[i].removed);
        cells[i].outcome = train_one(tc);
        cells[i].outcome.metrics.variant = tc.variant;
    });
    return cells;
}

inline int cmd_ablate(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, int threads) {
    std::vector<double> weights{cfg.w};
    if (cfg.w != 0.0) weights.push_back(0.0);
    const auto cells = run_ablate(cfg, threads, weights);
    CsvWriter csv(out_dir / "ablate.csv", {"w", "variant", "seed", "iterations", "final_mse", "param_count", "status"});
    for (const auto& c : cells) {
        const auto& m = c.outcome.metrics;
        csv.row({format_double(c.w), m.variant, std::to_string(m.seed), std::to_string(m.iterations),
                 format_double(m.final_mse), std::to_string(m.param_count), c.outcome.diverged ? "diverged" : "ok"});
    }

    CsvWriter sum(out_dir / "ablate_summary.csv",
                  {"w", "variant", "mean_final_mse", "std_final_mse", "runs", "seeds_full_not_worse"});
    const std::size_t n = cfg.seeds.size();
    for (std::size_t wi = 0; wi < weights.size(); ++wi) {
        const std::size_t base = wi * kAblationVariants.size() * n;
        for (std::size_t vi = 0; vi < kAblationVariants.size(); ++vi) {
            std::vector<double> finals;
            std::size_t full_wins = 0;
            for (std::size_t s = 0; s < n; ++s) {
                const auto& cell = cells[base + vi * n + s].outcome;
                const auto& full = cells[base + s].outcome;
                if (!cell.diverged) finals.push_back(cell.metrics.final_mse);
                if (!cell.diverged && !full.diverged && full.metrics.final_mse <= cell.metrics.final_mse) ++full_wins;
            }
            const ArmSummary s = summarize(finals);
            sum.row({format_double(weights[wi]), variant_name(kAblationVariants[vi]), format_double(s.mean),
                     format_double(s.std), std::to_string(s.count), std::to_string(full_wins)});
        }
    }
    return kExitOk;
}

// ---- filter dump ---------------------------------------------------------------------

struct FilterRow {
    Index block = 0;
    Index head = 0;
    Index px = 0;  // omega_x index
    Index qy = 0;  // omega_y index
    double k = 0.0;
    double c = 0.0;
    double h1 = 0.0;
};

/// Rows (block, head, p, q) for every MoPPA unit in a checkpoint.
inline std::vector<FilterRow> filter_rows(const Checkpoint& ck) {
    if (ck.meta.count("adapter") == 0 || ck.meta.at("adapter") != "moppa") {
        throw CheckpointError("checkpoint does not hold MoPPA adapters");
    }
    const Index width = ck.meta_int("width");
    const Index height = ck.meta_int("height");
    const Index heads = ck.meta_int("heads");
    const Index depth = ck.meta_int("depth");
    if (width < 1 || height < 1 || heads < 1 || depth < 1) throw CheckpointError("checkpoint metadata out of range");
    std::vector<FilterRow> rows;
    for (Index b = 0; b < depth; ++b) {
        const std::string p = "block" + std::to_string(b) + ".moppa.";
        const Matrix& k = ck.tensor(p + "heat.k");
        const Matrix& c = ck.tensor(p + "wave.c");
        const Matrix& h1 = ck.tensor(p + "poisson.h1");
        for (const Matrix* m : {&k, &c, &h1}) {
            if (m->rows() != width * height || m->cols() != heads) {
                throw CheckpointError("tensor shape in block " + std::to_string(b) + " does not match metadata");
            }
        }
        for (Index n = 0; n < heads; ++n)
            for (Index q = 0; q < height; ++q)
                for (Index px = 0; px < width; ++px) {
                    const Index f = q * width + px;
                    rows.push_back(FilterRow{b, n, px, q, k(f, n), c(f, n), h1(f, n)});
                }
    }
    return rows;
}

inline int cmd_dump_filters(const Checkpoint& ck, const std::filesystem::path& out_dir) {
    CsvWriter csv(out_dir / "filters.csv", {"block", "head", "omega_x_index", "omega_y_index", "k", "c", "h1"});
    for (const auto& r : filter_rows(ck)) {
        csv.row({std::to_string(r.block), std::to_string(r.head), std::to_string(r.px), std::to_string(r.qy),
                 format_double(r.k), format_double(r.c), format_double(r.h1)});
    }
    return kExitOk;
}

/// Checkpoint of a freshly initialized MoPPA model for the configured layout.
inline Checkpoint initial_checkpoint(const ExperimentConfig& cfg) {
    Model model(run_model_config(cfg.train_config(AdapterKind::moppa, cfg.seeds.front())));
    Checkpoint ck = model.to_checkpoint();
    ck.meta["seed"] = std::to_string(cfg.seeds.front());
    ck.meta["iterations"] = "0";
    return ck;
}

}  // namespace moppa
