// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "moppa/autodiff.hpp"
#include "moppa/model.hpp"
#include "moppa/routing.hpp"

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace moppa {

struct AdamWConfig {
    double lr = 0.002;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct NonFiniteGradient : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Adam with decoupled weight decay. Decay only touches parameters flagged
/// `decay` (filters and low-rank factors, not router logits or times).
class AdamW {
public:
    AdamW(std::vector<ad::Parameter*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (auto* p : params_) {
            m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        }
    }

    void step(double lr_scale = 1.0) {
        for (auto* p : params_) {
            if (!p->grad.allFinite()) throw NonFiniteGradient("non-finite gradient in '" + p->name + "'");
        }
        ++step_;
        const double lr = cfg_.lr * lr_scale;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            ad::Parameter& p = *params_[i];
            if (!p.trainable) continue;
            if (p.decay && cfg_.weight_decay != 0.0) p.value *= (1.0 - lr * cfg_.weight_decay);
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p.grad;
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * p.grad.cwiseAbs2();
            p.value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + cfg_.eps);
        }
    }

    long step_count() const noexcept { return step_; }
    const AdamWConfig& config() const noexcept { return cfg_; }

private:
    std::vector<ad::Parameter*> params_;
    AdamWConfig cfg_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    long step_ = 0;
};

/// Fixed input/target pair, both Uniform(0, 1), drawn from independent streams.
struct RegressionTask {
    SpatialTensor input;
    SpatialTensor target;
    std::uint64_t seed = 0;

    static RegressionTask make(Index width, Index height, Index channels, std::uint64_t seed) {
        RegressionTask t{SpatialTensor(width, height, channels), SpatialTensor(width, height, channels), seed};
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::mt19937_64 in_rng(seed * 2 + 1);
        std::mt19937_64 tgt_rng(seed * 2 + 2);
        Matrix& x = t.input.tokens();
        Matrix& y = t.target.tokens();
        for (Index i = 0; i < x.size(); ++i) x.data()[i] = u(in_rng);
        for (Index i = 0; i < y.size(); ++i) y.data()[i] = u(tgt_rng);
        return t;
    }
};

struct TrainConfig {
    ModelConfig model;
    double w = 0.1;
    long iterations = 5000;
    double lr = 0.002;
    double weight_decay = 0.0;
    long metric_every = 100;
    long warmup = 0;
    std::uint64_t seed = 1;  // task and adapter initialization
    std::string variant = "full";

    void validate() const {
        model.validate();
        if (iterations < 0) throw ConfigError("iterations must be >= 0");
        if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
        if (!(w >= 0.0)) throw ConfigError("regularization coefficient w must be >= 0");
        if (metric_every < 1) throw ConfigError("metric cadence must be >= 1");
        if (warmup < 0) throw ConfigError("warmup must be >= 0");
    }
};

struct MetricPoint {
    long iteration = 0;
    double mse = 0.0;
    double loss = 0.0;
    double reg_term = 0.0;  // schedule_weight * mean L_reg, exactly what was added to the loss
};

struct RunMetrics {
    std::uint64_t seed = 0;
    AdapterKind adapter = AdapterKind::none;
    std::string variant;
    long iterations = 0;
    double initial_mse = 0.0;
    double final_mse = 0.0;
    Index param_count = 0;
    Index lora_rank = 0;
    std::uint64_t frozen_checksum_before = 0;
    std::uint64_t frozen_checksum_after = 0;
    std::vector<MetricPoint> history;
};

struct DivergenceError : std::runtime_error {
    DivergenceError(const std::string& what, std::vector<MetricPoint> h)
        : std::runtime_error(what), history(std::move(h)) {}
    std::vector<MetricPoint> history;
};

inline constexpr double kDivergenceMse = 1e3;

/// The training objective as separate terms whose entries sum to the loss:
/// per-element squared errors / n, then the weighted mean route regularization.
inline std::vector<ad::Var> regression_loss_terms(Model& model, ad::Tape& tape, const RegressionTask& task,
                                                  double reg_weight) {
    ForwardResult fr = model.forward(tape, tape.constant(task.input.tokens()));
    ad::Var diff = ad::sub(fr.out, tape.constant(task.target.tokens()));
    const double n = static_cast<double>(task.target.tokens().size());
    std::vector<ad::Var> terms{ad::scale(ad::mul(diff, diff), 1.0 / n)};
    if (reg_weight > 0.0) {
        ad::Var reg = Model::regularization(fr);
        if (reg.valid()) terms.push_back(ad::scale(reg, reg_weight));
    }
    return terms;
}

/// Trains only the adapter of `model` to map task.input to task.target under
/// MSE plus the scheduled route regularization. The model is updated in place.
inline RunMetrics train_adapter(Model& model, const RegressionTask& task, const TrainConfig& cfg) {
    cfg.validate();
    RunMetrics r;
    r.seed = cfg.seed;
    r.adapter = model.config().adapter;
    r.variant = cfg.variant;
    r.iterations = cfg.iterations;
    r.param_count = model.trainable_count();
    r.lora_rank = model.lora_rank();
    r.frozen_checksum_before = model.frozen_checksum();

    const ScheduleConfig schedule{cfg.w, std::max<long>(cfg.iterations, 1)};
    auto params = model.trainable_parameters();
    AdamW opt(params, AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

    auto record = [&](long it, double mse, double loss, double reg_term) {
        r.history.push_back(MetricPoint{it, mse, loss, reg_term});
    };

    for (long it = 0; it < cfg.iterations; ++it) {
        for (auto* p : params) p->zero_grad();
        ad::Tape tape;
        ForwardResult fr = model.forward(tape, tape.constant(task.input.tokens()));
        ad::Var mse = ad::mse(fr.out, tape.constant(task.target.tokens()));
        ad::Var loss = mse;
        double reg_term = 0.0;
        const double weight = schedule_weight(static_cast<double>(it), schedule);
        if (weight > 0.0) {
            ad::Var reg = Model::regularization(fr);
            if (reg.valid()) {
                loss = ad::add(mse, ad::scale(reg, weight));
                reg_term = weight * reg.scalar();
            }
        }
        const double mse_v = mse.scalar();
        if (it == 0) r.initial_mse = mse_v;
        if (it % cfg.metric_every == 0) record(it, mse_v, loss.scalar(), reg_term);
        if (!std::isfinite(mse_v) || mse_v > kDivergenceMse) {
            record(it, mse_v, loss.scalar(), reg_term);
            throw DivergenceError("training diverged at iteration " + std::to_string(it) +
                                      " (mse = " + std::to_string(mse_v) + ")",
                                  r.history);
        }
        if (params.empty()) continue;
        tape.backward(loss);
        const double lr_scale =
            cfg.warmup > 0 ? std::min(1.0, static_cast<double>(it + 1) / static_cast<double>(cfg.warmup)) : 1.0;
        opt.step(lr_scale);
    }

    const SpatialTensor out = model.forward(task.input);
    r.final_mse = (out.tokens() - task.target.tokens()).squaredNorm() / static_cast<double>(out.tokens().size());
    if (cfg.iterations == 0) r.initial_mse = r.final_mse;
    record(cfg.iterations, r.final_mse, r.final_mse, 0.0);
    r.frozen_checksum_after = model.frozen_checksum();
    return r;
}

inline ModelConfig run_model_config(const TrainConfig& cfg) {
    ModelConfig m = cfg.model;
    m.adapter_seed = cfg.seed;
    return m;
}

inline RunMetrics run_regression(const TrainConfig& cfg) {
    cfg.validate();
    Model model(run_model_config(cfg));
    const auto task = RegressionTask::make(cfg.model.width, cfg.model.height, cfg.model.channels, cfg.seed);
    return train_adapter(model, task, cfg);
}

enum class RemovedPrior { none, heat, wave, poisson, all };

inline const char* variant_name(RemovedPrior r) {
    switch (r) {
        case RemovedPrior::none: return "full";
        case RemovedPrior::heat: return "no_heat";
        case RemovedPrior::wave: return "no_wave";
        case RemovedPrior::poisson: return "no_poisson";
        case RemovedPrior::all: return "no_adapter";
    }
    return "?";
}

/// Configuration for MoPPA with one path excised (the router renormalizes over
/// the rest), or with no adapter at all for RemovedPrior::all.
inline TrainConfig ablation_config(TrainConfig cfg, RemovedPrior removed) {
    cfg.variant = variant_name(removed);
    cfg.model.active = kAllPaths;
    if (removed == RemovedPrior::all) {
        cfg.model.adapter = AdapterKind::none;
    } else {
        cfg.model.adapter = AdapterKind::moppa;
        if (removed != RemovedPrior::none) cfg.model.active[static_cast<int>(removed) - 1] = false;
    }
    return cfg;
}

inline RunMetrics run_ablation(const TrainConfig& cfg, RemovedPrior removed) {
    return run_regression(ablation_config(cfg, removed));
}

}  // namespace moppa
