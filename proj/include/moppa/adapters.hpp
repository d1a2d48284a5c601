// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "moppa/autodiff.hpp"
#include "moppa/physics.hpp"
#include "moppa/routing.hpp"
#include "moppa/spectral.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace moppa {

// ---- parameter accounting -----------------------------------------------------

struct MoppaCount {
    Index unit = 0;           // every trainable scalar of one unit
    Index poisson_only = 0;   // L N + D / N
    Index dense_poisson = 0;  // L D, an unshared source distribution
};

/// k, t_heat, c, t_wave, h1, h2 and the three router logits.
inline MoppaCount moppa_param_count(const HeadLayout& layout) {
    const HeadLayout l = HeadLayout::make(layout.tokens, layout.channels, layout.heads);
    const Index LN = l.tokens * l.heads;
    MoppaCount out;
    out.poisson_only = LN + l.head_dim();
    out.dense_poisson = l.tokens * l.channels;
    out.unit = 2 * (LN + l.channels) + out.poisson_only + kPathCount;
    return out;
}

enum class Projection { query, key, value, output };

inline const char* projection_name(Projection p) {
    switch (p) {
        case Projection::query: return "q";
        case Projection::key: return "k";
        case Projection::value: return "v";
        case Projection::output: return "o";
    }
    return "?";
}

/// Which attention projections of every block carry a LoRA pair.
struct LoraPlacement {
    std::vector<Projection> projections{Projection::query, Projection::value};

    bool has(Projection p) const {
        for (Projection q : projections)
            if (q == p) return true;
        return false;
    }
};

inline Index lora_param_count(Index channels, Index rank, Index projections_per_block, Index depth) {
    return 2 * channels * rank * projections_per_block * depth;
}

struct BudgetReport {
    Index moppa_total = 0;
    Index lora_total = 0;
    Index rank = 0;
};

/// Largest LoRA rank whose trainable count does not exceed the MoPPA count of
/// the same model.
inline BudgetReport match_budget(const HeadLayout& layout, Index depth, const LoraPlacement& placement) {
    if (depth < 1) throw BudgetError("match_budget: depth must be >= 1");
    if (placement.projections.empty()) throw BudgetError("match_budget: LoRA placement is empty");
    BudgetReport r;
    r.moppa_total = moppa_param_count(layout).unit * depth;
    const auto n_proj = static_cast<Index>(placement.projections.size());
    for (Index rank = 1; rank < layout.channels; ++rank) {
        const Index c = lora_param_count(layout.channels, rank, n_proj, depth);
        if (c > r.moppa_total) break;
        r.rank = rank;
        r.lora_total = c;
    }
    if (r.rank == 0) {
        throw BudgetError("no LoRA rank >= 1 fits the MoPPA budget: MoPPA total " + std::to_string(r.moppa_total) +
                          ", LoRA at rank 1 needs " +
                          std::to_string(lora_param_count(layout.channels, 1, n_proj, depth)));
    }
    return r;
}

// ---- LoRA ---------------------------------------------------------------------

struct LoraParams {
    Matrix a;  // D x r
    Matrix b;  // r x D
    Index rank = 0;
    double scale = 1.0;
};

/// scale * (x a) b
inline Matrix lora_forward(const Matrix& x, const LoraParams& p) {
    const Index D = x.cols();
    if (p.rank > D) throw ConfigError("LoRA rank " + std::to_string(p.rank) + " exceeds channels " + std::to_string(D));
    require_shape(p.a, D, p.rank, "lora.a");
    require_shape(p.b, p.rank, D, "lora.b");
    return p.scale * ((x * p.a) * p.b);
}

class LoraAdapter {
public:
    LoraAdapter(const std::string& prefix, Index channels, Index rank, std::mt19937_64& rng) : rank_(rank) {
        if (rank < 1 || rank >= channels) {
            throw ConfigError("LoRA rank must be in [1, " + std::to_string(channels - 1) + "], got " +
                              std::to_string(rank));
        }
        std::normal_distribution<double> normal(0.0, 0.02);
        Matrix a(channels, rank);
        for (Index i = 0; i < a.size(); ++i) a.data()[i] = normal(rng);
        a_ = ad::Parameter(prefix + ".a", std::move(a));
        b_ = ad::Parameter(prefix + ".b", Matrix::Zero(rank, channels));
        scale_ = 1.0 / static_cast<double>(rank);
    }

    ad::Var delta(ad::Tape& tape, ad::Var x) {
        ad::Var xa = ad::matmul(x, tape.parameter(a_));
        return ad::scale(ad::matmul(xa, tape.parameter(b_)), scale_);
    }

    LoraParams snapshot() const { return LoraParams{a_.value, b_.value, rank_, scale_}; }

    std::vector<ad::Parameter*> parameters() { return {&a_, &b_}; }
    std::vector<const ad::Parameter*> parameters() const { return {&a_, &b_}; }

    Index rank() const noexcept { return rank_; }
    double scale() const noexcept { return scale_; }

private:
    ad::Parameter a_;
    ad::Parameter b_;
    Index rank_;
    double scale_ = 1.0;
};

// ---- MoPPA on the tape -------------------------------------------------------------

/// Grid-dependent constants shared by every unit of a model, laid out as L x D
/// so they combine elementwise with the channel spectra.
class SpectralContext {
public:
    SpectralContext(Index width, Index height, const HeadLayout& layout, double eta)
        : plan_(width, height), grid_(frequency_grid(width, height)), layout_(layout), eta_(eta) {
        if (!(eta > 0.0)) throw ParameterError("eta must be > 0");
        if (layout.tokens != width * height) throw DimensionError("layout token count does not match grid");
        const Index L = layout.tokens;
        const Index D = layout.channels;
        omega_sq_.resize(L, D);
        omega_abs_.resize(L, D);
        inv_denominator_.resize(L, D);
        for (Index f = 0; f < L; ++f) {
            omega_sq_.row(f).setConstant(grid_.omega_sq(f));
            omega_abs_.row(f).setConstant(grid_.omega_abs(f));
            inv_denominator_.row(f).setConstant(1.0 / (grid_.omega_sq(f) + eta));
        }
        for (Index d = 0; d < D; ++d) {
            head_index_.push_back(layout.head_of(d));
            within_index_.push_back(layout.within_head(d));
        }
    }

    const DctPlan& plan() const noexcept { return plan_; }
    const FrequencyGrid& grid() const noexcept { return grid_; }
    const HeadLayout& layout() const noexcept { return layout_; }
    double eta() const noexcept { return eta_; }
    const Matrix& omega_sq() const noexcept { return omega_sq_; }
    const Matrix& omega_abs() const noexcept { return omega_abs_; }
    const Matrix& inv_denominator() const noexcept { return inv_denominator_; }
    const std::vector<Index>& head_index() const noexcept { return head_index_; }
    const std::vector<Index>& within_index() const noexcept { return within_index_; }

private:
    DctPlan plan_;
    FrequencyGrid grid_;
    HeadLayout layout_;
    double eta_;
    Matrix omega_sq_;
    Matrix omega_abs_;
    Matrix inv_denominator_;
    std::vector<Index> head_index_;
    std::vector<Index> within_index_;
};

/// Router weights on the tape: softmax over the active logits only. The
/// result is 1 x (number of active paths), ordered heat, wave, poisson.
inline ad::Var route_weights(ad::Var lambda, const PathMask& active) {
    std::vector<Index> idx;
    for (int i = 0; i < kPathCount; ++i)
        if (active[i]) idx.push_back(i);
    if (idx.empty()) throw UsageError("route_weights: no active paths");
    return ad::softmax_rows(ad::gather_cols(lambda, std::move(idx)));
}

/// sum(alpha log alpha) on the tape; alpha comes from a softmax so it is strictly positive.
inline ad::Var route_regularization(ad::Var alpha) { return ad::sum(ad::mul(alpha, ad::log(alpha))); }

struct UnitOutput {
    ad::Var y;
    ad::Var alpha;  // active path weights
};

class MoppaAdapter {
public:
    MoppaAdapter(const std::string& prefix, const HeadLayout& layout, std::mt19937_64& rng,
                 PathMask active = kAllPaths, double eta = kDefaultEta)
        : layout_(HeadLayout::make(layout.tokens, layout.channels, layout.heads)), active_(active), eta_(eta) {
        if (!(eta > 0.0)) throw ParameterError("eta must be > 0");
        const Index L = layout_.tokens;
        const Index N = layout_.heads;
        const Index D = layout_.channels;
        std::uniform_real_distribution<double> uniform(0.0, 0.05);
        std::normal_distribution<double> normal(0.0, 0.01);
        auto fill = [](Matrix m, auto& dist, std::mt19937_64& g) {
            for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(g);
            return m;
        };
        k_ = ad::Parameter(prefix + ".heat.k", fill(Matrix(L, N), uniform, rng));
        t_heat_ = ad::Parameter(prefix + ".heat.t", Matrix::Ones(1, D), true, false);
        c_ = ad::Parameter(prefix + ".wave.c", fill(Matrix(L, N), uniform, rng));
        t_wave_ = ad::Parameter(prefix + ".wave.t", Matrix::Ones(1, D), true, false);
        h1_ = ad::Parameter(prefix + ".poisson.h1", fill(Matrix(L, N), normal, rng));
        h2_ = ad::Parameter(prefix + ".poisson.h2", fill(Matrix(1, layout_.head_dim()), normal, rng));
        lambda_ = ad::Parameter(prefix + ".router.lambda", Matrix::Zero(1, kPathCount), true, false);
        if (!active_[0]) k_.trainable = t_heat_.trainable = false;
        if (!active_[1]) c_.trainable = t_wave_.trainable = false;
        if (!active_[2]) h1_.trainable = h2_.trainable = false;
        if (!active_[0] && !active_[1] && !active_[2]) lambda_.trainable = false;
    }

    /// Fused unit on a token matrix z (L x D):
    ///   Y = C^T ( (C z) * (a1 Mheat + a2 Mwave) + a3 SD / (w^2 + eta) ),  C = 2D DCT.
    UnitOutput forward(ad::Tape& tape, ad::Var z, const SpectralContext& ctx) {
        if (ctx.layout().tokens != layout_.tokens || ctx.layout().channels != layout_.channels ||
            ctx.layout().heads != layout_.heads) {
            throw DimensionError("MoPPA unit layout does not match spectral context");
        }
        if (ctx.eta() != eta_) throw ParameterError("MoPPA unit eta does not match spectral context");
        ad::Var alpha = route_weights(tape.parameter(lambda_), active_);
        Index slot = 0;
        auto weight_of = [&](int path) { return active_[path] ? ad::select(alpha, 0, slot++) : ad::Var{}; };
        ad::Var a_heat = weight_of(0);
        ad::Var a_wave = weight_of(1);
        ad::Var a_poisson = weight_of(2);

        ad::Var filter;
        if (a_heat.valid()) {
            ad::Var k = ad::gather_cols(tape.parameter(k_), ctx.head_index());
            ad::Var e = ad::mul_channels(ad::mul(k, tape.constant(ctx.omega_sq())), tape.parameter(t_heat_));
            filter = ad::mul_scalar(ad::exp(ad::scale(e, -1.0)), a_heat);
        }
        if (a_wave.valid()) {
            ad::Var c = ad::gather_cols(tape.parameter(c_), ctx.head_index());
            ad::Var arg = ad::mul_channels(ad::mul(c, tape.constant(ctx.omega_abs())), tape.parameter(t_wave_));
            ad::Var w = ad::mul_scalar(ad::cos(arg), a_wave);
            filter = filter.valid() ? ad::add(filter, w) : w;
        }

        ad::Var spectrum;
        if (filter.valid()) {
            ad::Var coeffs = ad::left_transform(z, ctx.plan().operator_matrix());
            spectrum = ad::mul(coeffs, filter);
        }
        if (a_poisson.valid()) {
            ad::Var h1 = ad::gather_cols(tape.parameter(h1_), ctx.head_index());
            ad::Var h2 = ad::gather_cols(tape.parameter(h2_), ctx.within_index());
            ad::Var sd = ad::mul_channels(h1, h2);
            ad::Var p = ad::mul_scalar(ad::mul(sd, tape.constant(ctx.inv_denominator())), a_poisson);
            spectrum = spectrum.valid() ? ad::add(spectrum, p) : p;
        }
        return UnitOutput{ad::left_transform_transposed(spectrum, ctx.plan().operator_matrix()), alpha};
    }

    MoppaUnitParams snapshot() const {
        MoppaUnitParams u;
        u.layout = layout_;
        u.heat = HeatParams{k_.value, t_heat_.value.row(0)};
        u.wave = WaveParams{c_.value, t_wave_.value.row(0)};
        u.poisson = PoissonParams{h1_.value, h2_.value.row(0), eta_};
        for (int i = 0; i < kPathCount; ++i) u.router.lambda[i] = lambda_.value(0, i);
        u.router.active = active_;
        return u;
    }

    std::vector<ad::Parameter*> parameters() { return {&k_, &t_heat_, &c_, &t_wave_, &h1_, &h2_, &lambda_}; }
    std::vector<const ad::Parameter*> parameters() const {
        return {&k_, &t_heat_, &c_, &t_wave_, &h1_, &h2_, &lambda_};
    }

    const HeadLayout& layout() const noexcept { return layout_; }
    const PathMask& active() const noexcept { return active_; }
    double eta() const noexcept { return eta_; }

    ad::Parameter& k() { return k_; }
    ad::Parameter& c() { return c_; }
    ad::Parameter& h1() { return h1_; }
    ad::Parameter& h2() { return h2_; }
    ad::Parameter& t_heat() { return t_heat_; }
    ad::Parameter& t_wave() { return t_wave_; }
    ad::Parameter& lambda() { return lambda_; }

private:
    HeadLayout layout_;
    PathMask active_;
    double eta_;
    ad::Parameter k_, t_heat_, c_, t_wave_, h1_, h2_, lambda_;
};

// ---- checkpoints --------------------------------------------------------------------

/// Flat versioned key/value container. Values are written as C99 hex floats
/// so save/load round-trips every bit.
struct Checkpoint {
    std::map<std::string, std::string> meta;
    std::map<std::string, Matrix> tensors;

    const Matrix& tensor(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw CheckpointError("checkpoint has no tensor '" + name + "'");
        return it->second;
    }

    long meta_int(const std::string& key) const {
        auto it = meta.find(key);
        if (it == meta.end()) throw CheckpointError("checkpoint has no metadata '" + key + "'");
        try {
            return std::stol(it->second);
        } catch (const std::exception&) {
            throw CheckpointError("checkpoint metadata '" + key + "' is not an integer");
        }
    }
};

inline constexpr const char* kCheckpointMagic = "moppa-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
    out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    for (const auto& [k, v] : ck.meta) out << "meta " << k << ' ' << v << '\n';
    char buf[64];
    for (const auto& [name, m] : ck.tensors) {
        out << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
        for (Index i = 0; i < m.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%a", m.data()[i]);
            out << (i == 0 ? "" : " ") << buf;
        }
        out << '\n';
    }
    out << "end\n";
    if (!out) throw CheckpointError("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
    std::string magic;
    int version = 0;
    in >> magic >> version;
    if (magic != kCheckpointMagic) throw CheckpointError("'" + path + "' is not a MoPPA checkpoint");
    if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    std::string tag;
    bool ended = false;
    while (in >> tag) {
        if (tag == "end") {
            ended = true;
            break;
        }
        if (tag == "meta") {
            std::string k, v;
            if (!(in >> k >> v)) throw CheckpointError("truncated metadata entry");
            ck.meta[k] = v;
        } else if (tag == "tensor") {
            std::string name;
            Index rows = 0, cols = 0;
            if (!(in >> name >> rows >> cols) || rows < 0 || cols < 0) throw CheckpointError("bad tensor header");
            Matrix m(rows, cols);
            std::string tok;
            for (Index i = 0; i < m.size(); ++i) {
                if (!(in >> tok)) throw CheckpointError("truncated tensor '" + name + "'");
                char* end = nullptr;
                m.data()[i] = std::strtod(tok.c_str(), &end);
                if (end == tok.c_str() || *end != '\0') throw CheckpointError("bad number in tensor '" + name + "'");
            }
            ck.tensors[name] = std::move(m);
        } else {
            throw CheckpointError("unknown checkpoint record '" + tag + "'");
        }
    }
    if (!ended) throw CheckpointError("checkpoint '" + path + "' is truncated");
    return ck;
}

}  // namespace moppa
