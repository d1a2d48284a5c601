// Copyright (c) 2026, MoPPA contributors
// SPDX-License-Identifier: Apache-2.0

// Small frozen pre-norm transformer stack hosting the adapters.
//
// Per block, with tokens flattened to L x D:
//   h   = x + Attn(U(LN1(x)))        U = MoPPA unit (identity when absent)
//   out = h + W2 GELU(W1 LN2(h))
// The unit's output replaces the attention input. LoRA pairs sit on the
// query and value projections.

#pragma once

#include "moppa/adapters.hpp"
#include "moppa/autodiff.hpp"
#include "moppa/spectral.hpp"

#include <cmath>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace moppa {

enum class AdapterKind { none, moppa, lora };

inline const char* adapter_name(AdapterKind k) {
    switch (k) {
        case AdapterKind::none: return "none";
        case AdapterKind::moppa: return "moppa";
        case AdapterKind::lora: return "lora";
    }
    return "?";
}

struct ModelConfig {
    Index width = 8;
    Index height = 8;
    Index channels = 96;
    Index heads = 4;
    Index depth = 4;
    AdapterKind adapter = AdapterKind::none;
    Index lora_rank = 0;  // 0: largest rank within the MoPPA budget
    std::uint64_t seed = 0;          // frozen host weights
    std::uint64_t adapter_seed = 0;  // adapter initialization
    double eta = kDefaultEta;
    PathMask active = kAllPaths;

    HeadLayout layout() const { return HeadLayout::make(width * height, channels, heads); }

    void validate() const {
        if (width < 1 || height < 1) throw ConfigError("model grid must be at least 1x1");
        if (channels < 1 || heads < 1) throw ConfigError("channels and heads must be positive");
        if (channels % heads != 0) {
            throw ConfigError("heads (" + std::to_string(heads) + ") must divide channels (" +
                              std::to_string(channels) + ")");
        }
        if (depth < 0) throw ConfigError("depth must be >= 0");
        if (!(eta > 0.0)) throw ConfigError("eta must be > 0");
    }
};

struct BlockWeights {
    ad::Parameter ln1_gain, ln1_bias;
    ad::Parameter wq, wk, wv, wo;
    ad::Parameter ln2_gain, ln2_bias;
    ad::Parameter w1, w2;

    std::vector<ad::Parameter*> all() {
        return {&ln1_gain, &ln1_bias, &wq, &wk, &wv, &wo, &ln2_gain, &ln2_bias, &w1, &w2};
    }
    std::vector<const ad::Parameter*> all() const {
        return {&ln1_gain, &ln1_bias, &wq, &wk, &wv, &wo, &ln2_gain, &ln2_bias, &w1, &w2};
    }
};

/// Normal(0, std) truncated to +-2 std by rejection.
inline Matrix truncated_normal(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, stddev);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
        double v = normal(rng);
        while (std::abs(v) > 2.0 * stddev) v = normal(rng);
        m.data()[i] = v;
    }
    return m;
}

struct ForwardResult {
    ad::Var out;
    std::vector<ad::Var> alphas;  // one per MoPPA unit
};

class Model {
public:
    struct Block {
        BlockWeights w;
        std::optional<MoppaAdapter> moppa;
        std::optional<LoraAdapter> lora_q;
        std::optional<LoraAdapter> lora_v;
    };

    explicit Model(ModelConfig cfg) : cfg_(cfg) {
        cfg_.validate();
        const HeadLayout layout = cfg_.layout();
        const Index D = cfg_.channels;
        context_ = std::make_unique<SpectralContext>(cfg_.width, cfg_.height, layout, cfg_.eta);

        std::mt19937_64 host_rng(cfg_.seed);
        for (Index b = 0; b < cfg_.depth; ++b) {
            const std::string p = "block" + std::to_string(b);
            auto frozen = [&](const std::string& name, Matrix m) { return ad::Parameter(p + "." + name, std::move(m), false); };
            Block blk;
            blk.w.ln1_gain = frozen("ln1.gain", Matrix::Ones(1, D));
            blk.w.ln1_bias = frozen("ln1.bias", Matrix::Zero(1, D));
            blk.w.wq = frozen("attn.wq", truncated_normal(D, D, 0.02, host_rng));
            blk.w.wk = frozen("attn.wk", truncated_normal(D, D, 0.02, host_rng));
            blk.w.wv = frozen("attn.wv", truncated_normal(D, D, 0.02, host_rng));
            blk.w.wo = frozen("attn.wo", truncated_normal(D, D, 0.02, host_rng));
            blk.w.ln2_gain = frozen("ln2.gain", Matrix::Ones(1, D));
            blk.w.ln2_bias = frozen("ln2.bias", Matrix::Zero(1, D));
            blk.w.w1 = frozen("mlp.w1", truncated_normal(D, 4 * D, 0.02, host_rng));
            blk.w.w2 = frozen("mlp.w2", truncated_normal(4 * D, D, 0.02, host_rng));
            blocks_.push_back(std::move(blk));
        }

        std::mt19937_64 adapter_rng(cfg_.adapter_seed * 0x9E3779B97F4A7C15ULL + 0x5851F42D4C957F2DULL);
        if (cfg_.adapter == AdapterKind::lora) {
            lora_rank_ = cfg_.lora_rank > 0 ? cfg_.lora_rank : match_budget(layout, cfg_.depth, LoraPlacement{}).rank;
        }
        for (Index b = 0; b < cfg_.depth; ++b) {
            const std::string p = "block" + std::to_string(b);
            Block& blk = blocks_[static_cast<std::size_t>(b)];
            if (cfg_.adapter == AdapterKind::moppa) {
                blk.moppa.emplace(p + ".moppa", layout, adapter_rng, cfg_.active, cfg_.eta);
            } else if (cfg_.adapter == AdapterKind::lora) {
                blk.lora_q.emplace(p + ".lora.q", D, lora_rank_, adapter_rng);
                blk.lora_v.emplace(p + ".lora.v", D, lora_rank_, adapter_rng);
            }
        }
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    const SpectralContext& context() const noexcept { return *context_; }
    std::vector<Block>& blocks() noexcept { return blocks_; }
    const std::vector<Block>& blocks() const noexcept { return blocks_; }
    Index lora_rank() const noexcept { return lora_rank_; }

    ForwardResult forward(ad::Tape& tape, ad::Var x) {
        if (x.rows() != cfg_.width * cfg_.height || x.cols() != cfg_.channels) {
            throw DimensionError("model input must be " + shape_string(cfg_.width * cfg_.height, cfg_.channels) +
                                 ", got " + shape_string(x.rows(), x.cols()));
        }
        ForwardResult r;
        ad::Var h = x;
        for (Block& blk : blocks_) {
            ad::Var z = ad::layer_norm(h, tape.parameter(blk.w.ln1_gain), tape.parameter(blk.w.ln1_bias));
            if (blk.moppa) {
                UnitOutput u = blk.moppa->forward(tape, z, *context_);
                z = u.y;
                r.alphas.push_back(u.alpha);
            }
            h = ad::add(h, attention(tape, blk, z));
            ad::Var m = ad::layer_norm(h, tape.parameter(blk.w.ln2_gain), tape.parameter(blk.w.ln2_bias));
            m = ad::matmul(ad::gelu(ad::matmul(m, tape.parameter(blk.w.w1))), tape.parameter(blk.w.w2));
            h = ad::add(h, m);
        }
        r.out = h;
        return r;
    }

    SpatialTensor forward(const SpatialTensor& x) {
        if (x.width() != cfg_.width || x.height() != cfg_.height) {
            throw DimensionError("input grid " + shape_string(x.width(), x.height()) + " does not match model grid " +
                                 shape_string(cfg_.width, cfg_.height));
        }
        ad::Tape tape;
        ForwardResult r = forward(tape, tape.constant(x.tokens()));
        return SpatialTensor(cfg_.width, cfg_.height, r.out.value());
    }

    /// Mean of the per-unit route regularizations, or an invalid Var without routers.
    static ad::Var regularization(const ForwardResult& r) {
        if (r.alphas.empty()) return {};
        ad::Var total;
        for (const ad::Var& a : r.alphas) {
            ad::Var reg = route_regularization(a);
            total = total.valid() ? ad::add(total, reg) : reg;
        }
        return ad::scale(total, 1.0 / static_cast<double>(r.alphas.size()));
    }

    std::vector<ad::Parameter*> adapter_parameters() {
        std::vector<ad::Parameter*> out;
        for (Block& blk : blocks_) {
            if (blk.moppa)
                for (auto* p : blk.moppa->parameters()) out.push_back(p);
            if (blk.lora_q)
                for (auto* p : blk.lora_q->parameters()) out.push_back(p);
            if (blk.lora_v)
                for (auto* p : blk.lora_v->parameters()) out.push_back(p);
        }
        return out;
    }

    std::vector<ad::Parameter*> trainable_parameters() {
        std::vector<ad::Parameter*> out;
        for (auto* p : all_parameters())
            if (p->trainable) out.push_back(p);
        return out;
    }

    std::vector<ad::Parameter*> all_parameters() {
        std::vector<ad::Parameter*> out;
        for (Block& blk : blocks_)
            for (auto* p : blk.w.all()) out.push_back(p);
        for (auto* p : adapter_parameters()) out.push_back(p);
        return out;
    }

    Index trainable_count() {
        Index n = 0;
        for (auto* p : trainable_parameters()) n += p->size();
        return n;
    }

    std::uint64_t frozen_checksum() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const Block& blk : blocks_)
            for (const auto* p : blk.w.all()) h = checksum(p->value, h);
        return h;
    }

    /// Adapter tensors plus enough metadata to interpret them.
    Checkpoint to_checkpoint() {
        Checkpoint ck;
        ck.meta["adapter"] = adapter_name(cfg_.adapter);
        ck.meta["width"] = std::to_string(cfg_.width);
        ck.meta["height"] = std::to_string(cfg_.height);
        ck.meta["channels"] = std::to_string(cfg_.channels);
        ck.meta["heads"] = std::to_string(cfg_.heads);
        ck.meta["depth"] = std::to_string(cfg_.depth);
        for (auto* p : adapter_parameters()) ck.tensors[p->name] = p->value;
        return ck;
    }

    void load_adapters(const Checkpoint& ck) {
        for (auto* p : adapter_parameters()) {
            const Matrix& m = ck.tensor(p->name);
            require_shape(m, p->value.rows(), p->value.cols(), p->name.c_str());
            p->value = m;
        }
    }

private:
    ad::Var attention(ad::Tape& tape, Block& blk, ad::Var z) {
        const Index N = cfg_.heads;
        const Index hd = cfg_.channels / N;
        ad::Var q = ad::matmul(z, tape.parameter(blk.w.wq));
        ad::Var k = ad::matmul(z, tape.parameter(blk.w.wk));
        ad::Var v = ad::matmul(z, tape.parameter(blk.w.wv));
        if (blk.lora_q) q = ad::add(q, blk.lora_q->delta(tape, z));
        if (blk.lora_v) v = ad::add(v, blk.lora_v->delta(tape, z));
        const double s = 1.0 / std::sqrt(static_cast<double>(hd));
        std::vector<ad::Var> heads;
        heads.reserve(static_cast<std::size_t>(N));
        for (Index n = 0; n < N; ++n) {
            ad::Var qh = ad::slice_cols(q, n * hd, hd);
            ad::Var kh = ad::slice_cols(k, n * hd, hd);
            ad::Var vh = ad::slice_cols(v, n * hd, hd);
            ad::Var a = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), s));
            heads.push_back(ad::matmul(a, vh));
        }
        ad::Var o = N == 1 ? heads.front() : ad::concat_cols(heads);
        return ad::matmul(o, tape.parameter(blk.w.wo));
    }

    ModelConfig cfg_;
    std::unique_ptr<SpectralContext> context_;
    std::vector<Block> blocks_;
    Index lora_rank_ = 0;
};

}  // namespace moppa
