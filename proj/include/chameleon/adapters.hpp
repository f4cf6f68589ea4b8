#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "chameleon/checkpoint.hpp"
#include "chameleon/errors.hpp"
#include "chameleon/model.hpp"
#include "chameleon/ops.hpp"
#include "chameleon/rng.hpp"
#include "chameleon/tensor.hpp"

namespace chameleon {

enum class HeadKind { static_lora, hyper };

struct AdapterConfig {
    std::size_t rank = 4;
    // Scale numerator; the applied factor is alpha / rank. Unset means alpha = rank.
    std::optional<Real> alpha = std::nullopt;
    std::vector<LinearSite> targets{LinearSite::q, LinearSite::v};
    HeadKind head = HeadKind::hyper;
    // Hidden widths of the hypernetwork as multiples of d_model.
    std::vector<std::size_t> hyper_hidden_mult{2, 2};
    Real hyper_dropout = 0.1;

    Real scale_numerator() const { return alpha.value_or(static_cast<Real>(rank)); }
};

namespace init {

template <typename Rng>
Tensor xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const Real bound = std::sqrt(6.0 / static_cast<Real>(fan_in + fan_out));
    return Tensor::uniform(std::move(shape), -bound, bound, rng);
}

}  // namespace init

inline Tensor as_matrix(const Tensor& x) { return x.rank() == 2 ? x : x.reshaped({x.rows(), x.cols()}); }

// Frozen base projection plus a trainable rank-r correction:
//   y = x W + b + (alpha / r) * x A^T B^T,   A: r x in,  B: out x r.
class LoraLinear {
public:
    LoraLinear(Tensor weight, std::optional<Tensor> bias, std::size_t rank, Real alpha, Rng& rng)
        : weight_(std::move(weight)), bias_(std::move(bias)), rank_(rank), alpha_(alpha) {
        if (rank == 0) throw ConfigError("LoRA rank must be positive");
        const std::size_t in = weight_.dim(0), out = weight_.dim(1);
        a_ = init::xavier_uniform({rank, in}, in, rank, rng).set_requires_grad(true);
        b_ = Tensor::zeros({out, rank}).set_requires_grad(true);
    }

    Tensor forward(const Tensor& x) const {
        Tensor base = ops::linear(x, weight_, bias_ ? &*bias_ : nullptr);
        Tensor x2 = as_matrix(x);
        Tensor delta = ops::scale(ops::matmul_nt(ops::matmul_nt(x2, a_), b_), alpha_ / static_cast<Real>(rank_));
        return ops::add(base, delta.reshaped(base.shape()));
    }

    const Tensor& a() const { return a_; }
    const Tensor& b() const { return b_; }
    Tensor& a() { return a_; }
    Tensor& b() { return b_; }
    std::size_t rank() const { return rank_; }
    Real alpha() const { return alpha_; }
    std::size_t parameter_count() const { return a_.numel() + b_.numel(); }

private:
    Tensor weight_;
    std::optional<Tensor> bias_;
    Tensor a_, b_;
    std::size_t rank_;
    Real alpha_;
};

// Fully connected stack mapping a context vector to a flattened matrix.
// ReLU and dropout follow every hidden layer; the output layer is linear.
class HyperNetwork {
public:
    HyperNetwork(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t output_dim, Real dropout,
                 Rng& rng)
        : dropout_(dropout) {
        std::size_t in = input_dim;
        for (std::size_t h : hidden) {
            layers_.push_back({init::xavier_uniform({in, h}, in, h, rng).set_requires_grad(true),
                               Tensor::zeros({h}).set_requires_grad(true)});
            in = h;
        }
        layers_.push_back({Tensor::normal({in, output_dim}, 0.0, 0.01, rng).set_requires_grad(true),
                           Tensor::zeros({output_dim}).set_requires_grad(true)});
    }

    Tensor forward(const Tensor& ctx, bool train, Rng& dropout_rng) const {
        Tensor x = ctx.reshaped({1, ctx.numel()});
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            x = ops::linear(x, layers_[i].weight, &layers_[i].bias);
            if (i + 1 < layers_.size()) x = ops::dropout(ops::relu(x), dropout_, train, dropout_rng);
        }
        return x;
    }

    struct Layer {
        Tensor weight;
        Tensor bias;
    };

    const std::vector<Layer>& layers() const { return layers_; }
    std::size_t output_dim() const { return layers_.back().weight.dim(1); }
    std::size_t input_dim() const { return layers_.front().weight.dim(0); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers_) n += l.weight.numel() + l.bias.numel();
        return n;
    }

private:
    Real dropout_;
    std::vector<Layer> layers_;
};

// LM head whose low-rank update is generated per batch:
//   logits = h W + (alpha / r) * h A_dyn(ctx)^T B^T,  A_dyn = reshape(hyper(ctx), r x d).
class HyperLoraHead {
public:
    HyperLoraHead(Tensor weight, std::size_t rank, Real alpha, const std::vector<std::size_t>& hidden, Real dropout,
                  Rng& rng)
        : weight_(std::move(weight)),
          hyper_(weight_.dim(0), hidden, rank * weight_.dim(0), dropout, rng),
          rank_(rank),
          alpha_(alpha) {
        if (rank == 0) throw ConfigError("LoRA rank must be positive");
        b_ = Tensor::zeros({weight_.dim(1), rank}).set_requires_grad(true);
    }

    std::size_t d_model() const { return weight_.dim(0); }

    Tensor dynamic_a(const Tensor& ctx, bool train, Rng& dropout_rng) const {
        if (ctx.numel() != d_model()) {
            throw ContextShapeError("context has " + std::to_string(ctx.numel()) + " entries, head expects " +
                                    std::to_string(d_model()));
        }
        return hyper_.forward(ctx, train, dropout_rng).reshaped({rank_, d_model()});
    }

    Tensor forward(const Tensor& hidden, const Tensor& ctx, bool train, Rng& dropout_rng) const {
        Tensor a_dyn = dynamic_a(ctx, train, dropout_rng);
        Tensor base = ops::linear(hidden, weight_);
        Tensor h2 = as_matrix(hidden);
        Tensor delta = ops::scale(ops::matmul_nt(ops::matmul_nt(h2, a_dyn), b_), alpha_ / static_cast<Real>(rank_));
        return ops::add(base, delta.reshaped(base.shape()));
    }

    // Effective head update (alpha / r) * A_dyn^T B^T, shape d x V (eval mode).
    Tensor delta(const Tensor& ctx) const {
        Rng unused(0);
        Tensor a_dyn = dynamic_a(ctx.detach(), false, unused).detach();
        Tensor bt = b_.detach();
        const std::size_t d = d_model(), v = weight_.dim(1);
        Tensor out({d, v});
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < v; ++j) {
                Real acc = 0.0;
                for (std::size_t r = 0; r < rank_; ++r) acc += a_dyn[r * d + i] * bt[j * rank_ + r];
                out.data()[i * v + j] = acc * alpha_ / static_cast<Real>(rank_);
            }
        return out;
    }

    const HyperNetwork& hyper() const { return hyper_; }
    const Tensor& b() const { return b_; }
    Tensor& b() { return b_; }
    std::size_t rank() const { return rank_; }
    Real alpha() const { return alpha_; }
    std::size_t parameter_count() const { return hyper_.parameter_count() + b_.numel(); }

private:
    Tensor weight_;
    HyperNetwork hyper_;
    Tensor b_;
    std::size_t rank_;
    Real alpha_;
};

// Mean of per-example embedding vectors: the hypernetwork's conditioning input.
inline Tensor batch_context(std::span<const std::vector<Real>> embeddings) {
    if (embeddings.empty()) throw EmptyContextError("batch_context: empty batch");
    const std::size_t d = embeddings.front().size();
    if (d == 0) throw EmptyContextError("batch_context: zero-length embeddings");
    Tensor ctx({d});
    auto c = ctx.data();
    for (const auto& e : embeddings) {
        if (e.size() != d) throw ContextShapeError("batch_context: embeddings of differing length");
        for (std::size_t j = 0; j < d; ++j) c[j] += e[j];
    }
    for (Real& v : c) v /= static_cast<Real>(embeddings.size());
    return ctx;
}

// Applies the head to hidden states [batch x T x d]; one A_dyn per call.
inline Tensor head_forward(const HyperLoraHead& head, const Tensor& hidden, const Tensor& ctx, bool train,
                           Rng& dropout_rng) {
    if (ctx.numel() != head.d_model()) {
        throw ContextShapeError("context has " + std::to_string(ctx.numel()) + " entries, head expects " +
                                std::to_string(head.d_model()));
    }
    return head.forward(hidden, ctx, train, dropout_rng);
}

// A frozen backbone plus (optionally) its adapters. An unwrapped model is the
// unadapted regime.
class AdaptedModel {
public:
    explicit AdaptedModel(std::shared_ptr<const TransformerBackbone> backbone)
        : backbone_(std::move(backbone)), dropout_rng_(make_rng(0, stream::kDropout)) {
        block_adapters_.resize(backbone_->config().n_layers);
    }

    const TransformerBackbone& backbone() const { return *backbone_; }
    std::shared_ptr<const TransformerBackbone> backbone_ptr() const { return backbone_; }
    bool wrapped() const { return wrapped_; }
    bool train_mode() const { return train_; }
    void set_train(bool train) { train_ = train; }
    void reseed_dropout(std::uint64_t seed) { dropout_rng_ = make_rng(seed, stream::kDropout); }
    const AdapterConfig& adapter_config() const { return config_; }

    bool has_hyper_head() const { return std::holds_alternative<HyperLoraHead>(head_); }
    const HyperLoraHead& hyper_head() const { return std::get<HyperLoraHead>(head_); }
    HyperLoraHead& hyper_head() { return std::get<HyperLoraHead>(head_); }
    const std::optional<LoraLinear>& block_adapter(std::size_t layer, LinearSite site) const {
        return block_adapters_.at(layer)[static_cast<std::size_t>(site)];
    }

    void wrap(const AdapterConfig& config, std::uint64_t seed) {
        if (wrapped_) throw DoubleWrapError("model is already wrapped with adapters");
        if (!backbone_->frozen()) throw Error("wrap requires a frozen backbone");
        Rng rng = make_rng(seed, stream::kAdapterInit);
        const Real alpha = config.scale_numerator();
        for (std::size_t l = 0; l < block_adapters_.size(); ++l) {
            const BlockWeights& bw = backbone_->block(l);
            for (LinearSite s : config.targets) {
                auto& slot = block_adapters_[l][static_cast<std::size_t>(s)];
                if (slot) continue;
                slot.emplace(bw.weight(s), bw.bias(s), config.rank, alpha, rng);
            }
        }
        if (config.head == HeadKind::static_lora) {
            head_ = LoraLinear(backbone_->lm_head(), std::nullopt, config.rank, alpha, rng);
        } else {
            std::vector<std::size_t> hidden;
            for (std::size_t m : config.hyper_hidden_mult) hidden.push_back(m * backbone_->config().d_model);
            head_ = HyperLoraHead(backbone_->lm_head(), config.rank, alpha, hidden, config.hyper_dropout, rng);
        }
        config_ = config;
        wrapped_ = true;
        dropout_rng_ = make_rng(seed, stream::kDropout);
    }

    Tensor forward_hidden(const TokenBatch& tb) const {
        return backbone_->forward_hidden(
            tb, [this](std::size_t l, LinearSite s, const Tensor& x, const Tensor& w, const Tensor& b) {
                const auto& slot = block_adapters_[l][static_cast<std::size_t>(s)];
                return slot ? slot->forward(x) : ops::linear(x, w, &b);
            });
    }

    // Logits [batch x T x V]. `ctx` is required when the head is a hypernetwork head.
    Tensor logits(const TokenBatch& tb, const Tensor* ctx = nullptr) {
        Tensor hidden = forward_hidden(tb);
        return head(hidden, ctx);
    }

    Tensor head(const Tensor& hidden, const Tensor* ctx) {
        if (auto* lora = std::get_if<LoraLinear>(&head_)) return lora->forward(hidden);
        if (auto* hyper = std::get_if<HyperLoraHead>(&head_)) {
            if (!ctx) throw ContextShapeError("hypernetwork head requires a batch context");
            return head_forward(*hyper, hidden, *ctx, train_, dropout_rng_);
        }
        return backbone_->head_logits(hidden);
    }

    // Trainable tensors in a stable order with stable names.
    std::vector<checkpoint::NamedTensor> trainable_parameters() const {
        std::vector<checkpoint::NamedTensor> out;
        for (std::size_t l = 0; l < block_adapters_.size(); ++l) {
            for (std::size_t s = 0; s < block_adapters_[l].size(); ++s) {
                const auto& slot = block_adapters_[l][s];
                if (!slot) continue;
                const std::string p = "h." + std::to_string(l) + "." + site_name(static_cast<LinearSite>(s)) + ".";
                out.push_back({p + "lora_a", slot->a()});
                out.push_back({p + "lora_b", slot->b()});
            }
        }
        if (const auto* lora = std::get_if<LoraLinear>(&head_)) {
            out.push_back({"head.lora_a", lora->a()});
            out.push_back({"head.lora_b", lora->b()});
        } else if (const auto* hyper = std::get_if<HyperLoraHead>(&head_)) {
            const auto& layers = hyper->hyper().layers();
            for (std::size_t i = 0; i < layers.size(); ++i) {
                out.push_back({"head.hyper." + std::to_string(i) + ".weight", layers[i].weight});
                out.push_back({"head.hyper." + std::to_string(i) + ".bias", layers[i].bias});
            }
            out.push_back({"head.lora_b", hyper->b()});
        }
        return out;
    }

    std::size_t trainable_parameter_count() const {
        std::size_t n = 0;
        for (const auto& nt : trainable_parameters()) n += nt.tensor.numel();
        return n;
    }

    checkpoint::Checkpoint adapters_checkpoint() const {
        checkpoint::Checkpoint ckpt;
        ckpt.metadata["kind"] = "adapters";
        ckpt.metadata["backbone_checksum"] = std::to_string(backbone_->checksum());
        ckpt.tensors = trainable_parameters();
        return ckpt;
    }

    void load_adapters(const checkpoint::Checkpoint& ckpt) {
        for (auto& nt : trainable_parameters()) {
            const Tensor& src = ckpt.at(nt.name);
            if (src.shape() != nt.tensor.shape()) {
                throw CheckpointError("adapter '" + nt.name + "' has shape " + shape_str(src.shape()) + ", model expects " +
                                      shape_str(nt.tensor.shape()));
            }
            std::copy(src.data().begin(), src.data().end(), nt.tensor.data().begin());
        }
    }

private:
    std::shared_ptr<const TransformerBackbone> backbone_;
    std::vector<std::array<std::optional<LoraLinear>, 6>> block_adapters_;
    std::variant<std::monostate, LoraLinear, HyperLoraHead> head_;
    AdapterConfig config_;
    bool wrapped_ = false;
    bool train_ = false;
    Rng dropout_rng_;
};

// Wraps a frozen backbone: selected block projections and the LM head receive
// adapters; everything else stays frozen.
inline AdaptedModel wrap_model(std::shared_ptr<const TransformerBackbone> backbone, const AdapterConfig& config,
                               std::uint64_t seed) {
    AdaptedModel model(std::move(backbone));
    model.wrap(config, seed);
    return model;
}

}  // namespace chameleon
