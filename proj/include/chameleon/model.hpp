#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "chameleon/checkpoint.hpp"
#include "chameleon/errors.hpp"
#include "chameleon/ops.hpp"
#include "chameleon/rng.hpp"
#include "chameleon/tensor.hpp"

namespace chameleon {

struct ModelConfig {
    std::size_t vocab_size = 100;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 256;
    std::size_t max_seq_len = 64;

    void validate() const {
        if (vocab_size < 4) throw ConfigError("model.vocab_size must be >= 4 (PAD/BOS/UNK plus content)");
        if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0)
            throw ConfigError("model dimensions must be positive");
        if (d_model % n_heads != 0) throw ConfigError("model.d_model must be divisible by model.n_heads");
        if (max_seq_len < 2) throw ConfigError("model.max_seq_len must be >= 2");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
         {"n_heads", c.n_heads},       {"d_ff", c.d_ff},       {"max_seq_len", c.max_seq_len}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("d_model").get_to(c.d_model);
    j.at("n_layers").get_to(c.n_layers);
    j.at("n_heads").get_to(c.n_heads);
    j.at("d_ff").get_to(c.d_ff);
    j.at("max_seq_len").get_to(c.max_seq_len);
}

// The linear projections inside a block that adapters may wrap.
enum class LinearSite { q, k, v, o, fc, proj };

inline const char* site_name(LinearSite s) {
    switch (s) {
        case LinearSite::q: return "q";
        case LinearSite::k: return "k";
        case LinearSite::v: return "v";
        case LinearSite::o: return "o";
        case LinearSite::fc: return "fc";
        case LinearSite::proj: return "proj";
    }
    return "?";
}

inline LinearSite parse_site(const std::string& name) {
    for (LinearSite s : {LinearSite::q, LinearSite::k, LinearSite::v, LinearSite::o, LinearSite::fc, LinearSite::proj})
        if (name == site_name(s)) return s;
    throw ConfigError("unknown LoRA target '" + name + "' (expected q, k, v, o, fc or proj)");
}

struct BlockWeights {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor ln2_gain, ln2_bias;
    Tensor w_fc, b_fc, w_proj, b_proj;

    const Tensor& weight(LinearSite s) const {
        switch (s) {
            case LinearSite::q: return wq;
            case LinearSite::k: return wk;
            case LinearSite::v: return wv;
            case LinearSite::o: return wo;
            case LinearSite::fc: return w_fc;
            case LinearSite::proj: return w_proj;
        }
        return wq;
    }

    const Tensor& bias(LinearSite s) const {
        switch (s) {
            case LinearSite::q: return bq;
            case LinearSite::k: return bk;
            case LinearSite::v: return bv;
            case LinearSite::o: return bo;
            case LinearSite::fc: return b_fc;
            case LinearSite::proj: return b_proj;
        }
        return bq;
    }
};

// Right-padded token batch. `valid` is false exactly at PAD positions.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t length = 0;
    std::vector<std::int32_t> ids;
    Mask valid;

    static TokenBatch from_sequences(const std::vector<std::vector<std::int32_t>>& seqs, std::int32_t pad_id = 0) {
        TokenBatch tb;
        tb.batch = seqs.size();
        for (const auto& s : seqs) tb.length = std::max(tb.length, s.size());
        if (tb.batch == 0 || tb.length == 0) throw DimensionError("empty token batch");
        tb.ids.assign(tb.batch * tb.length, pad_id);
        tb.valid.assign(tb.batch * tb.length, 0);
        for (std::size_t b = 0; b < tb.batch; ++b) {
            for (std::size_t t = 0; t < seqs[b].size(); ++t) {
                tb.ids[b * tb.length + t] = seqs[b][t];
                tb.valid[b * tb.length + t] = 1;
            }
        }
        return tb;
    }

    // Next-token targets: position t predicts token t+1; the last position and
    // positions whose target is padding are masked out.
    std::pair<std::vector<std::int32_t>, Mask> shifted_targets() const {
        std::vector<std::int32_t> targets(ids.size(), 0);
        Mask mask(ids.size(), 0);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t t = 0; t + 1 < length; ++t) {
                const std::size_t i = b * length + t;
                if (valid[i] && valid[i + 1]) {
                    targets[i] = ids[i + 1];
                    mask[i] = 1;
                }
            }
        }
        return {targets, mask};
    }
};

struct PlainLinear {
    Tensor operator()(std::size_t, LinearSite, const Tensor& x, const Tensor& w, const Tensor& b) const {
        return ops::linear(x, w, &b);
    }
};

class TransformerBackbone {
public:
    TransformerBackbone() = default;

    // GPT-2 style initialization: every weight matrix and embedding table is
    // drawn from N(0, 0.02^2); biases are zero; layernorm gain 1, bias 0.
    static TransformerBackbone init(const ModelConfig& config, std::uint64_t seed) {
        config.validate();
        TransformerBackbone m;
        m.config_ = config;
        Rng rng = make_rng(seed, stream::kBackboneInit);
        const std::size_t d = config.d_model;
        auto w = [&rng](Shape s) { return Tensor::normal(std::move(s), 0.0, 0.02, rng); };
        m.wte_ = w({config.vocab_size, d});
        m.wpe_ = w({config.max_seq_len, d});
        for (std::size_t l = 0; l < config.n_layers; ++l) {
            BlockWeights bw;
            bw.ln1_gain = Tensor({d}, 1.0);
            bw.ln1_bias = Tensor::zeros({d});
            bw.wq = w({d, d});
            bw.bq = Tensor::zeros({d});
            bw.wk = w({d, d});
            bw.bk = Tensor::zeros({d});
            bw.wv = w({d, d});
            bw.bv = Tensor::zeros({d});
            bw.wo = w({d, d});
            bw.bo = Tensor::zeros({d});
            bw.ln2_gain = Tensor({d}, 1.0);
            bw.ln2_bias = Tensor::zeros({d});
            bw.w_fc = w({d, config.d_ff});
            bw.b_fc = Tensor::zeros({config.d_ff});
            bw.w_proj = w({config.d_ff, d});
            bw.b_proj = Tensor::zeros({d});
            m.blocks_.push_back(std::move(bw));
        }
        m.lnf_gain_ = Tensor({d}, 1.0);
        m.lnf_bias_ = Tensor::zeros({d});
        m.lm_head_ = w({d, config.vocab_size});
        return m;
    }

    const ModelConfig& config() const { return config_; }
    const Tensor& token_table() const { return wte_; }
    const Tensor& lm_head() const { return lm_head_; }
    const BlockWeights& block(std::size_t l) const { return blocks_.at(l); }
    bool frozen() const { return frozen_; }

    std::vector<checkpoint::NamedTensor> named_tensors() const {
        std::vector<checkpoint::NamedTensor> out{{"wte", wte_}, {"wpe", wpe_}};
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const auto& b = blocks_[l];
            const std::string p = "h." + std::to_string(l) + ".";
            out.insert(out.end(), {{p + "ln1.gain", b.ln1_gain}, {p + "ln1.bias", b.ln1_bias},
                                   {p + "attn.wq", b.wq},        {p + "attn.bq", b.bq},
                                   {p + "attn.wk", b.wk},        {p + "attn.bk", b.bk},
                                   {p + "attn.wv", b.wv},        {p + "attn.bv", b.bv},
                                   {p + "attn.wo", b.wo},        {p + "attn.bo", b.bo},
                                   {p + "ln2.gain", b.ln2_gain}, {p + "ln2.bias", b.ln2_bias},
                                   {p + "mlp.w_fc", b.w_fc},     {p + "mlp.b_fc", b.b_fc},
                                   {p + "mlp.w_proj", b.w_proj}, {p + "mlp.b_proj", b.b_proj}});
        }
        out.insert(out.end(), {{"ln_f.gain", lnf_gain_}, {"ln_f.bias", lnf_bias_}, {"lm_head", lm_head_}});
        return out;
    }

    // Makes every backbone tensor trainable (used only for in-repo pretraining).
    void unfreeze() {
        for (auto& nt : named_tensors()) nt.tensor.set_requires_grad(true);
        frozen_ = false;
    }

    // Stops gradient tracking on every backbone tensor and rounds the weights
    // to float32 precision, so a frozen backbone survives the float32
    // checkpoint format bit-exactly.
    void freeze() {
        for (auto& nt : named_tensors()) {
            nt.tensor.set_requires_grad(false);
            for (Real& v : nt.tensor.data()) v = static_cast<Real>(static_cast<float>(v));
        }
        frozen_ = true;
    }

    std::uint64_t checksum() const { return checkpoint::checksum(named_tensors()); }

    // Deep copy with independent storage.
    TransformerBackbone clone() const {
        TransformerBackbone m = *this;
        m.wte_ = wte_.clone();
        m.wpe_ = wpe_.clone();
        for (auto& b : m.blocks_) {
            for (Tensor* t : {&b.ln1_gain, &b.ln1_bias, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo,
                              &b.ln2_gain, &b.ln2_bias, &b.w_fc, &b.b_fc, &b.w_proj, &b.b_proj})
                *t = t->clone();
        }
        m.lnf_gain_ = lnf_gain_.clone();
        m.lnf_bias_ = lnf_bias_.clone();
        m.lm_head_ = lm_head_.clone();
        return m;
    }

    checkpoint::Checkpoint to_checkpoint() const {
        checkpoint::Checkpoint ckpt;
        ckpt.metadata["model_config"] = config_;
        ckpt.metadata["frozen"] = frozen_;
        ckpt.tensors = named_tensors();
        return ckpt;
    }

    static TransformerBackbone from_checkpoint(const checkpoint::Checkpoint& ckpt) {
        if (!ckpt.metadata.contains("model_config")) throw CheckpointError("checkpoint carries no model_config");
        ModelConfig config = ckpt.metadata.at("model_config").get<ModelConfig>();
        TransformerBackbone m = init(config, 0);
        for (auto& nt : m.named_tensors()) {
            const Tensor& src = ckpt.at(nt.name);
            if (src.shape() != nt.tensor.shape()) {
                throw CheckpointError("tensor '" + nt.name + "' has shape " + shape_str(src.shape()) + ", config expects " +
                                      shape_str(nt.tensor.shape()));
            }
            std::copy(src.data().begin(), src.data().end(), nt.tensor.data().begin());
        }
        m.frozen_ = ckpt.metadata.value("frozen", true);
        if (m.frozen_) m.freeze();
        return m;
    }

    void check_ids(std::span<const std::int32_t> ids) const {
        for (std::int32_t id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
                throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                                      std::to_string(config_.vocab_size));
            }
        }
    }

    // Raw token-embedding rows (no positional term).
    Tensor token_embed(std::span<const std::int32_t> ids) const {
        check_ids(ids);
        return ops::embedding(wte_, ids);
    }

    // Pre-head hidden states [batch x T x d] after the final layernorm.
    // `lin` computes each block projection and is where adapters hook in.
    template <typename LinearFn = PlainLinear>
    Tensor forward_hidden(const TokenBatch& tb, LinearFn&& lin = LinearFn{}) const {
        if (tb.length > config_.max_seq_len) {
            throw LengthError("sequence length " + std::to_string(tb.length) + " exceeds max_seq_len " +
                              std::to_string(config_.max_seq_len));
        }
        check_ids(tb.ids);
        const std::size_t d = config_.d_model;
        std::vector<std::int32_t> positions(tb.ids.size());
        for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % tb.length);
        Tensor x = ops::add(ops::embedding(wte_, tb.ids), ops::embedding(wpe_, positions));
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const BlockWeights& b = blocks_[l];
            Tensor a = ops::layer_norm(x, b.ln1_gain, b.ln1_bias);
            Tensor q = lin(l, LinearSite::q, a, b.wq, b.bq);
            Tensor k = lin(l, LinearSite::k, a, b.wk, b.bk);
            Tensor v = lin(l, LinearSite::v, a, b.wv, b.bv);
            Tensor att = ops::causal_attention(q, k, v, tb.batch, tb.length, config_.n_heads, tb.valid);
            x = ops::add(x, lin(l, LinearSite::o, att, b.wo, b.bo));
            Tensor m = ops::layer_norm(x, b.ln2_gain, b.ln2_bias);
            Tensor f = ops::gelu(lin(l, LinearSite::fc, m, b.w_fc, b.b_fc));
            x = ops::add(x, lin(l, LinearSite::proj, f, b.w_proj, b.b_proj));
        }
        return ops::layer_norm(x, lnf_gain_, lnf_bias_).reshaped({tb.batch, tb.length, d});
    }

    // Unadapted head: hidden [.. x d] -> logits [.. x V].
    Tensor head_logits(const Tensor& hidden) const { return ops::linear(hidden, lm_head_); }

private:
    ModelConfig config_;
    Tensor wte_, wpe_;
    std::vector<BlockWeights> blocks_;
    Tensor lnf_gain_, lnf_bias_;
    Tensor lm_head_;
    bool frozen_ = false;
};

}  // namespace chameleon
