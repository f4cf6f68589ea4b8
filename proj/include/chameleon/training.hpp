#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "chameleon/adapters.hpp"
#include "chameleon/clustering.hpp"
#include "chameleon/data.hpp"
#include "chameleon/model.hpp"
#include "chameleon/ops.hpp"
#include "chameleon/optim.hpp"
#include "chameleon/rng.hpp"
#include "chameleon/tensor.hpp"

namespace chameleon {

enum class Regime { unadapted, static_lora, chameleon };

inline const char* regime_name(Regime r) {
    switch (r) {
        case Regime::unadapted: return "unadapted";
        case Regime::static_lora: return "static_lora";
        case Regime::chameleon: return "chameleon";
    }
    return "?";
}

inline Regime parse_regime(const std::string& s) {
    for (Regime r : {Regime::unadapted, Regime::static_lora, Regime::chameleon})
        if (s == regime_name(r)) return r;
    throw ConfigError("unknown regime '" + s + "' (expected unadapted, static_lora or chameleon)");
}

struct TrainConfig {
    Regime regime = Regime::chameleon;
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    AdamWConfig optim{.lr = 1e-2};
    Real clip_norm = 1.0;
    AdapterConfig adapters{.rank = 8};
    DropPolicy drop_policy = DropPolicy::keep;
    KMeansOptions kmeans{};
    std::uint64_t model_seed = 0;    // adapter init and dropout
    std::uint64_t data_seed = 0;     // batch order
    std::uint64_t cluster_seed = 0;  // k-means restarts
};

struct PretrainConfig {
    std::size_t epochs = 5;
    std::size_t batch_size = 32;
    AdamWConfig optim{3e-3, 0.9, 0.999, 1e-8, 0.01};
    Real clip_norm = 1.0;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    Real train_loss = 0.0;
    Real val_loss = 0.0;
    Real val_perplexity = 0.0;
    double seconds = 0.0;
};

struct RunMetrics {
    Regime regime = Regime::unadapted;
    std::size_t trainable_parameters = 0;
    // Loss of the unadapted function on the first epoch's training batches.
    Real baseline_train_loss = 0.0;
    std::vector<EpochMetrics> epochs;
    std::vector<std::string> flags;

    const EpochMetrics& final() const { return epochs.back(); }
};

inline Real perplexity(Real loss) { return std::exp(loss); }

// Examples of one split together with their embeddings and cluster plan.
struct ClusteredSplit {
    std::vector<std::size_t> indices;  // corpus example ids
    std::vector<std::vector<Real>> embeddings;
    ClusterPlan plan;
};

inline ClusteredSplit cluster_split(const TransformerBackbone& backbone, const Corpus& corpus,
                                    const std::vector<std::size_t>& indices, std::size_t batch_size,
                                    std::uint64_t seed, const KMeansOptions& kopt = {}) {
    if (indices.empty()) throw CorpusError("cannot cluster an empty split");
    ClusteredSplit s;
    s.indices = indices;
    s.embeddings = embed_examples(backbone, corpus, indices);
    s.plan = kmeans(s.embeddings, choose_k(indices.size(), batch_size), seed, kopt);
    return s;
}

struct PreparedBatch {
    TokenBatch tokens;
    Tensor context;
    std::vector<std::int32_t> targets;
    Mask mask;
    std::size_t target_count = 0;
};

inline PreparedBatch prepare_batch(const Corpus& corpus, const ClusteredSplit& split, const ScheduledBatch& batch) {
    std::vector<std::vector<std::int32_t>> seqs;
    std::vector<std::vector<Real>> emb;
    for (std::size_t local : batch.indices) {
        seqs.push_back(corpus.examples.at(split.indices.at(local)).ids);
        emb.push_back(split.embeddings.at(local));
    }
    PreparedBatch pb;
    pb.tokens = TokenBatch::from_sequences(seqs, kPadId);
    pb.context = batch_context(emb);
    std::tie(pb.targets, pb.mask) = pb.tokens.shifted_targets();
    pb.target_count = static_cast<std::size_t>(std::count(pb.mask.begin(), pb.mask.end(), std::uint8_t{1}));
    return pb;
}

inline Tensor batch_loss(AdaptedModel& model, const PreparedBatch& pb) {
    Tensor logits = model.logits(pb.tokens, &pb.context);
    return ops::softmax_ce_loss(logits, pb.targets, pb.mask);
}

struct LossSummary {
    Real token_weighted = 0.0;
    Real batch_mean = 0.0;
    std::size_t tokens = 0;
};

// Loss over a schedule without updating anything (dropout off).
inline LossSummary evaluate_schedule(AdaptedModel& model, const Corpus& corpus, const ClusteredSplit& split,
                                     const std::vector<ScheduledBatch>& schedule) {
    NoGradGuard no_grad;
    const bool was_train = model.train_mode();
    model.set_train(false);
    LossSummary s;
    Real weighted = 0.0, batch_sum = 0.0;
    std::size_t batches = 0;
    for (const auto& b : schedule) {
        PreparedBatch pb = prepare_batch(corpus, split, b);
        if (pb.target_count == 0) continue;
        const Real loss = batch_loss(model, pb).item();
        weighted += loss * static_cast<Real>(pb.target_count);
        batch_sum += loss;
        s.tokens += pb.target_count;
        ++batches;
    }
    model.set_train(was_train);
    if (s.tokens == 0) throw EmptyLossError("evaluation schedule has no target tokens");
    s.token_weighted = weighted / static_cast<Real>(s.tokens);
    s.batch_mean = batch_sum / static_cast<Real>(batches);
    return s;
}

struct EvalResult {
    Real loss = 0.0;
    Real perplexity = 0.0;
};

// Token-weighted mean cross-entropy over the cluster-pure validation batches.
inline EvalResult evaluate(AdaptedModel& model, const Corpus& corpus, const ClusteredSplit& val) {
    if (val.plan.schedule.empty()) throw CorpusError("empty validation set");
    const Real loss = evaluate_schedule(model, corpus, val, val.plan.schedule).token_weighted;
    return {loss, perplexity(loss)};
}

// One pass over the schedule: forward, masked loss, backward, clip, AdamW.
// Returns the mean batch loss.
inline Real train_epoch(AdaptedModel& model, const Corpus& corpus, const ClusteredSplit& split,
                        const std::vector<ScheduledBatch>& schedule, AdamW& optimizer, Real clip_norm) {
    model.set_train(true);
    Real total = 0.0;
    std::size_t batches = 0;
    for (std::size_t bi = 0; bi < schedule.size(); ++bi) {
        PreparedBatch pb = prepare_batch(corpus, split, schedule[bi]);
        if (pb.target_count == 0) continue;
        Tensor loss = batch_loss(model, pb);
        const Real value = loss.item();
        if (!std::isfinite(value)) {
            throw NonFiniteLossError("non-finite training loss at batch " + std::to_string(bi));
        }
        backward(loss);
        clip_grad_norm(optimizer.params(), clip_norm);
        optimizer.step();
        optimizer.zero_grad();
        total += value;
        ++batches;
    }
    model.set_train(false);
    return batches ? total / static_cast<Real>(batches) : 0.0;
}

using EpochCallback = std::function<void(const RunMetrics&, const EpochMetrics&)>;

struct RegimeRun {
    AdaptedModel model;
    RunMetrics metrics;
};

inline AdapterConfig adapters_for(Regime regime, AdapterConfig cfg) {
    cfg.head = regime == Regime::chameleon ? HeadKind::hyper : HeadKind::static_lora;
    return cfg;
}

// Runs one regime end to end from a frozen backbone: wrap, then per epoch
// rebuild the cluster-pure schedule, train and evaluate. The unadapted regime
// only evaluates (a single epoch-0 record).
inline RegimeRun run_regime(std::shared_ptr<const TransformerBackbone> backbone, const Corpus& corpus,
                            const ClusteredSplit& train, const ClusteredSplit& val, const TrainConfig& cfg,
                            const EpochCallback& on_epoch = {}) {
    if (!backbone->frozen()) throw Error("run_regime needs a frozen backbone");
    RegimeRun run{AdaptedModel(backbone), {}};
    run.metrics.regime = cfg.regime;
    if (cfg.regime != Regime::unadapted) run.model.wrap(adapters_for(cfg.regime, cfg.adapters), cfg.model_seed);
    run.metrics.trainable_parameters = run.model.trainable_parameter_count();

    const auto schedule_for = [&](std::size_t epoch) {
        return build_schedule(train.plan, cfg.batch_size, mix_seed(cfg.data_seed, epoch), cfg.drop_policy,
                              cfg.drop_policy == DropPolicy::merge ? std::span<const Point>(train.embeddings)
                                                                   : std::span<const Point>())
            .schedule;
    };

    const auto first = schedule_for(1);
    run.metrics.baseline_train_loss = evaluate_schedule(run.model, corpus, train, first).batch_mean;

    if (cfg.regime == Regime::unadapted) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochMetrics em;
        em.epoch = 0;
        em.train_loss = run.metrics.baseline_train_loss;
        const EvalResult ev = evaluate(run.model, corpus, val);
        em.val_loss = ev.loss;
        em.val_perplexity = ev.perplexity;
        em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        run.metrics.epochs.push_back(em);
        if (on_epoch) on_epoch(run.metrics, em);
        return run;
    }

    std::vector<Tensor> params;
    for (auto& nt : run.model.trainable_parameters()) params.push_back(nt.tensor);
    AdamW optimizer(std::move(params), cfg.optim);
    run.model.reseed_dropout(mix_seed(cfg.model_seed, stream::kDropout));
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto schedule = epoch == 1 ? first : schedule_for(epoch);
        EpochMetrics em;
        em.epoch = epoch;
        em.train_loss = train_epoch(run.model, corpus, train, schedule, optimizer, cfg.clip_norm);
        const EvalResult ev = evaluate(run.model, corpus, val);
        em.val_loss = ev.loss;
        em.val_perplexity = ev.perplexity;
        em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        run.metrics.epochs.push_back(em);
        if (epoch == 1 && !(em.train_loss < run.metrics.baseline_train_loss)) {
            run.metrics.flags.push_back("epoch-1 training loss did not improve on the unadapted loss");
        }
        if (on_epoch) on_epoch(run.metrics, em);
    }
    return run;
}

// Ordinary next-token training of an unfrozen backbone on shuffled batches,
// followed by freezing.
inline TransformerBackbone pretrain_backbone(const ModelConfig& model_cfg, const Corpus& corpus,
                                             const PretrainConfig& cfg, std::uint64_t seed,
                                             const std::function<void(std::size_t, Real)>& on_epoch = {}) {
    TransformerBackbone backbone = TransformerBackbone::init(model_cfg, seed);
    if (cfg.epochs == 0) {
        backbone.freeze();
        return backbone;
    }
    backbone.unfreeze();
    std::vector<Tensor> params;
    for (auto& nt : backbone.named_tensors()) params.push_back(nt.tensor);
    AdamW optimizer(std::move(params), cfg.optim);
    std::vector<std::size_t> order = corpus.train;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng = make_rng(mix_seed(seed, epoch), stream::kSchedule);
        std::shuffle(order.begin(), order.end(), rng);
        Real total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<std::vector<std::int32_t>> seqs;
            for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch_size); ++i)
                seqs.push_back(corpus.examples[order[i]].ids);
            TokenBatch tb = TokenBatch::from_sequences(seqs, kPadId);
            auto [targets, mask] = tb.shifted_targets();
            if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) continue;
            Tensor loss = ops::softmax_ce_loss(backbone.head_logits(backbone.forward_hidden(tb)), targets, mask);
            if (!std::isfinite(loss.item())) throw NonFiniteLossError("non-finite pretraining loss");
            total += loss.item();
            ++batches;
            backward(loss);
            clip_grad_norm(optimizer.params(), cfg.clip_norm);
            optimizer.step();
            optimizer.zero_grad();
        }
        if (on_epoch) on_epoch(epoch, batches ? total / static_cast<Real>(batches) : 0.0);
    }
    backbone.freeze();
    return backbone;
}

// Token-weighted next-token loss of the bare backbone over `indices`, in
// sequential batches.
inline Real backbone_loss(const TransformerBackbone& backbone, const Corpus& corpus,
                          const std::vector<std::size_t>& indices, std::size_t batch_size = 32) {
    NoGradGuard no_grad;
    Real weighted = 0.0;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < indices.size(); start += batch_size) {
        std::vector<std::vector<std::int32_t>> seqs;
        for (std::size_t i = start; i < std::min(indices.size(), start + batch_size); ++i)
            seqs.push_back(corpus.examples.at(indices[i]).ids);
        TokenBatch tb = TokenBatch::from_sequences(seqs, kPadId);
        auto [targets, mask] = tb.shifted_targets();
        const auto n = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
        if (n == 0) continue;
        weighted += ops::softmax_ce_loss(backbone.head_logits(backbone.forward_hidden(tb)), targets, mask).item() *
                    static_cast<Real>(n);
        tokens += n;
    }
    if (tokens == 0) throw EmptyLossError("no target tokens to score");
    return weighted / static_cast<Real>(tokens);
}

// Clusters both splits for one seed. The validation split gets its own
// k-means run (seed + 1) and a schedule fixed for the whole run.
inline std::pair<ClusteredSplit, ClusteredSplit> prepare_splits(const TransformerBackbone& backbone,
                                                                const Corpus& corpus, const TrainConfig& cfg,
                                                                std::uint64_t seed) {
    ClusteredSplit train = cluster_split(backbone, corpus, corpus.train, cfg.batch_size, seed, cfg.kmeans);
    ClusteredSplit val = cluster_split(backbone, corpus, corpus.val, cfg.batch_size, seed + 1, cfg.kmeans);
    val.plan = build_schedule(val.plan, cfg.batch_size, mix_seed(seed, 0));
    return {std::move(train), std::move(val)};
}

struct ComparisonRow {
    std::uint64_t seed = 0;
    Regime regime = Regime::unadapted;
    std::size_t parameters = 0;
    Real train_loss = 0.0;
    Real val_loss = 0.0;
    Real val_perplexity = 0.0;
};

struct ComparisonReport {
    std::vector<ComparisonRow> rows;
    std::vector<RunMetrics> runs;          // parallel to rows
    std::vector<bool> chameleon_wins;      // per seed: chameleon val < static_lora val
    std::vector<std::uint64_t> checksum_before;
    std::vector<std::uint64_t> checksum_after;

    std::size_t win_count() const {
        return static_cast<std::size_t>(std::count(chameleon_wins.begin(), chameleon_wins.end(), true));
    }
};

struct CompareOptions {
    ModelConfig model{};
    PretrainConfig pretrain{};
    TrainConfig train{};
};

// For each seed: pretrain and freeze one backbone, then run all three regimes
// from that same backbone with identical clustering and data order.
// `pretrain_corpus` defaults to the training split of `corpus`.
inline ComparisonReport compare_regimes(const Corpus& corpus, const CompareOptions& opt,
                                        const std::vector<std::uint64_t>& seeds,
                                        const Corpus* pretrain_corpus = nullptr,
                                        const EpochCallback& on_epoch = {},
                                        const std::function<void(std::uint64_t, std::size_t, Real)>& on_pretrain = {}) {
    if (seeds.empty()) throw ConfigError("compare_regimes needs at least one seed");
    ComparisonReport report;
    for (std::uint64_t seed : seeds) {
        ModelConfig mc = opt.model;
        mc.vocab_size = corpus.vocab.size();
        auto backbone = std::make_shared<const TransformerBackbone>(pretrain_backbone(
            mc, pretrain_corpus ? *pretrain_corpus : corpus, opt.pretrain, seed,
            [&](std::size_t e, Real l) {
                if (on_pretrain) on_pretrain(seed, e, l);
            }));
        const std::uint64_t before = backbone->checksum();
        const auto [train, val] = prepare_splits(*backbone, corpus, opt.train, seed);

        Real static_val = 0.0, chameleon_val = 0.0;
        for (Regime regime : {Regime::unadapted, Regime::static_lora, Regime::chameleon}) {
            TrainConfig tc = opt.train;
            tc.regime = regime;
            tc.model_seed = seed;
            tc.data_seed = seed;
            tc.cluster_seed = seed;
            RegimeRun run = run_regime(backbone, corpus, train, val, tc, on_epoch);
            const EpochMetrics& fin = run.metrics.final();
            report.rows.push_back({seed, regime, run.metrics.trainable_parameters, fin.train_loss, fin.val_loss,
                                   fin.val_perplexity});
            report.runs.push_back(run.metrics);
            if (regime == Regime::static_lora) static_val = fin.val_loss;
            if (regime == Regime::chameleon) chameleon_val = fin.val_loss;
        }
        report.chameleon_wins.push_back(chameleon_val < static_val);
        report.checksum_before.push_back(before);
        report.checksum_after.push_back(backbone->checksum());
    }
    return report;
}

}  // namespace chameleon
