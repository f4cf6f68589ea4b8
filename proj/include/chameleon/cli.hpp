#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "chameleon/checkpoint.hpp"
#include "chameleon/config.hpp"
#include "chameleon/training.hpp"

namespace chameleon::cli {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kRuntimeFailure = 1, kUsageError = 2 };

inline std::string format_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string hex64(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline const char* kSummaryHeader = "epoch,regime,parameters,train_loss,val_loss,val_perplexity";
inline const char* kCompareHeader = "seed,regime,parameters,train_loss,val_loss,val_perplexity";

// Everything needed to rerun a command: the resolved config, what it ran on,
// and where it wrote. Written before any training starts.
struct RunManifest {
    std::string command;
    nlohmann::json config;
    std::string corpus_checksum;
    std::string version = kVersion;
    std::vector<std::uint64_t> seeds;
    nlohmann::json outputs = nlohmann::json::object();

    nlohmann::json to_json() const {
        return {{"kind", "chameleon-manifest"}, {"command", command},
                {"version", version},           {"config", config},
                {"corpus_checksum", corpus_checksum}, {"seeds", seeds},
                {"outputs", outputs}};
    }

    void write(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw Error("cannot write manifest: " + path.string());
        out << to_json().dump(2) << '\n';
    }
};

inline nlohmann::json adapter_config_json(const AdapterConfig& a) {
    nlohmann::json targets = nlohmann::json::array();
    for (LinearSite s : a.targets) targets.push_back(site_name(s));
    return {{"rank", a.rank},
            {"alpha", a.scale_numerator()},
            {"targets", targets},
            {"head", a.head == HeadKind::hyper ? "hyper" : "static_lora"},
            {"hyper_hidden_mult", a.hyper_hidden_mult},
            {"hyper_dropout", a.hyper_dropout}};
}

inline AdapterConfig adapter_config_from_json(const nlohmann::json& j) {
    AdapterConfig a;
    a.rank = j.at("rank").get<std::size_t>();
    a.alpha = j.at("alpha").get<double>();
    a.targets.clear();
    for (const auto& t : j.at("targets")) a.targets.push_back(parse_site(t.get<std::string>()));
    a.head = j.at("head").get<std::string>() == "hyper" ? HeadKind::hyper : HeadKind::static_lora;
    a.hyper_hidden_mult = j.at("hyper_hidden_mult").get<std::vector<std::size_t>>();
    a.hyper_dropout = j.at("hyper_dropout").get<double>();
    return a;
}

inline nlohmann::json epoch_record(std::uint64_t seed, const RunMetrics& run, const EpochMetrics& e) {
    return {{"seed", seed},
            {"regime", regime_name(run.regime)},
            {"epoch", e.epoch},
            {"parameters", run.trainable_parameters},
            {"train_loss", e.train_loss},
            {"val_loss", e.val_loss},
            {"val_perplexity", e.val_perplexity},
            {"seconds", e.seconds},
            {"flags", run.flags}};
}

struct Context {
    ExperimentConfig config;
    std::filesystem::path out_dir;
    std::ostream& out;
    std::ostream& err;
};

struct LoadedBackbone {
    std::shared_ptr<const TransformerBackbone> model;
    Corpus corpus;
    std::optional<Corpus> pretrain_corpus;
};

inline void check_model_matches(const ModelConfig& ckpt, const ModelConfig& cfg, std::size_t vocab) {
    auto check = [](const char* field, std::size_t a, std::size_t b) {
        if (a != b) {
            throw ConfigError(std::string("backbone checkpoint has ") + field + "=" + std::to_string(a) +
                              " but the config asks for " + std::to_string(b));
        }
    };
    check("d_model", ckpt.d_model, cfg.d_model);
    check("n_layers", ckpt.n_layers, cfg.n_layers);
    check("n_heads", ckpt.n_heads, cfg.n_heads);
    check("d_ff", ckpt.d_ff, cfg.d_ff);
    check("max_seq_len", ckpt.max_seq_len, cfg.max_seq_len);
    check("vocab_size", ckpt.vocab_size, vocab);
}

inline checkpoint::Checkpoint backbone_checkpoint(const TransformerBackbone& m, const Corpus& corpus, std::uint64_t seed) {
    auto ckpt = m.to_checkpoint();
    ckpt.metadata["kind"] = "backbone";
    ckpt.metadata["vocab"] = corpus.vocab.to_json();
    ckpt.metadata["seed"] = seed;
    return ckpt;
}

// Loads the configured backbone checkpoint, or pretrains one in process when
// the config names none. The corpus is tokenized with the checkpoint's
// vocabulary when it carries one.
inline LoadedBackbone obtain_backbone(const Context& ctx, std::uint64_t seed) {
    const ExperimentConfig& c = ctx.config;
    LoadedBackbone lb;
    if (!c.backbone.empty()) {
        if (!std::filesystem::exists(c.backbone)) throw ConfigError("backbone: no such file: " + c.backbone);
        const auto ckpt = checkpoint::load(c.backbone);
        std::optional<Vocabulary> vocab;
        if (ckpt.metadata.contains("vocab")) vocab = Vocabulary::from_json(ckpt.metadata.at("vocab"));
        lb.corpus = build_experiment_corpus(c, vocab);
        auto model = TransformerBackbone::from_checkpoint(ckpt);
        check_model_matches(model.config(), c.model, lb.corpus.vocab.size());
        if (!model.frozen()) model.freeze();
        lb.model = std::make_shared<const TransformerBackbone>(std::move(model));
        return lb;
    }
    lb.corpus = build_experiment_corpus(c);
    lb.pretrain_corpus = build_pretrain_corpus(c, lb.corpus);
    ModelConfig mc = c.model;
    mc.vocab_size = lb.corpus.vocab.size();
    lb.model = std::make_shared<const TransformerBackbone>(pretrain_backbone(
        mc, lb.pretrain_corpus ? *lb.pretrain_corpus : lb.corpus, c.pretrain, seed,
        [&](std::size_t e, Real loss) { ctx.err << "pretrain epoch " << e << " loss " << format_real(loss) << '\n'; }));
    return lb;
}

inline std::ofstream open_output(const std::filesystem::path& p) {
    std::ofstream f(p);
    if (!f) throw Error("cannot write " + p.string());
    return f;
}

inline int cmd_pretrain(const Context& ctx, std::uint64_t seed) {
    const ExperimentConfig& c = ctx.config;
    const Corpus corpus = build_experiment_corpus(c);
    const std::optional<Corpus> source = build_pretrain_corpus(c, corpus);
    const Corpus& data = source ? *source : corpus;

    RunManifest manifest;
    manifest.command = "pretrain";
    manifest.config = config_to_json(c);
    manifest.corpus_checksum = hex64(data.checksum());
    manifest.seeds = {seed};
    manifest.outputs = {{"backbone", (ctx.out_dir / "backbone.ckpt").string()},
                        {"metrics", (ctx.out_dir / "pretrain.jsonl").string()}};
    manifest.write(ctx.out_dir / "manifest.json");

    ModelConfig mc = c.model;
    mc.vocab_size = corpus.vocab.size();
    const Real before = backbone_loss(TransformerBackbone::init(mc, seed), data, data.val);
    std::ofstream metrics = open_output(ctx.out_dir / "pretrain.jsonl");
    const TransformerBackbone model = pretrain_backbone(mc, data, c.pretrain, seed, [&](std::size_t e, Real loss) {
        metrics << nlohmann::json{{"epoch", e}, {"train_loss", loss}}.dump() << '\n';
        ctx.err << "pretrain epoch " << e << " loss " << format_real(loss) << '\n';
    });
    const Real after = backbone_loss(model, data, data.val);
    metrics << nlohmann::json{{"val_loss_initial", before}, {"val_loss", after}}.dump() << '\n';
    checkpoint::save(ctx.out_dir / "backbone.ckpt", backbone_checkpoint(model, corpus, seed));
    ctx.out << "val_loss " << format_real(before) << " -> " << format_real(after) << "\n"
            << "backbone checksum " << hex64(model.checksum()) << "\n"
            << "wrote " << (ctx.out_dir / "backbone.ckpt").string() << '\n';
    return kOk;
}

inline int cmd_train(const Context& ctx, std::uint64_t seed) {
    const ExperimentConfig& c = ctx.config;
    const LoadedBackbone lb = obtain_backbone(ctx, seed);
    const bool adapted = c.train.regime != Regime::unadapted;

    RunManifest manifest;
    manifest.command = "train";
    manifest.config = config_to_json(c);
    manifest.corpus_checksum = hex64(lb.corpus.checksum());
    manifest.seeds = {seed};
    manifest.outputs = {{"metrics", (ctx.out_dir / "metrics.jsonl").string()},
                        {"summary", (ctx.out_dir / "summary.csv").string()}};
    if (adapted) manifest.outputs["adapters"] = (ctx.out_dir / "adapters.ckpt").string();
    manifest.write(ctx.out_dir / "manifest.json");

    TrainConfig tc = c.train;
    tc.model_seed = tc.data_seed = tc.cluster_seed = seed;
    const auto [train, val] = prepare_splits(*lb.model, lb.corpus, tc, seed);
    std::ofstream metrics = open_output(ctx.out_dir / "metrics.jsonl");
    RegimeRun run = run_regime(lb.model, lb.corpus, train, val, tc, [&](const RunMetrics& r, const EpochMetrics& e) {
        metrics << epoch_record(seed, r, e).dump() << '\n';
        metrics.flush();
        ctx.err << regime_name(r.regime) << " epoch " << e.epoch << " train " << format_real(e.train_loss) << " val "
                << format_real(e.val_loss) << '\n';
    });
    for (const auto& f : run.metrics.flags) ctx.err << "warning: " << f << '\n';

    std::ofstream csv = open_output(ctx.out_dir / "summary.csv");
    csv << kSummaryHeader << '\n';
    for (const auto& e : run.metrics.epochs) {
        csv << e.epoch << ',' << regime_name(run.metrics.regime) << ',' << run.metrics.trainable_parameters << ','
            << format_real(e.train_loss) << ',' << format_real(e.val_loss) << ',' << format_real(e.val_perplexity)
            << '\n';
    }
    if (adapted) {
        auto ckpt = run.model.adapters_checkpoint();
        ckpt.metadata["regime"] = regime_name(c.train.regime);
        ckpt.metadata["adapters"] = adapter_config_json(adapters_for(c.train.regime, c.train.adapters));
        ckpt.metadata["seed"] = seed;
        checkpoint::save(ctx.out_dir / "adapters.ckpt", ckpt);
    }
    const auto& fin = run.metrics.final();
    ctx.out << regime_name(run.metrics.regime) << " parameters " << run.metrics.trainable_parameters << " val_loss "
            << format_real(fin.val_loss) << " val_perplexity " << format_real(fin.val_perplexity) << '\n';
    return kOk;
}

inline int cmd_eval(const Context& ctx, std::uint64_t seed, const std::string& adapters_path) {
    const LoadedBackbone lb = obtain_backbone(ctx, seed);
    AdaptedModel model(lb.model);
    std::string regime = "unadapted";
    if (!adapters_path.empty()) {
        if (!std::filesystem::exists(adapters_path)) throw ConfigError("adapters: no such file: " + adapters_path);
        const auto ckpt = checkpoint::load(adapters_path);
        if (ckpt.metadata.value("kind", "") != "adapters" || !ckpt.metadata.contains("adapters"))
            throw CheckpointError("not an adapter checkpoint: " + adapters_path);
        model.wrap(adapter_config_from_json(ckpt.metadata.at("adapters")), seed);
        model.load_adapters(ckpt);
        regime = ckpt.metadata.value("regime", "static_lora");
    }
    TrainConfig tc = ctx.config.train;
    const auto [train, val] = prepare_splits(*lb.model, lb.corpus, tc, seed);
    const EvalResult ev = evaluate(model, lb.corpus, val);
    const nlohmann::json result = {{"regime", regime},
                                   {"parameters", model.trainable_parameter_count()},
                                   {"val_loss", ev.loss},
                                   {"val_perplexity", ev.perplexity}};
    std::ofstream f = open_output(ctx.out_dir / "eval.json");
    f << result.dump(2) << '\n';
    ctx.out << result.dump() << '\n';
    return kOk;
}

inline int cmd_compare(const Context& ctx, const std::vector<std::uint64_t>& seeds) {
    const ExperimentConfig& c = ctx.config;
    if (!c.backbone.empty()) {
        throw ConfigError("backbone: compare pretrains one backbone per seed; leave backbone empty");
    }
    const Corpus corpus = build_experiment_corpus(c);
    const std::optional<Corpus> source = build_pretrain_corpus(c, corpus);

    RunManifest manifest;
    manifest.command = "compare";
    manifest.config = config_to_json(c);
    manifest.config["seeds"] = seeds;
    manifest.corpus_checksum = hex64(corpus.checksum());
    manifest.seeds = seeds;
    manifest.outputs = {{"metrics", (ctx.out_dir / "metrics.jsonl").string()},
                        {"comparison", (ctx.out_dir / "compare.csv").string()},
                        {"report", (ctx.out_dir / "compare.json").string()}};
    manifest.write(ctx.out_dir / "manifest.json");

    std::ofstream metrics = open_output(ctx.out_dir / "metrics.jsonl");
    std::uint64_t current_seed = seeds.front();
    const ComparisonReport report = compare_regimes(
        corpus, compare_options(c), seeds, source ? &*source : nullptr,
        [&](const RunMetrics& r, const EpochMetrics& e) {
            metrics << epoch_record(current_seed, r, e).dump() << '\n';
            metrics.flush();
            ctx.err << "seed " << current_seed << ' ' << regime_name(r.regime) << " epoch " << e.epoch << " val "
                    << format_real(e.val_loss) << '\n';
        },
        [&](std::uint64_t s, std::size_t e, Real loss) {
            current_seed = s;
            ctx.err << "seed " << s << " pretrain epoch " << e << " loss " << format_real(loss) << '\n';
        });

    std::ofstream csv = open_output(ctx.out_dir / "compare.csv");
    csv << kCompareHeader << '\n';
    for (const auto& row : report.rows) {
        csv << row.seed << ',' << regime_name(row.regime) << ',' << row.parameters << ','
            << format_real(row.train_loss) << ',' << format_real(row.val_loss) << ','
            << format_real(row.val_perplexity) << '\n';
    }
    nlohmann::json summary = {{"seeds", seeds},
                              {"chameleon_wins", report.chameleon_wins},
                              {"win_count", report.win_count()},
                              {"backbone_checksum_before", nlohmann::json::array()},
                              {"backbone_checksum_after", nlohmann::json::array()},
                              {"flags", nlohmann::json::array()}};
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        summary["backbone_checksum_before"].push_back(hex64(report.checksum_before[i]));
        summary["backbone_checksum_after"].push_back(hex64(report.checksum_after[i]));
    }
    for (std::size_t i = 0; i < report.runs.size(); ++i)
        for (const auto& f : report.runs[i].flags)
            summary["flags"].push_back({{"seed", report.rows[i].seed}, {"regime", regime_name(report.rows[i].regime)},
                                        {"flag", f}});
    std::ofstream js = open_output(ctx.out_dir / "compare.json");
    js << summary.dump(2) << '\n';

    char line[160];
    std::snprintf(line, sizeof line, "%-6s %-12s %10s %12s %12s %14s\n", "seed", "regime", "params", "train_loss",
                  "val_loss", "val_ppl");
    ctx.out << line;
    for (const auto& row : report.rows) {
        std::snprintf(line, sizeof line, "%-6llu %-12s %10zu %12.4f %12.4f %14.4f\n",
                      static_cast<unsigned long long>(row.seed), regime_name(row.regime), row.parameters,
                      row.train_loss, row.val_loss, row.val_perplexity);
        ctx.out << line;
    }
    ctx.out << "chameleon beat static_lora in " << report.win_count() << " of " << seeds.size() << " seeds\n";
    return kOk;
}

inline int cmd_cluster(const Context& ctx, std::uint64_t seed, std::optional<std::size_t> k_override) {
    const ExperimentConfig& c = ctx.config;
    const LoadedBackbone lb = obtain_backbone(ctx, seed);
    const auto& idx = lb.corpus.train;
    const auto emb = embed_examples(*lb.model, lb.corpus, idx);
    const std::size_t k = k_override.value_or(choose_k(idx.size(), c.train.batch_size));
    ClusterPlan plan = kmeans(emb, k, seed, c.train.kmeans);
    plan = build_schedule(std::move(plan), c.train.batch_size, mix_seed(seed, 1), c.train.drop_policy,
                          c.train.drop_policy == DropPolicy::merge ? std::span<const Point>(emb)
                                                                   : std::span<const Point>());

    nlohmann::json clusters = nlohmann::json::array();
    for (const auto& members : plan.members()) {
        std::vector<std::size_t> ids;
        for (std::size_t m : members) ids.push_back(idx[m]);
        clusters.push_back(ids);
    }
    nlohmann::json report = {{"k", plan.k},
                             {"n", idx.size()},
                             {"sizes", plan.cluster_sizes()},
                             {"objective", plan.objective},
                             {"objective_history", plan.objective_history},
                             {"batches", plan.schedule.size()},
                             {"clusters", clusters}};
    std::vector<int> labels;
    for (std::size_t i : idx) labels.push_back(lb.corpus.examples[i].style);
    if (std::all_of(labels.begin(), labels.end(), [](int s) { return s >= 0; })) {
        report["purity"] = cluster_purity(plan.assignment, labels, plan.k);
    }
    std::ofstream f = open_output(ctx.out_dir / "clusters.json");
    f << report.dump(2) << '\n';
    ctx.out << "k " << plan.k << " objective " << format_real(plan.objective);
    if (report.contains("purity")) ctx.out << " purity " << format_real(report["purity"].get<double>());
    ctx.out << '\n';
    return kOk;
}

// Entry point shared by the executable and the tests.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Clustered batches with hypernetwork-generated low-rank LM-head updates"};
    app.name("chameleon");
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    std::string config_path, output_dir, backbone, regime, adapters_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs, rank, k;
    std::optional<double> lr;
    std::vector<std::uint64_t> seeds;

    auto common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "Config file (JSON, comments allowed) or run manifest");
        sub->add_option("-o,--output-dir", output_dir, "Output directory (overrides $CHAMELEON_OUTPUT_DIR)");
        sub->add_option("--set", overrides, "Override a config field: key.path=value")->allow_extra_args(false);
        sub->add_option("--seed", seed, "Seed (default: first entry of seeds)");
    };
    auto* pretrain = app.add_subcommand("pretrain", "Pretrain and freeze a backbone");
    common(pretrain);
    pretrain->add_option("--epochs", epochs, "Pretraining epochs");

    auto* train = app.add_subcommand("train", "Train one adaptation regime on a frozen backbone");
    common(train);
    train->add_option("--backbone", backbone, "Frozen backbone checkpoint");
    train->add_option("--regime", regime, "unadapted, static_lora or chameleon");
    train->add_option("--epochs", epochs, "Training epochs");
    train->add_option("--lr", lr, "Learning rate");
    train->add_option("--rank", rank, "Adapter rank");

    auto* eval = app.add_subcommand("eval", "Validation loss of a backbone with optional adapters");
    common(eval);
    eval->add_option("--backbone", backbone, "Frozen backbone checkpoint");
    eval->add_option("--adapters", adapters_path, "Adapter checkpoint written by train");

    auto* compare = app.add_subcommand("compare", "Run all three regimes for each seed");
    common(compare);
    compare->add_option("seeds", seeds, "Seeds (default: the config's seeds)");
    compare->add_option("--epochs", epochs, "Training epochs");

    auto* cluster = app.add_subcommand("cluster", "Cluster the training split and report the plan");
    common(cluster);
    cluster->add_option("--backbone", backbone, "Frozen backbone checkpoint");
    cluster->add_option("--k", k, "Number of clusters (default: from the batch size)");

    auto* defaults = app.add_subcommand("defaults", "Print the default config");

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kOk : kUsageError;
    }

    try {
        if (defaults->parsed()) {
            out << config_to_json(ExperimentConfig{}).dump(2) << '\n';
            return kOk;
        }
        CLI::App* sub = app.get_subcommands().front();
        if (epochs) overrides.push_back((sub == pretrain ? "pretrain.epochs=" : "train.epochs=") + std::to_string(*epochs));
        if (lr) overrides.push_back("train.lr=" + format_real(*lr));
        if (rank) overrides.push_back("train.adapters.rank=" + std::to_string(*rank));
        if (!regime.empty()) overrides.push_back("train.regime=\"" + regime + "\"");
        if (!backbone.empty()) overrides.push_back("backbone=" + nlohmann::json(backbone).dump());
        if (!output_dir.empty()) overrides.push_back("output_dir=" + nlohmann::json(output_dir).dump());
        if (!seeds.empty()) overrides.push_back("seeds=" + nlohmann::json(seeds).dump());

        std::optional<std::filesystem::path> file;
        if (!config_path.empty()) file = config_path;
        Context ctx{resolve_config(file, overrides), {}, out, err};
        ctx.out_dir = ctx.config.output_dir;
        std::filesystem::create_directories(ctx.out_dir);
        const std::uint64_t s = seed.value_or(ctx.config.seeds.front());

        if (sub == pretrain) return cmd_pretrain(ctx, s);
        if (sub == train) return cmd_train(ctx, s);
        if (sub == eval) return cmd_eval(ctx, s, adapters_path);
        if (sub == compare) return cmd_compare(ctx, ctx.config.seeds);
        if (sub == cluster) return cmd_cluster(ctx, s, k);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kUsageError;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kRuntimeFailure;
    }
    return kUsageError;
}

inline int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args);
}

}  // namespace chameleon::cli
