#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "chameleon/data.hpp"
#include "chameleon/errors.hpp"
#include "chameleon/model.hpp"
#include "chameleon/training.hpp"

namespace chameleon {

inline constexpr const char* kOutputDirEnv = "CHAMELEON_OUTPUT_DIR";

enum class CorpusSource { synthetic, file };

// Where the backbone is pretrained before freezing. `shifted` uses a synthetic
// corpus generated from a different seed (same styles and lengths, different
// grammars) so the frozen model is fluent but wrong for the target corpus.
enum class PretrainSource { shifted, corpus };

struct CorpusConfig {
    CorpusSource source = CorpusSource::synthetic;
    std::string path;
    CorpusFormat format = CorpusFormat::plain;
    TokenizerKind tokenizer = TokenizerKind::character;
    double val_fraction = 0.1;
    std::uint64_t seed = 7;  // generation (synthetic) and split
    std::size_t styles = 4;
    std::size_t per_style = 500;
    SyntheticOptions synthetic{};
};

struct ExperimentConfig {
    CorpusConfig corpus{};
    ModelConfig model{};
    PretrainConfig pretrain{};
    PretrainSource pretrain_source = PretrainSource::shifted;
    std::uint64_t pretrain_source_seed = 1234;
    TrainConfig train{};
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::string backbone;  // checkpoint path; empty pretrains in process
    std::string output_dir = "runs";
};

namespace detail {

// Strict view of one JSON object: every key must be consumed, and type errors
// carry the dotted field path.
class Fields {
public:
    Fields(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    bool has(const std::string& key) {
        seen_.push_back(key);
        return j_.contains(key) && !j_.at(key).is_null();
    }

    const nlohmann::json& raw(const std::string& key) const { return j_.at(key); }

    void uint(const std::string& key, std::size_t& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_number_unsigned()) throw ConfigError(at(key) + ": expected a non-negative integer");
        out = v.get<std::size_t>();
    }

    void u64(const std::string& key, std::uint64_t& out) {
        std::size_t tmp = out;
        uint(key, tmp);
        out = tmp;
    }

    void real(const std::string& key, double& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_number()) throw ConfigError(at(key) + ": expected a number");
        out = v.get<double>();
    }

    void str(const std::string& key, std::string& out) {
        if (!has(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_string()) throw ConfigError(at(key) + ": expected a string");
        out = v.get<std::string>();
    }

    template <typename F>
    void choice(const std::string& key, F parse) {
        std::string s;
        if (!has(key)) return;
        str(key, s);
        try {
            parse(s);
        } catch (const Error& e) {
            throw ConfigError(at(key) + ": " + e.what());
        }
    }

    Fields sub(const std::string& key) {
        if (!has(key)) return Fields(empty(), at(key));
        return Fields(j_.at(key), at(key));
    }

    void done() const {
        for (const auto& [key, value] : j_.items()) {
            if (std::find(seen_.begin(), seen_.end(), key) == seen_.end())
                throw ConfigError(at(key) + ": unknown key");
        }
    }

private:
    static const nlohmann::json& empty() {
        static const nlohmann::json e = nlohmann::json::object();
        return e;
    }

    std::string where() const { return path_.empty() ? "config" : path_; }

    const nlohmann::json& j_;
    std::string path_;
    std::vector<std::string> seen_;
};

inline const char* corpus_source_name(CorpusSource s) { return s == CorpusSource::synthetic ? "synthetic" : "file"; }
inline const char* pretrain_source_name(PretrainSource s) { return s == PretrainSource::shifted ? "shifted" : "corpus"; }
inline const char* format_name(CorpusFormat f) { return f == CorpusFormat::plain ? "plain" : "jsonl"; }
inline const char* drop_policy_name(DropPolicy p) { return p == DropPolicy::keep ? "keep" : "merge"; }

}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    using nlohmann::json;
    const auto& s = c.corpus.synthetic;
    json targets = json::array();
    for (LinearSite site : c.train.adapters.targets) targets.push_back(site_name(site));
    const auto& t = c.train;
    return {
        {"corpus",
         {{"source", detail::corpus_source_name(c.corpus.source)},
          {"path", c.corpus.path},
          {"format", detail::format_name(c.corpus.format)},
          {"tokenizer", tokenizer_name(c.corpus.tokenizer)},
          {"val_fraction", c.corpus.val_fraction},
          {"seed", c.corpus.seed},
          {"synthetic",
           {{"styles", c.corpus.styles},
            {"per_style", c.corpus.per_style},
            {"private_chars", s.private_chars},
            {"shared_chars", s.shared_chars},
            {"min_len", s.min_len},
            {"max_len", s.max_len},
            {"noise", s.noise},
            {"foreign", s.foreign}}}}},
        {"model",
         {{"d_model", c.model.d_model},
          {"n_layers", c.model.n_layers},
          {"n_heads", c.model.n_heads},
          {"d_ff", c.model.d_ff},
          {"max_seq_len", c.model.max_seq_len}}},
        {"pretrain",
         {{"epochs", c.pretrain.epochs},
          {"batch_size", c.pretrain.batch_size},
          {"lr", c.pretrain.optim.lr},
          {"weight_decay", c.pretrain.optim.weight_decay},
          {"clip_norm", c.pretrain.clip_norm},
          {"source", detail::pretrain_source_name(c.pretrain_source)},
          {"source_seed", c.pretrain_source_seed}}},
        {"train",
         {{"regime", regime_name(t.regime)},
          {"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.optim.lr},
          {"beta1", t.optim.beta1},
          {"beta2", t.optim.beta2},
          {"eps", t.optim.eps},
          {"weight_decay", t.optim.weight_decay},
          {"clip_norm", t.clip_norm},
          {"drop_policy", detail::drop_policy_name(t.drop_policy)},
          {"adapters",
           {{"rank", t.adapters.rank},
            {"alpha", t.adapters.alpha ? json(*t.adapters.alpha) : json(nullptr)},
            {"targets", targets},
            {"hyper_hidden_mult", t.adapters.hyper_hidden_mult},
            {"hyper_dropout", t.adapters.hyper_dropout}}},
          {"kmeans", {{"restarts", t.kmeans.restarts}, {"max_iters", t.kmeans.max_iters}, {"tol", t.kmeans.tol}}}}},
        {"seeds", c.seeds},
        {"backbone", c.backbone},
        {"output_dir", c.output_dir},
    };
}

inline void validate(const ExperimentConfig& c) {
    auto need = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError(msg);
    };
    need(c.corpus.source != CorpusSource::file || !c.corpus.path.empty(), "corpus.path: required when corpus.source is file");
    need(c.corpus.val_fraction > 0.0 && c.corpus.val_fraction < 1.0, "corpus.val_fraction: must lie in (0, 1)");
    need(c.corpus.styles >= 2, "corpus.synthetic.styles: must be >= 2");
    need(c.corpus.per_style >= 1, "corpus.synthetic.per_style: must be >= 1");
    const auto& s = c.corpus.synthetic;
    need(s.private_chars >= 1, "corpus.synthetic.private_chars: must be >= 1");
    need(s.min_len >= 1 && s.min_len <= s.max_len, "corpus.synthetic.min_len: must be >= 1 and <= max_len");
    need(s.noise >= 0.0 && s.noise <= 1.0, "corpus.synthetic.noise: must lie in [0, 1]");
    need(s.foreign >= 0.0 && s.foreign <= 1.0, "corpus.synthetic.foreign: must lie in [0, 1]");
    need(c.corpus.styles * s.private_chars + s.shared_chars <= synthetic_alphabet().size(),
         "corpus.synthetic: styles * private_chars + shared_chars exceeds the 94-character alphabet");
    need(c.model.d_model > 0 && c.model.n_layers > 0 && c.model.n_heads > 0 && c.model.d_ff > 0,
         "model: dimensions must be positive");
    need(c.model.d_model % c.model.n_heads == 0, "model.n_heads: must divide model.d_model");
    need(c.model.max_seq_len >= 2, "model.max_seq_len: must be >= 2");
    need(c.pretrain.batch_size >= 1, "pretrain.batch_size: must be >= 1");
    need(c.pretrain.optim.lr >= 0.0, "pretrain.lr: must be >= 0");
    need(c.pretrain_source != PretrainSource::shifted || c.corpus.source == CorpusSource::synthetic,
         "pretrain.source: 'shifted' needs corpus.source = synthetic");
    const auto& t = c.train;
    need(t.batch_size >= 1, "train.batch_size: must be >= 1");
    need(t.optim.lr >= 0.0, "train.lr: must be >= 0");
    need(t.optim.beta1 >= 0.0 && t.optim.beta1 < 1.0, "train.beta1: must lie in [0, 1)");
    need(t.optim.beta2 >= 0.0 && t.optim.beta2 < 1.0, "train.beta2: must lie in [0, 1)");
    need(t.optim.eps > 0.0, "train.eps: must be > 0");
    need(t.adapters.rank >= 1, "train.adapters.rank: must be >= 1");
    need(t.adapters.rank <= c.model.d_model, "train.adapters.rank: must not exceed model.d_model");
    need(t.adapters.hyper_dropout >= 0.0 && t.adapters.hyper_dropout < 1.0,
         "train.adapters.hyper_dropout: must lie in [0, 1)");
    for (std::size_t m : t.adapters.hyper_hidden_mult) need(m >= 1, "train.adapters.hyper_hidden_mult: entries must be >= 1");
    need(t.kmeans.restarts >= 1, "train.kmeans.restarts: must be >= 1");
    need(!c.seeds.empty(), "seeds: at least one seed is required");
}

// Reads a fully specified or partial config object; missing keys keep their
// defaults, unknown keys are errors.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    detail::Fields root(j, "");

    {
        auto f = root.sub("corpus");
        f.choice("source", [&](const std::string& s) {
            if (s == "synthetic") c.corpus.source = CorpusSource::synthetic;
            else if (s == "file") c.corpus.source = CorpusSource::file;
            else throw ConfigError("expected synthetic or file, got '" + s + "'");
        });
        f.str("path", c.corpus.path);
        f.choice("format", [&](const std::string& s) { c.corpus.format = parse_format(s); });
        f.choice("tokenizer", [&](const std::string& s) { c.corpus.tokenizer = parse_tokenizer(s); });
        f.real("val_fraction", c.corpus.val_fraction);
        f.u64("seed", c.corpus.seed);
        auto g = f.sub("synthetic");
        auto& s = c.corpus.synthetic;
        g.uint("styles", c.corpus.styles);
        g.uint("per_style", c.corpus.per_style);
        g.uint("private_chars", s.private_chars);
        g.uint("shared_chars", s.shared_chars);
        g.uint("min_len", s.min_len);
        g.uint("max_len", s.max_len);
        g.real("noise", s.noise);
        g.real("foreign", s.foreign);
        g.done();
        f.done();
    }
    {
        auto f = root.sub("model");
        f.uint("d_model", c.model.d_model);
        f.uint("n_layers", c.model.n_layers);
        f.uint("n_heads", c.model.n_heads);
        f.uint("d_ff", c.model.d_ff);
        f.uint("max_seq_len", c.model.max_seq_len);
        f.done();
    }
    {
        auto f = root.sub("pretrain");
        f.uint("epochs", c.pretrain.epochs);
        f.uint("batch_size", c.pretrain.batch_size);
        f.real("lr", c.pretrain.optim.lr);
        f.real("weight_decay", c.pretrain.optim.weight_decay);
        f.real("clip_norm", c.pretrain.clip_norm);
        f.choice("source", [&](const std::string& s) {
            if (s == "shifted") c.pretrain_source = PretrainSource::shifted;
            else if (s == "corpus") c.pretrain_source = PretrainSource::corpus;
            else throw ConfigError("expected shifted or corpus, got '" + s + "'");
        });
        f.u64("source_seed", c.pretrain_source_seed);
        f.done();
    }
    {
        auto f = root.sub("train");
        auto& t = c.train;
        f.choice("regime", [&](const std::string& s) { t.regime = parse_regime(s); });
        f.uint("epochs", t.epochs);
        f.uint("batch_size", t.batch_size);
        f.real("lr", t.optim.lr);
        f.real("beta1", t.optim.beta1);
        f.real("beta2", t.optim.beta2);
        f.real("eps", t.optim.eps);
        f.real("weight_decay", t.optim.weight_decay);
        f.real("clip_norm", t.clip_norm);
        f.choice("drop_policy", [&](const std::string& s) {
            if (s == "keep") t.drop_policy = DropPolicy::keep;
            else if (s == "merge") t.drop_policy = DropPolicy::merge;
            else throw ConfigError("expected keep or merge, got '" + s + "'");
        });
        auto a = f.sub("adapters");
        a.uint("rank", t.adapters.rank);
        if (a.has("alpha")) {
            double alpha = 0.0;
            a.real("alpha", alpha);
            t.adapters.alpha = alpha;
        }
        if (a.has("targets")) {
            const auto& arr = a.raw("targets");
            if (!arr.is_array()) throw ConfigError(a.at("targets") + ": expected an array of site names");
            t.adapters.targets.clear();
            for (const auto& v : arr) {
                if (!v.is_string()) throw ConfigError(a.at("targets") + ": expected site names");
                try {
                    t.adapters.targets.push_back(parse_site(v.get<std::string>()));
                } catch (const Error& e) {
                    throw ConfigError(a.at("targets") + ": " + e.what());
                }
            }
        }
        if (a.has("hyper_hidden_mult")) {
            const auto& arr = a.raw("hyper_hidden_mult");
            if (!arr.is_array()) throw ConfigError(a.at("hyper_hidden_mult") + ": expected an array");
            t.adapters.hyper_hidden_mult.clear();
            for (const auto& v : arr) {
                if (!v.is_number_unsigned()) throw ConfigError(a.at("hyper_hidden_mult") + ": expected integers");
                t.adapters.hyper_hidden_mult.push_back(v.get<std::size_t>());
            }
        }
        a.real("hyper_dropout", t.adapters.hyper_dropout);
        a.done();
        auto k = f.sub("kmeans");
        k.uint("restarts", t.kmeans.restarts);
        k.uint("max_iters", t.kmeans.max_iters);
        k.real("tol", t.kmeans.tol);
        k.done();
        f.done();
    }
    if (root.has("seeds")) {
        const auto& arr = root.raw("seeds");
        if (!arr.is_array()) throw ConfigError("seeds: expected an array of non-negative integers");
        c.seeds.clear();
        for (const auto& v : arr) {
            if (!v.is_number_unsigned()) throw ConfigError("seeds: expected an array of non-negative integers");
            c.seeds.push_back(v.get<std::uint64_t>());
        }
    }
    root.str("backbone", c.backbone);
    root.str("output_dir", c.output_dir);
    root.done();
    validate(c);
    return c;
}

// Parses JSON text that may contain // and /* */ comments.
inline nlohmann::json parse_config_text(const std::string& text, const std::string& origin) {
    try {
        return nlohmann::json::parse(text, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(origin + ": " + e.what());
    }
}

// A run manifest can stand in for a config file; its resolved config is used.
inline nlohmann::json read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    nlohmann::json j = parse_config_text(ss.str(), path.string());
    if (j.is_object() && j.value("kind", "") == "chameleon-manifest") return j.at("config");
    return j;
}

// Sets `dotted.key` to `value` in a JSON tree. The value is read as JSON when it
// parses, otherwise as a plain string.
inline void set_path(nlohmann::json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    nlohmann::json value;
    try {
        value = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
        value = text;
    }
    nlohmann::json* node = &j;
    std::size_t start = 0;
    for (;;) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("--set: malformed key '" + key + "'");
        if (!node->is_object()) throw ConfigError("--set: '" + key + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        if (node->is_null()) *node = nlohmann::json::object();
        start = dot + 1;
    }
}

// Resolution order: built-in defaults, then the config file, then the
// CHAMELEON_OUTPUT_DIR environment variable, then explicit overrides.
inline ExperimentConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                       const std::vector<std::string>& overrides = {}) {
    nlohmann::json j = config_to_json(ExperimentConfig{});
    if (file) {
        const nlohmann::json user = read_config_file(*file);
        if (!user.is_object()) throw ConfigError(file->string() + ": expected a JSON object at top level");
        j.merge_patch(user);
    }
    if (const char* env = std::getenv(kOutputDirEnv); env && *env) j["output_dir"] = env;
    for (const auto& o : overrides) set_path(j, o);
    return config_from_json(j);
}

// Corpus described by the config. `vocab` forces a fixed vocabulary (e.g. the
// one stored with a backbone checkpoint).
inline Corpus build_experiment_corpus(const ExperimentConfig& c, std::optional<Vocabulary> vocab = std::nullopt) {
    if (c.corpus.source == CorpusSource::synthetic) {
        SyntheticOptions so = c.corpus.synthetic;
        so.max_seq_len = c.model.max_seq_len;
        so.val_fraction = c.corpus.val_fraction;
        return make_synthetic_corpus(c.corpus.styles, c.corpus.per_style, c.corpus.seed, so, std::move(vocab));
    }
    if (!std::filesystem::exists(c.corpus.path)) throw ConfigError("corpus.path: no such file: " + c.corpus.path);
    CorpusOptions opt;
    opt.tokenizer = c.corpus.tokenizer;
    opt.max_seq_len = c.model.max_seq_len;
    opt.val_fraction = c.corpus.val_fraction;
    opt.seed = c.corpus.seed;
    opt.vocab = std::move(vocab);
    return load_corpus(c.corpus.path, c.corpus.format, opt);
}

// Corpus the backbone is pretrained on, tokenized with the target vocabulary.
// Empty means the target corpus itself.
inline std::optional<Corpus> build_pretrain_corpus(const ExperimentConfig& c, const Corpus& target) {
    if (c.pretrain_source == PretrainSource::corpus) return std::nullopt;
    SyntheticOptions so = c.corpus.synthetic;
    so.max_seq_len = c.model.max_seq_len;
    so.val_fraction = c.corpus.val_fraction;
    return make_synthetic_corpus(c.corpus.styles, c.corpus.per_style, c.pretrain_source_seed, so, target.vocab);
}

inline CompareOptions compare_options(const ExperimentConfig& c) {
    CompareOptions opt;
    opt.model = c.model;
    opt.pretrain = c.pretrain;
    opt.train = c.train;
    return opt;
}

}  // namespace chameleon
