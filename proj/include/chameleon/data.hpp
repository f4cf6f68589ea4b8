#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "chameleon/checkpoint.hpp"
#include "chameleon/errors.hpp"
#include "chameleon/model.hpp"
#include "chameleon/rng.hpp"
#include "chameleon/tensor.hpp"

namespace chameleon {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kBosId = 1;
inline constexpr std::int32_t kUnkId = 2;

enum class TokenizerKind { character, whitespace };
enum class CorpusFormat { plain, jsonl };

inline TokenizerKind parse_tokenizer(const std::string& s) {
    if (s == "char") return TokenizerKind::character;
    if (s == "whitespace") return TokenizerKind::whitespace;
    throw ConfigError("unknown tokenizer '" + s + "' (expected char or whitespace)");
}

inline std::string tokenizer_name(TokenizerKind k) { return k == TokenizerKind::character ? "char" : "whitespace"; }

inline CorpusFormat parse_format(const std::string& s) {
    if (s == "plain") return CorpusFormat::plain;
    if (s == "jsonl") return CorpusFormat::jsonl;
    throw ConfigError("unknown corpus format '" + s + "' (expected plain or jsonl)");
}

// Splits text into UTF-8 characters or whitespace-separated words.
inline std::vector<std::string> split_tokens(const std::string& text, TokenizerKind kind) {
    std::vector<std::string> out;
    if (kind == TokenizerKind::character) {
        for (std::size_t i = 0; i < text.size();) {
            const auto lead = static_cast<unsigned char>(text[i]);
            std::size_t len = 1;
            if (lead >= 0xF0) len = 4;
            else if (lead >= 0xE0) len = 3;
            else if (lead >= 0xC0) len = 2;
            len = std::min(len, text.size() - i);
            out.push_back(text.substr(i, len));
            i += len;
        }
    } else {
        std::size_t i = 0;
        while (i < text.size()) {
            while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
            std::size_t j = i;
            while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
            if (j > i) out.push_back(text.substr(i, j - i));
            i = j;
        }
    }
    return out;
}

class Vocabulary {
public:
    Vocabulary() : tokens_{"<pad>", "<bos>", "<unk>"} {}

    // Specials first, then every distinct token of `texts` in sorted order.
    static Vocabulary build(const std::vector<std::string>& texts, TokenizerKind kind) {
        std::vector<std::string> uniq;
        for (const auto& t : texts)
            for (auto& tok : split_tokens(t, kind)) uniq.push_back(std::move(tok));
        std::sort(uniq.begin(), uniq.end());
        uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
        Vocabulary v;
        v.kind_ = kind;
        for (auto& t : uniq) v.tokens_.push_back(std::move(t));
        v.reindex();
        return v;
    }

    std::size_t size() const { return tokens_.size(); }
    TokenizerKind kind() const { return kind_; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::int32_t id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnkId : it->second;
    }

    std::vector<std::int32_t> encode(const std::string& text) const {
        std::vector<std::int32_t> ids;
        for (const auto& tok : split_tokens(text, kind_)) ids.push_back(id(tok));
        return ids;
    }

    // Inverse of encode for in-vocabulary text; specials are skipped.
    std::string decode(std::span<const std::int32_t> ids) const {
        std::string out;
        bool first = true;
        for (std::int32_t id : ids) {
            if (id == kPadId || id == kBosId) continue;
            if (kind_ == TokenizerKind::whitespace && !first) out += ' ';
            out += tokens_.at(static_cast<std::size_t>(id));
            first = false;
        }
        return out;
    }

    nlohmann::json to_json() const { return {{"tokenizer", tokenizer_name(kind_)}, {"tokens", tokens_}}; }

    static Vocabulary from_json(const nlohmann::json& j) {
        Vocabulary v;
        v.kind_ = parse_tokenizer(j.at("tokenizer").get<std::string>());
        v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
        if (v.tokens_.size() < 3) throw CorpusError("vocabulary is missing its special tokens");
        v.reindex();
        return v;
    }

private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 3; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<std::int32_t>(i);
    }

    TokenizerKind kind_ = TokenizerKind::character;
    std::vector<std::string> tokens_;
    std::map<std::string, std::int32_t> index_;
};

struct TokenizedExample {
    std::vector<std::int32_t> ids;  // BOS first, truncated to max_seq_len
    // Token index range [first, last) used for the example embedding.
    std::optional<std::pair<std::size_t, std::size_t>> instruction_span;
    int style = -1;  // ground-truth label of synthetic corpora; diagnostics only
};

struct Corpus {
    Vocabulary vocab;
    std::vector<TokenizedExample> examples;
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;

    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&h](std::uint64_t v) {
            for (int i = 0; i < 8; ++i) {
                h ^= (v >> (8 * i)) & 0xFF;
                h *= 0x100000001b3ULL;
            }
        };
        for (const auto& t : vocab.tokens())
            for (char c : t) feed(static_cast<unsigned char>(c));
        for (const auto& ex : examples) {
            feed(ex.ids.size());
            for (auto id : ex.ids) feed(static_cast<std::uint64_t>(id));
            feed(static_cast<std::uint64_t>(ex.style + 1));
        }
        for (auto i : train) feed(i);
        feed(~0ULL);
        for (auto i : val) feed(i);
        return h;
    }

    std::vector<int> labels() const {
        std::vector<int> out;
        for (const auto& ex : examples) out.push_back(ex.style);
        return out;
    }
};

struct RawExample {
    std::string text;
    std::optional<std::string> instruction;
    int style = -1;
};

struct CorpusOptions {
    TokenizerKind tokenizer = TokenizerKind::character;
    std::size_t max_seq_len = 64;
    double val_fraction = 0.1;
    std::uint64_t seed = 0;
    // When set, tokenize with this vocabulary instead of building one.
    std::optional<Vocabulary> vocab;
};

namespace detail {

inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double val_fraction,
                                                                                    std::uint64_t seed) {
    if (val_fraction < 0.0 || val_fraction >= 1.0) throw ConfigError("corpus.val_fraction must be in [0, 1)");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(seed, stream::kSplit);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    std::sort(val.begin(), val.end());
    std::sort(train.begin(), train.end());
    if (train.empty()) throw CorpusError("split leaves no training examples");
    return {train, val};
}

}  // namespace detail

// Tokenizes raw examples, splits them, and builds the vocabulary from the
// training split only (unless one is supplied).
inline Corpus build_corpus(const std::vector<RawExample>& raw, const CorpusOptions& opt) {
    if (raw.empty()) throw CorpusError("corpus is empty");
    if (opt.max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
    Corpus c;
    std::tie(c.train, c.val) = detail::split_indices(raw.size(), opt.val_fraction, opt.seed);
    if (opt.vocab) {
        c.vocab = *opt.vocab;
    } else {
        std::vector<std::string> texts;
        for (std::size_t i : c.train) {
            texts.push_back(raw[i].text);
            if (raw[i].instruction) texts.push_back(*raw[i].instruction);
        }
        c.vocab = Vocabulary::build(texts, opt.tokenizer);
    }
    for (const auto& r : raw) {
        TokenizedExample ex;
        ex.style = r.style;
        ex.ids.push_back(kBosId);
        if (r.instruction) {
            auto instr = c.vocab.encode(*r.instruction);
            ex.ids.insert(ex.ids.end(), instr.begin(), instr.end());
            ex.instruction_span = std::make_pair(std::size_t{1}, std::min(ex.ids.size(), opt.max_seq_len));
        }
        auto body = c.vocab.encode(r.text);
        ex.ids.insert(ex.ids.end(), body.begin(), body.end());
        if (ex.ids.size() > opt.max_seq_len) ex.ids.resize(opt.max_seq_len);
        c.examples.push_back(std::move(ex));
    }
    return c;
}

// plain: one example per non-empty line. jsonl: one object per non-empty
// line with a string "text" and an optional string "instruction"; the
// instruction tokens precede the text and alone determine the embedding.
inline std::vector<RawExample> read_corpus_file(const std::filesystem::path& path, CorpusFormat format) {
    std::ifstream in(path);
    if (!in) throw CorpusError("cannot read corpus file: " + path.string());
    std::vector<RawExample> raw;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        if (format == CorpusFormat::plain) {
            raw.push_back({line, std::nullopt});
            continue;
        }
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw CorpusError(path.string() + ":" + std::to_string(line_no) + ": malformed JSON (" + e.what() + ")");
        }
        if (!obj.is_object() || !obj.contains("text") || !obj["text"].is_string()) {
            throw CorpusError(path.string() + ":" + std::to_string(line_no) + ": expected an object with a string \"text\"");
        }
        RawExample r{obj["text"].get<std::string>(), std::nullopt};
        if (obj.contains("instruction")) {
            if (!obj["instruction"].is_string()) {
                throw CorpusError(path.string() + ":" + std::to_string(line_no) + ": \"instruction\" must be a string");
            }
            r.instruction = obj["instruction"].get<std::string>();
        }
        raw.push_back(std::move(r));
    }
    if (raw.empty()) throw CorpusError("corpus is empty: " + path.string());
    return raw;
}

inline Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format, const CorpusOptions& opt) {
    return build_corpus(read_corpus_file(path, format), opt);
}

struct ExampleEmbedding {
    std::vector<Real> vector;
    bool degenerate = false;  // pooled vector was zero; replaced by e_0
};

// Mean of raw token-embedding rows over content positions (the instruction
// span when present, otherwise everything but BOS and PAD), L2-normalized.
inline ExampleEmbedding example_embedding(const TransformerBackbone& backbone, const TokenizedExample& ex,
                                          bool include_bos = false) {
    const std::size_t d = backbone.config().d_model;
    std::size_t first = 0, last = ex.ids.size();
    if (ex.instruction_span) std::tie(first, last) = *ex.instruction_span;
    std::vector<std::int32_t> ids;
    for (std::size_t t = first; t < std::min(last, ex.ids.size()); ++t) {
        const std::int32_t id = ex.ids[t];
        if (id == kPadId || (id == kBosId && !include_bos)) continue;
        ids.push_back(id);
    }
    ExampleEmbedding out;
    out.vector.assign(d, 0.0);
    if (!ids.empty()) {
        backbone.check_ids(ids);
        auto table = backbone.token_table().data();
        for (std::int32_t id : ids)
            for (std::size_t j = 0; j < d; ++j) out.vector[j] += table[static_cast<std::size_t>(id) * d + j];
        for (Real& v : out.vector) v /= static_cast<Real>(ids.size());
    }
    Real norm = 0.0;
    for (Real v : out.vector) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
        std::fill(out.vector.begin(), out.vector.end(), 0.0);
        out.vector[0] = 1.0;
        out.degenerate = true;
        return out;
    }
    for (Real& v : out.vector) v /= norm;
    return out;
}

inline std::vector<std::vector<Real>> embed_examples(const TransformerBackbone& backbone, const Corpus& corpus,
                                                     std::span<const std::size_t> indices,
                                                     std::size_t* degenerate_count = nullptr) {
    std::vector<std::vector<Real>> out;
    out.reserve(indices.size());
    std::size_t degenerate = 0;
    for (std::size_t i : indices) {
        auto e = example_embedding(backbone, corpus.examples.at(i));
        degenerate += e.degenerate ? 1 : 0;
        out.push_back(std::move(e.vector));
    }
    if (degenerate_count) *degenerate_count = degenerate;
    return out;
}

struct SyntheticOptions {
    std::size_t private_chars = 16;  // dominant alphabet size owned by one style
    std::size_t shared_chars = 4;    // characters every style uses
    std::size_t min_len = 16;
    std::size_t max_len = 32;
    double noise = 0.02;    // jump to a random character of the style alphabet
    double foreign = 0.005; // emit a random character from the full alphabet
    std::size_t max_seq_len = 64;
    double val_fraction = 0.1;
};

// Printable ASCII '!'..'~'.
inline std::vector<char> synthetic_alphabet() {
    std::vector<char> a;
    for (char c = '!'; c <= '~'; ++c) a.push_back(c);
    return a;
}

// Each style owns a disjoint block of characters plus a pool shared by all
// styles, and walks its own random successor cycle over that alphabet with a
// little noise. Style labels are kept for diagnostics.
inline std::vector<RawExample> synthetic_examples(std::size_t n_styles, std::size_t examples_per_style,
                                                  std::uint64_t seed, const SyntheticOptions& opt = {}) {
    if (n_styles < 2) throw ConfigError("synthetic corpus needs n_styles >= 2");
    if (opt.min_len == 0 || opt.max_len < opt.min_len) throw ConfigError("synthetic lengths must satisfy 1 <= min <= max");
    std::vector<char> alphabet = synthetic_alphabet();
    if (n_styles * opt.private_chars + opt.shared_chars > alphabet.size()) {
        throw ConfigError("synthetic alphabet too small for the requested styles");
    }
    Rng rng = make_rng(seed, stream::kSynthetic);
    std::shuffle(alphabet.begin(), alphabet.end(), rng);
    const std::vector<char> shared(alphabet.begin(), alphabet.begin() + static_cast<std::ptrdiff_t>(opt.shared_chars));

    struct Style {
        std::vector<char> chars;
        std::map<char, char> next;
    };
    std::vector<Style> styles(n_styles);
    for (std::size_t s = 0; s < n_styles; ++s) {
        auto begin = alphabet.begin() + static_cast<std::ptrdiff_t>(opt.shared_chars + s * opt.private_chars);
        styles[s].chars.assign(begin, begin + static_cast<std::ptrdiff_t>(opt.private_chars));
        styles[s].chars.insert(styles[s].chars.end(), shared.begin(), shared.end());
        std::vector<char> cycle = styles[s].chars;
        std::shuffle(cycle.begin(), cycle.end(), rng);
        for (std::size_t i = 0; i < cycle.size(); ++i) styles[s].next[cycle[i]] = cycle[(i + 1) % cycle.size()];
    }

    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> len_dist(opt.min_len, opt.max_len);
    std::uniform_int_distribution<std::size_t> any_char(0, alphabet.size() - 1);
    std::vector<RawExample> raw;
    for (std::size_t s = 0; s < n_styles; ++s) {
        const Style& st = styles[s];
        std::uniform_int_distribution<std::size_t> own(0, st.chars.size() - 1);
        for (std::size_t e = 0; e < examples_per_style; ++e) {
            const std::size_t len = len_dist(rng);
            std::string text;
            char cur = st.chars[own(rng)];
            text.push_back(cur);
            while (text.size() < len) {
                const double r = u01(rng);
                char nxt;
                if (r < opt.foreign) nxt = alphabet[any_char(rng)];
                else if (r < opt.foreign + opt.noise) nxt = st.chars[own(rng)];
                else nxt = st.next.count(cur) ? st.next.at(cur) : st.chars[own(rng)];
                text.push_back(nxt);
                cur = nxt;
            }
            raw.push_back({text, std::nullopt, static_cast<int>(s)});
        }
    }
    return raw;
}

inline Corpus make_synthetic_corpus(std::size_t n_styles, std::size_t examples_per_style, std::uint64_t seed,
                                    const SyntheticOptions& opt = {}, std::optional<Vocabulary> vocab = std::nullopt) {
    CorpusOptions copt;
    copt.tokenizer = TokenizerKind::character;
    copt.max_seq_len = opt.max_seq_len;
    copt.val_fraction = opt.val_fraction;
    copt.seed = seed;
    copt.vocab = std::move(vocab);
    return build_corpus(synthetic_examples(n_styles, examples_per_style, seed, opt), copt);
}

// Cache of token ids and example embeddings in the checkpoint format.
inline void save_corpus_cache(const std::filesystem::path& path, const Corpus& corpus,
                              const std::vector<std::vector<Real>>& embeddings) {
    checkpoint::Checkpoint ckpt;
    ckpt.metadata["kind"] = "corpus-cache";
    ckpt.metadata["vocab"] = corpus.vocab.to_json();
    ckpt.metadata["train"] = corpus.train;
    ckpt.metadata["val"] = corpus.val;
    std::vector<Real> lengths, ids, styles, spans;
    for (const auto& ex : corpus.examples) {
        lengths.push_back(static_cast<Real>(ex.ids.size()));
        for (auto id : ex.ids) ids.push_back(static_cast<Real>(id));
        styles.push_back(static_cast<Real>(ex.style));
        spans.push_back(ex.instruction_span ? static_cast<Real>(ex.instruction_span->first) : -1.0);
        spans.push_back(ex.instruction_span ? static_cast<Real>(ex.instruction_span->second) : -1.0);
    }
    const std::size_t n = corpus.examples.size();
    ckpt.tensors.push_back({"lengths", Tensor({n}, lengths)});
    ckpt.tensors.push_back({"ids", Tensor({ids.size()}, ids)});
    ckpt.tensors.push_back({"styles", Tensor({n}, styles)});
    ckpt.tensors.push_back({"spans", Tensor({n, 2}, spans)});
    if (!embeddings.empty()) {
        std::vector<Real> flat;
        for (const auto& e : embeddings) flat.insert(flat.end(), e.begin(), e.end());
        ckpt.tensors.push_back({"embeddings", Tensor({embeddings.size(), embeddings.front().size()}, flat)});
    }
    checkpoint::save(path, ckpt);
}

inline std::pair<Corpus, std::vector<std::vector<Real>>> load_corpus_cache(const std::filesystem::path& path) {
    const auto ckpt = checkpoint::load(path);
    if (ckpt.metadata.value("kind", "") != "corpus-cache") throw CorpusError("not a corpus cache: " + path.string());
    Corpus c;
    c.vocab = Vocabulary::from_json(ckpt.metadata.at("vocab"));
    c.train = ckpt.metadata.at("train").get<std::vector<std::size_t>>();
    c.val = ckpt.metadata.at("val").get<std::vector<std::size_t>>();
    auto lengths = ckpt.at("lengths").data();
    auto ids = ckpt.at("ids").data();
    auto styles = ckpt.at("styles").data();
    auto spans = ckpt.at("spans").data();
    std::size_t pos = 0;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        TokenizedExample ex;
        const auto len = static_cast<std::size_t>(lengths[i]);
        for (std::size_t t = 0; t < len; ++t) ex.ids.push_back(static_cast<std::int32_t>(ids[pos + t]));
        pos += len;
        ex.style = static_cast<int>(styles[i]);
        if (spans[2 * i] >= 0.0) {
            ex.instruction_span = std::make_pair(static_cast<std::size_t>(spans[2 * i]), static_cast<std::size_t>(spans[2 * i + 1]));
        }
        c.examples.push_back(std::move(ex));
    }
    std::vector<std::vector<Real>> emb;
    if (ckpt.contains("embeddings")) {
        const Tensor& e = ckpt.at("embeddings");
        for (std::size_t i = 0; i < e.dim(0); ++i)
            emb.emplace_back(e.data().begin() + static_cast<std::ptrdiff_t>(i * e.dim(1)),
                             e.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * e.dim(1)));
    }
    return {std::move(c), std::move(emb)};
}

// Fraction of examples whose cluster's majority label matches their own.
inline double cluster_purity(const std::vector<std::size_t>& assignment, const std::vector<int>& labels, std::size_t k) {
    std::map<std::pair<std::size_t, int>, std::size_t> counts;
    for (std::size_t i = 0; i < assignment.size(); ++i) ++counts[{assignment[i], labels[i]}];
    std::vector<std::size_t> best(k, 0);
    for (const auto& [key, n] : counts) best[key.first] = std::max(best[key.first], n);
    std::size_t total = 0;
    for (std::size_t b : best) total += b;
    return assignment.empty() ? 0.0 : static_cast<double>(total) / static_cast<double>(assignment.size());
}

}  // namespace chameleon
