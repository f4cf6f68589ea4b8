#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "chameleon/data.hpp"
#include "chameleon/training.hpp"

using namespace chameleon;

namespace {

std::filesystem::path write_file(const std::string& name, const std::string& content) {
    const auto path = std::filesystem::temp_directory_path() / name;
    std::ofstream(path) << content;
    return path;
}

TransformerBackbone small_backbone(std::size_t vocab, std::uint64_t seed = 1) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = 8;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_ff = 16;
    c.max_seq_len = 16;
    auto m = TransformerBackbone::init(c, seed);
    m.freeze();
    return m;
}

Real dot(const std::vector<Real>& a, const std::vector<Real>& b) {
    Real s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST(Corpus, TwoLinePlainFile) {
    const auto path = write_file("chameleon_ab.txt", "ab\nba\n");
    CorpusOptions opt;
    opt.val_fraction = 0.0;
    auto c = load_corpus(path, CorpusFormat::plain, opt);
    EXPECT_EQ(c.vocab.size(), 5u);
    ASSERT_EQ(c.examples.size(), 2u);
    for (const auto& ex : c.examples) {
        EXPECT_EQ(ex.ids.size(), 3u);
        EXPECT_EQ(ex.ids[0], kBosId);
    }
    EXPECT_EQ(c.examples[0].ids, (std::vector<std::int32_t>{1, 3, 4}));
    EXPECT_EQ(c.examples[1].ids, (std::vector<std::int32_t>{1, 4, 3}));
}

TEST(Corpus, SplitSizesAreDisjointAndDeterministic) {
    std::vector<RawExample> raw;
    for (int i = 0; i < 8; ++i) raw.push_back({std::string(1, static_cast<char>('a' + i)), std::nullopt});
    CorpusOptions opt;
    opt.val_fraction = 0.25;
    opt.seed = 3;
    auto c = build_corpus(raw, opt);
    EXPECT_EQ(c.train.size(), 6u);
    EXPECT_EQ(c.val.size(), 2u);
    std::set<std::size_t> all(c.train.begin(), c.train.end());
    all.insert(c.val.begin(), c.val.end());
    EXPECT_EQ(all.size(), 8u);
    auto again = build_corpus(raw, opt);
    EXPECT_EQ(again.val, c.val);
    EXPECT_EQ(again.checksum(), c.checksum());
    opt.seed = 4;
    EXPECT_NE(build_corpus(raw, opt).checksum(), c.checksum());
    // Vocabulary comes from training examples only; held-out characters are unknown.
    for (std::size_t i : c.val) EXPECT_EQ(c.examples[i].ids[1], kUnkId);
}

TEST(Corpus, BadSplitFractions) {
    std::vector<RawExample> raw{{"a", std::nullopt}};
    CorpusOptions opt;
    opt.val_fraction = 1.0;
    EXPECT_THROW(build_corpus(raw, opt), ConfigError);
    opt.val_fraction = 0.9;
    EXPECT_THROW(build_corpus(raw, opt), CorpusError);  // llround(0.9) leaves nothing to train on
    EXPECT_THROW(build_corpus({}, CorpusOptions{}), CorpusError);
}

TEST(Corpus, TruncatesToMaxSeqLen) {
    std::vector<RawExample> raw{{"abcdefghij", std::nullopt}};
    CorpusOptions opt;
    opt.val_fraction = 0.0;
    opt.max_seq_len = 4;
    auto c = build_corpus(raw, opt);
    EXPECT_EQ(c.examples[0].ids.size(), 4u);
}

TEST(Corpus, JsonlWithInstructions) {
    const auto path = write_file("chameleon_ok.jsonl",
                                 "{\"text\": \"hello\", \"instruction\": \"hi\"}\n\n{\"text\": \"yo\"}\n");
    CorpusOptions opt;
    opt.val_fraction = 0.0;
    auto c = load_corpus(path, CorpusFormat::jsonl, opt);
    ASSERT_EQ(c.examples.size(), 2u);
    ASSERT_TRUE(c.examples[0].instruction_span);
    EXPECT_EQ(*c.examples[0].instruction_span, std::make_pair(std::size_t{1}, std::size_t{3}));
    EXPECT_EQ(c.examples[0].ids.size(), 1u + 2u + 5u);
    EXPECT_FALSE(c.examples[1].instruction_span);
}

TEST(Corpus, MalformedJsonlReportsLineNumber) {
    const auto bad = write_file("chameleon_bad.jsonl", "{\"text\": \"a\"}\n{oops\n");
    try {
        read_corpus_file(bad, CorpusFormat::jsonl);
        FAIL() << "expected CorpusError";
    } catch (const CorpusError& e) {
        EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
    }
    const auto missing_text = write_file("chameleon_notext.jsonl", "{\"text\": \"a\"}\n\n{\"body\": \"a\"}\n");
    try {
        read_corpus_file(missing_text, CorpusFormat::jsonl);
        FAIL() << "expected CorpusError";
    } catch (const CorpusError& e) {
        EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
    }
    const auto bad_instr = write_file("chameleon_instr.jsonl", "{\"text\": \"a\", \"instruction\": 4}\n");
    EXPECT_THROW(read_corpus_file(bad_instr, CorpusFormat::jsonl), CorpusError);
    EXPECT_THROW(read_corpus_file(write_file("chameleon_empty.txt", "\n  \n"), CorpusFormat::plain), CorpusError);
    EXPECT_THROW(read_corpus_file("/nonexistent/file.txt", CorpusFormat::plain), CorpusError);
}

TEST(Tokenizer, RoundTripsInVocabularyText) {
    const std::vector<std::string> texts{"the cat sat", "on the mat", "a dog"};
    for (TokenizerKind kind : {TokenizerKind::character, TokenizerKind::whitespace}) {
        auto v = Vocabulary::build(texts, kind);
        for (const auto& t : texts) EXPECT_EQ(v.decode(v.encode(t)), t);
        EXPECT_EQ(Vocabulary::from_json(v.to_json()).encode("the mat"), v.encode("the mat"));
    }
    auto v = Vocabulary::build(texts, TokenizerKind::whitespace);
    EXPECT_EQ(v.encode("zebra")[0], kUnkId);
    EXPECT_EQ(v.size(), 3u + 7u);
}

TEST(Tokenizer, CharacterModeKeepsUtf8Sequences) {
    auto toks = split_tokens("aé€", TokenizerKind::character);
    EXPECT_EQ(toks, (std::vector<std::string>{"a", "é", "€"}));
}

TEST(Embedding, RepeatedTokenIsItsNormalizedRow) {
    auto bb = small_backbone(6);
    TokenizedExample ex{{kBosId, 4, 4, 4}, std::nullopt, -1};
    auto e = example_embedding(bb, ex);
    const auto table = bb.token_table().data();
    Real norm = 0;
    for (std::size_t j = 0; j < 8; ++j) norm += table[4 * 8 + j] * table[4 * 8 + j];
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(e.vector[j], table[4 * 8 + j] / norm, 1e-12);
    EXPECT_FALSE(e.degenerate);
}

TEST(Embedding, SumOracleAndUnitNorm) {
    auto bb = small_backbone(9, 2);
    std::mt19937_64 rng(3);
    const auto table = bb.token_table().data();
    for (int trial = 0; trial < 20; ++trial) {
        TokenizedExample ex;
        ex.ids.push_back(kBosId);
        const std::size_t len = 1 + rng() % 8;
        for (std::size_t i = 0; i < len; ++i) ex.ids.push_back(static_cast<std::int32_t>(3 + rng() % 6));
        std::vector<Real> sum(8, 0.0);
        for (std::size_t t = 1; t < ex.ids.size(); ++t)
            for (std::size_t j = 0; j < 8; ++j) sum[j] += table[static_cast<std::size_t>(ex.ids[t]) * 8 + j];
        const Real n = std::sqrt(dot(sum, sum));
        auto e = example_embedding(bb, ex);
        EXPECT_NEAR(dot(e.vector, e.vector), 1.0, 1e-12);
        for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(e.vector[j], sum[j] / n, 1e-12);
    }
}

TEST(Embedding, CancellingRowsAreDegenerate) {
    auto m = small_backbone(6);
    m.unfreeze();
    auto table = m.named_tensors()[0].tensor.data();
    for (std::size_t j = 0; j < 8; ++j) table[5 * 8 + j] = -table[4 * 8 + j];
    m.freeze();
    TokenizedExample ex{{kBosId, 4, 5}, std::nullopt, -1};
    auto e = example_embedding(m, ex);
    EXPECT_TRUE(e.degenerate);
    EXPECT_EQ(e.vector[0], 1.0);
    for (std::size_t j = 1; j < 8; ++j) EXPECT_EQ(e.vector[j], 0.0);
    TokenizedExample only_bos{{kBosId}, std::nullopt, -1};
    EXPECT_TRUE(example_embedding(m, only_bos).degenerate);
}

TEST(Embedding, InstructionSpanAloneDecides) {
    auto bb = small_backbone(8);
    TokenizedExample a{{kBosId, 3, 4, 5, 6}, std::make_pair(std::size_t{1}, std::size_t{3}), -1};
    TokenizedExample b{{kBosId, 3, 4, 7, 7}, std::make_pair(std::size_t{1}, std::size_t{3}), -1};
    EXPECT_EQ(example_embedding(bb, a).vector, example_embedding(bb, b).vector);
}

TEST(Synthetic, CountsDeterminismAndLabels) {
    SyntheticOptions opt;
    auto a = synthetic_examples(3, 20, 5, opt), b = synthetic_examples(3, 20, 5, opt);
    ASSERT_EQ(a.size(), 60u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].text, b[i].text);
        EXPECT_EQ(a[i].style, static_cast<int>(i / 20));
        EXPECT_GE(a[i].text.size(), opt.min_len);
        EXPECT_LE(a[i].text.size(), opt.max_len);
    }
    EXPECT_NE(synthetic_examples(3, 20, 6, opt)[0].text, a[0].text);
    EXPECT_THROW(synthetic_examples(1, 5, 0), ConfigError);
    EXPECT_THROW(synthetic_examples(10, 5, 0), ConfigError);
}

TEST(Synthetic, StylesUseMostlyDisjointAlphabets) {
    SyntheticOptions opt;
    opt.foreign = 0.0;
    auto raw = synthetic_examples(2, 30, 8, opt);
    std::set<char> s0, s1;
    for (const auto& r : raw) (r.style == 0 ? s0 : s1).insert(r.text.begin(), r.text.end());
    std::size_t overlap = 0;
    for (char c : s0) overlap += s1.count(c);
    EXPECT_LE(overlap, opt.shared_chars);
    EXPECT_LE(s0.size(), opt.private_chars + opt.shared_chars);
}

TEST(Synthetic, EmbeddingsSeparateStylesAfterPretraining) {
    SyntheticOptions opt;
    opt.max_seq_len = 24;
    opt.min_len = 12;
    opt.max_len = 20;
    auto corpus = make_synthetic_corpus(2, 40, 9, opt);
    ModelConfig mc;
    mc.vocab_size = corpus.vocab.size();
    mc.d_model = 16;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.d_ff = 32;
    mc.max_seq_len = 24;
    PretrainConfig pc;
    pc.epochs = 3;
    pc.batch_size = 8;
    pc.optim.lr = 1e-2;
    auto bb = pretrain_backbone(mc, corpus, pc, 1);
    std::vector<std::size_t> all(corpus.examples.size());
    std::iota(all.begin(), all.end(), 0);
    auto emb = embed_examples(bb, corpus, all);
    Real intra = 0, cross = 0;
    std::size_t n_intra = 0, n_cross = 0;
    for (std::size_t i = 0; i < all.size(); ++i)
        for (std::size_t j = i + 1; j < all.size(); ++j) {
            const Real s = dot(emb[i], emb[j]);
            if (corpus.examples[i].style == corpus.examples[j].style) {
                intra += s;
                ++n_intra;
            } else {
                cross += s;
                ++n_cross;
            }
        }
    EXPECT_GT(intra / static_cast<Real>(n_intra), cross / static_cast<Real>(n_cross) + 0.1);
}

TEST(CorpusCache, RoundTrip) {
    std::vector<RawExample> raw{{"abc", std::string("x")}, {"bca", std::nullopt}, {"cab", std::nullopt}};
    raw[1].style = 2;
    CorpusOptions opt;
    opt.val_fraction = 0.34;
    auto c = build_corpus(raw, opt);
    std::vector<std::vector<Real>> emb{{0.5, 0.25}, {1.0, 0.0}, {0.0, -1.0}};
    const auto path = std::filesystem::temp_directory_path() / "chameleon_cache.ckpt";
    save_corpus_cache(path, c, emb);
    auto [back, back_emb] = load_corpus_cache(path);
    EXPECT_EQ(back.checksum(), c.checksum());
    EXPECT_EQ(back_emb, emb);
    EXPECT_EQ(back.train, c.train);
    EXPECT_EQ(back.examples[0].instruction_span, c.examples[0].instruction_span);
    EXPECT_EQ(back.vocab.tokens(), c.vocab.tokens());
}

TEST(Purity, HandComputed) {
    EXPECT_EQ(cluster_purity({0, 0, 1, 1}, {5, 5, 6, 6}, 2), 1.0);
    EXPECT_EQ(cluster_purity({0, 0, 0, 0}, {5, 5, 6, 6}, 1), 0.5);
    EXPECT_EQ(cluster_purity({0, 0, 0, 1}, {5, 6, 6, 5}, 2), 0.75);
}
