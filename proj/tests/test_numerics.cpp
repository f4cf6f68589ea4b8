#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "chameleon/ops.hpp"
#include "chameleon/tensor.hpp"
#include "support.hpp"

using namespace chameleon;
using testing_support::max_abs_diff;
using testing_support::max_fd_error;
using testing_support::random_tensor;

namespace {

std::vector<Real> triple_loop(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<Real> c(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
    return c;
}

Real lse_oracle(const Tensor& logits, const std::vector<std::int32_t>& targets, const Mask& mask) {
    const std::size_t v = logits.cols();
    Real total = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        if (!mask[i]) continue;
        Real z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(logits[i * v + j]);
        total += std::log(z) - logits[i * v + static_cast<std::size_t>(targets[i])];
        ++count;
    }
    return total / count;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<Real>(5)), DimensionError);
    EXPECT_THROW(Tensor(Shape{0, 3}), DimensionError);
    Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
}

TEST(Tensor, CopiesShareStorageClonesDoNot) {
    Tensor a({2}, std::vector<Real>{1, 2});
    Tensor b = a;
    Tensor c = a.clone();
    a.data()[0] = 9;
    EXPECT_EQ(b[0], 9);
    EXPECT_EQ(c[0], 1);
}

TEST(Matmul, IdentityAndProjection) {
    Tensor eye({2, 2}, std::vector<Real>{1, 0, 0, 1});
    Tensor m({2, 2}, std::vector<Real>{1, 2, 3, 4});
    EXPECT_EQ(ops::matmul(eye, m).to_vector(), (std::vector<Real>{1, 2, 3, 4}));
    Tensor p({2, 2}, std::vector<Real>{1, 0, 0, 0});
    Tensor col({2, 1}, std::vector<Real>{5, 7});
    EXPECT_EQ(ops::matmul(p, col).to_vector(), (std::vector<Real>{5, 0}));
}

TEST(Matmul, MatchesTripleLoop) {
    std::mt19937_64 rng(11);
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
    EXPECT_LT(max_abs_diff(ops::matmul(a, b).data(), triple_loop(a, b)), 1e-12);
    for (std::size_t trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<std::size_t> dim(1, 9);
        const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
        Tensor x = random_tensor({m, k}, rng), y = random_tensor({k, n}, rng);
        EXPECT_LT(max_abs_diff(ops::matmul(x, y).data(), triple_loop(x, y)), 1e-12);
    }
}

TEST(Matmul, TransposedRightOperand) {
    std::mt19937_64 rng(12);
    Tensor a = random_tensor({5, 3}, rng), b = random_tensor({4, 3}, rng);
    std::vector<Real> bt(12);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) bt[j * 4 + i] = b[i * 3 + j];
    EXPECT_LT(max_abs_diff(ops::matmul_nt(a, b).data(), triple_loop(a, Tensor({3, 4}, bt))), 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tensor a({2, 3}), b({4, 2});
    try {
        ops::matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
    }
}

TEST(Linear, LeadingDimsActRowWise) {
    std::mt19937_64 rng(13);
    Tensor x = random_tensor({2, 3, 4}, rng), w = random_tensor({4, 5}, rng), bias = random_tensor({5}, rng);
    Tensor y = ops::linear(x, w, &bias);
    ASSERT_EQ(y.shape(), (Shape{2, 3, 5}));
    auto ref = triple_loop(Tensor({6, 4}, x.to_vector()), w);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 5; ++j) ref[i * 5 + j] += bias[j];
    EXPECT_LT(max_abs_diff(y.data(), ref), 1e-12);
}

TEST(SoftmaxCE, UniformLogits) {
    Tensor logits({1, 2}, 0.0);
    std::vector<std::int32_t> t{0};
    Mask m{1};
    EXPECT_NEAR(ops::softmax_ce_loss(logits, t, m).item(), std::log(2.0), 1e-12);
}

TEST(SoftmaxCE, SaturatedCorrect) {
    Tensor logits({1, 3}, std::vector<Real>{1000, 0, 0});
    std::vector<std::int32_t> t{0};
    Mask m{1};
    EXPECT_NEAR(ops::softmax_ce_loss(logits, t, m).item(), 0.0, 1e-12);
}

TEST(SoftmaxCE, MatchesLogSumExpOracle) {
    std::mt19937_64 rng(14);
    Tensor logits = random_tensor({4, 5}, rng);
    std::vector<std::int32_t> t{1, 4, 0, 2};
    Mask m{1, 0, 1, 1};
    EXPECT_LT(std::abs(ops::softmax_ce_loss(logits, t, m).item() - lse_oracle(logits, t, m)), 1e-10);
}

TEST(SoftmaxCE, AllMaskedIsAnError) {
    Tensor logits({2, 3}, 0.0);
    std::vector<std::int32_t> t{0, 1};
    Mask m{0, 0};
    EXPECT_THROW(ops::softmax_ce_loss(logits, t, m), EmptyLossError);
}

TEST(SoftmaxCE, MaskedPositionsAreInert) {
    std::mt19937_64 rng(15);
    Tensor logits = random_tensor({4, 5}, rng, 1.0, true);
    std::vector<std::int32_t> t{1, 4, 0, 2};
    Mask m{1, 0, 1, 1};
    Tensor l1 = ops::softmax_ce_loss(logits, t, m);
    backward(l1);
    const auto g1 = std::vector<Real>(logits.grad().begin(), logits.grad().end());
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(g1[5 + j], 0.0);

    logits.zero_grad();
    for (std::size_t j = 0; j < 5; ++j) logits.data()[5 + j] += 17.0 * static_cast<Real>(j + 1);
    Tensor l2 = ops::softmax_ce_loss(logits, t, m);
    EXPECT_EQ(l1.item(), l2.item());
    backward(l2);
    EXPECT_EQ(std::vector<Real>(logits.grad().begin(), logits.grad().end()), g1);
}

TEST(Backward, SumGivesOnes) {
    Tensor x({3}, std::vector<Real>{1, 2, 3});
    x.set_requires_grad(true);
    backward(ops::sum(x));
    EXPECT_EQ(std::vector<Real>(x.grad().begin(), x.grad().end()), (std::vector<Real>{1, 1, 1}));
}

TEST(Backward, HalfSquaredNorm) {
    Tensor x({2}, std::vector<Real>{2, -3});
    x.set_requires_grad(true);
    backward(ops::scale(ops::sum(ops::mul(x, x)), 0.5));
    EXPECT_EQ(std::vector<Real>(x.grad().begin(), x.grad().end()), (std::vector<Real>{2, -3}));
}

TEST(Backward, SecondCallIsStale) {
    Tensor x({2}, std::vector<Real>{1, 2});
    x.set_requires_grad(true);
    Tensor loss = ops::sum(ops::mul(x, x));
    backward(loss);
    EXPECT_THROW(backward(loss), StaleTapeError);
}

TEST(Backward, UntrackedLossIsStale) {
    Tensor x({2}, std::vector<Real>{1, 2});
    EXPECT_THROW(backward(ops::sum(x)), StaleTapeError);
}

TEST(Backward, FrozenTensorsGetNoGrad) {
    std::mt19937_64 rng(16);
    Tensor w = random_tensor({3, 3}, rng);
    Tensor x = random_tensor({2, 3}, rng, 1.0, true);
    backward(ops::sum(ops::relu(ops::matmul(x, w))));
    EXPECT_FALSE(w.has_grad());
    EXPECT_TRUE(x.has_grad());
}

TEST(Backward, EachOpVisitedOnce) {
    // x feeds four ops; a double visit of any node would double its share.
    Tensor x({1}, std::vector<Real>{3});
    x.set_requires_grad(true);
    Tensor y = ops::mul(x, x);          // 2x
    Tensor z = ops::add(y, y);          // 4x
    Tensor w = ops::add(z, ops::scale(x, 5));  // 4x + 5
    backward(ops::sum(w));
    EXPECT_EQ(x.grad()[0], 4 * 3.0 + 5);
}

TEST(NoGrad, GuardSkipsRecording) {
    Tensor x({2}, std::vector<Real>{1, 2});
    x.set_requires_grad(true);
    Tensor y;
    {
        NoGradGuard g;
        y = ops::mul(x, x);
    }
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.is_leaf());
    Tensor z = ops::mul(x, x);
    EXPECT_TRUE(z.requires_grad());
}

TEST(LayerNorm, NormalizesRows) {
    std::mt19937_64 rng(17);
    Tensor x = random_tensor({4, 8}, rng, 3.0);
    Tensor g({8}, 1.0), b({8}, 0.0);
    Tensor y = ops::layer_norm(x, g, b);
    for (std::size_t i = 0; i < 4; ++i) {
        Real mean = 0, var = 0;
        for (std::size_t j = 0; j < 8; ++j) mean += y[i * 8 + j];
        mean /= 8;
        for (std::size_t j = 0; j < 8; ++j) var += (y[i * 8 + j] - mean) * (y[i * 8 + j] - mean);
        var /= 8;
        EXPECT_NEAR(mean, 0.0, 1e-12);
        EXPECT_NEAR(var, 1.0, 1e-3);
    }
}

TEST(CausalSoftmax, LowerTriangularRowsSumToOne) {
    std::mt19937_64 rng(18);
    Tensor s = random_tensor({5, 5}, rng);
    Tensor p = ops::causal_softmax(s);
    for (std::size_t t = 0; t < 5; ++t) {
        Real row = 0;
        for (std::size_t u = 0; u < 5; ++u) {
            if (u > t) {
                EXPECT_EQ(p[t * 5 + u], 0.0);
            }
            row += p[t * 5 + u];
        }
        EXPECT_NEAR(row, 1.0, 1e-12);
    }
}

TEST(Gelu, TanhApproximation) {
    Tensor x({3}, std::vector<Real>{-1.5, 0.0, 2.0});
    Tensor y = ops::gelu(x);
    for (std::size_t i = 0; i < 3; ++i) {
        const Real v = x[i];
        const Real ref = 0.5 * v * (1 + std::tanh(std::sqrt(2 / M_PI) * (v + 0.044715 * v * v * v)));
        EXPECT_NEAR(y[i], ref, 1e-15);
    }
}

TEST(Embedding, LookupAndRange) {
    Tensor table({3, 2}, std::vector<Real>{0, 1, 2, 3, 4, 5});
    std::vector<std::int32_t> ids{2, 0, 2};
    EXPECT_EQ(ops::embedding(table, ids).to_vector(), (std::vector<Real>{4, 5, 0, 1, 4, 5}));
    std::vector<std::int32_t> bad{3};
    EXPECT_THROW(ops::embedding(table, bad), VocabularyError);
}

TEST(Dropout, EvalIsIdentityTrainRescales) {
    std::mt19937_64 rng(19);
    Tensor x({20000}, 1.0);
    EXPECT_TRUE(ops::dropout(x, 0.3, false, rng).same_storage(x));
    Tensor y = ops::dropout(x, 0.3, true, rng);
    Real mean = 0;
    std::size_t zeros = 0;
    for (Real v : y.data()) {
        mean += v;
        zeros += v == 0.0;
        if (v != 0.0) {
            EXPECT_NEAR(v, 1.0 / 0.7, 1e-12);
        }
    }
    mean /= 20000;
    EXPECT_NEAR(mean, 1.0, 0.03);
    EXPECT_NEAR(static_cast<Real>(zeros) / 20000, 0.3, 0.02);
}

TEST(Determinism, SameInputsSameBits) {
    auto run = [] {
        std::mt19937_64 rng(20);
        Tensor x = random_tensor({6, 8}, rng), w = random_tensor({8, 8}, rng, 0.3);
        Tensor g({8}, 1.0), b({8}, 0.0);
        Tensor h = ops::gelu(ops::layer_norm(ops::matmul(x, w), g, b));
        std::vector<std::int32_t> t{0, 1, 2, 3, 4, 5};
        Mask m(6, 1);
        return ops::softmax_ce_loss(h, t, m).item();
    };
    EXPECT_EQ(run(), run());
}

// Finite-difference agreement for every differentiable op.
class OpGradient : public ::testing::Test {
protected:
    std::mt19937_64 rng{21};
    static constexpr Real kTol = 1e-4;
};

TEST_F(OpGradient, MatmulBothSides) {
    Tensor a = random_tensor({3, 4}, rng, 1.0, true), b = random_tensor({4, 2}, rng, 1.0, true);
    Tensor r = random_tensor({3, 2}, rng);
    auto f = [&] { return ops::sum(ops::mul(ops::matmul(a, b), r)); };
    EXPECT_LT(max_fd_error(f, a), kTol);
    EXPECT_LT(max_fd_error(f, b), kTol);
}

TEST_F(OpGradient, MatmulNt) {
    Tensor a = random_tensor({3, 4}, rng, 1.0, true), b = random_tensor({5, 4}, rng, 1.0, true);
    Tensor r = random_tensor({3, 5}, rng);
    auto f = [&] { return ops::sum(ops::mul(ops::matmul_nt(a, b), r)); };
    EXPECT_LT(max_fd_error(f, a), kTol);
    EXPECT_LT(max_fd_error(f, b), kTol);
}

TEST_F(OpGradient, LinearWithBias) {
    Tensor x = random_tensor({2, 3, 4}, rng, 1.0, true), w = random_tensor({4, 3}, rng, 1.0, true);
    Tensor b = random_tensor({3}, rng, 1.0, true), r = random_tensor({2, 3, 3}, rng);
    auto f = [&] { return ops::sum(ops::mul(ops::linear(x, w, &b), r)); };
    EXPECT_LT(max_fd_error(f, x), kTol);
    EXPECT_LT(max_fd_error(f, w), kTol);
    EXPECT_LT(max_fd_error(f, b), kTol);
}

TEST_F(OpGradient, ElementwiseAndReductions) {
    Tensor a = random_tensor({4, 3}, rng, 1.0, true), b = random_tensor({4, 3}, rng, 1.0, true);
    auto f = [&] { return ops::sum(ops::mul(ops::mean_rows(ops::add(ops::mul(a, b), ops::scale(a, -0.7))), ops::mean_rows(b))); };
    EXPECT_LT(max_fd_error(f, a), kTol);
    EXPECT_LT(max_fd_error(f, b), kTol);
}

TEST_F(OpGradient, ReluAwayFromKink) {
    Tensor a = random_tensor({20}, rng, 1.0, true);
    for (Real& v : a.data())
        if (std::abs(v) < 1e-2) v = 0.5;
    Tensor r = random_tensor({20}, rng);
    auto f = [&] { return ops::sum(ops::mul(ops::relu(a), r)); };
    EXPECT_LT(max_fd_error(f, a), kTol);
}

TEST_F(OpGradient, Gelu) {
    Tensor a = random_tensor({12}, rng, 2.0, true), r = random_tensor({12}, rng);
    auto f = [&] { return ops::sum(ops::mul(ops::gelu(a), r)); };
    EXPECT_LT(max_fd_error(f, a), kTol);
}

TEST_F(OpGradient, LayerNorm) {
    Tensor x = random_tensor({3, 6}, rng, 1.0, true), g = random_tensor({6}, rng, 1.0, true);
    Tensor b = random_tensor({6}, rng, 1.0, true), r = random_tensor({3, 6}, rng);
    auto f = [&] { return ops::sum(ops::mul(ops::layer_norm(x, g, b), r)); };
    EXPECT_LT(max_fd_error(f, x), kTol);
    EXPECT_LT(max_fd_error(f, g), kTol);
    EXPECT_LT(max_fd_error(f, b), kTol);
}

TEST_F(OpGradient, CausalSoftmax) {
    Tensor s = random_tensor({4, 4}, rng, 1.0, true), r = random_tensor({4, 4}, rng);
    auto f = [&] { return ops::sum(ops::mul(ops::causal_softmax(s), r)); };
    EXPECT_LT(max_fd_error(f, s), kTol);
}

TEST_F(OpGradient, Embedding) {
    Tensor table = random_tensor({5, 3}, rng, 1.0, true), r = random_tensor({4, 3}, rng);
    std::vector<std::int32_t> ids{4, 1, 4, 0};
    auto f = [&] { return ops::sum(ops::mul(ops::embedding(table, ids), r)); };
    EXPECT_LT(max_fd_error(f, table), kTol);
}

TEST_F(OpGradient, DropoutWithFixedMask) {
    Tensor a = random_tensor({30}, rng, 1.0, true), r = random_tensor({30}, rng);
    auto f = [&] {
        std::mt19937_64 local(5);
        return ops::sum(ops::mul(ops::dropout(a, 0.4, true, local), r));
    };
    EXPECT_LT(max_fd_error(f, a), kTol);
}

TEST_F(OpGradient, SoftmaxCrossEntropy) {
    Tensor logits = random_tensor({5, 7}, rng, 1.0, true);
    std::vector<std::int32_t> t{3, 0, 6, 6, 1};
    Mask m{1, 1, 0, 1, 1};
    auto f = [&] { return ops::softmax_ce_loss(logits, t, m); };
    EXPECT_LT(max_fd_error(f, logits), kTol);
}

TEST_F(OpGradient, CausalAttentionWithPadding) {
    const std::size_t batch = 2, t = 4, d = 6, heads = 2;
    Tensor q = random_tensor({batch * t, d}, rng, 1.0, true), k = random_tensor({batch * t, d}, rng, 1.0, true);
    Tensor v = random_tensor({batch * t, d}, rng, 1.0, true), r = random_tensor({batch * t, d}, rng);
    Mask valid{1, 1, 1, 1, 1, 1, 0, 0};
    auto f = [&] { return ops::sum(ops::mul(ops::causal_attention(q, k, v, batch, t, heads, valid), r)); };
    EXPECT_LT(max_fd_error(f, q), kTol);
    EXPECT_LT(max_fd_error(f, k), kTol);
    EXPECT_LT(max_fd_error(f, v), kTol);
}

TEST_F(OpGradient, ReshapePassesGradientThrough) {
    Tensor a = random_tensor({2, 6}, rng, 1.0, true), r = random_tensor({3, 4}, rng);
    auto f = [&] { return ops::sum(ops::mul(a.reshaped({3, 4}), r)); };
    EXPECT_LT(max_fd_error(f, a), kTol);
}

TEST(CausalAttention, FutureAndPaddedKeysHaveNoInfluence) {
    std::mt19937_64 rng(22);
    const std::size_t t = 5, d = 4;
    Tensor q = random_tensor({t, d}, rng), k = random_tensor({t, d}, rng), v = random_tensor({t, d}, rng);
    Mask valid{1, 1, 1, 0, 0};
    Tensor base = ops::causal_attention(q, k, v, 1, t, 2, valid);
    Tensor k2 = k.clone(), v2 = v.clone();
    for (std::size_t j = 0; j < d; ++j) {
        k2.data()[4 * d + j] += 3.0;
        v2.data()[4 * d + j] -= 2.0;
        k2.data()[3 * d + j] += 1.0;
        v2.data()[3 * d + j] += 5.0;
    }
    Tensor other = ops::causal_attention(q, k2, v2, 1, t, 2, valid);
    EXPECT_LT(max_abs_diff(base.data(), other.data()), 1e-12);
}
