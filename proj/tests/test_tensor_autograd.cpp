#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "e2llm/autograd.hpp"
#include "e2llm/grad_check.hpp"
#include "e2llm/optim.hpp"

using namespace e2llm;

namespace {

Tensor<double> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor<double> t({r, c});
  for (double& x : t.data) x = d(rng);
  return t;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), DimensionError);
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  t.enable_grad();
  EXPECT_EQ(t.grad.size(), t.data.size());
}

TEST(Matmul, IdentityAndHandProduct) {
  Tape<double> tape;
  auto eye = tape.constant(Tensor<double>::matrix(2, 2, {1, 0, 0, 1}));
  auto b = tape.constant(Tensor<double>::matrix(2, 2, {3, 4, 5, 6}));
  EXPECT_EQ(tape.value(matmul(tape, eye, b)).data, (std::vector<double>{3, 4, 5, 6}));

  auto row = tape.constant(Tensor<double>::matrix(1, 2, {1, 2}));
  auto col = tape.constant(Tensor<double>::matrix(2, 1, {3, 4}));
  EXPECT_EQ(tape.value(matmul(tape, row, col)).data, (std::vector<double>{11}));
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape<float> tape;
  auto a = tape.constant(Tensor<float>({2, 3}));
  auto b = tape.constant(Tensor<float>({2, 3}));
  try {
    matmul(tape, a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    const auto first = msg.find("[2x3]");
    ASSERT_NE(first, std::string::npos);
    EXPECT_NE(msg.find("[2x3]", first + 1), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(3);
  const std::vector<Tensor<double>> inputs = {random_matrix(3, 4, rng), random_matrix(4, 2, rng)};
  const auto weights = random_matrix(3, 2, rng);
  TapeFunction<double> f = [&](Tape<double>& t, std::span<const Var> in) {
    auto c = matmul(t, in[0], in[1]);
    return sum(t, mul(t, c, t.constant(weights)));
  };
  GradCheckOptions opt;
  opt.step = 1e-3;
  const auto rep = grad_check(f, inputs, opt);
  EXPECT_EQ(rep.compared, 20u);
  EXPECT_LE(rep.max_relative_error, 1e-3);
}

TEST(SoftmaxRows, KnownRows) {
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>::matrix(3, 3, {0, 0, 0, 1, 2, 3, 1000, 0, 0}));
  const auto& y = tape.value(softmax_rows(tape, x));
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(y(0, j), 1.0 / 3.0, 1e-12);
  // exp(k) / (e + e^2 + e^3), evaluated independently.
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(y(1, 0), std::exp(1.0) / z, 1e-12);
  EXPECT_NEAR(y(1, 0), 0.09003, 1e-5);
  EXPECT_NEAR(y(1, 1), 0.24473, 1e-5);
  EXPECT_NEAR(y(1, 2), 0.66524, 1e-5);
  EXPECT_NEAR(y(2, 0), 1.0, 1e-12);
  EXPECT_TRUE(std::isfinite(y(2, 1)));
  EXPECT_NEAR(y(2, 1), 0.0, 1e-12);
}

TEST(SoftmaxRows, RowsSumToOneOnRandomInputs) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> u(-80.0f, 80.0f);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor<float> x({4, 17});
    for (float& v : x.data) v = u(rng);
    Tape<float> tape;
    const auto& y = tape.value(softmax_rows(tape, tape.constant(x)));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 17; ++c) s += y(r, c);
      ASSERT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(SoftmaxRows, GradientMatchesCentralDifferences) {
  std::mt19937_64 rng(5);
  const std::vector<Tensor<double>> inputs = {random_matrix(3, 5, rng)};
  const auto w = random_matrix(3, 5, rng);
  TapeFunction<double> f = [&](Tape<double>& t, std::span<const Var> in) {
    return sum(t, mul(t, softmax_rows(t, in[0]), t.constant(w)));
  };
  EXPECT_LE(grad_check(f, inputs).max_relative_error, 1e-6);
}

TEST(CrossEntropy, KnownValues) {
  Tape<double> tape;
  const std::vector<std::int32_t> t0 = {2};
  auto uniform = tape.constant(Tensor<double>::matrix(1, 4, {0.5, 0.5, 0.5, 0.5}));
  EXPECT_NEAR(tape.value(cross_entropy(tape, uniform, t0)).data[0], std::log(4.0), 1e-12);
  EXPECT_NEAR(std::log(4.0), 1.3863, 1e-4);

  auto peaked = tape.constant(Tensor<double>::matrix(1, 4, {0, 0, 20, 0}));
  EXPECT_NEAR(tape.value(cross_entropy(tape, peaked, t0)).data[0], 0.0, 1e-8);

  // -log(e^2 / (e + e^2)) = log(1 + e^-1)
  const std::vector<std::int32_t> t1 = {1};
  auto two = tape.constant(Tensor<double>::matrix(1, 2, {1, 2}));
  EXPECT_NEAR(tape.value(cross_entropy(tape, two, t1)).data[0], std::log1p(std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(std::log1p(std::exp(-1.0)), 0.31326, 1e-5);
}

TEST(CrossEntropy, OutOfRangeTargetIsIndexError) {
  Tape<float> tape;
  auto x = tape.constant(Tensor<float>({2, 4}));
  const std::vector<std::int32_t> bad = {1, 4};
  EXPECT_THROW(cross_entropy(tape, x, bad), IndexError);
}

TEST(CrossEntropy, IgnoredRowsDoNotContribute) {
  std::mt19937_64 rng(9);
  auto logits = random_matrix(3, 6, rng);
  Tape<double> tape;
  auto x = tape.constant(logits);
  const std::vector<std::int32_t> all = {1, 2, 3};
  const std::vector<std::int32_t> partial = {1, kIgnoreTarget, 3};
  const double full = tape.value(cross_entropy(tape, x, all)).data[0];
  const double part = tape.value(cross_entropy(tape, x, partial)).data[0];
  const std::vector<std::int32_t> only_mid = {kIgnoreTarget, 2, kIgnoreTarget};
  const double mid = tape.value(cross_entropy(tape, x, only_mid)).data[0];
  EXPECT_NEAR(full * 3.0, part * 2.0 + mid, 1e-12);
}

TEST(GradCheck, SquareAtThree) {
  TapeFunction<double> f = [](Tape<double>& t, std::span<const Var> in) { return sum(t, mul(t, in[0], in[0])); };
  const auto rep = grad_check(f, {Tensor<double>({1}, 3.0)});
  EXPECT_EQ(rep.compared, 1u);
  EXPECT_LE(rep.max_relative_error, 1e-6);
}

TEST(GradCheck, AbsAtZeroIsNonComparable) {
  TapeFunction<double> f = [](Tape<double>& t, std::span<const Var> in) { return sum(t, abs(t, in[0])); };
  const auto rep = grad_check(f, {Tensor<double>({3}, std::vector<double>{0.0, 2.0, -1.5})});
  ASSERT_EQ(rep.non_comparable.size(), 1u);
  EXPECT_EQ(rep.non_comparable[0].index, 0u);
  EXPECT_EQ(rep.compared, 2u);
  EXPECT_LE(rep.max_relative_error, 1e-6);
}

TEST(GradCheck, RmsNormSiluEmbeddingRotaryAttention) {
  std::mt19937_64 rng(21);
  const std::size_t n = 5, heads = 2, hd = 4, d = heads * hd;
  RotaryTable<double> table;
  table.rows = n;
  table.half = hd / 2;
  std::uniform_real_distribution<double> ang(-3.0, 3.0);
  for (std::size_t i = 0; i < n * hd / 2; ++i) {
    const double a = ang(rng);
    table.cos.push_back(std::cos(a));
    table.sin.push_back(std::sin(a));
  }
  const std::vector<std::int32_t> ids = {3, 1, 4, 1, 5};
  const std::vector<std::int32_t> targets = {1, 4, 1, 5, 0};
  const std::vector<Tensor<double>> inputs = {random_matrix(6, d, rng), random_matrix(1, d, rng),
                                              random_matrix(d, d, rng), random_matrix(d, d, rng),
                                              random_matrix(d, d, rng), random_matrix(d, 6, rng)};
  TapeFunction<double> f = [&](Tape<double>& t, std::span<const Var> in) {
    Var x = embedding(t, in[0], ids);
    Var h = rms_norm(t, x, in[1]);
    Var q = rotary(t, matmul(t, h, in[2]), heads, table);
    Var k = rotary(t, matmul(t, h, in[3]), heads, table);
    Var v = silu(t, matmul(t, h, in[4]));
    Var a = causal_attention(t, q, k, v, heads, n);
    return cross_entropy(t, matmul(t, add(t, a, x), in[5]), targets);
  };
  GradCheckOptions opt;
  opt.step = 1e-5;
  const auto rep = grad_check(f, inputs, opt);
  EXPECT_TRUE(rep.non_comparable.empty());
  EXPECT_LE(rep.max_relative_error, 1e-6);
}

TEST(Attention, SegmentsAreIndependentAndCausal) {
  std::mt19937_64 rng(2);
  auto q = random_matrix(6, 4, rng), k = random_matrix(6, 4, rng), v = random_matrix(6, 4, rng);
  Tape<double> tape;
  std::vector<double> probs;
  const auto& y = tape.value(causal_attention(tape, tape.constant(q), tape.constant(k), tape.constant(v), 2, 3, &probs));
  // Row 3 starts the second segment: it attends only to itself.
  for (std::size_t e = 0; e < 4; ++e) EXPECT_DOUBLE_EQ(y(3, e), v(3, e));
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 3; ++i) {
        double sum_row = 0.0;
        for (std::size_t j = 0; j < 3; ++j) {
          const double p = probs[((s * 2 + h) * 3 + i) * 3 + j];
          if (j > i) {
            EXPECT_EQ(p, 0.0);
          }
          sum_row += p;
        }
        EXPECT_NEAR(sum_row, 1.0, 1e-12);
      }
}

TEST(AdamW, ZeroGradientNoDecayLeavesParameter) {
  std::vector<float> w = {1.5f, -2.0f};
  const std::vector<float> g = {0.0f, 0.0f};
  AdamWState<float> st({0.1, 0.9, 0.95, 0.0, 1e-8}, std::vector<std::size_t>{2});
  std::vector<std::span<float>> ps = {w};
  std::vector<std::span<const float>> gs = {g};
  adamw_step<float>(ps, gs, st);
  EXPECT_EQ(w, (std::vector<float>{1.5f, -2.0f}));
  EXPECT_EQ(st.step_count, 1u);
}

TEST(AdamW, SingleStepHandEvaluation) {
  // m = 0.1, v = 0.05; m_hat = 1, v_hat = 1; w = 1 - 0.1 * 1 / (1 + 1e-8).
  std::vector<double> w = {1.0};
  const std::vector<double> g = {1.0};
  AdamWState<double> st({0.1, 0.9, 0.95, 0.0, 1e-8}, std::vector<std::size_t>{1});
  std::vector<std::span<double>> ps = {w};
  std::vector<std::span<const double>> gs = {g};
  adamw_step<double>(ps, gs, st);
  EXPECT_NEAR(w[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(w[0], 0.9, 1e-7);
}

TEST(AdamW, DecoupledWeightDecay) {
  std::vector<double> w = {2.0};
  const std::vector<double> g = {0.0};
  AdamWState<double> st({0.1, 0.9, 0.95, 0.1, 1e-8}, std::vector<std::size_t>{1});
  std::vector<std::span<double>> ps = {w};
  std::vector<std::span<const double>> gs = {g};
  adamw_step<double>(ps, gs, st);
  EXPECT_NEAR(w[0], 2.0 * (1.0 - 0.01), 1e-15);
}

TEST(AdamW, NonFiniteGradientAbortsWithoutChanges) {
  std::vector<float> w = {1.0f, 2.0f};
  const std::vector<float> g = {0.5f, std::nanf("")};
  AdamWState<float> st({0.1, 0.9, 0.95, 0.1, 1e-8}, std::vector<std::size_t>{2});
  std::vector<std::span<float>> ps = {w};
  std::vector<std::span<const float>> gs = {g};
  EXPECT_THROW(adamw_step<float>(ps, gs, st), NonFiniteError);
  EXPECT_EQ(w, (std::vector<float>{1.0f, 2.0f}));
  EXPECT_EQ(st.step_count, 0u);
  EXPECT_EQ(st.first_moment[0][0], 0.0f);
}

TEST(AdamW, IsPureFunctionOfInputs) {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> d;
  std::vector<float> w0(64), g(64);
  for (auto& x : w0) x = d(rng);
  for (auto& x : g) x = d(rng);
  auto run = [&] {
    std::vector<float> w = w0;
    AdamWState<float> st({3e-4, 0.9, 0.95, 0.1, 1e-8}, std::vector<std::size_t>{64});
    for (int i = 0; i < 5; ++i) {
      std::vector<std::span<float>> ps = {w};
      std::vector<std::span<const float>> gs = {g};
      adamw_step<float>(ps, gs, st);
    }
    return w;
  };
  EXPECT_EQ(run(), run());
}

TEST(ClipGradNorm, ScalesToMaxNorm) {
  std::vector<float> a = {3.0f}, b = {4.0f};
  std::vector<std::span<float>> gs = {a, b};
  EXPECT_NEAR(clip_grad_norm<float>(gs, 1.0), 5.0, 1e-6);
  EXPECT_NEAR(a[0], 0.6f, 1e-6);
  EXPECT_NEAR(b[0], 0.8f, 1e-6);
}
