#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "e2llm/train.hpp"

using namespace e2llm;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 32;
  c.n_layers = 2;
  c.n_heads = 2;
  c.head_dim = 16;
  c.ffn_mult = 2;
  c.base_window = 32;
  return c;
}

std::vector<std::int32_t> repetitive_corpus(std::size_t n) {
  const std::string unit = "the cat sat on the mat. ";
  std::vector<std::int32_t> out;
  while (out.size() < n) {
    for (char ch : unit) out.push_back(static_cast<unsigned char>(ch));
  }
  out.resize(n);
  return out;
}

TrainConfig base_train(Phase phase, std::int64_t steps) {
  TrainConfig t;
  t.phase = phase;
  t.steps = steps;
  t.batch_size = 2;
  t.trained_window = 32;
  t.seed = 5;
  t.record_wall_time = false;
  t.policy.base_window = 32;
  return t;
}

}  // namespace

TEST(Targets, NextTokenPerSegment) {
  const std::vector<std::int32_t> toks = {1, 2, 3, 4, 5, 6};
  EXPECT_EQ(next_token_targets(toks, 3), (std::vector<std::int32_t>{2, 3, kIgnoreTarget, 5, 6, kIgnoreTarget}));
}

TEST(WindowBatcher, ShortCorpusIsDataError) {
  const std::vector<std::int32_t> tiny(10, 1);
  EXPECT_THROW(WindowBatcher(tiny, 32, 1), DataError);
}

TEST(WindowBatcher, WrapsAroundAndCoversWindows) {
  std::vector<std::int32_t> corpus(100);
  for (std::size_t i = 0; i < corpus.size(); ++i) corpus[i] = static_cast<std::int32_t>(i);
  WindowBatcher b(corpus, 10, 3);
  EXPECT_EQ(b.windows(), 10u);
  std::vector<int> seen(10, 0);
  for (std::int64_t step = 0; step < 10; ++step) {
    const auto batch = b.batch(step, 3);
    ASSERT_EQ(batch.size(), 30u);
    for (std::size_t s = 0; s < 3; ++s) {
      const auto first = batch[s * 10];
      ASSERT_EQ(first % 10, 0);
      for (std::size_t k = 0; k < 10; ++k) ASSERT_EQ(batch[s * 10 + k], first + static_cast<std::int32_t>(k));
      ++seen[static_cast<std::size_t>(first / 10)];
    }
  }
  for (int c : seen) EXPECT_EQ(c, 3);
}

TEST(TrainConfig, PretrainUsesStandardPolicy) {
  auto t = base_train(Phase::pretrain, 1);
  t.policy.g_max = 8;
  const auto p = t.effective_policy();
  EXPECT_EQ(p.g_max, 1);
  EXPECT_EQ(p.trained_window, 32);
  t.phase = Phase::extend;
  EXPECT_EQ(t.effective_policy().g_max, 8);
  EXPECT_THROW(parse_phase("finetune"), ConfigError);
}

TEST(TrainStep, IdentityPlanMatchesStandardStep) {
  const auto corpus = repetitive_corpus(512);
  const auto tokens = std::vector<std::int32_t>(corpus.begin(), corpus.begin() + 64);
  auto a = Model<float>::initialized(small_config(), 3);
  auto b = a;
  a.enable_grad();
  b.enable_grad();
  auto sa = make_optimizer(a, {});
  auto sb = make_optimizer(b, {});
  std::vector<IterationPlan> identity(2);
  identity[0].offsets.assign(32, 0);
  identity[1].offsets.assign(32, 0);
  std::vector<IterationPlan> bare(2);  // no offsets at all: plain positions
  for (int i = 0; i < 3; ++i) {
    const auto ra = train_step(a, tokens, 32, identity, sa, 1.0);
    const auto rb = train_step(b, tokens, 32, bare, sb, 1.0);
    EXPECT_EQ(ra.loss, rb.loss);
  }
}

TEST(RunTraining, ExtendWithUnitScaleReducesToPretrain) {
  const auto corpus = repetitive_corpus(4096);
  auto pre = base_train(Phase::pretrain, 20);
  auto ext = base_train(Phase::extend, 20);
  ext.policy.g_max = 1;
  auto m1 = Model<float>::initialized(small_config(), 7);
  auto m2 = m1;
  const auto l1 = run_training(m1, pre, corpus);
  const auto l2 = run_training(m2, ext, corpus);
  ASSERT_EQ(l1.size(), l2.size());
  for (std::size_t i = 0; i < l1.size(); ++i) EXPECT_EQ(l1[i].loss, l2[i].loss) << "step " << i;
}

TEST(RunTraining, DeterministicGivenSeed) {
  const auto corpus = repetitive_corpus(4096);
  auto cfg = base_train(Phase::extend, 8);
  cfg.policy.g_max = 4;
  auto m1 = Model<float>::initialized(small_config(), 8);
  auto m2 = m1;
  const auto l1 = run_training(m1, cfg, corpus);
  const auto l2 = run_training(m2, cfg, corpus);
  ASSERT_EQ(l1.size(), l2.size());
  for (std::size_t i = 0; i < l1.size(); ++i) {
    EXPECT_EQ(l1[i].loss, l2[i].loss);
    EXPECT_EQ(l1[i].g, l2[i].g);
    EXPECT_EQ(l1[i].t, l2[i].t);
    EXPECT_EQ(l1[i].wall_ms, 0);
  }
}

TEST(RunTraining, LoggedPlansStayInPolicyRange) {
  ModelConfig c = small_config();
  c.base_window = 128;
  const auto corpus = repetitive_corpus(8192);
  auto cfg = base_train(Phase::extend, 10);
  cfg.trained_window = 128;
  cfg.batch_size = 1;
  cfg.policy.base_window = 128;
  cfg.policy.g_max = 8;
  auto m = Model<float>::initialized(c, 9);
  const auto log = run_training(m, cfg, corpus);
  ASSERT_EQ(log.size(), 10u);
  for (const auto& r : log) {
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_GE(r.g, 1);
    EXPECT_LE(r.g, 8);
    EXPECT_GE(r.t, 0);
    EXPECT_LE(r.t, (r.g - 1) * 128);
  }
  EXPECT_EQ(log.back().tokens, 10 * 128);
}

TEST(RunTraining, RejectsBadConfigurations) {
  const auto corpus = repetitive_corpus(4096);
  auto m = Model<float>::initialized(small_config(), 10);
  auto cfg = base_train(Phase::pretrain, 1);
  cfg.trained_window = 64;
  EXPECT_THROW(run_training(m, cfg, corpus), ConfigError);
  cfg = base_train(Phase::extend, 1);
  cfg.trained_window = 64;
  cfg.policy.g_max = 1;
  EXPECT_THROW(run_training(m, cfg, corpus), ConfigError);
  cfg = base_train(Phase::pretrain, 1);
  EXPECT_THROW(run_training(m, cfg, std::vector<std::int32_t>(20, 1)), DataError);
}

TEST(RunTraining, NonFiniteLossAbortsWithLastCheckpoint) {
  const auto corpus = repetitive_corpus(4096);
  auto m = Model<float>::initialized(small_config(), 11);
  m.for_each_parameter([](const std::string& name, Tensor<float>& t) {
    if (name == "unembed") t.data[0] = std::numeric_limits<float>::infinity();
  });
  auto cfg = base_train(Phase::pretrain, 3);
  try {
    run_training(m, cfg, corpus);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.last_good_step(), -1);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(RunTraining, HooksFireOnScheduleAndLossFalls) {
  const auto corpus = repetitive_corpus(8192);
  auto cfg = base_train(Phase::pretrain, 120);
  cfg.batch_size = 4;
  cfg.learning_rate = 3e-3;
  cfg.checkpoint_every = 50;
  cfg.log_every = 10;
  auto m = Model<float>::initialized(small_config(), 12);
  std::vector<std::int64_t> checkpoints;
  std::size_t records = 0;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](std::int64_t s) { checkpoints.push_back(s); };
  hooks.on_record = [&](const TrainRecord&) { ++records; };
  const auto log = run_training(m, cfg, corpus, hooks);
  EXPECT_EQ(checkpoints, (std::vector<std::int64_t>{50, 100, 120}));
  EXPECT_EQ(records, log.size());
  EXPECT_EQ(log.size(), 13u);
  EXPECT_NEAR(log.front().loss, std::log(256.0), 0.1);
  EXPECT_LT(log.back().loss, std::log(256.0) / 2.0);
}
