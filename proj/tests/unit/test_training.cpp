// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include <nlohmann/json.hpp>

#include "moa/errors.hpp"
#include "moa/tasks.hpp"
#include "moa/training.hpp"
#include "test_support.hpp"

using namespace moa;
using moa::testing::frozen_backbone;
using moa::testing::Gen;
using moa::testing::tiny_config;
using moa::testing::values;
using moa::testing::Vec;

namespace {

ad::Tensor scalar_param(double v) { return ad::Tensor::from({1}, {v}, true); }

void set_grad(ad::Tensor t, const Vec& g) {
  auto d = t.mutable_grad();
  std::copy(g.begin(), g.end(), d.begin());
}

// Scalar AdamW recurrence written out directly.
struct ScalarAdamW {
  double lr, b1, b2, eps, wd;
  double m = 0, v = 0;
  int t = 0;
  double step(double theta, double g) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    return theta - lr * wd * theta - lr * mh / (std::sqrt(vh) + eps);
  }
};

TaskOptions small_options() {
  TaskOptions o;
  o.train_size = 200;
  o.eval_size = 32;
  o.max_len = 4;
  return o;
}

TrainConfig short_train(std::size_t steps) {
  TrainConfig c;
  c.steps = steps;
  c.batch_size = 8;
  c.lr = 1e-2;
  return c;
}

// Puts all mass on the correct next token of a copy example.
ad::Tensor copy_oracle(const TokenBatch& b) {
  const std::size_t V = vocab::size;
  Vec logits(b.rows() * V, 0.0);
  for (std::size_t i = 0; i < b.batch; ++i) {
    const int* s = b.tokens.data() + i * b.seq;
    std::size_t sep = 0;
    while (sep < b.lengths[i] && s[sep] != vocab::sep) ++sep;
    for (std::size_t p = sep; p < b.lengths[i]; ++p) {
      const std::size_t src = p - sep + 1;
      if (src < sep) logits[(i * b.seq + p) * V + static_cast<std::size_t>(s[src])] = 10.0;
    }
  }
  return ad::Tensor::from({b.rows(), V}, logits);
}

}  // namespace

TEST(AdamW, FirstStepHandValue) {
  ad::Tensor p = scalar_param(0.0);
  AdamW opt({{"p", p}}, AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
  set_grad(p, {1.0});
  opt.step();
  EXPECT_NEAR(p.data()[0], -0.1 / (1.0 + 1e-8), 1e-12);
  EXPECT_FALSE(p.has_grad());
}

TEST(AdamW, MatchesScalarRecurrence) {
  Gen g(1);
  for (int trial = 0; trial < 20; ++trial) {
    const AdamWConfig cfg{g.uniform(1e-4, 0.2), g.uniform(0.5, 0.95), g.uniform(0.9, 0.9999), 1e-8,
                          g.coin() ? 0.0 : g.uniform(0.0, 0.5)};
    const std::size_t n = g.index(1, 5);
    ad::Tensor p = ad::Tensor::from({n}, g.normals(n), true);
    std::vector<ScalarAdamW> ref(n, ScalarAdamW{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
    Vec theta = values(p);
    AdamW opt({{"p", p}}, cfg);
    for (int step = 0; step < 25; ++step) {
      const Vec grad = g.normals(n);
      set_grad(p, grad);
      opt.step();
      for (std::size_t i = 0; i < n; ++i) theta[i] = ref[i].step(theta[i], grad[i]);
      for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(p.data()[i], theta[i], 1e-12);
    }
    EXPECT_EQ(opt.step_count(), 25u);
  }
}

TEST(AdamW, DecoupledDecayShrinksGeometrically) {
  ad::Tensor p = ad::Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  AdamW opt({{"p", p}}, AdamWConfig{0.05, 0.9, 0.999, 1e-8, 0.1});
  for (int k = 1; k <= 10; ++k) {
    set_grad(p, {0, 0, 0});
    opt.step();
    const double f = std::pow(1.0 - 0.05 * 0.1, k);
    EXPECT_NEAR(p.data()[0], 1.0 * f, 1e-12);
    EXPECT_NEAR(p.data()[1], -2.0 * f, 1e-12);
    EXPECT_NEAR(p.data()[2], 0.5 * f, 1e-12);
  }
  for (double m : opt.first_moment(0)) EXPECT_EQ(m, 0.0);
  for (double v : opt.second_moment(0)) EXPECT_EQ(v, 0.0);
}

TEST(AdamW, ZeroGradientZeroDecayIsAFixpoint) {
  Gen g(2);
  ad::Tensor a = g.tensor(3, 4), b = g.tensor(2, 2);
  const Vec a0 = values(a), b0 = values(b);
  AdamW opt({{"a", a}, {"b", b}}, AdamWConfig{});
  for (int step = 0; step < 50; ++step) {
    set_grad(a, Vec(12, 0.0));  // explicit zeros; b has no gradient at all
    opt.step();
  }
  EXPECT_EQ(values(a), a0);
  EXPECT_EQ(values(b), b0);
}

TEST(AdamW, FrozenParametersAreNotTracked) {
  Gen g(3);
  ad::Tensor live = g.tensor(2, 3), frozen = g.tensor(4, 4, false);
  const Vec f0 = values(frozen);
  AdamW opt({{"live", live}, {"frozen", frozen}}, AdamWConfig{});
  EXPECT_EQ(opt.parameters().size(), 1u);
  EXPECT_EQ(opt.parameter_count(), 6u);
  EXPECT_EQ(opt.state_size(), 12u);
  set_grad(live, Vec(6, 1.0));
  opt.step();
  EXPECT_EQ(values(frozen), f0);
}

TEST(AdamW, StateSizeIsTwiceTheTrainableCount) {
  auto bb = frozen_backbone(tiny_config());
  MoaModel m(bb, MoaConfig{});
  std::vector<std::pair<std::string, ad::Tensor>> all = bb->named_parameters();
  const auto trainable = m.trainable_parameters();
  all.insert(all.end(), trainable.begin(), trainable.end());
  AdamW opt(all, AdamWConfig{});
  EXPECT_EQ(opt.parameter_count(), m.param_report().total);
  EXPECT_EQ(opt.state_size(), 2 * m.param_report().total);
}

TEST(AdamW, NanGradientAbortsNamingTheParameter) {
  ad::Tensor a = scalar_param(1.0), b = scalar_param(2.0);
  AdamW opt({{"first", a}, {"second", b}}, AdamWConfig{});
  set_grad(a, {0.5});
  set_grad(b, {std::nan("")});
  try {
    opt.step();
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("second"), std::string::npos);
  }
  EXPECT_EQ(a.data()[0], 1.0);
  EXPECT_EQ(b.data()[0], 2.0);
  EXPECT_EQ(opt.step_count(), 0u);
}

TEST(AdamW, RejectsBadHyperparameters) {
  EXPECT_THROW(AdamW({}, AdamWConfig{-1.0}), ConfigError);
  EXPECT_THROW(AdamW({}, AdamWConfig{0.1, 1.0}), ConfigError);
  EXPECT_THROW(AdamW({}, AdamWConfig{0.1, 0.9, 0.999, 0.0}), ConfigError);
}

TEST(TrainConfig, ValidatesFields) {
  TrainConfig c;
  c.batch_size = 0;
  c.schedule = "step";
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("batch_size"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("schedule"), std::string::npos);
  }
}

TEST(TrainConfig, CosineSchedule) {
  TrainConfig c;
  c.lr = 0.2;
  c.steps = 100;
  EXPECT_EQ(scheduled_lr(c, 50), 0.2);
  c.schedule = "cosine";
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 0), 0.2);
  EXPECT_NEAR(scheduled_lr(c, 50), 0.1, 1e-15);
  EXPECT_NEAR(scheduled_lr(c, 100), 0.0, 1e-15);
}

TEST(TrainAdapters, SameSeedIsBitIdentical) {
  auto bb = frozen_backbone(tiny_config());
  const TaskSpec task = gen_mod_add_task(0, small_options());
  auto run = [&] {
    MoaConfig c;
    apply_mode_name(c, "sparse");
    c.rank = 2;
    MoaModel m(bb, c);
    std::ostringstream sink;
    MetricsLog log(&sink);
    TrainConfig tc = short_train(20);
    tc.eval_every = 10;
    train_adapters(m, task, tc, &log);
    std::vector<Vec> params;
    for (const auto& [n, t] : m.trainable_parameters()) params.push_back(values(t));
    return std::make_pair(sink.str(), params);
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_NE(a.first.find("active_experts_mean"), std::string::npos);
}

TEST(TrainAdapters, ZeroLearningRateKeepsLossConstant) {
  auto bb = frozen_backbone(tiny_config());
  TaskSpec task = gen_mod_add_task(0, small_options());
  task.train.resize(1);
  MoaModel m(bb, MoaConfig{});
  TrainConfig tc = short_train(15);
  tc.lr = 0.0;
  const auto res = train_adapters(m, task, tc);
  ASSERT_EQ(res.losses.size(), 15u);
  for (double l : res.losses) EXPECT_EQ(l, res.losses[0]);
}

TEST(TrainAdapters, LossDecreasesAndBackboneBytesStay) {
  auto bb = frozen_backbone(tiny_config());
  const std::string digest = bb->parameter_digest();
  const TaskSpec task = gen_mod_add_task(1, small_options());
  MoaModel m(bb, MoaConfig{});
  const auto res = train_adapters(m, task, short_train(60));
  EXPECT_LT(res.final_loss, res.initial_loss);
  EXPECT_EQ(bb->parameter_digest(), digest);
  ASSERT_TRUE(res.eval.has_value());
}

TEST(TrainAdapters, RequiresFrozenBackbone) {
  auto bb = std::make_shared<Backbone>(tiny_config());
  MoaModel m(bb, MoaConfig{});
  EXPECT_THROW(train_adapters(m, gen_mod_add_task(0, small_options()), short_train(1)), ContractError);
}

TEST(TrainAdapters, VerifyModeReportsSmallError) {
  auto bb = frozen_backbone(tiny_config());
  MoaModel m(bb, MoaConfig{});
  MetricsLog log;
  TrainConfig tc = short_train(2);
  tc.verify_grads = true;
  tc.verify_fraction = 0.05;
  train_adapters(m, gen_mod_add_task(0, small_options()), tc, &log);
  ASSERT_TRUE(log.records().front().grad_check.has_value());
  EXPECT_GT(log.records().front().grad_check->checked, 0u);
  EXPECT_LT(log.records().front().grad_check->max_rel_error, 1e-3);
  EXPECT_NE(MetricsLog::to_json_line(log.records().front()).find("grad_check"), std::string::npos);
}

TEST(TrainLoop, DivergenceIsDetected) {
  TaskSpec task = gen_copy_task(0, small_options());
  ad::Tensor bias = ad::Tensor::zeros({vocab::size}, true);
  int calls = 0;
  LogitsFn logits = [&](const TokenBatch& b) {
    Vec base(b.rows() * vocab::size, 0.0);
    if (calls++ > 0)
      for (std::size_t r = 0; r < b.rows(); ++r) base[r * vocab::size + vocab::pad] = 1000.0;
    return ad::add_row(ad::Tensor::from({b.rows(), vocab::size}, base), bias);
  };
  TrainConfig tc = short_train(500);
  tc.lr = 0.0;
  try {
    train_loop({{"bias", bias}}, logits, task, tc);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 101"), std::string::npos) << e.what();
  }
}

TEST(TrainLoop, NonFiniteLossAborts) {
  TaskSpec task = gen_copy_task(0, small_options());
  ad::Tensor bias = ad::Tensor::zeros({vocab::size}, true);
  LogitsFn logits = [&](const TokenBatch& b) {
    Vec base(b.rows() * vocab::size, std::nan(""));
    return ad::add_row(ad::Tensor::from({b.rows(), vocab::size}, base), bias);
  };
  EXPECT_THROW(train_loop({{"bias", bias}}, logits, task, short_train(3)), NumericalError);
}

TEST(TrainLoop, SequenceLimitIsChecked) {
  TaskSpec task = gen_copy_task(0, small_options());
  TrainConfig tc = short_train(1);
  tc.max_seq_len = 4;
  EXPECT_THROW(train_loop({}, copy_oracle, task, tc), ConfigError);
}

TEST(TrainLoop, LogsEveryNthStepAndTheLast) {
  auto bb = frozen_backbone(tiny_config());
  MoaModel m(bb, MoaConfig{});
  MetricsLog log;
  TrainConfig tc = short_train(7);
  tc.log_every = 3;
  train_adapters(m, gen_mod_add_task(0, small_options()), tc, &log);
  std::vector<std::size_t> steps;
  for (const auto& r : log.records()) steps.push_back(r.step);
  EXPECT_EQ(steps, (std::vector<std::size_t>{3, 6, 7}));
  EXPECT_TRUE(log.records().back().eval_acc.has_value());
  const auto j = nlohmann::json::parse(MetricsLog::to_json_line(log.records().front()));
  EXPECT_EQ(j.size(), 4u);
  for (const char* k : {"step", "loss", "lr", "active_experts_mean"}) EXPECT_TRUE(j.contains(k)) << k;
}

TEST(Pretrain, ZeroStepsOnlyFreezes) {
  Backbone b(tiny_config());
  const std::string digest = b.parameter_digest();
  const auto res = pretrain_then_freeze(b, gen_copy_task(0, small_options()), short_train(0));
  EXPECT_TRUE(b.frozen());
  EXPECT_EQ(b.parameter_digest(), digest);
  EXPECT_TRUE(res.train.losses.empty());
}

TEST(Pretrain, TrainsThenFreezes) {
  Backbone b(tiny_config());
  const std::string digest = b.parameter_digest();
  const auto res = pretrain_then_freeze(b, gen_copy_task(0, small_options()), short_train(30));
  EXPECT_TRUE(b.frozen());
  EXPECT_NE(b.parameter_digest(), digest);
  EXPECT_LT(res.final_loss, res.train.initial_loss);
}

TEST(Evaluate, PerfectModelScoresOne) {
  const TaskSpec task = gen_copy_task(3, small_options());
  const EvalResult r = evaluate(copy_oracle, task);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.token_accuracy, 1.0);
  EXPECT_EQ(r.examples, task.eval.size());
}

TEST(Evaluate, RandomModelIsNearChanceOnBalancedTask) {
  // Seven residue classes; 256 examples. Each run must land within 4
  // binomial standard deviations of 1/7.
  const TaskSpec task = gen_mod_add_task(0);
  const double p = 1.0 / 7.0;
  const double sd = std::sqrt(p * (1 - p) / static_cast<double>(task.eval.size()));
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Backbone b(tiny_config(8, 2, 2, 16, seed));
    const double acc = evaluate(b, task).accuracy;
    EXPECT_NEAR(acc, p, 4 * sd) << "seed " << seed;
  }
}

TEST(Evaluate, IsSideEffectFree) {
  auto bb = frozen_backbone(tiny_config());
  MoaModel m(bb, MoaConfig{});
  Gen g(4);
  moa::testing::randomize(m, g);
  const TaskSpec task = gen_mod_add_task(2, small_options());
  std::vector<Vec> before;
  for (const auto& [n, t] : m.trainable_parameters()) before.push_back(values(t));
  const EvalResult a = evaluate(m, task), b = evaluate(m, task);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.token_accuracy, b.token_accuracy);
  std::size_t i = 0;
  for (const auto& [n, t] : m.trainable_parameters()) {
    EXPECT_EQ(values(t), before[i++]);
    EXPECT_FALSE(t.has_grad());
  }
}

TEST(Evaluate, EmptyEvalSplitThrows) {
  TaskSpec task = gen_copy_task(0, small_options());
  task.eval.clear();
  EXPECT_THROW(evaluate(copy_oracle, task), ContractError);
}

TEST(VerifyGradients, RestoresParametersExactly) {
  auto bb = frozen_backbone(tiny_config());
  MoaModel m(bb, MoaConfig{});
  Gen g(5);
  moa::testing::randomize(m, g);
  std::vector<Vec> before;
  for (const auto& [n, t] : m.trainable_parameters()) before.push_back(values(t));
  const auto batch = moa::testing::random_batch(g, 2, 5, 32);
  const auto rep = verify_gradients(m.trainable_parameters(),
                                    [&] { return batch_loss(m.forward(batch), batch); }, 0.1, 7);
  EXPECT_LT(rep.max_rel_error, 1e-4);
  EXPECT_FALSE(rep.worst.empty());
  std::size_t i = 0;
  for (const auto& [n, t] : m.trainable_parameters()) {
    EXPECT_EQ(values(t), before[i++]);
    EXPECT_FALSE(t.has_grad());
  }
  EXPECT_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-9), 1e-3);
}
