// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "moa/errors.hpp"
#include "moa/tasks.hpp"
#include "moa/telemetry.hpp"
#include "test_support.hpp"

using namespace moa;
using moa::testing::frozen_backbone;
using moa::testing::Gen;
using moa::testing::random_batch;
using moa::testing::randomize;
using moa::testing::tiny_config;
using moa::testing::values;
using moa::testing::Vec;

namespace {

MoaConfig sparse_config() {
  MoaConfig c;
  apply_mode_name(c, "sparse");
  c.rank = 2;
  c.bottleneck = 4;
  return c;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("moa_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

// Straightforward mean of a sample: sum / n.
double mean(const Vec& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

TEST(Capture, LogitsAreBitIdenticalToPlainForward) {
  auto bb = frozen_backbone(tiny_config());
  Gen g(1);
  for (const std::string mode : {"soft", "sparse", "naive_composition", "softmax_soft"}) {
    MoaConfig c = sparse_config();
    apply_mode_name(c, mode);
    MoaModel m(bb, c);
    randomize(m, g, 0.5);
    const auto batch = random_batch(g, 4, 7, 32);
    EXPECT_EQ(values(capture(m, batch).logits), values(m.forward(batch))) << mode;
  }
}

TEST(Capture, GradientsUnaffectedByTracing) {
  auto bb = frozen_backbone(tiny_config());
  MoaModel m(bb, sparse_config());
  Gen g(2);
  randomize(m, g, 0.5);
  const auto batch = random_batch(g, 3, 6, 32);
  auto grads = [&](bool traced) {
    RoutingTrace trace;
    ForwardOptions o;
    if (traced) o.trace = &trace;
    ad::backward(ad::cross_entropy(m.forward(batch, o), batch.targets, batch.loss_mask));
    std::vector<Vec> out;
    for (const auto& [n, t] : m.trainable_parameters()) {
      out.push_back(t.has_grad() ? Vec(t.grad().begin(), t.grad().end()) : Vec{});
      ad::Tensor(t).zero_grad();
    }
    return out;
  };
  EXPECT_EQ(grads(false), grads(true));
}

TEST(Capture, RecordShapeAndOrder) {
  auto bb = frozen_backbone(tiny_config());
  MoaModel m(bb, sparse_config());
  Gen g(3);
  randomize(m, g, 0.5);
  const auto batch = random_batch(g, 3, 6, 32);
  std::size_t tokens = 0;
  for (auto len : batch.lengths) tokens += len;
  const auto recs = capture(m, batch, 10).records;
  ASSERT_EQ(recs.size(), m.n_layers() * tokens * m.n_experts());
  std::size_t k = 0;
  for (std::size_t l = 0; l < m.n_layers(); ++l)
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t t = 0; t < batch.lengths[b]; ++t)
        for (std::size_t e = 0; e < m.n_experts(); ++e, ++k) {
          const auto& r = recs[k];
          EXPECT_EQ(r.layer, l);
          EXPECT_EQ(r.sample, 10 + b);
          EXPECT_EQ(r.position, t);
          EXPECT_EQ(r.expert, e);
          EXPECT_EQ(r.expert_name, m.expert_names()[e]);
          EXPECT_EQ(r.token, vocab::token_str(batch.tokens[b * batch.seq + t]));
        }
}

TEST(Capture, MaskAgreesWithWeightsAndThresholds) {
  auto bb = frozen_backbone(tiny_config());
  Gen g(4);
  for (int trial = 0; trial < 10; ++trial) {
    MoaModel m(bb, sparse_config());
    randomize(m, g, 0.6);
    for (const auto& r : capture(m, random_batch(g, 3, 8, 32)).records) {
      EXPECT_GT(r.weight, 0.0);
      EXPECT_LT(r.weight, 1.0);
      EXPECT_EQ(r.active, r.weight > r.threshold);
      EXPECT_GT(r.threshold, 0.0);
      EXPECT_LT(r.threshold, 0.5);
    }
  }
}

TEST(Capture, AllOffRowsReproduceFrozenOutput) {
  // Tokens whose mask row is all false at every layer see the frozen model.
  auto bb = frozen_backbone(tiny_config());
  Gen g(5);
  MoaConfig c = sparse_config();
  c.gamma_max = 1.0;
  MoaModel m(bb, c);
  randomize(m, g, 0.6);
  // Small router weights hover near 0.5; a threshold just above that leaves
  // most tokens with no expert and a few with some.
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    for (auto& x : m.layer(l).router->w_r.mutable_data()) x *= 0.05;
    for (auto& x : m.layer(l).threshold->w_gamma.mutable_data()) x = 0.0;
    m.layer(l).threshold->b_gamma.mutable_data()[0] = 0.2;
  }
  const auto batch = random_batch(g, 6, 6, 32);
  const auto cap = capture(m, batch);
  const Vec frozen = values(bb->forward(batch));
  const Vec adapted = values(cap.logits);
  const std::size_t V = 32;
  std::vector<bool> any_on(batch.rows(), false);
  for (const auto& r : cap.records) any_on[r.sample * batch.seq + r.position] = any_on[r.sample * batch.seq + r.position] || r.active;
  std::size_t checked = 0;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    // Causal model: a position is untouched only if every earlier one is too.
    bool clean = true;
    for (std::size_t t = 0; t < batch.lengths[b]; ++t) {
      clean = clean && !any_on[b * batch.seq + t];
      if (!clean) break;
      ++checked;
      for (std::size_t j = 0; j < V; ++j)
        EXPECT_EQ(adapted[(b * batch.seq + t) * V + j], frozen[(b * batch.seq + t) * V + j]);
    }
  }
  std::size_t active = 0;
  for (const auto& r : cap.records) active += r.active;
  EXPECT_GT(active, 0u);
  EXPECT_GT(checked, 0u);
}

TEST(Aggregate, HandExample) {
  std::vector<TelemetryRecord> recs;
  const Vec w{0.6, 0.2, 0.3};
  for (std::size_t e = 0; e < 3; ++e)
    recs.push_back({0, 0, "a", 0, e, "e" + std::to_string(e), w[e], 0.25, w[e] > 0.25});
  const AggregateStats s = aggregate(recs);
  EXPECT_EQ(s.layer_active, (Vec{2.0}));
  EXPECT_EQ(s.global_active, 2.0);
  EXPECT_EQ(s.mean_weight, (std::vector<Vec>{w}));
  EXPECT_EQ(s.mean_threshold, (Vec{0.25}));
  EXPECT_EQ(s.experts, (std::vector<std::string>{"e0", "e1", "e2"}));
}

TEST(Aggregate, ZeroInitRouterGivesHalfEverywhere) {
  auto bb = frozen_backbone(tiny_config());
  MoaModel m(bb, MoaConfig{});
  Gen g(6);
  const AggregateStats s = aggregate(capture(m, random_batch(g, 4, 6, 32)).records);
  ASSERT_EQ(s.n_layers(), 2u);
  ASSERT_EQ(s.n_experts(), 7u);
  for (const auto& row : s.mean_weight)
    for (double v : row) EXPECT_EQ(v, 0.5);
  EXPECT_EQ(s.global_active, 7.0);
}

TEST(Aggregate, MatchesDirectMeansAndGlobalIsMeanOfLayers) {
  auto bb = frozen_backbone(tiny_config(8, 3, 2, 16));
  Gen g(7);
  MoaModel m(bb, sparse_config());
  randomize(m, g, 0.6);
  const auto recs = capture(m, random_batch(g, 5, 6, 32)).records;
  const std::size_t limit = 3;
  const AggregateStats s = aggregate(recs, limit);
  for (std::size_t l = 0; l < 3; ++l) {
    double layer_sum = 0.0;
    for (std::size_t e = 0; e < 6; ++e) {
      Vec w, a;
      for (const auto& r : recs)
        if (r.layer == l && r.expert == e && r.sample < limit) {
          w.push_back(r.weight);
          a.push_back(r.active ? 1.0 : 0.0);
        }
      EXPECT_NEAR(s.mean_weight[l][e], mean(w), 1e-15);
      EXPECT_NEAR(s.mean_active[l][e], mean(a), 1e-15);
      layer_sum += mean(a);
    }
    EXPECT_NEAR(s.layer_active[l], layer_sum, 1e-12);
  }
  EXPECT_NEAR(s.global_active, (s.layer_active[0] + s.layer_active[1] + s.layer_active[2]) / 3.0, 1e-15);
  EXPECT_NE(aggregate(recs), s);
}

TEST(Pearson, MatchesHandValues) {
  EXPECT_NEAR(pearson(Vec{1, 2, 3}, Vec{2, 4, 6}), 1.0, 1e-15);
  EXPECT_NEAR(pearson(Vec{1, 2, 3}, Vec{3, 2, 1}), -1.0, 1e-15);
  // x = 1..4, y = 1,3,2,4: cov 1.0, var 1.25 each -> 0.8
  EXPECT_NEAR(pearson(Vec{1, 2, 3, 4}, Vec{1, 3, 2, 4}), 0.8, 1e-15);
  EXPECT_TRUE(std::isnan(pearson(Vec{1, 1}, Vec{1, 2})));
  EXPECT_THROW(pearson(Vec{1}, Vec{1}), DimensionError);
}

TEST(Invocations, SoftUsesEveryExpertOnEveryToken) {
  auto bb = frozen_backbone(tiny_config());
  MoaModel m(bb, MoaConfig{});
  Gen g(8);
  const auto batch = random_batch(g, 3, 5, 32);
  InvocationCounter c;
  ForwardOptions o;
  o.counter = &c;
  m.forward(batch, o);
  const auto rep = count_expert_invocations(c, m);
  EXPECT_EQ(rep.total, batch.rows() * 7 * 2);
  EXPECT_EQ(rep.capacity, rep.total);
  EXPECT_EQ(rep.ratio(), 1.0);
  double flops = 0.0;
  for (const auto& e : m.layer(0).experts) flops += static_cast<double>(e.flops_per_token());
  EXPECT_EQ(rep.flops, 2.0 * static_cast<double>(batch.rows()) * flops);
}

TEST(Invocations, FlopFormulas) {
  std::mt19937_64 rng(0);
  EXPECT_EQ(Expert("l", make_lora(Site::up, 64, 256, 8, 8.0, rng)).flops_per_token(), 2u * 8 * (64 + 256));
  EXPECT_EQ(Expert("a", make_parallel_adapter(64, 16, ad::Activation::silu, rng)).flops_per_token(), 4u * 64 * 16);
}

TEST(Invocations, UnitThresholdIsZeroAndTrainedSparseIsBelowCapacity) {
  auto bb = frozen_backbone(tiny_config());
  Gen g(9);
  MoaConfig fixed = sparse_config();
  apply_mode_name(fixed, "sparse_fixed");
  fixed.gamma = 1.0;
  MoaModel off(bb, fixed);
  const auto batch = random_batch(g, 3, 5, 32);
  InvocationCounter c;
  ForwardOptions o;
  o.counter = &c;
  off.forward(batch, o);
  EXPECT_EQ(count_expert_invocations(c, off).total, 0u);

  MoaModel sparse(bb, sparse_config());
  randomize(sparse, g, 0.6);
  InvocationCounter c2;
  o.counter = &c2;
  sparse.forward(batch, o);
  const auto rep = count_expert_invocations(c2, sparse);
  EXPECT_LT(rep.total, rep.capacity);
  EXPECT_EQ(rep.layer_totals.size(), 2u);
}

TEST(Export, StatsCsvRoundTrip) {
  auto bb = frozen_backbone(tiny_config());
  Gen g(10);
  MoaModel m(bb, sparse_config());
  randomize(m, g, 0.6);
  const AggregateStats s = aggregate(capture(m, random_batch(g, 6, 7, 32)).records);
  const auto dir = temp_dir("stats");
  const auto path = dir / stats_filename("run7", "sparse_learned");
  EXPECT_EQ(path.filename(), "run7_sparse_learned_stats.csv");
  write_stats_csv(s, path);
  const auto lines = read_lines(path);
  ASSERT_FALSE(lines.empty());
  EXPECT_EQ(lines[0], "layer,expert,mean_weight,mean_threshold,mean_active");
  EXPECT_EQ(lines.size(), 1 + 2 * 6u);
  EXPECT_EQ(read_stats_csv(path), s);

  write_heatmap_csv(s, dir / "heat.csv");
  const auto heat = read_lines(dir / "heat.csv");
  EXPECT_EQ(heat[0], "layer,expert,metric,value");
  EXPECT_EQ(heat.size(), 1 + 2 * 6 * 2u);

  const auto j = stats_to_json(s);
  EXPECT_EQ(j["global_mean_active"].get<double>(), s.global_active);
  EXPECT_EQ(j["experts"].get<std::vector<std::string>>(), s.experts);
  EXPECT_EQ(j["layers"].size(), 2u);
  std::filesystem::remove_all(dir);
}

TEST(Export, EmptyRecordsGiveHeaderOnly) {
  const auto dir = temp_dir("empty");
  write_stats_csv(aggregate({}), dir / "s.csv");
  EXPECT_EQ(read_lines(dir / "s.csv"), (std::vector<std::string>{"layer,expert,mean_weight,mean_threshold,mean_active"}));
  write_records_csv({}, dir / "r.csv");
  EXPECT_EQ(read_lines(dir / "r.csv").size(), 1u);
  EXPECT_EQ(read_stats_csv(dir / "s.csv"), aggregate({}));
  std::filesystem::remove_all(dir);
}

TEST(Export, UnwritablePathThrows) {
  // A regular file where a directory is expected cannot be created over.
  const auto dir = temp_dir("blocked");
  std::ofstream(dir / "file") << "x";
  EXPECT_THROW(write_stats_csv(aggregate({}), dir / "file" / "s.csv"), IoError);
  EXPECT_THROW(read_stats_csv(dir / "missing.csv"), IoError);
  std::ofstream(dir / "bad.csv") << "layer,expert\n";
  EXPECT_THROW(read_stats_csv(dir / "bad.csv"), IoError);
  std::filesystem::remove_all(dir);
}

TEST(Export, FormatDoubleRoundTrips) {
  Gen g(11);
  for (int i = 0; i < 200; ++i) {
    const double v = g.normal(1e3) * std::pow(10.0, g.normal(3));
    EXPECT_EQ(std::stod(format_double(v)), v);
  }
  EXPECT_EQ(format_double(0.5), "0.5");
}
