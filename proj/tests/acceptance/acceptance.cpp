// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Prints one [PASS]/[FAIL] line per criterion
// and exits nonzero if any fails. Pass criterion numbers as arguments to run
// a subset.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "moa/checkpoint.hpp"
#include "moa/errors.hpp"
#include "moa/telemetry.hpp"
#include "moa_cli/cli.hpp"
#include "test_support.hpp"

using namespace moa;
namespace mt = moa::testing;
namespace fs = std::filesystem;
using mt::Gen;
using mt::Vec;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
  }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

const std::vector<std::string> kModes = {
    "soft", "sparse_learned", "sparse_fixed", "softmax_soft", "naive_composition",
    "lora_only_routed", "single_lora", "single_parallel_adapter", "single_prompt"};

const std::vector<std::string> kSixExperts = {"lora_q", "lora_k", "lora_v", "lora_o", "lora_up",
                                              "parallel_adapter"};

void copy_params(const MoaModel& src, const MoaModel& dst) {
  std::map<std::string, ad::Tensor> from;
  for (const auto& [n, t] : src.trainable_parameters()) from.emplace(n, t);
  for (const auto& [n, t] : dst.trainable_parameters()) {
    const auto it = from.find(n);
    if (it == from.end()) continue;
    auto d = ad::Tensor(t).mutable_data();
    std::copy(it->second.data().begin(), it->second.data().end(), d.begin());
  }
}

double max_abs_diff(const ad::Tensor& a, const ad::Tensor& b) { return mt::max_abs_diff(mt::values(a), mt::values(b)); }

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("moa_accept_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 1 ------------------------------------------------------------------------
Outcome identity_at_init() {
  Stopwatch sw;
  auto bb = mt::frozen_backbone(ModelConfig{});
  Gen g(101);
  const TokenBatch batch = mt::random_batch(g, 100, 16, bb->config().vocab_size);
  const ad::Tensor frozen = bb->forward(batch);
  double worst = 0.0;
  std::size_t checked = 0;
  for (const auto& mode : kModes) {
    for (const std::string level : {"token", "instance"}) {
      MoaConfig c;
      apply_mode_name(c, mode);
      if (level == "instance" && !is_routed(c.mode)) continue;
      c.routing_level = level;
      c.seed = 7;
      MoaModel m(bb, c);
      worst = std::max(worst, max_abs_diff(m.forward(batch), frozen));
      ++checked;
    }
  }
  const double s = sw.seconds();
  return {worst <= 1e-9 && s < 10.0, std::to_string(checked) + " configurations, 100 sequences, max |diff| " +
                                         fmt("%.2e", worst) + ", " + fmt("%.2f", s) + " s"};
}

// 2 ------------------------------------------------------------------------
Outcome gradient_check() {
  Stopwatch sw;
  auto bb = mt::frozen_backbone(mt::tiny_config(8, 2, 2, 16, 3));
  MoaModel m(bb, MoaConfig{});
  Gen g(202);
  // Away from zero init so every tensor has a nonzero gradient.
  mt::randomize(m, g, 0.4);
  const TaskSpec task = gen_mod_add_task(0);
  const TokenBatch batch = to_batch(std::span<const Example>(task.train.data(), 4));
  std::vector<ad::Tensor> params;
  std::size_t entries = 0;
  for (const auto& [n, t] : m.trainable_parameters()) {
    params.push_back(t);
    entries += t.numel();
  }
  const double err = mt::fd_check(
      params, [&](const std::vector<ad::Tensor>&) { return batch_loss(m.forward(batch), batch); });
  const double s = sw.seconds();
  return {m.n_experts() == 7 && err < 1e-4 && s < 300.0,
          std::to_string(entries) + " entries over " + std::to_string(params.size()) + " tensors, " +
              std::to_string(m.n_experts()) + " experts, max rel err " + fmt("%.2e", err) + ", " + fmt("%.1f", s) +
              " s"};
}

// 3 ------------------------------------------------------------------------
Outcome dense_sparse_equivalence() {
  auto bb = mt::frozen_backbone(ModelConfig{});
  Gen g(303);
  double worst_oracle = 0.0;
  bool counts_ok = true;
  std::size_t active = 0, capacity = 0;
  for (int trial = 0; trial < 50; ++trial) {
    MoaConfig c;
    apply_mode_name(c, trial % 2 ? "sparse_learned" : "sparse_fixed");
    c.gamma = g.uniform(0.3, 0.7);
    c.seed = static_cast<std::uint64_t>(trial);
    MoaModel m(bb, c);
    mt::randomize(m, g, 0.3);
    const TokenBatch batch = mt::random_batch(g, 4, 10, 32);
    InvocationCounter counter;
    RoutingTrace trace;
    ForwardOptions o;
    o.counter = &counter;
    o.trace = &trace;
    const ad::Tensor sparse = m.forward(batch, o);
    // Oracle: every expert computed, then gated by weight * 1[w > threshold].
    ForwardOptions dense;
    dense.gate_override = [](std::size_t, const ad::Tensor& w, const ad::Tensor& th) {
      Vec gate(w.data().begin(), w.data().end());
      for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t i = 0; i < w.cols(); ++i)
          if (!(gate[r * w.cols() + i] > th.data()[r])) gate[r * w.cols() + i] = 0.0;
      return ad::Tensor::from({w.rows(), w.cols()}, gate);
    };
    worst_oracle = std::max(worst_oracle, max_abs_diff(sparse, m.forward(batch, dense)));
    std::size_t mask_true = 0;
    for (const auto& lt : trace.forwards.at(0).layers) mask_true += lt.mask.count();
    counts_ok = counts_ok && counter.total() == mask_true;
    active += mask_true;
    capacity += batch.rows() * m.n_experts() * m.n_layers();
  }

  double worst_zero = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    MoaConfig zero;
    apply_mode_name(zero, "sparse_fixed");
    zero.gamma = 0.0;
    MoaModel sparse(bb, zero);
    mt::randomize(sparse, g, 0.3);
    MoaConfig six;
    six.experts = kSixExperts;
    MoaModel soft(bb, six);
    copy_params(sparse, soft);
    const TokenBatch batch = mt::random_batch(g, 4, 10, 32);
    worst_zero = std::max(worst_zero, max_abs_diff(sparse.forward(batch), soft.forward(batch)));
  }
  return {worst_oracle <= 1e-9 && worst_zero <= 1e-9 && counts_ok && active > 0 && active < capacity,
          "oracle max |diff| " + fmt("%.2e", worst_oracle) + " over 50 models (" + fmt("%.1f", 100.0 * active / capacity) +
              "% of expert slots active), Gamma=0 vs 6-expert soft " + fmt("%.2e", worst_zero) +
              (counts_ok ? "" : ", counter disagrees with mask")};
}

// 4 ------------------------------------------------------------------------
Outcome unit_threshold_boundary() {
  auto bb = mt::frozen_backbone(ModelConfig{});
  Gen g(404);
  double worst = 0.0;
  std::uint64_t invocations = 0;
  for (int trial = 0; trial < 10; ++trial) {
    MoaConfig c;
    apply_mode_name(c, "sparse_fixed");
    c.gamma = 1.0;
    MoaModel m(bb, c);
    mt::randomize(m, g, 1.0);
    const TokenBatch batch = mt::random_batch(g, 8, 12, 32);
    InvocationCounter counter;
    ForwardOptions o;
    o.counter = &counter;
    worst = std::max(worst, max_abs_diff(m.forward(batch, o), bb->forward(batch)));
    invocations += counter.total();
  }
  return {worst == 0.0 && invocations == 0,
          "max |diff| vs frozen " + fmt("%.2e", worst) + ", expert invocations " + std::to_string(invocations)};
}

// 5 ------------------------------------------------------------------------
Outcome router_contracts() {
  Gen g(505);
  std::vector<std::string> broken;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = g.index(2, 16), n = g.index(1, 7), T = g.index(1, 12);
    const ad::Tensor x = g.tensor(T, d, false, 3.0);

    RouterState sig = make_router(d, n, RouterActivation::sigmoid);
    for (double w : mt::values(route(sig, x)))
      if (w != 0.5) broken.push_back("zero-init sigmoid");
    RouterState soft = make_router(d, n, RouterActivation::softmax);
    for (double w : mt::values(route(soft, x)))
      if (w != 1.0 / static_cast<double>(n)) broken.push_back("zero-init softmax");

    for (auto& v : sig.w_r.mutable_data()) v = g.normal(2.0);
    const Vec before = mt::values(route(sig, x));
    for (double w : before)
      if (!(w > 0.0 && w < 1.0)) broken.push_back("sigmoid range");
    const std::size_t col = g.index(0, n - 1);
    for (std::size_t r = 0; r < d; ++r) sig.w_r.mutable_data()[r * n + col] += g.normal();
    const Vec after = mt::values(route(sig, x));
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < n; ++i)
        if (i != col && before[t * n + i] != after[t * n + i]) broken.push_back("sigmoid column locality");

    for (auto& v : soft.w_r.mutable_data()) v = g.normal(2.0);
    const Vec sm = mt::values(route(soft, x));
    for (std::size_t t = 0; t < T; ++t) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += sm[t * n + i];
      if (std::abs(s - 1.0) > 1e-9) broken.push_back("softmax row sum");
    }

    const double gmax = g.uniform(0.05, 1.0);
    ThresholdState th = make_learned_threshold(d, gmax);
    // Includes saturating pre-activations.
    const double sd = trial % 5 == 0 ? 100.0 : 2.0;
    for (auto& v : th.w_gamma.mutable_data()) v = g.normal(sd);
    th.b_gamma.mutable_data()[0] = g.normal(sd);
    for (double v : mt::values(threshold(th, x)))
      if (!(v > 0.0 && v < gmax)) broken.push_back("learned threshold range");
  }
  std::set<std::string> kinds(broken.begin(), broken.end());
  std::string detail = "50 random routers/thresholds";
  for (const auto& k : kinds) detail += ", violated: " + k;
  return {broken.empty(), detail};
}

// 6 and 7 -------------------------------------------------------------------
struct Sweep {
  double frozen = 0, soft = 0, naive = 0, soft6 = 0, sparse = 0, active = 0;
  std::vector<double> sparse_active;
  double seconds = 0;
};

const Sweep& adaptation_sweep() {
  static const Sweep sweep = [] {
    Stopwatch sw;
    Sweep s;
    Backbone bb(ModelConfig{});
    TrainConfig pre;
    pre.steps = 2000;
    pre.lr = 3e-3;
    pretrain_then_freeze(bb, gen_base_task(0), pre);
    auto frozen = std::make_shared<const Backbone>(std::move(bb));
    std::printf("  pretrained copy backbone: %.1f s\n", sw.seconds());
    std::fflush(stdout);
    const int seeds = 3;
    for (int seed = 0; seed < seeds; ++seed) {
      const TaskSpec task = gen_mod_add_task(static_cast<std::uint64_t>(seed));
      const double f = evaluate(*frozen, task).accuracy;
      s.frozen += f / seeds;
      auto adapt = [&](MoaConfig c, double& acc_sum) -> std::unique_ptr<MoaModel> {
        c.seed = static_cast<std::uint64_t>(seed);
        auto m = std::make_unique<MoaModel>(frozen, c);
        TrainConfig tc;
        tc.steps = 1000;
        tc.lr = 1e-3;
        tc.seed = static_cast<std::uint64_t>(seed);
        const TrainResult r = train_adapters(*m, task, tc);
        acc_sum += r.eval->accuracy / seeds;
        return m;
      };
      MoaConfig soft, naive, six, sparse;
      apply_mode_name(naive, "naive_composition");
      six.experts = kSixExperts;
      apply_mode_name(sparse, "sparse_learned");
      sparse.gamma_max = 0.5;
      adapt(soft, s.soft);
      adapt(naive, s.naive);
      adapt(six, s.soft6);
      auto sm = adapt(sparse, s.sparse);
      std::vector<std::vector<int>> seqs;
      for (std::size_t i = 0; i < 50; ++i) {
        auto q = task.eval[i].prompt;
        q.insert(q.end(), task.eval[i].answer.begin(), task.eval[i].answer.end());
        seqs.push_back(std::move(q));
      }
      const double act = aggregate(capture(*sm, make_batch(seqs)).records).global_active;
      s.sparse_active.push_back(act);
      s.active += act / seeds;
      std::printf("  seed %d done: %.1f s\n", seed, sw.seconds());
      std::fflush(stdout);
    }
    s.seconds = sw.seconds();
    return s;
  }();
  return sweep;
}

Outcome adaptation_headroom() {
  const Sweep& s = adaptation_sweep();
  // Regression bounds pinned from the first verified run (frozen 0.145,
  // soft 0.9987, naive 0.9987).
  const bool spec_bounds = s.soft - s.frozen >= 0.20 && s.soft >= s.naive;
  const bool pinned = s.soft - s.frozen >= 0.80 && s.soft >= 0.995 && s.frozen <= 0.20;
  return {spec_bounds && pinned && s.seconds < 1800.0,
          "mean acc frozen " + fmt("%.4f", s.frozen) + ", soft " + fmt("%.4f", s.soft) + ", naive " +
              fmt("%.4f", s.naive) + " (soft - frozen " + fmt("%+.4f", s.soft - s.frozen) + ", soft - naive " +
              fmt("%+.4f", s.soft - s.naive) + "), sweep " + fmt("%.0f", s.seconds) + " s"};
}

Outcome sparse_efficiency() {
  const Sweep& s = adaptation_sweep();
  std::string per_seed;
  for (double a : s.sparse_active) per_seed += (per_seed.empty() ? "" : "/") + fmt("%.2f", a);
  // Pinned from the first verified run: 4.66/4.91/4.76 active, sparse 1.0.
  const bool spec_bounds = s.active < 6.0 && std::abs(s.sparse - s.soft6) <= 0.02;
  const bool pinned = s.active >= 2.0 && s.active <= 5.0 && s.sparse >= 0.99;
  return {spec_bounds && pinned, "mean activated experts " + fmt("%.3f", s.active) + " of 6 (" + per_seed +
                                     "), sparse acc " + fmt("%.4f", s.sparse) + " vs 6-expert soft " +
                                     fmt("%.4f", s.soft6) + " (" + fmt("%+.4f", s.sparse - s.soft6) + ")"};
}

// 8 ------------------------------------------------------------------------
Outcome parameter_accounting() {
  Gen g(808);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t heads = g.index(1, 4);
    ModelConfig mc = mt::tiny_config(heads * g.index(1, 6), g.index(1, 4), heads, g.index(1, 40));
    MoaConfig c;
    apply_mode_name(c, kModes[g.index(0, kModes.size() - 1)]);
    c.rank = g.index(1, 8);
    c.bottleneck = g.index(1, 8);
    c.prompt_len = g.index(1, 6);
    MoaModel m(mt::frozen_backbone(mc), c);
    const std::size_t d = mc.d_model;
    std::size_t per_layer = 0;
    for (const auto& name : m.expert_names()) {
      if (name == "parallel_adapter") per_layer += 2 * d * c.bottleneck;
      else if (name == "prompt") per_layer += c.prompt_len * d + heads;
      else per_layer += c.rank * (d + (name == "lora_up" ? mc.d_ff : d));
    }
    if (is_routed(c.mode)) per_layer += d * m.n_experts();
    if (c.mode == MoaMode::sparse_learned) per_layer += d + 1;
    std::size_t tensors = 0;
    for (const auto& [n, t] : m.trainable_parameters()) tensors += t.numel();
    if (m.param_report().total != mc.n_layers * per_layer || tensors != mc.n_layers * per_layer) ++mismatches;
  }
  // 32 layers, rank 16 LoRA on q, k, v, o (GQA: k/v project to 1024) and up (14336).
  const std::size_t llama = 32 * (lora_param_formula(4096, 4096, 16) + 2 * lora_param_formula(4096, 1024, 16) +
                                  lora_param_formula(4096, 4096, 16) + lora_param_formula(4096, 14336, 16));
  return {mismatches == 0 && llama == 23068672u, "20 random configs, " + std::to_string(mismatches) +
                                                     " mismatches; LLaMA-shaped LoRA count " + std::to_string(llama)};
}

// 9 ------------------------------------------------------------------------
Outcome determinism() {
  const auto dir = scratch_dir("det");
  const Json cfg{{"seed", 11},
                 {"task_options", {{"train_size", 256}, {"eval_size", 32}}},
                 {"backbone", {{"d_model", 16}, {"n_layers", 2}, {"n_heads", 2}, {"d_ff", 32}}},
                 {"backbone_checkpoint", "pre/backbone.json"},
                 {"moa", {{"mode", "sparse"}}},
                 {"pretrain", {{"steps", 40}, {"batch_size", 16}}},
                 {"train", {{"steps", 40}, {"batch_size", 16}, {"lr", 1e-2}}},
                 {"telemetry", {{"samples", 8}}}};
  std::vector<std::string> diffs;
  std::string failure;
  for (const std::string run : {"a", "b"}) {
    fs::create_directories(dir / run);
    write_json_file(cfg, dir / run / "run.json");
    std::ostringstream out, err;
    const std::string c = (dir / run / "run.json").string();
    if (cli::run({"pretrain", "--config", c, "--out", (dir / run / "pre").string()}, out, err) != 0 ||
        cli::run({"adapt", "--config", c, "--out", (dir / run / "adapt").string()}, out, err) != 0)
      failure = err.str();
  }
  for (const char* f : {"pre/backbone.json", "pre/metrics.ndjson", "adapt/adapters.json", "adapt/metrics.ndjson",
                        "adapt/telemetry/run_sparse_learned_stats.csv"}) {
    const std::string a = slurp(dir / "a" / f), b = slurp(dir / "b" / f);
    if (a.empty() || a != b) diffs.push_back(f);
  }
  fs::remove_all(dir);
  std::string detail = failure.empty() ? "two CLI pretrain+adapt runs, 5 artifacts compared byte for byte"
                                       : "run failed: " + failure;
  for (const auto& d : diffs) detail += ", differs: " + d;
  return {failure.empty() && diffs.empty(), detail};
}

// 10 -----------------------------------------------------------------------
Outcome telemetry_neutrality() {
  auto bb = mt::frozen_backbone(ModelConfig{});
  Gen g(1010);
  bool identical = true;
  bool round_trip = true;
  const auto dir = scratch_dir("telemetry");
  for (const std::string mode : {"soft", "sparse_learned", "softmax_soft", "naive_composition"}) {
    MoaConfig c;
    apply_mode_name(c, mode);
    MoaModel m(bb, c);
    mt::randomize(m, g, 0.3);
    const TokenBatch batch = mt::random_batch(g, 6, 12, 32);
    const ad::Tensor plain = m.forward(batch);
    const CaptureResult cap = capture(m, batch);
    identical = identical && mt::values(plain) == mt::values(cap.logits) && mt::values(plain) == mt::values(m.forward(batch));
    const AggregateStats stats = aggregate(cap.records);
    write_stats_csv(stats, dir / "stats.csv");
    round_trip = round_trip && read_stats_csv(dir / "stats.csv") == stats;
  }

  // inspect over 50 samples on a saved backbone, fresh sparse adapters.
  save_backbone(*bb, dir / "backbone.json");
  write_json_file(Json{{"backbone_checkpoint", "backbone.json"}}, dir / "run.json");
  std::ostringstream out, err;
  const int code = cli::run({"inspect", "--config", (dir / "run.json").string(), "--mode", "sparse", "--samples", "50",
                             "--out", (dir / "inspect").string()},
                            out, err);
  std::size_t rows = 0, layers = 0, experts = 0;
  std::set<std::size_t> samples;
  if (code == 0) {
    const AggregateStats s = read_stats_csv(dir / "inspect" / "telemetry" / stats_filename("run", "sparse_learned"));
    layers = s.n_layers();
    experts = s.n_experts();
    std::ifstream in(dir / "inspect" / "telemetry" / stats_filename("run", "sparse_learned"));
    for (std::string line; std::getline(in, line);) ++rows;
    --rows;  // header
    std::ifstream rec(dir / "inspect" / "telemetry" / "run_sparse_learned_records.csv");
    std::string line;
    std::getline(rec, line);
    while (std::getline(rec, line)) samples.insert(std::stoul(line.substr(0, line.find(','))));
  }
  fs::remove_all(dir);
  const bool shape = code == 0 && layers == 4 && experts == 6 && rows == layers * experts && samples.size() == 50;
  return {identical && round_trip && shape,
          std::string("capture logits ") + (identical ? "bit-identical" : "DIFFER") + ", CSV round trip " +
              (round_trip ? "exact" : "LOSSY") + ", inspect " + std::to_string(samples.size()) + " samples -> " +
              std::to_string(layers) + "x" + std::to_string(experts) + " matrix (" + std::to_string(rows) + " rows)" +
              (code == 0 ? "" : ", inspect failed: " + err.str())};
}

// 11 -----------------------------------------------------------------------
Outcome adamw_unit() {
  // Scalar recurrence, written out independently of the optimizer.
  struct Scalar {
    double lr, b1, b2, eps, wd, m = 0, v = 0;
    int t = 0;
    double step(double th, double grad) {
      ++t;
      m = b1 * m + (1 - b1) * grad;
      v = b2 * v + (1 - b2) * grad * grad;
      const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
      return th - lr * wd * th - lr * mh / (std::sqrt(vh) + eps);
    }
  };
  auto set_grad = [](ad::Tensor& p, const Vec& grad) {
    p.zero_grad();
    ad::backward(ad::sum(ad::mul(p, ad::Tensor::from(p.shape(), grad))));
  };
  double worst = 0.0;

  // One step, g = 1, lr 0.1: theta moves by -0.1 / (1 + 1e-8).
  ad::Tensor p = ad::Tensor::from({1}, {0.0}, true);
  AdamW first({{"p", p}}, AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
  set_grad(p, {1.0});
  first.step();
  worst = std::max(worst, std::abs(p.data()[0] - (-0.1 / (1.0 + 1e-8))));

  // Decay 0.1 with zero gradient shrinks by (1 - lr*wd) per step.
  ad::Tensor q = ad::Tensor::from({2}, {1.0, -3.0}, true);
  AdamW decay({{"q", q}}, AdamWConfig{0.05, 0.9, 0.999, 1e-8, 0.1});
  for (int k = 1; k <= 20; ++k) {
    set_grad(q, {0.0, 0.0});
    decay.step();
    worst = std::max(worst, std::abs(q.data()[0] - std::pow(1 - 0.005, k)));
    worst = std::max(worst, std::abs(q.data()[1] + 3.0 * std::pow(1 - 0.005, k)));
  }

  Gen g(1111);
  for (int trial = 0; trial < 20; ++trial) {
    const AdamWConfig cfg{g.uniform(1e-4, 0.2), g.uniform(0.5, 0.95), g.uniform(0.9, 0.9999), 1e-8,
                          g.uniform(0.0, 0.3)};
    const std::size_t n = g.index(1, 5);
    ad::Tensor r = ad::Tensor::from({n}, g.normals(n), true);
    Vec theta = mt::values(r);
    std::vector<Scalar> ref(n, Scalar{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay});
    AdamW opt({{"r", r}}, cfg);
    for (int step = 0; step < 30; ++step) {
      const Vec grad = g.normals(n);
      set_grad(r, grad);
      opt.step();
      for (std::size_t i = 0; i < n; ++i) {
        theta[i] = ref[i].step(theta[i], grad[i]);
        worst = std::max(worst, std::abs(r.data()[i] - theta[i]));
      }
    }
  }

  // Zero gradient, zero decay: a fixpoint.
  ad::Tensor z = g.tensor(3, 4);
  const Vec z0 = mt::values(z);
  AdamW still({{"z", z}}, AdamWConfig{});
  for (int step = 0; step < 50; ++step) {
    set_grad(z, Vec(12, 0.0));
    still.step();
  }
  const bool fixpoint = mt::values(z) == z0;
  return {worst <= 1e-12 && fixpoint, "max |theta - recurrence| " + fmt("%.2e", worst) + ", fixpoint " +
                                          (fixpoint ? "holds" : "BROKEN")};
}

struct Criterion {
  int id;
  const char* name;
  Outcome (*run)();
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "identity at init", identity_at_init},
      {2, "gradient correctness", gradient_check},
      {3, "dense/sparse equivalence", dense_sparse_equivalence},
      {4, "unit threshold boundary", unit_threshold_boundary},
      {5, "router contracts", router_contracts},
      {6, "adaptation headroom and ordering", adaptation_headroom},
      {7, "sparse efficiency", sparse_efficiency},
      {8, "parameter accounting", parameter_accounting},
      {9, "determinism", determinism},
      {10, "telemetry observer neutrality", telemetry_neutrality},
      {11, "AdamW unit behavior", adamw_unit},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0, ran = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    ++ran;
    failed += !o.pass;
    std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed ? 1 : 0;
}
