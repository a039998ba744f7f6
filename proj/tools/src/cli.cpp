// SPDX-License-Identifier: Apache-2.0
#include "moa_cli/cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>

#include <CLI11.hpp>

#include "moa/errors.hpp"
#include "moa/telemetry.hpp"

namespace moa::cli {

RunConfig default_run_config() {
  RunConfig c;
  c.pretrain.steps = 2000;
  c.pretrain.lr = 3e-3;
  c.pretrain.log_every = 10;
  c.train.steps = 1000;
  c.train.lr = 1e-3;
  c.train.log_every = 10;
  return c;
}

namespace {

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

template <class T>
void take(const Json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(key) + ": " + e.what());
  }
}

}  // namespace

void apply_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.backbone.seed = seed;
  cfg.moa.seed = seed;
  cfg.pretrain.seed = seed;
  cfg.train.seed = seed;
}

RunConfig run_config_from_json(const Json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  reject_unknown_keys(j, {"seed", "out", "task", "base_task", "task_options", "backbone", "backbone_checkpoint",
                          "adapters_checkpoint", "moa", "pretrain", "train", "telemetry"},
                      "<root>");
  RunConfig c = default_run_config();
  std::string s;
  if (j.contains("out")) {
    take(j, "out", s);
    c.out = s;
  }
  take(j, "task", c.task);
  take(j, "base_task", c.base_task);
  if (j.contains("task_options")) c.task_options = task_options_from_json(j.at("task_options"));
  if (j.contains("backbone")) c.backbone = model_config_from_json(j.at("backbone"));
  if (j.contains("backbone_checkpoint")) {
    take(j, "backbone_checkpoint", s);
    c.backbone_checkpoint = resolve(s, base_dir);
  }
  if (j.contains("adapters_checkpoint")) {
    take(j, "adapters_checkpoint", s);
    c.adapters_checkpoint = resolve(s, base_dir);
  }
  if (j.contains("moa")) c.moa = moa_config_from_json(j.at("moa"));
  // Train blocks override the run defaults key by key.
  auto merge_train = [&](const char* key, TrainConfig& dst) {
    if (!j.contains(key)) return;
    Json merged = moa::to_json(dst);
    if (!j.at(key).is_object()) throw ConfigError(std::string("config block '") + key + "' must be an object");
    for (const auto& [k, v] : j.at(key).items()) {
      if (!merged.contains(k)) throw ConfigError("unknown key '" + k + "' in config block '" + key + "'");
      merged[k] = v;
    }
    dst = train_config_from_json(merged);
  };
  merge_train("pretrain", c.pretrain);
  merge_train("train", c.train);
  if (j.contains("telemetry")) {
    const Json& t = j.at("telemetry");
    if (!t.is_object()) throw ConfigError("config block 'telemetry' must be an object");
    reject_unknown_keys(t, {"enabled", "samples", "run_id"}, "telemetry");
    take(t, "enabled", c.telemetry.enabled);
    take(t, "samples", c.telemetry.samples);
    take(t, "run_id", c.telemetry.run_id);
  }
  if (j.contains("seed")) {
    std::uint64_t seed = 0;
    take(j, "seed", seed);
    apply_seed(c, seed);
  }
  return c;
}

Json to_json(const RunConfig& c) {
  Json j;
  j["seed"] = c.seed;
  j["out"] = c.out.string();
  j["task"] = c.task;
  j["base_task"] = c.base_task;
  j["task_options"] = moa::to_json(c.task_options);
  j["backbone"] = moa::to_json(c.backbone);
  if (!c.backbone_checkpoint.empty()) j["backbone_checkpoint"] = std::filesystem::absolute(c.backbone_checkpoint).string();
  if (!c.adapters_checkpoint.empty()) j["adapters_checkpoint"] = std::filesystem::absolute(c.adapters_checkpoint).string();
  j["moa"] = moa::to_json(c.moa);
  j["pretrain"] = moa::to_json(c.pretrain);
  j["train"] = moa::to_json(c.train);
  j["telemetry"] = Json{{"enabled", c.telemetry.enabled},
                        {"samples", c.telemetry.samples},
                        {"run_id", c.telemetry.run_id}};
  return j;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    throw ConfigError("config file not found: " + path.string());
  }
  return run_config_from_json(read_json_file(path), path.parent_path());
}

namespace {

struct Flags {
  std::string config;
  std::string mode;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t samples = 0;
  std::size_t batch_size = 0;
  bool verify_grads = false;
  std::string adapters;
  std::string task;
};

RunConfig prepare(const Flags& f) {
  RunConfig c = f.config.empty() ? default_run_config() : load_run_config(f.config);
  if (!f.mode.empty()) {
    const auto experts = c.moa.experts;
    apply_mode_name(c.moa, f.mode);
    c.moa.experts = experts;
    validate(c.moa);
  }
  if (f.seed) apply_seed(c, *f.seed);
  if (!f.out.empty()) c.out = f.out;
  if (f.verify_grads) c.train.verify_grads = true;
  if (!f.adapters.empty()) c.adapters_checkpoint = f.adapters;
  if (!f.task.empty()) c.task = f.task;
  return c;
}

void prepare_run_dir(const RunConfig& c) {
  std::error_code ec;
  std::filesystem::create_directories(c.out, ec);
  if (ec) throw IoError("cannot create run directory " + c.out.string() + ": " + ec.message());
  write_json_file(to_json(c), c.out / "config.json");
}

std::ofstream open_metrics(const RunConfig& c) {
  std::ofstream m(c.out / "metrics.ndjson");
  if (!m) throw IoError("cannot write " + (c.out / "metrics.ndjson").string());
  return m;
}

std::shared_ptr<Backbone> require_backbone(const RunConfig& c) {
  if (c.backbone_checkpoint.empty()) {
    throw ConfigError("backbone_checkpoint is required (run `moa pretrain` first)");
  }
  if (!std::filesystem::exists(c.backbone_checkpoint)) {
    throw IoError("backbone checkpoint not found: " + c.backbone_checkpoint.string());
  }
  auto bb = load_backbone(c.backbone_checkpoint);
  bb->freeze();
  return bb;
}

std::unique_ptr<MoaModel> adapters_or_fresh(const RunConfig& c, std::shared_ptr<const Backbone> bb) {
  if (!c.adapters_checkpoint.empty()) return load_adapters(std::move(bb), c.adapters_checkpoint);
  return std::make_unique<MoaModel>(std::move(bb), c.moa);
}

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

void export_telemetry(const RunConfig& c, const MoaModel& model, const TaskSpec& task,
                      std::size_t samples, std::ostream& out) {
  const std::size_t n = std::min(samples, task.eval.size());
  std::vector<TelemetryRecord> records;
  for (std::size_t start = 0; start < n; start += 64) {
    const std::size_t end = std::min(n, start + 64);
    std::vector<std::vector<int>> seqs;
    for (std::size_t i = start; i < end; ++i) {
      auto s = task.eval[i].prompt;
      s.insert(s.end(), task.eval[i].answer.begin(), task.eval[i].answer.end());
      seqs.push_back(std::move(s));
    }
    auto cap = capture(model, make_batch(seqs, vocab::pad), start);
    records.insert(records.end(), cap.records.begin(), cap.records.end());
  }
  const AggregateStats stats = aggregate(records, n);
  const auto dir = c.out / "telemetry";
  const std::string mode = mode_name(model.config());
  const auto csv = dir / stats_filename(c.telemetry.run_id, mode);
  write_stats_csv(stats, csv);
  write_stats_json(stats, dir / (c.telemetry.run_id + "_" + mode + "_stats.json"));
  write_heatmap_csv(stats, dir / (c.telemetry.run_id + "_" + mode + "_heatmap.csv"));
  write_records_csv(records, dir / (c.telemetry.run_id + "_" + mode + "_records.csv"));
  out << "telemetry: " << n << " samples, " << stats.n_layers() << "x" << stats.n_experts()
      << " matrix, mean activated experts " << stats.global_active << "\n  " << csv.string() << '\n';
}

int cmd_pretrain(const Flags& f, std::ostream& out) {
  RunConfig c = prepare(f);
  const TaskSpec task = make_task(c.base_task, c.seed, c.task_options);
  prepare_run_dir(c);
  Backbone model(c.backbone);
  auto metrics = open_metrics(c);
  MetricsLog log(&metrics);
  PretrainResult r = pretrain_then_freeze(model, task, c.pretrain, &log);
  metrics.flush();
  if (!metrics) throw IoError("write failed: metrics.ndjson");
  save_backbone(model, c.out / "backbone.json");
  const EvalResult e = evaluate(model, task);
  write_json_file(Json{{"task", task.name}, {"accuracy", e.accuracy}, {"token_accuracy", e.token_accuracy},
                       {"examples", e.examples}, {"final_loss", r.final_loss}},
                  c.out / "eval.json");
  out << "pretrained on " << task.name << " for " << c.pretrain.steps << " steps: final loss "
      << r.final_loss << ", eval accuracy " << pct(e.accuracy) << "%, token accuracy "
      << pct(e.token_accuracy) << "%\n"
      << "backbone: " << (c.out / "backbone.json").string() << " (sha256 " << model.parameter_digest() << ")\n";
  return kOk;
}

int cmd_adapt(const Flags& f, std::ostream& out) {
  RunConfig c = prepare(f);
  validate(c.moa);
  const TaskSpec task = make_task(c.task, c.seed, c.task_options);
  auto bb = require_backbone(c);
  MoaModel model(bb, c.moa);
  prepare_run_dir(c);
  auto metrics = open_metrics(c);
  MetricsLog log(&metrics);
  const EvalResult before = evaluate(*bb, task);
  TrainResult r = train_adapters(model, task, c.train, &log);
  metrics.flush();
  if (!metrics) throw IoError("write failed: metrics.ndjson");
  save_adapters(model, c.out / "adapters.json");
  const EvalResult after = r.eval ? *r.eval : evaluate(model, task);
  const std::string mode = mode_name(model.config());
  write_json_file(Json{{"task", task.name},
                       {"mode", mode},
                       {"frozen_accuracy", before.accuracy},
                       {"accuracy", after.accuracy},
                       {"token_accuracy", after.token_accuracy},
                       {"examples", after.examples},
                       {"final_loss", r.final_loss},
                       {"trainable_parameters", model.param_report().total}},
                  c.out / "eval.json");
  out << mode << " on " << task.name << " (" << model.n_experts() << " experts, "
      << model.param_report().total << " trainable parameters)\n"
      << "  frozen backbone accuracy " << pct(before.accuracy) << "%\n"
      << "  adapted accuracy         " << pct(after.accuracy) << "%\n";
  for (const auto& rec : log.records()) {
    if (rec.grad_check) {
      out << "  gradient check: " << rec.grad_check->checked << " entries, max rel err "
          << rec.grad_check->max_rel_error << " at " << rec.grad_check->worst << '\n';
    }
  }
  if (c.telemetry.enabled) export_telemetry(c, model, task, c.telemetry.samples, out);
  return kOk;
}

int cmd_eval(const Flags& f, std::ostream& out) {
  RunConfig c = prepare(f);
  const TaskSpec task = make_task(c.task, c.seed, c.task_options);
  auto bb = require_backbone(c);
  out << std::left << std::setw(28) << "model" << std::setw(12) << "accuracy" << "token_accuracy\n";
  auto row = [&](const std::string& name, const EvalResult& e) {
    out << std::left << std::setw(28) << name << std::setw(12) << pct(e.accuracy) << pct(e.token_accuracy) << '\n';
  };
  row("frozen backbone", evaluate(*bb, task));
  if (!c.adapters_checkpoint.empty()) {
    auto m = load_adapters(bb, c.adapters_checkpoint);
    row(mode_name(m->config()), evaluate(*m, task));
  }
  return kOk;
}

int cmd_inspect(const Flags& f, std::ostream& out) {
  RunConfig c = prepare(f);
  const TaskSpec task = make_task(c.task, c.seed, c.task_options);
  auto bb = require_backbone(c);
  auto model = adapters_or_fresh(c, bb);
  std::error_code ec;
  std::filesystem::create_directories(c.out, ec);
  export_telemetry(c, *model, task, f.samples ? f.samples : c.telemetry.samples, out);
  return kOk;
}

int cmd_bench(const Flags& f, std::ostream& out) {
  RunConfig c = prepare(f);
  const TaskSpec task = make_task(c.task, c.seed, c.task_options);
  std::shared_ptr<Backbone> bb =
      c.backbone_checkpoint.empty() ? std::make_shared<Backbone>(c.backbone) : require_backbone(c);
  bb->freeze();
  const std::size_t bs = f.batch_size ? f.batch_size : c.train.batch_size;
  std::vector<std::vector<int>> seqs;
  for (std::size_t i = 0; i < bs; ++i) {
    const auto& e = task.eval[i % task.eval.size()];
    auto s = e.prompt;
    s.insert(s.end(), e.answer.begin(), e.answer.end());
    seqs.push_back(std::move(s));
  }
  const TokenBatch batch = make_batch(seqs, vocab::pad);
  MoaConfig soft_cfg = c.moa, sparse_cfg = c.moa;
  std::unique_ptr<MoaModel> sparse_model;
  if (!c.adapters_checkpoint.empty()) {
    sparse_model = load_adapters(bb, c.adapters_checkpoint);
    sparse_cfg = sparse_model->config();
  }
  if (!is_sparse(sparse_cfg.mode)) {
    sparse_cfg.mode = MoaMode::sparse_learned;
    sparse_cfg.experts.clear();
  }
  soft_cfg = sparse_cfg;
  soft_cfg.mode = MoaMode::soft;
  soft_cfg.experts = resolve_experts(sparse_cfg);
  if (!sparse_model) sparse_model = std::make_unique<MoaModel>(bb, sparse_cfg);
  MoaModel soft_model(bb, soft_cfg);
  const int reps = 5;
  out << "batch " << bs << " x " << batch.seq << " tokens, " << reps << " forward passes each\n";
  out << std::left << std::setw(16) << "mode" << std::setw(14) << "invocations" << std::setw(14) << "capacity"
      << std::setw(10) << "ratio" << std::setw(16) << "expert_flops" << "ms/forward\n";
  for (const MoaModel* m : {static_cast<const MoaModel*>(&soft_model), static_cast<const MoaModel*>(sparse_model.get())}) {
    ad::NoGradGuard no_grad;
    InvocationCounter counter;
    ForwardOptions opts;
    opts.counter = &counter;
    m->forward(batch, opts);
    const InvocationReport rep = count_expert_invocations(counter, *m);
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) m->forward(batch);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() / reps;
    out << std::left << std::setw(16) << mode_name(m->config()) << std::setw(14) << rep.total << std::setw(14)
        << rep.capacity << std::setw(10) << std::setprecision(4) << rep.ratio() << std::setw(16)
        << std::setprecision(6) << rep.flops << std::setprecision(4) << ms << '\n';
  }
  return kOk;
}

int cmd_count_params(const Flags& f, std::ostream& out) {
  RunConfig c = prepare(f);
  auto bb = std::make_shared<Backbone>(c.backbone);
  bb->freeze();
  MoaModel model(bb, c.moa);
  const ParamReport rep = model.param_report();
  out << "mode " << mode_name(c.moa) << ", " << model.n_layers() << " layers, " << model.n_experts()
      << " experts per layer\n";
  out << std::left << std::setw(8) << "layer" << std::setw(20) << "module" << "params\n";
  for (const auto& e : rep.entries) {
    out << std::left << std::setw(8) << e.layer << std::setw(20) << e.module << e.count << '\n';
  }
  out << "total " << rep.total << '\n';
  return kOk;
}

int cmd_export_task(const Flags& f, std::ostream& out) {
  RunConfig c = prepare(f);
  const TaskSpec task = make_task(c.task, c.seed, c.task_options);
  export_task(task, c.out);
  out << "wrote " << task.train.size() << " train and " << task.eval.size() << " eval examples to "
      << c.out.string() << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mixture-of-adapters toolkit"};
  app.require_subcommand(1);
  Flags f;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "Run config (JSON)");
    sub->add_option("--seed", seed, "Override every seed in the config");
    sub->add_option("--out", f.out, "Run directory");
  };
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain a backbone on the base task and freeze it");
  add_common(pretrain);
  auto* adapt = app.add_subcommand("adapt", "Train adapters on a frozen backbone");
  add_common(adapt);
  adapt->add_option("--mode", f.mode, "soft | sparse | sparse_fixed | softmax_soft | naive_composition | "
                                      "lora_only_routed | single_lora | single_parallel_adapter | single_prompt");
  adapt->add_flag("--verify-grads", f.verify_grads, "Finite-difference gradient check on the first step");
  auto* eval = app.add_subcommand("eval", "Evaluate the frozen backbone and optional adapters");
  add_common(eval);
  eval->add_option("--adapters", f.adapters, "Adapters checkpoint");
  eval->add_option("--task", f.task, "Task name");
  auto* inspect = app.add_subcommand("inspect", "Capture and export routing telemetry");
  add_common(inspect);
  inspect->add_option("--adapters", f.adapters, "Adapters checkpoint");
  inspect->add_option("--samples", f.samples, "Eval samples to capture (default 50)");
  inspect->add_option("--mode", f.mode, "Mode for a freshly initialized model");
  auto* bench = app.add_subcommand("bench", "Expert invocations, FLOPs and time for soft vs sparse");
  add_common(bench);
  bench->add_option("--adapters", f.adapters, "Sparse adapters checkpoint");
  bench->add_option("--batch-size", f.batch_size, "Sequences per forward pass");
  auto* count = app.add_subcommand("count-params", "Per-module trainable parameter counts");
  add_common(count);
  count->add_option("--mode", f.mode, "Mode name");
  auto* export_cmd = app.add_subcommand("export-task", "Write a task corpus as TSV");
  add_common(export_cmd);
  export_cmd->add_option("--task", f.task, "Task name");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfigError;
  }
  for (auto* sub : app.get_subcommands()) {
    if (sub->count("--seed")) f.seed = seed;
  }
  try {
    if (pretrain->parsed()) return cmd_pretrain(f, out);
    if (adapt->parsed()) return cmd_adapt(f, out);
    if (eval->parsed()) return cmd_eval(f, out);
    if (inspect->parsed()) return cmd_inspect(f, out);
    if (bench->parsed()) return cmd_bench(f, out);
    if (count->parsed()) return cmd_count_params(f, out);
    if (export_cmd->parsed()) return cmd_export_task(f, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumericalError;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}

}  // namespace moa::cli
