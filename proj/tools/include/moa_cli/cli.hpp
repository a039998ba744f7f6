// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver. Run configs are single JSON files:
//
//   {
//     "seed": 0,                       // overrides every block's seed
//     "out": "runs/example",           // run directory
//     "task": "mod_add",               // adaptation / evaluation task
//     "base_task": "copy",             // pretraining task
//     "task_options": {...},
//     "backbone": {...},               // model shape (pretrain)
//     "backbone_checkpoint": "path",   // frozen backbone (adapt, eval, inspect, bench)
//     "adapters_checkpoint": "path",   // trained adapters (eval, inspect, bench)
//     "moa": {...},
//     "pretrain": {...},               // train block used by `pretrain`
//     "train": {...},                  // train block used by `adapt`
//     "telemetry": {"enabled": true, "samples": 50, "run_id": "run"}
//   }
//
// Every key is optional; unknown keys are rejected. Relative checkpoint
// paths resolve against the config file's directory.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "moa/checkpoint.hpp"

namespace moa::cli {

struct TelemetryOptions {
  bool enabled = true;
  std::size_t samples = 50;
  std::string run_id = "run";
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";
  std::string task = "mod_add";
  std::string base_task = "copy";
  TaskOptions task_options;
  ModelConfig backbone;
  std::filesystem::path backbone_checkpoint;
  std::filesystem::path adapters_checkpoint;
  MoaConfig moa;
  TrainConfig pretrain;
  TrainConfig train;
  TelemetryOptions telemetry;
};

RunConfig default_run_config();
// base_dir resolves relative checkpoint paths.
RunConfig run_config_from_json(const Json& j, const std::filesystem::path& base_dir = {});
Json to_json(const RunConfig& cfg);
// Missing file -> ConfigError naming the path.
RunConfig load_run_config(const std::filesystem::path& path);
void apply_seed(RunConfig& cfg, std::uint64_t seed);

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kFailure = 1;
inline constexpr int kConfigError = 2;
inline constexpr int kNumericalError = 3;
inline constexpr int kIoError = 4;

// argv-style entry point (args exclude the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace moa::cli
