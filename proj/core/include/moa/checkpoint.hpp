// SPDX-License-Identifier: Apache-2.0
//
// JSON config blocks and checkpoint files.
//
// Checkpoint layout (both kinds):
//   {
//     "format": "moa-checkpoint", "version": 1,
//     "kind": "backbone" | "adapters",
//     "config": {...},              // model config, or {"backbone": ..., "moa": ...}
//     "parameters": [{"name": str, "shape": [..], "values": [..]}, ...],
//     "sha256": hex digest of the parameter bytes
//   }
// Adapter checkpoints add "backbone_sha256" (digest of the backbone they were
// trained on), "expert_order" and, per parameter, "layer", "expert_type" and
// "site" for expert tensors. Doubles are written in shortest round-trip form,
// so save/load is bit-exact.
#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "moa/backbone.hpp"
#include "moa/moa_model.hpp"
#include "moa/tasks.hpp"
#include "moa/training.hpp"

namespace moa {

using Json = nlohmann::ordered_json;

// Config blocks. Parsing fills defaults for missing keys, rejects unknown
// keys and validates (ConfigError).
Json to_json(const ModelConfig& cfg);
Json to_json(const MoaConfig& cfg);
Json to_json(const TrainConfig& cfg);
Json to_json(const TaskOptions& opts);
ModelConfig model_config_from_json(const Json& j);
MoaConfig moa_config_from_json(const Json& j);
TrainConfig train_config_from_json(const Json& j);
TaskOptions task_options_from_json(const Json& j);

// Throws ConfigError naming the first key of j not in `allowed`.
void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed,
                         const std::string& block);

Json read_json_file(const std::filesystem::path& path);
void write_json_file(const Json& j, const std::filesystem::path& path);

Json backbone_checkpoint(const Backbone& model);
void save_backbone(const Backbone& model, const std::filesystem::path& path);
std::shared_ptr<Backbone> backbone_from_checkpoint(const Json& j);
std::shared_ptr<Backbone> load_backbone(const std::filesystem::path& path);

Json adapters_checkpoint(const MoaModel& model);
void save_adapters(const MoaModel& model, const std::filesystem::path& path);
// Rebuilds the model on `backbone`; ConfigError if the backbone digest or
// configuration differs from the one the adapters were trained on.
std::unique_ptr<MoaModel> adapters_from_checkpoint(std::shared_ptr<const Backbone> backbone,
                                                   const Json& j);
std::unique_ptr<MoaModel> load_adapters(std::shared_ptr<const Backbone> backbone,
                                        const std::filesystem::path& path);

std::string file_sha256(const std::filesystem::path& path);
std::string parameters_sha256(const NamedTensors& params);

}  // namespace moa
