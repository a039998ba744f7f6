// SPDX-License-Identifier: Apache-2.0
#include "moa/checkpoint.hpp"

#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include "moa/errors.hpp"

namespace moa {

namespace {

constexpr const char* kFormat = "moa-checkpoint";
constexpr int kVersion = 1;

template <class T>
void read_key(const Json& j, const char* key, T& out, const std::string& block) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(block + "." + key + ": " + e.what());
  }
}

void require_object(const Json& j, const std::string& block) {
  if (!j.is_object()) throw ConfigError("config block '" + block + "' must be an object");
}

Json tensor_entry(const std::string& name, const ad::Tensor& t) {
  Json e;
  e["name"] = name;
  e["shape"] = t.shape();
  e["values"] = std::vector<double>(t.data().begin(), t.data().end());
  return e;
}

// Copies checkpoint values into the aliased parameter handles.
void restore(const NamedTensors& params, const Json& entries, const std::string& what) {
  std::map<std::string, const Json*> by_name;
  for (const auto& e : entries) by_name[e.at("name").get<std::string>()] = &e;
  if (by_name.size() != params.size()) {
    throw ConfigError(what + " checkpoint holds " + std::to_string(by_name.size()) +
                      " tensors, model expects " + std::to_string(params.size()));
  }
  for (const auto& [name, t] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigError(what + " checkpoint lacks tensor '" + name + "'");
    const auto shape = it->second->at("shape").get<ad::Shape>();
    if (shape != t.shape()) {
      throw ConfigError("tensor '" + name + "' has shape " + ad::shape_str(shape) + " in checkpoint, " +
                        ad::shape_str(t.shape()) + " in model");
    }
    const auto values = it->second->at("values").get<std::vector<double>>();
    auto dst = ad::Tensor(t).mutable_data();
    if (values.size() != dst.size()) throw ConfigError("tensor '" + name + "' value count mismatch");
    std::copy(values.begin(), values.end(), dst.begin());
  }
}

void check_header(const Json& j, const std::string& kind) {
  if (!j.is_object() || j.value("format", "") != kFormat) throw ConfigError("not a checkpoint file");
  if (j.value("version", 0) != kVersion) {
    throw ConfigError("unsupported checkpoint version " + j.value("version", Json()).dump());
  }
  if (j.value("kind", "") != kind) {
    throw ConfigError("expected a " + kind + " checkpoint, got '" + j.value("kind", "") + "'");
  }
}

}  // namespace

void reject_unknown_keys(const Json& j, std::initializer_list<const char*> allowed,
                         const std::string& block) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in config block '" + block + "'");
  }
}

Json to_json(const ModelConfig& c) {
  return Json{{"d_model", c.d_model},       {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},             {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
              {"activation", c.activation}, {"norm", c.norm},             {"seed", c.seed}};
}

ModelConfig model_config_from_json(const Json& j) {
  const std::string b = "backbone";
  require_object(j, b);
  reject_unknown_keys(j, {"d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_seq_len",
                          "activation", "norm", "seed"},
                      b);
  ModelConfig c;
  read_key(j, "d_model", c.d_model, b);
  read_key(j, "n_layers", c.n_layers, b);
  read_key(j, "n_heads", c.n_heads, b);
  read_key(j, "d_ff", c.d_ff, b);
  read_key(j, "vocab_size", c.vocab_size, b);
  read_key(j, "max_seq_len", c.max_seq_len, b);
  read_key(j, "activation", c.activation, b);
  read_key(j, "norm", c.norm, b);
  read_key(j, "seed", c.seed, b);
  c.validate();
  return c;
}

Json to_json(const MoaConfig& c) {
  return Json{{"mode", mode_name(c)},
              {"experts", c.experts},
              {"rank", c.rank},
              {"alpha", c.alpha},
              {"bottleneck", c.bottleneck},
              {"prompt_len", c.prompt_len},
              {"gamma_max", c.gamma_max},
              {"gamma", c.gamma},
              {"threshold_grad", c.threshold_grad},
              {"router_activation", c.router_activation},
              {"router_input", c.router_input},
              {"routing_level", c.routing_level},
              {"adapter_activation", c.adapter_activation},
              {"seed", c.seed}};
}

MoaConfig moa_config_from_json(const Json& j) {
  const std::string b = "moa";
  require_object(j, b);
  reject_unknown_keys(j, {"mode", "experts", "rank", "alpha", "bottleneck", "prompt_len", "gamma_max",
                          "gamma", "threshold_grad", "router_activation", "router_input",
                          "routing_level", "adapter_activation", "seed"},
                      b);
  MoaConfig c;
  std::string mode = "soft";
  read_key(j, "mode", mode, b);
  apply_mode_name(c, mode);
  read_key(j, "experts", c.experts, b);
  read_key(j, "rank", c.rank, b);
  read_key(j, "alpha", c.alpha, b);
  read_key(j, "bottleneck", c.bottleneck, b);
  read_key(j, "prompt_len", c.prompt_len, b);
  read_key(j, "gamma_max", c.gamma_max, b);
  read_key(j, "gamma", c.gamma, b);
  read_key(j, "threshold_grad", c.threshold_grad, b);
  read_key(j, "router_activation", c.router_activation, b);
  read_key(j, "router_input", c.router_input, b);
  read_key(j, "routing_level", c.routing_level, b);
  read_key(j, "adapter_activation", c.adapter_activation, b);
  read_key(j, "seed", c.seed, b);
  validate(c);
  return c;
}

Json to_json(const TrainConfig& c) {
  return Json{{"lr", c.lr},
              {"batch_size", c.batch_size},
              {"steps", c.steps},
              {"max_seq_len", c.max_seq_len},
              {"seed", c.seed},
              {"grad_clip", c.grad_clip},
              {"weight_decay", c.weight_decay},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"schedule", c.schedule},
              {"eval_every", c.eval_every},
              {"log_every", c.log_every},
              {"verify_grads", c.verify_grads},
              {"verify_fraction", c.verify_fraction}};
}

TrainConfig train_config_from_json(const Json& j) {
  const std::string b = "train";
  require_object(j, b);
  reject_unknown_keys(j, {"lr", "batch_size", "steps", "max_seq_len", "seed", "grad_clip", "weight_decay",
                          "beta1", "beta2", "eps", "schedule", "eval_every", "log_every", "verify_grads",
                          "verify_fraction"},
                      b);
  TrainConfig c;
  read_key(j, "lr", c.lr, b);
  read_key(j, "batch_size", c.batch_size, b);
  read_key(j, "steps", c.steps, b);
  read_key(j, "max_seq_len", c.max_seq_len, b);
  read_key(j, "seed", c.seed, b);
  read_key(j, "grad_clip", c.grad_clip, b);
  read_key(j, "weight_decay", c.weight_decay, b);
  read_key(j, "beta1", c.beta1, b);
  read_key(j, "beta2", c.beta2, b);
  read_key(j, "eps", c.eps, b);
  read_key(j, "schedule", c.schedule, b);
  read_key(j, "eval_every", c.eval_every, b);
  read_key(j, "log_every", c.log_every, b);
  read_key(j, "verify_grads", c.verify_grads, b);
  read_key(j, "verify_fraction", c.verify_fraction, b);
  c.validate();
  return c;
}

Json to_json(const TaskOptions& o) {
  return Json{{"train_size", o.train_size}, {"eval_size", o.eval_size},     {"min_len", o.min_len},
              {"max_len", o.max_len},       {"modulus", o.modulus},         {"max_context", o.max_context}};
}

TaskOptions task_options_from_json(const Json& j) {
  const std::string b = "task_options";
  require_object(j, b);
  reject_unknown_keys(j, {"train_size", "eval_size", "min_len", "max_len", "modulus", "max_context"}, b);
  TaskOptions o;
  read_key(j, "train_size", o.train_size, b);
  read_key(j, "eval_size", o.eval_size, b);
  read_key(j, "min_len", o.min_len, b);
  read_key(j, "max_len", o.max_len, b);
  read_key(j, "modulus", o.modulus, b);
  read_key(j, "max_context", o.max_context, b);
  return o;
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const Json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(1) << '\n';
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

std::string parameters_sha256(const NamedTensors& params) {
  std::vector<unsigned char> bytes;
  for (const auto& [name, t] : params) {
    bytes.insert(bytes.end(), name.begin(), name.end());
    const auto* p = reinterpret_cast<const unsigned char*>(t.data().data());
    bytes.insert(bytes.end(), p, p + t.numel() * sizeof(double));
  }
  return sha256_hex(bytes);
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

Json backbone_checkpoint(const Backbone& model) {
  Json j;
  j["format"] = kFormat;
  j["version"] = kVersion;
  j["kind"] = "backbone";
  j["config"] = to_json(model.config());
  j["frozen"] = model.frozen();
  Json params = Json::array();
  for (const auto& [name, t] : model.named_parameters()) params.push_back(tensor_entry(name, t));
  j["parameters"] = std::move(params);
  j["sha256"] = model.parameter_digest();
  return j;
}

void save_backbone(const Backbone& model, const std::filesystem::path& path) {
  write_json_file(backbone_checkpoint(model), path);
}

std::shared_ptr<Backbone> backbone_from_checkpoint(const Json& j) {
  check_header(j, "backbone");
  auto model = std::make_shared<Backbone>(model_config_from_json(j.at("config")));
  restore(model->named_parameters(), j.at("parameters"), "backbone");
  if (model->parameter_digest() != j.at("sha256").get<std::string>()) {
    throw ConfigError("backbone checkpoint digest mismatch");
  }
  if (j.value("frozen", true)) {
    model->freeze();
  } else {
    model->unfreeze();
  }
  return model;
}

std::shared_ptr<Backbone> load_backbone(const std::filesystem::path& path) {
  return backbone_from_checkpoint(read_json_file(path));
}

Json adapters_checkpoint(const MoaModel& model) {
  Json j;
  j["format"] = kFormat;
  j["version"] = kVersion;
  j["kind"] = "adapters";
  j["config"] = Json{{"backbone", to_json(model.backbone().config())}, {"moa", to_json(model.config())}};
  j["backbone_sha256"] = model.backbone().parameter_digest();
  j["expert_order"] = model.expert_names();
  Json params = Json::array();
  const auto named = model.trainable_parameters();
  for (const auto& [name, t] : named) {
    Json e = tensor_entry(name, t);
    // "layers.<l>.<module>.<tensor>"
    const auto p1 = name.find('.'), p2 = name.find('.', p1 + 1), p3 = name.find('.', p2 + 1);
    const std::size_t layer = std::stoul(name.substr(p1 + 1, p2 - p1 - 1));
    const std::string module = name.substr(p2 + 1, p3 - p2 - 1);
    e["layer"] = layer;
    for (const auto& ex : model.layer(layer).experts) {
      if (ex.name() == module) {
        e["expert_type"] = expert_type_tag(ex.type());
        e["site"] = site_name(ex.site());
      }
    }
    params.push_back(std::move(e));
  }
  j["parameters"] = std::move(params);
  j["sha256"] = parameters_sha256(named);
  return j;
}

void save_adapters(const MoaModel& model, const std::filesystem::path& path) {
  write_json_file(adapters_checkpoint(model), path);
}

std::unique_ptr<MoaModel> adapters_from_checkpoint(std::shared_ptr<const Backbone> backbone,
                                                   const Json& j) {
  check_header(j, "adapters");
  const ModelConfig bc = model_config_from_json(j.at("config").at("backbone"));
  if (!(bc == backbone->config())) throw ConfigError("adapters were trained on a different backbone config");
  if (j.at("backbone_sha256").get<std::string>() != backbone->parameter_digest()) {
    throw ConfigError("adapters were trained on a different backbone (digest mismatch)");
  }
  auto model = std::make_unique<MoaModel>(std::move(backbone), moa_config_from_json(j.at("config").at("moa")));
  if (j.at("expert_order").get<std::vector<std::string>>() != model->expert_names()) {
    throw ConfigError("adapter checkpoint expert order differs from the configured experts");
  }
  const auto named = model->trainable_parameters();
  restore(named, j.at("parameters"), "adapters");
  if (parameters_sha256(named) != j.at("sha256").get<std::string>()) {
    throw ConfigError("adapters checkpoint digest mismatch");
  }
  return model;
}

std::unique_ptr<MoaModel> load_adapters(std::shared_ptr<const Backbone> backbone,
                                        const std::filesystem::path& path) {
  return adapters_from_checkpoint(std::move(backbone), read_json_file(path));
}

}  // namespace moa
