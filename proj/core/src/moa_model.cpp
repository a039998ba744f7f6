// SPDX-License-Identifier: Apache-2.0
#include "moa/moa_model.hpp"

#include <algorithm>
#include <random>
#include <set>

#include "moa/errors.hpp"

namespace moa {

const std::vector<std::string>& canonical_expert_names() {
  static const std::vector<std::string> names = {"lora_q", "lora_k", "lora_v", "lora_o",
                                                 "lora_up", "parallel_adapter", "prompt"};
  return names;
}

void apply_mode_name(MoaConfig& cfg, const std::string& name) {
  static const std::vector<std::pair<std::string, MoaMode>> table = {
      {"soft", MoaMode::soft},
      {"sparse", MoaMode::sparse_learned},
      {"sparse_learned", MoaMode::sparse_learned},
      {"sparse_fixed", MoaMode::sparse_fixed},
      {"softmax_soft", MoaMode::softmax_soft},
      {"naive_composition", MoaMode::naive_composition},
      {"lora_only_routed", MoaMode::lora_only_routed},
  };
  for (const auto& [n, m] : table) {
    if (n == name) {
      cfg.mode = m;
      return;
    }
  }
  for (const char* t : {"lora", "parallel_adapter", "prompt"}) {
    if (name == std::string("single_") + t) {
      cfg.mode = MoaMode::single;
      cfg.single_type = t;
      return;
    }
  }
  throw ConfigError("unknown mode '" + name +
                    "' (expected soft|sparse|sparse_learned|sparse_fixed|softmax_soft|"
                    "naive_composition|lora_only_routed|single_lora|single_parallel_adapter|"
                    "single_prompt)");
}

std::string mode_name(const MoaConfig& cfg) {
  switch (cfg.mode) {
    case MoaMode::soft: return "soft";
    case MoaMode::sparse_fixed: return "sparse_fixed";
    case MoaMode::sparse_learned: return "sparse_learned";
    case MoaMode::softmax_soft: return "softmax_soft";
    case MoaMode::naive_composition: return "naive_composition";
    case MoaMode::single: return "single_" + cfg.single_type;
    case MoaMode::lora_only_routed: return "lora_only_routed";
  }
  return "?";
}

bool is_sparse(MoaMode mode) {
  return mode == MoaMode::sparse_fixed || mode == MoaMode::sparse_learned;
}

bool is_routed(MoaMode mode) {
  return mode != MoaMode::naive_composition && mode != MoaMode::single;
}

ad::StraightThrough threshold_grad_rule(const std::string& name) {
  if (name == "straight_through") return ad::StraightThrough::identity;
  if (name == "none") return ad::StraightThrough::none;
  throw ConfigError("unknown threshold_grad rule '" + name + "' (expected straight_through|none)");
}

namespace {

std::string type_of(const std::string& expert) {
  if (expert.rfind("lora_", 0) == 0) return "lora";
  return expert;
}

}  // namespace

std::vector<std::string> resolve_experts(const MoaConfig& cfg) {
  const auto& all = canonical_expert_names();
  std::vector<std::string> out;
  if (cfg.experts.empty()) {
    for (const auto& n : all) {
      const std::string t = type_of(n);
      switch (cfg.mode) {
        case MoaMode::soft:
        case MoaMode::softmax_soft:
        case MoaMode::naive_composition: out.push_back(n); break;
        case MoaMode::sparse_fixed:
        case MoaMode::sparse_learned:
          if (t != "prompt") out.push_back(n);
          break;
        case MoaMode::lora_only_routed:
          if (t == "lora") out.push_back(n);
          break;
        case MoaMode::single:
          if (t == cfg.single_type) out.push_back(n);
          break;
      }
    }
    return out;
  }
  std::set<std::string> seen;
  for (const auto& n : cfg.experts) {
    if (std::find(all.begin(), all.end(), n) == all.end()) {
      throw ConfigError("unknown expert '" + n +
                        "' (expected lora_q|lora_k|lora_v|lora_o|lora_up|parallel_adapter|prompt)");
    }
    if (!seen.insert(n).second) throw ConfigError("expert '" + n + "' listed twice");
  }
  // Keep canonical order regardless of listing order.
  for (const auto& n : all)
    if (seen.count(n)) out.push_back(n);
  for (const auto& n : out) {
    const std::string t = type_of(n);
    if (is_sparse(cfg.mode) && t == "prompt") {
      throw ConfigError(
          "prompt-tuning expert cannot be used in sparse mode: its prompts are shared by every "
          "token of a sequence, so it cannot be activated per token");
    }
    if (cfg.mode == MoaMode::single && t != cfg.single_type) {
      throw ConfigError("mode single_" + cfg.single_type + " cannot include expert '" + n + "'");
    }
    if (cfg.mode == MoaMode::lora_only_routed && t != "lora") {
      throw ConfigError("mode lora_only_routed cannot include expert '" + n + "'");
    }
  }
  return out;
}

void validate(const MoaConfig& cfg) {
  if (cfg.single_type != "lora" && cfg.single_type != "parallel_adapter" &&
      cfg.single_type != "prompt") {
    throw ConfigError("single_type must be lora|parallel_adapter|prompt, got " + cfg.single_type);
  }
  if (resolve_experts(cfg).empty()) throw ConfigError("configuration selects no experts");
  if (cfg.rank == 0) throw ConfigError("rank must be >= 1");
  if (cfg.bottleneck == 0) throw ConfigError("bottleneck must be >= 1");
  threshold_grad_rule(cfg.threshold_grad);
  const auto act = router_activation_from_name(cfg.router_activation);
  if (is_sparse(cfg.mode) && act != RouterActivation::sigmoid) {
    throw ConfigError("sparse modes require a sigmoid router");
  }
  if (cfg.mode == MoaMode::soft && act == RouterActivation::softmax) {
    throw ConfigError("mode soft uses a sigmoid router; use mode softmax_soft for softmax");
  }
  if (cfg.router_input != "block_input" && cfg.router_input != "normed") {
    throw ConfigError("router_input must be block_input|normed, got " + cfg.router_input);
  }
  if (cfg.routing_level != "token" && cfg.routing_level != "instance") {
    throw ConfigError("routing_level must be token|instance, got " + cfg.routing_level);
  }
  ad::activation_from_name(cfg.adapter_activation);
  if (cfg.mode == MoaMode::sparse_fixed) make_fixed_threshold(cfg.gamma);
  if (cfg.mode == MoaMode::sparse_learned) make_learned_threshold(1, cfg.gamma_max);
}

void InvocationCounter::add(std::size_t layer, std::size_t expert, std::uint64_t n) {
  if (counts.size() <= layer) counts.resize(layer + 1);
  if (counts[layer].size() <= expert) counts[layer].resize(expert + 1, 0);
  counts[layer][expert] += n;
}

std::uint64_t InvocationCounter::at(std::size_t layer, std::size_t expert) const {
  if (layer >= counts.size() || expert >= counts[layer].size()) return 0;
  return counts[layer][expert];
}

std::uint64_t InvocationCounter::total() const {
  std::uint64_t t = 0;
  for (std::size_t l = 0; l < counts.size(); ++l) t += layer_total(l);
  return t;
}

std::uint64_t InvocationCounter::layer_total(std::size_t layer) const {
  std::uint64_t t = 0;
  if (layer < counts.size())
    for (auto c : counts[layer]) t += c;
  return t;
}

MoaModel::MoaModel(std::shared_ptr<const Backbone> backbone, MoaConfig cfg)
    : backbone_(std::move(backbone)), cfg_(std::move(cfg)) {
  if (!backbone_) throw ConfigError("MoA model needs a backbone");
  validate(cfg_);
  names_ = resolve_experts(cfg_);
  ste_ = threshold_grad_rule(cfg_.threshold_grad);
  const ModelConfig& mc = backbone_->config();
  const std::size_t d = mc.d_model;
  const auto adapter_act = ad::activation_from_name(cfg_.adapter_activation);
  const auto router_act = cfg_.mode == MoaMode::softmax_soft
                              ? RouterActivation::softmax
                              : router_activation_from_name(cfg_.router_activation);
  std::mt19937_64 rng(cfg_.seed);
  for (std::size_t l = 0; l < backbone_->n_layers(); ++l) {
    MoaLayer layer;
    for (const auto& n : names_) {
      if (n == "parallel_adapter") {
        layer.experts.emplace_back(n, make_parallel_adapter(d, cfg_.bottleneck, adapter_act, rng));
      } else if (n == "prompt") {
        layer.experts.emplace_back(n, make_prompt(d, cfg_.prompt_len, mc.n_heads, rng));
      } else {
        const Site site = site_from_name(n.substr(5));
        const std::size_t d_out = site == Site::up ? mc.d_ff : d;
        layer.experts.emplace_back(n, make_lora(site, d, d_out, cfg_.rank, cfg_.alpha, rng));
      }
    }
    if (is_routed(cfg_.mode)) layer.router = make_router(d, names_.size(), router_act);
    if (cfg_.mode == MoaMode::sparse_fixed) layer.threshold = make_fixed_threshold(cfg_.gamma);
    if (cfg_.mode == MoaMode::sparse_learned) {
      layer.threshold = make_learned_threshold(d, cfg_.gamma_max);
    }
    layers_.push_back(std::move(layer));
  }
}

std::vector<std::pair<std::string, ad::Tensor>> MoaModel::trainable_parameters() const {
  std::vector<std::pair<std::string, ad::Tensor>> out;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto prefix = "layers." + std::to_string(l) + ".";
    const auto& layer = layers_[l];
    for (const auto& e : layer.experts)
      for (const auto& [pn, t] : e.named_parameters()) out.emplace_back(prefix + e.name() + "." + pn, t);
    if (layer.router) out.emplace_back(prefix + "router.w_r", layer.router->w_r);
    if (layer.threshold && layer.threshold->mode == ThresholdMode::learned) {
      out.emplace_back(prefix + "threshold.w_gamma", layer.threshold->w_gamma);
      out.emplace_back(prefix + "threshold.b_gamma", layer.threshold->b_gamma);
    }
  }
  return out;
}

ParamReport MoaModel::param_report() const {
  ParamReport rep;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& layer = layers_[l];
    for (const auto& e : layer.experts) rep.entries.push_back({l, e.name(), e.param_count()});
    if (layer.router) rep.entries.push_back({l, "router", layer.router->w_r.numel()});
    if (layer.threshold && layer.threshold->mode == ThresholdMode::learned) {
      rep.entries.push_back({l, "threshold", layer.threshold->param_count()});
    }
  }
  for (const auto& e : rep.entries) rep.total += e.count;
  return rep;
}

namespace {

ad::Tensor expert_delta(const Expert& e, const ad::Tensor& input) {
  if (const auto* l = std::get_if<LoraExpert>(&e.impl())) return lora_forward(*l, input);
  if (const auto* a = std::get_if<ParallelAdapterExpert>(&e.impl())) {
    return parallel_adapter_forward(*a, input);
  }
  throw ContractError("expert '" + e.name() + "' has no site delta");
}

class MoaHooks : public BlockHooks {
 public:
  MoaHooks(const MoaModel& model, const ForwardOptions& opts) : model_(model), opts_(opts) {}

  void begin_block(std::size_t layer, const ad::Tensor& x, const ad::Tensor& a_in,
                   const BatchShape& shape) override {
    const MoaLayer& L = model_.layer(layer);
    const MoaConfig& cfg = model_.config();
    const std::size_t rows = x.rows(), n = L.experts.size();
    rows_ = rows;
    weights_ = {};
    thresholds_ = {};
    gate_ = {};
    const ad::Tensor& rin = cfg.router_input == "normed" ? a_in : x;
    const bool instance = cfg.routing_level == "instance";
    if (L.router) {
      weights_ = instance ? instance_route(*L.router, rin, shape) : route(*L.router, rin);
    }
    if (L.threshold) {
      if (instance && L.threshold->mode == ThresholdMode::learned) {
        thresholds_ = ad::repeat_rows(
            threshold(*L.threshold, ad::segment_mean(rin, shape.batch, shape.seq, shape.lengths)),
            shape.seq);
      } else {
        thresholds_ = threshold(*L.threshold, rin);
      }
    }
    sparse_ = is_sparse(cfg.mode) && !opts_.gate_override;
    if (opts_.gate_override) {
      gate_ = opts_.gate_override(layer, weights_, thresholds_);
      if (!gate_.defined() || gate_.rows() != rows || gate_.cols() != n) {
        throw DimensionError("gate override must return [" + std::to_string(rows) + "," +
                             std::to_string(n) + "]");
      }
    } else {
      gate_ = weights_;
    }
    mask_ = sparse_ ? sparse_mask(weights_, thresholds_) : Mask::all(rows, n, true);
    if (opts_.counter) opts_.counter->rows_seen += rows;
    if (opts_.trace && !opts_.trace->forwards.empty()) {
      LayerTrace t;
      t.layer = layer;
      t.rows = rows;
      t.n_experts = n;
      if (weights_.defined()) {
        t.weights.assign(weights_.data().begin(), weights_.data().end());
      } else {
        t.weights.assign(rows * n, 1.0);
      }
      if (thresholds_.defined()) {
        t.thresholds.assign(thresholds_.data().begin(), thresholds_.data().end());
      } else {
        t.thresholds.assign(rows, 0.0);
      }
      t.mask = mask_;
      opts_.trace->forwards.back().layers.push_back(std::move(t));
    }
  }

  ad::Tensor site_delta(std::size_t layer, Site site, const ad::Tensor& input) override {
    const MoaLayer& L = model_.layer(layer);
    ad::Tensor total;
    for (std::size_t i = 0; i < L.experts.size(); ++i) {
      const Expert& e = L.experts[i];
      if (e.type() == ExpertType::prompt || e.site() != site) continue;
      ad::Tensor d = sparse_ ? sparse_delta(layer, i, e, input) : dense_delta(layer, i, e, input);
      if (!d.defined()) continue;
      total = total.defined() ? ad::add(total, d) : d;
    }
    return total;
  }

  ad::Tensor attention_delta(std::size_t layer, const ad::Tensor& q, const BlockWeights& w,
                             const BatchShape& shape) override {
    const MoaLayer& L = model_.layer(layer);
    for (std::size_t i = 0; i < L.experts.size(); ++i) {
      const auto* p = std::get_if<PromptTuningExpert>(&L.experts[i].impl());
      if (!p) continue;
      if (sparse_) throw ConfigError("prompt-tuning expert cannot run in sparse mode");
      count(layer, i, rows_);
      ad::Tensor d = prompt_forward(*p, q, PromptContext{w.wk, w.wv, w.wo, shape.batch, shape.seq});
      return gate_.defined() ? ad::scale_rows(d, ad::slice_col(gate_, i)) : d;
    }
    return {};
  }

  const Mask& mask() const { return mask_; }

 private:
  void count(std::size_t layer, std::size_t i, std::size_t n) {
    if (opts_.counter) opts_.counter->add(layer, i, n);
  }

  ad::Tensor dense_delta(std::size_t layer, std::size_t i, const Expert& e, const ad::Tensor& input) {
    count(layer, i, rows_);
    ad::Tensor d = expert_delta(e, input);
    return gate_.defined() ? ad::scale_rows(d, ad::slice_col(gate_, i)) : d;
  }

  // Evaluates the expert on its active rows only and places the weighted
  // result back into a zero matrix.
  ad::Tensor sparse_delta(std::size_t layer, std::size_t i, const Expert& e, const ad::Tensor& input) {
    const std::vector<std::size_t> active = mask_.active_rows(i);
    if (active.empty()) return {};
    count(layer, i, active.size());
    const ad::Tensor sub = ad::gather_rows(input, active);
    const ad::Tensor d = expert_delta(e, sub);
    const ad::Tensor w = ad::gather_rows(ad::slice_col(weights_, i), active);
    const ad::Tensor g = ad::gather_rows(thresholds_, active);
    const ad::Tensor gated = ad::gated_weight(w, g, model_.straight_through());
    return ad::scatter_rows(ad::scale_rows(d, gated), active, rows_);
  }

  const MoaModel& model_;
  const ForwardOptions& opts_;
  std::size_t rows_ = 0;
  bool sparse_ = false;
  ad::Tensor weights_, thresholds_, gate_;
  Mask mask_;
};

}  // namespace

ad::Tensor MoaModel::forward(const TokenBatch& batch, const ForwardOptions& options) const {
  if (options.trace) {
    ForwardTrace ft;
    ft.batch = batch.batch;
    ft.seq = batch.seq;
    ft.lengths = batch.lengths;
    ft.tokens = batch.tokens;
    options.trace->forwards.push_back(std::move(ft));
  }
  MoaHooks hooks(*this, options);
  return backbone_->forward(batch, &hooks);
}

MoaModel::BlockResult MoaModel::block_forward(std::size_t layer, const ad::Tensor& x,
                                              const BatchShape& shape,
                                              const ForwardOptions& options) const {
  MoaHooks hooks(*this, options);
  ad::Tensor out = backbone_->block_forward(layer, x, shape, &hooks);
  return {out, hooks.mask()};
}

ad::Tensor soft_forward(const MoaModel& model, std::size_t layer, const ad::Tensor& x,
                        const BatchShape& shape, const ForwardOptions& options) {
  if (is_sparse(model.config().mode)) {
    throw ConfigError("soft_forward called on a " + mode_name(model.config()) + " model");
  }
  return model.block_forward(layer, x, shape, options).output;
}

std::pair<ad::Tensor, Mask> sparse_forward(const MoaModel& model, std::size_t layer,
                                           const ad::Tensor& x, const BatchShape& shape,
                                           const ForwardOptions& options) {
  if (!is_sparse(model.config().mode)) {
    throw ConfigError("sparse_forward called on a " + mode_name(model.config()) + " model");
  }
  auto r = model.block_forward(layer, x, shape, options);
  return {r.output, r.mask};
}

}  // namespace moa
