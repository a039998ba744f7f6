// SPDX-License-Identifier: Apache-2.0
//
// Mixture-of-adapters over a frozen backbone.
//
// Every layer carries an ordered expert list, an optional router and an
// optional threshold function. At each site the expert's delta is scaled by
// its router weight R(x)_i and added to the frozen computation:
//
//   soft:    h = F_i(x) + R(x)_i E_i(x)                   (all experts run)
//   sparse:  h = F_i(x) + R(x)_i E_i(x)  if R(x)_i > Gamma
//            h = F_i(x)                  otherwise        (expert skipped)
//
// Router weights come from the block input, shared by every expert of the
// layer; each expert consumes its own site-local input.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "moa/adapters.hpp"
#include "moa/backbone.hpp"
#include "moa/routing.hpp"

namespace moa {

enum class MoaMode {
  soft,
  sparse_fixed,
  sparse_learned,
  softmax_soft,
  naive_composition,
  single,
  lora_only_routed,
};

// Accepts: soft | sparse | sparse_learned | sparse_fixed | softmax_soft |
// naive_composition | lora_only_routed | single_lora |
// single_parallel_adapter | single_prompt. Sets cfg.mode (and
// cfg.single_type for single_*).
struct MoaConfig;
void apply_mode_name(MoaConfig& cfg, const std::string& name);
std::string mode_name(const MoaConfig& cfg);

// Canonical expert order and names.
const std::vector<std::string>& canonical_expert_names();

struct MoaConfig {
  MoaMode mode = MoaMode::soft;
  std::string single_type = "lora";        // single mode only
  std::vector<std::string> experts;        // empty: mode default
  std::size_t rank = 8;
  double alpha = 8.0;
  std::size_t bottleneck = 16;
  std::size_t prompt_len = 10;
  double gamma_max = 0.5;                  // sparse_learned
  double gamma = 0.2;                      // sparse_fixed
  std::string threshold_grad = "straight_through";  // straight_through | none
  std::string router_activation = "sigmoid";        // softmax_soft forces softmax
  std::string router_input = "block_input";         // block_input | normed
  std::string routing_level = "token";              // token | instance
  std::string adapter_activation = "silu";
  std::uint64_t seed = 0;

  bool operator==(const MoaConfig&) const = default;
};

bool is_sparse(MoaMode mode);
bool is_routed(MoaMode mode);

// Resolved expert list for the config (mode defaults applied). Throws
// ConfigError on conflicts, including prompt experts in sparse modes.
std::vector<std::string> resolve_experts(const MoaConfig& cfg);
void validate(const MoaConfig& cfg);

struct MoaLayer {
  std::vector<Expert> experts;
  std::optional<RouterState> router;
  std::optional<ThresholdState> threshold;
};

// Routing decisions of one layer during one forward pass.
struct LayerTrace {
  std::size_t layer = 0;
  std::size_t rows = 0, n_experts = 0;
  std::vector<double> weights;     // [rows, n]; 1.0 for unrouted modes
  std::vector<double> thresholds;  // [rows]; 0 when no threshold applies
  Mask mask;                       // experts actually evaluated
};

struct ForwardTrace {
  std::size_t batch = 0, seq = 0;
  std::vector<std::size_t> lengths;
  std::vector<int> tokens;
  std::vector<LayerTrace> layers;
};

struct RoutingTrace {
  std::vector<ForwardTrace> forwards;
};

// Rows each expert was evaluated on, summed over forward passes.
struct InvocationCounter {
  std::vector<std::vector<std::uint64_t>> counts;  // [layer][expert]
  std::uint64_t rows_seen = 0;                      // tokens per layer, summed

  void add(std::size_t layer, std::size_t expert, std::uint64_t n);
  // 0 for pairs never counted.
  std::uint64_t at(std::size_t layer, std::size_t expert) const;
  std::uint64_t total() const;
  std::uint64_t layer_total(std::size_t layer) const;
};

// Replaces router weights with an explicit [rows, n] gate and forces every
// expert to run densely. Receives the router weights (undefined when the
// mode has no router) and thresholds (undefined when the mode has none).
using GateOverride = std::function<ad::Tensor(std::size_t layer, const ad::Tensor& weights,
                                              const ad::Tensor& thresholds)>;

struct ForwardOptions {
  RoutingTrace* trace = nullptr;
  InvocationCounter* counter = nullptr;
  GateOverride gate_override;
};

struct ParamReport {
  struct Entry {
    std::size_t layer;
    std::string module;  // expert name, "router" or "threshold"
    std::size_t count;
  };
  std::vector<Entry> entries;
  std::size_t total = 0;
};

class MoaModel {
 public:
  // Attaches the configured experts to every layer of a frozen backbone.
  MoaModel(std::shared_ptr<const Backbone> backbone, MoaConfig cfg);

  const MoaConfig& config() const { return cfg_; }
  const Backbone& backbone() const { return *backbone_; }
  std::shared_ptr<const Backbone> backbone_ptr() const { return backbone_; }
  std::size_t n_layers() const { return layers_.size(); }
  const MoaLayer& layer(std::size_t i) const { return layers_.at(i); }
  MoaLayer& layer(std::size_t i) { return layers_.at(i); }
  const std::vector<std::string>& expert_names() const { return names_; }
  std::size_t n_experts() const { return names_.size(); }
  ad::StraightThrough straight_through() const { return ste_; }

  // "layers.<l>.<module>.<tensor>" in stable order.
  std::vector<std::pair<std::string, ad::Tensor>> trainable_parameters() const;
  ParamReport param_report() const;

  // Logits [batch*seq, vocab].
  ad::Tensor forward(const TokenBatch& batch, const ForwardOptions& options = {}) const;

  struct BlockResult {
    ad::Tensor output;
    Mask mask;
  };
  // One block of the adapted model on block input x.
  BlockResult block_forward(std::size_t layer, const ad::Tensor& x, const BatchShape& shape,
                            const ForwardOptions& options = {}) const;

 private:
  std::shared_ptr<const Backbone> backbone_;
  MoaConfig cfg_;
  std::vector<std::string> names_;
  std::vector<MoaLayer> layers_;
  ad::StraightThrough ste_ = ad::StraightThrough::identity;
};

// Soft forward of one block. Requires a non-sparse mode.
ad::Tensor soft_forward(const MoaModel& model, std::size_t layer, const ad::Tensor& x,
                        const BatchShape& shape, const ForwardOptions& options = {});
// Sparse forward of one block; masked experts are never evaluated. Requires
// a sparse mode.
std::pair<ad::Tensor, Mask> sparse_forward(const MoaModel& model, std::size_t layer,
                                           const ad::Tensor& x, const BatchShape& shape,
                                           const ForwardOptions& options = {});

ad::StraightThrough threshold_grad_rule(const std::string& name);

}  // namespace moa
