// SPDX-License-Identifier: Apache-2.0
//
// Heterogeneous adapter experts. Each returns only its additive delta E(x);
// the frozen path lives in the backbone. All three start as exact zero maps.
#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "moa/backbone.hpp"
#include "moa/tensor.hpp"

namespace moa {

enum class ExpertType { lora, parallel_adapter, prompt };
std::string expert_type_tag(ExpertType type);  // "lora" | "parallel_adapter" | "prompt"
ExpertType expert_type_from_tag(const std::string& tag);

struct LoraExpert {
  Site site = Site::q;
  std::size_t d_in = 0, d_out = 0, rank = 0;
  double alpha = 1.0;
  ad::Tensor w_down;  // [d_in, rank], random normal
  ad::Tensor w_up;    // [rank, d_out], zeros
};

struct ParallelAdapterExpert {
  std::size_t d_model = 0, bottleneck = 0;
  ad::Activation f = ad::Activation::silu;
  ad::Tensor w_down;  // [d_model, bottleneck], random normal
  ad::Tensor w_up;    // [bottleneck, d_model], zeros
};

struct PromptTuningExpert {
  std::size_t d_model = 0, length = 0, heads = 0;
  ad::Tensor prompts;  // [length, d_model]
  ad::Tensor gate;     // [heads], zeros
};

LoraExpert make_lora(Site site, std::size_t d_in, std::size_t d_out, std::size_t rank,
                     double alpha, std::mt19937_64& rng);
ParallelAdapterExpert make_parallel_adapter(std::size_t d_model, std::size_t bottleneck,
                                            ad::Activation f, std::mt19937_64& rng);
PromptTuningExpert make_prompt(std::size_t d_model, std::size_t length, std::size_t heads,
                               std::mt19937_64& rng);

// alpha * x * W_down * W_up
ad::Tensor lora_forward(const LoraExpert& e, const ad::Tensor& x_site);
// f(x * W_down) * W_up
ad::Tensor parallel_adapter_forward(const ParallelAdapterExpert& e, const ad::Tensor& x_ffn);

struct PromptContext {
  const ad::Tensor& wk;  // frozen key projection
  const ad::Tensor& wv;  // frozen value projection
  const ad::Tensor& wo;  // frozen output projection
  std::size_t batch = 1;
  std::size_t seq = 1;
};
// Post-W_o delta: concat_h(g_h * Attn(Q_h, P W_k, P W_v)) * W_o. Prompts are
// visible to every query position. Zero-length prompts contribute zeros.
ad::Tensor prompt_forward(const PromptTuningExpert& e, const ad::Tensor& q,
                          const PromptContext& ctx);

std::size_t count_params(const LoraExpert& e);
std::size_t count_params(const ParallelAdapterExpert& e);
std::size_t count_params(const PromptTuningExpert& e);

// Closed-form counts, independent of constructed tensors.
constexpr std::size_t lora_param_formula(std::size_t d_in, std::size_t d_out, std::size_t r) {
  return r * (d_in + d_out);
}
constexpr std::size_t adapter_param_formula(std::size_t d, std::size_t r_b) { return 2 * d * r_b; }
constexpr std::size_t prompt_param_formula(std::size_t k, std::size_t d, std::size_t heads) {
  return k * d + heads;
}

class Expert {
 public:
  using Impl = std::variant<LoraExpert, ParallelAdapterExpert, PromptTuningExpert>;

  Expert(std::string name, Impl impl) : name_(std::move(name)), impl_(std::move(impl)) {}

  const std::string& name() const { return name_; }
  ExpertType type() const;
  // Where the delta is injected: LoRA at its site, adapter at ffn, prompt at attn.
  Site site() const;
  std::size_t param_count() const;
  std::vector<std::pair<std::string, ad::Tensor>> named_parameters() const;
  // Estimated multiply-adds x2 per token for one invocation.
  std::size_t flops_per_token() const;

  const Impl& impl() const { return impl_; }
  Impl& impl() { return impl_; }

 private:
  std::string name_;
  Impl impl_;
};

}  // namespace moa
