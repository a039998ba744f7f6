// SPDX-License-Identifier: Apache-2.0
#include "moa/adapters.hpp"

#include <cmath>

#include "moa/errors.hpp"

namespace moa {

std::string expert_type_tag(ExpertType type) {
  switch (type) {
    case ExpertType::lora: return "lora";
    case ExpertType::parallel_adapter: return "parallel_adapter";
    case ExpertType::prompt: return "prompt";
  }
  return "?";
}

ExpertType expert_type_from_tag(const std::string& tag) {
  if (tag == "lora") return ExpertType::lora;
  if (tag == "parallel_adapter") return ExpertType::parallel_adapter;
  if (tag == "prompt") return ExpertType::prompt;
  throw ConfigError("unknown expert type '" + tag + "' (expected lora|parallel_adapter|prompt)");
}

namespace {

ad::Tensor random_normal(std::mt19937_64& rng, ad::Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(ad::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return ad::Tensor::from(std::move(shape), std::move(v), true);
}

void check_width(const ad::Tensor& x, std::size_t width, const char* what) {
  if (x.rank() != 2 || x.cols() != width) {
    throw DimensionError(std::string(what) + ": input " + ad::shape_str(x.shape()) +
                         " does not have width " + std::to_string(width));
  }
}

}  // namespace

LoraExpert make_lora(Site site, std::size_t d_in, std::size_t d_out, std::size_t rank,
                     double alpha, std::mt19937_64& rng) {
  if (rank == 0) throw ConfigError("LoRA rank must be >= 1");
  LoraExpert e;
  e.site = site;
  e.d_in = d_in;
  e.d_out = d_out;
  e.rank = rank;
  e.alpha = alpha;
  e.w_down = random_normal(rng, {d_in, rank}, 1.0 / std::sqrt(static_cast<double>(d_in)));
  e.w_up = ad::Tensor::zeros({rank, d_out}, true);
  return e;
}

ParallelAdapterExpert make_parallel_adapter(std::size_t d_model, std::size_t bottleneck,
                                            ad::Activation f, std::mt19937_64& rng) {
  if (bottleneck == 0) throw ConfigError("adapter bottleneck must be >= 1");
  ParallelAdapterExpert e;
  e.d_model = d_model;
  e.bottleneck = bottleneck;
  e.f = f;
  e.w_down = random_normal(rng, {d_model, bottleneck}, 1.0 / std::sqrt(static_cast<double>(d_model)));
  e.w_up = ad::Tensor::zeros({bottleneck, d_model}, true);
  return e;
}

PromptTuningExpert make_prompt(std::size_t d_model, std::size_t length, std::size_t heads,
                               std::mt19937_64& rng) {
  PromptTuningExpert e;
  e.d_model = d_model;
  e.length = length;
  e.heads = heads;
  e.prompts = random_normal(rng, {length, d_model}, 1.0);
  e.gate = ad::Tensor::zeros({heads}, true);
  return e;
}

ad::Tensor lora_forward(const LoraExpert& e, const ad::Tensor& x_site) {
  check_width(x_site, e.d_in, "lora_forward");
  return ad::scale(ad::matmul(ad::matmul(x_site, e.w_down), e.w_up), e.alpha);
}

ad::Tensor parallel_adapter_forward(const ParallelAdapterExpert& e, const ad::Tensor& x_ffn) {
  check_width(x_ffn, e.d_model, "parallel_adapter_forward");
  return ad::matmul(ad::activate(ad::matmul(x_ffn, e.w_down), e.f), e.w_up);
}

ad::Tensor prompt_forward(const PromptTuningExpert& e, const ad::Tensor& q,
                          const PromptContext& ctx) {
  check_width(q, e.d_model, "prompt_forward");
  if (e.heads == 0 || e.d_model % e.heads != 0 || e.gate.numel() != e.heads) {
    throw DimensionError("prompt_forward: " + std::to_string(e.heads) +
                         " heads incompatible with width " + std::to_string(e.d_model));
  }
  if (e.length == 0) return ad::Tensor::zeros({q.rows(), e.d_model});
  const ad::Tensor pk = ad::matmul(e.prompts, ctx.wk);
  const ad::Tensor pv = ad::matmul(e.prompts, ctx.wv);
  ad::AttentionSpec spec{ctx.batch, ctx.seq, e.length, e.heads, false, true};
  const ad::Tensor heads = ad::attention(q, pk, pv, spec);
  return ad::matmul(ad::scale_col_groups(heads, e.gate), ctx.wo);
}

std::size_t count_params(const LoraExpert& e) { return e.w_down.numel() + e.w_up.numel(); }
std::size_t count_params(const ParallelAdapterExpert& e) {
  return e.w_down.numel() + e.w_up.numel();
}
std::size_t count_params(const PromptTuningExpert& e) {
  return e.prompts.numel() + e.gate.numel();
}

ExpertType Expert::type() const {
  return std::visit(
      [](const auto& e) {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, LoraExpert>) return ExpertType::lora;
        else if constexpr (std::is_same_v<T, ParallelAdapterExpert>) return ExpertType::parallel_adapter;
        else return ExpertType::prompt;
      },
      impl_);
}

Site Expert::site() const {
  if (const auto* l = std::get_if<LoraExpert>(&impl_)) return l->site;
  return type() == ExpertType::parallel_adapter ? Site::ffn : Site::attn;
}

std::size_t Expert::param_count() const {
  return std::visit([](const auto& e) { return count_params(e); }, impl_);
}

std::vector<std::pair<std::string, ad::Tensor>> Expert::named_parameters() const {
  std::vector<std::pair<std::string, ad::Tensor>> out;
  if (const auto* l = std::get_if<LoraExpert>(&impl_)) {
    out.emplace_back("w_down", l->w_down);
    out.emplace_back("w_up", l->w_up);
  } else if (const auto* a = std::get_if<ParallelAdapterExpert>(&impl_)) {
    out.emplace_back("w_down", a->w_down);
    out.emplace_back("w_up", a->w_up);
  } else {
    const auto& p = std::get<PromptTuningExpert>(impl_);
    out.emplace_back("prompts", p.prompts);
    out.emplace_back("gate", p.gate);
  }
  return out;
}

std::size_t Expert::flops_per_token() const {
  if (const auto* l = std::get_if<LoraExpert>(&impl_)) return 2 * l->rank * (l->d_in + l->d_out);
  if (const auto* a = std::get_if<ParallelAdapterExpert>(&impl_)) return 4 * a->d_model * a->bottleneck;
  // Scores and weighted sum over the prompt keys, then W_o.
  const auto& p = std::get<PromptTuningExpert>(impl_);
  return 4 * p.length * p.d_model + 2 * p.d_model * p.d_model;
}

}  // namespace moa
