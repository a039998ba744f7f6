// SPDX-License-Identifier: Apache-2.0
//
// Per-layer routers and thresholds.
//
//   route:      R(x) = act(x W_r), act = sigmoid (independent weights) or
//               softmax (competitive weights), one row per token.
//   threshold:  Gamma(x) = Gamma_max * sigmoid(x W_g + b_g), or a constant.
//   sparse_mask: expert i is active for token t iff R(x)_ti > Gamma_t.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moa/backbone.hpp"
#include "moa/tensor.hpp"

namespace moa {

enum class RouterActivation { sigmoid, softmax };
std::string router_activation_name(RouterActivation a);
RouterActivation router_activation_from_name(const std::string& name);

struct RouterState {
  ad::Tensor w_r;  // [d_model, n]
  RouterActivation activation = RouterActivation::sigmoid;

  std::size_t d_model() const { return w_r.rows(); }
  std::size_t n_experts() const { return w_r.cols(); }
};

// Zero-initialized router: every sigmoid weight starts at exactly 0.5.
RouterState make_router(std::size_t d_model, std::size_t n_experts, RouterActivation activation);

// [tokens, d] -> [tokens, n].
ad::Tensor route(const RouterState& r, const ad::Tensor& x);
// Single sequence: route(mean over tokens of x) -> [1, n].
ad::Tensor instance_route(const RouterState& r, const ad::Tensor& x);
// Batched instance routing over valid positions, broadcast back to
// [batch*seq, n].
ad::Tensor instance_route(const RouterState& r, const ad::Tensor& x, const BatchShape& shape);

enum class ThresholdMode { fixed, learned };

struct ThresholdState {
  ThresholdMode mode = ThresholdMode::learned;
  double fixed_gamma = 0.0;  // fixed mode, in [0, 1]
  double gamma_max = 0.5;    // learned mode upper bound
  ad::Tensor w_gamma;        // [d_model, 1]
  ad::Tensor b_gamma;        // [1]

  std::size_t param_count() const {
    return mode == ThresholdMode::learned ? w_gamma.numel() + b_gamma.numel() : 0;
  }
};

ThresholdState make_fixed_threshold(double gamma);
// W_gamma = 0, b_gamma = 0: every token starts at gamma_max / 2.
ThresholdState make_learned_threshold(std::size_t d_model, double gamma_max);

// Per-token thresholds as a column [tokens, 1].
ad::Tensor threshold(const ThresholdState& t, const ad::Tensor& x);

// Boolean [rows, cols] matrix.
struct Mask {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> bits;

  bool at(std::size_t r, std::size_t c) const { return bits[r * cols + c] != 0; }
  std::size_t count() const;
  std::size_t count_col(std::size_t c) const;
  std::vector<std::size_t> active_rows(std::size_t c) const;
  static Mask all(std::size_t rows, std::size_t cols, bool value);
};

// mask(t, i) = weights(t, i) > thresholds(t), strictly.
Mask sparse_mask(const ad::Tensor& weights, const ad::Tensor& thresholds);

}  // namespace moa
