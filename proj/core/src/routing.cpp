// SPDX-License-Identifier: Apache-2.0
#include "moa/routing.hpp"

#include "moa/errors.hpp"

namespace moa {

std::string router_activation_name(RouterActivation a) {
  return a == RouterActivation::sigmoid ? "sigmoid" : "softmax";
}

RouterActivation router_activation_from_name(const std::string& name) {
  if (name == "sigmoid") return RouterActivation::sigmoid;
  if (name == "softmax") return RouterActivation::softmax;
  throw ConfigError("unknown router activation '" + name + "' (expected sigmoid|softmax)");
}

RouterState make_router(std::size_t d_model, std::size_t n_experts, RouterActivation activation) {
  return RouterState{ad::Tensor::zeros({d_model, n_experts}, true), activation};
}

namespace {

void check_width(const ad::Tensor& x, std::size_t d, const char* what) {
  if (x.rank() != 2 || x.cols() != d) {
    throw DimensionError(std::string(what) + ": input " + ad::shape_str(x.shape()) +
                         " does not have width " + std::to_string(d));
  }
}

ad::Tensor activate_router(const RouterState& r, const ad::Tensor& logits) {
  return r.activation == RouterActivation::sigmoid ? ad::sigmoid(logits) : ad::softmax(logits, 1);
}

}  // namespace

ad::Tensor route(const RouterState& r, const ad::Tensor& x) {
  check_width(x, r.d_model(), "route");
  return activate_router(r, ad::matmul(x, r.w_r));
}

ad::Tensor instance_route(const RouterState& r, const ad::Tensor& x) {
  check_width(x, r.d_model(), "instance_route");
  if (x.rows() == 0) throw DimensionError("instance_route: empty sequence");
  return route(r, ad::mean(x, 0));
}

ad::Tensor instance_route(const RouterState& r, const ad::Tensor& x, const BatchShape& shape) {
  check_width(x, r.d_model(), "instance_route");
  const ad::Tensor pooled = ad::segment_mean(x, shape.batch, shape.seq, shape.lengths);
  return ad::repeat_rows(route(r, pooled), shape.seq);
}

ThresholdState make_fixed_threshold(double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) {
    throw ConfigError("fixed threshold must lie in [0, 1], got " + std::to_string(gamma));
  }
  ThresholdState t;
  t.mode = ThresholdMode::fixed;
  t.fixed_gamma = gamma;
  return t;
}

ThresholdState make_learned_threshold(std::size_t d_model, double gamma_max) {
  if (!(gamma_max > 0.0 && gamma_max <= 1.0)) {
    throw ConfigError("gamma_max must lie in (0, 1], got " + std::to_string(gamma_max));
  }
  ThresholdState t;
  t.mode = ThresholdMode::learned;
  t.gamma_max = gamma_max;
  t.w_gamma = ad::Tensor::zeros({d_model, 1}, true);
  t.b_gamma = ad::Tensor::zeros({1}, true);
  return t;
}

ad::Tensor threshold(const ThresholdState& t, const ad::Tensor& x) {
  if (t.mode == ThresholdMode::fixed) {
    if (x.rank() != 2) throw DimensionError("threshold: input " + ad::shape_str(x.shape()));
    return ad::Tensor::full({x.rows(), 1}, t.fixed_gamma);
  }
  check_width(x, t.w_gamma.rows(), "threshold");
  return ad::scaled_sigmoid(ad::add_row(ad::matmul(x, t.w_gamma), t.b_gamma), t.gamma_max);
}

std::size_t Mask::count() const {
  std::size_t n = 0;
  for (auto b : bits) n += b;
  return n;
}

std::size_t Mask::count_col(std::size_t c) const {
  std::size_t n = 0;
  for (std::size_t r = 0; r < rows; ++r) n += bits[r * cols + c];
  return n;
}

std::vector<std::size_t> Mask::active_rows(std::size_t c) const {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < rows; ++r)
    if (bits[r * cols + c]) out.push_back(r);
  return out;
}

Mask Mask::all(std::size_t rows, std::size_t cols, bool value) {
  return Mask{rows, cols, std::vector<std::uint8_t>(rows * cols, value ? 1 : 0)};
}

Mask sparse_mask(const ad::Tensor& weights, const ad::Tensor& thresholds) {
  const std::size_t m = weights.rows(), n = weights.cols();
  if (weights.rank() != 2 || thresholds.numel() != m) {
    throw DimensionError("sparse_mask: weights " + ad::shape_str(weights.shape()) +
                         " vs thresholds " + ad::shape_str(thresholds.shape()));
  }
  Mask mask{m, n, std::vector<std::uint8_t>(m * n, 0)};
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c)
      mask.bits[r * n + c] = weights.data()[r * n + c] > thresholds.data()[r] ? 1 : 0;
  return mask;
}

}  // namespace moa
