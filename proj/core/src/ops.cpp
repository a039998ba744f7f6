// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "moa/errors.hpp"
#include "moa/tensor.hpp"

namespace moa::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return ConstMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MutMap as_mat(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MutMap(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

using BackwardFn = std::function<void(Node&)>;

Tensor make_result(Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs, const char* op,
                   BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool any = false;
  if (grad_enabled())
    for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (any) {
    n->requires_grad = true;
    for (const Tensor* t : inputs) n->parents.push_back(t->node());
    n->backward = std::move(fn);
  }
  return Tensor(std::move(n));
}

// Parent i of a node, or nullptr when it does not take gradients.
Node* grad_parent(Node& self, std::size_t i) {
  Node* p = self.parents[i].get();
  return p->requires_grad ? p : nullptr;
}

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D operand, got " +
                         shape_str(t.shape()));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  if (k > 0) {
    as_mat(out, m, n).noalias() =
        as_mat(a.node()->value, m, k) * as_mat(b.node()->value, k, n);
  }
  return make_result({m, n}, std::move(out), {&a, &b}, "matmul",
                     [m, k, n](Node& self) {
                       auto dc = as_mat(self.grad, m, n);
                       if (Node* pa = grad_parent(self, 0)) {
                         const auto& bv = self.parents[1]->value;
                         as_mat(pa->ensure_grad(), m, k).noalias() +=
                             dc * as_mat(bv, k, n).transpose();
                       }
                       if (Node* pb = grad_parent(self, 1)) {
                         const auto& av = self.parents[0]->value;
                         as_mat(pb->ensure_grad(), k, n).noalias() +=
                             as_mat(av, m, k).transpose() * dc;
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, "add", [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (Node* n = grad_parent(self, p)) {
        auto& g = n->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, "sub", [](Node& self) {
    if (Node* n = grad_parent(self, 0)) {
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (Node* n = grad_parent(self, 1)) {
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, "mul", [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (Node* n = grad_parent(self, 0)) {
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (Node* n = grad_parent(self, 1)) {
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return make_result(a.shape(), std::move(out), {&a}, "scale", [s](Node& self) {
    if (Node* n = grad_parent(self, 0)) {
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& bias) {
  require_2d(a, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.numel() != n) {
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) +
                         " does not match columns of " + shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias.data()[c];
  return make_result({m, n}, std::move(out), {&a, &bias}, "add_row",
                     [m, n](Node& self) {
                       if (Node* pa = grad_parent(self, 0)) {
                         auto& g = pa->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                       }
                       if (Node* pb = grad_parent(self, 1)) {
                         auto& g = pb->ensure_grad();
                         for (std::size_t r = 0; r < m; ++r)
                           for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
                       }
                     });
}

Tensor scale_rows(const Tensor& a, const Tensor& w) {
  require_2d(a, "scale_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (w.numel() != m) {
    throw DimensionError("scale_rows: weights " + shape_str(w.shape()) +
                         " do not match rows of " + shape_str(a.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a.data()[r * n + c] * w.data()[r];
  return make_result({m, n}, std::move(out), {&a, &w}, "scale_rows",
                     [m, n](Node& self) {
                       const auto& av = self.parents[0]->value;
                       const auto& wv = self.parents[1]->value;
                       if (Node* pa = grad_parent(self, 0)) {
                         auto& g = pa->ensure_grad();
                         for (std::size_t r = 0; r < m; ++r)
                           for (std::size_t c = 0; c < n; ++c)
                             g[r * n + c] += self.grad[r * n + c] * wv[r];
                       }
                       if (Node* pw = grad_parent(self, 1)) {
                         auto& g = pw->ensure_grad();
                         for (std::size_t r = 0; r < m; ++r) {
                           double acc = 0.0;
                           for (std::size_t c = 0; c < n; ++c)
                             acc += self.grad[r * n + c] * av[r * n + c];
                           g[r] += acc;
                         }
                       }
                     });
}

Tensor scale_col_groups(const Tensor& a, const Tensor& g) {
  require_2d(a, "scale_col_groups");
  const std::size_t m = a.rows(), n = a.cols(), groups = g.numel();
  if (groups == 0 || n % groups != 0) {
    throw DimensionError("scale_col_groups: " + std::to_string(groups) +
                         " gates do not divide columns of " + shape_str(a.shape()));
  }
  const std::size_t width = n / groups;
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a.data()[r * n + c] * g.data()[c / width];
  return make_result({m, n}, std::move(out), {&a, &g}, "scale_col_groups",
                     [m, n, width](Node& self) {
                       const auto& av = self.parents[0]->value;
                       const auto& gv = self.parents[1]->value;
                       if (Node* pa = grad_parent(self, 0)) {
                         auto& ga = pa->ensure_grad();
                         for (std::size_t r = 0; r < m; ++r)
                           for (std::size_t c = 0; c < n; ++c)
                             ga[r * n + c] += self.grad[r * n + c] * gv[c / width];
                       }
                       if (Node* pg = grad_parent(self, 1)) {
                         auto& gg = pg->ensure_grad();
                         for (std::size_t r = 0; r < m; ++r)
                           for (std::size_t c = 0; c < n; ++c)
                             gg[c / width] += self.grad[r * n + c] * av[r * n + c];
                       }
                     });
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  // Saturated values are kept strictly inside (0, 1).
  constexpr double lo = std::numeric_limits<double>::denorm_min();
  const double hi = std::nextafter(1.0, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(sigmoid_scalar(a.data()[i]), lo, hi);
  return make_result(a.shape(), std::move(out), {&a}, "sigmoid", [](Node& self) {
    if (Node* n = grad_parent(self, 0)) {
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = self.value[i];
        g[i] += self.grad[i] * s * (1.0 - s);
      }
    }
  });
}

Tensor scaled_sigmoid(const Tensor& a, double s) {
  std::vector<double> sig(a.numel()), out(a.numel());
  constexpr double lo = std::numeric_limits<double>::denorm_min();
  const double hi = std::nextafter(s, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    sig[i] = sigmoid_scalar(a.data()[i]);
    out[i] = std::clamp(s * sig[i], lo, hi);
  }
  return make_result(a.shape(), std::move(out), {&a}, "scaled_sigmoid", [sig = std::move(sig), s](Node& self) {
    if (Node* n = grad_parent(self, 0)) {
      auto& g = n->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s * sig[i] * (1.0 - sig[i]);
    }
  });
}

Tensor softmax(const Tensor& a, int axis) {
  require_2d(a, "softmax");
  if (axis != 0 && axis != 1) {
    throw DimensionError("softmax: axis must be 0 or 1, got " + std::to_string(axis));
  }
  const std::size_t m = a.rows(), n = a.cols();
  // Treat the reduced axis as "inner": element (line, j) lives at
  // line*line_stride + j*elem_stride.
  const std::size_t lines = axis == 1 ? m : n;
  const std::size_t len = axis == 1 ? n : m;
  const std::size_t line_stride = axis == 1 ? n : 1;
  const std::size_t elem_stride = axis == 1 ? 1 : n;
  std::vector<double> out(m * n);
  for (std::size_t l = 0; l < lines; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < len; ++j)
      mx = std::max(mx, a.data()[l * line_stride + j * elem_stride]);
    double z = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const std::size_t i = l * line_stride + j * elem_stride;
      out[i] = std::exp(a.data()[i] - mx);
      z += out[i];
    }
    for (std::size_t j = 0; j < len; ++j) out[l * line_stride + j * elem_stride] /= z;
  }
  return make_result({m, n}, std::move(out), {&a}, "softmax",
                     [lines, len, line_stride, elem_stride](Node& self) {
                       Node* p = grad_parent(self, 0);
                       if (!p) return;
                       auto& g = p->ensure_grad();
                       for (std::size_t l = 0; l < lines; ++l) {
                         double dot = 0.0;
                         for (std::size_t j = 0; j < len; ++j) {
                           const std::size_t i = l * line_stride + j * elem_stride;
                           dot += self.grad[i] * self.value[i];
                         }
                         for (std::size_t j = 0; j < len; ++j) {
                           const std::size_t i = l * line_stride + j * elem_stride;
                           g[i] += self.value[i] * (self.grad[i] - dot);
                         }
                       }
                     });
}

Activation activation_from_name(const std::string& name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "silu") return Activation::silu;
  throw ConfigError("unknown activation '" + name + "' (expected identity|relu|silu)");
}

std::string activation_name(Activation f) {
  switch (f) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::silu: return "silu";
  }
  return "?";
}

Tensor activate(const Tensor& a, Activation f) {
  if (f == Activation::identity) return a;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = f == Activation::relu ? std::max(0.0, x) : x * sigmoid_scalar(x);
  }
  return make_result(a.shape(), std::move(out), {&a},
                     f == Activation::relu ? "relu" : "silu", [f](Node& self) {
                       Node* p = grad_parent(self, 0);
                       if (!p) return;
                       auto& g = p->ensure_grad();
                       const auto& xv = p->value;
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double x = xv[i];
                         double d;
                         if (f == Activation::relu) {
                           d = x > 0 ? 1.0 : 0.0;
                         } else {
                           const double s = sigmoid_scalar(x);
                           d = s * (1.0 + x * (1.0 - s));
                         }
                         g[i] += self.grad[i] * d;
                       }
                     });
}

Tensor mean(const Tensor& a, int axis) {
  require_2d(a, "mean");
  const std::size_t m = a.rows(), n = a.cols();
  if (axis == 0) {
    if (m == 0) throw DimensionError("mean: axis 0 of " + shape_str(a.shape()) + " is empty");
    std::vector<double> out(n, 0.0);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) out[c] += a.data()[r * n + c];
    for (auto& v : out) v /= static_cast<double>(m);
    return make_result({1, n}, std::move(out), {&a}, "mean0", [m, n](Node& self) {
      if (Node* p = grad_parent(self, 0)) {
        auto& g = p->ensure_grad();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[c] / static_cast<double>(m);
      }
    });
  }
  if (axis == 1) {
    if (n == 0) throw DimensionError("mean: axis 1 of " + shape_str(a.shape()) + " is empty");
    std::vector<double> out(m, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < n; ++c) out[r] += a.data()[r * n + c];
      out[r] /= static_cast<double>(n);
    }
    return make_result({m, 1}, std::move(out), {&a}, "mean1", [m, n](Node& self) {
      if (Node* p = grad_parent(self, 0)) {
        auto& g = p->ensure_grad();
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[r] / static_cast<double>(n);
      }
    });
  }
  throw DimensionError("mean: axis must be 0 or 1, got " + std::to_string(axis));
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_result({}, {s}, {&a}, "sum", [](Node& self) {
    if (Node* p = grad_parent(self, 0)) {
      for (auto& g : p->ensure_grad()) g += self.grad[0];
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<double> out;
  for (const auto& t : parts) {
    require_2d(t, "concat_rows");
    if (t.cols() != n) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(t.shape()));
    }
    m += t.rows();
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  auto node = std::make_shared<Node>();
  node->shape = {m, n};
  node->value = std::move(out);
  node->op = "concat_rows";
  bool any = false;
  if (grad_enabled())
    for (const auto& t : parts) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const auto& t : parts) node->parents.push_back(t.node());
    node->backward = [](Node& self) {
      std::size_t off = 0;
      for (std::size_t p = 0; p < self.parents.size(); ++p) {
        Node* src = self.parents[p].get();
        const std::size_t len = src->value.size();
        if (src->requires_grad) {
          auto& g = src->ensure_grad();
          for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[off + i];
        }
        off += len;
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor slice_col(const Tensor& a, std::size_t col) {
  require_2d(a, "slice_col");
  const std::size_t m = a.rows(), n = a.cols();
  if (col >= n) {
    throw DimensionError("slice_col: column " + std::to_string(col) + " outside " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(m);
  for (std::size_t r = 0; r < m; ++r) out[r] = a.data()[r * n + col];
  return make_result({m, 1}, std::move(out), {&a}, "slice_col", [m, n, col](Node& self) {
    if (Node* p = grad_parent(self, 0)) {
      auto& g = p->ensure_grad();
      for (std::size_t r = 0; r < m; ++r) g[r * n + col] += self.grad[r];
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx) {
  require_2d(a, "gather_rows");
  const std::size_t m = a.rows(), n = a.cols(), k = idx.size();
  std::vector<double> out(k * n);
  for (std::size_t i = 0; i < k; ++i) {
    if (idx[i] >= m) {
      throw DimensionError("gather_rows: row " + std::to_string(idx[i]) + " outside " +
                           shape_str(a.shape()));
    }
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  return make_result({k, n}, std::move(out), {&a}, "gather_rows",
                     [rows = std::move(rows), n](Node& self) {
                       if (Node* p = grad_parent(self, 0)) {
                         auto& g = p->ensure_grad();
                         for (std::size_t i = 0; i < rows.size(); ++i)
                           for (std::size_t c = 0; c < n; ++c)
                             g[rows[i] * n + c] += self.grad[i * n + c];
                       }
                     });
}

Tensor scatter_rows(const Tensor& a, std::span<const std::size_t> idx, std::size_t out_rows) {
  require_2d(a, "scatter_rows");
  const std::size_t n = a.cols(), k = a.rows();
  if (idx.size() != k) {
    throw DimensionError("scatter_rows: " + std::to_string(idx.size()) +
                         " indices for operand " + shape_str(a.shape()));
  }
  std::vector<double> out(out_rows * n, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    if (idx[i] >= out_rows) {
      throw DimensionError("scatter_rows: row " + std::to_string(idx[i]) +
                           " outside " + std::to_string(out_rows) + " rows");
    }
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(i * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(idx[i] * n));
  }
  std::vector<std::size_t> rows(idx.begin(), idx.end());
  return make_result({out_rows, n}, std::move(out), {&a}, "scatter_rows",
                     [rows = std::move(rows), n](Node& self) {
                       if (Node* p = grad_parent(self, 0)) {
                         auto& g = p->ensure_grad();
                         for (std::size_t i = 0; i < rows.size(); ++i)
                           for (std::size_t c = 0; c < n; ++c)
                             g[i * n + c] += self.grad[rows[i] * n + c];
                       }
                     });
}

Tensor rms_norm(const Tensor& a, const Tensor& gain, double eps) {
  require_2d(a, "rms_norm");
  const std::size_t m = a.rows(), n = a.cols();
  if (gain.numel() != n) {
    throw DimensionError("rms_norm: gain " + shape_str(gain.shape()) + " vs input " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(m * n);
  std::vector<double> inv(m);
  for (std::size_t r = 0; r < m; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < n; ++c) ss += a.data()[r * n + c] * a.data()[r * n + c];
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (std::size_t c = 0; c < n; ++c)
      out[r * n + c] = a.data()[r * n + c] * inv[r] * gain.data()[c];
  }
  return make_result({m, n}, std::move(out), {&a, &gain}, "rms_norm",
                     [m, n, inv = std::move(inv)](Node& self) {
                       const auto& xv = self.parents[0]->value;
                       const auto& gv = self.parents[1]->value;
                       if (Node* pa = grad_parent(self, 0)) {
                         auto& g = pa->ensure_grad();
                         for (std::size_t r = 0; r < m; ++r) {
                           // y = x*inv*w; dx = inv*(dy*w) - x*inv^3/n * sum(dy*w*x)
                           double dot = 0.0;
                           for (std::size_t c = 0; c < n; ++c)
                             dot += self.grad[r * n + c] * gv[c] * xv[r * n + c];
                           const double k = inv[r] * inv[r] * inv[r] * dot / static_cast<double>(n);
                           for (std::size_t c = 0; c < n; ++c)
                             g[r * n + c] += inv[r] * self.grad[r * n + c] * gv[c] - k * xv[r * n + c];
                         }
                       }
                       if (Node* pg = grad_parent(self, 1)) {
                         auto& g = pg->ensure_grad();
                         for (std::size_t r = 0; r < m; ++r)
                           for (std::size_t c = 0; c < n; ++c)
                             g[c] += self.grad[r * n + c] * xv[r * n + c] * inv[r];
                       }
                     });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionSpec& spec) {
  require_2d(q, "attention");
  require_2d(k, "attention");
  require_2d(v, "attention");
  const std::size_t B = spec.batch, T = spec.q_len, S = spec.kv_len, H = spec.heads;
  const std::size_t d = q.cols();
  const std::size_t kv_rows = spec.shared_kv ? S : B * S;
  if (q.rows() != B * T || k.rows() != kv_rows || v.rows() != kv_rows || k.cols() != d ||
      v.cols() != d) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                         ", v " + shape_str(v.shape()) + " inconsistent with batch=" +
                         std::to_string(B) + " q_len=" + std::to_string(T) +
                         " kv_len=" + std::to_string(S));
  }
  if (H == 0 || d % H != 0) {
    throw DimensionError("attention: " + std::to_string(H) + " heads do not divide width " +
                         std::to_string(d));
  }
  if (spec.causal && S != T) {
    throw DimensionError("attention: causal masking needs q_len == kv_len");
  }
  const std::size_t dh = d / H;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> out(B * T * d, 0.0);
  // probs[((b*H + h)*T + t)*S + s]
  std::vector<double> probs(B * H * T * S, 0.0);
  const auto& qv = q.node()->value;
  const auto& kvv = k.node()->value;
  const auto& vv = v.node()->value;
  auto kv_row = [&](std::size_t b, std::size_t s) { return spec.shared_kv ? s : b * S + s; };
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t visible = spec.causal ? t + 1 : S;
        if (visible == 0) continue;
        double* p = &probs[((b * H + h) * T + t) * S];
        const double* qr = &qv[(b * T + t) * d + h * dh];
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s < visible; ++s) {
          const double* kr = &kvv[kv_row(b, s) * d + h * dh];
          double dot = 0.0;
          for (std::size_t j = 0; j < dh; ++j) dot += qr[j] * kr[j];
          p[s] = dot * sc;
          mx = std::max(mx, p[s]);
        }
        double z = 0.0;
        for (std::size_t s = 0; s < visible; ++s) {
          p[s] = std::exp(p[s] - mx);
          z += p[s];
        }
        double* o = &out[(b * T + t) * d + h * dh];
        for (std::size_t s = 0; s < visible; ++s) {
          p[s] /= z;
          const double* vr = &vv[kv_row(b, s) * d + h * dh];
          for (std::size_t j = 0; j < dh; ++j) o[j] += p[s] * vr[j];
        }
      }
    }
  }
  return make_result(
      {B * T, d}, std::move(out), {&q, &k, &v}, "attention",
      [spec, d, dh, sc, probs = std::move(probs)](Node& self) {
        const std::size_t B = spec.batch, T = spec.q_len, S = spec.kv_len, H = spec.heads;
        const auto& qv = self.parents[0]->value;
        const auto& kvv = self.parents[1]->value;
        const auto& vv = self.parents[2]->value;
        Node* pq = grad_parent(self, 0);
        Node* pk = grad_parent(self, 1);
        Node* pv = grad_parent(self, 2);
        std::vector<double>* gq = pq ? &pq->ensure_grad() : nullptr;
        std::vector<double>* gk = pk ? &pk->ensure_grad() : nullptr;
        std::vector<double>* gv = pv ? &pv->ensure_grad() : nullptr;
        auto kv_row = [&](std::size_t b, std::size_t s) { return spec.shared_kv ? s : b * S + s; };
        std::vector<double> dp(S);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < H; ++h) {
            for (std::size_t t = 0; t < T; ++t) {
              const std::size_t visible = spec.causal ? t + 1 : S;
              if (visible == 0) continue;
              const double* p = &probs[((b * H + h) * T + t) * S];
              const double* go = &self.grad[(b * T + t) * d + h * dh];
              double pdp = 0.0;
              for (std::size_t s = 0; s < visible; ++s) {
                const std::size_t kr = kv_row(b, s);
                double acc = 0.0;
                for (std::size_t j = 0; j < dh; ++j) acc += go[j] * vv[kr * d + h * dh + j];
                dp[s] = acc;
                pdp += p[s] * acc;
                if (gv) {
                  for (std::size_t j = 0; j < dh; ++j) (*gv)[kr * d + h * dh + j] += p[s] * go[j];
                }
              }
              for (std::size_t s = 0; s < visible; ++s) {
                const double ds = p[s] * (dp[s] - pdp) * sc;
                const std::size_t kr = kv_row(b, s);
                if (gq) {
                  for (std::size_t j = 0; j < dh; ++j)
                    (*gq)[(b * T + t) * d + h * dh + j] += ds * kvv[kr * d + h * dh + j];
                }
                if (gk) {
                  for (std::size_t j = 0; j < dh; ++j)
                    (*gk)[kr * d + h * dh + j] += ds * qv[(b * T + t) * d + h * dh + j];
                }
              }
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     std::span<const double> weights) {
  require_2d(logits, "cross_entropy");
  const std::size_t n = logits.rows(), V = logits.cols();
  if (targets.size() != n || weights.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets and " +
                         std::to_string(weights.size()) + " weights for logits " +
                         shape_str(logits.shape()));
  }
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  std::vector<double> probs(n * V, 0.0);
  double loss = 0.0;
  const auto& lv = logits.node()->value;
  for (std::size_t r = 0; r < n; ++r) {
    if (weights[r] == 0.0) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= V) {
      throw DimensionError("cross_entropy: target " + std::to_string(targets[r]) +
                           " outside vocabulary of " + std::to_string(V));
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < V; ++c) mx = std::max(mx, lv[r * V + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < V; ++c) {
      probs[r * V + c] = std::exp(lv[r * V + c] - mx);
      z += probs[r * V + c];
    }
    for (std::size_t c = 0; c < V; ++c) probs[r * V + c] /= z;
    loss += weights[r] * -(lv[r * V + static_cast<std::size_t>(targets[r])] - mx - std::log(z));
  }
  if (wsum > 0) loss /= wsum;
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<double> wt(weights.begin(), weights.end());
  return make_result({}, {loss}, {&logits}, "cross_entropy",
                     [n, V, wsum, probs = std::move(probs), tg = std::move(tg),
                      wt = std::move(wt)](Node& self) {
                       Node* p = grad_parent(self, 0);
                       if (!p || wsum <= 0) return;
                       auto& g = p->ensure_grad();
                       const double up = self.grad[0] / wsum;
                       for (std::size_t r = 0; r < n; ++r) {
                         if (wt[r] == 0.0) continue;
                         const double f = up * wt[r];
                         for (std::size_t c = 0; c < V; ++c) g[r * V + c] += f * probs[r * V + c];
                         g[r * V + static_cast<std::size_t>(tg[r])] -= f;
                       }
                     });
}

Tensor segment_mean(const Tensor& x, std::size_t batch, std::size_t seq,
                    std::span<const std::size_t> lengths) {
  require_2d(x, "segment_mean");
  const std::size_t d = x.cols();
  if (x.rows() != batch * seq || lengths.size() != batch) {
    throw DimensionError("segment_mean: input " + shape_str(x.shape()) + " vs batch=" +
                         std::to_string(batch) + " seq=" + std::to_string(seq));
  }
  std::vector<double> out(batch * d, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    if (lengths[b] == 0 || lengths[b] > seq) {
      throw DimensionError("segment_mean: sequence " + std::to_string(b) + " has length " +
                           std::to_string(lengths[b]));
    }
    for (std::size_t t = 0; t < lengths[b]; ++t)
      for (std::size_t c = 0; c < d; ++c) out[b * d + c] += x.data()[(b * seq + t) * d + c];
    for (std::size_t c = 0; c < d; ++c) out[b * d + c] /= static_cast<double>(lengths[b]);
  }
  std::vector<std::size_t> lens(lengths.begin(), lengths.end());
  return make_result({batch, d}, std::move(out), {&x}, "segment_mean",
                     [seq, d, lens = std::move(lens)](Node& self) {
                       if (Node* p = grad_parent(self, 0)) {
                         auto& g = p->ensure_grad();
                         for (std::size_t b = 0; b < lens.size(); ++b)
                           for (std::size_t t = 0; t < lens[b]; ++t)
                             for (std::size_t c = 0; c < d; ++c)
                               g[(b * seq + t) * d + c] +=
                                   self.grad[b * d + c] / static_cast<double>(lens[b]);
                       }
                     });
}

Tensor repeat_rows(const Tensor& a, std::size_t times) {
  require_2d(a, "repeat_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * times * n);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t t = 0; t < times; ++t)
      std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(r * n), n,
                  out.begin() + static_cast<std::ptrdiff_t>((r * times + t) * n));
  return make_result({m * times, n}, std::move(out), {&a}, "repeat_rows",
                     [m, n, times](Node& self) {
                       if (Node* p = grad_parent(self, 0)) {
                         auto& g = p->ensure_grad();
                         for (std::size_t r = 0; r < m; ++r)
                           for (std::size_t t = 0; t < times; ++t)
                             for (std::size_t c = 0; c < n; ++c)
                               g[r * n + c] += self.grad[(r * times + t) * n + c];
                       }
                     });
}

Tensor gated_weight(const Tensor& r, const Tensor& gamma, StraightThrough mode) {
  if (r.numel() != gamma.numel()) {
    throw DimensionError("gated_weight: weights " + shape_str(r.shape()) + " vs thresholds " +
                         shape_str(gamma.shape()));
  }
  std::vector<double> out(r.data().begin(), r.data().end());
  return make_result(r.shape(), std::move(out), {&r, &gamma}, "gated_weight",
                     [mode](Node& self) {
                       const auto& rv = self.parents[0]->value;
                       if (Node* pr = grad_parent(self, 0)) {
                         auto& g = pr->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i)
                           g[i] += self.grad[i] * (mode == StraightThrough::identity ? 1.0 + rv[i] : 1.0);
                       }
                       if (mode == StraightThrough::none) return;
                       if (Node* pg = grad_parent(self, 1)) {
                         auto& g = pg->ensure_grad();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * rv[i];
                       }
                     });
}

}  // namespace moa::ad
