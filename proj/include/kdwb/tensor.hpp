#pragma once

// Dense f64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a shared node. Operations on tensors that
// require gradients record their inputs and a local backward rule on the
// result node; `backward(loss)` linearizes the reachable graph into a Tape
// (topological order) and replays it in reverse. Layout is row-major and the
// only implicit broadcasting is the row-wise bias add.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kdwb/error.hpp"

namespace kdwb {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
};

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape.empty()) shape = {1};
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  // Builds an m x n matrix from nested rows.
  static Tensor matrix(const std::vector<std::vector<double>>& rows, bool requires_grad = false) {
    if (rows.empty() || rows.front().empty()) throw DimensionError("matrix needs at least one element");
    std::vector<double> data;
    for (const auto& row : rows) {
      if (row.size() != rows.front().size()) throw DimensionError("ragged matrix rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({rows.size(), rows.front().size()}, std::move(data), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  // Trailing extent; every tensor is viewed as rows x cols by the row-wise ops.
  std::size_t cols() const { return node_->shape.back(); }
  std::size_t rows() const { return numel() / cols(); }

  std::span<const double> data() const { return node_->data; }
  // Mutable access for optimizers and initializers. Only meaningful on leaves.
  std::span<double> mutable_data() { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data.at(r * cols() + c); }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    if (node_->grad.empty()) node_->grad.assign(numel(), 0.0);
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  bool all_finite() const {
    return std::all_of(node_->data.begin(), node_->data.end(), [](double v) { return std::isfinite(v); });
  }

  // Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  const std::shared_ptr<Node>& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

// Gradient buffer of a parent node, allocated on first touch, or nullptr when
// the parent does not participate in differentiation.
inline double* grad_of(Node& node) {
  if (!node.requires_grad) return nullptr;
  if (node.grad.empty()) node.grad.assign(node.data.size(), 0.0);
  return node.grad.data();
}

inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(shape), std::move(data), false);
  if (!grad_enabled()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  Node& node = *out.node();
  node.requires_grad = true;
  for (auto& in : inputs) node.parents.push_back(in.node());
  node.backward_fn = std::move(backward_fn);
  return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline double gaussian_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
inline double gaussian_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (auto& parent : self.parents) {
      if (double* g = detail::grad_of(*parent)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = detail::grad_of(*self.parents[1])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->data;
    const auto& bv = self.parents[1]->data;
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = detail::grad_of(*self.parents[1])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * factor;
  return detail::make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

inline Tensor square(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * a[i];
  return detail::make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    const auto& av = self.parents[0]->data;
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += 2.0 * av[i] * self.grad[i];
    }
  });
}

inline Tensor tanh(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a[i]);
  return detail::make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * (1.0 - self.data[i] * self.data[i]);
    }
  });
}

// x * Phi(x) with the exact Gaussian CDF.
inline Tensor gelu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * detail::gaussian_cdf(a[i]);
  return detail::make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    const auto& av = self.parents[0]->data;
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double x = av[i];
        g[i] += self.grad[i] * (detail::gaussian_cdf(x) + x * detail::gaussian_pdf(x));
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.data()) total += v;
  return detail::make_result({1}, {total}, {a}, [](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      const double up = self.grad[0];
      for (std::size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += up;
    }
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---------------------------------------------------------------------------
// Shape and indexing
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result(std::move(shape), std::move(out), {a}, [](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

// Rows of `table` selected by `indices`; repeated indices accumulate on backward.
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t n = table.cols();
  if (indices.empty()) throw DimensionError("gather_rows: no indices");
  std::vector<double> out(indices.size() * n);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= table.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(indices[r]) + " out of range for " +
                           shape_str(table.shape()));
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(indices[r] * n), n, out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t count = idx.size();
  return detail::make_result({count, n}, std::move(out), {table}, [idx = std::move(idx), n](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        double* dst = g + idx[r] * n;
        const double* src = self.grad.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (double* g = detail::grad_of(pa)) detail::gemm_nt(self.grad.data(), pb.data.data(), g, m, n, k);
    if (double* g = detail::grad_of(pb)) detail::gemm_tn(pa.data.data(), self.grad.data(), g, m, k, n);
  });
}

// x[..., n] + bias[n], broadcast over rows.
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.cols();
  if (bias.numel() != n) {
    throw DimensionError("add_row_bias: bias " + shape_str(bias.shape()) + " vs rows of width " + std::to_string(n));
  }
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] + bias[j];
  }
  return detail::make_result(x.shape(), std::move(out), {x, bias}, [n](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = detail::grad_of(*self.parents[1])) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % n] += self.grad[i];
    }
  });
}

inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_row_bias(matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// Row-wise normalizations
// ---------------------------------------------------------------------------

inline Tensor softmax_rows(const Tensor& x) {
  const std::size_t n = x.cols();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= z;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [n](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      const std::size_t rows = self.data.size() / n;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.data.data() + r * n;
        const double* dy = self.grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += y[j] * (dy[j] - dot);
      }
    }
  });
}

inline Tensor log_softmax_rows(const Tensor& x) {
  const std::size_t n = x.cols();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const double* in = x.data().data() + r * n;
    const double mx = *std::max_element(in, in + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(in[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = in[j] - lse;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [n](Node& self) {
    if (double* g = detail::grad_of(*self.parents[0])) {
      const std::size_t rows = self.data.size() / n;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = self.data.data() + r * n;
        const double* dy = self.grad.data() + r * n;
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += dy[j];
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += dy[j] - std::exp(y[j]) * total;
      }
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps) {
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t n = x.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(n) + " entries");
  }
  const std::size_t rows = x.rows();
  std::vector<double> out(x.numel());
  std::vector<double> normalized(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (in[j] - mu) * inv_std[r];
      normalized[r * n + j] = xh;
      out[r * n + j] = xh * gain[j] + bias[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [n, rows, normalized = std::move(normalized), inv_std = std::move(inv_std)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        double* gx = detail::grad_of(px);
        double* gg = detail::grad_of(pg);
        double* gb = detail::grad_of(pb);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * n;
          const double* xh = normalized.data() + r * n;
          if (gg || gb) {
            for (std::size_t j = 0; j < n; ++j) {
              if (gg) gg[j] += dy[j] * xh[j];
              if (gb) gb[j] += dy[j];
            }
          }
          if (!gx) continue;
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double d = dy[j] * pg.data[j];
            mean_d += d;
            mean_dx += d * xh[j];
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const double d = dy[j] * pg.data[j];
            gx[r * n + j] += inv_std[r] * (d - mean_d - xh[j] * mean_dx);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention
// ---------------------------------------------------------------------------

// q, k, v: [batch*seq x D] with rows batch-major. key_mask has batch*seq
// entries, nonzero for real tokens; masked keys receive exactly zero weight.
// Heads split D into contiguous column slices.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::uint8_t> key_mask,
                        std::size_t batch, std::size_t seq, std::size_t heads) {
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  detail::require_matrix(q, "attention");
  const std::size_t d = q.cols();
  if (q.rows() != batch * seq) throw DimensionError("attention: rows != batch*seq");
  if (key_mask.size() != batch * seq) throw DimensionError("attention: mask size != batch*seq");
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by heads");
  const std::size_t hd = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> probs(batch * heads * seq * seq, 0.0);
  std::vector<double> out(batch * seq * d, 0.0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* mask = key_mask.data() + b * seq;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = qd + (b * seq + i) * d + off;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < seq; ++j) {
          if (!mask[j]) continue;
          const double* kj = kd + (b * seq + j) * d + off;
          double s = 0.0;
          for (std::size_t t = 0; t < hd; ++t) s += qi[t] * kj[t];
          scores[j] = s * inv_scale;
          mx = std::max(mx, scores[j]);
        }
        double* p = probs.data() + ((b * heads + h) * seq + i) * seq;
        if (mx == -INFINITY) continue;  // no visible key: output stays zero
        double z = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          if (mask[j]) z += (p[j] = std::exp(scores[j] - mx));
        }
        double* oi = out.data() + (b * seq + i) * d + off;
        for (std::size_t j = 0; j < seq; ++j) {
          if (!mask[j]) continue;
          p[j] /= z;
          const double* vj = vd + (b * seq + j) * d + off;
          for (std::size_t t = 0; t < hd; ++t) oi[t] += p[j] * vj[t];
        }
      }
    }
  }
  return detail::make_result(
      q.shape(), std::move(out), {q, k, v},
      [probs = std::move(probs), batch, seq, heads, hd, d, inv_scale](Node& self) {
        Node& pq = *self.parents[0];
        Node& pk = *self.parents[1];
        Node& pv = *self.parents[2];
        double* gq = detail::grad_of(pq);
        double* gk = detail::grad_of(pk);
        double* gv = detail::grad_of(pv);
        std::vector<double> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* p = probs.data() + ((b * heads + h) * seq + i) * seq;
              const double* dout = self.grad.data() + (b * seq + i) * d + off;
              double dot = 0.0;
              for (std::size_t j = 0; j < seq; ++j) {
                if (p[j] == 0.0) {
                  dp[j] = 0.0;
                  continue;
                }
                const double* vj = pv.data.data() + (b * seq + j) * d + off;
                double s = 0.0;
                for (std::size_t t = 0; t < hd; ++t) s += dout[t] * vj[t];
                dp[j] = s;
                dot += s * p[j];
                if (gv) {
                  double* gvj = gv + (b * seq + j) * d + off;
                  for (std::size_t t = 0; t < hd; ++t) gvj[t] += p[j] * dout[t];
                }
              }
              const double* qi = pq.data.data() + (b * seq + i) * d + off;
              for (std::size_t j = 0; j < seq; ++j) {
                if (p[j] == 0.0) continue;
                const double ds = p[j] * (dp[j] - dot) * inv_scale;
                const double* kj = pk.data.data() + (b * seq + j) * d + off;
                if (gq) {
                  double* gqi = gq + (b * seq + i) * d + off;
                  for (std::size_t t = 0; t < hd; ++t) gqi[t] += ds * kj[t];
                }
                if (gk) {
                  double* gkj = gk + (b * seq + j) * d + off;
                  for (std::size_t t = 0; t < hd; ++t) gkj[t] += ds * qi[t];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Tape and backward
// ---------------------------------------------------------------------------

// Topologically ordered record of the differentiable nodes reachable from a
// scalar loss. Every node appears after all of its inputs.
class Tape {
 public:
  static Tape record(const Tensor& loss) {
    Tape tape;
    std::unordered_set<const Node*> visited;
    // Iterative post-order DFS; graphs from deep models overflow recursion.
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* parent = node->parents[next++].get();
        if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const { return order_.size(); }
  std::span<Node* const> nodes() const { return order_; }

  // Seeds d(loss)/d(loss) = 1 and replays local rules in reverse order.
  // Leaf gradients accumulate across calls; interior gradients are reset.
  void run_backward() {
    for (Node* node : order_) {
      if (!node->is_leaf()) node->grad.assign(node->data.size(), 0.0);
    }
    Node* root = order_.back();
    if (root->grad.empty()) root->grad.assign(1, 0.0);
    root->grad[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
    }
  }

 private:
  std::vector<Node*> order_;
};

inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined tensor");
  if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any differentiable tensor");
  Tape::record(loss).run_backward();
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check
// ---------------------------------------------------------------------------

// Gradients below the floor are compared absolutely. Central differences at
// h = 1e-5 over O(1) intermediates carry roughly 1e-11 of rounding noise, so a
// structurally zero gradient cannot be resolved more finely than that.
inline constexpr double kGradientErrorFloor = 1e-6;

inline double relative_gradient_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradientErrorFloor});
  return std::abs(analytic - numeric) / denom;
}

// Max elementwise relative error between the tape gradient of the scalar f at
// x and central differences with step h.
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ConfigError("finite_diff_check: h must lie in [1e-7, 1e-3]");
  Tensor leaf(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  backward(f(leaf));
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  NoGradGuard no_grad;
  std::vector<double> probe(x.data().begin(), x.data().end());
  double worst = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(Tensor(x.shape(), probe)).item();
    probe[i] = orig - h;
    const double down = f(Tensor(x.shape(), probe)).item();
    probe[i] = orig;
    worst = std::max(worst, relative_gradient_error(analytic[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

// Same check over a set of leaf tensors (e.g. model parameters) that f closes
// over. Perturbs leaves in place and restores them. When max_per_tensor is
// nonzero only that many evenly strided entries of each tensor are probed.
inline double finite_diff_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params, double h,
                                       std::size_t max_per_tensor = 0) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ConfigError("finite_diff_check: h must lie in [1e-7, 1e-3]");
  for (auto& p : params) p.zero_grad();
  backward(f());
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    analytic.emplace_back(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.back().begin());
  }
  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].mutable_data();
    const std::size_t n = values.size();
    const std::size_t stride = (max_per_tensor == 0 || n <= max_per_tensor) ? 1 : n / max_per_tensor;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = f().item();
      values[i] = orig - h;
      const double down = f().item();
      values[i] = orig;
      worst = std::max(worst, relative_gradient_error(analytic[t][i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

}  // namespace kdwb
