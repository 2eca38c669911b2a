#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "vecmap/rng.hpp"

namespace vecmap {

using EigenRowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense fp64 tensor participating in reverse-mode differentiation. Tensors are
// immutable once created; the autodiff graph is the DAG of parent links.
// Single-threaded graph construction/backward per training step.
class Tensor;

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> values;
  std::vector<double> grad;  // sized iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;  // reads grad, accumulates into parents
  int backward_runs = 0;  // instrumentation: backward visits each node exactly once
};

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor shape extents must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    return make(std::move(shape), 0.0, requires_grad);
  }
  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false) {
    return make(std::move(shape), v, requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return make({}, v, requires_grad);
  }
  static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw std::invalid_argument("from_values: shape does not match value count");
    Tensor t;
    t.n_ = std::make_shared<TensorNode>();
    t.n_->shape = std::move(shape);
    t.n_->values = std::move(values);
    t.n_->requires_grad = requires_grad;
    if (requires_grad) t.n_->grad.assign(t.n_->values.size(), 0.0);
    return t;
  }
  static Tensor uniform(std::vector<int> shape, double lo, double hi, SplitMix64& rng,
                        bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return from_values(std::move(shape), std::move(v), requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const std::vector<int>& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  std::size_t numel() const { return n_->values.size(); }
  const std::vector<double>& values() const { return n_->values; }
  std::vector<double>& mutable_values() { return n_->values; }  // leaves only, between steps
  bool requires_grad() const { return n_->requires_grad; }
  const std::vector<double>& grad() const { return n_->grad; }
  std::shared_ptr<TensorNode> node() const { return n_; }

  double item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor is not a scalar");
    return n_->values[0];
  }

  void zero_grad() {
    if (n_->requires_grad) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
  }

  // Reverse-mode sweep from a scalar root. Visits each reachable node exactly
  // once, in reverse topological order.
  void backward() const {
    if (numel() != 1) throw std::invalid_argument("backward(): root must be scalar");
    if (!n_->requires_grad) throw std::invalid_argument("backward(): root does not require grad");
    std::vector<TensorNode*> order;
    topo_sort(order);
    std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
    n_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode* node = *it;
      if (node->backward_fn) {
        node->backward_fn(*node);
        node->backward_runs++;
      }
    }
  }

  // internal: op construction helper
  static Tensor op_output(std::vector<int> shape, std::vector<double> values,
                          std::vector<Tensor> parents,
                          std::function<void(TensorNode&)> backward_fn) {
    bool rg = false;
    for (const Tensor& p : parents) rg = rg || p.requires_grad();
    Tensor out = from_values(std::move(shape), std::move(values), rg);
    if (rg) {
      out.n_->parents.reserve(parents.size());
      for (const Tensor& p : parents) out.n_->parents.push_back(p.n_);
      out.n_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

 private:
  static Tensor make(std::vector<int> shape, double fill, bool requires_grad) {
    std::vector<double> v(shape_numel(shape), fill);
    return from_values(std::move(shape), std::move(v), requires_grad);
  }

  void topo_sort(std::vector<TensorNode*>& order) const {
    // iterative DFS post-order
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    visited.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next_child] = stack.back();
      if (next_child < node->parents.size()) {
        TensorNode* child = node->parents[next_child].get();
        ++next_child;
        if (child->requires_grad && !visited.count(child)) {
          visited.insert(child);
          stack.emplace_back(child, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorNode> n_;
};

namespace detail {

inline void accumulate_grad(TensorNode& node, std::size_t idx, double g) {
  if (node.requires_grad) node.grad[idx] += g;
}

inline std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  std::vector<int> out(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int da = i < r - ra ? 1 : a[static_cast<std::size_t>(i - (r - ra))];
    const int db = i < r - rb ? 1 : b[static_cast<std::size_t>(i - (r - rb))];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("shapes are not broadcast-compatible");
    out[static_cast<std::size_t>(i)] = std::max(da, db);
  }
  return out;
}

// strides into `shape` when iterating an `out`-shaped index space; broadcast
// dims get stride 0
inline std::vector<std::size_t> broadcast_strides(const std::vector<int>& shape,
                                                  const std::vector<int>& out) {
  const int r = static_cast<int>(out.size());
  const int ra = static_cast<int>(shape.size());
  std::vector<std::size_t> strides(static_cast<std::size_t>(r), 0);
  std::size_t run = 1;
  for (int i = ra - 1; i >= 0; --i) {
    const int oi = i + (r - ra);
    strides[static_cast<std::size_t>(oi)] = (shape[static_cast<std::size_t>(i)] == 1 &&
                                             out[static_cast<std::size_t>(oi)] != 1)
                                                ? 0
                                                : run;
    run *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
  }
  return strides;
}

// Walks an out-shaped index space yielding the linear offsets of two
// broadcast operands via an odometer (no div/mod per element).
template <class Fn>
inline void for_each_broadcast(const std::vector<int>& out_shape,
                               const std::vector<std::size_t>& sa,
                               const std::vector<std::size_t>& sb, Fn&& fn) {
  const int r = static_cast<int>(out_shape.size());
  std::size_t total = 1;
  for (int d : out_shape) total *= static_cast<std::size_t>(d);
  if (r == 0) {
    if (total) fn(0, 0, 0);
    return;
  }
  std::vector<int> coord(static_cast<std::size_t>(r), 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t lin = 0; lin < total; ++lin) {
    fn(lin, ia, ib);
    for (int d = r - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      ++coord[du];
      ia += sa[du];
      ib += sb[du];
      if (coord[du] < out_shape[du]) break;
      ia -= sa[du] * static_cast<std::size_t>(out_shape[du]);
      ib -= sb[du] * static_cast<std::size_t>(out_shape[du]);
      coord[du] = 0;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (numpy-style broadcasting)
// ---------------------------------------------------------------------------

namespace detail {

// fwd(a,b) -> out; dfa/dfb give local partials evaluated at (a,b)
template <class F, class DA, class DB>
inline Tensor binary_op(const Tensor& a, const Tensor& b, F fwd, DA dfa, DB dfb) {
  if (a.shape() == b.shape()) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
    return Tensor::op_output(
        a.shape(), std::move(out), {a, b},
        [a, b, dfa, dfb](TensorNode& self) {
          const auto& av = a.values();
          const auto& bv = b.values();
          TensorNode& na = *self.parents[0];
          TensorNode& nb = *self.parents[1];
          const std::size_t n = self.values.size();
          for (std::size_t i = 0; i < n; ++i) {
            const double g = self.grad[i];
            if (na.requires_grad) na.grad[i] += g * dfa(av[i], bv[i]);
            if (nb.requires_grad) nb.grad[i] += g * dfb(av[i], bv[i]);
          }
        });
  }
  auto out_shape = broadcast_shape(a.shape(), b.shape());
  auto sa = broadcast_strides(a.shape(), out_shape);
  auto sb = broadcast_strides(b.shape(), out_shape);
  std::vector<double> out(shape_numel(out_shape));
  const auto& av = a.values();
  const auto& bv = b.values();
  for_each_broadcast(out_shape, sa, sb, [&](std::size_t lin, std::size_t ia, std::size_t ib) {
    out[lin] = fwd(av[ia], bv[ib]);
  });
  return Tensor::op_output(
      out_shape, std::move(out), {a, b},
      [a, b, out_shape, sa, sb, dfa, dfb](TensorNode& self) {
        const auto& av = a.values();
        const auto& bv = b.values();
        TensorNode& na = *self.parents[0];
        TensorNode& nb = *self.parents[1];
        for_each_broadcast(out_shape, sa, sb,
                           [&](std::size_t lin, std::size_t ia, std::size_t ib) {
                             const double g = self.grad[lin];
                             if (na.requires_grad) na.grad[ia] += g * dfa(av[ia], bv[ib]);
                             if (nb.requires_grad) nb.grad[ib] += g * dfb(av[ia], bv[ib]);
                           });
      });
}

template <class F, class DF>
inline Tensor unary_op(const Tensor& a, F fwd, DF dfd) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  return Tensor::op_output(a.shape(), std::move(out), {a},
                           [a, dfd](TensorNode& self) {
                             TensorNode& na = *self.parents[0];
                             if (!na.requires_grad) return;
                             const auto& av = a.values();
                             const auto& ov = self.values;
                             const std::size_t n = ov.size();
                             for (std::size_t i = 0; i < n; ++i)
                               na.grad[i] += self.grad[i] * dfd(av[i], ov[i]);
                           });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

inline Tensor neg(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
inline Tensor operator-(const Tensor& a) { return neg(a); }

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::exp(x); },
                          [](double, double y) { return y; });
}

// input must be strictly positive; probability-like inputs are clamped by the
// caller (losses clamp to [1e-7, 1-1e-7])
inline Tensor log(const Tensor& a) {
  for (double v : a.values())
    if (!(v > 0.0)) throw std::invalid_argument("log: input must be strictly positive");
  return detail::unary_op(a, [](double x) { return std::log(x); },
                          [](double x, double) { return 1.0 / x; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a,
      [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                          [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor abs(const Tensor& a) {
  return detail::unary_op(a, [](double x) { return std::abs(x); },
                          [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor pow_const(const Tensor& a, double e) {
  return detail::unary_op(a, [e](double x) { return std::pow(x, e); },
                          [e](double x, double) { return e * std::pow(x, e - 1.0); });
}

// gradient passes only through the interior of [lo, hi]
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary_op(a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
                          [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Tensor stop_gradient(const Tensor& a) {
  return Tensor::from_values(a.shape(), a.values(), false);
}

// ---------------------------------------------------------------------------
// matmul / transpose (Eigen-backed)
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul: rank-2 tensors required");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) throw std::invalid_argument("matmul: inner extents do not match");
  std::vector<double> out(static_cast<std::size_t>(m) * static_cast<std::size_t>(n));
  {
    Eigen::Map<const EigenRowMat> ma(a.values().data(), m, k);
    Eigen::Map<const EigenRowMat> mb(b.values().data(), k, n);
    Eigen::Map<EigenRowMat> mo(out.data(), m, n);
    mo.noalias() = ma * mb;
  }
  return Tensor::op_output(
      {m, n}, std::move(out), {a, b},
      [a, b, m, k, n](TensorNode& self) {
        Eigen::Map<const EigenRowMat> g(self.grad.data(), m, n);
        TensorNode& na = *self.parents[0];
        TensorNode& nb = *self.parents[1];
        if (na.requires_grad) {
          Eigen::Map<const EigenRowMat> mb(b.values().data(), k, n);
          Eigen::Map<EigenRowMat> ga(na.grad.data(), m, k);
          ga.noalias() += g * mb.transpose();
        }
        if (nb.requires_grad) {
          Eigen::Map<const EigenRowMat> ma(a.values().data(), m, k);
          Eigen::Map<EigenRowMat> gb(nb.grad.data(), k, n);
          gb.noalias() += ma.transpose() * g;
        }
      });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: rank-2 tensor required");
  const int m = a.dim(0), n = a.dim(1);
  std::vector<double> out(a.numel());
  Eigen::Map<const EigenRowMat> ma(a.values().data(), m, n);
  Eigen::Map<EigenRowMat> mo(out.data(), n, m);
  mo = ma.transpose();
  return Tensor::op_output({n, m}, std::move(out), {a},
                           [m, n](TensorNode& self) {
                             TensorNode& na = *self.parents[0];
                             if (!na.requires_grad) return;
                             Eigen::Map<const EigenRowMat> g(self.grad.data(), n, m);
                             Eigen::Map<EigenRowMat> ga(na.grad.data(), m, n);
                             ga += g.transpose();
                           });
}

// ---------------------------------------------------------------------------
// reductions, softmax
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return Tensor::op_output({}, {s}, {a}, [](TensorNode& self) {
    TensorNode& na = *self.parents[0];
    if (!na.requires_grad) return;
    const double g = self.grad[0];
    for (double& gv : na.grad) gv += g;
  });
}

inline Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  double s = 0.0;
  for (double v : a.values()) s += v;
  return Tensor::op_output({}, {s * inv}, {a}, [inv](TensorNode& self) {
    TensorNode& na = *self.parents[0];
    if (!na.requires_grad) return;
    const double g = self.grad[0] * inv;
    for (double& gv : na.grad) gv += g;
  });
}

namespace detail {
// decompose shape around `axis` into [outer, extent, inner]
inline void axis_split(const std::vector<int>& shape, int axis, std::size_t& outer,
                       std::size_t& extent, std::size_t& inner) {
  outer = 1;
  inner = 1;
  const int r = static_cast<int>(shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("axis out of range");
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
  extent = static_cast<std::size_t>(shape[static_cast<std::size_t>(axis)]);
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
}

inline int normalize_axis(const std::vector<int>& shape, int axis) {
  const int r = static_cast<int>(shape.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw std::invalid_argument("axis out of range");
  return axis;
}
}  // namespace detail

inline Tensor sum_axis(const Tensor& a, int axis, bool keepdims = false) {
  std::size_t outer, extent, inner;
  detail::axis_split(a.shape(), axis, outer, extent, inner);
  const int ax = detail::normalize_axis(a.shape(), axis);
  std::vector<int> out_shape = a.shape();
  if (keepdims)
    out_shape[static_cast<std::size_t>(ax)] = 1;
  else
    out_shape.erase(out_shape.begin() + ax);
  std::vector<double> out(outer * inner, 0.0);
  const auto& av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e) {
      const std::size_t base = (o * extent + e) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[base + i];
    }
  return Tensor::op_output(std::move(out_shape), std::move(out), {a},
                           [outer, extent, inner](TensorNode& self) {
                             TensorNode& na = *self.parents[0];
                             if (!na.requires_grad) return;
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t e = 0; e < extent; ++e) {
                                 const std::size_t base = (o * extent + e) * inner;
                                 for (std::size_t i = 0; i < inner; ++i)
                                   na.grad[base + i] += self.grad[o * inner + i];
                               }
                           });
}

inline Tensor mean_axis(const Tensor& a, int axis, bool keepdims = false) {
  std::size_t outer, extent, inner;
  detail::axis_split(a.shape(), axis, outer, extent, inner);
  return sum_axis(a, axis, keepdims) * (1.0 / static_cast<double>(extent));
}

// numerically stable (max-subtracted); rows along `axis` sum to 1
inline Tensor softmax(const Tensor& a, int axis) {
  std::size_t outer, extent, inner;
  detail::axis_split(a.shape(), axis, outer, extent, inner);
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < extent; ++e)
        mx = std::max(mx, av[(o * extent + e) * inner + i]);
      double z = 0.0;
      for (std::size_t e = 0; e < extent; ++e) {
        const std::size_t idx = (o * extent + e) * inner + i;
        out[idx] = std::exp(av[idx] - mx);
        z += out[idx];
      }
      const double invz = 1.0 / z;
      for (std::size_t e = 0; e < extent; ++e) out[(o * extent + e) * inner + i] *= invz;
    }
  return Tensor::op_output(
      a.shape(), std::move(out), {a},
      [outer, extent, inner](TensorNode& self) {
        TensorNode& na = *self.parents[0];
        if (!na.requires_grad) return;
        const auto& y = self.values;
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < inner; ++i) {
            double dot = 0.0;
            for (std::size_t e = 0; e < extent; ++e) {
              const std::size_t idx = (o * extent + e) * inner + i;
              dot += self.grad[idx] * y[idx];
            }
            for (std::size_t e = 0; e < extent; ++e) {
              const std::size_t idx = (o * extent + e) * inner + i;
              na.grad[idx] += y[idx] * (self.grad[idx] - dot);
            }
          }
      });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
  if (shape_numel(new_shape) != a.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  return Tensor::op_output(std::move(new_shape), a.values(), {a}, [](TensorNode& self) {
    TensorNode& na = *self.parents[0];
    if (!na.requires_grad) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) na.grad[i] += self.grad[i];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int ax = detail::normalize_axis(parts[0].shape(), axis);
  std::vector<int> out_shape = parts[0].shape();
  std::size_t outer, extent0, inner;
  detail::axis_split(parts[0].shape(), ax, outer, extent0, inner);
  std::size_t total_extent = 0;
  std::vector<std::size_t> extents;
  for (const Tensor& p : parts) {
    if (p.rank() != parts[0].rank()) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < p.rank(); ++i)
      if (i != ax && p.dim(i) != out_shape[static_cast<std::size_t>(i)])
        throw std::invalid_argument("concat: non-axis extents must match");
    extents.push_back(static_cast<std::size_t>(p.dim(ax)));
    total_extent += extents.back();
  }
  out_shape[static_cast<std::size_t>(ax)] = static_cast<int>(total_extent);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& v = parts[pi].values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(v.begin() + static_cast<std::ptrdiff_t>(o * extents[pi] * inner),
                v.begin() + static_cast<std::ptrdiff_t>((o + 1) * extents[pi] * inner),
                out.begin() + static_cast<std::ptrdiff_t>((o * total_extent + offset) * inner));
    offset += extents[pi];
  }
  return Tensor::op_output(
      std::move(out_shape), std::move(out), parts,
      [outer, inner, extents, total_extent](TensorNode& self) {
        std::size_t offset = 0;
        for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
          TensorNode& np = *self.parents[pi];
          if (np.requires_grad) {
            for (std::size_t o = 0; o < outer; ++o) {
              const std::size_t src = (o * total_extent + offset) * inner;
              const std::size_t dst = o * extents[pi] * inner;
              for (std::size_t i = 0; i < extents[pi] * inner; ++i)
                np.grad[dst + i] += self.grad[src + i];
            }
          }
          offset += extents[pi];
        }
      });
}

inline std::vector<Tensor> split(const Tensor& a, int axis, const std::vector<int>& sizes) {
  const int ax = detail::normalize_axis(a.shape(), axis);
  std::size_t outer, extent, inner;
  detail::axis_split(a.shape(), ax, outer, extent, inner);
  std::size_t total = 0;
  for (int s : sizes) total += static_cast<std::size_t>(s);
  if (total != extent) throw std::invalid_argument("split: sizes must sum to axis extent");
  std::vector<Tensor> outs;
  std::size_t offset = 0;
  for (int s : sizes) {
    const auto su = static_cast<std::size_t>(s);
    std::vector<int> out_shape = a.shape();
    out_shape[static_cast<std::size_t>(ax)] = s;
    std::vector<double> out(outer * su * inner);
    const auto& v = a.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(v.begin() + static_cast<std::ptrdiff_t>((o * extent + offset) * inner),
                v.begin() + static_cast<std::ptrdiff_t>((o * extent + offset + su) * inner),
                out.begin() + static_cast<std::ptrdiff_t>(o * su * inner));
    const std::size_t off_here = offset;
    outs.push_back(Tensor::op_output(
        std::move(out_shape), std::move(out), {a},
        [outer, extent, inner, su, off_here](TensorNode& self) {
          TensorNode& na = *self.parents[0];
          if (!na.requires_grad) return;
          for (std::size_t o = 0; o < outer; ++o) {
            const std::size_t dst = (o * extent + off_here) * inner;
            const std::size_t src = o * su * inner;
            for (std::size_t i = 0; i < su * inner; ++i) na.grad[dst + i] += self.grad[src + i];
          }
        }));
    offset += su;
  }
  return outs;
}

// out[r, ...] = a[indices[r], ...]; backward scatter-adds
inline Tensor gather_rows(const Tensor& a, const std::vector<int>& indices) {
  if (a.rank() < 1) throw std::invalid_argument("gather_rows: rank >= 1 required");
  const int rows = a.dim(0);
  const std::size_t row_size = a.numel() / static_cast<std::size_t>(rows);
  for (int idx : indices)
    if (idx < 0 || idx >= rows) throw std::invalid_argument("gather_rows: index out of range");
  std::vector<int> out_shape = a.shape();
  out_shape[0] = static_cast<int>(indices.size());
  std::vector<double> out(indices.size() * row_size);
  const auto& v = a.values();
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(indices[r]) * row_size),
              v.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(indices[r]) + 1) * row_size),
              out.begin() + static_cast<std::ptrdiff_t>(r * row_size));
  return Tensor::op_output(std::move(out_shape), std::move(out), {a},
                           [indices, row_size](TensorNode& self) {
                             TensorNode& na = *self.parents[0];
                             if (!na.requires_grad) return;
                             for (std::size_t r = 0; r < indices.size(); ++r) {
                               const std::size_t dst = static_cast<std::size_t>(indices[r]) * row_size;
                               const std::size_t src = r * row_size;
                               for (std::size_t i = 0; i < row_size; ++i)
                                 na.grad[dst + i] += self.grad[src + i];
                             }
                           });
}

// ---------------------------------------------------------------------------
// bilinear sampling over a C x H x W feature map
// ---------------------------------------------------------------------------

// coords are (x, y) in continuous grid space; out-of-range contributions use
// zero padding. Differentiable w.r.t. both feat and coords.
inline Tensor bilinear_sample(const Tensor& feat, const Tensor& coords) {
  if (feat.rank() != 3) throw std::invalid_argument("bilinear_sample: feat must be C x H x W");
  if (coords.rank() != 2 || coords.dim(1) != 2)
    throw std::invalid_argument("bilinear_sample: coords must be P x 2");
  const int C = feat.dim(0), H = feat.dim(1), W = feat.dim(2);
  const int P = coords.dim(0);
  const auto& fv = feat.values();
  const auto& cv = coords.values();
  auto in_range = [&](int xi, int yi) { return xi >= 0 && xi < W && yi >= 0 && yi < H; };
  auto at = [&](int c, int yi, int xi) {
    return fv[(static_cast<std::size_t>(c) * H + static_cast<std::size_t>(yi)) * W +
              static_cast<std::size_t>(xi)];
  };
  std::vector<double> out(static_cast<std::size_t>(P) * static_cast<std::size_t>(C), 0.0);
  for (int p = 0; p < P; ++p) {
    const double x = cv[2 * static_cast<std::size_t>(p)];
    const double y = cv[2 * static_cast<std::size_t>(p) + 1];
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    const double wx = x - x0, wy = y - y0;
    for (int c = 0; c < C; ++c) {
      double v = 0.0;
      if (in_range(x0, y0)) v += (1 - wx) * (1 - wy) * at(c, y0, x0);
      if (in_range(x0 + 1, y0)) v += wx * (1 - wy) * at(c, y0, x0 + 1);
      if (in_range(x0, y0 + 1)) v += (1 - wx) * wy * at(c, y0 + 1, x0);
      if (in_range(x0 + 1, y0 + 1)) v += wx * wy * at(c, y0 + 1, x0 + 1);
      out[static_cast<std::size_t>(p) * C + static_cast<std::size_t>(c)] = v;
    }
  }
  return Tensor::op_output(
      {P, C}, std::move(out), {feat, coords},
      [feat, coords, C, H, W, P](TensorNode& self) {
        TensorNode& nf = *self.parents[0];
        TensorNode& nc = *self.parents[1];
        const auto& fv = feat.values();
        const auto& cv = coords.values();
        auto in_range = [&](int xi, int yi) { return xi >= 0 && xi < W && yi >= 0 && yi < H; };
        auto fidx = [&](int c, int yi, int xi) {
          return (static_cast<std::size_t>(c) * H + static_cast<std::size_t>(yi)) * W +
                 static_cast<std::size_t>(xi);
        };
        for (int p = 0; p < P; ++p) {
          const double x = cv[2 * static_cast<std::size_t>(p)];
          const double y = cv[2 * static_cast<std::size_t>(p) + 1];
          const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
          const double wx = x - x0, wy = y - y0;
          double gx = 0.0, gy = 0.0;
          for (int c = 0; c < C; ++c) {
            const double g = self.grad[static_cast<std::size_t>(p) * C + static_cast<std::size_t>(c)];
            if (g == 0.0 && !nc.requires_grad) continue;
            const double f00 = in_range(x0, y0) ? fv[fidx(c, y0, x0)] : 0.0;
            const double f10 = in_range(x0 + 1, y0) ? fv[fidx(c, y0, x0 + 1)] : 0.0;
            const double f01 = in_range(x0, y0 + 1) ? fv[fidx(c, y0 + 1, x0)] : 0.0;
            const double f11 = in_range(x0 + 1, y0 + 1) ? fv[fidx(c, y0 + 1, x0 + 1)] : 0.0;
            if (nf.requires_grad) {
              if (in_range(x0, y0)) nf.grad[fidx(c, y0, x0)] += g * (1 - wx) * (1 - wy);
              if (in_range(x0 + 1, y0)) nf.grad[fidx(c, y0, x0 + 1)] += g * wx * (1 - wy);
              if (in_range(x0, y0 + 1)) nf.grad[fidx(c, y0 + 1, x0)] += g * (1 - wx) * wy;
              if (in_range(x0 + 1, y0 + 1)) nf.grad[fidx(c, y0 + 1, x0 + 1)] += g * wx * wy;
            }
            gx += g * ((f10 - f00) * (1 - wy) + (f11 - f01) * wy);
            gy += g * ((f01 - f00) * (1 - wx) + (f11 - f10) * wx);
          }
          if (nc.requires_grad) {
            nc.grad[2 * static_cast<std::size_t>(p)] += gx;
            nc.grad[2 * static_cast<std::size_t>(p) + 1] += gy;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// finite-difference gradient checker
// ---------------------------------------------------------------------------

struct GradCheckResult {
  double max_rel_err = 0.0;
  bool finite = true;
};

// Compares reverse-mode gradients against central differences (fp64). The
// callable must be a deterministic pure function of the input values; it is
// re-invoked for every probe.
inline GradCheckResult grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
    double h = 1e-5) {
  GradCheckResult res;
  for (Tensor& t : inputs) t.zero_grad();
  Tensor out = f(inputs);
  if (out.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
  out.backward();
  std::vector<std::vector<double>> ad_grads;
  for (const Tensor& t : inputs) ad_grads.push_back(t.grad());
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& vals = inputs[ti].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = f(inputs).item();
      vals[i] = orig - h;
      const double fm = f(inputs).item();
      vals[i] = orig;
      const double g_fd = (fp - fm) / (2.0 * h);
      const double g_ad = ad_grads[ti][i];
      if (!std::isfinite(g_ad) || !std::isfinite(g_fd)) {
        res.finite = false;
        res.max_rel_err = std::numeric_limits<double>::infinity();
        return res;
      }
      const double rel = std::abs(g_ad - g_fd) / std::max(1e-8, std::abs(g_ad) + std::abs(g_fd));
      res.max_rel_err = std::max(res.max_rel_err, rel);
    }
  }
  return res;
}

}  // namespace vecmap
