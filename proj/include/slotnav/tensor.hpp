#pragma once

// Reverse-mode automatic differentiation over dense row-major arrays.
// Every operation builds a graph node holding the forward value and a
// closure that scatters the node's gradient into its parents. Gradients
// are accumulated by walking the graph in reverse topological order.
//
// Ranks in use: 0 (scalar), 1 (vector), 2 (matrix). No general
// broadcasting; the few broadcast cases the model needs (bias rows,
// scalar scaling) are dedicated operations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "slotnav/rng.hpp"

namespace slotnav {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

[[noreturn]] inline void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily by backward()
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

// raw matrix kernels (row-major)
inline void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,k] += or = a[m,n] * b[k,n]^T
inline void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                  std::size_t k, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += ai[j] * bp[j];
      if (accumulate)
        ci[p] += acc;
      else
        ci[p] = acc;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
inline void mm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                      std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace detail

/// Disables graph construction within a scope; forward values still flow.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> data) {
    auto n = std::make_shared<detail::Node>();
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("Tensor: data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return constant(std::move(shape), std::move(d));
  }

  static Tensor full(Shape shape, double v) {
    std::vector<double> d(shape_numel(shape), v);
    return constant(std::move(shape), std::move(d));
  }

  static Tensor scalar(double v) { return constant(Shape{}, {v}); }

  /// Trainable leaf.
  static Tensor param(Shape shape, std::vector<double> data) {
    Tensor t = constant(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }

  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& value() { return node_->value; }
  std::vector<double>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }

  double item() const {
    if (node_->value.size() != 1)
      throw std::invalid_argument("item: tensor has " + std::to_string(node_->value.size()) +
                                  " elements");
    return node_->value[0];
  }

  double at(std::size_t i) const { return node_->value[i]; }
  double at(std::size_t i, std::size_t j) const { return node_->value[i * node_->shape[1] + j]; }

  /// Constant copy sharing no graph history (gradient barrier).
  Tensor detach() const { return constant(node_->shape, node_->value); }

  detail::NodePtr node() const { return node_; }

  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

 private:
  detail::NodePtr node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                      std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (grad_mode()) {
    bool any = false;
    for (const auto& p : parents)
      if (p->requires_grad) any = true;
    if (any) {
      n->requires_grad = true;
      n->parents = std::move(parents);
      n->backward = std::move(backward);
    }
  }
  return Tensor(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
  return detail::make_op(a.shape(), std::move(v), {a.node(), b.node()}, [](detail::Node& self) {
    for (int p = 0; p < 2; ++p) {
      auto& par = *self.parents[p];
      if (!par.requires_grad) continue;
      par.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) par.grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("sub", a.shape(), b.shape());
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] - b.value()[i];
  return detail::make_op(a.shape(), std::move(v), {a.node(), b.node()}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
  return detail::make_op(a.shape(), std::move(v), {a.node(), b.node()}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * s;
  return detail::make_op(a.shape(), std::move(v), {a.node()}, [s](detail::Node& self) {
    auto& pa = *self.parents[0];
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * s;
  });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + s;
  return detail::make_op(a.shape(), std::move(v), {a.node()}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
  });
}

/// Scalar tensor times arbitrary tensor.
inline Tensor scale_by(const Tensor& s, const Tensor& a) {
  if (s.numel() != 1) throw std::invalid_argument("scale_by: scale must be a scalar tensor");
  const double sv = s.value()[0];
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * sv;
  return detail::make_op(a.shape(), std::move(v), {s.node(), a.node()}, [](detail::Node& self) {
    auto& ps = *self.parents[0];
    auto& pa = *self.parents[1];
    if (ps.requires_grad) {
      ps.ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * pa.value[i];
      ps.grad[0] += acc;
    }
    if (pa.requires_grad) {
      pa.ensure_grad();
      const double sv2 = ps.value[0];
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * sv2;
    }
  });
}

namespace detail {
template <typename F, typename G>
Tensor unary_op(const Tensor& a, F f, G dfdx_from_y) {
  std::vector<double> v(a.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(a.value()[i]);
  return make_op(a.shape(), std::move(v), {a.node()}, [dfdx_from_y](Node& self) {
    auto& pa = *self.parents[0];
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      pa.grad[i] += self.grad[i] * dfdx_from_y(self.value[i], pa.value[i]);
  });
}
}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double y, double) { return y * (1.0 - y); });
}

inline Tensor tanh_op(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::tanh(x); }, [](double y, double) { return 1.0 - y * y; });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double, double x) { return x > 0.0 ? 1.0 : 0.0; });
}

/// max(x, lo); gradient passes only through unclamped entries.
inline Tensor clamp_min(const Tensor& a, double lo) {
  return detail::unary_op(
      a, [lo](double x) { return x < lo ? lo : x; },
      [lo](double, double x) { return x < lo ? 0.0 : 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// reductions / indexing
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.value()) acc += x;
  return detail::make_op(Shape{}, {acc}, {a.node()}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    pa.ensure_grad();
    for (std::size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += self.grad[0];
  });
}

/// vector[i] -> scalar
inline Tensor pick(const Tensor& a, std::size_t i) {
  if (a.rank() != 1) throw std::invalid_argument("pick: expects a vector, got " + shape_str(a.shape()));
  if (i >= a.numel()) throw std::invalid_argument("pick: index out of range");
  return detail::make_op(Shape{}, {a.value()[i]}, {a.node()}, [i](detail::Node& self) {
    auto& pa = *self.parents[0];
    pa.ensure_grad();
    pa.grad[i] += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// structure: rows, columns, concatenation, reshape
// ---------------------------------------------------------------------------

inline Tensor row(const Tensor& a, std::size_t i) {
  if (a.rank() != 2) throw std::invalid_argument("row: expects a matrix, got " + shape_str(a.shape()));
  const std::size_t c = a.dim(1);
  if (i >= a.dim(0)) throw std::invalid_argument("row: index out of range");
  std::vector<double> v(a.value().begin() + i * c, a.value().begin() + (i + 1) * c);
  return detail::make_op(Shape{c}, std::move(v), {a.node()}, [i, c](detail::Node& self) {
    auto& pa = *self.parents[0];
    pa.ensure_grad();
    for (std::size_t j = 0; j < c; ++j) pa.grad[i * c + j] += self.grad[j];
  });
}

/// vector {d} viewed as a 1 x d matrix
inline Tensor as_row(const Tensor& a) {
  if (a.rank() != 1) throw std::invalid_argument("as_row: expects a vector");
  const std::size_t d = a.numel();
  return detail::make_op(Shape{1, d}, a.value(), {a.node()}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
  });
}

inline Tensor as_vector(const Tensor& a) {
  const std::size_t d = a.numel();
  return detail::make_op(Shape{d}, a.value(), {a.node()}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
  });
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (a.rank() != 2) throw std::invalid_argument("slice_cols: expects a matrix");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (c0 > c1 || c1 > c) throw std::invalid_argument("slice_cols: bad range");
  const std::size_t w = c1 - c0;
  std::vector<double> v(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) v[i * w + j] = a.value()[i * c + c0 + j];
  return detail::make_op(Shape{r, w}, std::move(v), {a.node()}, [r, c, c0, w](detail::Node& self) {
    auto& pa = *self.parents[0];
    pa.ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) pa.grad[i * c + c0 + j] += self.grad[i * w + j];
  });
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  if (a.rank() != 2) throw std::invalid_argument("slice_rows: expects a matrix");
  const std::size_t r = a.dim(0), c = a.dim(1);
  if (r0 > r1 || r1 > r) throw std::invalid_argument("slice_rows: bad range");
  const std::size_t h = r1 - r0;
  std::vector<double> v(a.value().begin() + r0 * c, a.value().begin() + r1 * c);
  return detail::make_op(Shape{h, c}, std::move(v), {a.node()}, [r0, c](detail::Node& self) {
    auto& pa = *self.parents[0];
    pa.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[r0 * c + i] += self.grad[i];
  });
}

/// Vertical stack of matrices with equal column counts.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  const std::size_t c = parts[0].rank() == 2 ? parts[0].dim(1) : parts[0].numel();
  std::size_t rows = 0;
  std::vector<detail::NodePtr> ps;
  for (const auto& t : parts) {
    const std::size_t tc = t.rank() == 2 ? t.dim(1) : t.numel();
    if (tc != c) shape_error("concat_rows", parts[0].shape(), t.shape());
    rows += t.rank() == 2 ? t.dim(0) : 1;
    ps.push_back(t.node());
  }
  std::vector<double> v;
  v.reserve(rows * c);
  for (const auto& t : parts) v.insert(v.end(), t.value().begin(), t.value().end());
  return detail::make_op(Shape{rows, c}, std::move(v), std::move(ps), [](detail::Node& self) {
    std::size_t off = 0;
    for (auto& pp : self.parents) {
      auto& pa = *pp;
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < pa.value.size(); ++i) pa.grad[i] += self.grad[off + i];
      }
      off += pa.value.size();
    }
  });
}

/// Horizontal concatenation of matrices with equal row counts.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  const std::size_t r = parts[0].dim(0);
  std::size_t cols = 0;
  std::vector<detail::NodePtr> ps;
  std::vector<std::size_t> widths;
  for (const auto& t : parts) {
    if (t.rank() != 2 || t.dim(0) != r) shape_error("concat_cols", parts[0].shape(), t.shape());
    widths.push_back(t.dim(1));
    cols += t.dim(1);
    ps.push_back(t.node());
  }
  std::vector<double> v(r * cols);
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& t = parts[p];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < widths[p]; ++j)
        v[i * cols + off + j] = t.value()[i * widths[p] + j];
    off += widths[p];
  }
  return detail::make_op(Shape{r, cols}, std::move(v), std::move(ps),
                         [r, cols, widths](detail::Node& self) {
                           std::size_t off2 = 0;
                           for (std::size_t p = 0; p < self.parents.size(); ++p) {
                             auto& pa = *self.parents[p];
                             const std::size_t w = widths[p];
                             if (pa.requires_grad) {
                               pa.ensure_grad();
                               for (std::size_t i = 0; i < r; ++i)
                                 for (std::size_t j = 0; j < w; ++j)
                                   pa.grad[i * w + j] += self.grad[i * cols + off2 + j];
                             }
                             off2 += w;
                           }
                         });
}

/// Concatenation of vectors into one vector.
inline Tensor concat_vec(const std::vector<Tensor>& parts) {
  std::size_t n = 0;
  std::vector<detail::NodePtr> ps;
  for (const auto& t : parts) {
    n += t.numel();
    ps.push_back(t.node());
  }
  std::vector<double> v;
  v.reserve(n);
  for (const auto& t : parts) v.insert(v.end(), t.value().begin(), t.value().end());
  return detail::make_op(Shape{n}, std::move(v), std::move(ps), [](detail::Node& self) {
    std::size_t off = 0;
    for (auto& pp : self.parents) {
      auto& pa = *pp;
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < pa.value.size(); ++i) pa.grad[i] += self.grad[off + i];
      }
      off += pa.value.size();
    }
  });
}

/// Embedding lookup: rows of `table` selected by `ids`.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("gather_rows: table must be a matrix");
  const std::size_t c = table.dim(1);
  std::vector<double> v(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.dim(0)) throw std::invalid_argument("gather_rows: id out of range");
    std::copy_n(table.value().begin() + ids[i] * c, c, v.begin() + i * c);
  }
  return detail::make_op(Shape{ids.size(), c}, std::move(v), {table.node()},
                         [ids, c](detail::Node& self) {
                           auto& pa = *self.parents[0];
                           pa.ensure_grad();
                           for (std::size_t i = 0; i < ids.size(); ++i)
                             for (std::size_t j = 0; j < c; ++j)
                               pa.grad[ids[i] * c + j] += self.grad[i * c + j];
                         });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(m * n);
  detail::mm_nn(a.value().data(), b.value().data(), v.data(), m, k, n);
  return detail::make_op(Shape{m, n}, std::move(v), {a.node(), b.node()},
                         [m, k, n](detail::Node& self) {
                           auto& pa = *self.parents[0];
                           auto& pb = *self.parents[1];
                           if (pa.requires_grad) {
                             pa.ensure_grad();
                             detail::mm_nt(self.grad.data(), pb.value.data(), pa.grad.data(), m, n,
                                           k, true);
                           }
                           if (pb.requires_grad) {
                             pb.ensure_grad();
                             detail::mm_tn_acc(pa.value.data(), self.grad.data(), pb.grad.data(), m,
                                               k, n);
                           }
                         });
}

/// a [m,d] times b [k,d] transposed -> [m,k]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) shape_error("matmul_nt", a.shape(), b.shape());
  const std::size_t m = a.dim(0), d = a.dim(1), k = b.dim(0);
  std::vector<double> v(m * k);
  detail::mm_nt(a.value().data(), b.value().data(), v.data(), m, d, k, false);
  return detail::make_op(Shape{m, k}, std::move(v), {a.node(), b.node()},
                         [m, d, k](detail::Node& self) {
                           auto& pa = *self.parents[0];
                           auto& pb = *self.parents[1];
                           // dA = dC * B ; dB = dC^T * A
                           if (pa.requires_grad) {
                             pa.ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                 const double g = self.grad[i * k + p];
                                 if (g == 0.0) continue;
                                 for (std::size_t j = 0; j < d; ++j)
                                   pa.grad[i * d + j] += g * pb.value[p * d + j];
                               }
                           }
                           if (pb.requires_grad) {
                             pb.ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                 const double g = self.grad[i * k + p];
                                 if (g == 0.0) continue;
                                 for (std::size_t j = 0; j < d; ++j)
                                   pb.grad[p * d + j] += g * pa.value[i * d + j];
                               }
                           }
                         });
}

/// vector [d] times matrix [d,n] -> [n]
inline Tensor vecmat(const Tensor& x, const Tensor& w) {
  if (x.rank() != 1 || w.rank() != 2 || x.numel() != w.dim(0)) shape_error("vecmat", x.shape(), w.shape());
  const std::size_t d = x.numel(), n = w.dim(1);
  std::vector<double> v(n, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    const double xv = x.value()[i];
    if (xv == 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) v[j] += xv * w.value()[i * n + j];
  }
  return detail::make_op(Shape{n}, std::move(v), {x.node(), w.node()}, [d, n](detail::Node& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (std::size_t i = 0; i < d; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += self.grad[j] * pw.value[i * n + j];
        px.grad[i] += acc;
      }
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      for (std::size_t i = 0; i < d; ++i) {
        const double xv = px.value[i];
        if (xv == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) pw.grad[i * n + j] += xv * self.grad[j];
      }
    }
  });
}

/// matrix [m,d] times vector [d] -> [m]
inline Tensor matvec(const Tensor& a, const Tensor& x) {
  if (a.rank() != 2 || x.rank() != 1 || a.dim(1) != x.numel()) shape_error("matvec", a.shape(), x.shape());
  const std::size_t m = a.dim(0), d = a.dim(1);
  std::vector<double> v(m);
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += a.value()[i * d + j] * x.value()[j];
    v[i] = acc;
  }
  return detail::make_op(Shape{m}, std::move(v), {a.node(), x.node()}, [m, d](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& px = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double g = self.grad[i];
        if (g == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) pa.grad[i * d + j] += g * px.value[j];
      }
    }
    if (px.requires_grad) {
      px.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        const double g = self.grad[i];
        if (g == 0.0) continue;
        for (std::size_t j = 0; j < d; ++j) px.grad[j] += g * pa.value[i * d + j];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// neural-net primitives
// ---------------------------------------------------------------------------

/// y = x W (+ b). x may be a vector [d_in] or matrix [n, d_in]; the bias row
/// broadcasts over rows.
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b = Tensor()) {
  const bool vec = x.rank() == 1;
  Tensor y = vec ? vecmat(x, w) : matmul(x, w);
  if (!b.defined()) return y;
  if (b.rank() != 1 || b.numel() != w.dim(1)) shape_error("affine bias", b.shape(), w.shape());
  if (vec) return add(y, b);
  const std::size_t n = y.dim(0), d = y.dim(1);
  std::vector<double> v(y.value());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) v[i * d + j] += b.value()[j];
  return detail::make_op(y.shape(), std::move(v), {y.node(), b.node()},
                         [n, d](detail::Node& self) {
                           auto& py = *self.parents[0];
                           auto& pb = *self.parents[1];
                           if (py.requires_grad) {
                             py.ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               py.grad[i] += self.grad[i];
                           }
                           if (pb.requires_grad) {
                             pb.ensure_grad();
                             for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < d; ++j)
                                 pb.grad[j] += self.grad[i * d + j];
                           }
                         });
}

/// Per-last-axis normalization to zero mean and unit variance (eps inside the
/// square root), then elementwise gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().empty() ? 1 : x.shape().back();
  if (gain.numel() != d || bias.numel() != d) shape_error("layer_norm", x.shape(), gain.shape());
  const std::size_t rows = x.numel() / d;
  std::vector<double> v(x.numel());
  std::vector<double> inv_sd(rows), xhat(x.numel());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xr = x.value().data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double s = 1.0 / std::sqrt(var + eps);
    inv_sd[i] = s;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xr[j] - mu) * s;
      v[i * d + j] = xhat[i * d + j] * gain.value()[j] + bias.value()[j];
    }
  }
  return detail::make_op(
      x.shape(), std::move(v), {x.node(), gain.node(), bias.node()},
      [rows, d, inv_sd = std::move(inv_sd), xhat = std::move(xhat)](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (pg.requires_grad) {
          pg.ensure_grad();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d; ++j)
              pg.grad[j] += self.grad[i * d + j] * xhat[i * d + j];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d; ++j) pb.grad[j] += self.grad[i * d + j];
        }
        if (px.requires_grad) {
          px.ensure_grad();
          for (std::size_t i = 0; i < rows; ++i) {
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = self.grad[i * d + j] * pg.value[j];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xhat[i * d + j];
            }
            mean_dxh /= static_cast<double>(d);
            mean_dxh_xh /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = self.grad[i * d + j] * pg.value[j];
              px.grad[i * d + j] +=
                  inv_sd[i] * (dxh - mean_dxh - xhat[i * d + j] * mean_dxh_xh);
            }
          }
        }
      });
}

/// Softmax along `axis` of a vector (axis 0) or matrix (axis 0 or 1).
/// Mask entries that are false are treated as -inf: their outputs are exactly
/// zero and a fully masked slice yields an all-zero slice.
inline Tensor softmax_over_axis(const Tensor& x, std::size_t axis,
                                const std::vector<std::uint8_t>* mask = nullptr) {
  if (axis >= std::max<std::size_t>(x.rank(), 1))
    throw std::invalid_argument("softmax_over_axis: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(x.shape()));
  if (mask && mask->size() != x.numel())
    throw std::invalid_argument("softmax_over_axis: mask size mismatch");
  // treat vector as a single slice; matrix as slices along the chosen axis
  std::size_t n_slices, slice_len, stride_in_slice, stride_between;
  if (x.rank() <= 1) {
    n_slices = 1;
    slice_len = x.numel();
    stride_in_slice = 1;
    stride_between = 0;
  } else {
    const std::size_t r = x.dim(0), c = x.dim(1);
    if (axis == 0) {
      n_slices = c;
      slice_len = r;
      stride_in_slice = c;
      stride_between = 1;
    } else {
      n_slices = r;
      slice_len = c;
      stride_in_slice = 1;
      stride_between = c;
    }
  }
  std::vector<double> v(x.numel(), 0.0);
  for (std::size_t s = 0; s < n_slices; ++s) {
    const std::size_t base = s * stride_between;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t i = 0; i < slice_len; ++i) {
      const std::size_t idx = base + i * stride_in_slice;
      if (mask && !(*mask)[idx]) continue;
      any = true;
      mx = std::max(mx, x.value()[idx]);
    }
    if (!any) continue;  // fully masked slice stays zero
    double z = 0.0;
    for (std::size_t i = 0; i < slice_len; ++i) {
      const std::size_t idx = base + i * stride_in_slice;
      if (mask && !(*mask)[idx]) continue;
      const double e = std::exp(x.value()[idx] - mx);
      v[idx] = e;
      z += e;
    }
    for (std::size_t i = 0; i < slice_len; ++i) {
      const std::size_t idx = base + i * stride_in_slice;
      if (mask && !(*mask)[idx]) continue;
      v[idx] /= z;
    }
  }
  return detail::make_op(
      x.shape(), std::move(v), {x.node()},
      [n_slices, slice_len, stride_in_slice, stride_between](detail::Node& self) {
        auto& px = *self.parents[0];
        px.ensure_grad();
        for (std::size_t s = 0; s < n_slices; ++s) {
          const std::size_t base = s * stride_between;
          double dot = 0.0;
          for (std::size_t i = 0; i < slice_len; ++i) {
            const std::size_t idx = base + i * stride_in_slice;
            dot += self.grad[idx] * self.value[idx];
          }
          for (std::size_t i = 0; i < slice_len; ++i) {
            const std::size_t idx = base + i * stride_in_slice;
            // masked entries have value 0, hence zero gradient
            px.grad[idx] += self.value[idx] * (self.grad[idx] - dot);
          }
        }
      });
}

/// Numerically stable log softmax over a vector.
inline Tensor log_softmax(const Tensor& x) {
  if (x.rank() != 1) throw std::invalid_argument("log_softmax: expects a vector");
  const std::size_t n = x.numel();
  double mx = -std::numeric_limits<double>::infinity();
  for (double t : x.value()) mx = std::max(mx, t);
  double z = 0.0;
  for (double t : x.value()) z += std::exp(t - mx);
  const double lse = mx + std::log(z);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = x.value()[i] - lse;
  return detail::make_op(x.shape(), std::move(v), {x.node()}, [n](detail::Node& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    double gsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) gsum += self.grad[i];
    for (std::size_t i = 0; i < n; ++i)
      px.grad[i] += self.grad[i] - std::exp(self.value[i]) * gsum;
  });
}

/// Inverted dropout; identity when not training. rate must be < 1.
inline Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const double keep = 1.0 - rate;
  std::vector<double> m(x.numel());
  for (auto& mi : m) mi = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  std::vector<double> v(x.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x.value()[i] * m[i];
  return detail::make_op(x.shape(), std::move(v), {x.node()}, [m = std::move(m)](detail::Node& self) {
    auto& px = *self.parents[0];
    px.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * m[i];
  });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

/// Accumulates d(root)/d(leaf) into .grad of every reachable tensor that
/// requires gradients. root must be scalar.
inline void backward(const Tensor& root) {
  if (root.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      detail::Node* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
    }
  }
}

}  // namespace slotnav
