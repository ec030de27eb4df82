#pragma once

// Dense row-major tensor with reverse-mode autodiff. Values are immutable
// once produced by an op; the graph is a per-step tape of backward closures.
// Every op checks its output for NaN/Inf (toggle via set_finite_checks).

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "amrd/common.hpp"
#include "amrd/rng.hpp"

namespace amrd {

namespace detail {
inline bool& finite_checks_flag() {
  static bool on = true;
  return on;
}
inline bool& grad_mode_flag() {
  thread_local bool on = true;
  return on;
}
inline int& num_threads_ref() {
  static int n = 1;
  return n;
}
}  // namespace detail

inline void set_finite_checks(bool on) { detail::finite_checks_flag() = on; }
inline bool finite_checks_enabled() { return detail::finite_checks_flag(); }

// Numeric worker threads (used by matmul/conv when > 1). Partitioning is by
// disjoint output ranges, so results are bitwise identical at any setting.
inline void set_num_threads(int n) { detail::num_threads_ref() = std::max(1, n); }
inline int num_threads() { return detail::num_threads_ref(); }

struct NoGrad {
  bool prev;
  NoGrad() : prev(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGrad() { detail::grad_mode_flag() = prev; }
};
inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <class Fn>
inline void parallel_for(int64_t n, Fn&& fn) {
  int nt = num_threads();
  if (nt <= 1 || n < 2) {
    fn(int64_t{0}, n);
    return;
  }
  nt = static_cast<int>(std::min<int64_t>(nt, n));
  std::vector<std::thread> threads;
  threads.reserve(nt);
  int64_t chunk = (n + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    int64_t lo = t * chunk;
    int64_t hi = std::min<int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& th : threads) th.join();
}

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
class Tensor {
 public:
  struct Node {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated lazily during backward
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<T>& ensure_grad() {
      if (grad.empty()) grad.assign(value.size(), T(0));
      return grad;
    }
  };

  Tensor() = default;

  Tensor(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw ShapeError("negative dimension in " + shape_str(shape));
      n *= d;
    }
    if (n != static_cast<int64_t>(data.size()))
      throw ShapeError("data size " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    n_ = std::make_shared<Node>();
    n_->shape = std::move(shape);
    n_->value = std::move(data);
    n_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::vector<int> shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return Tensor(std::move(shape), std::vector<T>(n, T(0)));
  }

  static Tensor full(std::vector<int> shape, T v) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<int>& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }

  std::span<const T> data() const { return n_->value; }
  const T& at(int64_t i) const { return n_->value[static_cast<size_t>(i)]; }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor");
    return n_->value[0];
  }

  // Raw mutable access for leaf tensors only (optimizer updates, init).
  std::span<T> raw() {
    if (!n_->is_leaf) throw Error("raw() access to non-leaf tensor");
    return n_->value;
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    if (!n_->is_leaf) throw Error("set_requires_grad on non-leaf tensor");
    n_->requires_grad = b;
    return *this;
  }

  bool has_grad() const { return !n_->grad.empty(); }
  std::span<const T> grad() const { return n_->grad; }
  std::span<T> grad_mut() { return n_->ensure_grad(); }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  void backward() {
    if (numel() != 1) throw ShapeError("backward() requires a scalar output");
    if (!n_->requires_grad)
      throw Error("backward() on a tensor that does not require grad");
    n_->ensure_grad()[0] = T(1);
    // Iterative post-order DFS; reversed gives a valid topological order.
    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    struct Frame {
      Node* node;
      size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        Node* p = f.node->parents[f.next_parent++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        topo.push_back(f.node);
        stack.pop_back();
      }
    }
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      Node* node = *it;
      if (node->backward_fn) node->backward_fn(*node);
    }
  }

  std::shared_ptr<Node> node() const { return n_; }

  // Graph construction helper used by every op. `backward` receives the
  // output node; parent values/grads are reached through node.parents.
  template <class F>
  static Tensor make_op(const char* name, std::vector<int> out_shape,
                        std::vector<T> out_data,
                        std::vector<Tensor> parents, F&& backward) {
    if (finite_checks_enabled()) {
      for (const T& v : out_data) {
        if (!std::isfinite(static_cast<double>(v)))
          throw NumericError(std::string("non-finite value produced by op '") +
                             name + "'");
      }
    }
    Tensor out(std::move(out_shape), std::move(out_data));
    out.n_->op = name;
    bool needs = false;
    if (grad_enabled()) {
      for (const auto& p : parents) needs = needs || p.n_->requires_grad;
    }
    if (needs) {
      out.n_->requires_grad = true;
      out.n_->is_leaf = false;
      out.n_->parents.reserve(parents.size());
      for (auto& p : parents) out.n_->parents.push_back(p.n_);
      out.n_->backward_fn = std::forward<F>(backward);
    }
    return out;
  }

 private:
  std::shared_ptr<Node> n_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (const T& v : t.data())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <typename T>
Tensor<double> to_double(const Tensor<T>& t) {
  std::vector<double> d(t.data().begin(), t.data().end());
  return Tensor<double>(t.shape(), std::move(d));
}

template <typename T>
Tensor<float> to_float(const Tensor<T>& t) {
  std::vector<float> d(t.data().begin(), t.data().end());
  return Tensor<float>(t.shape(), std::move(d));
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename T>
void check_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("add", a, b);
  std::vector<T> out(a.numel());
  auto da = a.data(), db = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = da[i] + db[i];
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op("add", a.shape(), std::move(out), {a, b},
                            [](Node& self) {
                              for (int pi = 0; pi < 2; ++pi) {
                                auto& p = *self.parents[pi];
                                if (!p.requires_grad) continue;
                                auto& g = p.ensure_grad();
                                for (size_t i = 0; i < g.size(); ++i)
                                  g[i] += self.grad[i];
                              }
                            });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("sub", a, b);
  std::vector<T> out(a.numel());
  auto da = a.data(), db = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = da[i] - db[i];
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op("sub", a.shape(), std::move(out), {a, b},
                            [](Node& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              if (pa.requires_grad) {
                                auto& g = pa.ensure_grad();
                                for (size_t i = 0; i < g.size(); ++i)
                                  g[i] += self.grad[i];
                              }
                              if (pb.requires_grad) {
                                auto& g = pb.ensure_grad();
                                for (size_t i = 0; i < g.size(); ++i)
                                  g[i] -= self.grad[i];
                              }
                            });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape("mul", a, b);
  std::vector<T> out(a.numel());
  auto da = a.data(), db = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = da[i] * db[i];
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "mul", a.shape(), std::move(out), {a, b}, [](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
          auto& g = pa.ensure_grad();
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
        }
      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = da[i] * c;
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op("scale", a.shape(), std::move(out), {a},
                            [c](Node& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (size_t i = 0; i < g.size(); ++i)
                                g[i] += self.grad[i] * c;
                            });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = da[i] + c;
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op("add_scalar", a.shape(), std::move(out), {a},
                            [](Node& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (size_t i = 0; i < g.size(); ++i)
                                g[i] += self.grad[i];
                            });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> vexp(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (int64_t i = 0; i < a.numel(); ++i)
    out[i] = std::exp(static_cast<double>(da[i]));
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op("exp", a.shape(), std::move(out), {a},
                            [](Node& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (size_t i = 0; i < g.size(); ++i)
                                g[i] += self.grad[i] * self.value[i];
                            });
}

template <typename T>
Tensor<T> softplus_op(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    double x = static_cast<double>(da[i]);
    out[i] = static_cast<T>(x > 30.0 ? x : std::log1p(std::exp(x)));
  }
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "softplus", a.shape(), std::move(out), {a}, [](Node& self) {
        auto& p = *self.parents[0];
        auto& g = p.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) {
          double x = static_cast<double>(p.value[i]);
          double sig = 1.0 / (1.0 + std::exp(-x));
          g[i] += self.grad[i] * static_cast<T>(sig);
        }
      });
}

// Exact (erf-based) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    double x = static_cast<double>(da[i]);
    out[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
  }
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "gelu", a.shape(), std::move(out), {a}, [](Node& self) {
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        auto& p = *self.parents[0];
        auto& g = p.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) {
          double x = static_cast<double>(p.value[i]);
          double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
          g[i] += self.grad[i] * static_cast<T>(cdf + x * pdf);
        }
      });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    double x = static_cast<double>(da[i]);
    out[i] = static_cast<T>(x / (1.0 + std::exp(-x)));
  }
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "silu", a.shape(), std::move(out), {a}, [](Node& self) {
        auto& p = *self.parents[0];
        auto& g = p.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) {
          double x = static_cast<double>(p.value[i]);
          double s = 1.0 / (1.0 + std::exp(-x));
          g[i] += self.grad[i] * static_cast<T>(s * (1.0 + x * (1.0 - s)));
        }
      });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> new_shape) {
  int64_t n = 1;
  for (int d : new_shape) n *= d;
  if (n != a.numel())
    throw ShapeError("reshape: element count mismatch " + shape_str(a.shape()) +
                     " -> " + shape_str(new_shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op("reshape", std::move(new_shape), std::move(out),
                            {a}, [](Node& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (size_t i = 0; i < g.size(); ++i)
                                g[i] += self.grad[i];
                            });
}

template <typename T>
Tensor<T> transpose2(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose2: expected rank-2 tensor");
  int r = a.dim(0), c = a.dim(1);
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = da[static_cast<size_t>(i) * c + j];
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op("transpose2", {c, r}, std::move(out), {a},
                            [r, c](Node& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (int i = 0; i < r; ++i)
                                for (int j = 0; j < c; ++j)
                                  g[static_cast<size_t>(i) * c + j] +=
                                      self.grad[static_cast<size_t>(j) * r + i];
                            });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, int r0, int n) {
  if (a.rank() != 2) throw ShapeError("slice_rows: expected rank-2 tensor");
  int rows = a.dim(0), cols = a.dim(1);
  if (r0 < 0 || n < 0 || r0 + n > rows)
    throw ShapeError("slice_rows: range out of bounds");
  std::vector<T> out(static_cast<size_t>(n) * cols);
  std::copy_n(a.data().data() + static_cast<size_t>(r0) * cols,
              static_cast<size_t>(n) * cols, out.data());
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op("slice_rows", {n, cols}, std::move(out), {a},
                            [r0, cols](Node& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (size_t i = 0; i < self.grad.size(); ++i)
                                g[static_cast<size_t>(r0) * cols + i] += self.grad[i];
                            });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int c0, int n) {
  if (a.rank() != 2) throw ShapeError("slice_cols: expected rank-2 tensor");
  int rows = a.dim(0), cols = a.dim(1);
  if (c0 < 0 || n < 0 || c0 + n > cols)
    throw ShapeError("slice_cols: range out of bounds");
  std::vector<T> out(static_cast<size_t>(rows) * n);
  auto da = a.data();
  for (int i = 0; i < rows; ++i)
    std::copy_n(da.data() + static_cast<size_t>(i) * cols + c0, n,
                out.data() + static_cast<size_t>(i) * n);
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op("slice_cols", {rows, n}, std::move(out), {a},
                            [c0, cols, n, rows](Node& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (int i = 0; i < rows; ++i)
                                for (int j = 0; j < n; ++j)
                                  g[static_cast<size_t>(i) * cols + c0 + j] +=
                                      self.grad[static_cast<size_t>(i) * n + j];
                            });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input list");
  int cols = parts[0].dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != cols)
      throw ShapeError("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  std::vector<T> out;
  out.reserve(static_cast<size_t>(rows) * cols);
  for (const auto& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    off += static_cast<int>(p.numel());
  }
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "concat_rows", {rows, cols}, std::move(out), parts,
      [offsets](Node& self) {
        for (size_t pi = 0; pi < self.parents.size(); ++pi) {
          auto& p = *self.parents[pi];
          if (!p.requires_grad) continue;
          auto& g = p.ensure_grad();
          for (size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[static_cast<size_t>(offsets[pi]) + i];
        }
      });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty input list");
  int rows = parts[0].dim(0);
  int cols = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows)
      throw ShapeError("concat_cols: row mismatch");
    cols += p.dim(1);
  }
  std::vector<T> out(static_cast<size_t>(rows) * cols);
  int c0 = 0;
  std::vector<int> col_offsets, col_widths;
  for (const auto& p : parts) {
    int w = p.dim(1);
    auto dp = p.data();
    for (int i = 0; i < rows; ++i)
      std::copy_n(dp.data() + static_cast<size_t>(i) * w, w,
                  out.data() + static_cast<size_t>(i) * cols + c0);
    col_offsets.push_back(c0);
    col_widths.push_back(w);
    c0 += w;
  }
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "concat_cols", {rows, cols}, std::move(out), parts,
      [col_offsets, col_widths, rows, cols](Node& self) {
        for (size_t pi = 0; pi < self.parents.size(); ++pi) {
          auto& p = *self.parents[pi];
          if (!p.requires_grad) continue;
          auto& g = p.ensure_grad();
          int w = col_widths[pi], o = col_offsets[pi];
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < w; ++j)
              g[static_cast<size_t>(i) * w + j] +=
                  self.grad[static_cast<size_t>(i) * cols + o + j];
        }
      });
}

// out[j, :] = a[idx[j], :]. Backward scatter-adds, so idx need not be a
// bijection (it is one in the ViTDet use).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<int>& idx) {
  if (a.rank() != 2) throw ShapeError("gather_rows: expected rank-2 tensor");
  int rows = a.dim(0), cols = a.dim(1);
  std::vector<T> out(idx.size() * static_cast<size_t>(cols));
  auto da = a.data();
  for (size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= rows)
      throw ShapeError("gather_rows: index out of range");
    std::copy_n(da.data() + static_cast<size_t>(idx[j]) * cols, cols,
                out.data() + j * cols);
  }
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "gather_rows", {static_cast<int>(idx.size()), cols}, std::move(out), {a},
      [idx, cols](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (size_t j = 0; j < idx.size(); ++j)
          for (int c = 0; c < cols; ++c)
            g[static_cast<size_t>(idx[j]) * cols + c] +=
                self.grad[j * cols + c];
      });
}

// ---------------------------------------------------------------------------
// Reductions and row ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = T(0);
  for (const T& v : a.data()) s += v;
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op("sum_all", {1}, std::vector<T>{s}, {a},
                            [](Node& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (size_t i = 0; i < g.size(); ++i)
                                g[i] += self.grad[0];
                            });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
  T s = T(0);
  for (const T& v : a.data()) s += v;
  T inv = T(1) / static_cast<T>(a.numel());
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op("mean_all", {1}, std::vector<T>{s * inv}, {a},
                            [inv](Node& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (size_t i = 0; i < g.size(); ++i)
                                g[i] += self.grad[0] * inv;
                            });
}

// [N x d] -> [d], mean over rows.
template <typename T>
Tensor<T> mean_over_rows(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("mean_over_rows: expected rank-2 tensor");
  int n = a.dim(0), d = a.dim(1);
  if (n == 0) throw ShapeError("mean_over_rows: zero rows");
  std::vector<T> out(d, T(0));
  auto da = a.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[j] += da[static_cast<size_t>(i) * d + j];
  T inv = T(1) / static_cast<T>(n);
  for (int j = 0; j < d; ++j) out[j] *= inv;
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op("mean_over_rows", {d}, std::move(out), {a},
                            [n, d, inv](Node& self) {
                              auto& g = self.parents[0]->ensure_grad();
                              for (int i = 0; i < n; ++i)
                                for (int j = 0; j < d; ++j)
                                  g[static_cast<size_t>(i) * d + j] +=
                                      self.grad[j] * inv;
                            });
}

// x: [N x d], b: [d]; adds b to every row.
template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
    throw ShapeError("add_row_bias: expected [N x d] + [d]");
  int n = x.dim(0), d = x.dim(1);
  std::vector<T> out(x.numel());
  auto dx = x.data();
  auto db = b.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      out[static_cast<size_t>(i) * d + j] = dx[static_cast<size_t>(i) * d + j] + db[j];
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "add_row_bias", x.shape(), std::move(out), {x, b},
      [n, d](Node& self) {
        auto& px = *self.parents[0];
        auto& pb = *self.parents[1];
        if (px.requires_grad) {
          auto& g = px.ensure_grad();
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
              g[j] += self.grad[static_cast<size_t>(i) * d + j];
        }
      });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <typename T>
void matmul_raw(const T* a, const T* b, T* c, int m, int k, int n) {
  // i-k-j ordering; rows of the output partitioned across threads.
  parallel_for(m, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      T* crow = c + i * n;
      std::fill(crow, crow + n, T(0));
      const T* arow = a + i * k;
      for (int p = 0; p < k; ++p) {
        T av = arow[p];
        if (av == T(0)) continue;
        const T* brow = b + static_cast<int64_t>(p) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul: expected rank-2 tensors");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul: inner dimensions disagree " +
                     shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<size_t>(m) * n);
  matmul_raw(a.data().data(), b.data().data(), out.data(), m, k, n);
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        // dA += dC @ B^T
        if (pa.requires_grad) {
          auto& g = pa.ensure_grad();
          parallel_for(m, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
              for (int j = 0; j < n; ++j) {
                T gv = self.grad[i * n + j];
                if (gv == T(0)) continue;
                const T* brow = pb.value.data() + j;
                for (int p = 0; p < k; ++p)
                  g[i * k + p] += gv * brow[static_cast<int64_t>(p) * n];
              }
          });
        }
        // dB += A^T @ dC
        if (pb.requires_grad) {
          auto& g = pb.ensure_grad();
          for (int i = 0; i < m; ++i) {
            const T* arow = pa.value.data() + static_cast<int64_t>(i) * k;
            const T* grow = self.grad.data() + static_cast<int64_t>(i) * n;
            for (int p = 0; p < k; ++p) {
              T av = arow[p];
              if (av == T(0)) continue;
              T* gbrow = g.data() + static_cast<int64_t>(p) * n;
              for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// softmax over rows
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("softmax_rows: expected rank-2 tensor");
  int n = a.dim(0), d = a.dim(1);
  if (d == 0) throw ShapeError("softmax_rows: empty rows");
  std::vector<T> out(a.numel());
  auto da = a.data();
  for (int i = 0; i < n; ++i) {
    const T* row = da.data() + static_cast<size_t>(i) * d;
    T* orow = out.data() + static_cast<size_t>(i) * d;
    T mx = row[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    T s = T(0);
    for (int j = 0; j < d; ++j) {
      orow[j] = std::exp(static_cast<double>(row[j] - mx));
      s += orow[j];
    }
    T inv = T(1) / s;
    for (int j = 0; j < d; ++j) orow[j] *= inv;
  }
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "softmax_rows", a.shape(), std::move(out), {a}, [n, d](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < n; ++i) {
          const T* y = self.value.data() + static_cast<size_t>(i) * d;
          const T* dy = self.grad.data() + static_cast<size_t>(i) * d;
          T dot = T(0);
          for (int j = 0; j < d; ++j) dot += dy[j] * y[j];
          for (int j = 0; j < d; ++j)
            g[static_cast<size_t>(i) * d + j] += (dy[j] - dot) * y[j];
        }
      });
}

// ---------------------------------------------------------------------------
// layer_norm over the last dimension
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: rank >= 1 required");
  int d = x.dim(x.rank() - 1);
  if (d == 0) throw ShapeError("layer_norm: normalized dimension is zero");
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 ||
      beta.dim(0) != d)
    throw ShapeError("layer_norm: gamma/beta must be [d]");
  int64_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> mean_v(rows), inv_v(rows);
  auto dx = x.data();
  auto dg = gamma.data();
  auto db = beta.data();
  for (int64_t i = 0; i < rows; ++i) {
    const T* row = dx.data() + i * d;
    T m = T(0);
    for (int j = 0; j < d; ++j) m += row[j];
    m /= static_cast<T>(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) {
      T c = row[j] - m;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T inv = T(1) / std::sqrt(var + eps);
    mean_v[i] = m;
    inv_v[i] = inv;
    T* orow = out.data() + i * d;
    for (int j = 0; j < d; ++j) orow[j] = (row[j] - m) * inv * dg[j] + db[j];
  }
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, d, mean_v, inv_v](Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        for (int64_t i = 0; i < rows; ++i) {
          const T* row = px.value.data() + i * d;
          const T* dy = self.grad.data() + i * d;
          T m = mean_v[i], inv = inv_v[i];
          if (pg.requires_grad) {
            auto& gg = pg.ensure_grad();
            for (int j = 0; j < d; ++j) gg[j] += dy[j] * (row[j] - m) * inv;
          }
          if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            for (int j = 0; j < d; ++j) gb[j] += dy[j];
          }
          if (px.requires_grad) {
            auto& gx = px.ensure_grad();
            // dxhat = dy * gamma; dx = inv * (dxhat - mean(dxhat)
            //        - xhat * mean(dxhat * xhat))
            T s1 = T(0), s2 = T(0);
            for (int j = 0; j < d; ++j) {
              T xhat = (row[j] - m) * inv;
              T dxh = dy[j] * pg.value[j];
              s1 += dxh;
              s2 += dxh * xhat;
            }
            s1 /= static_cast<T>(d);
            s2 /= static_cast<T>(d);
            for (int j = 0; j < d; ++j) {
              T xhat = (row[j] - m) * inv;
              T dxh = dy[j] * pg.value[j];
              gx[i * d + j] += inv * (dxh - s1 - xhat * s2);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// conv2d / transposed_conv2d (cross-correlation convention)
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

namespace detail {

// y[co, oy, ox] += sum_{ci,ky,kx} x[ci, oy*s - p + ky, ox*s - p + kx] * K[co,ci,ky,kx]
template <typename T>
void conv2d_accum(const T* x, const T* kern, T* y, int ci_n, int h, int w,
                  int co_n, int kh, int kw, int stride, int pad, int oh,
                  int ow) {
  parallel_for(co_n, [&](int64_t lo, int64_t hi) {
    for (int64_t co = lo; co < hi; ++co) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          T acc = T(0);
          for (int ci = 0; ci < ci_n; ++ci) {
            const T* xc = x + static_cast<int64_t>(ci) * h * w;
            const T* kc = kern + ((co * ci_n + ci) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
              int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= w) continue;
                acc += xc[iy * w + ix] * kc[ky * kw + kx];
              }
            }
          }
          y[(co * oh + oy) * ow + ox] += acc;
        }
      }
    }
  });
}

// Adjoint of conv2d_accum w.r.t. x:
// dx[ci, iy, ix] += sum dy[co, oy, ox] * K[co,ci,ky,kx] with iy = oy*s-p+ky.
template <typename T>
void conv2d_input_grad_accum(const T* dy, const T* kern, T* dx, int ci_n,
                             int h, int w, int co_n, int kh, int kw,
                             int stride, int pad, int oh, int ow) {
  for (int co = 0; co < co_n; ++co) {
    const T* dyc = dy + static_cast<int64_t>(co) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        T gv = dyc[oy * ow + ox];
        if (gv == T(0)) continue;
        for (int ci = 0; ci < ci_n; ++ci) {
          T* dxc = dx + static_cast<int64_t>(ci) * h * w;
          const T* kc = kern + ((static_cast<int64_t>(co) * ci_n + ci) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= w) continue;
              dxc[iy * w + ix] += gv * kc[ky * kw + kx];
            }
          }
        }
      }
    }
  }
}

// dK[co,ci,ky,kx] += sum_{oy,ox} dy[co,oy,ox] * x[ci, oy*s-p+ky, ox*s-p+kx]
template <typename T>
void conv2d_kernel_grad_accum(const T* x, const T* dy, T* dk, int ci_n, int h,
                              int w, int co_n, int kh, int kw, int stride,
                              int pad, int oh, int ow) {
  for (int co = 0; co < co_n; ++co) {
    const T* dyc = dy + static_cast<int64_t>(co) * oh * ow;
    for (int ci = 0; ci < ci_n; ++ci) {
      const T* xc = x + static_cast<int64_t>(ci) * h * w;
      T* kc = dk + ((static_cast<int64_t>(co) * ci_n + ci) * kh) * kw;
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          T acc = T(0);
          for (int oy = 0; oy < oh; ++oy) {
            int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int ox = 0; ox < ow; ++ox) {
              int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= w) continue;
              acc += dyc[oy * ow + ox] * xc[iy * w + ix];
            }
          }
          kc[ky * kw + kx] += acc;
        }
      }
    }
  }
}

}  // namespace detail

// input [C_in x H x W], kernel [C_out x C_in x kh x kw].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int stride,
                 int pad) {
  if (input.rank() != 3 || kernel.rank() != 4)
    throw ShapeError("conv2d: expected input [C x H x W], kernel [Co x Ci x kh x kw]");
  if (stride <= 0) throw ShapeError("conv2d: stride must be positive");
  if (pad < 0) throw ShapeError("conv2d: negative padding");
  int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
  int co = kernel.dim(0), kci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kci != ci) throw ShapeError("conv2d: channel mismatch");
  if (kh > h + 2 * pad || kw > w + 2 * pad)
    throw ShapeError("conv2d: kernel larger than padded input");
  int oh = conv_out_dim(h, kh, stride, pad);
  int ow = conv_out_dim(w, kw, stride, pad);
  std::vector<T> out(static_cast<size_t>(co) * oh * ow, T(0));
  detail::conv2d_accum(input.data().data(), kernel.data().data(), out.data(),
                       ci, h, w, co, kh, kw, stride, pad, oh, ow);
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "conv2d", {co, oh, ow}, std::move(out), {input, kernel},
      [ci, h, w, co, kh, kw, stride, pad, oh, ow](Node& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        if (px.requires_grad) {
          detail::conv2d_input_grad_accum(self.grad.data(), pk.value.data(),
                                          px.ensure_grad().data(), ci, h, w,
                                          co, kh, kw, stride, pad, oh, ow);
        }
        if (pk.requires_grad) {
          detail::conv2d_kernel_grad_accum(px.value.data(), self.grad.data(),
                                           pk.ensure_grad().data(), ci, h, w,
                                           co, kh, kw, stride, pad, oh, ow);
        }
      });
}

// input [C_in x H x W], kernel [C_in x C_out x kh x kw] (adjoint of a conv
// whose kernel maps C_out -> C_in; the same buffer serves both readings).
// out H' = (H-1)*stride - 2*pad + kh + output_padding.
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& input, const Tensor<T>& kernel,
                            int stride, int pad, int output_padding = 0) {
  if (input.rank() != 3 || kernel.rank() != 4)
    throw ShapeError("transposed_conv2d: expected input [C x H x W], kernel [Ci x Co x kh x kw]");
  if (stride <= 0) throw ShapeError("transposed_conv2d: stride must be positive");
  if (pad < 0) throw ShapeError("transposed_conv2d: negative padding");
  if (output_padding < 0 || output_padding >= stride)
    throw ShapeError("transposed_conv2d: output_padding must be in [0, stride)");
  int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (kernel.dim(0) != ci) throw ShapeError("transposed_conv2d: channel mismatch");
  int co = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  int oh = (h - 1) * stride - 2 * pad + kh + output_padding;
  int ow = (w - 1) * stride - 2 * pad + kw + output_padding;
  if (oh <= 0 || ow <= 0)
    throw ShapeError("transposed_conv2d: non-positive output size");
  std::vector<T> out(static_cast<size_t>(co) * oh * ow, T(0));
  // Scatter view: out[co, y*s-p+ky, x*s-p+kx] += in[ci_, y, x] * K[ci_, co, ky, kx]
  // -- identical to the conv input-grad kernel with (ci_n=co, co_n=ci).
  detail::conv2d_input_grad_accum(input.data().data(), kernel.data().data(),
                                  out.data(), co, oh, ow, ci, kh, kw, stride,
                                  pad, h, w);
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "transposed_conv2d", {co, oh, ow}, std::move(out), {input, kernel},
      [ci, h, w, co, kh, kw, stride, pad, oh, ow](Node& self) {
        auto& px = *self.parents[0];
        auto& pk = *self.parents[1];
        if (px.requires_grad) {
          // d(in) = conv(d(out); K) with the adjoint roles swapped back.
          detail::conv2d_accum(self.grad.data(), pk.value.data(),
                               px.ensure_grad().data(), co, oh, ow, ci, kh,
                               kw, stride, pad, h, w);
        }
        if (pk.requires_grad) {
          // dK[ci_, co_, ky, kx] accumulates over (input, dout) pairs; same
          // loop as the conv kernel grad with x := dout, dy := input.
          detail::conv2d_kernel_grad_accum(self.grad.data(), px.value.data(),
                                           pk.ensure_grad().data(), co, oh,
                                           ow, ci, kh, kw, stride, pad, h, w);
        }
      });
}

// Per-channel affine on a [C x H x W] map (frozen-statistics norm stand-in).
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& g,
                         const Tensor<T>& b) {
  if (x.rank() != 3) throw ShapeError("channel_affine: expected [C x H x W]");
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (g.rank() != 1 || g.dim(0) != c || b.rank() != 1 || b.dim(0) != c)
    throw ShapeError("channel_affine: gamma/beta must be [C]");
  std::vector<T> out(x.numel());
  auto dx = x.data();
  auto dg = g.data();
  auto db = b.data();
  int64_t hw = static_cast<int64_t>(h) * w;
  for (int ci = 0; ci < c; ++ci)
    for (int64_t i = 0; i < hw; ++i)
      out[ci * hw + i] = dx[ci * hw + i] * dg[ci] + db[ci];
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "channel_affine", x.shape(), std::move(out), {x, g, b},
      [c, hw](Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        if (px.requires_grad) {
          auto& gx = px.ensure_grad();
          for (int ci = 0; ci < c; ++ci)
            for (int64_t i = 0; i < hw; ++i)
              gx[ci * hw + i] += self.grad[ci * hw + i] * pg.value[ci];
        }
        if (pg.requires_grad) {
          auto& gg = pg.ensure_grad();
          for (int ci = 0; ci < c; ++ci)
            for (int64_t i = 0; i < hw; ++i)
              gg[ci] += self.grad[ci * hw + i] * px.value[ci * hw + i];
        }
        if (pb.requires_grad) {
          auto& gb = pb.ensure_grad();
          for (int ci = 0; ci < c; ++ci)
            for (int64_t i = 0; i < hw; ++i) gb[ci] += self.grad[ci * hw + i];
        }
      });
}

// ---------------------------------------------------------------------------
// Bilinear sampling (half-pixel centers, edge clamp within the window)
// ---------------------------------------------------------------------------

namespace detail {
struct BilinearTap {
  int lo;
  double frac;  // weight of (lo+1); 1-frac goes to lo
};

// Map destination index i to a source coordinate inside the continuous
// window [w0, w0+wlen), then clamp to valid sample centers of the window.
inline BilinearTap bilinear_tap(int i, int olen, double w0, double wlen,
                                int src_len) {
  double c = w0 + (static_cast<double>(i) + 0.5) * (wlen / olen) - 0.5;
  double lo_lim = w0;
  double hi_lim = w0 + wlen - 1.0;
  if (c < lo_lim) c = lo_lim;
  if (c > hi_lim) c = hi_lim;
  if (c < 0.0) c = 0.0;
  if (c > static_cast<double>(src_len - 1)) c = static_cast<double>(src_len - 1);
  int lo = static_cast<int>(std::floor(c));
  if (lo > src_len - 2) lo = src_len - 2;
  if (lo < 0) lo = 0;
  double frac = c - lo;
  if (src_len == 1) {
    lo = 0;
    frac = 0.0;
  }
  return {lo, frac};
}
}  // namespace detail

// Crop-and-resize of [C x H x W] with a continuous window given in source
// pixel units; bilinear_resize is the full-window special case.
template <typename T>
Tensor<T> bilinear_sample_window(const Tensor<T>& src, double wy0, double wx0,
                                 double wh, double ww, int oh, int ow) {
  if (src.rank() != 3) throw ShapeError("bilinear_sample_window: expected [C x H x W]");
  int c = src.dim(0), h = src.dim(1), w = src.dim(2);
  if (h == 0 || w == 0 || c == 0)
    throw ShapeError("bilinear_sample_window: empty source");
  if (oh < 1 || ow < 1)
    throw ShapeError("bilinear_sample_window: output dims must be >= 1");
  if (wh <= 0.0 || ww <= 0.0)
    throw ShapeError("bilinear_sample_window: zero-area window");
  std::vector<detail::BilinearTap> ty(oh), tx(ow);
  for (int i = 0; i < oh; ++i) ty[i] = detail::bilinear_tap(i, oh, wy0, wh, h);
  for (int j = 0; j < ow; ++j) tx[j] = detail::bilinear_tap(j, ow, wx0, ww, w);
  std::vector<T> out(static_cast<size_t>(c) * oh * ow);
  auto ds = src.data();
  for (int ci = 0; ci < c; ++ci) {
    const T* plane = ds.data() + static_cast<int64_t>(ci) * h * w;
    for (int i = 0; i < oh; ++i) {
      int y0 = ty[i].lo;
      T fy = static_cast<T>(ty[i].frac);
      for (int j = 0; j < ow; ++j) {
        int x0 = tx[j].lo;
        T fx = static_cast<T>(tx[j].frac);
        T v00 = plane[y0 * w + x0];
        T v01 = plane[y0 * w + std::min(x0 + 1, w - 1)];
        T v10 = plane[std::min(y0 + 1, h - 1) * w + x0];
        T v11 = plane[std::min(y0 + 1, h - 1) * w + std::min(x0 + 1, w - 1)];
        T top = v00 + (v01 - v00) * fx;
        T bot = v10 + (v11 - v10) * fx;
        out[(static_cast<int64_t>(ci) * oh + i) * ow + j] = top + (bot - top) * fy;
      }
    }
  }
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "bilinear_sample", {c, oh, ow}, std::move(out), {src},
      [c, h, w, oh, ow, ty, tx](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (int ci = 0; ci < c; ++ci) {
          T* gp = g.data() + static_cast<int64_t>(ci) * h * w;
          for (int i = 0; i < oh; ++i) {
            int y0 = ty[i].lo;
            int y1 = std::min(y0 + 1, h - 1);
            T fy = static_cast<T>(ty[i].frac);
            for (int j = 0; j < ow; ++j) {
              int x0 = tx[j].lo;
              int x1 = std::min(x0 + 1, w - 1);
              T fx = static_cast<T>(tx[j].frac);
              T gv = self.grad[(static_cast<int64_t>(ci) * oh + i) * ow + j];
              gp[y0 * w + x0] += gv * (T(1) - fy) * (T(1) - fx);
              gp[y0 * w + x1] += gv * (T(1) - fy) * fx;
              gp[y1 * w + x0] += gv * fy * (T(1) - fx);
              gp[y1 * w + x1] += gv * fy * fx;
            }
          }
        }
      });
}

// Exact identity when sizes match (the taps land on integer centers with
// zero frac, so values copy through bitwise).
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& src, int out_h, int out_w) {
  if (src.rank() != 3) throw ShapeError("bilinear_resize: expected [C x H x W]");
  return bilinear_sample_window(src, 0.0, 0.0, static_cast<double>(src.dim(1)),
                                static_cast<double>(src.dim(2)), out_h, out_w);
}

// Nearest-neighbor crop-resize on an integer grid (mask geometry). Window in
// source pixel units; taps stay inside the window.
inline std::vector<int32_t> nearest_sample_window_i32(
    const std::vector<int32_t>& src, int h, int w, double wy0, double wx0,
    double wh, double ww, int oh, int ow) {
  if (h <= 0 || w <= 0) throw ShapeError("nearest_sample: empty source");
  if (oh < 1 || ow < 1) throw ShapeError("nearest_sample: bad output dims");
  std::vector<int32_t> out(static_cast<size_t>(oh) * ow);
  for (int i = 0; i < oh; ++i) {
    int sy = static_cast<int>(std::floor(wy0 + (i + 0.5) * (wh / oh)));
    sy = std::clamp(sy, static_cast<int>(std::floor(wy0)),
                    static_cast<int>(std::ceil(wy0 + wh)) - 1);
    sy = std::clamp(sy, 0, h - 1);
    for (int j = 0; j < ow; ++j) {
      int sx = static_cast<int>(std::floor(wx0 + (j + 0.5) * (ww / ow)));
      sx = std::clamp(sx, static_cast<int>(std::floor(wx0)),
                      static_cast<int>(std::ceil(wx0 + ww)) - 1);
      sx = std::clamp(sx, 0, w - 1);
      out[static_cast<size_t>(i) * ow + j] = src[static_cast<size_t>(sy) * w + sx];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patch extraction: [C x H x W] -> [T x C*P*P], T = (H/P)*(W/P)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> im2patches(const Tensor<T>& img, int patch) {
  if (img.rank() != 3) throw ShapeError("im2patches: expected [C x H x W]");
  int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (patch <= 0 || h % patch != 0 || w % patch != 0)
    throw ShapeError("im2patches: resolution not divisible by patch size");
  int gh = h / patch, gw = w / patch;
  int t = gh * gw, pd = c * patch * patch;
  std::vector<T> out(static_cast<size_t>(t) * pd);
  auto d = img.data();
  for (int py = 0; py < gh; ++py)
    for (int px = 0; px < gw; ++px) {
      T* row = out.data() + (static_cast<size_t>(py) * gw + px) * pd;
      int k = 0;
      for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < patch; ++y)
          for (int x = 0; x < patch; ++x)
            row[k++] = d[(static_cast<int64_t>(ci) * h + py * patch + y) * w +
                         px * patch + x];
    }
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "im2patches", {t, pd}, std::move(out), {img},
      [c, h, w, patch, gh, gw, pd](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (int py = 0; py < gh; ++py)
          for (int px = 0; px < gw; ++px) {
            const T* row = self.grad.data() + (static_cast<size_t>(py) * gw + px) * pd;
            int k = 0;
            for (int ci = 0; ci < c; ++ci)
              for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x)
                  g[(static_cast<int64_t>(ci) * h + py * patch + y) * w +
                    px * patch + x] += row[k++];
          }
      });
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention on [T x d] token matrices.
// Composed from primitive ops, so gradients come from the tape.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k,
                               const Tensor<T>& v, int heads) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw ShapeError("scaled_dot_attention: expected [T x d] inputs");
  check_same_shape("scaled_dot_attention", q, k);
  check_same_shape("scaled_dot_attention", k, v);
  int d = q.dim(1);
  if (heads <= 0 || d % heads != 0)
    throw ShapeError("scaled_dot_attention: dim not divisible by heads");
  int dh = d / heads;
  T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (int hd = 0; hd < heads; ++hd) {
    Tensor<T> qh = slice_cols(q, hd * dh, dh);
    Tensor<T> kh = slice_cols(k, hd * dh, dh);
    Tensor<T> vh = slice_cols(v, hd * dh, dh);
    Tensor<T> scores = scale(matmul(qh, transpose2(kh)), inv_sqrt);
    Tensor<T> probs = softmax_rows(scores);
    outs.push_back(matmul(probs, vh));
  }
  return heads == 1 ? outs[0] : concat_cols(outs);
}

// ---------------------------------------------------------------------------
// Loss primitives (fused forward/backward)
// ---------------------------------------------------------------------------

namespace detail {
inline bool& cosine_zero_warned() {
  static bool warned = false;
  return warned;
}
void log_cosine_zero_norm();  // defined in src/logging.cpp
}  // namespace detail

// Per-row cosine distance of two [N x d] matrices -> [N].
// Zero-norm rows yield distance 1 with zero gradient.
template <typename T>
Tensor<T> cosine_distance_rows(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.rank() != 2 || y.rank() != 2)
    throw ShapeError("cosine_distance_rows: expected [N x d]");
  check_same_shape("cosine_distance_rows", x, y);
  int n = x.dim(0), d = x.dim(1);
  std::vector<T> out(n);
  std::vector<T> nx_v(n), ny_v(n), dot_v(n);
  auto dx = x.data();
  auto dy = y.data();
  for (int i = 0; i < n; ++i) {
    const T* xr = dx.data() + static_cast<size_t>(i) * d;
    const T* yr = dy.data() + static_cast<size_t>(i) * d;
    T dot = T(0), sx = T(0), sy = T(0);
    for (int j = 0; j < d; ++j) {
      dot += xr[j] * yr[j];
      sx += xr[j] * xr[j];
      sy += yr[j] * yr[j];
    }
    if (sx == T(0) || sy == T(0)) {
      detail::log_cosine_zero_norm();
      out[i] = T(1);
      nx_v[i] = T(0);
      ny_v[i] = T(0);
      dot_v[i] = T(0);
    } else {
      T nx = std::sqrt(sx), ny = std::sqrt(sy);
      out[i] = T(1) - dot / (nx * ny);
      nx_v[i] = nx;
      ny_v[i] = ny;
      dot_v[i] = dot;
    }
  }
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "cosine_distance", {n}, std::move(out), {x, y},
      [n, d, nx_v, ny_v, dot_v](Node& self) {
        auto& px = *self.parents[0];
        auto& py = *self.parents[1];
        for (int i = 0; i < n; ++i) {
          if (nx_v[i] == T(0) || ny_v[i] == T(0)) continue;  // zero grad
          T g = self.grad[i];
          if (g == T(0)) continue;
          const T* xr = px.value.data() + static_cast<size_t>(i) * d;
          const T* yr = py.value.data() + static_cast<size_t>(i) * d;
          T nx = nx_v[i], ny = ny_v[i], dot = dot_v[i];
          if (px.requires_grad) {
            auto& gx = px.ensure_grad();
            T a = T(1) / (nx * ny);
            T b = dot / (nx * nx * nx * ny);
            for (int j = 0; j < d; ++j)
              gx[static_cast<size_t>(i) * d + j] += g * (-(yr[j] * a) + xr[j] * b);
          }
          if (py.requires_grad) {
            auto& gy = py.ensure_grad();
            T a = T(1) / (nx * ny);
            T b = dot / (ny * ny * ny * nx);
            for (int j = 0; j < d; ++j)
              gy[static_cast<size_t>(i) * d + j] += g * (-(xr[j] * a) + yr[j] * b);
          }
        }
      });
}

// 1 - x.y / (|x||y|), scalar output; range [0, 2].
template <typename T>
Tensor<T> cosine_distance(const Tensor<T>& x, const Tensor<T>& y) {
  if (x.rank() != 1 || y.rank() != 1)
    throw ShapeError("cosine_distance: expected rank-1 vectors");
  int d = x.dim(0);
  Tensor<T> xr = reshape(x, {1, d});
  Tensor<T> yr = reshape(y, {1, d});
  return reshape(cosine_distance_rows(xr, yr), {1});
}

// Mean over elements of the Huber form: 0.5 d^2/delta if |d|<delta else
// |d| - 0.5 delta.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T>& x, const Tensor<T>& y, T delta) {
  check_same_shape("smooth_l1", x, y);
  if (delta <= T(0)) throw ShapeError("smooth_l1: delta must be positive");
  int64_t n = x.numel();
  if (n == 0) throw ShapeError("smooth_l1: empty input");
  auto dx = x.data();
  auto dy = y.data();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) {
    T d = dx[i] - dy[i];
    T a = std::abs(d);
    acc += a < delta ? T(0.5) * d * d / delta : a - T(0.5) * delta;
  }
  acc /= static_cast<T>(n);
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "smooth_l1", {1}, std::vector<T>{acc}, {x, y}, [n, delta](Node& self) {
        auto& px = *self.parents[0];
        auto& py = *self.parents[1];
        T g = self.grad[0] / static_cast<T>(n);
        for (int64_t i = 0; i < n; ++i) {
          T d = px.value[i] - py.value[i];
          T dd = std::abs(d) < delta ? d / delta : (d > T(0) ? T(1) : T(-1));
          if (px.requires_grad) px.ensure_grad()[i] += g * dd;
          if (py.requires_grad) py.ensure_grad()[i] -= g * dd;
        }
      });
}

// Mean softmax cross-entropy over rows of [N x C] logits.
template <typename T>
Tensor<T> cross_entropy_logits(const Tensor<T>& logits,
                               const std::vector<int>& labels) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy: expected [N x C]");
  int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw ShapeError("cross_entropy: label count mismatch");
  auto dl = logits.data();
  std::vector<T> probs(static_cast<size_t>(n) * c);
  T loss = T(0);
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c)
      throw ShapeError("cross_entropy: label out of range");
    const T* row = dl.data() + static_cast<size_t>(i) * c;
    T* prow = probs.data() + static_cast<size_t>(i) * c;
    T mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    T s = T(0);
    for (int j = 0; j < c; ++j) {
      prow[j] = std::exp(static_cast<double>(row[j] - mx));
      s += prow[j];
    }
    T inv = T(1) / s;
    for (int j = 0; j < c; ++j) prow[j] *= inv;
    loss -= std::log(static_cast<double>(std::max(prow[labels[i]], std::numeric_limits<T>::min())));
  }
  loss /= static_cast<T>(n);
  using Node = typename Tensor<T>::Node;
  return Tensor<T>::make_op(
      "cross_entropy", {1}, std::vector<T>{loss}, {logits},
      [n, c, probs, labels](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        T gv = self.grad[0] / static_cast<T>(n);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < c; ++j) {
            T p = probs[static_cast<size_t>(i) * c + j];
            g[static_cast<size_t>(i) * c + j] +=
                gv * (p - (j == labels[i] ? T(1) : T(0)));
          }
      });
}

}  // namespace amrd
