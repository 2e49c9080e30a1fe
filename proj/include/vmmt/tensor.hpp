#pragma once

// Dense double-precision tensors recorded on a tape for reverse-mode
// automatic differentiation. One tape per forward/backward pass; a tape and
// its tensors are confined to a single thread.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vmmt/rng.hpp"

namespace vmmt {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

inline void check_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a) +
                      " vs " + shape_str(b));
  }
}

class Tape;

// Lightweight handle: a node index into a tape.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool defined() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

  const Shape& shape() const;
  const std::vector<double>& value() const;
  bool requires_grad() const;
  double scalar() const;
  double at(int64_t i) const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

struct TapeNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily during backward
  bool requires_grad = false;
  // Accumulates into input grads; null for leaves/constants.
  std::function<void(Tape&, int)> backward;
};

class Tape {
 public:
  Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    check(numel(shape) == static_cast<int64_t>(data.size()),
          "leaf: product(shape) " + std::to_string(numel(shape)) +
              " != data length " + std::to_string(data.size()));
    nodes_.push_back(TapeNode{std::move(shape), std::move(data), {},
                              requires_grad, nullptr});
    return Tensor(this, static_cast<int>(nodes_.size()) - 1);
  }

  Tensor constant(Shape shape, std::vector<double> data) {
    return leaf(std::move(shape), std::move(data), false);
  }

  Tensor scalar(double v) { return constant({1}, {v}); }

  Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  Tensor emit(Shape shape, std::vector<double> value, bool requires_grad,
              std::function<void(Tape&, int)> backward) {
    nodes_.push_back(TapeNode{std::move(shape), std::move(value), {},
                              requires_grad,
                              requires_grad ? std::move(backward) : nullptr});
    return Tensor(this, static_cast<int>(nodes_.size()) - 1);
  }

  size_t size() const { return nodes_.size(); }

  const Shape& shape(int id) const { return nodes_[id].shape; }
  const std::vector<double>& val(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].requires_grad; }

  // Gradient buffer, zero-initialised on first touch.
  std::vector<double>& grad_buf(int id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  bool has_grad(int id) const { return !nodes_[id].grad.empty(); }

  const std::vector<double>& grad(const Tensor& t) const {
    check(t.tape() == this, "grad: tensor belongs to another tape");
    check(!nodes_[t.id()].grad.empty(),
          "grad: no gradient recorded for node " + std::to_string(t.id()));
    return nodes_[t.id()].grad;
  }

  // Reverse sweep from a scalar loss. Gradients accumulate (sum) into
  // shared inputs; d loss / d loss = 1.
  void backward(const Tensor& loss) {
    check(loss.defined() && loss.tape() == this,
          "backward: loss not on this tape");
    check(!nodes_.empty(), "backward: empty tape");
    check(numel(nodes_[loss.id()].shape) == 1,
          "backward: loss must be scalar, got " +
              shape_str(nodes_[loss.id()].shape));
    grad_buf(loss.id())[0] = 1.0;
    for (int id = loss.id(); id >= 0; --id) {
      auto& n = nodes_[id];
      if (n.backward && !n.grad.empty()) n.backward(*this, id);
    }
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<TapeNode> nodes_;
};

inline const Shape& Tensor::shape() const { return tape_->shape(id_); }
inline const std::vector<double>& Tensor::value() const {
  return tape_->val(id_);
}
inline bool Tensor::requires_grad() const { return tape_->needs_grad(id_); }
inline double Tensor::scalar() const {
  check(numel(shape()) == 1, "scalar: tensor has " +
                                 std::to_string(numel(shape())) + " elements");
  return value()[0];
}
inline double Tensor::at(int64_t i) const { return value()[i]; }

namespace detail {

inline Tape& same_tape(const char* op, const Tensor& a, const Tensor& b) {
  check(a.defined() && b.defined(), std::string(op) + ": undefined tensor");
  check(a.tape() == b.tape(), std::string(op) + ": tensors on distinct tapes");
  return *a.tape();
}

using EMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

inline void require_rank2(const char* op, const Tensor& t) {
  check(t.shape().size() == 2, std::string(op) + ": expected rank-2 tensor, got " +
                                   shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary primitives (shapes must match exactly; no broadcasting).
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class Bwd>
Tensor ew_binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd,
                 Bwd bwd) {
  Tape& t = same_tape(name, a, b);
  check_same_shape(name, a.shape(), b.shape());
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i], bv[i]);
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  return t.emit(a.shape(), std::move(out), rg,
                [ia, ib, bwd](Tape& tp, int self) {
                  const auto& g = tp.grad_buf(self);
                  const auto& av = tp.val(ia);
                  const auto& bv = tp.val(ib);
                  bool ga = tp.needs_grad(ia), gb = tp.needs_grad(ib);
                  std::vector<double>* da = ga ? &tp.grad_buf(ia) : nullptr;
                  std::vector<double>* db = gb ? &tp.grad_buf(ib) : nullptr;
                  for (size_t i = 0; i < g.size(); ++i) {
                    auto [dfa, dfb] = bwd(av[i], bv[i]);
                    if (da) (*da)[i] += g[i] * dfa;
                    if (db) (*db)[i] += g[i] * dfb;
                  }
                });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::ew_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return std::pair<double, double>{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::ew_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return std::pair<double, double>{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::ew_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair<double, double>{y, x}; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::ew_binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y) {
        return std::pair<double, double>{1.0 / y, -x / (y * y)};
      });
}

// Elementwise squared error (a - b)^2.
inline Tensor sq_diff(const Tensor& a, const Tensor& b) {
  return detail::ew_binary(
      "sq_diff", a, b, [](double x, double y) { return (x - y) * (x - y); },
      [](double x, double y) {
        double d = 2.0 * (x - y);
        return std::pair<double, double>{d, -d};
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary primitives.
// ---------------------------------------------------------------------------

namespace detail {

template <class Fwd, class Bwd>
Tensor ew_unary(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
  check(a.defined(), std::string(name) + ": undefined tensor");
  Tape& t = *a.tape();
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  int ia = a.id();
  return t.emit(a.shape(), std::move(out), a.requires_grad(),
                [ia, bwd](Tape& tp, int self) {
                  const auto& g = tp.grad_buf(self);
                  const auto& av = tp.val(ia);
                  const auto& yv = tp.val(self);
                  auto& da = tp.grad_buf(ia);
                  for (size_t i = 0; i < g.size(); ++i)
                    da[i] += g[i] * bwd(av[i], yv[i]);
                });
}

}  // namespace detail

inline Tensor scalar_mul(const Tensor& a, double c) {
  return detail::ew_unary(
      "scalar_mul", a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  return detail::ew_unary(
      "add_scalar", a, [c](double x) { return x + c; },
      [](double, double) { return 1.0; });
}

inline Tensor vexp(const Tensor& a) {
  return detail::ew_unary(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Tensor vlog(const Tensor& a) {
  return detail::ew_unary(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

inline Tensor vtanh(const Tensor& a) {
  return detail::ew_unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::ew_unary(
      "sigmoid", a,
      [](double x) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& a) {
  return detail::ew_unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

// Numerically stable softplus: max(x,0) + log1p(exp(-|x|)).
inline double softplus_val(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline Tensor softplus(const Tensor& a) {
  return detail::ew_unary(
      "softplus", a, [](double x) { return softplus_val(x); },
      [](double x, double) {
        return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
      });
}

// max(x, c) elementwise. Ties go to the clamp: gradient flows only where
// x > c strictly (free-bits subgradient convention).
inline Tensor clamp_min(const Tensor& a, double c) {
  return detail::ew_unary(
      "clamp_min", a, [c](double x) { return x > c ? x : c; },
      [c](double x, double) { return x > c ? 1.0 : 0.0; });
}

// Identity forward, zero gradient backward (Appendix-style detach).
inline Tensor stop_gradient(const Tensor& a) {
  check(a.defined(), "stop_gradient: undefined tensor");
  Tape& t = *a.tape();
  return t.emit(a.shape(), a.value(), false, nullptr);
}

// ---------------------------------------------------------------------------
// Matrix primitives.
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& t = detail::same_tape("matmul", a, b);
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  check(k == k2, "matmul: inner dims differ " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> out(static_cast<size_t>(m) * n);
  {
    detail::CMapM A(a.value().data(), m, k), B(b.value().data(), k, n);
    detail::MapM C(out.data(), m, n);
    C.noalias() = A * B;
  }
  bool rg = a.requires_grad() || b.requires_grad();
  int ia = a.id(), ib = b.id();
  return t.emit({m, n}, std::move(out), rg,
                [ia, ib, m, k, n](Tape& tp, int self) {
                  detail::CMapM G(tp.grad_buf(self).data(), m, n);
                  detail::CMapM A(tp.val(ia).data(), m, k);
                  detail::CMapM B(tp.val(ib).data(), k, n);
                  if (tp.needs_grad(ia)) {
                    detail::MapM dA(tp.grad_buf(ia).data(), m, k);
                    dA.noalias() += G * B.transpose();
                  }
                  if (tp.needs_grad(ib)) {
                    detail::MapM dB(tp.grad_buf(ib).data(), k, n);
                    dB.noalias() += A.transpose() * G;
                  }
                });
}

// x[M,K] * W[K,N] + b (b is [N] or [1,N], added to every row).
inline Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tape& t = detail::same_tape("affine", x, w);
  check(b.defined() && b.tape() == &t, "affine: bias on another tape");
  detail::require_rank2("affine", x);
  detail::require_rank2("affine", w);
  int m = x.shape()[0], k = x.shape()[1], k2 = w.shape()[0], n = w.shape()[1];
  check(k == k2, "affine: inner dims differ " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  check(numel(b.shape()) == n, "affine: bias shape " + shape_str(b.shape()) +
                                   " incompatible with output cols " +
                                   std::to_string(n));
  std::vector<double> out(static_cast<size_t>(m) * n);
  {
    detail::CMapM X(x.value().data(), m, k), W(w.value().data(), k, n);
    detail::MapM Y(out.data(), m, n);
    Y.noalias() = X * W;
    Eigen::Map<const Eigen::RowVectorXd> B(b.value().data(), n);
    Y.rowwise() += B;
  }
  bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
  int ix = x.id(), iw = w.id(), ib = b.id();
  return t.emit({m, n}, std::move(out), rg,
                [ix, iw, ib, m, k, n](Tape& tp, int self) {
                  detail::CMapM G(tp.grad_buf(self).data(), m, n);
                  detail::CMapM X(tp.val(ix).data(), m, k);
                  detail::CMapM W(tp.val(iw).data(), k, n);
                  if (tp.needs_grad(ix)) {
                    detail::MapM dX(tp.grad_buf(ix).data(), m, k);
                    dX.noalias() += G * W.transpose();
                  }
                  if (tp.needs_grad(iw)) {
                    detail::MapM dW(tp.grad_buf(iw).data(), k, n);
                    dW.noalias() += X.transpose() * G;
                  }
                  if (tp.needs_grad(ib)) {
                    Eigen::Map<Eigen::RowVectorXd> dB(tp.grad_buf(ib).data(),
                                                      n);
                    dB += G.colwise().sum();
                  }
                });
}

// Concatenate rank-2 tensors along columns (all must share the row count).
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  check(!parts.empty(), "concat_cols: no inputs");
  Tape& t = *parts[0].tape();
  int rows = parts[0].shape()[0];
  int cols = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_rank2("concat_cols", p);
    check(p.tape() == &t, "concat_cols: tensors on distinct tapes");
    check(p.shape()[0] == rows, "concat_cols: row mismatch " +
                                    shape_str(parts[0].shape()) + " vs " +
                                    shape_str(p.shape()));
    cols += p.shape()[1];
    rg = rg || p.requires_grad();
  }
  std::vector<double> out(static_cast<size_t>(rows) * cols);
  int off = 0;
  std::vector<int> ids;
  std::vector<int> widths;
  for (const auto& p : parts) {
    int w = p.shape()[1];
    const auto& pv = p.value();
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c)
        out[static_cast<size_t>(r) * cols + off + c] =
            pv[static_cast<size_t>(r) * w + c];
    off += w;
    ids.push_back(p.id());
    widths.push_back(w);
  }
  return t.emit({rows, cols}, std::move(out), rg,
                [ids, widths, rows, cols](Tape& tp, int self) {
                  const auto& g = tp.grad_buf(self);
                  int off = 0;
                  for (size_t p = 0; p < ids.size(); ++p) {
                    int w = widths[p];
                    if (tp.needs_grad(ids[p])) {
                      auto& dp = tp.grad_buf(ids[p]);
                      for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < w; ++c)
                          dp[static_cast<size_t>(r) * w + c] +=
                              g[static_cast<size_t>(r) * cols + off + c];
                    }
                    off += w;
                  }
                });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  return concat_cols(std::vector<Tensor>{a, b});
}

// Column slice [start, start+len) of a rank-2 tensor.
inline Tensor slice_cols(const Tensor& a, int start, int len) {
  check(a.defined(), "slice_cols: undefined tensor");
  detail::require_rank2("slice_cols", a);
  Tape& t = *a.tape();
  int rows = a.shape()[0], cols = a.shape()[1];
  check(start >= 0 && len >= 0 && start + len <= cols,
        "slice_cols: range [" + std::to_string(start) + "," +
            std::to_string(start + len) + ") out of " + shape_str(a.shape()));
  std::vector<double> out(static_cast<size_t>(rows) * len);
  const auto& av = a.value();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < len; ++c)
      out[static_cast<size_t>(r) * len + c] =
          av[static_cast<size_t>(r) * cols + start + c];
  int ia = a.id();
  return t.emit({rows, len}, std::move(out), a.requires_grad(),
                [ia, start, len, rows, cols](Tape& tp, int self) {
                  const auto& g = tp.grad_buf(self);
                  auto& da = tp.grad_buf(ia);
                  for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < len; ++c)
                      da[static_cast<size_t>(r) * cols + start + c] +=
                          g[static_cast<size_t>(r) * len + c];
                });
}

// Per-row sum: [M,N] -> [M,1].
inline Tensor row_sum(const Tensor& a) {
  check(a.defined(), "row_sum: undefined tensor");
  detail::require_rank2("row_sum", a);
  Tape& t = *a.tape();
  int rows = a.shape()[0], cols = a.shape()[1];
  std::vector<double> out(rows, 0.0);
  const auto& av = a.value();
  for (int r = 0; r < rows; ++r) {
    double s = 0;
    for (int c = 0; c < cols; ++c) s += av[static_cast<size_t>(r) * cols + c];
    out[r] = s;
  }
  int ia = a.id();
  return t.emit({rows, 1}, std::move(out), a.requires_grad(),
                [ia, rows, cols](Tape& tp, int self) {
                  const auto& g = tp.grad_buf(self);
                  auto& da = tp.grad_buf(ia);
                  for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < cols; ++c)
                      da[static_cast<size_t>(r) * cols + c] += g[r];
                });
}

// Scale row r of a [M,N] tensor by s[r] where s is [M,1].
inline Tensor row_scale(const Tensor& a, const Tensor& s) {
  Tape& t = detail::same_tape("row_scale", a, s);
  detail::require_rank2("row_scale", a);
  int rows = a.shape()[0], cols = a.shape()[1];
  check(s.shape() == Shape({rows, 1}), "row_scale: scale shape " +
                                           shape_str(s.shape()) +
                                           " != " + shape_str({rows, 1}));
  std::vector<double> out(a.value().size());
  const auto& av = a.value();
  const auto& sv = s.value();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out[static_cast<size_t>(r) * cols + c] =
          av[static_cast<size_t>(r) * cols + c] * sv[r];
  bool rg = a.requires_grad() || s.requires_grad();
  int ia = a.id(), is = s.id();
  return t.emit({rows, cols}, std::move(out), rg,
                [ia, is, rows, cols](Tape& tp, int self) {
                  const auto& g = tp.grad_buf(self);
                  const auto& av = tp.val(ia);
                  const auto& sv = tp.val(is);
                  if (tp.needs_grad(ia)) {
                    auto& da = tp.grad_buf(ia);
                    for (int r = 0; r < rows; ++r)
                      for (int c = 0; c < cols; ++c)
                        da[static_cast<size_t>(r) * cols + c] +=
                            g[static_cast<size_t>(r) * cols + c] * sv[r];
                  }
                  if (tp.needs_grad(is)) {
                    auto& ds = tp.grad_buf(is);
                    for (int r = 0; r < rows; ++r) {
                      double acc = 0;
                      for (int c = 0; c < cols; ++c)
                        acc += g[static_cast<size_t>(r) * cols + c] *
                               av[static_cast<size_t>(r) * cols + c];
                      ds[r] += acc;
                    }
                  }
                });
}

inline Tensor sum_all(const Tensor& a) {
  check(a.defined(), "sum: undefined tensor");
  Tape& t = *a.tape();
  const auto& av = a.value();
  double s = 0;
  for (double v : av) s += v;
  int ia = a.id();
  return t.emit({1}, {s}, a.requires_grad(), [ia](Tape& tp, int self) {
    double g = tp.grad_buf(self)[0];
    auto& da = tp.grad_buf(ia);
    for (auto& d : da) d += g;
  });
}

inline Tensor mean_all(const Tensor& a) {
  check(a.defined(), "mean: undefined tensor");
  auto n = static_cast<double>(numel(a.shape()));
  return scalar_mul(sum_all(a), 1.0 / n);
}

// ---------------------------------------------------------------------------
// Softmax family (per row of a rank-2 tensor).
// ---------------------------------------------------------------------------

inline Tensor softmax_rows(const Tensor& a) {
  check(a.defined(), "softmax: undefined tensor");
  detail::require_rank2("softmax", a);
  Tape& t = *a.tape();
  int rows = a.shape()[0], cols = a.shape()[1];
  std::vector<double> out(a.value().size());
  const auto& av = a.value();
  for (int r = 0; r < rows; ++r) {
    const double* x = av.data() + static_cast<size_t>(r) * cols;
    double* y = out.data() + static_cast<size_t>(r) * cols;
    double mx = x[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double z = 0;
    for (int c = 0; c < cols; ++c) {
      y[c] = std::exp(x[c] - mx);
      z += y[c];
    }
    for (int c = 0; c < cols; ++c) y[c] /= z;
  }
  int ia = a.id();
  return t.emit({rows, cols}, std::move(out), a.requires_grad(),
                [ia, rows, cols](Tape& tp, int self) {
                  const auto& g = tp.grad_buf(self);
                  const auto& y = tp.val(self);
                  auto& da = tp.grad_buf(ia);
                  for (int r = 0; r < rows; ++r) {
                    const double* yr = y.data() + static_cast<size_t>(r) * cols;
                    const double* gr = g.data() + static_cast<size_t>(r) * cols;
                    double dot = 0;
                    for (int c = 0; c < cols; ++c) dot += yr[c] * gr[c];
                    double* dr = da.data() + static_cast<size_t>(r) * cols;
                    for (int c = 0; c < cols; ++c)
                      dr[c] += yr[c] * (gr[c] - dot);
                  }
                });
}

inline Tensor log_softmax_rows(const Tensor& a) {
  check(a.defined(), "log_softmax: undefined tensor");
  detail::require_rank2("log_softmax", a);
  Tape& t = *a.tape();
  int rows = a.shape()[0], cols = a.shape()[1];
  std::vector<double> out(a.value().size());
  const auto& av = a.value();
  for (int r = 0; r < rows; ++r) {
    const double* x = av.data() + static_cast<size_t>(r) * cols;
    double* y = out.data() + static_cast<size_t>(r) * cols;
    double mx = x[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
    double z = 0;
    for (int c = 0; c < cols; ++c) z += std::exp(x[c] - mx);
    double lz = mx + std::log(z);
    for (int c = 0; c < cols; ++c) y[c] = x[c] - lz;
  }
  int ia = a.id();
  return t.emit({rows, cols}, std::move(out), a.requires_grad(),
                [ia, rows, cols](Tape& tp, int self) {
                  const auto& g = tp.grad_buf(self);
                  const auto& y = tp.val(self);
                  auto& da = tp.grad_buf(ia);
                  for (int r = 0; r < rows; ++r) {
                    const double* yr = y.data() + static_cast<size_t>(r) * cols;
                    const double* gr = g.data() + static_cast<size_t>(r) * cols;
                    double gs = 0;
                    for (int c = 0; c < cols; ++c) gs += gr[c];
                    double* dr = da.data() + static_cast<size_t>(r) * cols;
                    for (int c = 0; c < cols; ++c)
                      dr[c] += gr[c] - std::exp(yr[c]) * gs;
                  }
                });
}

// ---------------------------------------------------------------------------
// Gather / lookup.
// ---------------------------------------------------------------------------

// Rows of table[V,D] selected by ids -> [B,D]. Embedding lookup; backward
// scatter-adds into the table.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  check(table.defined(), "gather_rows: undefined tensor");
  detail::require_rank2("gather_rows", table);
  Tape& t = *table.tape();
  int v = table.shape()[0], d = table.shape()[1];
  int b = static_cast<int>(ids.size());
  std::vector<double> out(static_cast<size_t>(b) * d);
  const auto& tv = table.value();
  for (int r = 0; r < b; ++r) {
    check(ids[r] >= 0 && ids[r] < v,
          "gather_rows: id " + std::to_string(ids[r]) + " out of range [0," +
              std::to_string(v) + ")");
    std::copy(tv.begin() + static_cast<size_t>(ids[r]) * d,
              tv.begin() + static_cast<size_t>(ids[r] + 1) * d,
              out.begin() + static_cast<size_t>(r) * d);
  }
  int it = table.id();
  return t.emit({b, d}, std::move(out), table.requires_grad(),
                [it, ids, d](Tape& tp, int self) {
                  const auto& g = tp.grad_buf(self);
                  auto& dt = tp.grad_buf(it);
                  for (size_t r = 0; r < ids.size(); ++r)
                    for (int c = 0; c < d; ++c)
                      dt[static_cast<size_t>(ids[r]) * d + c] +=
                          g[r * static_cast<size_t>(d) + c];
                });
}

// Per-row entry pick: x[B,V], ids[B] -> [B,1] with out[r] = x[r, ids[r]].
inline Tensor pick_col(const Tensor& x, const std::vector<int>& ids) {
  check(x.defined(), "pick_col: undefined tensor");
  detail::require_rank2("pick_col", x);
  Tape& t = *x.tape();
  int rows = x.shape()[0], cols = x.shape()[1];
  check(static_cast<int>(ids.size()) == rows,
        "pick_col: ids length " + std::to_string(ids.size()) + " != rows " +
            std::to_string(rows));
  std::vector<double> out(rows);
  const auto& xv = x.value();
  for (int r = 0; r < rows; ++r) {
    check(ids[r] >= 0 && ids[r] < cols,
          "pick_col: id " + std::to_string(ids[r]) + " out of range [0," +
              std::to_string(cols) + ")");
    out[r] = xv[static_cast<size_t>(r) * cols + ids[r]];
  }
  int ix = x.id();
  return t.emit({rows, 1}, std::move(out), x.requires_grad(),
                [ix, ids, cols](Tape& tp, int self) {
                  const auto& g = tp.grad_buf(self);
                  auto& dx = tp.grad_buf(ix);
                  for (size_t r = 0; r < ids.size(); ++r)
                    dx[r * static_cast<size_t>(cols) + ids[r]] += g[r];
                });
}

// ---------------------------------------------------------------------------
// Dropout.
// ---------------------------------------------------------------------------

// Inverted dropout: keeps each entry with probability 1-rate and divides by
// the keep probability, so eval-time forward needs no rescaling (callers
// simply skip the op at eval time). Mask is drawn from the supplied rng.
inline Tensor dropout(const Tensor& a, double rate, Rng& rng) {
  check(a.defined(), "dropout: undefined tensor");
  check(rate >= 0.0 && rate < 1.0,
        "dropout: rate " + std::to_string(rate) + " outside [0,1)");
  Tape& t = *a.tape();
  if (rate == 0.0) return t.emit(a.shape(), a.value(), a.requires_grad(),
                                 [ia = a.id()](Tape& tp, int self) {
                                   const auto& g = tp.grad_buf(self);
                                   auto& da = tp.grad_buf(ia);
                                   for (size_t i = 0; i < g.size(); ++i)
                                     da[i] += g[i];
                                 });
  double keep = 1.0 - rate;
  const auto& av = a.value();
  std::vector<double> mask(av.size());
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) {
    mask[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
    out[i] = av[i] * mask[i];
  }
  int ia = a.id();
  return t.emit(a.shape(), std::move(out), a.requires_grad(),
                [ia, mask = std::move(mask)](Tape& tp, int self) {
                  const auto& g = tp.grad_buf(self);
                  auto& da = tp.grad_buf(ia);
                  for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * mask[i];
                });
}

// ---------------------------------------------------------------------------
// Catalogue.
// ---------------------------------------------------------------------------

// Names of every differentiable primitive the tape records. Tests iterate
// this list to keep finite-difference coverage honest.
inline std::vector<std::string> kernel_set() {
  return {
      "add",        "sub",          "mul",
      "div",        "sq_diff",      "scalar_mul",
      "add_scalar", "exp",          "log",
      "tanh",       "sigmoid",      "relu",
      "softplus",   "clamp_min",    "stop_gradient",
      "matmul",     "affine",       "concat_cols",
      "slice_cols", "row_sum",      "row_scale",
      "sum_all",    "mean_all",     "softmax_rows",
      "log_softmax_rows",           "gather_rows",
      "pick_col",   "dropout",
  };
}

}  // namespace vmmt
