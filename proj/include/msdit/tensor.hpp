#pragma once

// Dense row-major tensors and a define-by-run reverse-mode tape.
//
// The tape owns every intermediate value.  Ops append a node, compute the
// forward value eagerly, and register a closure that scatters the node's
// gradient into its parents.  backward() walks nodes in reverse creation
// order, which is a valid topological order by construction.
//
// Every op output is scanned for NaN/Inf and throws numeric_error on the
// first hit; silent propagation of non-finite values is never allowed.
//
// Real is float for training/inference and double for gradient checks.

#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <deque>
#include <vector>

#include "msdit/common.hpp"

namespace msdit {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class Real>
struct Tensor {
  Shape shape;
  std::vector<Real> v;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)) {
    for (int64_t d : shape)
      if (d <= 0) throw shape_error("tensor extent must be positive, got " + shape_str(shape));
    v.assign(static_cast<size_t>(shape_numel(shape)), Real(0));
  }
  Tensor(Shape s, std::vector<Real> data) : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<int64_t>(v.size()) != shape_numel(shape))
      throw shape_error("tensor data size " + std::to_string(v.size()) + " does not match shape " +
                        shape_str(shape));
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  Real* data() { return v.data(); }
  const Real* data() const { return v.data(); }
};

template <class Real>
Tensor<Real> zeros(Shape s) {
  return Tensor<Real>(std::move(s));
}

template <class Real>
Tensor<Real> full(Shape s, Real value) {
  Tensor<Real> t(std::move(s));
  std::fill(t.v.begin(), t.v.end(), value);
  return t;
}

template <class Real>
Tensor<Real> randn(Shape s, Rng& rng, double stddev = 1.0) {
  Tensor<Real> t(std::move(s));
  for (auto& x : t.v) x = static_cast<Real>(rng.normal() * stddev);
  return t;
}

template <class To, class From>
Tensor<To> cast(const Tensor<From>& t) {
  Tensor<To> out(t.shape);
  for (size_t i = 0; i < t.v.size(); ++i) out.v[i] = static_cast<To>(t.v[i]);
  return out;
}

template <class Real>
void check_finite(const Tensor<Real>& t, const char* where) {
  for (const Real x : t.v)
    if (!std::isfinite(x)) throw numeric_error(std::string(where) + ": non-finite value produced");
}

// ---------------------------------------------------------------------------
// Raw kernels.  Row-major, fixed summation order for deterministic results.

namespace kern {

// c[m,n] = a[m,k] * b[k,n].  Register-tiled over j so each output tile is
// accumulated entirely in registers before a single store.
namespace detail {

// One register-resident output tile of width JT, accumulated across the full
// k extent before a single store.
template <int JT, class Real>
inline void mm_row_tile(const Real* ai, const Real* b, Real* ci, int64_t k, int64_t n,
                        int64_t j0) {
  Real acc[JT] = {};
  for (int64_t p = 0; p < k; ++p) {
    const Real ap = ai[p];
    const Real* bp = b + p * n + j0;
    for (int j = 0; j < JT; ++j) acc[j] += ap * bp[j];
  }
  for (int j = 0; j < JT; ++j) ci[j0 + j] = acc[j];
}

}  // namespace detail

template <class Real>
void mm_nn(const Real* a, const Real* b, Real* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const Real* ai = a + i * k;
    Real* ci = c + i * n;
    int64_t j0 = 0;
    for (; j0 + 64 <= n; j0 += 64) detail::mm_row_tile<64>(ai, b, ci, k, n, j0);
    for (; j0 + 32 <= n; j0 += 32) detail::mm_row_tile<32>(ai, b, ci, k, n, j0);
    for (; j0 + 16 <= n; j0 += 16) detail::mm_row_tile<16>(ai, b, ci, k, n, j0);
    for (; j0 + 8 <= n; j0 += 8) detail::mm_row_tile<8>(ai, b, ci, k, n, j0);
    for (; j0 < n; ++j0) {
      Real s = 0;
      for (int64_t p = 0; p < k; ++p) s += ai[p] * b[p * n + j0];
      ci[j0] = s;
    }
  }
}

namespace detail {

template <int JT, class Real>
inline void mm_acc_row_tile(const Real* ai, const Real* b, Real* ci, int64_t k, int64_t n,
                            int64_t j0) {
  Real acc[JT];
  for (int j = 0; j < JT; ++j) acc[j] = ci[j0 + j];
  for (int64_t p = 0; p < k; ++p) {
    const Real ap = ai[p];
    const Real* bp = b + p * n + j0;
    for (int j = 0; j < JT; ++j) acc[j] += ap * bp[j];
  }
  for (int j = 0; j < JT; ++j) ci[j0 + j] = acc[j];
}

}  // namespace detail

// c[m,n] += a[m,k] * b[k,n]
template <class Real>
void mm_acc_nn(const Real* a, const Real* b, Real* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const Real* ai = a + i * k;
    Real* ci = c + i * n;
    int64_t j0 = 0;
    for (; j0 + 64 <= n; j0 += 64) detail::mm_acc_row_tile<64>(ai, b, ci, k, n, j0);
    for (; j0 + 32 <= n; j0 += 32) detail::mm_acc_row_tile<32>(ai, b, ci, k, n, j0);
    for (; j0 + 16 <= n; j0 += 16) detail::mm_acc_row_tile<16>(ai, b, ci, k, n, j0);
    for (; j0 + 8 <= n; j0 += 8) detail::mm_acc_row_tile<8>(ai, b, ci, k, n, j0);
    for (; j0 < n; ++j0) {
      Real s = ci[j0];
      for (int64_t p = 0; p < k; ++p) s += ai[p] * b[p * n + j0];
      ci[j0] = s;
    }
  }
}

// dst[cols, rows] = src[rows, cols]^T, blocked for cache locality.
template <class Real>
void transpose(const Real* src, Real* dst, int64_t rows, int64_t cols) {
  constexpr int64_t BT = 32;
  for (int64_t r0 = 0; r0 < rows; r0 += BT)
    for (int64_t c0 = 0; c0 < cols; c0 += BT) {
      const int64_t r1 = std::min(r0 + BT, rows);
      const int64_t c1 = std::min(c0 + BT, cols);
      for (int64_t r = r0; r < r1; ++r)
        for (int64_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
    }
}

// da[m,k] += g[m,n] * b[k,n]^T.  Materializing b^T turns the row-by-row dot
// products into the same register-tiled accumulation as mm_acc_nn, which is
// several times faster for the narrow-n case.
template <class Real>
void mm_acc_nt(const Real* g, const Real* b, Real* da, int64_t m, int64_t k, int64_t n) {
  std::vector<Real> bt(static_cast<size_t>(n * k));
  transpose(b, bt.data(), k, n);
  mm_acc_nn(g, bt.data(), da, m, n, k);
}

// db[k,n] += a[m,k]^T * g[m,n].  Four g rows per pass amortize the db
// load/store traffic.
template <class Real>
void mm_acc_tn(const Real* a, const Real* g, Real* db, int64_t m, int64_t k, int64_t n) {
  int64_t i0 = 0;
  for (; i0 + 4 <= m; i0 += 4) {
    const Real* g0 = g + (i0 + 0) * n;
    const Real* g1 = g + (i0 + 1) * n;
    const Real* g2 = g + (i0 + 2) * n;
    const Real* g3 = g + (i0 + 3) * n;
    for (int64_t p = 0; p < k; ++p) {
      const Real a0 = a[(i0 + 0) * k + p];
      const Real a1 = a[(i0 + 1) * k + p];
      const Real a2 = a[(i0 + 2) * k + p];
      const Real a3 = a[(i0 + 3) * k + p];
      Real* dbp = db + p * n;
      for (int64_t j = 0; j < n; ++j) dbp[j] += a0 * g0[j] + a1 * g1[j] + a2 * g2[j] + a3 * g3[j];
    }
  }
  for (; i0 < m; ++i0) {
    const Real* g0 = g + i0 * n;
    for (int64_t p = 0; p < k; ++p) {
      const Real a0 = a[i0 * k + p];
      Real* dbp = db + p * n;
      for (int64_t j = 0; j < n; ++j) dbp[j] += a0 * g0[j];
    }
  }
}

template <class Real>
void permute_copy(const Real* src, Real* dst, const Shape& in_shape, const std::vector<int>& perm) {
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape(r);
  std::vector<int64_t> in_strides(r), src_stride(r);
  int64_t acc = 1;
  for (int d = r - 1; d >= 0; --d) {
    in_strides[d] = acc;
    acc *= in_shape[d];
  }
  for (int d = 0; d < r; ++d) {
    out_shape[d] = in_shape[perm[d]];
    src_stride[d] = in_strides[perm[d]];
  }
  std::vector<int64_t> idx(r, 0);
  int64_t off = 0;
  const int64_t total = shape_numel(in_shape);
  for (int64_t lin = 0; lin < total; ++lin) {
    dst[lin] = src[off];
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[d] < out_shape[d]) {
        off += src_stride[d];
        break;
      }
      idx[d] = 0;
      off -= src_stride[d] * (out_shape[d] - 1);
    }
  }
}

}  // namespace kern

// ---------------------------------------------------------------------------

// Handle to a tape node.  Default-constructed Var means "absent" (used for
// optional bias arguments).
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Channel split of a rotary head dimension across (time, height, width).
struct RopeSplit {
  int t = 0, h = 0, w = 0;
  int sum() const { return t + h + w; }
};

template <class Real>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  size_t node_count() const { return nodes_.size(); }

  Var input(Tensor<Real> value, bool needs_grad = false) {
    check_finite(value, "input");
    return push(std::move(value), needs_grad, {});
  }

  const Tensor<Real>& val(Var v) const { return node(v).value; }

  bool needs_grad(Var v) const { return node(v).needs; }

  const Tensor<Real>& grad(Var v) const {
    const NodeT& nd = node(v);
    if (!nd.has_grad)
      throw contract_error("grad: node has no gradient (backward not run or node unused)");
    return nd.grad;
  }

  bool has_grad(Var v) const { return node(v).has_grad; }

  void backward(Var root) {
    NodeT& r = node(root);
    if (r.value.numel() != 1) throw contract_error("backward: root must be a scalar");
    if (backward_done_) throw contract_error("backward: tape already swept");
    backward_done_ = true;
    grad_buf(root.id).v[0] = Real(1);
    for (int32_t i = root.id; i >= 0; --i) {
      NodeT& nd = nodes_[static_cast<size_t>(i)];
      if (nd.has_grad && nd.back) nd.back();
    }
  }

  // -- elementwise ----------------------------------------------------------

  Var add(Var a, Var b) { return ew2(a, b, "add", [](Real x, Real y) { return x + y; }, 1, 1); }
  Var sub(Var a, Var b) { return ew2(a, b, "sub", [](Real x, Real y) { return x - y; }, 1, -1); }

  Var mul(Var a, Var b) {
    require_same(a, b, "mul");
    Tensor<Real> out(val(a).shape);
    const auto& av = val(a).v;
    const auto& bv = val(b).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] * bv[i];
    check_finite(out, "mul");
    Var o = push(std::move(out), needs_grad(a) || needs_grad(b), {a, b});
    if (node(o).needs)
      node(o).back = [this, o, a, b] {
        const auto& g = node(o).grad.v;
        if (needs_grad(a)) {
          auto& ga = grad_buf(a.id).v;
          const auto& bv = val(b).v;
          for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (needs_grad(b)) {
          auto& gb = grad_buf(b.id).v;
          const auto& av = val(a).v;
          for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
      };
    return o;
  }

  Var scale(Var a, Real c) {
    if (!std::isfinite(c)) throw numeric_error("scale: non-finite factor");
    Tensor<Real> out(val(a).shape);
    const auto& av = val(a).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] * c;
    check_finite(out, "scale");
    Var o = push(std::move(out), needs_grad(a), {a});
    if (node(o).needs)
      node(o).back = [this, o, a, c] {
        const auto& g = node(o).grad.v;
        auto& ga = grad_buf(a.id).v;
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
      };
    return o;
  }

  Var silu(Var a) {
    Tensor<Real> out(val(a).shape);
    const auto& av = val(a).v;
    for (size_t i = 0; i < out.v.size(); ++i) {
      const Real s = sigmoid(av[i]);
      out.v[i] = av[i] * s;
    }
    check_finite(out, "silu");
    Var o = push(std::move(out), needs_grad(a), {a});
    if (node(o).needs)
      node(o).back = [this, o, a] {
        const auto& g = node(o).grad.v;
        const auto& av = val(a).v;
        auto& ga = grad_buf(a.id).v;
        for (size_t i = 0; i < g.size(); ++i) {
          const Real s = sigmoid(av[i]);
          ga[i] += g[i] * s * (Real(1) + av[i] * (Real(1) - s));
        }
      };
    return o;
  }

  // -- linear algebra -------------------------------------------------------

  // Plain [m,k]x[k,n], equal-batch [B,m,k]x[B,k,n], or grouped [B,m,k]x[Bk,k,n]
  // where B is a multiple of Bk and batch i of the left operand pairs with
  // batch i/(B/Bk) of the right (key/value sharing across query-head groups).
  Var matmul(Var a, Var b) {
    const Tensor<Real>& A = val(a);
    const Tensor<Real>& B = val(b);
    int64_t ba = 1, bb = 1;
    int64_t m, k, k2, n;
    if (A.rank() == 2 && B.rank() == 2) {
      m = A.shape[0], k = A.shape[1], k2 = B.shape[0], n = B.shape[1];
    } else if (A.rank() == 3 && B.rank() == 3) {
      ba = A.shape[0], bb = B.shape[0];
      m = A.shape[1], k = A.shape[2], k2 = B.shape[1], n = B.shape[2];
      if (ba % bb != 0)
        throw shape_error("matmul: left batch " + std::to_string(ba) +
                          " not a multiple of right batch " + std::to_string(bb));
    } else {
      throw shape_error("matmul: ranks must be 2x2 or 3x3, got " + shape_str(A.shape) + " x " +
                        shape_str(B.shape));
    }
    if (k != k2)
      throw shape_error("matmul: inner dims differ, " + shape_str(A.shape) + " x " +
                        shape_str(B.shape));
    Shape out_shape = (A.rank() == 2) ? Shape{m, n} : Shape{ba, m, n};
    Tensor<Real> out(out_shape);
    const int64_t grp = ba / bb;
    for (int64_t i = 0; i < ba; ++i)
      kern::mm_nn(A.data() + i * m * k, B.data() + (i / grp) * k * n, out.data() + i * m * n, m, k,
                  n);
    check_finite(out, "matmul");
    Var o = push(std::move(out), needs_grad(a) || needs_grad(b), {a, b});
    if (node(o).needs)
      node(o).back = [this, o, a, b, ba, grp, m, k, n] {
        const Tensor<Real>& g = node(o).grad;
        if (needs_grad(a)) {
          Tensor<Real>& ga = grad_buf(a.id);
          for (int64_t i = 0; i < ba; ++i)
            kern::mm_acc_nt(g.data() + i * m * n, val(b).data() + (i / grp) * k * n,
                            ga.data() + i * m * k, m, k, n);
        }
        if (needs_grad(b)) {
          Tensor<Real>& gb = grad_buf(b.id);
          for (int64_t i = 0; i < ba; ++i)
            kern::mm_acc_tn(val(a).data() + i * m * k, g.data() + i * m * n,
                            gb.data() + (i / grp) * k * n, m, k, n);
        }
      };
    return o;
  }

  // x[..., in] * w[in, out] + bias[out].  Pass Var{} to skip the bias.
  Var linear(Var x, Var w, Var bias = {}) {
    const Tensor<Real>& X = val(x);
    const Tensor<Real>& W = val(w);
    if (X.rank() < 1 || W.rank() != 2)
      throw shape_error("linear: need x rank>=1 and w rank 2, got " + shape_str(X.shape) + ", " +
                        shape_str(W.shape));
    const int64_t in = X.shape.back();
    const int64_t out_dim = W.shape[1];
    if (W.shape[0] != in)
      throw shape_error("linear: x last dim " + std::to_string(in) + " vs w " +
                        shape_str(W.shape));
    const int64_t rows = X.numel() / in;
    if (bias.valid()) {
      const Tensor<Real>& Bv = val(bias);
      if (Bv.rank() != 1 || Bv.shape[0] != out_dim)
        throw shape_error("linear: bias shape " + shape_str(Bv.shape) + " vs out dim " +
                          std::to_string(out_dim));
    }
    Shape out_shape = X.shape;
    out_shape.back() = out_dim;
    Tensor<Real> out(out_shape);
    kern::mm_nn(X.data(), W.data(), out.data(), rows, in, out_dim);
    if (bias.valid()) {
      const Real* bp = val(bias).data();
      for (int64_t r = 0; r < rows; ++r) {
        Real* op = out.data() + r * out_dim;
        for (int64_t j = 0; j < out_dim; ++j) op[j] += bp[j];
      }
    }
    check_finite(out, "linear");
    bool needs = needs_grad(x) || needs_grad(w) || (bias.valid() && needs_grad(bias));
    std::vector<Var> parents{x, w};
    if (bias.valid()) parents.push_back(bias);
    Var o = push(std::move(out), needs, parents);
    if (node(o).needs)
      node(o).back = [this, o, x, w, bias, rows, in, out_dim] {
        const Tensor<Real>& g = node(o).grad;
        if (needs_grad(x))
          kern::mm_acc_nt(g.data(), val(w).data(), grad_buf(x.id).data(), rows, in, out_dim);
        if (needs_grad(w))
          kern::mm_acc_tn(val(x).data(), g.data(), grad_buf(w.id).data(), rows, in, out_dim);
        if (bias.valid() && needs_grad(bias)) {
          Real* db = grad_buf(bias.id).data();
          for (int64_t r = 0; r < rows; ++r) {
            const Real* gp = g.data() + r * out_dim;
            for (int64_t j = 0; j < out_dim; ++j) db[j] += gp[j];
          }
        }
      };
    return o;
  }

  Var softmax(Var x, int axis) {
    const Tensor<Real>& X = val(x);
    const int r = X.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw shape_error("softmax: axis out of range");
    const auto [outer, d, inner] = lane_dims(X.shape, axis);
    Tensor<Real> out(X.shape);
    for (int64_t oi = 0; oi < outer; ++oi)
      for (int64_t ii = 0; ii < inner; ++ii) {
        const Real* xp = X.data() + oi * d * inner + ii;
        Real* op = out.data() + oi * d * inner + ii;
        Real mx = xp[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xp[j * inner]);
        Real sum = 0;
        for (int64_t j = 0; j < d; ++j) {
          const Real e = std::exp(xp[j * inner] - mx);
          op[j * inner] = e;
          sum += e;
        }
        const Real inv = Real(1) / sum;
        for (int64_t j = 0; j < d; ++j) op[j * inner] *= inv;
      }
    check_finite(out, "softmax");
    Var o = push(std::move(out), needs_grad(x), {x});
    if (node(o).needs)
      node(o).back = [this, o, x, outer = outer, d = d, inner = inner] {
        const Tensor<Real>& g = node(o).grad;
        const Tensor<Real>& y = node(o).value;
        Tensor<Real>& gx = grad_buf(x.id);
        for (int64_t oi = 0; oi < outer; ++oi)
          for (int64_t ii = 0; ii < inner; ++ii) {
            const int64_t base = oi * d * inner + ii;
            Real dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += g.v[base + j * inner] * y.v[base + j * inner];
            for (int64_t j = 0; j < d; ++j)
              gx.v[base + j * inner] += y.v[base + j * inner] * (g.v[base + j * inner] - dot);
          }
      };
    return o;
  }

  // RMS normalization over the last axis with a learned per-channel weight.
  Var rms_norm(Var x, Var w, Real eps = Real(1e-5)) {
    const Tensor<Real>& X = val(x);
    const Tensor<Real>& W = val(w);
    if (X.rank() < 1 || W.rank() != 1 || W.shape[0] != X.shape.back())
      throw shape_error("rms_norm: weight " + shape_str(W.shape) + " must match last axis of " +
                        shape_str(X.shape));
    const int64_t d = X.shape.back();
    const int64_t rows = X.numel() / d;
    Tensor<Real> out(X.shape);
    auto rstd = std::make_shared<std::vector<Real>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
      const Real* xp = X.data() + r * d;
      Real ss = 0;
      for (int64_t j = 0; j < d; ++j) ss += xp[j] * xp[j];
      const Real inv = Real(1) / std::sqrt(ss / static_cast<Real>(d) + eps);
      (*rstd)[static_cast<size_t>(r)] = inv;
      Real* op = out.data() + r * d;
      for (int64_t j = 0; j < d; ++j) op[j] = xp[j] * inv * W.data()[j];
    }
    check_finite(out, "rms_norm");
    Var o = push(std::move(out), needs_grad(x) || needs_grad(w), {x, w});
    if (node(o).needs)
      node(o).back = [this, o, x, w, rows, d, rstd] {
        const Tensor<Real>& g = node(o).grad;
        const Tensor<Real>& X = val(x);
        const Tensor<Real>& W = val(w);
        for (int64_t r = 0; r < rows; ++r) {
          const Real* xp = X.data() + r * d;
          const Real* gp = g.data() + r * d;
          const Real inv = (*rstd)[static_cast<size_t>(r)];
          if (needs_grad(x)) {
            Real s = 0;
            for (int64_t j = 0; j < d; ++j) s += gp[j] * W.data()[j] * xp[j];
            const Real c = inv * inv * inv * s / static_cast<Real>(d);
            Real* gx = grad_buf(x.id).data() + r * d;
            for (int64_t j = 0; j < d; ++j) gx[j] += gp[j] * W.data()[j] * inv - xp[j] * c;
          }
          if (needs_grad(w)) {
            Real* gw = grad_buf(w.id).data();
            for (int64_t j = 0; j < d; ++j) gw[j] += gp[j] * xp[j] * inv;
          }
        }
      };
    return o;
  }

  // -- structure ------------------------------------------------------------

  Var reshape(Var x, Shape new_shape) {
    const Tensor<Real>& X = val(x);
    if (shape_numel(new_shape) != X.numel())
      throw shape_error("reshape: " + shape_str(X.shape) + " -> " + shape_str(new_shape) +
                        " changes element count");
    Tensor<Real> out(new_shape, X.v);
    Var o = push(std::move(out), needs_grad(x), {x});
    if (node(o).needs)
      node(o).back = [this, o, x] {
        const auto& g = node(o).grad.v;
        auto& gx = grad_buf(x.id).v;
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      };
    return o;
  }

  Var permute(Var x, std::vector<int> perm) {
    const Tensor<Real>& X = val(x);
    const int r = X.rank();
    if (static_cast<int>(perm.size()) != r) throw shape_error("permute: perm rank mismatch");
    std::vector<bool> seen(static_cast<size_t>(r), false);
    for (int p : perm) {
      if (p < 0 || p >= r || seen[static_cast<size_t>(p)])
        throw shape_error("permute: invalid permutation");
      seen[static_cast<size_t>(p)] = true;
    }
    Shape out_shape(static_cast<size_t>(r));
    for (int dd = 0; dd < r; ++dd) out_shape[static_cast<size_t>(dd)] = X.shape[static_cast<size_t>(perm[static_cast<size_t>(dd)])];
    Tensor<Real> out(out_shape);
    kern::permute_copy(X.data(), out.data(), X.shape, perm);
    Var o = push(std::move(out), needs_grad(x), {x});
    if (node(o).needs)
      node(o).back = [this, o, x, perm, out_shape] {
        std::vector<int> inv(perm.size());
        for (size_t dd = 0; dd < perm.size(); ++dd) inv[static_cast<size_t>(perm[dd])] = static_cast<int>(dd);
        Tensor<Real> tmp(val(x).shape);
        kern::permute_copy(node(o).grad.data(), tmp.data(), out_shape, inv);
        auto& gx = grad_buf(x.id).v;
        for (size_t i = 0; i < tmp.v.size(); ++i) gx[i] += tmp.v[i];
      };
    return o;
  }

  Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw shape_error("concat: no parts");
    const Tensor<Real>& first = val(parts[0]);
    const int r = first.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw shape_error("concat: axis out of range");
    Shape out_shape = first.shape;
    int64_t total = 0;
    for (Var p : parts) {
      const Tensor<Real>& P = val(p);
      if (P.rank() != r) throw shape_error("concat: rank mismatch");
      for (int dd = 0; dd < r; ++dd)
        if (dd != axis && P.shape[static_cast<size_t>(dd)] != first.shape[static_cast<size_t>(dd)])
          throw shape_error("concat: extent mismatch off the concat axis");
      total += P.shape[static_cast<size_t>(axis)];
    }
    out_shape[static_cast<size_t>(axis)] = total;
    int64_t outer = 1, inner = 1;
    for (int dd = 0; dd < axis; ++dd) outer *= first.shape[static_cast<size_t>(dd)];
    for (int dd = axis + 1; dd < r; ++dd) inner *= first.shape[static_cast<size_t>(dd)];
    Tensor<Real> out(out_shape);
    int64_t off = 0;
    for (Var p : parts) {
      const Tensor<Real>& P = val(p);
      const int64_t width = P.shape[static_cast<size_t>(axis)] * inner;
      for (int64_t oi = 0; oi < outer; ++oi)
        std::memcpy(out.data() + oi * total * inner + off, P.data() + oi * width,
                    static_cast<size_t>(width) * sizeof(Real));
      off += width;
    }
    bool needs = false;
    for (Var p : parts) needs = needs || needs_grad(p);
    Var o = push(std::move(out), needs, parts);
    if (node(o).needs)
      node(o).back = [this, o, parts, outer, inner, total, axis] {
        const Tensor<Real>& g = node(o).grad;
        int64_t off = 0;
        for (Var p : parts) {
          const int64_t width = val(p).shape[static_cast<size_t>(axis)] * inner;
          if (needs_grad(p)) {
            Real* gp = grad_buf(p.id).data();
            for (int64_t oi = 0; oi < outer; ++oi) {
              const Real* gs = g.data() + oi * total * inner + off;
              Real* gd = gp + oi * width;
              for (int64_t j = 0; j < width; ++j) gd[j] += gs[j];
            }
          }
          off += width;
        }
      };
    return o;
  }

  std::vector<Var> split(Var x, int axis, const std::vector<int64_t>& sizes) {
    const Tensor<Real>& X = val(x);
    const int r = X.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw shape_error("split: axis out of range");
    int64_t total = 0;
    for (int64_t s : sizes) {
      if (s <= 0) throw shape_error("split: sizes must be positive");
      total += s;
    }
    if (total != X.shape[static_cast<size_t>(axis)])
      throw shape_error("split: sizes sum " + std::to_string(total) + " vs axis extent " +
                        std::to_string(X.shape[static_cast<size_t>(axis)]));
    int64_t outer = 1, inner = 1;
    for (int dd = 0; dd < axis; ++dd) outer *= X.shape[static_cast<size_t>(dd)];
    for (int dd = axis + 1; dd < r; ++dd) inner *= X.shape[static_cast<size_t>(dd)];
    std::vector<Var> outs;
    int64_t off = 0;
    for (int64_t s : sizes) {
      Shape os = X.shape;
      os[static_cast<size_t>(axis)] = s;
      Tensor<Real> part(os);
      const int64_t width = s * inner;
      for (int64_t oi = 0; oi < outer; ++oi)
        std::memcpy(part.data() + oi * width, X.data() + oi * total * inner + off,
                    static_cast<size_t>(width) * sizeof(Real));
      Var o = push(std::move(part), needs_grad(x), {x});
      if (node(o).needs)
        node(o).back = [this, o, x, outer, inner, total, off, width] {
          const Tensor<Real>& g = node(o).grad;
          Real* gx = grad_buf(x.id).data();
          for (int64_t oi = 0; oi < outer; ++oi) {
            const Real* gs = g.data() + oi * width;
            Real* gd = gx + oi * total * inner + off;
            for (int64_t j = 0; j < width; ++j) gd[j] += gs[j];
          }
        };
      outs.push_back(o);
      off += width;
    }
    return outs;
  }

  // out[i] = x.flat[index[i]].  Backward scatter-adds, so repeated indices
  // accumulate.
  Var take(Var x, std::shared_ptr<const std::vector<int64_t>> index, Shape out_shape) {
    const Tensor<Real>& X = val(x);
    if (static_cast<int64_t>(index->size()) != shape_numel(out_shape))
      throw shape_error("take: index size vs out shape mismatch");
    const int64_t src_n = X.numel();
    Tensor<Real> out(out_shape);
    for (size_t i = 0; i < index->size(); ++i) {
      const int64_t src = (*index)[i];
      if (src < 0 || src >= src_n)
        throw contract_error("take: index " + std::to_string(src) + " out of range [0," +
                             std::to_string(src_n) + ")");
      out.v[i] = X.v[static_cast<size_t>(src)];
    }
    Var o = push(std::move(out), needs_grad(x), {x});
    if (node(o).needs)
      node(o).back = [this, o, x, index] {
        const auto& g = node(o).grad.v;
        auto& gx = grad_buf(x.id).v;
        for (size_t i = 0; i < index->size(); ++i) gx[static_cast<size_t>((*index)[i])] += g[i];
      };
    return o;
  }

  // -- reductions -----------------------------------------------------------

  Var sum_all(Var x) { return reduce(x, false); }
  Var mean_all(Var x) { return reduce(x, true); }

  // Mean squared error against a constant target.
  Var mse(Var pred, const Tensor<Real>& target) {
    const Tensor<Real>& P = val(pred);
    if (P.shape != target.shape)
      throw shape_error("mse: pred " + shape_str(P.shape) + " vs target " +
                        shape_str(target.shape));
    check_finite(target, "mse target");
    const int64_t n = P.numel();
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
      const double dd = static_cast<double>(P.v[static_cast<size_t>(i)]) -
                        static_cast<double>(target.v[static_cast<size_t>(i)]);
      acc += dd * dd;
    }
    Tensor<Real> out(Shape{});
    out.v[0] = static_cast<Real>(acc / static_cast<double>(n));
    check_finite(out, "mse");
    auto tgt = std::make_shared<Tensor<Real>>(target);
    Var o = push(std::move(out), needs_grad(pred), {pred});
    if (node(o).needs)
      node(o).back = [this, o, pred, tgt, n] {
        const Real gv = node(o).grad.v[0];
        const Real c = gv * Real(2) / static_cast<Real>(n);
        const auto& pv = val(pred).v;
        auto& gp = grad_buf(pred.id).v;
        for (int64_t i = 0; i < n; ++i)
          gp[static_cast<size_t>(i)] += c * (pv[static_cast<size_t>(i)] - tgt->v[static_cast<size_t>(i)]);
      };
    return o;
  }

  // -- conditioning helpers ---------------------------------------------------

  Var embedding(Var table, const std::vector<int64_t>& ids) {
    const Tensor<Real>& T = val(table);
    if (T.rank() != 2) throw shape_error("embedding: table must be rank 2");
    const int64_t vocab = T.shape[0], dim = T.shape[1];
    for (int64_t id : ids)
      if (id < 0 || id >= vocab)
        throw contract_error("embedding: id " + std::to_string(id) + " out of range [0," +
                             std::to_string(vocab) + ")");
    Tensor<Real> out(Shape{static_cast<int64_t>(ids.size()), dim});
    for (size_t r = 0; r < ids.size(); ++r)
      std::memcpy(out.data() + static_cast<int64_t>(r) * dim, T.data() + ids[r] * dim,
                  static_cast<size_t>(dim) * sizeof(Real));
    Var o = push(std::move(out), needs_grad(table), {table});
    if (node(o).needs)
      node(o).back = [this, o, table, ids, dim] {
        const Tensor<Real>& g = node(o).grad;
        Real* gt = grad_buf(table.id).data();
        for (size_t r = 0; r < ids.size(); ++r) {
          const Real* gp = g.data() + static_cast<int64_t>(r) * dim;
          Real* tp = gt + ids[r] * dim;
          for (int64_t j = 0; j < dim; ++j) tp[j] += gp[j];
        }
      };
    return o;
  }

  // [sin(t*f_0)..sin(t*f_{half-1}), cos(t*f_0)..cos(t*f_{half-1})] with
  // f_j = 10000^(-j/half).  t must be a scalar node.
  Var sinusoidal(Var t, int dim) {
    const Tensor<Real>& T = val(t);
    if (T.numel() != 1) throw shape_error("sinusoidal: t must be scalar");
    if (dim <= 0 || dim % 2 != 0) throw shape_error("sinusoidal: dim must be positive and even");
    const int half = dim / 2;
    const double tv = static_cast<double>(T.v[0]);
    Tensor<Real> out(Shape{dim});
    auto freqs = std::make_shared<std::vector<double>>(static_cast<size_t>(half));
    for (int j = 0; j < half; ++j) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(j) / half);
      (*freqs)[static_cast<size_t>(j)] = f;
      out.v[static_cast<size_t>(j)] = static_cast<Real>(std::sin(tv * f));
      out.v[static_cast<size_t>(half + j)] = static_cast<Real>(std::cos(tv * f));
    }
    check_finite(out, "sinusoidal");
    Var o = push(std::move(out), needs_grad(t), {t});
    if (node(o).needs)
      node(o).back = [this, o, t, half, tv, freqs] {
        const auto& g = node(o).grad.v;
        double acc = 0;
        for (int j = 0; j < half; ++j) {
          const double f = (*freqs)[static_cast<size_t>(j)];
          acc += static_cast<double>(g[static_cast<size_t>(j)]) * f * std::cos(tv * f);
          acc -= static_cast<double>(g[static_cast<size_t>(half + j)]) * f * std::sin(tv * f);
        }
        grad_buf(t.id).v[0] += static_cast<Real>(acc);
      };
    return o;
  }

  // Rotary embedding on x[N, heads, head_dim] with per-token integer (t,h,w)
  // coordinates.  Channels are pre-split per axis; within an axis, adjacent
  // channel pairs (2q, 2q+1) rotate by coord * base^(-2q/c_axis).
  Var rope3d(Var x, std::shared_ptr<const std::vector<std::array<int64_t, 3>>> coords,
             RopeSplit split, double base = 10000.0) {
    const Tensor<Real>& X = val(x);
    if (X.rank() != 3) throw shape_error("rope3d: x must be [tokens, heads, head_dim]");
    const int64_t N = X.shape[0], H = X.shape[1], hd = X.shape[2];
    if (split.t < 0 || split.h < 0 || split.w < 0 || split.t % 2 || split.h % 2 || split.w % 2 ||
        split.sum() != hd)
      throw shape_error("rope3d: channel split must be even per axis and sum to head_dim");
    if (static_cast<int64_t>(coords->size()) != N)
      throw shape_error("rope3d: coords size " + std::to_string(coords->size()) + " vs tokens " +
                        std::to_string(N));
    const int64_t pairs = hd / 2;
    auto cs = std::make_shared<std::vector<Real>>(static_cast<size_t>(N * pairs * 2));
    const int axis_pairs[3] = {split.t / 2, split.h / 2, split.w / 2};
    for (int64_t nn = 0; nn < N; ++nn) {
      Real* row = cs->data() + nn * pairs * 2;
      int64_t p = 0;
      for (int axis = 0; axis < 3; ++axis) {
        const double pos = static_cast<double>((*coords)[static_cast<size_t>(nn)][static_cast<size_t>(axis)]);
        const int ap = axis_pairs[axis];
        for (int q = 0; q < ap; ++q, ++p) {
          const double theta = pos * std::pow(base, -2.0 * q / (2.0 * ap));
          row[p * 2 + 0] = static_cast<Real>(std::cos(theta));
          row[p * 2 + 1] = static_cast<Real>(std::sin(theta));
        }
      }
    }
    Tensor<Real> out(X.shape);
    rope_apply(X.data(), out.data(), cs->data(), N, H, pairs, false);
    check_finite(out, "rope3d");
    Var o = push(std::move(out), needs_grad(x), {x});
    if (node(o).needs)
      node(o).back = [this, o, x, cs, N, H, pairs] {
        Tensor<Real> tmp(val(x).shape);
        rope_apply(node(o).grad.data(), tmp.data(), cs->data(), N, H, pairs, true);
        auto& gx = grad_buf(x.id).v;
        for (size_t i = 0; i < tmp.v.size(); ++i) gx[i] += tmp.v[i];
      };
    return o;
  }

  // x[N,D] * (1 + scale[D]) + shift[D], rowwise.
  Var modulate(Var x, Var sc, Var sh) {
    const Tensor<Real>& X = val(x);
    row_vec_check(X, val(sc), "modulate scale");
    row_vec_check(X, val(sh), "modulate shift");
    const int64_t d = X.shape.back();
    const int64_t rows = X.numel() / d;
    Tensor<Real> out(X.shape);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < d; ++j)
        out.v[static_cast<size_t>(r * d + j)] =
            X.v[static_cast<size_t>(r * d + j)] * (Real(1) + val(sc).v[static_cast<size_t>(j)]) +
            val(sh).v[static_cast<size_t>(j)];
    check_finite(out, "modulate");
    bool needs = needs_grad(x) || needs_grad(sc) || needs_grad(sh);
    Var o = push(std::move(out), needs, {x, sc, sh});
    if (node(o).needs)
      node(o).back = [this, o, x, sc, sh, rows, d] {
        const Tensor<Real>& g = node(o).grad;
        if (needs_grad(x)) {
          auto& gx = grad_buf(x.id).v;
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j)
              gx[static_cast<size_t>(r * d + j)] +=
                  g.v[static_cast<size_t>(r * d + j)] * (Real(1) + val(sc).v[static_cast<size_t>(j)]);
        }
        if (needs_grad(sc)) {
          auto& gs = grad_buf(sc.id).v;
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j)
              gs[static_cast<size_t>(j)] += g.v[static_cast<size_t>(r * d + j)] *
                                            val(x).v[static_cast<size_t>(r * d + j)];
        }
        if (needs_grad(sh)) {
          auto& gh = grad_buf(sh.id).v;
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j) gh[static_cast<size_t>(j)] += g.v[static_cast<size_t>(r * d + j)];
        }
      };
    return o;
  }

  // x[N,D] * gate[D], rowwise.
  Var row_scale(Var x, Var gate) {
    const Tensor<Real>& X = val(x);
    row_vec_check(X, val(gate), "row_scale gate");
    const int64_t d = X.shape.back();
    const int64_t rows = X.numel() / d;
    Tensor<Real> out(X.shape);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < d; ++j)
        out.v[static_cast<size_t>(r * d + j)] =
            X.v[static_cast<size_t>(r * d + j)] * val(gate).v[static_cast<size_t>(j)];
    check_finite(out, "row_scale");
    Var o = push(std::move(out), needs_grad(x) || needs_grad(gate), {x, gate});
    if (node(o).needs)
      node(o).back = [this, o, x, gate, rows, d] {
        const Tensor<Real>& g = node(o).grad;
        if (needs_grad(x)) {
          auto& gx = grad_buf(x.id).v;
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j)
              gx[static_cast<size_t>(r * d + j)] +=
                  g.v[static_cast<size_t>(r * d + j)] * val(gate).v[static_cast<size_t>(j)];
        }
        if (needs_grad(gate)) {
          auto& gg = grad_buf(gate.id).v;
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < d; ++j)
              gg[static_cast<size_t>(j)] += g.v[static_cast<size_t>(r * d + j)] *
                                            val(x).v[static_cast<size_t>(r * d + j)];
        }
      };
    return o;
  }

 private:
  struct NodeT {
    Tensor<Real> value;
    Tensor<Real> grad;
    std::function<void()> back;
    bool needs = false;
    bool has_grad = false;
  };

  // Deque, not vector: ops hold references to input node values while
  // pushing output nodes, so growth must never move existing elements.
  std::deque<NodeT> nodes_;
  bool backward_done_ = false;

  static Real sigmoid(Real x) { return Real(1) / (Real(1) + std::exp(-x)); }

  NodeT& node(Var v) {
    if (!v.valid() || v.id >= static_cast<int32_t>(nodes_.size()))
      throw contract_error("invalid tape variable");
    return nodes_[static_cast<size_t>(v.id)];
  }
  const NodeT& node(Var v) const {
    if (!v.valid() || v.id >= static_cast<int32_t>(nodes_.size()))
      throw contract_error("invalid tape variable");
    return nodes_[static_cast<size_t>(v.id)];
  }

  Var push(Tensor<Real> value, bool needs, const std::vector<Var>&) {
    NodeT nd;
    nd.value = std::move(value);
    nd.needs = needs;
    nodes_.push_back(std::move(nd));
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  Tensor<Real>& grad_buf(int32_t id) {
    NodeT& nd = nodes_[static_cast<size_t>(id)];
    if (!nd.has_grad) {
      nd.grad = Tensor<Real>(nd.value.shape);
      nd.has_grad = true;
    }
    return nd.grad;
  }

  void require_same(Var a, Var b, const char* op) {
    if (val(a).shape != val(b).shape)
      throw shape_error(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) + " vs " +
                        shape_str(val(b).shape));
  }

  static void row_vec_check(const Tensor<Real>& x, const Tensor<Real>& vvec, const char* what) {
    if (x.rank() < 1 || vvec.rank() != 1 || vvec.shape[0] != x.shape.back())
      throw shape_error(std::string(what) + ": want rank-1 vector matching last axis of " +
                        shape_str(x.shape) + ", got " + shape_str(vvec.shape));
  }

  static std::tuple<int64_t, int64_t, int64_t> lane_dims(const Shape& s, int axis) {
    int64_t outer = 1, inner = 1;
    for (int dd = 0; dd < axis; ++dd) outer *= s[static_cast<size_t>(dd)];
    for (size_t dd = static_cast<size_t>(axis) + 1; dd < s.size(); ++dd) inner *= s[dd];
    return {outer, s[static_cast<size_t>(axis)], inner};
  }

  template <class F>
  Var ew2(Var a, Var b, const char* name, F op, Real wa, Real wb) {
    require_same(a, b, name);
    Tensor<Real> out(val(a).shape);
    const auto& av = val(a).v;
    const auto& bv = val(b).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = op(av[i], bv[i]);
    check_finite(out, name);
    Var o = push(std::move(out), needs_grad(a) || needs_grad(b), {a, b});
    if (node(o).needs)
      node(o).back = [this, o, a, b, wa, wb] {
        const auto& g = node(o).grad.v;
        if (needs_grad(a)) {
          auto& ga = grad_buf(a.id).v;
          for (size_t i = 0; i < g.size(); ++i) ga[i] += wa * g[i];
        }
        if (needs_grad(b)) {
          auto& gb = grad_buf(b.id).v;
          for (size_t i = 0; i < g.size(); ++i) gb[i] += wb * g[i];
        }
      };
    return o;
  }

  Var reduce(Var x, bool mean) {
    const Tensor<Real>& X = val(x);
    const int64_t n = X.numel();
    double acc = 0;
    for (const Real xv : X.v) acc += static_cast<double>(xv);
    if (mean) acc /= static_cast<double>(n);
    Tensor<Real> out(Shape{});
    out.v[0] = static_cast<Real>(acc);
    check_finite(out, mean ? "mean_all" : "sum_all");
    Var o = push(std::move(out), needs_grad(x), {x});
    if (node(o).needs)
      node(o).back = [this, o, x, n, mean] {
        const Real c = mean ? node(o).grad.v[0] / static_cast<Real>(n) : node(o).grad.v[0];
        auto& gx = grad_buf(x.id).v;
        for (auto& gv : gx) gv += c;
      };
    return o;
  }

  // Rotate channel pairs by the cached angles; invert=true rotates by the
  // negated angle (used for the gradient).
  static void rope_apply(const Real* x, Real* out, const Real* cs, int64_t N, int64_t H,
                         int64_t pairs, bool invert) {
    for (int64_t nn = 0; nn < N; ++nn) {
      const Real* row = cs + nn * pairs * 2;
      for (int64_t hh = 0; hh < H; ++hh) {
        const Real* xp = x + (nn * H + hh) * pairs * 2;
        Real* op = out + (nn * H + hh) * pairs * 2;
        for (int64_t p = 0; p < pairs; ++p) {
          const Real c = row[p * 2 + 0];
          const Real s = invert ? -row[p * 2 + 1] : row[p * 2 + 1];
          const Real x0 = xp[p * 2 + 0];
          const Real x1 = xp[p * 2 + 1];
          op[p * 2 + 0] = x0 * c - x1 * s;
          op[p * 2 + 1] = x0 * s + x1 * c;
        }
      }
    }
  }
};

}  // namespace msdit
