#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "farmamba/tensor.hpp"

// Differentiable tensor operations. Each op computes its forward result and,
// when a tape is active and an input carries gradient, records one backward
// closure. Broadcasting is deliberately restricted: bias-add, scalar ops and
// the explicitly named gating/masking ops below; everything else requires
// exact shapes, with reshape as the escape hatch.

namespace farmamba {

namespace detail {

template <class R>
inline void expect_same_shape(const char* op, const Tensor<R>& a, const Tensor<R>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

template <class R>
inline void expect_rank(const char* op, const Tensor<R>& t, std::int64_t rank) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(t.shape()));
}

inline void expect_axis(const char* op, const Shape& s, std::int64_t axis) {
  if (axis < 0 || axis >= static_cast<std::int64_t>(s.size()))
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(s));
}

// Decomposes a shape around `axis` into (outer, extent, inner) so that the
// flat index of (o, k, i) is (o * extent + k) * inner + i.
inline void axis_split(const Shape& s, std::int64_t axis, std::int64_t& outer, std::int64_t& extent,
                       std::int64_t& inner) {
  outer = 1;
  for (std::int64_t a = 0; a < axis; ++a) outer *= s[static_cast<std::size_t>(a)];
  extent = s[static_cast<std::size_t>(axis)];
  inner = 1;
  for (std::int64_t a = axis + 1; a < static_cast<std::int64_t>(s.size()); ++a)
    inner *= s[static_cast<std::size_t>(a)];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary / scalar ops
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> add(const Tensor<R>& a, const Tensor<R>& b) {
  detail::expect_same_shape("add", a, b);
  auto out = Tensor<R>::zeros(a.shape());
  const R* ap = a.values().data();
  const R* bp = b.values().data();
  R* op = out.mutable_values().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] + bp[i];
  if (grad_needed<R>(a, b)) {
    out.ensure_grad();
    record_node<R>([ga = a.grad_ptr(), gb = b.grad_ptr(), go = out.grad_ptr(), n] {
      if (ga)
        for (std::int64_t i = 0; i < n; ++i) (*ga)[i] += (*go)[i];
      if (gb)
        for (std::int64_t i = 0; i < n; ++i) (*gb)[i] += (*go)[i];
    });
  }
  return out;
}

template <class R>
Tensor<R> sub(const Tensor<R>& a, const Tensor<R>& b) {
  detail::expect_same_shape("sub", a, b);
  auto out = Tensor<R>::zeros(a.shape());
  const R* ap = a.values().data();
  const R* bp = b.values().data();
  R* op = out.mutable_values().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] - bp[i];
  if (grad_needed<R>(a, b)) {
    out.ensure_grad();
    record_node<R>([ga = a.grad_ptr(), gb = b.grad_ptr(), go = out.grad_ptr(), n] {
      if (ga)
        for (std::int64_t i = 0; i < n; ++i) (*ga)[i] += (*go)[i];
      if (gb)
        for (std::int64_t i = 0; i < n; ++i) (*gb)[i] -= (*go)[i];
    });
  }
  return out;
}

template <class R>
Tensor<R> mul(const Tensor<R>& a, const Tensor<R>& b) {
  detail::expect_same_shape("mul", a, b);
  auto out = Tensor<R>::zeros(a.shape());
  const R* ap = a.values().data();
  const R* bp = b.values().data();
  R* op = out.mutable_values().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] * bp[i];
  if (grad_needed<R>(a, b)) {
    out.ensure_grad();
    record_node<R>([ga = a.grad_ptr(), gb = b.grad_ptr(), go = out.grad_ptr(), av = a.value_ptr(),
                    bv = b.value_ptr(), n] {
      if (ga)
        for (std::int64_t i = 0; i < n; ++i) (*ga)[i] += (*go)[i] * (*bv)[i];
      if (gb)
        for (std::int64_t i = 0; i < n; ++i) (*gb)[i] += (*go)[i] * (*av)[i];
    });
  }
  return out;
}

template <class R>
Tensor<R> div(const Tensor<R>& a, const Tensor<R>& b) {
  detail::expect_same_shape("div", a, b);
  auto out = Tensor<R>::zeros(a.shape());
  const R* ap = a.values().data();
  const R* bp = b.values().data();
  R* op = out.mutable_values().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] / bp[i];
  if (grad_needed<R>(a, b)) {
    out.ensure_grad();
    record_node<R>([ga = a.grad_ptr(), gb = b.grad_ptr(), go = out.grad_ptr(), av = a.value_ptr(),
                    bv = b.value_ptr(), n] {
      for (std::int64_t i = 0; i < n; ++i) {
        const R inv = R(1) / (*bv)[i];
        if (ga) (*ga)[i] += (*go)[i] * inv;
        if (gb) (*gb)[i] -= (*go)[i] * (*av)[i] * inv * inv;
      }
    });
  }
  return out;
}

template <class R>
Tensor<R> add_scalar(const Tensor<R>& a, R c) {
  auto out = Tensor<R>::zeros(a.shape());
  const R* ap = a.values().data();
  R* op = out.mutable_values().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] + c;
  if (grad_needed<R>(a)) {
    out.ensure_grad();
    record_node<R>([ga = a.grad_ptr(), go = out.grad_ptr(), n] {
      for (std::int64_t i = 0; i < n; ++i) (*ga)[i] += (*go)[i];
    });
  }
  return out;
}

template <class R>
Tensor<R> mul_scalar(const Tensor<R>& a, R c) {
  auto out = Tensor<R>::zeros(a.shape());
  const R* ap = a.values().data();
  R* op = out.mutable_values().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ap[i] * c;
  if (grad_needed<R>(a)) {
    out.ensure_grad();
    record_node<R>([ga = a.grad_ptr(), go = out.grad_ptr(), c, n] {
      for (std::int64_t i = 0; i < n; ++i) (*ga)[i] += (*go)[i] * c;
    });
  }
  return out;
}

template <class R>
Tensor<R> neg(const Tensor<R>& a) {
  return mul_scalar(a, R(-1));
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

// Shared skeleton: out = f(a), da = df(a, out, gout).
template <class R, class F, class DF>
Tensor<R> unary_op(const Tensor<R>& a, F f, DF df) {
  auto out = Tensor<R>::zeros(a.shape());
  const R* ap = a.values().data();
  R* op = out.mutable_values().data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) op[i] = f(ap[i]);
  if (grad_needed<R>(a)) {
    out.ensure_grad();
    record_node<R>(
        [ga = a.grad_ptr(), go = out.grad_ptr(), av = a.value_ptr(), ov = out.value_ptr(), df, n] {
          for (std::int64_t i = 0; i < n; ++i) (*ga)[i] += (*go)[i] * df((*av)[i], (*ov)[i]);
        });
  }
  return out;
}

}  // namespace detail

template <class R>
Tensor<R> exp(const Tensor<R>& a) {
  return detail::unary_op(
      a, [](R x) { return std::exp(x); }, [](R, R y) { return y; });
}

template <class R>
Tensor<R> log(const Tensor<R>& a) {
  return detail::unary_op(
      a, [](R x) { return std::log(x); }, [](R x, R) { return R(1) / x; });
}

template <class R>
Tensor<R> abs(const Tensor<R>& a) {
  return detail::unary_op(
      a, [](R x) { return std::abs(x); },
      [](R x, R) { return x > R(0) ? R(1) : (x < R(0) ? R(-1) : R(0)); });
}

template <class R>
Tensor<R> sigmoid(const Tensor<R>& a) {
  return detail::unary_op(
      a, [](R x) { return R(1) / (R(1) + std::exp(-x)); }, [](R, R y) { return y * (R(1) - y); });
}

template <class R>
Tensor<R> silu(const Tensor<R>& a) {
  return detail::unary_op(
      a, [](R x) { return x / (R(1) + std::exp(-x)); },
      [](R x, R) {
        const R s = R(1) / (R(1) + std::exp(-x));
        return s * (R(1) + x * (R(1) - s));
      });
}

template <class R>
Tensor<R> softplus(const Tensor<R>& a) {
  return detail::unary_op(
      a,
      [](R x) {
        // log(1 + e^x), overflow-safe.
        return x > R(30) ? x : std::log1p(std::exp(x));
      },
      [](R x, R) { return R(1) / (R(1) + std::exp(-x)); });
}

template <class R>
Tensor<R> relu(const Tensor<R>& a) {
  return detail::unary_op(
      a, [](R x) { return x > R(0) ? x : R(0); }, [](R x, R) { return x > R(0) ? R(1) : R(0); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> sum_all(const Tensor<R>& a) {
  R acc = R(0);
  for (R v : a.values()) acc += v;
  auto out = Tensor<R>::scalar(acc);
  if (grad_needed<R>(a)) {
    out.ensure_grad();
    record_node<R>([ga = a.grad_ptr(), go = out.grad_ptr(), n = a.numel()] {
      const R g = (*go)[0];
      for (std::int64_t i = 0; i < n; ++i) (*ga)[i] += g;
    });
  }
  return out;
}

template <class R>
Tensor<R> mean_all(const Tensor<R>& a) {
  return mul_scalar(sum_all(a), R(1) / static_cast<R>(a.numel()));
}

namespace detail {

template <class R>
Shape drop_axis(const Tensor<R>& a, std::int64_t axis) {
  Shape s;
  for (std::int64_t i = 0; i < a.rank(); ++i)
    if (i != axis) s.push_back(a.shape()[static_cast<std::size_t>(i)]);
  if (s.empty()) s.push_back(1);
  return s;
}

}  // namespace detail

template <class R>
Tensor<R> reduce_sum(const Tensor<R>& a, std::int64_t axis) {
  detail::expect_axis("reduce_sum", a.shape(), axis);
  std::int64_t outer, extent, inner;
  detail::axis_split(a.shape(), axis, outer, extent, inner);
  auto out = Tensor<R>::zeros(detail::drop_axis(a, axis));
  const R* ap = a.values().data();
  R* op = out.mutable_values().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t k = 0; k < extent; ++k) {
      const R* src = ap + (o * extent + k) * inner;
      R* dst = op + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  if (grad_needed<R>(a)) {
    out.ensure_grad();
    record_node<R>([ga = a.grad_ptr(), go = out.grad_ptr(), outer, extent, inner] {
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t k = 0; k < extent; ++k) {
          R* dst = ga->data() + (o * extent + k) * inner;
          const R* src = go->data() + o * inner;
          for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

template <class R>
Tensor<R> reduce_mean(const Tensor<R>& a, std::int64_t axis) {
  detail::expect_axis("reduce_mean", a.shape(), axis);
  const R inv = R(1) / static_cast<R>(a.shape()[static_cast<std::size_t>(axis)]);
  return mul_scalar(reduce_sum(a, axis), inv);
}

template <class R>
Tensor<R> reduce_max(const Tensor<R>& a, std::int64_t axis) {
  detail::expect_axis("reduce_max", a.shape(), axis);
  std::int64_t outer, extent, inner;
  detail::axis_split(a.shape(), axis, outer, extent, inner);
  auto out = Tensor<R>::zeros(detail::drop_axis(a, axis));
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(outer * inner), 0);
  const R* ap = a.values().data();
  R* op = out.mutable_values().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      R best = ap[(o * extent) * inner + i];
      std::int64_t bestk = 0;
      for (std::int64_t k = 1; k < extent; ++k) {
        const R v = ap[(o * extent + k) * inner + i];
        if (v > best) {
          best = v;
          bestk = k;
        }
      }
      op[o * inner + i] = best;
      argmax[static_cast<std::size_t>(o * inner + i)] = bestk;
    }
  if (grad_needed<R>(a)) {
    out.ensure_grad();
    record_node<R>(
        [ga = a.grad_ptr(), go = out.grad_ptr(), argmax = std::move(argmax), outer, extent, inner] {
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) {
              const std::int64_t k = argmax[static_cast<std::size_t>(o * inner + i)];
              (*ga)[(o * extent + k) * inner + i] += (*go)[o * inner + i];
            }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / layer norm
// ---------------------------------------------------------------------------

template <class R>
Tensor<R> softmax(const Tensor<R>& a, std::int64_t axis) {
  detail::expect_axis("softmax", a.shape(), axis);
  std::int64_t outer, extent, inner;
  detail::axis_split(a.shape(), axis, outer, extent, inner);
  auto out = Tensor<R>::zeros(a.shape());
  const R* ap = a.values().data();
  R* op = out.mutable_values().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      R mx = ap[(o * extent) * inner + i];
      for (std::int64_t k = 1; k < extent; ++k)
        mx = std::max(mx, ap[(o * extent + k) * inner + i]);
      R denom = R(0);
      for (std::int64_t k = 0; k < extent; ++k) {
        const R e = std::exp(ap[(o * extent + k) * inner + i] - mx);
        op[(o * extent + k) * inner + i] = e;
        denom += e;
      }
      const R inv = R(1) / denom;
      for (std::int64_t k = 0; k < extent; ++k) op[(o * extent + k) * inner + i] *= inv;
    }
  if (grad_needed<R>(a)) {
    out.ensure_grad();
    record_node<R>(
        [ga = a.grad_ptr(), go = out.grad_ptr(), ov = out.value_ptr(), outer, extent, inner] {
          for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < inner; ++i) {
              R dot = R(0);
              for (std::int64_t k = 0; k < extent; ++k) {
                const std::int64_t idx = (o * extent + k) * inner + i;
                dot += (*go)[idx] * (*ov)[idx];
              }
              for (std::int64_t k = 0; k < extent; ++k) {
                const std::int64_t idx = (o * extent + k) * inner + i;
                (*ga)[idx] += (*ov)[idx] * ((*go)[idx] - dot);
              }
            }
        });
  }
  return out;
}

// Normalizes the last axis to zero mean / unit variance, then applies the
// learned elementwise affine (gamma, beta).
template <class R>
Tensor<R> layer_norm(const Tensor<R>& x, const Tensor<R>& gamma, const Tensor<R>& beta,
                     R eps = R(1e-5)) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
  const std::int64_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw std::invalid_argument("layer_norm: scale/shift must have extent " + std::to_string(d));
  const std::int64_t rows = x.numel() / d;
  auto out = Tensor<R>::zeros(x.shape());
  // Normalized values are kept for backward.
  auto xhat = std::make_shared<std::vector<R>>(static_cast<std::size_t>(x.numel()));
  auto inv_std = std::make_shared<std::vector<R>>(static_cast<std::size_t>(rows));
  const R* xp = x.values().data();
  const R* gp = gamma.values().data();
  const R* bp = beta.values().data();
  R* op = out.mutable_values().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const R* row = xp + r * d;
    R mean = R(0);
    for (std::int64_t i = 0; i < d; ++i) mean += row[i];
    mean /= static_cast<R>(d);
    R var = R(0);
    for (std::int64_t i = 0; i < d; ++i) {
      const R c = row[i] - mean;
      var += c * c;
    }
    var /= static_cast<R>(d);
    const R istd = R(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(r)] = istd;
    for (std::int64_t i = 0; i < d; ++i) {
      const R h = (row[i] - mean) * istd;
      (*xhat)[static_cast<std::size_t>(r * d + i)] = h;
      op[r * d + i] = gp[i] * h + bp[i];
    }
  }
  if (grad_needed<R>(x, gamma, beta)) {
    out.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), gg = gamma.grad_ptr(), gb = beta.grad_ptr(),
                    go = out.grad_ptr(), gv = gamma.value_ptr(), xhat, inv_std, rows, d] {
      for (std::int64_t r = 0; r < rows; ++r) {
        const R* gor = go->data() + r * d;
        const R* hr = xhat->data() + r * d;
        const R istd = (*inv_std)[static_cast<std::size_t>(r)];
        R sum_gh = R(0), sum_ghh = R(0);
        for (std::int64_t i = 0; i < d; ++i) {
          const R ghat = gor[i] * (*gv)[static_cast<std::size_t>(i)];
          sum_gh += ghat;
          sum_ghh += ghat * hr[i];
        }
        if (gx) {
          R* gxr = gx->data() + r * d;
          const R invd = R(1) / static_cast<R>(d);
          for (std::int64_t i = 0; i < d; ++i) {
            const R ghat = gor[i] * (*gv)[static_cast<std::size_t>(i)];
            gxr[i] += istd * (ghat - invd * sum_gh - hr[i] * invd * sum_ghh);
          }
        }
        if (gg)
          for (std::int64_t i = 0; i < d; ++i) (*gg)[static_cast<std::size_t>(i)] += gor[i] * hr[i];
        if (gb)
          for (std::int64_t i = 0; i < d; ++i) (*gb)[static_cast<std::size_t>(i)] += gor[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// Affine map over the last axis: x[..., D] @ w[D, E] + b[E]. Pass a
// default-constructed bias to skip it.
template <class R>
Tensor<R> linear(const Tensor<R>& x, const Tensor<R>& w, const Tensor<R>& bias = {}) {
  detail::expect_rank("linear", w, 2);
  const std::int64_t d = w.extent(0), e = w.extent(1);
  if (x.shape().back() != d)
    throw std::invalid_argument("linear: input extent " + std::to_string(x.shape().back()) +
                                " does not match weight rows " + std::to_string(d));
  if (bias.defined() && bias.numel() != e)
    throw std::invalid_argument("linear: bias extent mismatch");
  Shape os = x.shape();
  os.back() = e;
  auto out = Tensor<R>::zeros(os);
  const std::int64_t rows = x.numel() / d;
  const R* xp = x.values().data();
  const R* wp = w.values().data();
  R* op = out.mutable_values().data();
  if (bias.defined()) {
    const R* bp = bias.values().data();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < e; ++j) op[r * e + j] = bp[j];
  }
  for (std::int64_t r = 0; r < rows; ++r) {
    R* orow = op + r * e;
    const R* xrow = xp + r * d;
    for (std::int64_t k = 0; k < d; ++k) {
      const R xv = xrow[k];
      const R* wrow = wp + k * e;
      for (std::int64_t j = 0; j < e; ++j) orow[j] += xv * wrow[j];
    }
  }
  const bool need = bias.defined() ? grad_needed<R>(x, w, bias) : grad_needed<R>(x, w);
  if (need) {
    out.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), gw = w.grad_ptr(),
                    gb = bias.defined() ? bias.grad_ptr() : nullptr, go = out.grad_ptr(),
                    xv = x.value_ptr(), wv = w.value_ptr(), rows, d, e] {
      for (std::int64_t r = 0; r < rows; ++r) {
        const R* gor = go->data() + r * e;
        if (gx) {
          R* gxr = gx->data() + r * d;
          for (std::int64_t k = 0; k < d; ++k) {
            const R* wrow = wv->data() + k * e;
            R acc = R(0);
            for (std::int64_t j = 0; j < e; ++j) acc += gor[j] * wrow[j];
            gxr[k] += acc;
          }
        }
        if (gw) {
          const R* xrow = xv->data() + r * d;
          for (std::int64_t k = 0; k < d; ++k) {
            const R xvk = xrow[k];
            R* gwrow = gw->data() + k * e;
            for (std::int64_t j = 0; j < e; ++j) gwrow[j] += xvk * gor[j];
          }
        }
        if (gb)
          for (std::int64_t j = 0; j < e; ++j) (*gb)[static_cast<std::size_t>(j)] += gor[j];
      }
    });
  }
  return out;
}

// Batched matrix product: a[..., M, K] @ b[..., K, N], identical leading dims.
template <class R>
Tensor<R> matmul(const Tensor<R>& a, const Tensor<R>& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank())
    throw std::invalid_argument("matmul: ranks must match and be >= 2");
  for (std::int64_t i = 0; i + 2 < a.rank(); ++i)
    if (a.shape()[static_cast<std::size_t>(i)] != b.shape()[static_cast<std::size_t>(i)])
      throw std::invalid_argument("matmul: batch dims differ: " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
  const std::int64_t m = a.shape()[a.shape().size() - 2];
  const std::int64_t k = a.shape()[a.shape().size() - 1];
  const std::int64_t k2 = b.shape()[b.shape().size() - 2];
  const std::int64_t n = b.shape()[b.shape().size() - 1];
  if (k != k2)
    throw std::invalid_argument("matmul: inner extents differ: " + std::to_string(k) + " vs " +
                                std::to_string(k2));
  Shape os = a.shape();
  os[os.size() - 1] = n;
  auto out = Tensor<R>::zeros(os);
  const std::int64_t batches = a.numel() / (m * k);
  const R* ap = a.values().data();
  const R* bp = b.values().data();
  R* op = out.mutable_values().data();
  for (std::int64_t bt = 0; bt < batches; ++bt) {
    const R* A = ap + bt * m * k;
    const R* B = bp + bt * k * n;
    R* O = op + bt * m * n;
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t kk = 0; kk < k; ++kk) {
        const R av = A[i * k + kk];
        const R* brow = B + kk * n;
        R* orow = O + i * n;
        for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
  }
  if (grad_needed<R>(a, b)) {
    out.ensure_grad();
    record_node<R>([ga = a.grad_ptr(), gb = b.grad_ptr(), go = out.grad_ptr(), av = a.value_ptr(),
                    bv = b.value_ptr(), batches, m, k, n] {
      for (std::int64_t bt = 0; bt < batches; ++bt) {
        const R* GO = go->data() + bt * m * n;
        const R* A = av->data() + bt * m * k;
        const R* B = bv->data() + bt * k * n;
        if (ga) {
          R* GA = ga->data() + bt * m * k;
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t kk = 0; kk < k; ++kk) {
              const R* brow = B + kk * n;
              const R* gorow = GO + i * n;
              R acc = R(0);
              for (std::int64_t j = 0; j < n; ++j) acc += gorow[j] * brow[j];
              GA[i * k + kk] += acc;
            }
        }
        if (gb) {
          R* GB = gb->data() + bt * k * n;
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t kk = 0; kk < k; ++kk) {
              const R avv = A[i * k + kk];
              const R* gorow = GO + i * n;
              R* gbrow = GB + kk * n;
              for (std::int64_t j = 0; j < n; ++j) gbrow[j] += avv * gorow[j];
            }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

// Cross-correlation over [B, C, H, W] with kernel [O, C/groups, k, k].
// Odd k only; H' = (H + 2*padding - k) / stride + 1.
template <class R>
Tensor<R> conv2d(const Tensor<R>& x, const Tensor<R>& w, const Tensor<R>& bias = {},
                 std::int64_t stride = 1, std::int64_t padding = 0, std::int64_t groups = 1) {
  detail::expect_rank("conv2d", x, 4);
  detail::expect_rank("conv2d", w, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const std::int64_t O = w.extent(0), Cg = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  if (kh != kw || kh % 2 == 0)
    throw std::invalid_argument("conv2d: kernel must be square and odd, got " +
                                shape_str(w.shape()));
  const std::int64_t k = kh;
  if (C % groups != 0 || O % groups != 0)
    throw std::invalid_argument("conv2d: channels not divisible by groups");
  if (Cg != C / groups)
    throw std::invalid_argument("conv2d: kernel expects " + std::to_string(Cg * groups) +
                                " input channels, input has " + std::to_string(C));
  if (H + 2 * padding < k || W + 2 * padding < k)
    throw std::invalid_argument("conv2d: spatial extents too small for kernel");
  if (bias.defined() && bias.numel() != O)
    throw std::invalid_argument("conv2d: bias extent mismatch");
  const std::int64_t Ho = (H + 2 * padding - k) / stride + 1;
  const std::int64_t Wo = (W + 2 * padding - k) / stride + 1;
  auto out = Tensor<R>::zeros({B, O, Ho, Wo});
  const R* xp = x.values().data();
  const R* wp = w.values().data();
  R* op = out.mutable_values().data();
  const std::int64_t og = O / groups;

  if (bias.defined()) {
    const R* bp = bias.values().data();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t oc = 0; oc < O; ++oc) {
        R* dst = op + ((b * O + oc) * Ho) * Wo;
        const R bv = bp[oc];
        for (std::int64_t i = 0; i < Ho * Wo; ++i) dst[i] = bv;
      }
  }
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t oc = 0; oc < O; ++oc) {
      const std::int64_t g = oc / og;
      for (std::int64_t icl = 0; icl < Cg; ++icl) {
        const std::int64_t ic = g * Cg + icl;
        const R* xch = xp + ((b * C + ic) * H) * W;
        for (std::int64_t dy = 0; dy < k; ++dy)
          for (std::int64_t dx = 0; dx < k; ++dx) {
            const R wv = wp[((oc * Cg + icl) * k + dy) * k + dx];
            if (wv == R(0)) continue;
            for (std::int64_t oh = 0; oh < Ho; ++oh) {
              const std::int64_t ih = oh * stride + dy - padding;
              if (ih < 0 || ih >= H) continue;
              R* orow = op + ((b * O + oc) * Ho + oh) * Wo;
              const R* xrow = xch + ih * W;
              if (stride == 1) {
                const std::int64_t shift = dx - padding;
                const std::int64_t lo = std::max<std::int64_t>(0, -shift);
                const std::int64_t hi = std::min(Wo, W - shift);
                for (std::int64_t ow = lo; ow < hi; ++ow) orow[ow] += wv * xrow[ow + shift];
              } else {
                for (std::int64_t ow = 0; ow < Wo; ++ow) {
                  const std::int64_t iw = ow * stride + dx - padding;
                  if (iw >= 0 && iw < W) orow[ow] += wv * xrow[iw];
                }
              }
            }
          }
      }
    }

  const bool need = bias.defined() ? grad_needed<R>(x, w, bias) : grad_needed<R>(x, w);
  if (need) {
    out.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), gw = w.grad_ptr(),
                    gb = bias.defined() ? bias.grad_ptr() : nullptr, go = out.grad_ptr(),
                    xv = x.value_ptr(), wv = w.value_ptr(), B, C, H, W, O, Cg, k, stride, padding,
                    groups, Ho, Wo, og] {
      const R* gop = go->data();
      if (gb) {
        for (std::int64_t b = 0; b < B; ++b)
          for (std::int64_t oc = 0; oc < O; ++oc) {
            const R* src = gop + ((b * O + oc) * Ho) * Wo;
            R acc = R(0);
            for (std::int64_t i = 0; i < Ho * Wo; ++i) acc += src[i];
            (*gb)[static_cast<std::size_t>(oc)] += acc;
          }
      }
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t oc = 0; oc < O; ++oc) {
          const std::int64_t g = oc / og;
          for (std::int64_t icl = 0; icl < Cg; ++icl) {
            const std::int64_t ic = g * Cg + icl;
            const R* xch = xv->data() + ((b * C + ic) * H) * W;
            R* gxch = gx ? gx->data() + ((b * C + ic) * H) * W : nullptr;
            for (std::int64_t dy = 0; dy < k; ++dy)
              for (std::int64_t dx = 0; dx < k; ++dx) {
                const std::int64_t widx = ((oc * Cg + icl) * k + dy) * k + dx;
                const R wval = (*wv)[static_cast<std::size_t>(widx)];
                R wacc = R(0);
                for (std::int64_t oh = 0; oh < Ho; ++oh) {
                  const std::int64_t ih = oh * stride + dy - padding;
                  if (ih < 0 || ih >= H) continue;
                  const R* gorow = gop + ((b * O + oc) * Ho + oh) * Wo;
                  const R* xrow = xch + ih * W;
                  R* gxrow = gxch ? gxch + ih * W : nullptr;
                  if (stride == 1) {
                    const std::int64_t shift = dx - padding;
                    const std::int64_t lo = std::max<std::int64_t>(0, -shift);
                    const std::int64_t hi = std::min(Wo, W - shift);
                    if (gw)
                      for (std::int64_t ow = lo; ow < hi; ++ow)
                        wacc += gorow[ow] * xrow[ow + shift];
                    if (gxrow)
                      for (std::int64_t ow = lo; ow < hi; ++ow)
                        gxrow[ow + shift] += wval * gorow[ow];
                  } else {
                    for (std::int64_t ow = 0; ow < Wo; ++ow) {
                      const std::int64_t iw = ow * stride + dx - padding;
                      if (iw < 0 || iw >= W) continue;
                      if (gw) wacc += gorow[ow] * xrow[iw];
                      if (gxrow) gxrow[iw] += wval * gorow[ow];
                    }
                  }
                }
                if (gw) (*gw)[static_cast<std::size_t>(widx)] += wacc;
              }
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape / layout ops
// ---------------------------------------------------------------------------

// Same element order, new shape. Shares value and grad storage, so no tape
// node is required: downstream accumulation lands directly in the source.
template <class R>
Tensor<R> reshape(const Tensor<R>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                                " changes element count");
  auto out = Tensor<R>::wrap(std::move(shape), a.value_ptr());
  if (a.has_grad()) out.adopt_grad(a.grad_ptr());
  return out;
}

namespace detail {

// Generic gather-style op: out[i] = a[perm[i]] where perm is produced once.
template <class R, class PermFn>
Tensor<R> permute_op(const Tensor<R>& a, Shape out_shape, PermFn&& fill_perm) {
  auto out = Tensor<R>::zeros(out_shape);
  const std::int64_t n = out.numel();
  auto perm = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
  fill_perm(*perm);
  const R* ap = a.values().data();
  R* op = out.mutable_values().data();
  for (std::int64_t i = 0; i < n; ++i) op[i] = ap[(*perm)[static_cast<std::size_t>(i)]];
  if (grad_needed<R>(a)) {
    out.ensure_grad();
    record_node<R>([ga = a.grad_ptr(), go = out.grad_ptr(), perm, n] {
      for (std::int64_t i = 0; i < n; ++i)
        (*ga)[(*perm)[static_cast<std::size_t>(i)]] += (*go)[i];
    });
  }
  return out;
}

}  // namespace detail

// [B, C, H, W] -> [B, C, W, H]
template <class R>
Tensor<R> transpose_hw(const Tensor<R>& x) {
  detail::expect_rank("transpose_hw", x, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  return detail::permute_op(x, Shape{B, C, W, H}, [&](std::vector<std::int64_t>& p) {
    std::int64_t i = 0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t w = 0; w < W; ++w)
          for (std::int64_t h = 0; h < H; ++h) p[static_cast<std::size_t>(i++)] = ((b * C + c) * H + h) * W + w;
  });
}

// [B, C, H, W] -> [B, H*W, C], row-major token order.
template <class R>
Tensor<R> hw_to_seq(const Tensor<R>& x) {
  detail::expect_rank("hw_to_seq", x, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  return detail::permute_op(x, Shape{B, H * W, C}, [&](std::vector<std::int64_t>& p) {
    std::int64_t i = 0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t l = 0; l < H * W; ++l)
        for (std::int64_t c = 0; c < C; ++c) p[static_cast<std::size_t>(i++)] = (b * C + c) * H * W + l;
  });
}

// [B, L, C] + (H, W) -> [B, C, H, W], inverse of hw_to_seq.
template <class R>
Tensor<R> seq_to_hw(const Tensor<R>& x, std::int64_t H, std::int64_t W) {
  detail::expect_rank("seq_to_hw", x, 3);
  const std::int64_t B = x.extent(0), L = x.extent(1), C = x.extent(2);
  if (L != H * W) throw std::invalid_argument("seq_to_hw: L != H*W");
  return detail::permute_op(x, Shape{B, C, H, W}, [&](std::vector<std::int64_t>& p) {
    std::int64_t i = 0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t l = 0; l < L; ++l) p[static_cast<std::size_t>(i++)] = (b * L + l) * C + c;
  });
}

// Reverses the token axis of [B, L, C].
template <class R>
Tensor<R> reverse_seq(const Tensor<R>& x) {
  detail::expect_rank("reverse_seq", x, 3);
  const std::int64_t B = x.extent(0), L = x.extent(1), C = x.extent(2);
  return detail::permute_op(x, x.shape(), [&](std::vector<std::int64_t>& p) {
    std::int64_t i = 0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t l = 0; l < L; ++l)
        for (std::int64_t c = 0; c < C; ++c)
          p[static_cast<std::size_t>(i++)] = (b * L + (L - 1 - l)) * C + c;
  });
}

// [B, L, D] -> [B, heads, L, D/heads]
template <class R>
Tensor<R> split_heads(const Tensor<R>& x, std::int64_t heads) {
  detail::expect_rank("split_heads", x, 3);
  const std::int64_t B = x.extent(0), L = x.extent(1), D = x.extent(2);
  if (D % heads != 0)
    throw std::invalid_argument("split_heads: dim " + std::to_string(D) +
                                " not divisible by heads " + std::to_string(heads));
  const std::int64_t dh = D / heads;
  return detail::permute_op(x, Shape{B, heads, L, dh}, [&](std::vector<std::int64_t>& p) {
    std::int64_t i = 0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t l = 0; l < L; ++l)
          for (std::int64_t d = 0; d < dh; ++d)
            p[static_cast<std::size_t>(i++)] = (b * L + l) * D + h * dh + d;
  });
}

// [B, heads, L, dh] -> [B, L, heads*dh], inverse of split_heads.
template <class R>
Tensor<R> merge_heads(const Tensor<R>& x) {
  detail::expect_rank("merge_heads", x, 4);
  const std::int64_t B = x.extent(0), heads = x.extent(1), L = x.extent(2), dh = x.extent(3);
  return detail::permute_op(x, Shape{B, L, heads * dh}, [&](std::vector<std::int64_t>& p) {
    std::int64_t i = 0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t l = 0; l < L; ++l)
        for (std::int64_t h = 0; h < heads; ++h)
          for (std::int64_t d = 0; d < dh; ++d)
            p[static_cast<std::size_t>(i++)] = ((b * heads + h) * L + l) * dh + d;
  });
}

// Swaps the last two axes.
template <class R>
Tensor<R> transpose_last2(const Tensor<R>& x) {
  if (x.rank() < 2) throw std::invalid_argument("transpose_last2: rank must be >= 2");
  Shape os = x.shape();
  const std::int64_t M = os[os.size() - 2], N = os[os.size() - 1];
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  const std::int64_t batches = x.numel() / (M * N);
  return detail::permute_op(x, os, [&](std::vector<std::int64_t>& p) {
    std::int64_t i = 0;
    for (std::int64_t bt = 0; bt < batches; ++bt)
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t m = 0; m < M; ++m)
          p[static_cast<std::size_t>(i++)] = bt * M * N + m * N + n;
  });
}

// Pixel-unshuffle: [B, C, H, W] -> [B, C*k*k, H/k, W/k]; output channel
// (c*k + dy)*k + dx holds input pixel (h*k+dy, w*k+dx) of channel c.
template <class R>
Tensor<R> space_to_channel(const Tensor<R>& x, std::int64_t k) {
  detail::expect_rank("space_to_channel", x, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (H % k != 0 || W % k != 0)
    throw std::invalid_argument("space_to_channel: extents not divisible by " + std::to_string(k));
  const std::int64_t Ho = H / k, Wo = W / k;
  return detail::permute_op(x, Shape{B, C * k * k, Ho, Wo}, [&](std::vector<std::int64_t>& p) {
    std::int64_t i = 0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t dy = 0; dy < k; ++dy)
          for (std::int64_t dx = 0; dx < k; ++dx)
            for (std::int64_t h = 0; h < Ho; ++h)
              for (std::int64_t w = 0; w < Wo; ++w)
                p[static_cast<std::size_t>(i++)] =
                    ((b * C + c) * H + (h * k + dy)) * W + (w * k + dx);
  });
}

// Nearest-neighbour upsampling by an integer factor.
template <class R>
Tensor<R> upsample_nearest(const Tensor<R>& x, std::int64_t factor) {
  detail::expect_rank("upsample_nearest", x, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  return detail::permute_op(x, Shape{B, C, H * factor, W * factor},
                            [&](std::vector<std::int64_t>& p) {
                              std::int64_t i = 0;
                              for (std::int64_t b = 0; b < B; ++b)
                                for (std::int64_t c = 0; c < C; ++c)
                                  for (std::int64_t h = 0; h < H * factor; ++h)
                                    for (std::int64_t w = 0; w < W * factor; ++w)
                                      p[static_cast<std::size_t>(i++)] =
                                          ((b * C + c) * H + h / factor) * W + w / factor;
                            });
}

// Zero-pads the two spatial axes of [B, C, H, W].
template <class R>
Tensor<R> pad2d(const Tensor<R>& x, std::int64_t top, std::int64_t bottom, std::int64_t left,
                std::int64_t right) {
  detail::expect_rank("pad2d", x, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const std::int64_t Ho = H + top + bottom, Wo = W + left + right;
  auto out = Tensor<R>::zeros({B, C, Ho, Wo});
  const R* xp = x.values().data();
  R* op = out.mutable_values().data();
  for (std::int64_t bc = 0; bc < B * C; ++bc)
    for (std::int64_t h = 0; h < H; ++h) {
      const R* src = xp + (bc * H + h) * W;
      R* dst = op + (bc * Ho + h + top) * Wo + left;
      for (std::int64_t w = 0; w < W; ++w) dst[w] = src[w];
    }
  if (grad_needed<R>(x)) {
    out.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), go = out.grad_ptr(), B, C, H, W, Ho, Wo, top, left] {
      for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t h = 0; h < H; ++h) {
          R* dst = gx->data() + (bc * H + h) * W;
          const R* src = go->data() + (bc * Ho + h + top) * Wo + left;
          for (std::int64_t w = 0; w < W; ++w) dst[w] += src[w];
        }
    });
  }
  return out;
}

// Extracts the window starting at (top, left) with extents (h, w).
template <class R>
Tensor<R> crop2d(const Tensor<R>& x, std::int64_t top, std::int64_t left, std::int64_t h,
                 std::int64_t w) {
  detail::expect_rank("crop2d", x, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (top + h > H || left + w > W) throw std::invalid_argument("crop2d: window exceeds input");
  auto out = Tensor<R>::zeros({B, C, h, w});
  const R* xp = x.values().data();
  R* op = out.mutable_values().data();
  for (std::int64_t bc = 0; bc < B * C; ++bc)
    for (std::int64_t r = 0; r < h; ++r) {
      const R* src = xp + (bc * H + top + r) * W + left;
      R* dst = op + (bc * h + r) * w;
      for (std::int64_t cw = 0; cw < w; ++cw) dst[cw] = src[cw];
    }
  if (grad_needed<R>(x)) {
    out.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), go = out.grad_ptr(), B, C, H, W, h, w, top, left] {
      for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t r = 0; r < h; ++r) {
          R* dst = gx->data() + (bc * H + top + r) * W + left;
          const R* src = go->data() + (bc * h + r) * w;
          for (std::int64_t cw = 0; cw < w; ++cw) dst[cw] += src[cw];
        }
    });
  }
  return out;
}

// Concatenation along `axis`; all other extents must match.
template <class R>
Tensor<R> concat(const std::vector<Tensor<R>>& parts, std::int64_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  detail::expect_axis("concat", parts[0].shape(), axis);
  Shape os = parts[0].shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank())
      throw std::invalid_argument("concat: rank mismatch");
    for (std::int64_t i = 0; i < p.rank(); ++i)
      if (i != axis && p.shape()[static_cast<std::size_t>(i)] != os[static_cast<std::size_t>(i)])
        throw std::invalid_argument("concat: extent mismatch off-axis");
    total += p.extent(static_cast<std::size_t>(axis));
  }
  os[static_cast<std::size_t>(axis)] = total;
  auto out = Tensor<R>::zeros(os);
  std::int64_t outer, extent_total, inner;
  detail::axis_split(os, axis, outer, extent_total, inner);
  R* op = out.mutable_values().data();
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t ext = p.extent(static_cast<std::size_t>(axis));
    const R* pp = p.values().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      const R* src = pp + o * ext * inner;
      R* dst = op + (o * extent_total + offset) * inner;
      for (std::int64_t i = 0; i < ext * inner; ++i) dst[i] = src[i];
    }
    offset += ext;
  }
  bool need = Tape<R>::current() != nullptr;
  if (need) {
    bool any = false;
    for (const auto& p : parts) any = any || p.has_grad();
    need = any;
  }
  if (need) {
    out.ensure_grad();
    std::vector<std::shared_ptr<std::vector<R>>> grads;
    std::vector<std::int64_t> extents;
    for (const auto& p : parts) {
      grads.push_back(p.grad_ptr());
      extents.push_back(p.extent(static_cast<std::size_t>(axis)));
    }
    record_node<R>([grads = std::move(grads), extents = std::move(extents), go = out.grad_ptr(),
                    outer, extent_total, inner] {
      std::int64_t offset = 0;
      for (std::size_t pi = 0; pi < grads.size(); ++pi) {
        const std::int64_t ext = extents[pi];
        if (grads[pi]) {
          for (std::int64_t o = 0; o < outer; ++o) {
            R* dst = grads[pi]->data() + o * ext * inner;
            const R* src = go->data() + (o * extent_total + offset) * inner;
            for (std::int64_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
          }
        }
        offset += ext;
      }
    });
  }
  return out;
}

// Splits into `n` equal slabs along `axis`.
template <class R>
std::vector<Tensor<R>> split(const Tensor<R>& x, std::int64_t axis, std::int64_t n) {
  detail::expect_axis("split", x.shape(), axis);
  const std::int64_t ext = x.extent(static_cast<std::size_t>(axis));
  if (ext % n != 0)
    throw std::invalid_argument("split: extent " + std::to_string(ext) + " not divisible by " +
                                std::to_string(n));
  std::int64_t outer, extent, inner;
  detail::axis_split(x.shape(), axis, outer, extent, inner);
  const std::int64_t part_ext = ext / n;
  Shape ps = x.shape();
  ps[static_cast<std::size_t>(axis)] = part_ext;
  std::vector<Tensor<R>> outs;
  const R* xp = x.values().data();
  for (std::int64_t pi = 0; pi < n; ++pi) {
    auto out = Tensor<R>::zeros(ps);
    R* op = out.mutable_values().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      const R* src = xp + (o * extent + pi * part_ext) * inner;
      R* dst = op + o * part_ext * inner;
      for (std::int64_t i = 0; i < part_ext * inner; ++i) dst[i] = src[i];
    }
    outs.push_back(std::move(out));
  }
  if (grad_needed<R>(x)) {
    std::vector<std::shared_ptr<std::vector<R>>> ogr;
    for (auto& o : outs) {
      o.ensure_grad();
      ogr.push_back(o.grad_ptr());
    }
    record_node<R>(
        [gx = x.grad_ptr(), ogr = std::move(ogr), outer, extent, inner, part_ext] {
          for (std::size_t pi = 0; pi < ogr.size(); ++pi)
            for (std::int64_t o = 0; o < outer; ++o) {
              R* dst = gx->data() + (o * extent + static_cast<std::int64_t>(pi) * part_ext) * inner;
              const R* src = ogr[pi]->data() + o * part_ext * inner;
              for (std::int64_t i = 0; i < part_ext * inner; ++i) dst[i] += src[i];
            }
        });
  }
  return outs;
}

// ---------------------------------------------------------------------------
// Named broadcast / gating ops
// ---------------------------------------------------------------------------

// x[B,C,H,W] scaled per (batch, channel) by g[B,C].
template <class R>
Tensor<R> scale_channels(const Tensor<R>& x, const Tensor<R>& g) {
  detail::expect_rank("scale_channels", x, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
  if (g.rank() != 2 || g.extent(0) != B || g.extent(1) != C)
    throw std::invalid_argument("scale_channels: gate must be [B,C]");
  auto out = Tensor<R>::zeros(x.shape());
  const R* xp = x.values().data();
  const R* gp = g.values().data();
  R* op = out.mutable_values().data();
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const R gv = gp[bc];
    const R* src = xp + bc * HW;
    R* dst = op + bc * HW;
    for (std::int64_t i = 0; i < HW; ++i) dst[i] = src[i] * gv;
  }
  if (grad_needed<R>(x, g)) {
    out.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), gg = g.grad_ptr(), go = out.grad_ptr(), xv = x.value_ptr(),
                    gv = g.value_ptr(), B, C, HW] {
      for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const R* gor = go->data() + bc * HW;
        if (gx) {
          R* dst = gx->data() + bc * HW;
          const R gval = (*gv)[static_cast<std::size_t>(bc)];
          for (std::int64_t i = 0; i < HW; ++i) dst[i] += gor[i] * gval;
        }
        if (gg) {
          const R* xr = xv->data() + bc * HW;
          R acc = R(0);
          for (std::int64_t i = 0; i < HW; ++i) acc += gor[i] * xr[i];
          (*gg)[static_cast<std::size_t>(bc)] += acc;
        }
      }
    });
  }
  return out;
}

// x[B,C,H,W] scaled per pixel by g[B,1,H,W].
template <class R>
Tensor<R> scale_pixels(const Tensor<R>& x, const Tensor<R>& g) {
  detail::expect_rank("scale_pixels", x, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (g.rank() != 4 || g.extent(0) != B || g.extent(1) != 1 || g.extent(2) != H || g.extent(3) != W)
    throw std::invalid_argument("scale_pixels: gate must be [B,1,H,W]");
  auto out = Tensor<R>::zeros(x.shape());
  const R* xp = x.values().data();
  const R* gp = g.values().data();
  R* op = out.mutable_values().data();
  const std::int64_t HW = H * W;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const R* src = xp + (b * C + c) * HW;
      const R* gr = gp + b * HW;
      R* dst = op + (b * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) dst[i] = src[i] * gr[i];
    }
  if (grad_needed<R>(x, g)) {
    out.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), gg = g.grad_ptr(), go = out.grad_ptr(), xv = x.value_ptr(),
                    gv = g.value_ptr(), B, C, HW] {
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
          const R* gor = go->data() + (b * C + c) * HW;
          if (gx) {
            R* dst = gx->data() + (b * C + c) * HW;
            const R* gr = gv->data() + b * HW;
            for (std::int64_t i = 0; i < HW; ++i) dst[i] += gor[i] * gr[i];
          }
          if (gg) {
            R* dst = gg->data() + b * HW;
            const R* xr = xv->data() + (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) dst[i] += gor[i] * xr[i];
          }
        }
    });
  }
  return out;
}

// Multiplies every [H,W] plane of x by a constant binary mask [H,W]; gradient
// flows through kept entries only. The mask does not receive gradient.
template <class R>
Tensor<R> mask_mul(const Tensor<R>& x, const Tensor<R>& mask) {
  detail::expect_rank("mask_mul", x, 4);
  const std::int64_t H = x.extent(2), W = x.extent(3);
  if (mask.rank() != 2 || mask.extent(0) != H || mask.extent(1) != W)
    throw std::invalid_argument("mask_mul: mask " + shape_str(mask.shape()) +
                                " does not match planes [" + std::to_string(H) + "," +
                                std::to_string(W) + "]");
  const std::int64_t planes = x.extent(0) * x.extent(1);
  const std::int64_t HW = H * W;
  auto out = Tensor<R>::zeros(x.shape());
  const R* xp = x.values().data();
  const R* mp = mask.values().data();
  R* op = out.mutable_values().data();
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const R* src = xp + pl * HW;
    R* dst = op + pl * HW;
    for (std::int64_t i = 0; i < HW; ++i) dst[i] = src[i] * mp[i];
  }
  if (grad_needed<R>(x)) {
    out.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), go = out.grad_ptr(), mv = mask.value_ptr(), planes, HW] {
      for (std::int64_t pl = 0; pl < planes; ++pl) {
        R* dst = gx->data() + pl * HW;
        const R* src = go->data() + pl * HW;
        for (std::int64_t i = 0; i < HW; ++i) dst[i] += src[i] * (*mv)[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

// logits[B,heads,L,L] + bias[B,L,L] broadcast over heads; bias is a constant
// (labels are not differentiable).
template <class R>
Tensor<R> add_attn_bias(const Tensor<R>& logits, const Tensor<R>& bias) {
  detail::expect_rank("add_attn_bias", logits, 4);
  detail::expect_rank("add_attn_bias", bias, 3);
  const std::int64_t B = logits.extent(0), Hh = logits.extent(1), L = logits.extent(2);
  if (logits.extent(3) != L || bias.extent(0) != B || bias.extent(1) != L || bias.extent(2) != L)
    throw std::invalid_argument("add_attn_bias: bias must be [B,L,L] matching logits");
  auto out = Tensor<R>::zeros(logits.shape());
  const R* lp = logits.values().data();
  const R* bp = bias.values().data();
  R* op = out.mutable_values().data();
  const std::int64_t LL = L * L;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t h = 0; h < Hh; ++h) {
      const R* src = lp + (b * Hh + h) * LL;
      const R* br = bp + b * LL;
      R* dst = op + (b * Hh + h) * LL;
      for (std::int64_t i = 0; i < LL; ++i) dst[i] = src[i] + br[i];
    }
  if (grad_needed<R>(logits)) {
    out.ensure_grad();
    record_node<R>([gl = logits.grad_ptr(), go = out.grad_ptr(), n = logits.numel()] {
      for (std::int64_t i = 0; i < n; ++i) (*gl)[i] += (*go)[i];
    });
  }
  return out;
}

// Forward differences along H: out[h] = x[h+1] - x[h], shape [B,C,H-1,W].
template <class R>
Tensor<R> diff_h(const Tensor<R>& x) {
  detail::expect_rank("diff_h", x, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  auto out = Tensor<R>::zeros({B, C, H - 1, W});
  const R* xp = x.values().data();
  R* op = out.mutable_values().data();
  for (std::int64_t bc = 0; bc < B * C; ++bc)
    for (std::int64_t h = 0; h + 1 < H; ++h) {
      const R* r0 = xp + (bc * H + h) * W;
      const R* r1 = xp + (bc * H + h + 1) * W;
      R* dst = op + (bc * (H - 1) + h) * W;
      for (std::int64_t w = 0; w < W; ++w) dst[w] = r1[w] - r0[w];
    }
  if (grad_needed<R>(x)) {
    out.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), go = out.grad_ptr(), B, C, H, W] {
      for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t h = 0; h + 1 < H; ++h) {
          const R* src = go->data() + (bc * (H - 1) + h) * W;
          R* g0 = gx->data() + (bc * H + h) * W;
          R* g1 = gx->data() + (bc * H + h + 1) * W;
          for (std::int64_t w = 0; w < W; ++w) {
            g1[w] += src[w];
            g0[w] -= src[w];
          }
        }
    });
  }
  return out;
}

// Forward differences along W: out[w] = x[w+1] - x[w], shape [B,C,H,W-1].
template <class R>
Tensor<R> diff_w(const Tensor<R>& x) {
  detail::expect_rank("diff_w", x, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  auto out = Tensor<R>::zeros({B, C, H, W - 1});
  const R* xp = x.values().data();
  R* op = out.mutable_values().data();
  for (std::int64_t bch = 0; bch < B * C * H; ++bch) {
    const R* row = xp + bch * W;
    R* dst = op + bch * (W - 1);
    for (std::int64_t w = 0; w + 1 < W; ++w) dst[w] = row[w + 1] - row[w];
  }
  if (grad_needed<R>(x)) {
    out.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), go = out.grad_ptr(), rows = B * C * H, W] {
      for (std::int64_t bch = 0; bch < rows; ++bch) {
        const R* src = go->data() + bch * (W - 1);
        R* grow = gx->data() + bch * W;
        for (std::int64_t w = 0; w + 1 < W; ++w) {
          grow[w + 1] += src[w];
          grow[w] -= src[w];
        }
      }
    });
  }
  return out;
}

}  // namespace farmamba
