#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "farmamba/ops.hpp"
#include "farmamba/tensor.hpp"

// Invertible 2D frequency transforms over [B, C, H, W] feature maps, plus the
// band-mask geometry used to isolate spectral ranges. All transforms use
// orthonormal scaling except the FFT, which is unnormalized forward with the
// 1/(MN) factor on the inverse. Every transform participates in the gradient
// tape; because the maps are orthogonal (or conjugate-adjoint for the FFT),
// each backward pass is just the opposite transform applied to the gradient.

namespace farmamba {

template <class R>
struct SubbandSet {
  Tensor<R> ll, lh, hl, hh;  // lh: low along H, high along W; hl: the reverse
};

enum class SpectrumLayout { natural, centered };

template <class R>
struct Spectrum {
  Tensor<R> re, im;
  SpectrumLayout layout = SpectrumLayout::natural;
};

template <class R>
struct DctSpectrum {
  Tensor<R> coef;
};

enum class BandKind { ring, wedge };

template <class R>
struct BandMaskSet {
  BandKind kind;
  std::int64_t count;
  std::vector<Tensor<R>> masks;  // K binary [H, W] planes forming a partition
};

namespace detail {

inline constexpr double kInvSqrt2 = 0.70710678118654752440;

// --- db1 (Haar-family) separable analysis / synthesis ------------------------

template <class R>
void dwt2_plane(const R* x, std::int64_t H, std::int64_t W, R* ll, R* lh, R* hl, R* hh,
                std::vector<R>& tmp) {
  const std::int64_t Hh = H / 2, Wh = W / 2;
  tmp.resize(static_cast<std::size_t>(H * W));
  const R c = static_cast<R>(kInvSqrt2);
  for (std::int64_t h = 0; h < H; ++h) {
    const R* row = x + h * W;
    R* trow = tmp.data() + h * W;
    for (std::int64_t i = 0; i < Wh; ++i) {
      const R a = row[2 * i], b = row[2 * i + 1];
      trow[i] = (a + b) * c;
      trow[Wh + i] = (a - b) * c;
    }
  }
  for (std::int64_t w = 0; w < W; ++w) {
    const bool high_w = w >= Wh;
    const std::int64_t wq = high_w ? w - Wh : w;
    for (std::int64_t i = 0; i < Hh; ++i) {
      const R a = tmp[static_cast<std::size_t>((2 * i) * W + w)];
      const R b = tmp[static_cast<std::size_t>((2 * i + 1) * W + w)];
      const R lo = (a + b) * c, hi = (a - b) * c;
      if (high_w) {
        lh[i * Wh + wq] = lo;
        hh[i * Wh + wq] = hi;
      } else {
        ll[i * Wh + wq] = lo;
        hl[i * Wh + wq] = hi;
      }
    }
  }
}

template <class R>
void idwt2_plane(const R* ll, const R* lh, const R* hl, const R* hh, std::int64_t H,
                 std::int64_t W, R* out, std::vector<R>& tmp) {
  const std::int64_t Hh = H / 2, Wh = W / 2;
  tmp.resize(static_cast<std::size_t>(H * W));
  const R c = static_cast<R>(kInvSqrt2);
  for (std::int64_t w = 0; w < W; ++w) {
    const bool high_w = w >= Wh;
    const std::int64_t wq = high_w ? w - Wh : w;
    for (std::int64_t i = 0; i < Hh; ++i) {
      const R lo = high_w ? lh[i * Wh + wq] : ll[i * Wh + wq];
      const R hi = high_w ? hh[i * Wh + wq] : hl[i * Wh + wq];
      tmp[static_cast<std::size_t>((2 * i) * W + w)] = (lo + hi) * c;
      tmp[static_cast<std::size_t>((2 * i + 1) * W + w)] = (lo - hi) * c;
    }
  }
  for (std::int64_t h = 0; h < H; ++h) {
    const R* trow = tmp.data() + h * W;
    R* row = out + h * W;
    for (std::int64_t i = 0; i < Wh; ++i) {
      const R lo = trow[i], hi = trow[Wh + i];
      row[2 * i] = (lo + hi) * c;
      row[2 * i + 1] = (lo - hi) * c;
    }
  }
}

// --- radix-2 complex FFT ------------------------------------------------------

inline bool is_pow2(std::int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

template <class R>
void fft1d(R* re, R* im, std::int64_t n, int sign) {
  // Bit reversal.
  for (std::int64_t i = 1, j = 0; i < n; ++i) {
    std::int64_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j |= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (std::int64_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * 3.14159265358979323846 / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (std::int64_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (std::int64_t k = 0; k < len / 2; ++k) {
        const std::int64_t a = i + k, b = i + k + len / 2;
        const double tr = cr * static_cast<double>(re[b]) - ci * static_cast<double>(im[b]);
        const double ti = cr * static_cast<double>(im[b]) + ci * static_cast<double>(re[b]);
        re[b] = static_cast<R>(static_cast<double>(re[a]) - tr);
        im[b] = static_cast<R>(static_cast<double>(im[a]) - ti);
        re[a] = static_cast<R>(static_cast<double>(re[a]) + tr);
        im[a] = static_cast<R>(static_cast<double>(im[a]) + ti);
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

// Unnormalized 2D FFT of one plane, in place. sign=-1 forward, +1 inverse
// kernel (caller applies any 1/(MN)).
template <class R>
void fft2_plane(R* re, R* im, std::int64_t H, std::int64_t W, int sign, std::vector<R>& sre,
                std::vector<R>& sim) {
  for (std::int64_t h = 0; h < H; ++h) fft1d(re + h * W, im + h * W, W, sign);
  sre.resize(static_cast<std::size_t>(H));
  sim.resize(static_cast<std::size_t>(H));
  for (std::int64_t w = 0; w < W; ++w) {
    for (std::int64_t h = 0; h < H; ++h) {
      sre[static_cast<std::size_t>(h)] = re[h * W + w];
      sim[static_cast<std::size_t>(h)] = im[h * W + w];
    }
    fft1d(sre.data(), sim.data(), H, sign);
    for (std::int64_t h = 0; h < H; ++h) {
      re[h * W + w] = sre[static_cast<std::size_t>(h)];
      im[h * W + w] = sim[static_cast<std::size_t>(h)];
    }
  }
}

// --- orthonormal DCT-II / DCT-III --------------------------------------------

inline std::vector<double> dct_matrix(std::int64_t n) {
  std::vector<double> m(static_cast<std::size_t>(n * n));
  const double pi = 3.14159265358979323846;
  for (std::int64_t u = 0; u < n; ++u) {
    const double a = u == 0 ? std::sqrt(1.0 / static_cast<double>(n))
                            : std::sqrt(2.0 / static_cast<double>(n));
    for (std::int64_t x = 0; x < n; ++x)
      m[static_cast<std::size_t>(u * n + x)] =
          a * std::cos(pi * (2.0 * static_cast<double>(x) + 1.0) * static_cast<double>(u) /
                       (2.0 * static_cast<double>(n)));
  }
  return m;
}

// out = Cm * X * Cn^T (forward) or Cm^T * X * Cn (inverse).
template <class R>
void dct2_plane(const R* x, std::int64_t H, std::int64_t W, const std::vector<double>& cm,
                const std::vector<double>& cn, bool inverse, R* out, std::vector<double>& tmp) {
  tmp.assign(static_cast<std::size_t>(H * W), 0.0);
  // tmp = (inverse ? Cm^T : Cm) * X
  for (std::int64_t u = 0; u < H; ++u)
    for (std::int64_t x2 = 0; x2 < H; ++x2) {
      const double c = inverse ? cm[static_cast<std::size_t>(x2 * H + u)]
                               : cm[static_cast<std::size_t>(u * H + x2)];
      if (c == 0.0) continue;
      const R* row = x + x2 * W;
      double* trow = tmp.data() + u * W;
      for (std::int64_t w = 0; w < W; ++w) trow[w] += c * static_cast<double>(row[w]);
    }
  // out = tmp * (inverse ? Cn : Cn^T)
  for (std::int64_t u = 0; u < H; ++u) {
    const double* trow = tmp.data() + u * W;
    R* orow = out + u * W;
    for (std::int64_t v = 0; v < W; ++v) {
      double acc = 0.0;
      for (std::int64_t y = 0; y < W; ++y)
        acc += trow[y] * (inverse ? cn[static_cast<std::size_t>(y * W + v)]
                                  : cn[static_cast<std::size_t>(v * W + y)]);
      orow[v] = static_cast<R>(acc);
    }
  }
}

template <class R>
void expect_4d_even(const char* op, const Tensor<R>& x) {
  expect_rank(op, x, 4);
  if (x.extent(2) % 2 != 0 || x.extent(3) % 2 != 0)
    throw std::invalid_argument(std::string(op) + ": spatial extents " +
                                std::to_string(x.extent(2)) + "x" + std::to_string(x.extent(3)) +
                                " must be even; pad the input first");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// DWT
// ---------------------------------------------------------------------------

template <class R>
SubbandSet<R> dwt2(const Tensor<R>& x) {
  detail::expect_4d_even("dwt2", x);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const std::int64_t P = B * C, Hh = H / 2, Wh = W / 2, Q = Hh * Wh;
  SubbandSet<R> sb{Tensor<R>::zeros({B, C, Hh, Wh}), Tensor<R>::zeros({B, C, Hh, Wh}),
                   Tensor<R>::zeros({B, C, Hh, Wh}), Tensor<R>::zeros({B, C, Hh, Wh})};
  std::vector<R> tmp;
  for (std::int64_t p = 0; p < P; ++p)
    detail::dwt2_plane(x.values().data() + p * H * W, H, W, sb.ll.mutable_values().data() + p * Q,
                       sb.lh.mutable_values().data() + p * Q,
                       sb.hl.mutable_values().data() + p * Q,
                       sb.hh.mutable_values().data() + p * Q, tmp);
  if (grad_needed<R>(x)) {
    sb.ll.ensure_grad();
    sb.lh.ensure_grad();
    sb.hl.ensure_grad();
    sb.hh.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), gll = sb.ll.grad_ptr(), glh = sb.lh.grad_ptr(),
                    ghl = sb.hl.grad_ptr(), ghh = sb.hh.grad_ptr(), P, H, W, Q] {
      // Orthonormal analysis: the adjoint is the synthesis applied to the
      // sub-band gradients.
      std::vector<R> tmp, plane(static_cast<std::size_t>(H * W));
      for (std::int64_t p = 0; p < P; ++p) {
        detail::idwt2_plane(gll->data() + p * Q, glh->data() + p * Q, ghl->data() + p * Q,
                            ghh->data() + p * Q, H, W, plane.data(), tmp);
        R* dst = gx->data() + p * H * W;
        for (std::int64_t i = 0; i < H * W; ++i) dst[i] += plane[static_cast<std::size_t>(i)];
      }
    });
  }
  return sb;
}

template <class R>
Tensor<R> idwt2(const SubbandSet<R>& sb) {
  detail::expect_rank("idwt2", sb.ll, 4);
  if (sb.lh.shape() != sb.ll.shape() || sb.hl.shape() != sb.ll.shape() ||
      sb.hh.shape() != sb.ll.shape())
    throw std::invalid_argument("idwt2: sub-band shapes differ");
  const std::int64_t B = sb.ll.extent(0), C = sb.ll.extent(1);
  const std::int64_t Hh = sb.ll.extent(2), Wh = sb.ll.extent(3);
  const std::int64_t P = B * C, H = 2 * Hh, W = 2 * Wh, Q = Hh * Wh;
  auto out = Tensor<R>::zeros({B, C, H, W});
  std::vector<R> tmp;
  for (std::int64_t p = 0; p < P; ++p)
    detail::idwt2_plane(sb.ll.values().data() + p * Q, sb.lh.values().data() + p * Q,
                        sb.hl.values().data() + p * Q, sb.hh.values().data() + p * Q, H, W,
                        out.mutable_values().data() + p * H * W, tmp);
  if (grad_needed<R>(sb.ll, sb.lh, sb.hl, sb.hh)) {
    out.ensure_grad();
    record_node<R>([gll = sb.ll.grad_ptr(), glh = sb.lh.grad_ptr(), ghl = sb.hl.grad_ptr(),
                    ghh = sb.hh.grad_ptr(), go = out.grad_ptr(), P, H, W, Q] {
      std::vector<R> tmp, bll(static_cast<std::size_t>(Q)), blh(static_cast<std::size_t>(Q)),
          bhl(static_cast<std::size_t>(Q)), bhh(static_cast<std::size_t>(Q));
      for (std::int64_t p = 0; p < P; ++p) {
        detail::dwt2_plane(go->data() + p * H * W, H, W, bll.data(), blh.data(), bhl.data(),
                           bhh.data(), tmp);
        for (std::int64_t i = 0; i < Q; ++i) {
          if (gll) (*gll)[p * Q + i] += bll[static_cast<std::size_t>(i)];
          if (glh) (*glh)[p * Q + i] += blh[static_cast<std::size_t>(i)];
          if (ghl) (*ghl)[p * Q + i] += bhl[static_cast<std::size_t>(i)];
          if (ghh) (*ghh)[p * Q + i] += bhh[static_cast<std::size_t>(i)];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// FFT
// ---------------------------------------------------------------------------

template <class R>
Spectrum<R> fft2(const Tensor<R>& x) {
  detail::expect_rank("fft2", x, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (!detail::is_pow2(H) || !detail::is_pow2(W))
    throw std::invalid_argument("fft2: extents " + std::to_string(H) + "x" + std::to_string(W) +
                                " must be powers of two; zero-pad the input");
  const std::int64_t P = B * C, HW = H * W;
  Spectrum<R> spec{Tensor<R>::zeros(x.shape()), Tensor<R>::zeros(x.shape()),
                   SpectrumLayout::natural};
  {
    auto rev = spec.re.mutable_values();
    auto xv = x.values();
    for (std::size_t i = 0; i < rev.size(); ++i) rev[i] = xv[i];
  }
  std::vector<R> sre, sim;
  for (std::int64_t p = 0; p < P; ++p)
    detail::fft2_plane(spec.re.mutable_values().data() + p * HW,
                       spec.im.mutable_values().data() + p * HW, H, W, -1, sre, sim);
  if (grad_needed<R>(x)) {
    spec.re.ensure_grad();
    spec.im.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), gre = spec.re.grad_ptr(), gim = spec.im.grad_ptr(), P, H, W,
                    HW] {
      // Adjoint of the unnormalized forward DFT: inverse-sign kernel, no
      // scaling, real part.
      std::vector<R> re(static_cast<std::size_t>(HW)), im(static_cast<std::size_t>(HW)), sre, sim;
      for (std::int64_t p = 0; p < P; ++p) {
        for (std::int64_t i = 0; i < HW; ++i) {
          re[static_cast<std::size_t>(i)] = (*gre)[p * HW + i];
          im[static_cast<std::size_t>(i)] = (*gim)[p * HW + i];
        }
        detail::fft2_plane(re.data(), im.data(), H, W, +1, sre, sim);
        R* dst = gx->data() + p * HW;
        for (std::int64_t i = 0; i < HW; ++i) dst[i] += re[static_cast<std::size_t>(i)];
      }
    });
  }
  return spec;
}

// Inverse FFT with the 1/(MN) factor; returns the real plane. A centered
// spectrum is un-shifted internally.
template <class R>
Tensor<R> ifft2(const Spectrum<R>& spec);

// Moves F(0,0) to (H/2, W/2) and toggles the layout flag. For the power-of-two
// extents used here the roll is an involution.
template <class R>
Spectrum<R> fftshift(const Spectrum<R>& spec) {
  detail::expect_rank("fftshift", spec.re, 4);
  const std::int64_t B = spec.re.extent(0), C = spec.re.extent(1);
  const std::int64_t H = spec.re.extent(2), W = spec.re.extent(3);
  auto roll = [&](const Tensor<R>& t) {
    return detail::permute_op(t, t.shape(), [&](std::vector<std::int64_t>& p) {
      std::int64_t i = 0;
      for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t u = 0; u < H; ++u)
          for (std::int64_t v = 0; v < W; ++v)
            p[static_cast<std::size_t>(i++)] =
                (bc * H + (u + H / 2) % H) * W + (v + W / 2) % W;
    });
  };
  return Spectrum<R>{roll(spec.re), roll(spec.im),
                     spec.layout == SpectrumLayout::natural ? SpectrumLayout::centered
                                                            : SpectrumLayout::natural};
}

template <class R>
Tensor<R> ifft2(const Spectrum<R>& spec) {
  detail::expect_rank("ifft2", spec.re, 4);
  detail::expect_same_shape("ifft2", spec.re, spec.im);
  Spectrum<R> s = spec.layout == SpectrumLayout::centered ? fftshift(spec) : spec;
  const std::int64_t B = s.re.extent(0), C = s.re.extent(1), H = s.re.extent(2),
                     W = s.re.extent(3);
  if (!detail::is_pow2(H) || !detail::is_pow2(W))
    throw std::invalid_argument("ifft2: extents must be powers of two");
  const std::int64_t P = B * C, HW = H * W;
  const R scale = static_cast<R>(1.0 / static_cast<double>(HW));
  auto out = Tensor<R>::zeros(s.re.shape());
  std::vector<R> re(static_cast<std::size_t>(HW)), im(static_cast<std::size_t>(HW)), sre, sim;
  for (std::int64_t p = 0; p < P; ++p) {
    for (std::int64_t i = 0; i < HW; ++i) {
      re[static_cast<std::size_t>(i)] = s.re.values()[static_cast<std::size_t>(p * HW + i)];
      im[static_cast<std::size_t>(i)] = s.im.values()[static_cast<std::size_t>(p * HW + i)];
    }
    detail::fft2_plane(re.data(), im.data(), H, W, +1, sre, sim);
    R* dst = out.mutable_values().data() + p * HW;
    for (std::int64_t i = 0; i < HW; ++i) dst[i] = re[static_cast<std::size_t>(i)] * scale;
  }
  if (grad_needed<R>(s.re, s.im)) {
    out.ensure_grad();
    record_node<R>([gre = s.re.grad_ptr(), gim = s.im.grad_ptr(), go = out.grad_ptr(), P, H, W, HW,
                    scale] {
      // Adjoint: forward-kernel DFT of the (real) output gradient, scaled.
      std::vector<R> re(static_cast<std::size_t>(HW)), im(static_cast<std::size_t>(HW)), sre, sim;
      for (std::int64_t p = 0; p < P; ++p) {
        for (std::int64_t i = 0; i < HW; ++i) {
          re[static_cast<std::size_t>(i)] = (*go)[p * HW + i];
          im[static_cast<std::size_t>(i)] = R(0);
        }
        detail::fft2_plane(re.data(), im.data(), H, W, -1, sre, sim);
        for (std::int64_t i = 0; i < HW; ++i) {
          if (gre) (*gre)[p * HW + i] += re[static_cast<std::size_t>(i)] * scale;
          if (gim) (*gim)[p * HW + i] += im[static_cast<std::size_t>(i)] * scale;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// DCT
// ---------------------------------------------------------------------------

template <class R>
DctSpectrum<R> dct2(const Tensor<R>& x) {
  detail::expect_rank("dct2", x, 4);
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  const std::int64_t P = B * C, HW = H * W;
  const auto cm = detail::dct_matrix(H);
  const auto cn = detail::dct_matrix(W);
  DctSpectrum<R> spec{Tensor<R>::zeros(x.shape())};
  std::vector<double> tmp;
  for (std::int64_t p = 0; p < P; ++p)
    detail::dct2_plane(x.values().data() + p * HW, H, W, cm, cn, false,
                       spec.coef.mutable_values().data() + p * HW, tmp);
  if (grad_needed<R>(x)) {
    spec.coef.ensure_grad();
    record_node<R>([gx = x.grad_ptr(), gc = spec.coef.grad_ptr(), cm, cn, P, H, W, HW] {
      std::vector<double> tmp;
      std::vector<R> plane(static_cast<std::size_t>(HW));
      for (std::int64_t p = 0; p < P; ++p) {
        detail::dct2_plane(gc->data() + p * HW, H, W, cm, cn, true, plane.data(), tmp);
        R* dst = gx->data() + p * HW;
        for (std::int64_t i = 0; i < HW; ++i) dst[i] += plane[static_cast<std::size_t>(i)];
      }
    });
  }
  return spec;
}

template <class R>
Tensor<R> idct2(const DctSpectrum<R>& spec) {
  detail::expect_rank("idct2", spec.coef, 4);
  const std::int64_t B = spec.coef.extent(0), C = spec.coef.extent(1);
  const std::int64_t H = spec.coef.extent(2), W = spec.coef.extent(3);
  const std::int64_t P = B * C, HW = H * W;
  const auto cm = detail::dct_matrix(H);
  const auto cn = detail::dct_matrix(W);
  auto out = Tensor<R>::zeros(spec.coef.shape());
  std::vector<double> tmp;
  for (std::int64_t p = 0; p < P; ++p)
    detail::dct2_plane(spec.coef.values().data() + p * HW, H, W, cm, cn, true,
                       out.mutable_values().data() + p * HW, tmp);
  if (grad_needed<R>(spec.coef)) {
    out.ensure_grad();
    record_node<R>([gc = spec.coef.grad_ptr(), go = out.grad_ptr(), cm, cn, P, H, W, HW] {
      std::vector<double> tmp;
      std::vector<R> plane(static_cast<std::size_t>(HW));
      for (std::int64_t p = 0; p < P; ++p) {
        detail::dct2_plane(go->data() + p * HW, H, W, cm, cn, false, plane.data(), tmp);
        R* dst = gc->data() + p * HW;
        for (std::int64_t i = 0; i < HW; ++i) dst[i] += plane[static_cast<std::size_t>(i)];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Band masks
// ---------------------------------------------------------------------------

// Partitions the [H, W] coefficient plane into K disjoint, exhaustive bands.
//   ring:  centered radius thresholds r_k = (k/K) * hypot(H/2, W/2); band k
//          keeps r_{k-1} <= r < r_k, with band K closing the outer boundary.
//   wedge: anti-diagonal thresholds t_k = ceil(k * (H+W-1) / K) on u+v.
// Throws if K is large enough to leave a band empty.
template <class R>
BandMaskSet<R> make_band_masks(BandKind kind, std::int64_t H, std::int64_t W, std::int64_t K) {
  if (K < 1) throw std::invalid_argument("make_band_masks: K must be >= 1");
  if (H < 2 || W < 2) throw std::invalid_argument("make_band_masks: extents must be >= 2");
  BandMaskSet<R> set{kind, K, {}};
  std::vector<std::int64_t> band_of(static_cast<std::size_t>(H * W), -1);
  if (kind == BandKind::ring) {
    const double cu = static_cast<double>(H) / 2.0, cv = static_cast<double>(W) / 2.0;
    const double r_max = std::hypot(cu, cv);
    for (std::int64_t u = 0; u < H; ++u)
      for (std::int64_t v = 0; v < W; ++v) {
        const double r = std::hypot(static_cast<double>(u) - cu, static_cast<double>(v) - cv);
        std::int64_t k = static_cast<std::int64_t>(std::floor(r / r_max * static_cast<double>(K)));
        if (k >= K) k = K - 1;  // r == r_max lands in the closing band
        band_of[static_cast<std::size_t>(u * W + v)] = k;
      }
  } else {
    const std::int64_t span = H + W - 1;
    std::vector<std::int64_t> thresh(static_cast<std::size_t>(K + 1), 0);
    for (std::int64_t k = 1; k <= K; ++k)
      thresh[static_cast<std::size_t>(k)] = (k * span + K - 1) / K;  // ceil(k*span/K)
    for (std::int64_t u = 0; u < H; ++u)
      for (std::int64_t v = 0; v < W; ++v) {
        const std::int64_t s = u + v;
        for (std::int64_t k = 1; k <= K; ++k)
          if (s >= thresh[static_cast<std::size_t>(k - 1)] &&
              s < thresh[static_cast<std::size_t>(k)]) {
            band_of[static_cast<std::size_t>(u * W + v)] = k - 1;
            break;
          }
      }
  }
  for (std::int64_t k = 0; k < K; ++k) {
    auto mask = Tensor<R>::zeros({H, W});
    std::int64_t population = 0;
    auto mv = mask.mutable_values();
    for (std::int64_t i = 0; i < H * W; ++i)
      if (band_of[static_cast<std::size_t>(i)] == k) {
        mv[static_cast<std::size_t>(i)] = R(1);
        ++population;
      }
    if (population == 0)
      throw std::invalid_argument("make_band_masks: band " + std::to_string(k + 1) +
                                  " of " + std::to_string(K) + " is empty on " +
                                  std::to_string(H) + "x" + std::to_string(W) +
                                  "; reduce the band count");
    set.masks.push_back(std::move(mask));
  }
  return set;
}

// Zeroes coefficients outside the mask; gradient flows through kept entries.
template <class R>
Spectrum<R> apply_mask(const Spectrum<R>& spec, const Tensor<R>& mask) {
  return Spectrum<R>{mask_mul(spec.re, mask), mask_mul(spec.im, mask), spec.layout};
}

template <class R>
DctSpectrum<R> apply_mask(const DctSpectrum<R>& spec, const Tensor<R>& mask) {
  return DctSpectrum<R>{mask_mul(spec.coef, mask)};
}

}  // namespace farmamba
