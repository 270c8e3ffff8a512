#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "farmamba/nn.hpp"

// Selective state-space scanning. A diagonal linear recurrence with
// input-dependent (selective) B/C projections runs over token sequences; SS2D
// serializes a 2D feature map in four directions, scans each, and fuses the
// results. A = -exp(A_log) keeps every recurrence pole strictly negative, so
// exp(delta * A) < 1 and the hidden state stays bounded for bounded input.

namespace farmamba {

template <class R>
struct SsmParams {
  Tensor<R> a_log;            // [C, N]; A = -exp(a_log)
  LinearLayer<R> delta_proj;  // C -> C, softplus'd into the step size
  LinearLayer<R> b_proj;      // C -> N, input projection of the state
  LinearLayer<R> c_proj;      // C -> N, output readout of the state
  Tensor<R> skip;             // [C], the D term

  SsmParams() = default;
  SsmParams(ParamTree<R>& tree, const std::string& name, std::uint64_t seed, std::int64_t channels,
            std::int64_t state_dim) {
    // S4D-real pole ladder: A_n = -(n+1).
    auto a = Tensor<R>::zeros({channels, state_dim});
    for (std::int64_t c = 0; c < channels; ++c)
      for (std::int64_t n = 0; n < state_dim; ++n)
        a.mutable_values()[c * state_dim + n] = static_cast<R>(std::log(static_cast<double>(n + 1)));
    a_log = tree.add(name + ".a_log", std::move(a));
    delta_proj = LinearLayer<R>(tree, name + ".delta", seed, channels, channels);
    {
      // softplus(bias) ~ 0.01 sets a small, stable initial step size.
      const R b0 = static_cast<R>(std::log(std::exp(0.01) - 1.0));
      auto bias = delta_proj.b.mutable_values();
      for (auto& v : bias) v = b0;
    }
    b_proj = LinearLayer<R>(tree, name + ".b", seed, channels, state_dim);
    c_proj = LinearLayer<R>(tree, name + ".c", seed, channels, state_dim);
    skip = tree.add(name + ".skip", Tensor<R>::ones({channels}));
  }
};

// Fused recurrence kernel:
//   h_t = exp(delta_t * A) . h_{t-1} + delta_t * B_t * u_t,   h_0 = 0
//   y_t = C_t . h_t + D * u_t
// u, delta: [B,L,C]; Bt, Ct: [B,L,N]; A: [C,N]; D: [C]. The full hidden-state
// history is kept for the reverse sweep.
template <class R>
Tensor<R> ssm_scan(const Tensor<R>& u, const Tensor<R>& delta, const Tensor<R>& bt,
                   const Tensor<R>& ct, const Tensor<R>& a, const Tensor<R>& d) {
  detail::expect_rank("ssm_scan", u, 3);
  detail::expect_same_shape("ssm_scan", u, delta);
  detail::expect_same_shape("ssm_scan", bt, ct);
  const std::int64_t B = u.extent(0), L = u.extent(1), C = u.extent(2);
  const std::int64_t N = a.extent(1);
  if (a.rank() != 2 || a.extent(0) != C)
    throw std::invalid_argument("ssm_scan: A must be [C,N]");
  if (bt.rank() != 3 || bt.extent(0) != B || bt.extent(1) != L || bt.extent(2) != N)
    throw std::invalid_argument("ssm_scan: B_t/C_t must be [B,L,N]");
  if (d.numel() != C) throw std::invalid_argument("ssm_scan: D must be [C]");

  auto out = Tensor<R>::zeros({B, L, C});
  auto hist = std::make_shared<std::vector<R>>(static_cast<std::size_t>(B * L * C * N), R(0));
  const R* up = u.values().data();
  const R* dp = delta.values().data();
  const R* bp = bt.values().data();
  const R* cp = ct.values().data();
  const R* ap = a.values().data();
  const R* skp = d.values().data();
  R* yp = out.mutable_values().data();
  R* hp = hist->data();

  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t t = 0; t < L; ++t) {
      const R* brow = bp + (b * L + t) * N;
      const R* crow = cp + (b * L + t) * N;
      for (std::int64_t c = 0; c < C; ++c) {
        const R dt = dp[(b * L + t) * C + c];
        const R ut = up[(b * L + t) * C + c];
        const R* arow = ap + c * N;
        const R* hprev = t > 0 ? hp + ((b * L + t - 1) * C + c) * N : nullptr;
        R* hcur = hp + ((b * L + t) * C + c) * N;
        R acc = R(0);
        for (std::int64_t n = 0; n < N; ++n) {
          const R da = std::exp(dt * arow[n]);
          const R h = (hprev ? da * hprev[n] : R(0)) + dt * brow[n] * ut;
          hcur[n] = h;
          acc += crow[n] * h;
        }
        yp[(b * L + t) * C + c] = acc + skp[c] * ut;
      }
    }
  }

  if (grad_needed<R>(u, delta, bt, ct, a, d)) {
    out.ensure_grad();
    record_node<R>([gu = u.grad_ptr(), gdelta = delta.grad_ptr(), gbt = bt.grad_ptr(),
                    gct = ct.grad_ptr(), ga = a.grad_ptr(), gd = d.grad_ptr(),
                    go = out.grad_ptr(), uv = u.value_ptr(), dv = delta.value_ptr(),
                    bv = bt.value_ptr(), cv = ct.value_ptr(), av = a.value_ptr(),
                    dsv = d.value_ptr(), hist, B, L, C, N] {
      const R* up = uv->data();
      const R* dp = dv->data();
      const R* bp = bv->data();
      const R* cp = cv->data();
      const R* ap = av->data();
      const R* skp = dsv->data();
      const R* hp = hist->data();
      const R* gop = go->data();
      std::vector<R> ghh(static_cast<std::size_t>(C * N));
      for (std::int64_t b = 0; b < B; ++b) {
        std::fill(ghh.begin(), ghh.end(), R(0));
        for (std::int64_t t = L - 1; t >= 0; --t) {
          const R* brow = bp + (b * L + t) * N;
          const R* crow = cp + (b * L + t) * N;
          for (std::int64_t c = 0; c < C; ++c) {
            const R gy = gop[(b * L + t) * C + c];
            const R dt = dp[(b * L + t) * C + c];
            const R ut = up[(b * L + t) * C + c];
            const R* arow = ap + c * N;
            const R* hcur = hp + ((b * L + t) * C + c) * N;
            const R* hprev = t > 0 ? hp + ((b * L + t - 1) * C + c) * N : nullptr;
            R* gh = ghh.data() + c * N;
            if (gd) (*gd)[static_cast<std::size_t>(c)] += gy * ut;
            R gut = gy * skp[c];
            R gdt = R(0);
            for (std::int64_t n = 0; n < N; ++n) {
              R g = gh[n] + gy * crow[n];
              if (gct) (*gct)[(b * L + t) * N + n] += gy * hcur[n];
              const R da = std::exp(dt * arow[n]);
              const R hprev_n = hprev ? hprev[n] : R(0);
              gdt += g * (arow[n] * da * hprev_n + brow[n] * ut);
              if (ga) (*ga)[c * N + n] += g * dt * da * hprev_n;
              if (gbt) (*gbt)[(b * L + t) * N + n] += g * dt * ut;
              gut += g * dt * brow[n];
              gh[n] = g * da;  // carried to h_{t-1}
            }
            if (gu) (*gu)[(b * L + t) * C + c] += gut;
            if (gdelta) (*gdelta)[(b * L + t) * C + c] += gdt;
          }
        }
      }
    });
  }
  return out;
}

// The full selective scan: input-dependent step size and state projections
// around the fused recurrence kernel.
template <class R>
Tensor<R> selective_scan(const Tensor<R>& u, const SsmParams<R>& p) {
  detail::expect_rank("selective_scan", u, 3);
  if (u.extent(1) < 1) throw std::invalid_argument("selective_scan: empty sequence");
  auto delta = softplus(p.delta_proj(u));
  auto bt = p.b_proj(u);
  auto ct = p.c_proj(u);
  auto a = neg(exp(p.a_log));
  return ssm_scan(u, delta, bt, ct, a, p.skip);
}

// Four serialization directions of a [B,C,H,W] map.
enum class ScanDir { row, row_rev, col, col_rev };

template <class R>
struct Ss2dParams {
  std::array<SsmParams<R>, 4> dirs;
  LinearLayer<R> out_proj;  // zero-init: ss2d vanishes at initialization

  Ss2dParams() = default;
  Ss2dParams(ParamTree<R>& tree, const std::string& name, std::uint64_t seed,
             std::int64_t channels, std::int64_t state_dim) {
    static constexpr const char* kDirName[4] = {"row", "row_rev", "col", "col_rev"};
    for (int i = 0; i < 4; ++i)
      dirs[static_cast<std::size_t>(i)] =
          SsmParams<R>(tree, name + "." + kDirName[i], seed, channels, state_dim);
    out_proj = LinearLayer<R>(tree, name + ".out", seed, channels, channels, /*zero_init=*/true);
  }
};

// Serializes x in the given direction as a [B, H*W, C] token sequence.
template <class R>
Tensor<R> serialize_dir(const Tensor<R>& x, ScanDir dir) {
  switch (dir) {
    case ScanDir::row:
      return hw_to_seq(x);
    case ScanDir::row_rev:
      return reverse_seq(hw_to_seq(x));
    case ScanDir::col:
      return hw_to_seq(transpose_hw(x));
    case ScanDir::col_rev:
      return reverse_seq(hw_to_seq(transpose_hw(x)));
  }
  throw std::logic_error("serialize_dir: bad direction");
}

// Inverse of serialize_dir back to [B, C, H, W].
template <class R>
Tensor<R> deserialize_dir(const Tensor<R>& seq, ScanDir dir, std::int64_t H, std::int64_t W) {
  switch (dir) {
    case ScanDir::row:
      return seq_to_hw(seq, H, W);
    case ScanDir::row_rev:
      return seq_to_hw(reverse_seq(seq), H, W);
    case ScanDir::col:
      return transpose_hw(seq_to_hw(seq, W, H));
    case ScanDir::col_rev:
      return transpose_hw(seq_to_hw(reverse_seq(seq), W, H));
  }
  throw std::logic_error("deserialize_dir: bad direction");
}

// Four-direction selective scan over a feature map: each serialization is
// scanned independently, rearranged back to 2D, summed, and projected.
template <class R>
Tensor<R> ss2d(const Tensor<R>& x, const Ss2dParams<R>& p) {
  detail::expect_rank("ss2d", x, 4);
  const std::int64_t H = x.extent(2), W = x.extent(3);
  static constexpr ScanDir kDirs[4] = {ScanDir::row, ScanDir::row_rev, ScanDir::col,
                                       ScanDir::col_rev};
  Tensor<R> total;
  for (int i = 0; i < 4; ++i) {
    auto seq = serialize_dir(x, kDirs[i]);
    auto y = selective_scan(seq, p.dirs[static_cast<std::size_t>(i)]);
    auto img = deserialize_dir(y, kDirs[i], H, W);
    total = i == 0 ? img : add(total, img);
  }
  auto proj = p.out_proj(hw_to_seq(total));
  return seq_to_hw(proj, H, W);
}

// Residual block: LN -> ss2d -> add, then LN -> MLP -> add. With the ss2d
// output projection and the second MLP layer zero-initialized the block is an
// exact identity at construction.
template <class R>
struct VssBlockParams {
  LayerNormLayer<R> ln1, ln2;
  Ss2dParams<R> scan;
  LinearLayer<R> fc1, fc2;

  VssBlockParams() = default;
  VssBlockParams(ParamTree<R>& tree, const std::string& name, std::uint64_t seed,
                 std::int64_t channels, std::int64_t state_dim, std::int64_t mlp_ratio = 4) {
    ln1 = LayerNormLayer<R>(tree, name + ".ln1", channels);
    ln2 = LayerNormLayer<R>(tree, name + ".ln2", channels);
    scan = Ss2dParams<R>(tree, name + ".ss2d", seed, channels, state_dim);
    fc1 = LinearLayer<R>(tree, name + ".fc1", seed, channels, channels * mlp_ratio);
    fc2 = LinearLayer<R>(tree, name + ".fc2", seed, channels * mlp_ratio, channels,
                         /*zero_init=*/true);
  }
};

template <class R>
Tensor<R> vss_block(const Tensor<R>& x, const VssBlockParams<R>& p) {
  detail::expect_rank("vss_block", x, 4);
  const std::int64_t H = x.extent(2), W = x.extent(3);
  auto seq = hw_to_seq(x);
  auto normed = p.ln1(seq);
  auto scanned = hw_to_seq(ss2d(seq_to_hw(normed, H, W), p.scan));
  seq = add(seq, scanned);
  auto mlp = p.fc2(silu(p.fc1(p.ln2(seq))));
  seq = add(seq, mlp);
  return seq_to_hw(seq, H, W);
}

}  // namespace farmamba
