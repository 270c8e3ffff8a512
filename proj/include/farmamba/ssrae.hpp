#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "farmamba/encoder.hpp"
#include "farmamba/labels.hpp"

// Self-supervised reconstruction branch: a degraded copy of the input is
// re-encoded by a structurally identical encoder, label-guided region
// attention sharpens the token interactions, and a projection head maps the
// result onto the main encoder's feature map as a reconstruction target.
// Training-time only; inference never touches this path.

namespace farmamba {

struct DegradeConfig {
  std::int64_t downscale = 4;
  double sigma_noise = 0.01;
};

namespace detail {

// Fixed 3x3 binomial blur [1,2,1] (x) [1,2,1] / 16 with replicated borders;
// preserves constants exactly. Depthwise, non-learned, applied outside the
// tape (the degraded image is data, not a differentiable path).
template <class R>
Tensor<R> binomial_blur3(const Tensor<R>& x) {
  const std::int64_t P = x.extent(0) * x.extent(1), H = x.extent(2), W = x.extent(3);
  auto out = Tensor<R>::zeros(x.shape());
  static constexpr double kKernel[3] = {0.25, 0.5, 0.25};
  const R* xp = x.values().data();
  R* op = out.mutable_values().data();
  std::vector<R> tmp(static_cast<std::size_t>(H * W));
  for (std::int64_t p = 0; p < P; ++p) {
    const R* src = xp + p * H * W;
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) {
        double acc = 0;
        for (int d = -1; d <= 1; ++d) {
          const std::int64_t ww = std::clamp<std::int64_t>(w + d, 0, W - 1);
          acc += kKernel[d + 1] * static_cast<double>(src[h * W + ww]);
        }
        tmp[static_cast<std::size_t>(h * W + w)] = static_cast<R>(acc);
      }
    R* dst = op + p * H * W;
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w) {
        double acc = 0;
        for (int d = -1; d <= 1; ++d) {
          const std::int64_t hh = std::clamp<std::int64_t>(h + d, 0, H - 1);
          acc += kKernel[d + 1] * static_cast<double>(tmp[static_cast<std::size_t>(hh * W + w)]);
        }
        dst[h * W + w] = static_cast<R>(acc);
      }
  }
  return out;
}

}  // namespace detail

// Area-downscale -> fixed 3x3 depthwise blur -> seeded Gaussian noise.
template <class R>
Tensor<R> degrade(const Tensor<R>& x, const DegradeConfig& cfg, Rng& rng) {
  detail::expect_rank("degrade", x, 4);
  if (cfg.sigma_noise < 0) throw std::invalid_argument("degrade: sigma_noise must be >= 0");
  const std::int64_t d = cfg.downscale;
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  if (H % d != 0 || W % d != 0)
    throw std::invalid_argument("degrade: extents " + std::to_string(H) + "x" +
                                std::to_string(W) + " not divisible by downscale " +
                                std::to_string(d));
  const std::int64_t Ho = H / d, Wo = W / d;
  auto down = Tensor<R>::zeros({B, C, Ho, Wo});
  const R* xp = x.values().data();
  R* dp = down.mutable_values().data();
  const R inv = static_cast<R>(1.0 / static_cast<double>(d * d));
  for (std::int64_t p = 0; p < B * C; ++p)
    for (std::int64_t oh = 0; oh < Ho; ++oh)
      for (std::int64_t ow = 0; ow < Wo; ++ow) {
        R acc = R(0);
        for (std::int64_t dy = 0; dy < d; ++dy)
          for (std::int64_t dx = 0; dx < d; ++dx)
            acc += xp[(p * H + oh * d + dy) * W + ow * d + dx];
        dp[(p * Ho + oh) * Wo + ow] = acc * inv;
      }
  auto blurred = detail::binomial_blur3(down);
  if (cfg.sigma_noise > 0) {
    auto bv = blurred.mutable_values();
    for (auto& v : bv) v += static_cast<R>(rng.normal(0.0, cfg.sigma_noise));
  }
  return blurred;
}

// ---------------------------------------------------------------------------
// Region attention
// ---------------------------------------------------------------------------

// Additive attention bias [B, L, L]: 0 within a labeled region, -large across
// regions. With row maxima at 0 the cross-region softmax mass underflows to
// exactly zero.
template <class R>
Tensor<R> make_region_bias(const LabelMap& labels, std::int64_t feat_h, std::int64_t feat_w,
                           R large = R(1e9)) {
  const auto resized = resize_labels_nearest(labels, feat_h, feat_w);
  const std::int64_t B = labels.batch, L = feat_h * feat_w;
  auto bias = Tensor<R>::zeros({B, L, L});
  auto bv = bias.mutable_values();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < L; ++i)
      for (std::int64_t j = 0; j < L; ++j)
        if (resized.v[static_cast<std::size_t>(b * L + i)] !=
            resized.v[static_cast<std::size_t>(b * L + j)])
          bv[static_cast<std::size_t>((b * L + i) * L + j)] = -large;
  return bias;
}

template <class R>
struct RegionAttentionParams {
  LinearLayer<R> wq, wk, wv, wo;
  std::int64_t heads = 4;
  std::int64_t dim = 0;

  RegionAttentionParams() = default;
  RegionAttentionParams(ParamTree<R>& tree, const std::string& name, std::uint64_t seed,
                        std::int64_t dim_, std::int64_t heads_)
      : heads(heads_), dim(dim_) {
    if (dim_ % heads_ != 0)
      throw std::invalid_argument("region attention: dim not divisible by heads");
    wq = LinearLayer<R>(tree, name + ".wq", seed, dim_, dim_);
    wk = LinearLayer<R>(tree, name + ".wk", seed, dim_, dim_);
    wv = LinearLayer<R>(tree, name + ".wv", seed, dim_, dim_);
    wo = LinearLayer<R>(tree, name + ".wo", seed, dim_, dim_, /*zero_init=*/true);
  }
};

// Softmax attention weights [B, heads, L, L] with the region bias applied.
template <class R>
Tensor<R> attention_probs(const Tensor<R>& feat, const Tensor<R>& bias,
                          const RegionAttentionParams<R>& p) {
  detail::expect_rank("attention_probs", feat, 3);
  const std::int64_t L = feat.extent(1), D = feat.extent(2);
  if (bias.rank() != 3 || bias.extent(1) != L || bias.extent(2) != L)
    throw std::invalid_argument("region attention: bias must be [B,L,L] with L=" +
                                std::to_string(L));
  if (D != p.dim) throw std::invalid_argument("region attention: feature dim mismatch");
  const std::int64_t dh = D / p.heads;
  auto q = split_heads(p.wq(feat), p.heads);
  auto k = split_heads(p.wk(feat), p.heads);
  auto logits = mul_scalar(matmul(q, transpose_last2(k)),
                           static_cast<R>(1.0 / std::sqrt(static_cast<double>(dh))));
  return softmax(add_attn_bias(logits, bias), 3);
}

// Multi-head self-attention with additive region bias (no residual).
template <class R>
Tensor<R> masked_attention(const Tensor<R>& feat, const Tensor<R>& bias,
                           const RegionAttentionParams<R>& p) {
  auto probs = attention_probs(feat, bias, p);
  auto v = split_heads(p.wv(feat), p.heads);
  auto ctx = merge_heads(matmul(probs, v));
  return p.wo(ctx);
}

// Residual wrapper; the zero-initialized output projection makes this an
// exact identity at construction.
template <class R>
Tensor<R> region_attention(const Tensor<R>& feat, const Tensor<R>& bias,
                           const RegionAttentionParams<R>& p) {
  return add(feat, masked_attention(feat, bias, p));
}

// ---------------------------------------------------------------------------
// SSRAE assembly
// ---------------------------------------------------------------------------

struct SsraeConfig {
  bool enabled = true;
  DegradeConfig degrade;
  std::int64_t target_stage = 1;  // 1-based main-encoder stage to reconstruct
  bool msfm_in_recon = true;      // frequency module inside this branch
  bool tie_weights = false;       // share encoder weights with the main branch
  std::int64_t attn_heads = 4;
};

template <class R>
class Ssrae {
 public:
  Ssrae() = default;

  // `main` supplies the architecture; when tie_weights is set, its parameters
  // are reused for the auxiliary encoding pass instead of fresh ones.
  Ssrae(ParamTree<R>& tree, const std::string& name, std::uint64_t seed, SsraeConfig cfg,
        const EncoderConfig& enc_cfg, const Encoder<R>* main,
        const std::optional<MsfmConfig>& msfm_cfg)
      : cfg_(cfg), main_(main) {
    if (!cfg_.tie_weights) {
      aux_ = Encoder<R>(tree, name + ".enc", seed, enc_cfg,
                        cfg_.msfm_in_recon ? msfm_cfg : std::nullopt,
                        {cfg_.target_stage});
    }
    const std::int64_t c = enc_cfg.stage_channels(cfg_.target_stage - 1);
    attn_ = RegionAttentionParams<R>(tree, name + ".attn", seed, c, cfg_.attn_heads);
    head_ = Conv2dLayer<R>(tree, name + ".head", seed, c, c, 3, 1);
  }

  const SsraeConfig& config() const { return cfg_; }

  Tensor<R> degrade_input(const Tensor<R>& image, Rng& rng) const {
    return degrade(image, cfg_.degrade, rng);
  }

  // Encodes the degraded image, applies region attention at the target stage,
  // and projects to `target_shape` (the main encoder's feature shape).
  Tensor<R> reconstruct(const Tensor<R>& degraded, const LabelMap& labels,
                        const Shape& target_shape) const {
    const Encoder<R>& enc = cfg_.tie_weights ? *main_ : aux_;
    auto feats = enc.encode(degraded, cfg_.target_stage);
    auto f = feats.back();
    const std::int64_t fh = f.extent(2), fw = f.extent(3);
    auto bias = make_region_bias<R>(labels, fh, fw);
    auto seq = region_attention(hw_to_seq(f), bias, attn_);
    auto img = seq_to_hw(seq, fh, fw);
    if (target_shape.size() != 4 || target_shape[1] != f.extent(1))
      throw std::invalid_argument("ssrae: target stage shape mismatch");
    const std::int64_t th = target_shape[2], tw = target_shape[3];
    if (th % fh != 0 || tw % fw != 0 || th / fh != tw / fw)
      throw std::invalid_argument("ssrae: target extents " + std::to_string(th) + "x" +
                                  std::to_string(tw) + " not an integer upscale of " +
                                  std::to_string(fh) + "x" + std::to_string(fw));
    const std::int64_t factor = th / fh;
    auto up = factor > 1 ? upsample_nearest(img, factor) : img;
    return head_(up);
  }

  Conv2dLayer<R>& head() { return head_; }

 private:
  SsraeConfig cfg_;
  const Encoder<R>* main_ = nullptr;
  Encoder<R> aux_;
  RegionAttentionParams<R> attn_;
  Conv2dLayer<R> head_;
};

}  // namespace farmamba
