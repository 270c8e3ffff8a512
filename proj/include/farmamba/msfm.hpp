#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "farmamba/freq.hpp"
#include "farmamba/nn.hpp"

// Multi-scale frequency module: projects a feature map into a frequency
// domain (DWT, FFT or DCT), processes isolated bands with scale-adapted
// convolutions, and fuses the restored detail back into the spatial stream.
// The fusion projection is zero-initialized, so a freshly constructed module
// is an exact identity on its residual path and can be inserted mid-training.

namespace farmamba {

enum class MsfmVariant { dwt, fft, dct };

inline MsfmVariant msfm_variant_from_string(const std::string& s) {
  if (s == "dwt") return MsfmVariant::dwt;
  if (s == "fft") return MsfmVariant::fft;
  if (s == "dct") return MsfmVariant::dct;
  throw std::invalid_argument("unknown msfm variant '" + s + "' (expected dwt|fft|dct)");
}

struct MsfmConfig {
  MsfmVariant variant = MsfmVariant::dwt;
  std::int64_t bands = 3;
  std::int64_t channels = 0;
  std::vector<std::int64_t> kernel_scales = {1, 3, 5};
  bool residual = true;
  bool use_cbam = true;          // DWT variant only; off bypasses the gates
  std::int64_t cbam_reduction = 4;

  void validate() const {
    if (bands < 1) throw std::invalid_argument("msfm: bands must be >= 1");
    if (channels < 1) throw std::invalid_argument("msfm: channels must be set");
    if (kernel_scales.empty()) throw std::invalid_argument("msfm: kernel_scales empty");
    for (auto k : kernel_scales)
      if (k % 2 == 0) throw std::invalid_argument("msfm: kernel scales must be odd");
  }
};

// Channel + spatial attention gates. The channel MLP (shared between the
// average- and max-pooled paths) squeezes by `reduction`; the spatial gate is
// a 7x7 convolution over the channel-mean and channel-max planes.
template <class R>
struct CbamParams {
  LinearLayer<R> fc1, fc2;
  Conv2dLayer<R> spatial;
  std::int64_t channels = 0;

  CbamParams() = default;
  CbamParams(ParamTree<R>& tree, const std::string& name, std::uint64_t seed,
             std::int64_t channels_, std::int64_t reduction)
      : channels(channels_) {
    if (channels_ < reduction)
      throw std::invalid_argument("cbam: channels " + std::to_string(channels_) +
                                  " smaller than reduction " + std::to_string(reduction));
    if (channels_ % reduction != 0)
      throw std::invalid_argument("cbam: channels must be divisible by reduction");
    fc1 = LinearLayer<R>(tree, name + ".fc1", seed, channels_, channels_ / reduction);
    fc2 = LinearLayer<R>(tree, name + ".fc2", seed, channels_ / reduction, channels_);
    spatial = Conv2dLayer<R>(tree, name + ".spatial", seed, 2, 1, 7, 3);
  }
};

template <class R>
Tensor<R> cbam(const Tensor<R>& x, const CbamParams<R>& p) {
  detail::expect_rank("cbam", x, 4);
  if (x.extent(1) != p.channels)
    throw std::invalid_argument("cbam: input has " + std::to_string(x.extent(1)) +
                                " channels, module built for " + std::to_string(p.channels));
  // Channel gate from global average and max statistics.
  auto avg = reduce_mean(reduce_mean(x, 3), 2);  // [B, C]
  auto mx = reduce_max(reduce_max(x, 3), 2);
  auto gate_c = sigmoid(add(p.fc2(relu(p.fc1(avg))), p.fc2(relu(p.fc1(mx)))));
  auto xc = scale_channels(x, gate_c);
  // Spatial gate from per-pixel channel statistics.
  const std::int64_t B = x.extent(0), H = x.extent(2), W = x.extent(3);
  auto cmean = reshape(reduce_mean(xc, 1), {B, 1, H, W});
  auto cmax = reshape(reduce_max(xc, 1), {B, 1, H, W});
  auto gate_s = sigmoid(p.spatial(concat<R>({cmean, cmax}, 1)));
  return scale_pixels(xc, gate_s);
}

template <class R>
class Msfm {
 public:
  Msfm() = default;

  Msfm(ParamTree<R>& tree, const std::string& name, std::uint64_t seed, MsfmConfig cfg)
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    scales_ = cfg_.kernel_scales;
    std::sort(scales_.begin(), scales_.end());
    const std::int64_t c = cfg_.channels;
    if (cfg_.variant == MsfmVariant::dwt) {
      if (cfg_.use_cbam) cbam_ = CbamParams<R>(tree, name + ".cbam", seed, c, cfg_.cbam_reduction);
      for (std::size_t s = 0; s < scales_.size(); ++s)
        detail_convs_.emplace_back(tree, name + ".detail" + std::to_string(s), seed, 3 * c, 3 * c,
                                   scales_[s], scales_[s] / 2);
      proj_ = Conv2dLayer<R>(tree, name + ".proj", seed, 3 * c, 3 * c, 1);
    } else {
      for (std::int64_t b = 0; b < cfg_.bands; ++b) {
        const std::int64_t k = scales_[std::min<std::size_t>(static_cast<std::size_t>(b),
                                                             scales_.size() - 1)];
        band_convs_.emplace_back(tree, name + ".band" + std::to_string(b), seed, c, c, k, k / 2);
      }
    }
    fusion_ = Conv2dLayer<R>(tree, name + ".fusion", seed, c, c, 1, 0, 1, 1, /*zero_init=*/true);
  }

  const MsfmConfig& config() const { return cfg_; }

  // Per-band spatial reconstructions before any convolution. FFT/DCT only;
  // by linearity of the transforms these sum to the input.
  std::vector<Tensor<R>> band_images(const Tensor<R>& x) const {
    detail::expect_rank("msfm", x, 4);
    std::vector<Tensor<R>> bands;
    const std::int64_t H = x.extent(2), W = x.extent(3);
    if (cfg_.variant == MsfmVariant::fft) {
      const std::int64_t Hp = next_pow2(H), Wp = next_pow2(W);
      auto xp = (Hp == H && Wp == W) ? x : pad2d(x, 0, Hp - H, 0, Wp - W);
      auto spec = fftshift(fft2(xp));
      auto masks = make_band_masks<R>(BandKind::ring, Hp, Wp, cfg_.bands);
      for (const auto& m : masks.masks) {
        auto img = ifft2(apply_mask(spec, m));
        bands.push_back((Hp == H && Wp == W) ? img : crop2d(img, 0, 0, H, W));
      }
    } else if (cfg_.variant == MsfmVariant::dct) {
      auto spec = dct2(x);
      auto masks = make_band_masks<R>(BandKind::wedge, H, W, cfg_.bands);
      for (const auto& m : masks.masks) bands.push_back(idct2(apply_mask(spec, m)));
    } else {
      throw std::logic_error("band_images: DWT variant decomposes into sub-bands, not masks");
    }
    return bands;
  }

  Tensor<R> operator()(const Tensor<R>& x) const {
    detail::expect_rank("msfm", x, 4);
    if (x.extent(1) != cfg_.channels)
      throw std::invalid_argument("msfm: expected " + std::to_string(cfg_.channels) +
                                  " channels, got " + std::to_string(x.extent(1)));
    Tensor<R> restored;
    if (cfg_.variant == MsfmVariant::dwt) {
      restored = forward_dwt(x);
    } else {
      auto bands = band_images(x);
      for (std::size_t b = 0; b < bands.size(); ++b) {
        auto f = band_convs_[b](bands[b]);
        restored = b == 0 ? f : add(restored, f);
      }
    }
    auto fused = fusion_(restored);
    return cfg_.residual ? add(x, fused) : fused;
  }

 private:
  static std::int64_t next_pow2(std::int64_t n) {
    std::int64_t p = 1;
    while (p < n) p <<= 1;
    return p;
  }

  Tensor<R> forward_dwt(const Tensor<R>& x) const {
    auto sb = dwt2(x);
    if (cfg_.use_cbam) {
      sb.ll = cbam(sb.ll, cbam_);
      sb.lh = cbam(sb.lh, cbam_);
      sb.hl = cbam(sb.hl, cbam_);
      sb.hh = cbam(sb.hh, cbam_);
    }
    auto details = concat<R>({sb.lh, sb.hl, sb.hh}, 1);
    Tensor<R> ms;
    for (std::size_t s = 0; s < detail_convs_.size(); ++s) {
      auto f = detail_convs_[s](details);
      ms = s == 0 ? f : add(ms, f);
    }
    auto enhanced = proj_(ms);
    auto parts = split(enhanced, 1, 3);
    return idwt2(SubbandSet<R>{sb.ll, parts[0], parts[1], parts[2]});
  }

  MsfmConfig cfg_;
  std::vector<std::int64_t> scales_;
  CbamParams<R> cbam_;
  std::vector<Conv2dLayer<R>> detail_convs_;  // dwt: multi-scale convs on fused details
  std::vector<Conv2dLayer<R>> band_convs_;    // fft/dct: one conv per band
  Conv2dLayer<R> proj_;                       // dwt: 1x1 back to three sub-band slots
  Conv2dLayer<R> fusion_;                     // zero-init 1x1 merging into the stream
};

}  // namespace farmamba
