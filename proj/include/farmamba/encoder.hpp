#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "farmamba/msfm.hpp"
#include "farmamba/ssm.hpp"

// Segmentation backbone: convolutional stem, 4x4 patch embedding, four stages
// of VSS blocks with 2x patch merging between them, and a U-shaped
// convolutional decoder fed by the stage features. A frequency module can be
// inserted after any stage (default: after stage 1, where high-frequency
// content is still present).

namespace farmamba {

struct EncoderConfig {
  std::int64_t base_channels = 16;               // paper-scale ladder uses 96
  std::vector<std::int64_t> depths = {2, 2, 2, 2};
  std::int64_t state_dim = 8;
  std::int64_t patch = 4;
  std::int64_t merge = 2;
  std::int64_t num_classes = 2;
  std::int64_t in_channels = 3;

  void validate() const {
    if (depths.size() != 4) throw std::invalid_argument("encoder: exactly four stages expected");
    if (base_channels < 1 || state_dim < 1 || num_classes < 1)
      throw std::invalid_argument("encoder: config values must be positive");
  }

  std::int64_t stage_channels(std::int64_t stage) const {
    return base_channels << stage;  // channels double per stage
  }

  // Downsampling factor of stage `s` (0-based) relative to the input image.
  std::int64_t stage_stride(std::int64_t stage) const { return patch << stage; }
};

// Expected [C, H', W'] per stage for an input of extents (H, W).
inline std::vector<Shape> stage_shapes(const EncoderConfig& cfg, std::int64_t H, std::int64_t W) {
  std::vector<Shape> out;
  for (std::int64_t s = 0; s < 4; ++s) {
    const std::int64_t f = cfg.stage_stride(s);
    out.push_back({cfg.stage_channels(s), H / f, W / f});
  }
  return out;
}

template <class R>
class Encoder {
 public:
  Encoder() = default;

  // `msfm_cfg` (channels filled in automatically) enables the frequency module
  // after each stage listed in `msfm_stages` (1-based, default stage 1).
  Encoder(ParamTree<R>& tree, const std::string& name, std::uint64_t seed, EncoderConfig cfg,
          std::optional<MsfmConfig> msfm_cfg = std::nullopt,
          std::vector<std::int64_t> msfm_stages = {1})
      : cfg_(std::move(cfg)), msfm_stages_(std::move(msfm_stages)) {
    cfg_.validate();
    const std::int64_t base = cfg_.base_channels;
    stem1_ = Conv2dLayer<R>(tree, name + ".stem1", seed, cfg_.in_channels, base, 3, 1);
    stem2_ = Conv2dLayer<R>(tree, name + ".stem2", seed, base, base, 3, 1);
    embed_ = Conv2dLayer<R>(tree, name + ".embed", seed, base * cfg_.patch * cfg_.patch, base, 1);
    for (std::int64_t s = 0; s < 4; ++s) {
      const std::int64_t c = cfg_.stage_channels(s);
      std::vector<VssBlockParams<R>> blocks;
      for (std::int64_t d = 0; d < cfg_.depths[static_cast<std::size_t>(s)]; ++d)
        blocks.emplace_back(tree, name + ".stage" + std::to_string(s + 1) + ".block" +
                                      std::to_string(d),
                            seed, c, cfg_.state_dim);
      stages_.push_back(std::move(blocks));
      if (s < 3)
        merges_.emplace_back(tree, name + ".merge" + std::to_string(s + 1), seed,
                             c * cfg_.merge * cfg_.merge, c * 2, 1);
    }
    if (msfm_cfg) {
      for (auto stage : msfm_stages_) {
        if (stage < 1 || stage > 4)
          throw std::invalid_argument("encoder: msfm insert stage must be in [1,4]");
        MsfmConfig mc = *msfm_cfg;
        mc.channels = cfg_.stage_channels(stage - 1);
        msfms_.emplace_back(stage, Msfm<R>(tree, name + ".msfm" + std::to_string(stage), seed, mc));
      }
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  bool has_msfm() const { return !msfms_.empty(); }

  // Stage features [C,H/4], [2C,H/8], [4C,H/16], [8C,H/32]. `max_stage`
  // truncates the ladder (the reconstruction branch only needs a prefix).
  std::vector<Tensor<R>> encode(const Tensor<R>& image, std::int64_t max_stage = 4) const {
    detail::expect_rank("encode", image, 4);
    if (max_stage < 1 || max_stage > 4) throw std::invalid_argument("encode: max_stage in [1,4]");
    const std::int64_t H = image.extent(2), W = image.extent(3);
    const std::int64_t need = cfg_.stage_stride(max_stage - 1);
    if (H % need != 0 || W % need != 0)
      throw std::invalid_argument("encode: extents " + std::to_string(H) + "x" +
                                  std::to_string(W) + " must be divisible by " +
                                  std::to_string(need));
    auto x = silu(stem2_(silu(stem1_(image))));
    x = embed_(space_to_channel(x, cfg_.patch));
    std::vector<Tensor<R>> features;
    for (std::int64_t s = 0; s < max_stage; ++s) {
      for (const auto& block : stages_[static_cast<std::size_t>(s)]) x = vss_block(x, block);
      for (const auto& [stage, msfm] : msfms_)
        if (stage == s + 1) x = msfm(x);
      features.push_back(x);
      if (s < max_stage - 1) x = merges_[static_cast<std::size_t>(s)](space_to_channel(x, cfg_.merge));
    }
    return features;
  }

  // Exposed for identity-at-init verification: the embedding ladder with the
  // residual blocks skipped entirely.
  std::vector<Tensor<R>> encode_ladder_only(const Tensor<R>& image) const {
    auto x = silu(stem2_(silu(stem1_(image))));
    x = embed_(space_to_channel(x, cfg_.patch));
    std::vector<Tensor<R>> features;
    for (std::int64_t s = 0; s < 4; ++s) {
      features.push_back(x);
      if (s < 3) x = merges_[static_cast<std::size_t>(s)](space_to_channel(x, cfg_.merge));
    }
    return features;
  }

  const Conv2dLayer<R>& stem1() const { return stem1_; }

 private:
  EncoderConfig cfg_;
  Conv2dLayer<R> stem1_, stem2_, embed_;
  std::vector<std::vector<VssBlockParams<R>>> stages_;
  std::vector<Conv2dLayer<R>> merges_;
  std::vector<std::pair<std::int64_t, Msfm<R>>> msfms_;
  std::vector<std::int64_t> msfm_stages_;
};

// U-shaped decoder: upsample, concatenate the skip feature, refine with two
// convolutions; a final 4x upsample and 1x1 head produce per-class logits.
template <class R>
class Decoder {
 public:
  Decoder() = default;

  Decoder(ParamTree<R>& tree, const std::string& name, std::uint64_t seed,
          const EncoderConfig& cfg)
      : cfg_(cfg) {
    for (std::int64_t level = 2; level >= 0; --level) {
      const std::int64_t skip_c = cfg.stage_channels(level);
      const std::int64_t up_c = cfg.stage_channels(level + 1);
      const std::string ln = name + ".up" + std::to_string(level + 1);
      refine1_.push_back(Conv2dLayer<R>(tree, ln + ".conv1", seed, up_c + skip_c, skip_c, 3, 1));
      refine2_.push_back(Conv2dLayer<R>(tree, ln + ".conv2", seed, skip_c, skip_c, 3, 1));
    }
    head_ = Conv2dLayer<R>(tree, name + ".head", seed, cfg.base_channels, cfg.num_classes, 1);
  }

  Tensor<R> operator()(const std::vector<Tensor<R>>& features) const {
    if (features.size() != 4)
      throw std::invalid_argument("decode: expected 4 stage features, got " +
                                  std::to_string(features.size()));
    auto x = features[3];
    for (std::int64_t level = 2; level >= 0; --level) {
      const std::size_t i = static_cast<std::size_t>(2 - level);
      x = upsample_nearest(x, 2);
      x = concat<R>({x, features[static_cast<std::size_t>(level)]}, 1);
      x = silu(refine1_[i](x));
      x = silu(refine2_[i](x));
    }
    x = upsample_nearest(x, cfg_.patch);
    return head_(x);
  }

 private:
  EncoderConfig cfg_;
  std::vector<Conv2dLayer<R>> refine1_, refine2_;
  Conv2dLayer<R> head_;
};

}  // namespace farmamba
