#include <gtest/gtest.h>

#include "farmamba/losses.hpp"
#include "farmamba/ssrae.hpp"
#include "farmamba/testing/oracles.hpp"

using namespace farmamba;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Tensor<double>::uniform(std::move(shape), rng, lo, hi);
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

// --- degrade -------------------------------------------------------------------

TEST(Degrade, ShapeContract) {
  Rng rng(401);
  auto x = random_tensor({2, 3, 64, 64}, rng);
  DegradeConfig cfg;
  auto rs = Rng::stream(1, "noise");
  auto y = degrade(x, cfg, rs);
  EXPECT_EQ(y.shape(), (Shape{2, 3, 16, 16}));
  auto odd = Tensor<double>::ones({1, 1, 6, 6});
  auto rs2 = Rng::stream(1, "noise");
  EXPECT_THROW(degrade(odd, cfg, rs2), std::invalid_argument);
}

TEST(Degrade, NoiselessConstantStaysConstant) {
  DegradeConfig cfg;
  cfg.sigma_noise = 0.0;
  auto x = Tensor<double>::full({1, 2, 16, 16}, 0.42);
  auto rs = Rng::stream(2, "noise");
  auto y = degrade(x, cfg, rs);
  for (std::int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], 0.42, 1e-14);
}

TEST(Degrade, DeterministicUnderFixedSeed) {
  Rng rng(409);
  auto x = random_tensor({1, 3, 32, 32}, rng);
  DegradeConfig cfg;
  auto r1 = Rng::stream(7, "noise");
  auto r2 = Rng::stream(7, "noise");
  auto y1 = degrade(x, cfg, r1);
  auto y2 = degrade(x, cfg, r2);
  for (std::int64_t i = 0; i < y1.numel(); ++i) ASSERT_EQ(y1[i], y2[i]);
}

TEST(Degrade, NoiseStatisticsMatchSigma) {
  // Constant input: output - constant is exactly the injected noise. One
  // million samples; the sample std must sit within 2% of sigma and the mean
  // within 3 sigma / sqrt(n).
  const std::int64_t side = 4000;  // -> 1000x1000 output = 1e6 samples
  auto x = Tensor<float>::full({1, 1, side, side}, 0.5f);
  DegradeConfig cfg;
  cfg.sigma_noise = 0.01;
  auto rs = Rng::stream(11, "noise");
  auto y = degrade(x, cfg, rs);
  const std::int64_t n = y.numel();
  ASSERT_EQ(n, 1000000);
  double sum = 0;
  for (std::int64_t i = 0; i < n; ++i) sum += y[i] - 0.5;
  const double mean = sum / static_cast<double>(n);
  double var = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = (y[i] - 0.5) - mean;
    var += d * d;
  }
  var /= static_cast<double>(n - 1);
  EXPECT_LE(std::abs(mean), 3.0 * 0.01 / std::sqrt(static_cast<double>(n)));
  EXPECT_NEAR(std::sqrt(var), 0.01, 0.0002);  // 2%
}

// --- region attention -------------------------------------------------------------

TEST(RegionBias, SymmetricWithZeroDiagonal) {
  LabelMap labels(1, 4, 4);
  for (std::int64_t i = 0; i < 16; ++i) labels.v[static_cast<std::size_t>(i)] = i % 3;
  auto bias = make_region_bias<double>(labels, 4, 4);
  for (std::int64_t i = 0; i < 16; ++i) {
    EXPECT_EQ(bias[i * 16 + i], 0.0);
    for (std::int64_t j = 0; j < 16; ++j) EXPECT_EQ(bias[i * 16 + j], bias[j * 16 + i]);
  }
}

TEST(RegionAttention, SingleRegionEqualsUnmaskedAttention) {
  ParamTree<double> tree;
  RegionAttentionParams<double> p(tree, "attn", 21, 8, 2);
  Rng rng(419);
  for (auto& v : tree.at("attn.wo.w").mutable_values()) v = rng.uniform(-0.4, 0.4);
  auto feat = random_tensor({2, 9, 8}, rng);
  LabelMap labels(2, 3, 3);  // every pixel region 0
  auto bias = make_region_bias<double>(labels, 3, 3);
  auto zero_bias = Tensor<double>::zeros({2, 9, 9});
  auto masked = masked_attention(feat, bias, p);
  auto unmasked = masked_attention(feat, zero_bias, p);
  EXPECT_LT(max_abs_diff(masked, unmasked), 1e-15);
}

TEST(RegionAttention, CrossRegionLeakageBelowThreshold) {
  ParamTree<double> tree;
  RegionAttentionParams<double> p(tree, "attn", 22, 8, 4);
  Rng rng(421);
  auto feat = random_tensor({1, 16, 8}, rng, -2.0, 2.0);
  LabelMap labels(1, 4, 4);
  for (std::int64_t i = 0; i < 16; ++i) labels.v[static_cast<std::size_t>(i)] = i < 7 ? 0 : 1;
  auto bias = make_region_bias<double>(labels, 4, 4);
  auto probs = attention_probs(feat, bias, p);
  for (std::int64_t h = 0; h < 4; ++h)
    for (std::int64_t i = 0; i < 16; ++i)
      for (std::int64_t j = 0; j < 16; ++j)
        if ((i < 7) != (j < 7))
          ASSERT_LT(probs[(h * 16 + i) * 16 + j], 1e-8)
              << "head " << h << " from " << i << " to " << j;
}

TEST(RegionAttention, RandomLayoutLeakageProperty) {
  Rng rng(431);
  for (int trial = 0; trial < 5; ++trial) {
    ParamTree<double> tree;
    RegionAttentionParams<double> p(tree, "attn", static_cast<std::uint64_t>(40 + trial), 8, 2);
    auto feat = random_tensor({1, 16, 8}, rng, -3.0, 3.0);
    LabelMap labels(1, 4, 4);
    for (auto& v : labels.v) v = static_cast<std::int32_t>(rng.uniform_int(4));
    auto bias = make_region_bias<double>(labels, 4, 4);
    auto probs = attention_probs(feat, bias, p);
    for (std::int64_t h = 0; h < 2; ++h)
      for (std::int64_t i = 0; i < 16; ++i)
        for (std::int64_t j = 0; j < 16; ++j)
          if (labels.v[static_cast<std::size_t>(i)] != labels.v[static_cast<std::size_t>(j)])
            ASSERT_LT(probs[(h * 16 + i) * 16 + j], 1e-8);
  }
}

TEST(RegionAttention, OnePixelRegionsGiveIdentityAttention) {
  ParamTree<double> tree;
  RegionAttentionParams<double> p(tree, "attn", 23, 4, 1);
  // Identity output projection exposes the raw context.
  for (auto& v : tree.at("attn.wo.w").mutable_values()) v = 0.0;
  for (std::int64_t i = 0; i < 4; ++i) tree.at("attn.wo.w").mutable_values()[i * 4 + i] = 1.0;
  Rng rng(433);
  auto feat = random_tensor({1, 4, 4}, rng);
  LabelMap labels(1, 2, 2);
  for (std::int64_t i = 0; i < 4; ++i) labels.v[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(i);
  auto bias = make_region_bias<double>(labels, 2, 2);
  auto probs = attention_probs(feat, bias, p);
  for (std::int64_t i = 0; i < 4; ++i)
    for (std::int64_t j = 0; j < 4; ++j)
      EXPECT_NEAR(probs[i * 4 + j], i == j ? 1.0 : 0.0, 1e-12);
  // Attention is the identity, so the output is the value projection.
  auto out = masked_attention(feat, bias, p);
  auto vproj = p.wv(feat);
  EXPECT_LT(max_abs_diff(out, vproj), 1e-12);
}

TEST(RegionAttention, ResidualWrapperIsIdentityAtInit) {
  ParamTree<double> tree;
  RegionAttentionParams<double> p(tree, "attn", 24, 8, 2);
  Rng rng(439);
  auto feat = random_tensor({1, 9, 8}, rng);
  LabelMap labels(1, 3, 3);
  for (auto& v : labels.v) v = static_cast<std::int32_t>(rng.uniform_int(2));
  auto bias = make_region_bias<double>(labels, 3, 3);
  auto out = region_attention(feat, bias, p);
  for (std::int64_t i = 0; i < feat.numel(); ++i) EXPECT_EQ(out[i], feat[i]);
}

TEST(RegionAttention, LengthMismatchRejected) {
  ParamTree<double> tree;
  RegionAttentionParams<double> p(tree, "attn", 25, 8, 2);
  auto feat = Tensor<double>::ones({1, 9, 8});
  auto bias = Tensor<double>::zeros({1, 4, 4});
  EXPECT_THROW(masked_attention(feat, bias, p), std::invalid_argument);
}

// --- reconstruction branch ----------------------------------------------------------

namespace {

struct Rig {
  EncoderConfig enc_cfg;
  ParamTree<double> tree;
  Encoder<double> main;
  Ssrae<double> ssrae;

  explicit Rig(bool degrade_enabled = true, std::uint64_t seed = 50)
      : enc_cfg(make_cfg()), tree(), main(tree, "main", seed, enc_cfg),
        ssrae(tree, "ssrae", seed + 1, make_ssrae_cfg(degrade_enabled), enc_cfg, &main,
              std::nullopt) {}

  static EncoderConfig make_cfg() {
    EncoderConfig c;
    c.base_channels = 8;
    c.depths = {1, 1, 1, 1};
    c.state_dim = 4;
    c.num_classes = 2;
    return c;
  }
  static SsraeConfig make_ssrae_cfg(bool degrade_enabled) {
    SsraeConfig c;
    c.msfm_in_recon = false;
    c.attn_heads = 4;
    c.degrade.sigma_noise = degrade_enabled ? 0.01 : 0.0;
    return c;
  }
};

}  // namespace

TEST(Ssrae, ReconstructionMatchesTargetShape) {
  Rig rig;
  Rng rng(443);
  auto img = Tensor<double>::uniform({2, 3, 64, 64}, rng, 0.0, 1.0);
  LabelMap labels(2, 64, 64);
  for (auto& v : labels.v) v = static_cast<std::int32_t>(rng.uniform_int(2));
  auto target = rig.main.encode(img, 1).back();
  auto noise_rng = Rng::stream(3, "noise");
  auto degraded = rig.ssrae.degrade_input(img, noise_rng);
  EXPECT_EQ(degraded.shape(), (Shape{2, 3, 16, 16}));
  auto pred = rig.ssrae.reconstruct(degraded, labels, target.shape());
  EXPECT_EQ(pred.shape(), target.shape());
}

TEST(Ssrae, WeightCopySanityGivesZeroL1) {
  // Degrade disabled (identity input) + auxiliary encoder weights copied from
  // the main encoder + identity projection head => reconstruction equals the
  // target feature exactly; the L1 term of the loss is zero.
  Rig rig(false);
  // Copy main.* -> ssrae.enc.* by name suffix.
  for (auto& e : rig.tree) {
    const std::string prefix = "main.";
    if (e.name.rfind(prefix, 0) == 0) {
      const std::string aux_name = "ssrae.enc." + e.name.substr(prefix.size());
      if (rig.tree.contains(aux_name)) {
        auto dst = rig.tree.at(aux_name).mutable_values();
        auto src = e.tensor.values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[i];
      }
    }
  }
  // Identity 3x3 head.
  {
    auto& w = rig.tree.at("ssrae.head.w");
    for (auto& v : w.mutable_values()) v = 0.0;
    const std::int64_t C = w.shape()[0];
    for (std::int64_t c = 0; c < C; ++c) w.mutable_values()[((c * C + c) * 3 + 1) * 3 + 1] = 1.0;
    for (auto& v : rig.tree.at("ssrae.head.b").mutable_values()) v = 0.0;
  }
  Rng rng(449);
  auto img = Tensor<double>::uniform({1, 3, 64, 64}, rng, 0.0, 1.0);
  LabelMap labels(1, 64, 64);
  for (auto& v : labels.v) v = static_cast<std::int32_t>(rng.uniform_int(2));
  auto target = rig.main.encode(img, 1).back().detach();
  // Degrade disabled: the auxiliary branch sees the original image.
  auto pred = rig.ssrae.reconstruct(img, labels, target.shape());
  auto l1 = mean_all(abs(sub(pred, target)));
  EXPECT_NEAR(l1[0], 0.0, 1e-12);
}

TEST(Ssrae, ReconstructionGradientsNeverReachMainEncoder) {
  Rig rig;
  Rng rng(457);
  auto img = Tensor<double>::uniform({1, 3, 64, 64}, rng, 0.0, 1.0);
  LabelMap labels(1, 64, 64);
  for (auto& v : labels.v) v = static_cast<std::int32_t>(rng.uniform_int(2));

  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto target = rig.main.encode(img, 1).back().detach();
  auto noise_rng = Rng::stream(5, "noise");
  auto degraded = rig.ssrae.degrade_input(img, noise_rng);
  auto pred = rig.ssrae.reconstruct(degraded, labels, target.shape());
  auto loss = recon_loss(pred, target);
  backward(loss);

  double main_grad = 0, aux_grad = 0;
  for (auto& e : rig.tree) {
    double norm = 0;
    for (double g : e.tensor.grad()) norm += g * g;
    if (e.name.rfind("main.", 0) == 0)
      main_grad += norm;
    else
      aux_grad += norm;
  }
  EXPECT_EQ(main_grad, 0.0);
  EXPECT_GT(aux_grad, 0.0);
}

TEST(Ssrae, TiedWeightsReuseMainParameters) {
  EncoderConfig cfg = Rig::make_cfg();
  ParamTree<double> tree;
  Encoder<double> main(tree, "main", 60, cfg);
  SsraeConfig scfg;
  scfg.tie_weights = true;
  scfg.msfm_in_recon = false;
  Ssrae<double> ssrae(tree, "ssrae", 61, scfg, cfg, &main, std::nullopt);
  // No auxiliary encoder parameters were registered.
  for (auto& e : tree) EXPECT_EQ(e.name.rfind("ssrae.enc.", 0), std::string::npos) << e.name;
  Rng rng(461);
  auto img = Tensor<double>::uniform({1, 3, 64, 64}, rng, 0.0, 1.0);
  LabelMap labels(1, 64, 64);
  auto target = main.encode(img, 1).back();
  auto noise_rng = Rng::stream(6, "noise");
  auto degraded = ssrae.degrade_input(img, noise_rng);
  auto pred = ssrae.reconstruct(degraded, labels, target.shape());
  EXPECT_EQ(pred.shape(), target.shape());
}
