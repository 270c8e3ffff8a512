#include <gtest/gtest.h>

#include "farmamba/encoder.hpp"
#include "farmamba/rng.hpp"
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

std::vector<Tensor<double>*> all_params(ParamTree<double>& tree) {
  std::vector<Tensor<double>*> out;
  for (auto& e : tree) out.push_back(&e.tensor);
  return out;
}

// Copies parameter values so all four scan directions share one behaviour.
void share_directions(ParamTree<double>& tree, const std::string& prefix) {
  static const char* kDir[4] = {"row", "row_rev", "col", "col_rev"};
  static const char* kLeaf[] = {".a_log", ".delta.w", ".delta.b", ".b.w", ".b.b",
                                ".c.w",   ".c.b",     ".skip"};
  for (int d = 1; d < 4; ++d)
    for (const char* leaf : kLeaf) {
      auto src = tree.at(prefix + "." + kDir[0] + leaf).values();
      auto dst = tree.at(prefix + "." + kDir[d] + leaf).mutable_values();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i];
    }
}

void set_identity_linear(Tensor<double>& w, Tensor<double>& b) {
  const std::int64_t d = w.shape()[0];
  for (auto& v : w.mutable_values()) v = 0.0;
  for (std::int64_t i = 0; i < d; ++i) w.mutable_values()[i * d + i] = 1.0;
  for (auto& v : b.mutable_values()) v = 0.0;
}

Tensor<double> rot180(const Tensor<double>& x) {
  const std::int64_t B = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  auto out = Tensor<double>::zeros(x.shape());
  for (std::int64_t bc = 0; bc < B * C; ++bc)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w)
        out.mutable_values()[(bc * H + h) * W + w] = x[(bc * H + (H - 1 - h)) * W + (W - 1 - w)];
  return out;
}

}  // namespace

// --- selective scan -----------------------------------------------------------

TEST(SelectiveScan, ZeroBProjectionIsPureSkip) {
  ParamTree<double> tree;
  SsmParams<double> p(tree, "ssm", 1, 3, 2);
  for (auto& v : tree.at("ssm.b.w").mutable_values()) v = 0.0;
  for (auto& v : tree.at("ssm.b.b").mutable_values()) v = 0.0;
  // Decay exp(delta*A) -> 0 as well: the degenerate memoryless configuration.
  for (auto& v : tree.at("ssm.a_log").mutable_values()) v = 30.0;
  for (std::int64_t c = 0; c < 3; ++c) tree.at("ssm.skip").mutable_values()[c] = 1.5 + c;
  Rng rng(151);
  auto u = random_tensor({2, 5, 3}, rng);
  auto y = selective_scan(u, p);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t t = 0; t < 5; ++t)
      for (std::int64_t c = 0; c < 3; ++c)
        EXPECT_DOUBLE_EQ(y[(b * 5 + t) * 3 + c], (1.5 + c) * u[(b * 5 + t) * 3 + c]);
}

TEST(SelectiveScan, SingleStepClosedForm) {
  ParamTree<double> tree;
  SsmParams<double> p(tree, "ssm", 2, 1, 1);
  tree.at("ssm.delta.w").mutable_values()[0] = 0.5;
  tree.at("ssm.delta.b").mutable_values()[0] = 0.1;
  tree.at("ssm.b.w").mutable_values()[0] = 1.2;
  tree.at("ssm.b.b").mutable_values()[0] = -0.2;
  tree.at("ssm.c.w").mutable_values()[0] = 0.7;
  tree.at("ssm.c.b").mutable_values()[0] = 0.3;
  tree.at("ssm.a_log").mutable_values()[0] = 0.0;  // A = -1
  tree.at("ssm.skip").mutable_values()[0] = 2.0;
  const double u0 = 0.8;
  auto u = Tensor<double>::from({1, 1, 1}, {u0});
  auto y = selective_scan(u, p);
  const double delta = std::log1p(std::exp(0.5 * u0 + 0.1));
  const double bt = 1.2 * u0 - 0.2;
  const double ct = 0.7 * u0 + 0.3;
  const double expected = ct * (delta * bt * u0) + 2.0 * u0;
  EXPECT_NEAR(y[0], expected, 1e-14);
}

TEST(SelectiveScan, MatchesPerStepOracle) {
  ParamTree<double> tree;
  SsmParams<double> p(tree, "ssm", 3, 3, 2);
  Rng rng(157);
  // Randomize all projections away from their structured defaults.
  for (auto& e : tree)
    for (auto& v : e.tensor.mutable_values()) v = rng.uniform(-0.8, 0.8);
  const std::int64_t B = 2, L = 6, C = 3, N = 2;
  auto u = random_tensor({B, L, C}, rng);
  auto y = selective_scan(u, p);

  // Recompute inputs to the recurrence directly, then run the scalar loop.
  for (std::int64_t b = 0; b < B; ++b) {
    std::vector<double> uv, dv, bv, cv, av, sv;
    for (std::int64_t t = 0; t < L; ++t)
      for (std::int64_t c = 0; c < C; ++c) uv.push_back(u[(b * L + t) * C + c]);
    auto wd = tree.at("ssm.delta.w").values();
    auto bd = tree.at("ssm.delta.b").values();
    auto wb = tree.at("ssm.b.w").values();
    auto bb = tree.at("ssm.b.b").values();
    auto wc = tree.at("ssm.c.w").values();
    auto bc = tree.at("ssm.c.b").values();
    for (std::int64_t t = 0; t < L; ++t) {
      for (std::int64_t c = 0; c < C; ++c) {
        double acc = bd[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < C; ++i)
          acc += uv[static_cast<std::size_t>(t * C + i)] * wd[static_cast<std::size_t>(i * C + c)];
        dv.push_back(std::log1p(std::exp(acc)));
      }
      for (std::int64_t n = 0; n < N; ++n) {
        double accb = bb[static_cast<std::size_t>(n)], accc = bc[static_cast<std::size_t>(n)];
        for (std::int64_t i = 0; i < C; ++i) {
          accb += uv[static_cast<std::size_t>(t * C + i)] * wb[static_cast<std::size_t>(i * N + n)];
          accc += uv[static_cast<std::size_t>(t * C + i)] * wc[static_cast<std::size_t>(i * N + n)];
        }
        bv.push_back(accb);
        cv.push_back(accc);
      }
    }
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t n = 0; n < N; ++n)
        av.push_back(-std::exp(tree.at("ssm.a_log")[c * N + n]));
    for (std::int64_t c = 0; c < C; ++c) sv.push_back(tree.at("ssm.skip")[c]);
    auto ref = farmamba::testing::naive_selective_scan(uv, dv, bv, cv, av, sv, L, C, N);
    for (std::int64_t i = 0; i < L * C; ++i)
      EXPECT_NEAR(y[b * L * C + i], ref[static_cast<std::size_t>(i)], 1e-10);
  }
}

TEST(SelectiveScan, Gradient) {
  ParamTree<double> tree;
  SsmParams<double> p(tree, "ssm", 4, 2, 2);
  Rng rng(163);
  auto u = random_tensor({1, 5, 2}, rng);
  auto inputs = all_params(tree);
  inputs.push_back(&u);
  auto r = farmamba::testing::grad_check<double>(
      [&] {
        auto y = selective_scan(u, p);
        return sum_all(mul(y, y));
      },
      inputs);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(SelectiveScan, StableOnLongConstantInput) {
  // A strictly negative => bounded hidden state; 10^4 constant steps.
  ParamTree<double> tree;
  SsmParams<double> p(tree, "ssm", 5, 1, 2);
  auto u = Tensor<double>::full({1, 10000, 1}, 1.0);
  auto y = selective_scan(u, p);
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    ASSERT_TRUE(std::isfinite(y[i]));
    ASSERT_LT(std::abs(y[i]), 1e6);
  }
}

// --- serialization directions ---------------------------------------------------

TEST(Ss2d, SerializationInverseForAllDirections) {
  Rng rng(167);
  auto x = random_tensor({2, 3, 4, 5}, rng);
  for (auto dir : {ScanDir::row, ScanDir::row_rev, ScanDir::col, ScanDir::col_rev}) {
    auto seq = serialize_dir(x, dir);
    auto back = deserialize_dir(seq, dir, 4, 5);
    for (std::int64_t i = 0; i < x.numel(); ++i)
      ASSERT_EQ(back[i], x[i]) << "direction " << static_cast<int>(dir);
  }
}

TEST(Ss2d, DegenerateGridIsFourTimesSingleDirection) {
  ParamTree<double> tree;
  Ss2dParams<double> p(tree, "s", 6, 3, 2);
  share_directions(tree, "s");
  set_identity_linear(tree.at("s.out.w"), tree.at("s.out.b"));
  Rng rng(173);
  auto x = random_tensor({2, 3, 1, 1}, rng);
  auto y = ss2d(x, p);
  auto single = selective_scan(hw_to_seq(x), p.dirs[0]);
  for (std::int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], 4.0 * single[i], 1e-12);
}

TEST(Ss2d, Rotation180EquivarianceWithSharedParams) {
  // Enumerating the four serializations of a 2x2 grid shows that a 180-degree
  // rotation maps row <-> row-reversed and col <-> col-reversed exactly, so
  // with isotropic (shared) per-direction parameters the summed output
  // commutes with the rotation. (The 90-degree rotation does not permute this
  // direction set, so no such identity is asserted for it.)
  ParamTree<double> tree;
  Ss2dParams<double> p(tree, "s", 7, 2, 2);
  share_directions(tree, "s");
  set_identity_linear(tree.at("s.out.w"), tree.at("s.out.b"));
  Rng rng(179);
  auto x = random_tensor({1, 2, 2, 2}, rng);
  auto y = ss2d(x, p);
  auto yr = ss2d(rot180(x), p);
  EXPECT_LT(max_abs_diff(yr, rot180(y)), 1e-12);
}

TEST(Ss2d, ShapeContract) {
  ParamTree<double> tree;
  Ss2dParams<double> p(tree, "s", 8, 8, 4);
  Rng rng(181);
  auto x = random_tensor({2, 8, 8, 8}, rng);
  EXPECT_EQ(ss2d(x, p).shape(), x.shape());
}

TEST(Ss2d, Gradient) {
  ParamTree<double> tree;
  Ss2dParams<double> p(tree, "s", 9, 2, 2);
  Rng rng(191);
  // Move the zero-initialized output projection off zero so gradients flow.
  for (auto& v : tree.at("s.out.w").mutable_values()) v = rng.uniform(-0.5, 0.5);
  auto x = random_tensor({1, 2, 2, 2}, rng);
  auto inputs = all_params(tree);
  inputs.push_back(&x);
  auto r = farmamba::testing::grad_check<double>(
      [&] {
        auto y = ss2d(x, p);
        return sum_all(mul(y, y));
      },
      inputs);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

// --- VSS block -------------------------------------------------------------------

TEST(VssBlock, IdentityAtInitialization) {
  ParamTree<double> tree;
  VssBlockParams<double> p(tree, "blk", 10, 4, 2);
  Rng rng(193);
  auto x = random_tensor({2, 4, 4, 4}, rng);
  auto y = vss_block(x, p);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(VssBlock, StackingPreservesShape) {
  ParamTree<double> tree;
  std::vector<VssBlockParams<double>> blocks;
  for (int d = 0; d < 3; ++d)
    blocks.emplace_back(tree, "blk" + std::to_string(d), 11, 4, 2);
  Rng rng(197);
  auto x = random_tensor({1, 4, 4, 4}, rng);
  auto y = x;
  for (const auto& b : blocks) y = vss_block(y, b);
  EXPECT_EQ(y.shape(), x.shape());
}

TEST(VssBlock, Gradient) {
  ParamTree<double> tree;
  VssBlockParams<double> p(tree, "blk", 12, 4, 2);
  Rng rng(199);
  for (auto& v : tree.at("blk.ss2d.out.w").mutable_values()) v = rng.uniform(-0.3, 0.3);
  for (auto& v : tree.at("blk.fc2.w").mutable_values()) v = rng.uniform(-0.3, 0.3);
  auto x = random_tensor({1, 4, 4, 4}, rng);
  auto inputs = all_params(tree);
  inputs.push_back(&x);
  auto r = farmamba::testing::grad_check<double>(
      [&] {
        auto y = vss_block(x, p);
        return sum_all(mul(y, y));
      },
      inputs);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

// --- encoder / decoder --------------------------------------------------------------

TEST(Encoder, DeskScaleShapeLadder) {
  EncoderConfig cfg;
  cfg.base_channels = 16;
  cfg.depths = {1, 1, 1, 1};
  cfg.num_classes = 3;
  ParamTree<double> tree;
  Encoder<double> enc(tree, "enc", 13, cfg);
  Rng rng(211);
  auto img = random_tensor({1, 3, 64, 64}, rng);
  auto feats = enc.encode(img);
  ASSERT_EQ(feats.size(), 4u);
  EXPECT_EQ(feats[0].shape(), (Shape{1, 16, 16, 16}));
  EXPECT_EQ(feats[1].shape(), (Shape{1, 32, 8, 8}));
  EXPECT_EQ(feats[2].shape(), (Shape{1, 64, 4, 4}));
  EXPECT_EQ(feats[3].shape(), (Shape{1, 128, 2, 2}));
}

TEST(Encoder, PaperScaleLadderShapes) {
  // 256x256 at 96 base channels: final stage [768, 8, 8]; stage 3 carries
  // 4*base = 384 channels, forced by the doubling merge rule.
  EncoderConfig cfg;
  cfg.base_channels = 96;
  auto shapes = stage_shapes(cfg, 256, 256);
  EXPECT_EQ(shapes[0], (Shape{96, 64, 64}));
  EXPECT_EQ(shapes[1], (Shape{192, 32, 32}));
  EXPECT_EQ(shapes[2], (Shape{384, 16, 16}));
  EXPECT_EQ(shapes[3], (Shape{768, 8, 8}));
}

TEST(Encoder, IndivisibleExtentsRejected) {
  EncoderConfig cfg;
  cfg.base_channels = 8;
  ParamTree<double> tree;
  Encoder<double> enc(tree, "enc", 14, cfg);
  auto img = Tensor<double>::ones({1, 3, 48, 48});  // not divisible by 32
  EXPECT_THROW(enc.encode(img), std::invalid_argument);
}

TEST(Encoder, IdentityAtInitReducesToLadder) {
  EncoderConfig cfg;
  cfg.base_channels = 8;
  cfg.depths = {2, 1, 1, 1};
  ParamTree<double> tree;
  MsfmConfig mc;
  mc.variant = MsfmVariant::dwt;
  mc.cbam_reduction = 4;
  Encoder<double> enc(tree, "enc", 15, cfg, mc);
  Rng rng(223);
  auto img = random_tensor({1, 3, 32, 32}, rng);
  auto feats = enc.encode(img);
  auto ladder = enc.encode_ladder_only(img);
  for (std::size_t s = 0; s < 4; ++s)
    ASSERT_EQ(max_abs_diff(feats[s], ladder[s]), 0.0) << "stage " << s;
}

TEST(Encoder, ParameterCountIsPureFunctionOfConfig) {
  EncoderConfig cfg;
  cfg.base_channels = 8;
  cfg.depths = {1, 1, 1, 1};
  cfg.state_dim = 4;
  cfg.num_classes = 2;
  ParamTree<double> tree;
  Encoder<double> enc(tree, "enc", 16, cfg);
  Decoder<double> dec(tree, "dec", 16, cfg);
  ParamTree<double> tree2;
  Encoder<double> enc2(tree2, "enc", 99, cfg);  // different seed, same config
  Decoder<double> dec2(tree2, "dec", 99, cfg);
  EXPECT_EQ(tree.total_elements(), tree2.total_elements());
  // Frozen for this configuration; a change here is an architecture change.
  EXPECT_EQ(tree.total_elements(), 139986);
}

TEST(Decoder, LogitShapeAndClassRange) {
  EncoderConfig cfg;
  cfg.base_channels = 8;
  cfg.depths = {1, 1, 1, 1};
  cfg.num_classes = 3;
  ParamTree<double> tree;
  Encoder<double> enc(tree, "enc", 17, cfg);
  Decoder<double> dec(tree, "dec", 17, cfg);
  Rng rng(227);
  auto img = random_tensor({2, 3, 32, 32}, rng);
  auto logits = dec(enc.encode(img));
  EXPECT_EQ(logits.shape(), (Shape{2, 3, 32, 32}));
  auto probs = softmax(logits, 1);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t i = 0; i < 32 * 32; ++i) {
      std::int64_t arg = 0;
      double best = probs[(b * 3) * 1024 + i];
      for (std::int64_t k = 1; k < 3; ++k)
        if (probs[(b * 3 + k) * 1024 + i] > best) {
          best = probs[(b * 3 + k) * 1024 + i];
          arg = k;
        }
      ASSERT_GE(arg, 0);
      ASSERT_LT(arg, 3);
    }
  auto feats = enc.encode(img);
  feats.pop_back();  // missing skip
  EXPECT_THROW(dec(feats), std::invalid_argument);
}

TEST(Decoder, GradientReachesStem) {
  EncoderConfig cfg;
  cfg.base_channels = 8;
  cfg.depths = {1, 1, 1, 1};
  cfg.num_classes = 2;
  ParamTree<double> tree;
  Encoder<double> enc(tree, "enc", 18, cfg);
  Decoder<double> dec(tree, "dec", 18, cfg);
  Rng rng(229);
  auto img = random_tensor({1, 3, 32, 32}, rng);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto logits = dec(enc.encode(img));
  auto loss = sum_all(mul(logits, logits));
  backward(loss);
  double stem_grad_norm = 0;
  for (double g : tree.at("enc.stem1.w").grad()) stem_grad_norm += g * g;
  EXPECT_GT(stem_grad_norm, 0.0);
}
