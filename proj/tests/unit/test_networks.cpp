#include <gtest/gtest.h>

#include "dapnet/errors.hpp"
#include "dapnet/networks.hpp"

using namespace dapnet;
using Shape = std::vector<std::int64_t>;

namespace {

// Parameter arithmetic straight from the architecture description, independent
// of the module code.
struct ParamOracle {
  std::int64_t (*scale)(std::int64_t);

  static std::int64_t conv(std::int64_t i, std::int64_t o, std::int64_t k, bool bias = false) {
    return i * o * k * k + (bias ? o : 0);
  }
  static std::int64_t bn(std::int64_t c) { return 2 * c; }
  static std::int64_t cbr(std::int64_t i, std::int64_t o, std::int64_t k) { return conv(i, o, k) + bn(o); }
  static std::int64_t block(std::int64_t i, std::int64_t o, std::int64_t stride) {
    const bool projection = i != o || stride != 1;
    return cbr(i, o, 3) + conv(o, o, 3) + bn(o) + (projection ? conv(i, o, 1) + bn(o) : 0);
  }
  static std::int64_t stage(std::int64_t i, std::int64_t o, std::int64_t stride) {
    return block(i, o, stride) + block(o, o, 1);
  }

  std::int64_t c(std::int64_t n) const { return std::max<std::int64_t>(8, scale(n)); }

  std::int64_t generator() const {
    const auto c64 = c(64), c128 = c(128), c256 = c(256), c512 = c(512);
    return cbr(3, c64, 3) + cbr(c64, c64, 1) + stage(c64, c64, 2) + stage(c64, c128, 2) +
           stage(c128, c256, 1) + stage(c256, c512, 1) + 4 * cbr(c512, c128, 1) +
           cbr(c512 + 4 * c128, c512, 3) + cbr(c512 + c64, c256, 3) + cbr(c256 + c64, c128, 3) +
           cbr(c512 + c256 + c128, c512, 1) + cbr(c512, c128, 3) + conv(c128, 2, 1, true);
  }

  std::int64_t discriminator(std::int64_t in) const {
    const auto w0 = c(64), w1 = c(128), w2 = c(256), w3 = c(512);
    return conv(in, w0, 4, true) + conv(w0, w1, 4) + bn(w1) + conv(w1, w2, 4) + bn(w2) + conv(w2, w3, 4) +
           bn(w3) + conv(w3, 1, 4, true);
  }
};

std::int64_t full(std::int64_t n) { return n; }
std::int64_t quarter(std::int64_t n) { return n / 4; }

}  // namespace

TEST(Networks, ShapeSuiteAllSizesAndBatches) {
  torch::NoGradGuard guard;
  auto models = init_params(0, {});
  for (std::int64_t s : {64, 128, 256}) {
    for (std::int64_t b : {1, 4}) {
      // Train-mode batch norm needs more than one value per channel; the
      // 1×1 pyramid bin has exactly one when B = 1.
      const auto mode = b == 1 ? Mode::Eval : Mode::Train;
      auto out = forward_segmentation(models.generator, torch::rand({b, 3, s, s}) * 2 - 1, mode);
      EXPECT_EQ(out.ppm_feature.sizes(), (Shape{b, 512, s / 8, s / 8})) << s << " " << b;
      EXPECT_EQ(out.fused_feature.sizes(), (Shape{b, 512, s / 4, s / 4}));
      EXPECT_EQ(out.logits.sizes(), (Shape{b, 2, s, s}));
      models.image_disc->eval();
      models.feature_disc->eval();
      const auto di = forward_discriminator(models.image_disc, out.ppm_feature);
      const auto df = forward_discriminator(models.feature_disc, out.fused_feature);
      EXPECT_EQ(di.size(0), b);
      EXPECT_EQ(di.size(1), 1);
      EXPECT_GE(di.size(2), 1);
      if (s == 256) {
        EXPECT_EQ(di.sizes(), (Shape{b, 1, 1, 1}));
        EXPECT_EQ(df.sizes(), (Shape{b, 1, 3, 3}));
      }
    }
  }
}

TEST(Networks, Batch4At256Exact) {
  torch::NoGradGuard guard;
  SegmentationNet g(WidthScale{1, 8});
  init_module(*g, 1);
  auto out = forward_segmentation(g, torch::zeros({4, 3, 256, 256}), Mode::Eval);
  EXPECT_EQ(out.ppm_feature.sizes(), (Shape{4, 64, 32, 32}));
  EXPECT_EQ(out.fused_feature.sizes(), (Shape{4, 64, 64, 64}));
  EXPECT_EQ(out.logits.sizes(), (Shape{4, 2, 256, 256}));
}

TEST(Networks, SizeNotDivisibleByEight) {
  SegmentationNet g(WidthScale{1, 8});
  EXPECT_THROW(forward_segmentation(g, torch::zeros({1, 3, 100, 100}), Mode::Eval), ShapeError);
  EXPECT_THROW(forward_segmentation(g, torch::zeros({1, 1, 64, 64}), Mode::Eval), ShapeError);
  SegmentationNet empty{nullptr};
  EXPECT_THROW(forward_segmentation(empty, torch::zeros({1, 3, 64, 64}), Mode::Eval), std::logic_error);
}

TEST(Discriminator, PatchMapArithmetic) {
  torch::NoGradGuard guard;
  PatchDiscriminator d(512);
  init_module(*d, 0);
  d->eval();
  EXPECT_EQ(forward_discriminator(d, torch::rand({4, 512, 32, 32})).sizes(), (Shape{4, 1, 1, 1}));
  EXPECT_EQ(forward_discriminator(d, torch::rand({4, 512, 64, 64})).sizes(), (Shape{4, 1, 3, 3}));
  EXPECT_THROW(forward_discriminator(d, torch::rand({4, 512, 4, 4})), ShapeError);
  EXPECT_THROW(forward_discriminator(d, torch::rand({4, 256, 32, 32})), ShapeError);
  // [8, 32) is padded up to the receptive minimum, in several passes below 16.
  EXPECT_EQ(forward_discriminator(d, torch::rand({2, 512, 8, 8})).sizes(), (Shape{2, 1, 1, 1}));
  EXPECT_EQ(forward_discriminator(d, torch::rand({2, 512, 11, 8})).sizes(), (Shape{2, 1, 1, 1}));
  EXPECT_EQ(forward_discriminator(d, torch::rand({2, 512, 16, 16})).sizes(), (Shape{2, 1, 1, 1}));
  EXPECT_EQ(forward_discriminator(d, torch::rand({2, 512, 16, 40})).sizes(), (Shape{2, 1, 1, 1}));
}

TEST(Discriminator, RawScoresUnbounded) {
  torch::NoGradGuard guard;
  PatchDiscriminator d(8, WidthScale{1, 8});
  init_module(*d, 3);
  d->eval();
  const auto out = forward_discriminator(d, torch::randn({2, 8, 64, 64}) * 50);
  EXPECT_GT(out.abs().max().item<float>(), 1.0f);
}

TEST(Params, CountsMatchArithmeticOracle) {
  PatchDiscriminator d(512);
  const auto& first = d->named_parameters();
  EXPECT_EQ(first["layers.0.weight"].numel() + first["layers.0.bias"].numel(), 524352);
  EXPECT_EQ(count_params(*d), (ParamOracle{full}.discriminator(512)));

  SegmentationNet g;
  EXPECT_EQ(count_params(*g), (ParamOracle{full}.generator()));
  // Regression pin for the scale-1 generator.
  EXPECT_EQ(count_params(*g), 18906690);

  SegmentationNet gq(WidthScale{1, 4});
  EXPECT_EQ(count_params(*gq), (ParamOracle{quarter}.generator()));
  PatchDiscriminator dq(128, WidthScale{1, 4});
  EXPECT_EQ(count_params(*dq), (ParamOracle{quarter}.discriminator(128)));

  torch::nn::Module empty;
  EXPECT_EQ(count_params(empty), 0);
}

TEST(Params, SameSeedSameChecksum) {
  const auto a = init_params(7, {1, 4});
  const auto b = init_params(7, {1, 4});
  const auto c = init_params(8, {1, 4});
  EXPECT_EQ(param_checksum(*a.generator), param_checksum(*b.generator));
  EXPECT_EQ(param_checksum(*a.image_disc), param_checksum(*b.image_disc));
  EXPECT_EQ(param_checksum(*a.feature_disc), param_checksum(*b.feature_disc));
  EXPECT_NE(param_checksum(*a.generator), param_checksum(*c.generator));
}

TEST(Params, InitScheme) {
  const auto m = init_params(0, {1, 2});
  for (const auto& item : m.generator->named_parameters()) {
    const auto& name = item.key();
    const auto& p = item.value();
    if (name.find("bn") != std::string::npos || name.find(".1.") != std::string::npos) continue;
    if (p.dim() == 4) {
      const double fan_in = static_cast<double>(p.size(1) * p.size(2) * p.size(3));
      if (p.numel() > 2000) {
        EXPECT_NEAR(p.std().item<double>(), std::sqrt(2.0 / fan_in), 0.1 * std::sqrt(2.0 / fan_in)) << name;
        EXPECT_NEAR(p.mean().item<double>(), 0.0, 0.1 * std::sqrt(2.0 / fan_in)) << name;
      }
    }
  }
  for (auto& mod : m.generator->modules()) {
    if (auto* bn = mod->as<torch::nn::BatchNorm2dImpl>()) {
      EXPECT_TRUE(torch::all(bn->weight == 1).item<bool>());
      EXPECT_TRUE(torch::all(bn->bias == 0).item<bool>());
    }
    if (auto* conv = mod->as<torch::nn::Conv2dImpl>()) {
      if (conv->bias.defined()) EXPECT_TRUE(torch::all(conv->bias == 0).item<bool>());
    }
  }
}

TEST(Params, WidthScaleAndClamp) {
  SegmentationNet q(WidthScale{1, 4});
  EXPECT_EQ(q->ppm_channels(), 128);
  torch::NoGradGuard guard;
  auto out = forward_segmentation(q, torch::zeros({1, 3, 64, 64}), Mode::Eval);
  EXPECT_EQ(out.ppm_feature.size(1), 128);
  EXPECT_EQ(out.fused_feature.size(1), 128);
  EXPECT_EQ(out.logits.size(1), 2);

  // 64/128 → 0.5 is clamped to 8 channels; the 512-channel maps give 4 → 8 too.
  SegmentationNet tiny(WidthScale{1, 128});
  EXPECT_EQ(tiny->ppm_channels(), 8);
  const auto params = tiny->named_parameters();
  EXPECT_EQ(params["stem.conv.weight"].size(0), 8);
  EXPECT_EQ(params["stem.conv.weight"].size(1), 3);
  EXPECT_EQ(params["classifier.weight"].size(0), 2);
}

TEST(Networks, EvalForwardIsPure) {
  torch::NoGradGuard guard;
  auto m = init_params(2, {1, 4});
  const auto x = torch::rand({2, 3, 64, 64}) * 2 - 1;
  const auto a = forward_segmentation(m.generator, x, Mode::Eval);
  const auto before = param_checksum(*m.generator);
  const auto b = forward_segmentation(m.generator, x, Mode::Eval);
  EXPECT_TRUE(torch::equal(a.logits, b.logits));
  EXPECT_TRUE(torch::equal(a.ppm_feature, b.ppm_feature));
  EXPECT_EQ(before, param_checksum(*m.generator));
  // Train mode moves running statistics.
  forward_segmentation(m.generator, x, Mode::Train);
  EXPECT_NE(before, param_checksum(*m.generator));
}

TEST(Networks, PyramidPoolOfConstantMap) {
  const auto x = torch::full({2, 5, 12, 12}, 0.375f);
  for (const auto& pooled : pyramid_pool(x, SegmentationNetImpl::kPyramidBins)) {
    EXPECT_TRUE(torch::allclose(pooled, torch::full_like(pooled, 0.375f), 0, 1e-7));
  }
  const auto sizes = pyramid_pool(x, {1, 2, 3, 6});
  EXPECT_EQ(sizes[3].sizes(), (Shape{2, 5, 6, 6}));
}

TEST(Networks, FeatureMapsFiniteAfterInit) {
  torch::NoGradGuard guard;
  auto m = init_params(11, {1, 4});
  for (auto mode : {Mode::Train, Mode::Eval}) {
    auto out = forward_segmentation(m.generator, torch::rand({2, 3, 128, 128}) * 2 - 1, mode);
    EXPECT_TRUE(torch::isfinite(out.ppm_feature).all().item<bool>());
    EXPECT_TRUE(torch::isfinite(out.fused_feature).all().item<bool>());
    EXPECT_TRUE(torch::isfinite(out.logits).all().item<bool>());
    EXPECT_TRUE(torch::isfinite(forward_discriminator(m.image_disc, out.ppm_feature)).all().item<bool>());
    EXPECT_TRUE(torch::isfinite(forward_discriminator(m.feature_disc, out.fused_feature)).all().item<bool>());
  }
}
