#include "dapnet/networks.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <zlib.h>

#include <cmath>
#include <string>

#include "dapnet/errors.hpp"

namespace dapnet {
namespace F = torch::nn::functional;

namespace {

torch::Tensor resize_to(const torch::Tensor& x, std::int64_t h, std::int64_t w) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{h, w})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

std::string shape_str(const torch::Tensor& t) {
  std::string s;
  for (std::int64_t i = 0; i < t.dim(); ++i) s += (i ? "x" : "") + std::to_string(t.size(i));
  return s;
}

}  // namespace

ConvBnReluImpl::ConvBnReluImpl(std::int64_t in, std::int64_t out, std::int64_t kernel,
                               std::int64_t stride, std::int64_t dilation) {
  conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel)
                                                        .stride(stride)
                                                        .padding(dilation * (kernel / 2))
                                                        .dilation(dilation)
                                                        .bias(false)));
  bn_ = register_module("bn", torch::nn::BatchNorm2d(out));
}

torch::Tensor ConvBnReluImpl::forward(const torch::Tensor& x) { return torch::relu(bn_(conv_(x))); }

BasicBlockImpl::BasicBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride,
                               std::int64_t dilation) {
  conv1_ = register_module("conv1", ConvBnRelu(in, out, 3, stride, dilation));
  conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out, out, 3)
                                                          .padding(dilation)
                                                          .dilation(dilation)
                                                          .bias(false)));
  bn2_ = register_module("bn2", torch::nn::BatchNorm2d(out));
  if (in != out || stride != 1) {
    shortcut_ = register_module(
        "shortcut",
        torch::nn::Sequential(
            torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1).stride(stride).bias(false)),
            torch::nn::BatchNorm2d(out)));
  }
}

torch::Tensor BasicBlockImpl::forward(const torch::Tensor& x) {
  auto y = bn2_(conv2_(conv1_(x)));
  return torch::relu(y + (shortcut_ ? shortcut_->forward(x) : x));
}

std::vector<torch::Tensor> pyramid_pool(const torch::Tensor& x, const std::vector<std::int64_t>& bins) {
  std::vector<torch::Tensor> pooled;
  pooled.reserve(bins.size());
  for (auto b : bins) pooled.push_back(F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(b)));
  return pooled;
}

SegmentationNetImpl::SegmentationNetImpl(WidthScale scale) {
  const auto c64 = scale.apply(64);
  const auto c128 = scale.apply(128);
  const auto c256 = scale.apply(256);
  const auto c512 = scale.apply(512);
  ppm_channels_ = c512;
  fused_channels_ = c512;

  auto stage = [](std::int64_t in, std::int64_t out, std::int64_t stride, std::int64_t dilation) {
    return torch::nn::Sequential(BasicBlock(in, out, stride, dilation), BasicBlock(out, out, 1, dilation));
  };

  // Encoder: stem S/2, stage strides (2, 2, 1, 1), stages 3-4 dilated by 2 and 4.
  stem_ = register_module("stem", ConvBnRelu(3, c64, 3, 2));
  stem_tap_ = register_module("stem_tap", ConvBnRelu(c64, c64, 1));
  stage1_ = register_module("stage1", stage(c64, c64, 2, 1));
  stage2_ = register_module("stage2", stage(c64, c128, 2, 1));
  stage3_ = register_module("stage3", stage(c128, c256, 1, 2));
  stage4_ = register_module("stage4", stage(c256, c512, 1, 4));

  ppm_branches_ = register_module("ppm_branches", torch::nn::ModuleList());
  for (std::size_t i = 0; i < kPyramidBins.size(); ++i) ppm_branches_->push_back(ConvBnRelu(c512, c128, 1));
  ppm_fuse_ = register_module(
      "ppm_fuse", ConvBnRelu(c512 + static_cast<std::int64_t>(kPyramidBins.size()) * c128, c512, 3));

  up1_ = register_module("up1", ConvBnRelu(c512 + c64, c256, 3));
  up2_ = register_module("up2", ConvBnRelu(c256 + c64, c128, 3));
  fusion_ = register_module("fusion", ConvBnRelu(c512 + c256 + c128, c512, 1));

  head_ = register_module("head", ConvBnRelu(c512, c128, 3));
  classifier_ = register_module("classifier",
                                torch::nn::Conv2d(torch::nn::Conv2dOptions(c128, kNumClasses, 1).bias(true)));
}

SegForwardOutput SegmentationNetImpl::forward(const torch::Tensor& images) {
  const auto s = images.size(2);
  const auto stem = stem_(images);       // S/2
  const auto skip2 = stem_tap_(stem);    // S/2
  const auto skip4 = stage1_->forward(stem);  // S/4
  auto x = stage2_->forward(skip4);      // S/8
  x = stage4_->forward(stage3_->forward(x));

  const auto h8 = x.size(2);
  const auto w8 = x.size(3);
  std::vector<torch::Tensor> parts{x};
  const auto pooled = pyramid_pool(x, kPyramidBins);
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    auto branch = ppm_branches_[i]->as<ConvBnReluImpl>();
    parts.push_back(resize_to(branch->forward(pooled[i]), h8, w8));
  }
  auto p = ppm_fuse_(torch::cat(parts, 1));

  const auto h4 = skip4.size(2);
  const auto w4 = skip4.size(3);
  auto u1 = up1_(torch::cat({resize_to(p, h4, w4), skip4}, 1));
  auto u2 = up2_(torch::cat({resize_to(u1, skip2.size(2), skip2.size(3)), skip2}, 1));
  auto f = fusion_(torch::cat({resize_to(p, h4, w4), u1, resize_to(u2, h4, w4)}, 1));

  auto logits = resize_to(classifier_(head_(f)), s, images.size(3));
  return {p, f, logits};
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(std::int64_t in_channels, WidthScale scale)
    : in_channels_(in_channels) {
  const std::int64_t widths[] = {scale.apply(64), scale.apply(128), scale.apply(256), scale.apply(512)};
  auto conv = [](std::int64_t in, std::int64_t out, std::int64_t stride, bool bias) {
    return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 4).stride(stride).padding(1).bias(bias));
  };
  auto lrelu = [] { return torch::nn::LeakyReLU(torch::nn::LeakyReLUOptions().negative_slope(0.2)); };
  torch::nn::Sequential seq;
  seq->push_back(conv(in_channels, widths[0], 2, true));
  seq->push_back(lrelu());
  for (int i = 1; i < 4; ++i) {
    seq->push_back(conv(widths[i - 1], widths[i], 2, false));
    seq->push_back(torch::nn::BatchNorm2d(widths[i]));
    seq->push_back(lrelu());
  }
  seq->push_back(conv(widths[3], 1, 1, true));
  layers_ = register_module("layers", seq);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& features) {
  if (features.dim() != 4 || features.size(1) != in_channels_) {
    throw ShapeError("discriminator expects Bx" + std::to_string(in_channels_) + "xHxW, got " +
                     shape_str(features));
  }
  const auto h = features.size(2);
  const auto w = features.size(3);
  if (h < kMinInput || w < kMinInput) {
    throw ShapeError("discriminator input " + shape_str(features) + " is smaller than the receptive minimum " +
                     std::to_string(kMinInput) + "x" + std::to_string(kMinInput));
  }
  // Reflection pads by less than the side per pass, so small maps take several.
  auto x = features;
  while (x.size(2) < kReceptiveMin || x.size(3) < kReceptiveMin) {
    const auto ph = std::min(std::max<std::int64_t>(0, kReceptiveMin - x.size(2)), 2 * (x.size(2) - 1));
    const auto pw = std::min(std::max<std::int64_t>(0, kReceptiveMin - x.size(3)), 2 * (x.size(3) - 1));
    x = F::pad(x, F::PadFuncOptions({pw / 2, pw - pw / 2, ph / 2, ph - ph / 2}).mode(torch::kReflect));
  }
  return layers_->forward(x);
}

void init_module(torch::nn::Module& module, std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (auto& m : module.modules(/*include_self=*/true)) {
    if (auto* conv = m->as<torch::nn::Conv2dImpl>()) {
      const auto& w = conv->weight;
      const double fan_in = static_cast<double>(w.size(1) * w.size(2) * w.size(3));
      w.normal_(0.0, std::sqrt(2.0 / fan_in), gen);
      if (conv->bias.defined()) conv->bias.zero_();
    } else if (auto* bn = m->as<torch::nn::BatchNorm2dImpl>()) {
      bn->weight.fill_(1.0);
      bn->bias.zero_();
      bn->reset_running_stats();
    }
  }
}

ModelSet init_params(std::uint64_t seed, WidthScale scale) {
  ModelSet set;
  set.generator = SegmentationNet(scale);
  set.image_disc = PatchDiscriminator(set.generator->ppm_channels(), scale);
  set.feature_disc = PatchDiscriminator(set.generator->fused_channels(), scale);
  // Distinct, fixed sub-seeds so each network's draw does not depend on the others' sizes.
  init_module(*set.generator, seed * 3 + 0);
  init_module(*set.image_disc, seed * 3 + 1);
  init_module(*set.feature_disc, seed * 3 + 2);
  return set;
}

SegForwardOutput forward_segmentation(SegmentationNet& net, const torch::Tensor& images, Mode mode) {
  if (!net) throw std::logic_error("segmentation network parameters are not initialized");
  if (images.dim() != 4 || images.size(1) != 3) {
    throw ShapeError("expected Bx3xSxS images, got " + shape_str(images));
  }
  if (images.size(2) % 8 != 0 || images.size(3) % 8 != 0) {
    throw ShapeError("input size " + shape_str(images) + " not divisible by 8");
  }
  net->train(mode == Mode::Train);
  return net->forward(images);
}

torch::Tensor forward_discriminator(PatchDiscriminator& disc, const torch::Tensor& features) {
  if (!disc) throw std::logic_error("discriminator parameters are not initialized");
  return disc->forward(features);
}

std::int64_t count_params(const torch::nn::Module& module) {
  std::int64_t n = 0;
  for (const auto& p : module.parameters()) {
    if (p.requires_grad()) n += p.numel();
  }
  return n;
}

std::uint32_t param_checksum(const torch::nn::Module& module) {
  uLong crc = crc32(0L, Z_NULL, 0);
  auto feed = [&](const torch::Tensor& t) {
    auto c = t.detach().contiguous();
    crc = crc32(crc, static_cast<const Bytef*>(c.data_ptr()), static_cast<uInt>(c.nbytes()));
  };
  for (const auto& p : module.parameters()) feed(p);
  for (const auto& b : module.buffers()) feed(b);
  return static_cast<std::uint32_t>(crc);
}

}  // namespace dapnet
