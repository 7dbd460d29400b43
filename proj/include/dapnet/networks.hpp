#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

#include "dapnet/config.hpp"

namespace dapnet {

enum class Mode { Train, Eval };

/// One generator pass. For input B×3×S×S (channels shown at scale 1):
///   ppm_feature   B×512×S/8×S/8   pyramid pooling output, image-level alignment
///   fused_feature B×512×S/4×S/4   pyramid fusion output, feature-level alignment
///   logits        B×2×S×S
struct SegForwardOutput {
  torch::Tensor ppm_feature;
  torch::Tensor fused_feature;
  torch::Tensor logits;
};

/// conv → batch norm → ReLU. Padding keeps spatial size at stride 1.
class ConvBnReluImpl : public torch::nn::Module {
 public:
  ConvBnReluImpl(std::int64_t in, std::int64_t out, std::int64_t kernel, std::int64_t stride = 1,
                 std::int64_t dilation = 1);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_{nullptr};
  torch::nn::BatchNorm2d bn_{nullptr};
};
TORCH_MODULE(ConvBnRelu);

/// ResNet basic block with optional stride and dilation.
class BasicBlockImpl : public torch::nn::Module {
 public:
  BasicBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride, std::int64_t dilation);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  ConvBnRelu conv1_{nullptr};
  torch::nn::Conv2d conv2_{nullptr};
  torch::nn::BatchNorm2d bn2_{nullptr};
  torch::nn::Sequential shortcut_{nullptr};
};
TORCH_MODULE(BasicBlock);

/// Adaptive average pooling of `x` into each bins×bins grid.
std::vector<torch::Tensor> pyramid_pool(const torch::Tensor& x, const std::vector<std::int64_t>& bins);

/// Dilated ResNet-18 encoder (output stride 8) + pyramid pooling + two-stage
/// skip decoder + pyramid fusion + classifier.
class SegmentationNetImpl : public torch::nn::Module {
 public:
  static constexpr std::int64_t kNumClasses = 2;
  static inline const std::vector<std::int64_t> kPyramidBins{1, 2, 3, 6};

  explicit SegmentationNetImpl(WidthScale scale = {});
  SegForwardOutput forward(const torch::Tensor& images);

  std::int64_t ppm_channels() const { return ppm_channels_; }
  std::int64_t fused_channels() const { return fused_channels_; }

 private:
  std::int64_t ppm_channels_;
  std::int64_t fused_channels_;
  ConvBnRelu stem_{nullptr};
  ConvBnRelu stem_tap_{nullptr};
  torch::nn::Sequential stage1_{nullptr}, stage2_{nullptr}, stage3_{nullptr}, stage4_{nullptr};
  torch::nn::ModuleList ppm_branches_{nullptr};
  ConvBnRelu ppm_fuse_{nullptr};
  ConvBnRelu up1_{nullptr};
  ConvBnRelu up2_{nullptr};
  ConvBnRelu fusion_{nullptr};
  ConvBnRelu head_{nullptr};
  torch::nn::Conv2d classifier_{nullptr};
};
TORCH_MODULE(SegmentationNet);

/// PatchGAN: four k4/s2/p1 convolutions (64, 128, 256, 512 channels at scale
/// 1; batch norm on layers 2-4; leaky ReLU 0.2) and a k4/s1/p1 scoring conv.
/// Inputs need 32 pixels per side to leave a non-empty patch map; sides in
/// [8, 32) are reflect-padded up to 32, smaller inputs are rejected.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  static constexpr std::int64_t kMinInput = 8;
  static constexpr std::int64_t kReceptiveMin = 32;

  PatchDiscriminatorImpl(std::int64_t in_channels, WidthScale scale = {});
  /// Raw (unsquashed) scores, B×1×h×w.
  torch::Tensor forward(const torch::Tensor& features);

  std::int64_t in_channels() const { return in_channels_; }

 private:
  std::int64_t in_channels_;
  torch::nn::Sequential layers_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

/// Generator plus the image-level and feature-level discriminators.
struct ModelSet {
  SegmentationNet generator{nullptr};
  PatchDiscriminator image_disc{nullptr};
  PatchDiscriminator feature_disc{nullptr};
};

/// Builds all three networks and draws their weights from one seeded stream:
/// conv weights ~ N(0, 2/fan_in), biases 0, batch-norm scale 1 and shift 0.
ModelSet init_params(std::uint64_t seed, WidthScale scale);
/// Re-initializes an existing module in place with the same scheme.
void init_module(torch::nn::Module& module, std::uint64_t seed);

/// Sets the module mode (eval freezes batch-norm statistics) and runs it.
SegForwardOutput forward_segmentation(SegmentationNet& net, const torch::Tensor& images, Mode mode);
torch::Tensor forward_discriminator(PatchDiscriminator& disc, const torch::Tensor& features);

/// Trainable scalar count.
std::int64_t count_params(const torch::nn::Module& module);

/// CRC-32 over all parameters and buffers in registration order.
std::uint32_t param_checksum(const torch::nn::Module& module);

}  // namespace dapnet
