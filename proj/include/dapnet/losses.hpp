#pragma once

#include <torch/torch.h>

#include <nlohmann/json.hpp>

#include "dapnet/config.hpp"

namespace dapnet {

/// Probabilities are clamped to [kProbClamp, 1 - kProbClamp] before log.
inline constexpr double kProbClamp = 1e-7;

/// Mean over pixels of −log p[true class]. probs B×2×H×W, mask B×H×W in {0,1}.
torch::Tensor cross_entropy(const torch::Tensor& probs, const torch::Tensor& mask);

/// −(2·Σ y·ŷ + smooth) / (Σ y + Σ ŷ + smooth), summed over batch and pixels.
/// Lies in [−1, 0]; −1 is perfect overlap (and the empty-mask limit).
torch::Tensor soft_dice_term(const torch::Tensor& fg_probs, const torch::Tensor& mask, double smooth);

/// cross_entropy + alpha · soft_dice_term on the foreground channel. Its
/// minimum is −alpha.
torch::Tensor segmentation_loss(const torch::Tensor& probs, const torch::Tensor& mask, double alpha,
                                double smooth);

/// Least-squares discriminator loss: target maps are labelled 1, source 0.
torch::Tensor lsgan_d_loss(const torch::Tensor& d_target, const torch::Tensor& d_source);

/// Generator term pulling target scores toward the source label 0.
torch::Tensor lsgan_g_adv_loss(const torch::Tensor& d_target);

/// Extra generator term used when adv_symmetric is on: pushes source scores
/// toward the target label 1.
torch::Tensor lsgan_g_adv_loss_source(const torch::Tensor& d_source);

struct LossBreakdown {
  double seg_ce = 0.0;
  double seg_dice = 0.0;
  double adv_img_g = 0.0;
  double adv_feat_g = 0.0;
  double d_img = 0.0;
  double d_feat = 0.0;
  double total_g = 0.0;

  nlohmann::json to_json() const;
  bool operator==(const LossBreakdown&) const = default;
};

/// Differentiable generator terms of one step; undefined tensors are absent.
struct GeneratorTerms {
  torch::Tensor seg_ce;
  torch::Tensor seg_dice;
  torch::Tensor adv_img;
  torch::Tensor adv_feat;
};

struct GeneratorObjective {
  torch::Tensor total;
  LossBreakdown breakdown;
};

/// total = seg_ce + alpha·seg_dice + λ_img·adv_img + λ_feat·adv_feat, with the
/// adversarial terms dropped when the config's variant disables them.
GeneratorObjective total_generator_objective(const GeneratorTerms& terms, const ExperimentConfig& cfg);

}  // namespace dapnet
