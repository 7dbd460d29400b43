#include "dapnet/losses.hpp"

#include <string>

#include "dapnet/errors.hpp"

namespace dapnet {
namespace {

void require_finite(const torch::Tensor& t, const char* what) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw NumericError(std::string(what) + ": non-finite (NaN/Inf) input");
  }
}

void require_mask_shape(const torch::Tensor& per_pixel, const torch::Tensor& mask, const char* what) {
  if (per_pixel.sizes() != mask.sizes()) {
    throw ShapeError(std::string(what) + ": prediction and mask shapes differ");
  }
}

}  // namespace

torch::Tensor cross_entropy(const torch::Tensor& probs, const torch::Tensor& mask) {
  if (probs.dim() != 4 || probs.size(1) != 2) throw ShapeError("cross_entropy: expected Bx2xHxW probabilities");
  require_mask_shape(probs.select(1, 0), mask, "cross_entropy");
  auto picked = probs.gather(1, mask.to(torch::kLong).unsqueeze(1)).squeeze(1);
  return -torch::log(picked.clamp(kProbClamp, 1.0 - kProbClamp)).mean();
}

torch::Tensor soft_dice_term(const torch::Tensor& fg_probs, const torch::Tensor& mask, double smooth) {
  require_mask_shape(fg_probs, mask, "soft_dice_term");
  auto y = mask.to(fg_probs.scalar_type());
  auto overlap = (y * fg_probs).sum();
  return -(2.0 * overlap + smooth) / (y.sum() + fg_probs.sum() + smooth);
}

torch::Tensor segmentation_loss(const torch::Tensor& probs, const torch::Tensor& mask, double alpha,
                                double smooth) {
  return cross_entropy(probs, mask) + alpha * soft_dice_term(probs.select(1, 1), mask, smooth);
}

torch::Tensor lsgan_d_loss(const torch::Tensor& d_target, const torch::Tensor& d_source) {
  require_finite(d_target, "lsgan_d_loss");
  require_finite(d_source, "lsgan_d_loss");
  return (d_target - 1.0).square().mean() + d_source.square().mean();
}

torch::Tensor lsgan_g_adv_loss(const torch::Tensor& d_target) {
  require_finite(d_target, "lsgan_g_adv_loss");
  return d_target.square().mean();
}

torch::Tensor lsgan_g_adv_loss_source(const torch::Tensor& d_source) {
  require_finite(d_source, "lsgan_g_adv_loss");
  return (d_source - 1.0).square().mean();
}

nlohmann::json LossBreakdown::to_json() const {
  return {{"seg_ce", seg_ce},       {"seg_dice", seg_dice}, {"adv_img_g", adv_img_g},
          {"adv_feat_g", adv_feat_g}, {"d_img", d_img},       {"d_feat", d_feat},
          {"total_g", total_g}};
}

GeneratorObjective total_generator_objective(const GeneratorTerms& terms, const ExperimentConfig& cfg) {
  GeneratorObjective out;
  out.total = terms.seg_ce + cfg.alpha * terms.seg_dice;
  out.breakdown.seg_ce = terms.seg_ce.item<double>();
  out.breakdown.seg_dice = terms.seg_dice.item<double>();
  if (cfg.uses_image_adaptation() && terms.adv_img.defined()) {
    out.total = out.total + cfg.lambda_img * terms.adv_img;
    out.breakdown.adv_img_g = terms.adv_img.item<double>();
  }
  if (cfg.uses_feature_adaptation() && terms.adv_feat.defined()) {
    out.total = out.total + cfg.lambda_feat * terms.adv_feat;
    out.breakdown.adv_feat_g = terms.adv_feat.item<double>();
  }
  out.breakdown.total_g = out.total.item<double>();
  return out;
}

}  // namespace dapnet
