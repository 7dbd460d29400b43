#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dapnet {

/// Ablation selector. NA trains without adversarial terms, IA uses only the
/// image-level (pyramid pooling) discriminator, FA only the feature-level one.
enum class Variant { NA, IA, FA, FULL };

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view text);

/// Positive rational factor applied to every hidden channel count.
struct WidthScale {
  std::int64_t num = 1;
  std::int64_t den = 1;

  /// `channels * num / den`, floored, never below 8.
  std::int64_t apply(std::int64_t channels) const;
  std::string str() const;
  static WidthScale parse(std::string_view text);
  bool operator==(const WidthScale&) const = default;
};

/// Every knob of one experiment. Immutable once loaded and validated.
struct ExperimentConfig {
  // Loss trade-offs.
  double alpha = 1.0;
  double lambda_img = 0.002;
  double lambda_feat = 0.005;
  double dice_smooth = 1.0;
  bool adv_symmetric = false;

  // Optimisation.
  double base_lr = 1e-3;
  int total_epochs = 300;
  int constant_epochs = 150;
  int batch_size = 4;
  double adam_beta1_g = 0.9;
  double adam_beta2_g = 0.999;
  double adam_beta1_d = 0.5;
  double adam_beta2_d = 0.999;

  // Data.
  int crop_size = 256;
  int crops_per_image = 4;
  bool hflip = false;
  int num_classes = 2;

  // Model / run.
  Variant variant = Variant::FULL;
  WidthScale channel_width_scale{};
  std::uint64_t seed = 0;
  bool deterministic = true;
  int checkpoint_every = 25;

  // Evaluation. eval_stride 0 means crop_size / 2.
  int eval_stride = 0;
  double threshold = 0.5;

  std::string source_manifest;
  std::string target_manifest;
  std::string output_dir = "runs";

  bool uses_image_adaptation() const { return variant == Variant::IA || variant == Variant::FULL; }
  bool uses_feature_adaptation() const { return variant == Variant::FA || variant == Variant::FULL; }
  /// lambda_img after ablation zeroing.
  double effective_lambda_img() const { return uses_image_adaptation() ? lambda_img : 0.0; }
  double effective_lambda_feat() const { return uses_feature_adaptation() ? lambda_feat : 0.0; }
  int effective_eval_stride() const { return eval_stride > 0 ? eval_stride : crop_size / 2; }

  bool operator==(const ExperimentConfig&) const = default;
};

using Override = std::pair<std::string, std::string>;

/// Parses `key = value` lines (`#` starts a comment). Absent keys keep their
/// defaults. Overrides are applied after the document and before validation.
ExperimentConfig parse_config(std::string_view text, const std::vector<Override>& overrides = {});
ExperimentConfig load_config(const std::filesystem::path& path,
                             const std::vector<Override>& overrides = {});

/// Splits `key=value`; throws ConfigError when there is no '='.
Override parse_override(std::string_view text);

void apply_override(ExperimentConfig& cfg, std::string_view key, std::string_view value);
void validate(const ExperimentConfig& cfg);

/// Canonical text form; parse_config(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& cfg);
void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

/// CRC-32 of the canonical serialization, output_dir excluded.
std::uint32_t config_hash(const ExperimentConfig& cfg);

/// Constant for epochs [0, constant_epochs), then linear decay reaching 0 at
/// total_epochs.
double lr_at_epoch(const ExperimentConfig& cfg, int epoch);

}  // namespace dapnet
