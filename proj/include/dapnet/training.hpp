#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapnet/config.hpp"
#include "dapnet/data.hpp"
#include "dapnet/evaluation.hpp"
#include "dapnet/losses.hpp"
#include "dapnet/networks.hpp"

namespace dapnet {

/// Everything needed to continue a run bit-for-bit.
struct TrainState {
  int epoch = 0;  // epochs completed
  std::int64_t global_step = 0;
  ModelSet models;
  std::unique_ptr<torch::optim::Adam> opt_g;
  std::unique_ptr<torch::optim::Adam> opt_img;
  std::unique_ptr<torch::optim::Adam> opt_feat;
  std::mt19937_64 rng;  // data order and crop offsets
  std::uint32_t config_hash = 0;
};

/// Fresh networks from cfg.seed, Adam optimizers at base_lr, data RNG seeded
/// from cfg.seed.
TrainState make_train_state(const ExperimentConfig& cfg);

/// Applies `lr` to all three optimizers.
void set_learning_rate(TrainState& state, double lr);

/// One alternating update:
///   1. generator forward on the source batch (train mode) and, when any
///      adaptation is enabled, on the target batch with batch-norm statistics
///      frozen, so target features are normalized as they will be at test time;
///      a second, gradient-free frozen-statistics pass over the source batch
///      gives the discriminators source features normalized the same way;
///   2. image-level discriminator step on (p_t, p_s), generator features detached;
///   3. feature-level discriminator step on (f_t, f_s);
///   4. generator step on segmentation + enabled adversarial terms, with the
///      discriminators' parameters frozen.
/// Throws NumericError naming the first non-finite loss; no update is
/// skipped silently.
LossBreakdown train_step(TrainState& state, const DomainBatch& source, const DomainBatch& target,
                         const ExperimentConfig& cfg);

/// One optimizer step of a discriminator on lsgan_d_loss(D(target), D(source))
/// with both feature maps treated as constants. Returns the loss before the step.
double discriminator_update(PatchDiscriminator& disc, torch::optim::Adam& opt, const torch::Tensor& target,
                            const torch::Tensor& source, const char* loss_name = "d_img");

struct EpochSummary {
  int epoch = 0;
  double lr = 0.0;
  std::size_t steps = 0;
  LossBreakdown mean;
  std::uint32_t batch_hash = 0;  // CRC over this epoch's batch hashes

  nlohmann::json to_json() const;
};

struct TrainOptions {
  std::filesystem::path run_dir;
  std::optional<std::filesystem::path> resume_from;
  /// Stop once this many epochs are complete (an interrupted run).
  std::optional<int> stop_after_epoch;
  std::ostream* progress = nullptr;
};

struct TrainResult {
  TrainState state;
  std::filesystem::path final_checkpoint;
  std::filesystem::path step_log;
  std::filesystem::path epoch_log;
  std::vector<EpochSummary> epochs;
  std::uint32_t batch_sequence_hash = 0;  // CRC over every step's batch hashes
};

/// Trains on the train splits of cfg.source_manifest (source rows) and
/// cfg.target_manifest (target rows). Writes `train_log.jsonl` (one line per
/// step), `epochs.jsonl`, `ckpt_epochNNNN.dapn` every checkpoint_every epochs,
/// and `final.dapn`.
TrainResult train(const ExperimentConfig& cfg, const TrainOptions& opts);

/// Same as above with already-decoded training samples.
TrainResult train(const ExperimentConfig& cfg, const std::vector<DomainSample>& source,
                  const std::vector<DomainSample>& target, const TrainOptions& opts);

/// Sets thread count and deterministic-algorithm mode from cfg.
void configure_runtime(const ExperimentConfig& cfg);

// --- checkpoints -----------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Little-endian: "DAPN", u32 version, u32 config hash, u32 epoch, u64 step,
/// then length-prefixed strings (rng state, resolved config, metrics JSON),
/// u32 blob count, named f32 blobs (u32 name length, name, u32 rank, i64
/// dims, data), and a trailing CRC-32 of everything before it.
void save_checkpoint(const TrainState& state, const ExperimentConfig& cfg, const std::filesystem::path& path,
                     const nlohmann::json& metrics = nlohmann::json::object());

struct LoadedCheckpoint {
  TrainState state;
  ExperimentConfig cfg;  // the config the checkpoint was written with
  nlohmann::json metrics;
};

/// Rebuilds networks and optimizers from the embedded config and restores
/// every parameter, buffer, moment and the RNG bit-for-bit.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

// --- ablation --------------------------------------------------------------

struct AblationEntry {
  Variant variant = Variant::FULL;
  MetricsReport source;
  MetricsReport target;
  std::uint32_t batch_sequence_hash = 0;
};

/// Trains NA, IA, FA and FULL with identical seed and data order and evaluates
/// each on the source and target test splits. One entry per variant.
std::vector<AblationEntry> run_ablation(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                                        std::ostream* progress = nullptr);

}  // namespace dapnet
