#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dapnet/config.hpp"
#include "dapnet/image_io.hpp"

namespace dapnet {

enum class Domain { Source, Target };
enum class Split { Train, Test };

std::string_view to_string(Domain d);
std::string_view to_string(Split s);

struct ManifestEntry {
  std::filesystem::path image;
  std::optional<std::filesystem::path> mask;
  Domain domain = Domain::Source;
  Split split = Split::Train;
};

/// Rows of `image,mask,domain,split`. Relative paths resolve against the
/// manifest's directory.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  std::size_t count(Domain d, Split s) const;
  std::vector<ManifestEntry> select(Domain d, Split s) const;
  /// e.g. "source/train=85 source/test=80 target/train=0 target/test=0".
  std::string summary() const;
};

/// Validates every row: known domain/split tags, files present, PNG headers
/// readable, masks present on source/train rows, no duplicate images.
DatasetManifest load_manifest(const std::filesystem::path& path);
/// Writes paths relative to the manifest's directory when possible.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

/// One image (normalized, 3×H×W float) with its optional binary mask
/// (H×W int64 in {0,1}).
struct DomainSample {
  std::string id;
  torch::Tensor image;
  torch::Tensor mask;
  Domain domain = Domain::Source;
  // Offset of this crop inside the sample it was cut from.
  int crop_top = 0;
  int crop_left = 0;

  bool labeled() const { return mask.defined(); }
  int height() const { return static_cast<int>(image.size(1)); }
  int width() const { return static_cast<int>(image.size(2)); }
};

/// 8-bit RGB H×W×3 → 3×H×W float, (v/255 − 0.5) / 0.5.
torch::Tensor normalize_image(const Image8& raw);
/// Inverse of normalize_image, rounding to the nearest 8-bit level.
Image8 denormalize_image(const torch::Tensor& image);
/// Any 8-bit single-channel mask → H×W int64, foreground where value > 0.
torch::Tensor binarize_mask(const Image8& raw);

DomainSample load_sample(const ManifestEntry& entry, bool with_mask = true);
std::vector<DomainSample> load_samples(const DatasetManifest& manifest, Domain d, Split s,
                                       bool with_masks = true);

/// Reflect-pads (symmetric about edge pixels, repeating as needed) so both
/// sides are at least `size`. Padding goes to the bottom/right.
DomainSample pad_to_min(const DomainSample& sample, int size);

/// size×size window at a uniformly drawn offset; the mask gets the same window.
DomainSample random_crop_pair(const DomainSample& sample, int size, std::mt19937_64& rng);

struct DomainBatch {
  torch::Tensor images;  // B×3×S×S float
  torch::Tensor masks;   // B×S×S int64, undefined for unlabeled batches
  Domain domain = Domain::Source;

  std::int64_t size() const { return images.size(0); }
  /// CRC-32 over image (and mask) bytes; identifies the exact batch content.
  std::uint32_t hash() const;
};

DomainBatch stack_batch(const std::vector<DomainSample>& crops, Domain domain, bool with_masks);

/// One epoch of (source, target) batch pairs. Source crops are drawn from a
/// shuffled pool holding every image `crops_per_image` times; the target
/// domain, and the source pool once exhausted, recycle with a fresh shuffle.
class PairedBatchIterator {
 public:
  PairedBatchIterator(const std::vector<DomainSample>& source,
                      const std::vector<DomainSample>& target, const ExperimentConfig& cfg,
                      std::mt19937_64& rng);

  static std::size_t steps_per_epoch(std::size_t source_count, const ExperimentConfig& cfg);
  std::size_t steps() const { return steps_; }
  std::size_t position() const { return step_; }

  std::optional<std::pair<DomainBatch, DomainBatch>> next();

 private:
  class Cycle {
   public:
    Cycle(std::vector<std::size_t> pool, std::mt19937_64& rng);
    std::size_t next(std::mt19937_64& rng);

   private:
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
  };

  DomainSample draw(const DomainSample& sample);

  const std::vector<DomainSample>& source_;
  const std::vector<DomainSample>& target_;
  const ExperimentConfig& cfg_;
  std::mt19937_64& rng_;
  Cycle source_cycle_;
  Cycle target_cycle_;
  std::size_t steps_ = 0;
  std::size_t step_ = 0;
};

}  // namespace dapnet
