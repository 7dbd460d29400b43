#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>

#include "dapnet/data.hpp"
#include "dapnet/image_io.hpp"

namespace dapnet {

/// stainA: pink/purple palette (H&E-like). stainB: brown/blue (DAB-H-like).
enum class StainStyle { StainA, StainB };

std::string_view to_string(StainStyle s);
StainStyle parse_stain_style(std::string_view text);

struct SynthOptions {
  std::uint64_t seed = 0;
  int n_images = 1;
  /// The last n_test images go to the test split, the rest to train.
  int n_test = 0;
  int size = 128;
  StainStyle style = StainStyle::StainA;
  /// Paired corpora share blob geometry across styles for equal (seed, index).
  bool paired = false;
  /// Defaults to source for stainA and target for stainB.
  std::optional<Domain> domain;
};

struct SyntheticImage {
  Image8 image;  // size×size RGB
  Image8 mask;   // size×size gray, 0 or 255
};

/// Deterministic in (seed, index, size, style, paired).
SyntheticImage render_synthetic(std::uint64_t seed, int index, int size, StainStyle style, bool paired);

/// Writes images/, masks/ and manifest.csv under `out_dir`. Target-domain
/// train rows are listed without masks so their labels cannot reach training;
/// the mask files are still written for evaluation studies.
DatasetManifest generate_synthetic_dataset(const SynthOptions& opts, const std::filesystem::path& out_dir);

}  // namespace dapnet
