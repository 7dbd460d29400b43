#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dapnet/config.hpp"
#include "dapnet/data.hpp"
#include "dapnet/networks.hpp"

namespace dapnet {

/// Window origins along one axis: multiples of `stride`, with the last window
/// clamped so it ends exactly at `length`. Requires length >= window.
std::vector<int> window_offsets(int length, int window, int stride);

/// Foreground probability map (H×W float) for a 3×H×W normalized image. The
/// softmax output of every covering window is averaged per pixel. Images
/// smaller than the window are reflect-padded and cropped back.
torch::Tensor sliding_window_infer(SegmentationNet& net, const torch::Tensor& image, int window, int stride);

/// Confusion counts over binary masks; the basis of all pooled metrics.
struct PixelCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;

  void add(const torch::Tensor& pred, const torch::Tensor& gt);
  std::int64_t total() const { return tp + fp + fn + tn; }
  double accuracy() const;
  /// Foreground IoU; 1 when both masks are empty.
  double iou() const;
};

double pixel_accuracy(const torch::Tensor& pred, const torch::Tensor& gt);
double intersection_over_union(const torch::Tensor& pred, const torch::Tensor& gt);

struct ImageMetrics {
  std::string id;
  double accuracy = 0.0;
  double iou = 0.0;
  bool operator==(const ImageMetrics&) const = default;
};

/// Aggregates are pooled over all pixels of all images, not averaged per image.
struct MetricsReport {
  std::string dataset;
  Variant variant = Variant::FULL;
  std::uint64_t seed = 0;
  double pixel_accuracy = 0.0;
  double iou = 0.0;
  std::vector<ImageMetrics> per_image;
  double runtime_seconds = 0.0;
  std::uint32_t config_hash = 0;

  /// Equality on everything except wall-clock runtime.
  bool same_results(const MetricsReport& other) const;
  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

void write_report(const MetricsReport& report, const std::filesystem::path& path);
MetricsReport read_report(const std::filesystem::path& path);
void write_per_image_csv(const MetricsReport& report, const std::filesystem::path& path);

/// Maps a labeled sample to its H×W foreground probability map.
using Predictor = std::function<torch::Tensor(const DomainSample&)>;

MetricsReport evaluate_predictions(const std::vector<DomainSample>& samples, const Predictor& predict,
                                   double threshold, const std::string& dataset);

/// Sliding-window evaluation of `net` (window crop_size, stride
/// effective_eval_stride, threshold from cfg). Every sample needs a mask.
MetricsReport evaluate_dataset(SegmentationNet& net, const std::vector<DomainSample>& samples,
                               const ExperimentConfig& cfg, const std::string& dataset);

/// Loads the test split of `domain` from the manifest and evaluates it.
MetricsReport evaluate_dataset(SegmentationNet& net, const DatasetManifest& manifest, Domain domain,
                               const ExperimentConfig& cfg, const std::string& dataset);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  int df = 0;
  /// Differences had zero variance; t and p follow the 0/0 → (0, 1) and
  /// c/0 → (±inf, 0) conventions.
  bool degenerate = false;
};

/// Two-sided paired t-test on a − b with n − 1 degrees of freedom.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample SD (n − 1)
};
MeanSd mean_sd(std::span<const double> values);

struct RunSummary {
  std::string dataset;
  Variant variant = Variant::FULL;
  std::size_t runs = 0;
  MeanSd accuracy;
  MeanSd iou;

  nlohmann::json to_json() const;
  /// "acc 0.8800 ± 0.0083, IoU 0.6800 ± 0.0021"
  std::string str() const;
};

/// Requires >= 2 reports sharing dataset and variant.
RunSummary summarize_runs(const std::vector<MetricsReport>& reports);

/// Writes one PNG per sample: image | ground truth | thresholded prediction.
std::vector<std::filesystem::path> emit_overlays(SegmentationNet& net, const std::vector<DomainSample>& samples,
                                                 const ExperimentConfig& cfg,
                                                 const std::filesystem::path& out_dir);

}  // namespace dapnet
