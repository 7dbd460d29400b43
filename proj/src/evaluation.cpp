#include "dapnet/evaluation.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "dapnet/errors.hpp"
#include "dapnet/image_io.hpp"

namespace dapnet {
namespace fs = std::filesystem;

std::vector<int> window_offsets(int length, int window, int stride) {
  if (stride <= 0 || stride > window) {
    throw std::invalid_argument("stride must lie in (0, window], got " + std::to_string(stride));
  }
  if (length < window) throw ShapeError("length " + std::to_string(length) + " < window " + std::to_string(window));
  std::vector<int> offsets;
  for (int p = 0;; p += stride) {
    if (p + window >= length) {
      offsets.push_back(length - window);
      break;
    }
    offsets.push_back(p);
  }
  return offsets;
}

torch::Tensor sliding_window_infer(SegmentationNet& net, const torch::Tensor& image, int window, int stride) {
  if (stride <= 0 || stride > window) {
    throw std::invalid_argument("stride must lie in (0, window], got " + std::to_string(stride));
  }
  torch::NoGradGuard no_grad;
  const int h = static_cast<int>(image.size(1));
  const int w = static_cast<int>(image.size(2));
  DomainSample padded{.image = image};
  padded = pad_to_min(padded, window);
  const int ph = padded.height();
  const int pw = padded.width();

  auto sum = torch::zeros({ph, pw}, torch::kFloat32);
  auto cover = torch::zeros({ph, pw}, torch::kFloat32);
  constexpr std::size_t kChunk = 4;
  std::vector<std::pair<int, int>> origins;
  for (int y : window_offsets(ph, window, stride)) {
    for (int x : window_offsets(pw, window, stride)) origins.emplace_back(y, x);
  }
  for (std::size_t i = 0; i < origins.size(); i += kChunk) {
    std::vector<torch::Tensor> tiles;
    const auto end = std::min(origins.size(), i + kChunk);
    for (std::size_t k = i; k < end; ++k) {
      const auto [y, x] = origins[k];
      tiles.push_back(padded.image.slice(1, y, y + window).slice(2, x, x + window));
    }
    auto out = forward_segmentation(net, torch::stack(tiles), Mode::Eval);
    auto fg = torch::softmax(out.logits, 1).select(1, 1);
    for (std::size_t k = i; k < end; ++k) {
      const auto [y, x] = origins[k];
      sum.slice(0, y, y + window).slice(1, x, x + window) += fg[static_cast<std::int64_t>(k - i)];
      cover.slice(0, y, y + window).slice(1, x, x + window) += 1.0f;
    }
  }
  return (sum / cover).slice(0, 0, h).slice(1, 0, w).contiguous();
}

void PixelCounts::add(const torch::Tensor& pred, const torch::Tensor& gt) {
  if (pred.sizes() != gt.sizes()) throw ShapeError("prediction and ground-truth shapes differ");
  auto p = pred.to(torch::kBool);
  auto g = gt.to(torch::kBool);
  tp += (p & g).sum().item<std::int64_t>();
  fp += (p & ~g).sum().item<std::int64_t>();
  fn += (~p & g).sum().item<std::int64_t>();
  tn += (~p & ~g).sum().item<std::int64_t>();
}

double PixelCounts::accuracy() const {
  return total() == 0 ? 1.0 : static_cast<double>(tp + tn) / static_cast<double>(total());
}

double PixelCounts::iou() const {
  const auto uni = tp + fp + fn;
  return uni == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(uni);
}

double pixel_accuracy(const torch::Tensor& pred, const torch::Tensor& gt) {
  PixelCounts c;
  c.add(pred, gt);
  return c.accuracy();
}

double intersection_over_union(const torch::Tensor& pred, const torch::Tensor& gt) {
  PixelCounts c;
  c.add(pred, gt);
  return c.iou();
}

bool MetricsReport::same_results(const MetricsReport& o) const {
  return dataset == o.dataset && variant == o.variant && seed == o.seed &&
         pixel_accuracy == o.pixel_accuracy && iou == o.iou && per_image == o.per_image &&
         config_hash == o.config_hash;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& m : per_image) images.push_back({{"id", m.id}, {"acc", m.accuracy}, {"iou", m.iou}});
  return {{"dataset", dataset},
          {"variant", std::string(to_string(variant))},
          {"seed", seed},
          {"pixel_accuracy", pixel_accuracy},
          {"iou", iou},
          {"per_image", images},
          {"runtime_seconds", runtime_seconds},
          {"config_hash", config_hash}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.dataset = j.at("dataset").get<std::string>();
  r.variant = parse_variant(j.at("variant").get<std::string>());
  r.seed = j.at("seed").get<std::uint64_t>();
  r.pixel_accuracy = j.at("pixel_accuracy").get<double>();
  r.iou = j.at("iou").get<double>();
  for (const auto& m : j.at("per_image")) {
    r.per_image.push_back({m.at("id").get<std::string>(), m.at("acc").get<double>(), m.at("iou").get<double>()});
  }
  r.runtime_seconds = j.value("runtime_seconds", 0.0);
  r.config_hash = j.value("config_hash", std::uint32_t{0});
  return r;
}

void write_report(const MetricsReport& report, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report: " + path.string());
  out << report.to_json().dump(2) << '\n';
}

MetricsReport read_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("report not found: " + path.string());
  return MetricsReport::from_json(nlohmann::json::parse(in));
}

void write_per_image_csv(const MetricsReport& report, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "id,acc,iou\n" << std::setprecision(17);
  for (const auto& m : report.per_image) out << m.id << ',' << m.accuracy << ',' << m.iou << '\n';
}

MetricsReport evaluate_predictions(const std::vector<DomainSample>& samples, const Predictor& predict,
                                   double threshold, const std::string& dataset) {
  if (samples.empty()) throw DataError("evaluation split '" + dataset + "' is empty");
  const auto start = std::chrono::steady_clock::now();
  MetricsReport report;
  report.dataset = dataset;
  PixelCounts pooled;
  for (const auto& s : samples) {
    if (!s.labeled()) throw DataError("missing mask for test image '" + s.id + "'");
    const auto pred = predict(s).gt(threshold);
    PixelCounts c;
    c.add(pred, s.mask);
    pooled.tp += c.tp;
    pooled.fp += c.fp;
    pooled.fn += c.fn;
    pooled.tn += c.tn;
    report.per_image.push_back({s.id, c.accuracy(), c.iou()});
  }
  report.pixel_accuracy = pooled.accuracy();
  report.iou = pooled.iou();
  report.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

MetricsReport evaluate_dataset(SegmentationNet& net, const std::vector<DomainSample>& samples,
                               const ExperimentConfig& cfg, const std::string& dataset) {
  const int window = cfg.crop_size;
  const int stride = cfg.effective_eval_stride();
  auto report = evaluate_predictions(
      samples, [&](const DomainSample& s) { return sliding_window_infer(net, s.image, window, stride); },
      cfg.threshold, dataset);
  report.variant = cfg.variant;
  report.seed = cfg.seed;
  report.config_hash = config_hash(cfg);
  return report;
}

MetricsReport evaluate_dataset(SegmentationNet& net, const DatasetManifest& manifest, Domain domain,
                               const ExperimentConfig& cfg, const std::string& dataset) {
  for (const auto& e : manifest.select(domain, Split::Test)) {
    if (!e.mask) throw DataError("missing mask for test image " + e.image.string());
  }
  return evaluate_dataset(net, load_samples(manifest, domain, Split::Test), cfg, dataset);
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_t_test: lists differ in length");
  if (a.size() < 2) throw std::invalid_argument("paired_t_test: need at least 2 pairs");
  std::vector<double> diff(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diff[i] = a[i] - b[i];
  const auto [mean, sd] = mean_sd(diff);
  TTestResult r;
  r.df = static_cast<int>(diff.size()) - 1;
  if (sd == 0.0) {
    r.degenerate = true;
    if (mean == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = std::copysign(std::numeric_limits<double>::infinity(), mean);
      r.p = 0.0;
    }
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(diff.size())));
  const boost::math::students_t dist(r.df);
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t)));
  return r;
}

MeanSd mean_sd(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean_sd: empty input");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

nlohmann::json RunSummary::to_json() const {
  return {{"dataset", dataset},
          {"variant", std::string(to_string(variant))},
          {"runs", runs},
          {"pixel_accuracy", {{"mean", accuracy.mean}, {"sd", accuracy.sd}}},
          {"iou", {{"mean", iou.mean}, {"sd", iou.sd}}}};
}

std::string RunSummary::str() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << "acc " << accuracy.mean << " ± " << accuracy.sd << ", IoU "
     << iou.mean << " ± " << iou.sd;
  return os.str();
}

RunSummary summarize_runs(const std::vector<MetricsReport>& reports) {
  if (reports.size() < 2) throw std::invalid_argument("summarize_runs: need at least 2 reports");
  for (const auto& r : reports) {
    if (r.dataset != reports.front().dataset || r.variant != reports.front().variant) {
      throw std::invalid_argument("summarize_runs: reports mix datasets or variants");
    }
  }
  std::vector<double> acc;
  std::vector<double> iou;
  for (const auto& r : reports) {
    acc.push_back(r.pixel_accuracy);
    iou.push_back(r.iou);
  }
  return {reports.front().dataset, reports.front().variant, reports.size(), mean_sd(acc), mean_sd(iou)};
}

std::vector<fs::path> emit_overlays(SegmentationNet& net, const std::vector<DomainSample>& samples,
                                    const ExperimentConfig& cfg, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create overlay directory " + out_dir.string() + ": " + ec.message());
  std::vector<fs::path> written;
  for (const auto& s : samples) {
    if (!s.labeled()) throw DataError("missing mask for test image '" + s.id + "'");
    const auto probs = sliding_window_infer(net, s.image, cfg.crop_size, cfg.effective_eval_stride());
    const auto pred = probs.gt(cfg.threshold);
    const Image8 rgb = denormalize_image(s.image);
    const int h = rgb.height;
    const int w = rgb.width;
    Image8 panel(h, 3 * w, 3);
    auto gt = s.mask.to(torch::kUInt8).contiguous();
    auto pr = pred.to(torch::kUInt8).contiguous();
    const auto* gt_ptr = gt.data_ptr<std::uint8_t>();
    const auto* pr_ptr = pr.data_ptr<std::uint8_t>();
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const auto idx = static_cast<std::size_t>(y) * w + x;
        for (int c = 0; c < 3; ++c) {
          panel.at(y, x, c) = rgb.at(y, x, c);
          panel.at(y, w + x, c) = gt_ptr[idx] ? 255 : 0;
          panel.at(y, 2 * w + x, c) = pr_ptr[idx] ? 255 : 0;
        }
      }
    }
    const auto path = out_dir / (s.id + "_overlay.png");
    write_png(panel, path);
    written.push_back(path);
  }
  return written;
}

}  // namespace dapnet
