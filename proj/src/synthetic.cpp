#include "dapnet/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "dapnet/errors.hpp"

namespace dapnet {
namespace fs = std::filesystem;

namespace {

using Rgb = std::array<double, 3>;

struct Palette {
  Rgb background;
  Rgb gland;
  Rgb rim;    // nuclei lining the gland boundary
  Rgb lumen;  // pale centre
};

const Palette& palette(StainStyle s) {
  static const Palette kStainA{{0.93, 0.70, 0.84}, {0.62, 0.38, 0.68}, {0.36, 0.18, 0.50}, {0.97, 0.88, 0.95}};
  static const Palette kStainB{{0.72, 0.80, 0.92}, {0.62, 0.44, 0.28}, {0.22, 0.28, 0.55}, {0.95, 0.93, 0.88}};
  return s == StainStyle::StainA ? kStainA : kStainB;
}

struct Ellipse {
  double cx, cy, a, b, cos_t, sin_t;

  // Normalized radial distance; <= 1 inside.
  double distance(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double u = (dx * cos_t + dy * sin_t) / a;
    const double v = (-dx * sin_t + dy * cos_t) / b;
    return std::sqrt(u * u + v * v);
  }
};

// Blob count, placement and radii. Frozen so that the mask foreground fraction
// stays inside [0.10, 0.60] (checked over 100 images in the unit tests).
constexpr int kMinBlobs = 3;
constexpr int kMaxBlobs = 8;
constexpr double kCentreMargin = 0.12;
constexpr double kMinRadius = 0.09;
constexpr double kMaxRadius = 0.16;
constexpr double kFewBlobBoost = 1.25;  // applied when there are <= 4 blobs
constexpr double kNoiseSigma = 0.02;

std::uint64_t style_stream(StainStyle s) { return s == StainStyle::StainA ? 1 : 2; }

std::mt19937_64 make_rng(std::uint64_t seed, int index, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

std::vector<Ellipse> blob_layout(std::mt19937_64& rng, int size) {
  std::uniform_int_distribution<int> count(kMinBlobs, kMaxBlobs);
  std::uniform_real_distribution<double> centre(kCentreMargin, 1.0 - kCentreMargin);
  std::uniform_real_distribution<double> radius(kMinRadius, kMaxRadius);
  std::uniform_real_distribution<double> ratio(0.6, 1.0);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  const int k = count(rng);
  std::vector<Ellipse> blobs;
  for (int i = 0; i < k; ++i) {
    const double cx = centre(rng) * size;
    const double cy = centre(rng) * size;
    const double a = radius(rng) * size * (k > 4 ? 1.0 : kFewBlobBoost);
    const double b = a * ratio(rng);
    const double t = angle(rng);
    blobs.push_back({cx, cy, a, b, std::cos(t), std::sin(t)});
  }
  return blobs;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

std::string_view to_string(StainStyle s) { return s == StainStyle::StainA ? "stainA" : "stainB"; }

StainStyle parse_stain_style(std::string_view text) {
  if (text == "stainA") return StainStyle::StainA;
  if (text == "stainB") return StainStyle::StainB;
  throw ConfigError("unknown style '" + std::string(text) + "' (expected stainA|stainB)");
}

SyntheticImage render_synthetic(std::uint64_t seed, int index, int size, StainStyle style, bool paired) {
  // Geometry stream 0 is shared by both styles when paired.
  auto geometry_rng = make_rng(seed, index, paired ? 0 : 10 + style_stream(style));
  auto render_rng = make_rng(seed, index, 20 + style_stream(style));
  const auto blobs = blob_layout(geometry_rng, size);

  // Background texture: a few random plane waves.
  struct Wave {
    double fx, fy, phase;
  };
  std::uniform_real_distribution<double> freq(0.02, 0.15);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::array<Wave, 6> waves{};
  for (auto& w : waves) w = {freq(render_rng), freq(render_rng), phase(render_rng)};
  const double contrast = std::uniform_real_distribution<double>(0.85, 1.15)(render_rng);
  const double brightness = std::uniform_real_distribution<double>(-0.05, 0.05)(render_rng);
  std::normal_distribution<double> noise(0.0, kNoiseSigma);

  const Palette& pal = palette(style);
  SyntheticImage out{Image8(size, size, 3), Image8(size, size, 1)};
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double px = x + 0.5;
      const double py = y + 0.5;
      double d = 1e9;
      for (const auto& e : blobs) d = std::min(d, e.distance(px, py));
      out.mask.at(y, x, 0) = d <= 1.0 ? 255 : 0;

      double tex = 0.0;
      for (const auto& w : waves) {
        tex += std::sin(2.0 * std::numbers::pi * (w.fx * px + w.fy * py) + w.phase);
      }
      tex /= static_cast<double>(waves.size());

      const double inside = sigmoid(-(d - 1.0) / 0.04);
      const double rim = std::exp(-std::pow((d - 0.9) / 0.08, 2.0));
      const double lumen = sigmoid(-(d - 0.45) / 0.06);
      for (int c = 0; c < 3; ++c) {
        double v = pal.background[c] * (1.0 - inside) + pal.gland[c] * inside;
        v = v * (1.0 - rim) + pal.rim[c] * rim;
        v = v * (1.0 - lumen) + pal.lumen[c] * lumen;
        v += 0.06 * tex;
        v = (v - 0.5) * contrast + 0.5 + brightness + noise(render_rng);
        v = std::clamp(v, 0.0, 1.0);
        out.image.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return out;
}

DatasetManifest generate_synthetic_dataset(const SynthOptions& opts, const fs::path& out_dir) {
  if (opts.n_images < 1) throw ConfigError("n_images must be >= 1");
  if (opts.size < 64) throw ConfigError("size must be >= 64");
  if (opts.n_test < 0 || opts.n_test > opts.n_images) throw ConfigError("n_test must lie in [0, n_images]");
  const Domain domain =
      opts.domain.value_or(opts.style == StainStyle::StainA ? Domain::Source : Domain::Target);

  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (!ec) fs::create_directories(out_dir / "masks", ec);
  if (ec) throw DataError("cannot create corpus directory " + out_dir.string() + ": " + ec.message());

  DatasetManifest manifest;
  const int n_train = opts.n_images - opts.n_test;
  for (int i = 0; i < opts.n_images; ++i) {
    const auto sample = render_synthetic(opts.seed, i, opts.size, opts.style, opts.paired);
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%04d.png", std::string(to_string(opts.style)).c_str(), i);
    const fs::path image_path = out_dir / "images" / name;
    const fs::path mask_path = out_dir / "masks" / name;
    write_png(sample.image, image_path);
    write_png(sample.mask, mask_path);

    ManifestEntry e;
    e.image = image_path;
    e.domain = domain;
    e.split = i < n_train ? Split::Train : Split::Test;
    if (!(domain == Domain::Target && e.split == Split::Train)) e.mask = mask_path;
    manifest.entries.push_back(std::move(e));
  }
  save_manifest(manifest, out_dir / "manifest.csv");
  return manifest;
}

}  // namespace dapnet
