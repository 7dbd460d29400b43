#include "dapnet/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "dapnet/errors.hpp"

namespace dapnet {
namespace fs = std::filesystem;

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

Domain parse_domain(const std::string& text, int row) {
  if (text == "source") return Domain::Source;
  if (text == "target") return Domain::Target;
  throw DataError("manifest row " + std::to_string(row) + ": unknown domain tag '" + text +
                  "' (expected source|target)");
}

Split parse_split(const std::string& text, int row) {
  if (text == "train") return Split::Train;
  if (text == "test") return Split::Test;
  throw DataError("manifest row " + std::to_string(row) + ": unknown split '" + text +
                  "' (expected train|test)");
}

// Mirror index into [0, n) with period 2(n-1), edge pixel not repeated.
std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

torch::Tensor reflect_indices(std::int64_t n, std::int64_t target) {
  std::vector<std::int64_t> idx(static_cast<std::size_t>(target));
  for (std::int64_t i = 0; i < target; ++i) idx[static_cast<std::size_t>(i)] = reflect_index(i, n);
  return torch::tensor(idx, torch::kInt64);
}

std::uint32_t crc_tensor(std::uint32_t crc, const torch::Tensor& t) {
  auto c = t.contiguous();
  return static_cast<std::uint32_t>(crc32(crc, static_cast<const Bytef*>(c.data_ptr()),
                                          static_cast<uInt>(c.nbytes())));
}

}  // namespace

std::string_view to_string(Domain d) { return d == Domain::Source ? "source" : "target"; }
std::string_view to_string(Split s) { return s == Split::Train ? "train" : "test"; }

std::size_t DatasetManifest::count(Domain d, Split s) const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [&](const auto& e) {
    return e.domain == d && e.split == s;
  }));
}

std::vector<ManifestEntry> DatasetManifest::select(Domain d, Split s) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out),
               [&](const auto& e) { return e.domain == d && e.split == s; });
  return out;
}

std::string DatasetManifest::summary() const {
  std::ostringstream os;
  bool first = true;
  for (Domain d : {Domain::Source, Domain::Target}) {
    for (Split s : {Split::Train, Split::Test}) {
      os << (first ? "" : " ") << to_string(d) << '/' << to_string(s) << '=' << count(d, s);
      first = false;
    }
  }
  return os.str();
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest not found: " + path.string());
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };

  DatasetManifest manifest;
  std::set<fs::path> seen;
  std::string line;
  int row = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++row;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto cells = split_csv_row(line);
    if (!header_seen) {
      header_seen = true;
      if (cells == std::vector<std::string>{"image", "mask", "domain", "split"}) continue;
      throw DataError("manifest " + path.string() + ": expected header 'image,mask,domain,split'");
    }
    if (cells.size() != 4) {
      throw DataError("manifest row " + std::to_string(row) + ": expected 4 columns, got " +
                      std::to_string(cells.size()));
    }
    ManifestEntry e;
    e.image = resolve(cells[0]);
    if (!cells[1].empty()) e.mask = resolve(cells[1]);
    e.domain = parse_domain(cells[2], row);
    e.split = parse_split(cells[3], row);

    if (!fs::exists(e.image)) {
      throw DataError("manifest row " + std::to_string(row) + ": image not found: " + e.image.string());
    }
    if (!seen.insert(fs::weakly_canonical(e.image)).second) {
      throw DataError("manifest row " + std::to_string(row) + ": duplicate image " + e.image.string());
    }
    if (e.domain == Domain::Source && e.split == Split::Train && !e.mask) {
      throw DataError("manifest row " + std::to_string(row) + ": missing mask for labeled source/train image " +
                      e.image.string());
    }
    const auto header = read_png_header(e.image);
    if (e.mask) {
      if (!fs::exists(*e.mask)) {
        throw DataError("manifest row " + std::to_string(row) + ": mask not found: " + e.mask->string());
      }
      const auto mh = read_png_header(*e.mask);
      if (mh.height != header.height || mh.width != header.width) {
        throw DataError("manifest row " + std::to_string(row) + ": mask size differs from image");
      }
    }
    manifest.entries.push_back(std::move(e));
  }
  if (!header_seen) throw DataError("manifest " + path.string() + " is empty");
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest: " + path.string());
  const fs::path base = path.parent_path();
  auto rel = [&](const fs::path& p) {
    auto r = p.lexically_relative(base);
    return (r.empty() || r.native().starts_with("..")) ? p.string() : r.string();
  };
  out << "image,mask,domain,split\n";
  for (const auto& e : manifest.entries) {
    out << rel(e.image) << ',' << (e.mask ? rel(*e.mask) : std::string{}) << ',' << to_string(e.domain)
        << ',' << to_string(e.split) << '\n';
  }
}

torch::Tensor normalize_image(const Image8& raw) {
  if (raw.channels != 3) {
    throw DataError("normalize_image expects 3 channels (RGB), got " + std::to_string(raw.channels));
  }
  auto hwc = torch::from_blob(const_cast<std::uint8_t*>(raw.data.data()),
                              {raw.height, raw.width, 3}, torch::kUInt8);
  auto chw = hwc.permute({2, 0, 1}).to(torch::kFloat32).div(255.0f);
  return chw.sub(0.5f).div(0.5f).contiguous();
}

Image8 denormalize_image(const torch::Tensor& image) {
  auto v = image.detach().to(torch::kFloat32).mul(0.5f).add(0.5f).mul(255.0f).round().clamp(0, 255);
  auto hwc = v.to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  Image8 out(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), 3);
  std::memcpy(out.data.data(), hwc.data_ptr(), out.data.size());
  return out;
}

torch::Tensor binarize_mask(const Image8& raw) {
  if (raw.channels != 1) {
    throw DataError("masks must be single-channel, got " + std::to_string(raw.channels) + " channels");
  }
  auto m = torch::from_blob(const_cast<std::uint8_t*>(raw.data.data()), {raw.height, raw.width},
                            torch::kUInt8);
  return m.gt(0).to(torch::kInt64);
}

DomainSample load_sample(const ManifestEntry& entry, bool with_mask) {
  DomainSample s;
  s.id = entry.image.stem().string();
  s.domain = entry.domain;
  const auto raw = read_png(entry.image);
  s.image = normalize_image(raw);
  if (with_mask && entry.mask) {
    s.mask = binarize_mask(read_png(*entry.mask));
    if (s.mask.size(0) != raw.height || s.mask.size(1) != raw.width) {
      throw DataError("mask size differs from image: " + entry.mask->string());
    }
  }
  return s;
}

std::vector<DomainSample> load_samples(const DatasetManifest& manifest, Domain d, Split s,
                                       bool with_masks) {
  std::vector<DomainSample> out;
  for (const auto& e : manifest.select(d, s)) out.push_back(load_sample(e, with_masks));
  return out;
}

DomainSample pad_to_min(const DomainSample& sample, int size) {
  const int h = sample.height();
  const int w = sample.width();
  if (h >= size && w >= size) return sample;
  const auto rows = reflect_indices(h, std::max(h, size));
  const auto cols = reflect_indices(w, std::max(w, size));
  DomainSample out = sample;
  out.image = sample.image.index_select(1, rows).index_select(2, cols).contiguous();
  if (sample.labeled()) out.mask = sample.mask.index_select(0, rows).index_select(1, cols).contiguous();
  return out;
}

DomainSample random_crop_pair(const DomainSample& sample, int size, std::mt19937_64& rng) {
  const int h = sample.height();
  const int w = sample.width();
  if (h < size || w < size) {
    throw ShapeError("image " + std::to_string(h) + "x" + std::to_string(w) +
                     " is smaller than crop size " + std::to_string(size) + " (pad_to_min first)");
  }
  std::uniform_int_distribution<int> dy(0, h - size);
  std::uniform_int_distribution<int> dx(0, w - size);
  const int top = dy(rng);
  const int left = dx(rng);
  DomainSample out;
  out.id = sample.id;
  out.domain = sample.domain;
  out.crop_top = top;
  out.crop_left = left;
  out.image = sample.image.slice(1, top, top + size).slice(2, left, left + size).contiguous();
  if (sample.labeled()) {
    out.mask = sample.mask.slice(0, top, top + size).slice(1, left, left + size).contiguous();
  }
  return out;
}

std::uint32_t DomainBatch::hash() const {
  std::uint32_t crc = crc_tensor(0, images);
  if (masks.defined()) crc = crc_tensor(crc, masks);
  return crc;
}

DomainBatch stack_batch(const std::vector<DomainSample>& crops, Domain domain, bool with_masks) {
  std::vector<torch::Tensor> images;
  std::vector<torch::Tensor> masks;
  for (const auto& c : crops) {
    images.push_back(c.image);
    if (with_masks) {
      if (!c.labeled()) throw DataError("labeled batch requested but sample '" + c.id + "' has no mask");
      masks.push_back(c.mask);
    }
  }
  DomainBatch b;
  b.domain = domain;
  b.images = torch::stack(images);
  if (with_masks) b.masks = torch::stack(masks);
  return b;
}

PairedBatchIterator::Cycle::Cycle(std::vector<std::size_t> pool, std::mt19937_64& rng)
    : order_(std::move(pool)) {
  std::shuffle(order_.begin(), order_.end(), rng);
}

std::size_t PairedBatchIterator::Cycle::next(std::mt19937_64& rng) {
  if (pos_ == order_.size()) {
    std::shuffle(order_.begin(), order_.end(), rng);
    pos_ = 0;
  }
  return order_[pos_++];
}

namespace {

std::vector<std::size_t> repeated_pool(std::size_t n, int repeats) {
  std::vector<std::size_t> pool;
  pool.reserve(n * static_cast<std::size_t>(repeats));
  for (int r = 0; r < repeats; ++r) {
    for (std::size_t i = 0; i < n; ++i) pool.push_back(i);
  }
  return pool;
}

const std::vector<DomainSample>& require_nonempty(const std::vector<DomainSample>& v, const char* what) {
  if (v.empty()) throw DataError(std::string("empty ") + what + " train split");
  return v;
}

}  // namespace

PairedBatchIterator::PairedBatchIterator(const std::vector<DomainSample>& source,
                                         const std::vector<DomainSample>& target,
                                         const ExperimentConfig& cfg, std::mt19937_64& rng)
    : source_(require_nonempty(source, "source")),
      target_(require_nonempty(target, "target")),
      cfg_(cfg),
      rng_(rng),
      source_cycle_(repeated_pool(source.size(), cfg.crops_per_image), rng),
      target_cycle_(repeated_pool(target.size(), 1), rng),
      steps_(steps_per_epoch(source.size(), cfg)) {}

std::size_t PairedBatchIterator::steps_per_epoch(std::size_t source_count, const ExperimentConfig& cfg) {
  const std::size_t crops = source_count * static_cast<std::size_t>(cfg.crops_per_image);
  const auto b = static_cast<std::size_t>(cfg.batch_size);
  return (crops + b - 1) / b;
}

DomainSample PairedBatchIterator::draw(const DomainSample& sample) {
  auto crop = random_crop_pair(pad_to_min(sample, cfg_.crop_size), cfg_.crop_size, rng_);
  if (cfg_.hflip && std::bernoulli_distribution(0.5)(rng_)) {
    crop.image = crop.image.flip({2}).contiguous();
    if (crop.labeled()) crop.mask = crop.mask.flip({1}).contiguous();
  }
  return crop;
}

std::optional<std::pair<DomainBatch, DomainBatch>> PairedBatchIterator::next() {
  if (step_ >= steps_) return std::nullopt;
  ++step_;
  std::vector<DomainSample> src;
  std::vector<DomainSample> tgt;
  for (int i = 0; i < cfg_.batch_size; ++i) src.push_back(draw(source_[source_cycle_.next(rng_)]));
  for (int i = 0; i < cfg_.batch_size; ++i) {
    auto crop = draw(target_[target_cycle_.next(rng_)]);
    crop.mask = torch::Tensor();  // target labels never reach training
    tgt.push_back(std::move(crop));
  }
  return std::make_pair(stack_batch(src, Domain::Source, true), stack_batch(tgt, Domain::Target, false));
}

}  // namespace dapnet
