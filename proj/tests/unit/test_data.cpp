#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "dapnet/data.hpp"
#include "dapnet/errors.hpp"
#include "dapnet/image_io.hpp"
#include "test_util.hpp"

using namespace dapnet;
namespace fs = std::filesystem;

namespace {

Image8 gradient_rgb(int h, int w) {
  Image8 img(h, w, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<std::uint8_t>((y * 7 + x * 3 + c * 50) % 256);
  return img;
}

Image8 stripes_mask(int h, int w) {
  Image8 m(h, w, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.at(y, x, 0) = ((x / 5 + y / 3) % 2) ? 255 : 0;
  return m;
}

// Writes n image/mask pairs and returns manifest rows for them.
std::string write_rows(const fs::path& dir, const std::string& prefix, int n, const std::string& domain,
                       const std::string& split, bool with_mask) {
  std::string rows;
  for (int i = 0; i < n; ++i) {
    const auto img = prefix + std::to_string(i) + ".png";
    const auto mask = prefix + std::to_string(i) + "_mask.png";
    write_png(gradient_rgb(16, 20), dir / img);
    write_png(stripes_mask(16, 20), dir / mask);
    rows += img + "," + (with_mask ? mask : "") + "," + domain + "," + split + "\n";
  }
  return rows;
}

DomainSample labeled_sample(int h, int w) {
  DomainSample s;
  s.id = "s";
  s.image = torch::rand({3, h, w}) * 2 - 1;
  s.mask = torch::randint(0, 2, {h, w}, torch::kInt64);
  return s;
}

}  // namespace

TEST(Manifest, WarwickLayoutCounts) {
  test::TempDir dir("manifest");
  std::ofstream(dir / "m.csv") << "image,mask,domain,split\n"
                               << write_rows(dir.path(), "train_", 85, "source", "train", true)
                               << write_rows(dir.path(), "test_", 80, "source", "test", true);
  const auto m = load_manifest(dir / "m.csv");
  EXPECT_EQ(m.count(Domain::Source, Split::Train), 85u);
  EXPECT_EQ(m.count(Domain::Source, Split::Test), 80u);
  EXPECT_EQ(m.summary(), "source/train=85 source/test=80 target/train=0 target/test=0");
}

TEST(Manifest, GlandVisionLayoutCounts) {
  test::TempDir dir("manifest");
  std::ofstream(dir / "m.csv") << "image,mask,domain,split\n"
                               << write_rows(dir.path(), "tr_", 14, "target", "train", false)
                               << write_rows(dir.path(), "te_", 6, "target", "test", true);
  const auto m = load_manifest(dir / "m.csv");
  EXPECT_EQ(m.count(Domain::Target, Split::Train), 14u);
  EXPECT_EQ(m.count(Domain::Target, Split::Test), 6u);
}

TEST(Manifest, UnknownDomainTag) {
  test::TempDir dir("manifest");
  std::ofstream(dir / "m.csv") << "image,mask,domain,split\n" << write_rows(dir.path(), "a", 1, "src", "train", true);
  try {
    load_manifest(dir / "m.csv");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("unknown domain tag"), std::string::npos) << e.what();
  }
}

TEST(Manifest, ValidationErrors) {
  test::TempDir dir("manifest");
  const auto rows = write_rows(dir.path(), "a", 2, "source", "train", true);
  EXPECT_THROW(load_manifest(dir / "absent.csv"), DataError);

  std::ofstream(dir / "nomask.csv") << "image,mask,domain,split\na0.png,,source,train\n";
  EXPECT_THROW(load_manifest(dir / "nomask.csv"), DataError);

  std::ofstream(dir / "dup.csv") << "image,mask,domain,split\n" << rows << "a0.png,a0_mask.png,source,test\n";
  EXPECT_THROW(load_manifest(dir / "dup.csv"), DataError);

  std::ofstream(dir / "missing.csv") << "image,mask,domain,split\nnope.png,,target,train\n";
  EXPECT_THROW(load_manifest(dir / "missing.csv"), DataError);

  std::ofstream(dir / "junk.png") << "not a png";
  std::ofstream(dir / "badheader.csv") << "image,mask,domain,split\njunk.png,,target,train\n";
  EXPECT_THROW(load_manifest(dir / "badheader.csv"), DataError);

  std::ofstream(dir / "noheader.csv") << rows;
  EXPECT_THROW(load_manifest(dir / "noheader.csv"), DataError);
}

TEST(Manifest, SaveLoadRoundTrip) {
  test::TempDir dir("manifest");
  std::ofstream(dir / "m.csv") << "image,mask,domain,split\n"
                               << write_rows(dir.path(), "s", 3, "source", "train", true)
                               << write_rows(dir.path(), "t", 2, "target", "train", false);
  const auto m = load_manifest(dir / "m.csv");
  save_manifest(m, dir / "copy.csv");
  const auto back = load_manifest(dir / "copy.csv");
  ASSERT_EQ(back.entries.size(), m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    EXPECT_EQ(back.entries[i].image, m.entries[i].image);
    EXPECT_EQ(back.entries[i].mask, m.entries[i].mask);
    EXPECT_EQ(back.entries[i].domain, m.entries[i].domain);
  }
}

TEST(Normalize, Examples) {
  Image8 px(1, 2, 3);
  px.at(0, 0, 0) = px.at(0, 0, 1) = px.at(0, 0, 2) = 255;
  px.at(0, 1, 0) = 128;
  px.at(0, 1, 1) = 0;
  px.at(0, 1, 2) = 128;
  const auto t = normalize_image(px);
  ASSERT_EQ(t.sizes(), (std::vector<std::int64_t>{3, 1, 2}));
  for (int c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(t[c][0][0].item<float>(), 1.0f);
  EXPECT_NEAR(t[0][0][1].item<float>(), (128.0 / 255.0 - 0.5) / 0.5, 1e-6);
  EXPECT_NEAR(t[0][0][1].item<float>(), 0.0039, 1e-4);
  EXPECT_FLOAT_EQ(t[1][0][1].item<float>(), -1.0f);
  EXPECT_NEAR(t[2][0][1].item<float>(), 0.0039, 1e-4);
  EXPECT_THROW(normalize_image(Image8(4, 4, 1)), DataError);
}

TEST(Normalize, InvertibleOnEveryLevel) {
  Image8 all(16, 16, 3);
  for (int i = 0; i < 256; ++i)
    for (int c = 0; c < 3; ++c) all.at(i / 16, i % 16, c) = static_cast<std::uint8_t>((i + 85 * c) % 256);
  EXPECT_EQ(denormalize_image(normalize_image(all)), all);
}

TEST(Mask, BinarizedAboveZero) {
  Image8 m(1, 4, 1);
  m.data = {0, 1, 128, 255};
  const auto t = binarize_mask(m);
  EXPECT_TRUE(torch::equal(t, torch::tensor({{0, 1, 1, 1}}, torch::kInt64)));
  EXPECT_THROW(binarize_mask(Image8(2, 2, 3)), DataError);
}

TEST(Crop, FixedRngIsDeterministicAndAligned) {
  torch::manual_seed(1);
  const auto s = labeled_sample(512, 512);
  std::mt19937_64 a(99), b(99);
  const auto ca = random_crop_pair(s, 256, a);
  const auto cb = random_crop_pair(s, 256, b);
  EXPECT_EQ(ca.crop_top, cb.crop_top);
  EXPECT_EQ(ca.crop_left, cb.crop_left);
  EXPECT_TRUE(torch::equal(ca.image, cb.image));
  EXPECT_EQ(ca.image.sizes(), (std::vector<std::int64_t>{3, 256, 256}));
  EXPECT_TRUE(torch::equal(
      ca.mask, s.mask.slice(0, ca.crop_top, ca.crop_top + 256).slice(1, ca.crop_left, ca.crop_left + 256)));
}

TEST(Crop, ExactSizeIsIdentity) {
  const auto s = labeled_sample(256, 256);
  std::mt19937_64 rng(3);
  const auto c = random_crop_pair(s, 256, rng);
  EXPECT_EQ(c.crop_top, 0);
  EXPECT_EQ(c.crop_left, 0);
  EXPECT_TRUE(torch::equal(c.image, s.image));
  EXPECT_TRUE(torch::equal(c.mask, s.mask));
}

TEST(Crop, TooSmallIsError) {
  const auto s = labeled_sample(200, 300);
  std::mt19937_64 rng(3);
  EXPECT_THROW(random_crop_pair(s, 256, rng), ShapeError);
}

TEST(Crop, AlignmentPropertyOverManyDraws) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const int h = 8 + static_cast<int>(rng() % 40);
    const int w = 8 + static_cast<int>(rng() % 40);
    const int size = 8 + static_cast<int>(rng() % std::min(h - 7, w - 7));
    const auto s = labeled_sample(h, w);
    const auto c = random_crop_pair(s, size, rng);
    ASSERT_GE(c.crop_top, 0);
    ASSERT_LE(c.crop_top, h - size);
    ASSERT_LE(c.crop_left, w - size);
    EXPECT_TRUE(torch::equal(c.mask, s.mask.slice(0, c.crop_top, c.crop_top + size)
                                         .slice(1, c.crop_left, c.crop_left + size)));
    EXPECT_TRUE(torch::equal(c.image, s.image.slice(1, c.crop_top, c.crop_top + size)
                                          .slice(2, c.crop_left, c.crop_left + size)));
  }
}

TEST(Crop, OffsetsCoverWholeRange) {
  const auto s = labeled_sample(20, 20);
  std::mt19937_64 rng(8);
  std::set<int> tops;
  for (int i = 0; i < 500; ++i) tops.insert(random_crop_pair(s, 16, rng).crop_top);
  EXPECT_EQ(tops, (std::set<int>{0, 1, 2, 3, 4}));
}

TEST(Pad, ReflectsWithoutRepeatingEdge) {
  DomainSample s;
  s.image = torch::arange(3, torch::kFloat32).view({1, 1, 3}).expand({3, 1, 3}).contiguous();
  s.mask = torch::tensor({{0, 1, 1}}, torch::kInt64);
  const auto p = pad_to_min(s, 8);
  EXPECT_EQ(p.image.sizes(), (std::vector<std::int64_t>{3, 8, 8}));
  // Columns 0 1 2 1 0 1 2 1.
  EXPECT_TRUE(torch::equal(p.image[0][0], torch::tensor({0.f, 1.f, 2.f, 1.f, 0.f, 1.f, 2.f, 1.f})));
  EXPECT_TRUE(torch::equal(p.mask[5], torch::tensor({0, 1, 1, 1, 0, 1, 1, 1}, torch::kInt64)));
  // Large enough already: unchanged.
  const auto big = labeled_sample(10, 12);
  EXPECT_TRUE(torch::equal(pad_to_min(big, 8).image, big.image));
}

namespace {

std::vector<DomainSample> pool(int n, int size, bool labeled, float tag) {
  std::vector<DomainSample> out;
  for (int i = 0; i < n; ++i) {
    DomainSample s;
    s.id = std::to_string(i);
    s.image = torch::full({3, size, size}, tag + static_cast<float>(i));
    if (labeled) s.mask = torch::zeros({size, size}, torch::kInt64);
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST(PairedIterator, StepsPerEpochArithmetic) {
  ExperimentConfig cfg;
  cfg.crops_per_image = 4;
  cfg.batch_size = 4;
  EXPECT_EQ(PairedBatchIterator::steps_per_epoch(85, cfg), 85u);
  cfg.crops_per_image = 1;
  EXPECT_EQ(PairedBatchIterator::steps_per_epoch(85, cfg), 22u);
}

TEST(PairedIterator, TargetRecyclesAndBatchesAreFull) {
  ExperimentConfig cfg;
  cfg.crop_size = 8;
  cfg.batch_size = 4;
  cfg.crops_per_image = 4;
  const auto src = pool(85, 8, true, 0.f);
  const auto tgt = pool(14, 8, true, 1000.f);
  std::mt19937_64 rng(0);
  PairedBatchIterator it(src, tgt, cfg, rng);
  EXPECT_EQ(it.steps(), 85u);
  std::map<int, int> target_uses;
  std::map<int, int> source_uses;
  std::size_t steps = 0;
  while (auto pair = it.next()) {
    ++steps;
    const auto& [s, t] = *pair;
    ASSERT_EQ(s.size(), 4);
    ASSERT_EQ(t.size(), 4);
    EXPECT_TRUE(s.masks.defined());
    EXPECT_FALSE(t.masks.defined());
    for (int i = 0; i < 4; ++i) {
      ++source_uses[static_cast<int>(s.images[i][0][0][0].item<float>())];
      ++target_uses[static_cast<int>(t.images[i][0][0][0].item<float>()) - 1000];
    }
  }
  EXPECT_EQ(steps, 85u);
  // 340 source crops: every image exactly crops_per_image times.
  ASSERT_EQ(source_uses.size(), 85u);
  for (const auto& [id, n] : source_uses) EXPECT_EQ(n, 4) << id;
  // 340 target crops from 14 images: full reshuffled cycles, so counts differ by at most one.
  ASSERT_EQ(target_uses.size(), 14u);
  for (const auto& [id, n] : target_uses) {
    EXPECT_GE(n, 340 / 14);
    EXPECT_LE(n, 340 / 14 + 1);
  }
}

TEST(PairedIterator, FixedSeedGivesIdenticalSequence) {
  ExperimentConfig cfg;
  cfg.crop_size = 16;
  cfg.batch_size = 3;
  cfg.crops_per_image = 2;
  torch::manual_seed(4);
  std::vector<DomainSample> src;
  std::vector<DomainSample> tgt;
  for (int i = 0; i < 7; ++i) src.push_back(labeled_sample(24, 20));
  for (int i = 0; i < 3; ++i) tgt.push_back(labeled_sample(30, 30));
  auto sequence = [&](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    PairedBatchIterator it(src, tgt, cfg, rng);
    std::vector<std::uint32_t> hashes;
    while (auto p = it.next()) {
      hashes.push_back(p->first.hash());
      hashes.push_back(p->second.hash());
    }
    return hashes;
  };
  EXPECT_EQ(sequence(5), sequence(5));
  EXPECT_NE(sequence(5), sequence(6));
}

TEST(PairedIterator, EmptySplitIsError) {
  ExperimentConfig cfg;
  std::mt19937_64 rng(0);
  const auto src = pool(2, 8, true, 0.f);
  const std::vector<DomainSample> none;
  EXPECT_THROW(PairedBatchIterator(src, none, cfg, rng), DataError);
  EXPECT_THROW(PairedBatchIterator(none, src, cfg, rng), DataError);
}

TEST(PairedIterator, SmallImagesArePaddedBeforeCropping) {
  ExperimentConfig cfg;
  cfg.crop_size = 32;
  cfg.batch_size = 2;
  cfg.crops_per_image = 1;
  const auto src = pool(2, 20, true, 0.f);
  const auto tgt = pool(2, 20, false, 5.f);
  std::mt19937_64 rng(0);
  PairedBatchIterator it(src, tgt, cfg, rng);
  auto p = it.next();
  ASSERT_TRUE(p);
  EXPECT_EQ(p->first.images.sizes(), (std::vector<std::int64_t>{2, 3, 32, 32}));
  EXPECT_EQ(p->second.images.sizes(), (std::vector<std::int64_t>{2, 3, 32, 32}));
}
