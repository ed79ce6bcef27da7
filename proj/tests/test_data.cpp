#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include <gtest/gtest.h>

#include "poisonbench/data.hpp"
#include "poisonbench/error.hpp"

using namespace pb;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "poisonbench_tests";
  fs::create_directories(dir);
  return dir / name;
}

void write_records(const fs::path& path, const std::vector<std::vector<std::uint8_t>>& records) {
  std::ofstream out(path, std::ios::binary);
  for (const auto& r : records) out.write(reinterpret_cast<const char*>(r.data()), static_cast<std::streamsize>(r.size()));
}

std::vector<std::uint8_t> record(std::uint8_t label, std::uint8_t fill) {
  std::vector<std::uint8_t> r(kCifarRecordBytes, fill);
  r[0] = label;
  return r;
}

SynthDataset small_synth(std::uint64_t seed = 5) {
  SynthConfig c;
  c.seed = seed;
  c.per_class = 20;
  c.test_per_class = 5;
  return synth_generate(c);
}

}  // namespace

TEST(CifarLoader, ZeroRecordKeepsLabel) {
  const auto path = temp_path("zeros.bin");
  write_records(path, {record(3, 0)});
  const auto split = load_cifar_binary(path);
  ASSERT_EQ(split.size(), 1u);
  EXPECT_EQ(split.labels[0], 3);
  EXPECT_EQ(split.images.shape(), (Shape{1, 3, 32, 32}));
  for (float v : split.images.data()) EXPECT_EQ(v, 0.0f);
}

TEST(CifarLoader, LoadsEveryRecordAndScalesEndpoint) {
  const auto path = temp_path("three.bin");
  write_records(path, {record(0, 255), record(9, 128), record(4, 1)});
  const auto split = load_cifar_binary(path);
  ASSERT_EQ(split.size(), 3u);
  EXPECT_EQ(split.labels, (std::vector<int>{0, 9, 4}));
  EXPECT_EQ(split.images[0], 1.0f);
  EXPECT_FLOAT_EQ(split.images[3 * 1024 + 5], 128.0f / 255.0f);
  EXPECT_EQ(split.ids, (std::vector<std::uint64_t>{0, 1, 2}));
}

TEST(CifarLoader, ChannelPlanesAreRowMajor) {
  auto r = record(1, 0);
  r[1 + 1024 + 32 * 2 + 7] = 255;  // green plane, row 2, column 7
  const auto path = temp_path("plane.bin");
  write_records(path, {r});
  const auto split = load_cifar_binary(path);
  EXPECT_EQ(split.images[1 * 1024 + 2 * 32 + 7], 1.0f);
}

TEST(CifarLoader, RejectsTruncatedFileAndBadLabel) {
  const auto path = temp_path("bad.bin");
  {
    std::ofstream out(path, std::ios::binary);
    std::vector<char> bytes(kCifarRecordBytes + 10, 0);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  EXPECT_THROW(load_cifar_binary(path), DataError);
  write_records(path, {record(12, 0)});
  EXPECT_THROW(load_cifar_binary(path), DataError);
  EXPECT_ANY_THROW(load_cifar_binary(temp_path("missing.bin")));
}

TEST(Records, RoundTripThroughDisk) {
  const auto data = small_synth().train;
  const auto path = temp_path("synth.bin");
  save_records(path, data);
  const auto back = load_records(path, {3, 16, 16, 10});
  ASSERT_EQ(back.size(), data.size());
  EXPECT_EQ(back.labels, data.labels);
  // Synthetic pixels already sit on the 1/255 grid.
  EXPECT_TRUE(bitwise_equal(back.images, data.images));
}

TEST(Synth, SameSeedSameBytes) {
  const auto a = small_synth(9), b = small_synth(9), c = small_synth(10);
  EXPECT_TRUE(bitwise_equal(a.train.images, b.train.images));
  EXPECT_EQ(a.train.labels, b.train.labels);
  EXPECT_FALSE(bitwise_equal(a.train.images, c.train.images));
}

TEST(Synth, SizesAndRange) {
  SynthConfig c;
  const auto d = synth_generate(c);
  EXPECT_EQ(d.train.size(), 2500u);
  EXPECT_EQ(d.test.size(), 1000u);
  for (int k = 0; k < 10; ++k) EXPECT_EQ(d.train.indices_of_class(k).size(), 250u);
  for (float v : d.train.images.data()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
  d.train.validate();
}

TEST(Synth, LargerPerClassExtendsSmaller) {
  SynthConfig c;
  c.per_class = 10;
  const auto small = synth_generate(c);
  c.per_class = 30;
  const auto large = synth_generate(c).train.first_per_class(10);
  EXPECT_TRUE(bitwise_equal(small.train.images, large.images));
}

TEST(Split, FirstPerClassKeepsDatasetOrder) {
  const auto d = small_synth().train;
  const auto sub = d.first_per_class(3);
  ASSERT_EQ(sub.size(), 30u);
  for (int k = 0; k < 10; ++k) {
    const auto idx = d.indices_of_class(k);
    const auto sidx = sub.indices_of_class(k);
    ASSERT_EQ(sidx.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(sub.ids[sidx[i]], d.ids[idx[i]]);
  }
}

TEST(Augment, DisabledPolicyOnlyNormalizes) {
  const auto d = small_synth().train;
  const auto stats = compute_channel_stats(d);
  Rng rng(1);
  const auto batch = d.images.slice0(0, 4);
  const auto out = augment_batch(batch, AugmentationPolicy::normalize_only(stats), rng);
  EXPECT_TRUE(bitwise_equal(out, normalize(batch, stats)));
}

TEST(Augment, FlipIsInvolution) {
  const auto batch = small_synth().train.images.slice0(0, 3);
  EXPECT_TRUE(bitwise_equal(hflip(hflip(batch)), batch));
  EXPECT_FALSE(bitwise_equal(hflip(batch), batch));
}

TEST(Augment, CropOffsetsAreUniform) {
  // 81 cells, 10^4 draws; reject at p = 0.001 (chi-square, 80 dof).
  constexpr double kCritical = 124.83922401576478;
  Rng rng(2024);
  std::array<std::size_t, 81> counts{};
  const std::size_t draws = 10000;
  for (std::size_t i = 0; i < draws; ++i) {
    const auto o = draw_crop_offset(4, rng);
    ASSERT_LE(o.dy, 8u);
    ASSERT_LE(o.dx, 8u);
    counts[o.dy * 9 + o.dx] += 1;
  }
  const double expected = static_cast<double>(draws) / 81.0;
  double chi2 = 0.0;
  for (auto c : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, kCritical);
}

TEST(Augment, CenteredCropIsIdentity) {
  const auto img = small_synth().train.image(0);
  Tensor<float> out(img.shape());
  crop_padded(img.ptr(), 3, 16, 16, 4, {4, 4}, out.ptr());
  EXPECT_TRUE(bitwise_equal(out, img));
  // Shifting by the full pad exposes zero padding on one edge.
  crop_padded(img.ptr(), 3, 16, 16, 4, {0, 0}, out.ptr());
  EXPECT_EQ(out[0], 0.0f);
  EXPECT_EQ(out[4 * 16 + 4], img[0]);
}

TEST(Assemble, EmptyPoisonSetIsIdentity) {
  const auto d = small_synth().train;
  PoisonSet none;
  const auto out = assemble_poisoned_trainset(d, none);
  EXPECT_TRUE(bitwise_equal(out.images, d.images));
  EXPECT_EQ(out.labels, d.labels);
}

TEST(Assemble, ReplacesExactlyTheBudget) {
  SynthConfig c;
  const auto d = synth_generate(c).train;
  const int base_class = 6;
  const auto idx = d.indices_of_class(base_class);
  PoisonSet set;
  set.label = base_class;
  std::vector<std::size_t> chosen(idx.begin(), idx.begin() + 25);
  set.poisons = d.gather(chosen);
  for (auto& v : set.poisons.data()) v = 1.0f - v;
  for (auto i : chosen) set.base_ids.push_back(d.ids[i]);
  const auto out = assemble_poisoned_trainset(d, set);
  ASSERT_EQ(out.size(), 2500u);
  std::size_t differing = 0;
  const std::size_t m = d.image_numel();
  for (std::size_t i = 0; i < d.size(); ++i) {
    bool differs = false;
    for (std::size_t p = 0; p < m && !differs; ++p) differs = out.images[i * m + p] != d.images[i * m + p];
    differing += differs ? 1 : 0;
  }
  EXPECT_EQ(differing, 25u);
  EXPECT_EQ(out.labels, d.labels);
  for (auto i : chosen) EXPECT_EQ(out.labels[i], base_class);
}

TEST(Assemble, RejectsUnknownIdAndWrongLabel) {
  const auto d = small_synth().train;
  PoisonSet set;
  set.label = d.labels[0];
  set.poisons = d.image(0);
  set.base_ids = {999999};
  EXPECT_ANY_THROW(assemble_poisoned_trainset(d, set));
  set.base_ids = {d.ids[0]};
  set.label = (d.labels[0] + 1) % 10;
  EXPECT_ANY_THROW(assemble_poisoned_trainset(d, set));
}

TEST(ChannelStats, MatchesDirectComputation) {
  const auto d = small_synth().train;
  const auto s = compute_channel_stats(d);
  const std::size_t plane = 16 * 16;
  for (std::size_t c = 0; c < 3; ++c) {
    double sum = 0.0, sq = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < d.size(); ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = d.images[(i * 3 + c) * plane + p];
        sum += v;
        sq += v * v;
        ++n;
      }
    const double mean = sum / n;
    EXPECT_NEAR(s.mean[c], mean, 1e-5);
    EXPECT_NEAR(s.stddev[c], std::sqrt(sq / n - mean * mean), 1e-4);
  }
}
