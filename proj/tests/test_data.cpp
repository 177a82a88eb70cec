#include "a3/data.hpp"
#include "a3/errors.hpp"
#include "a3/pipeline.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace a3;

namespace {

DomainSpec small_spec(std::uint64_t seed) {
  DomainSpec s;
  s.n_classes = 4;
  s.samples_per_class = 10;
  s.seed = seed;
  return s;
}

// Raw-pixel probe fit on source, scored on target.
double pixel_probe_target_acc(const DatasetBundle& b) {
  const LinearProbe probe(b.source.x, b.source_y, static_cast<int>(b.spec.n_classes), ProbeConfig{});
  return probe.accuracy(b.target.x, b.target_y_eval);
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("a3_test_data_" + name)).string();
}

}  // namespace

TEST(Generate, ShapesForTinySpec) {
  DomainSpec s;
  s.n_classes = 2;
  s.samples_per_class = 1;
  const DatasetBundle b = generate_domain_pair(s);
  EXPECT_EQ(b.source.x.rows(), 2);
  EXPECT_EQ(b.source.x.cols(), 256);
  EXPECT_EQ(b.source_y.size(), 2u);
  EXPECT_EQ(b.target.x.rows(), 2);
  EXPECT_EQ(b.target.x.cols(), 256);
  EXPECT_EQ(b.target_y_eval.size(), 2u);
  EXPECT_EQ(b.source.side, 16);
}

TEST(Generate, LabelsBalancedAndPixelsInRange) {
  const DatasetBundle b = generate_domain_pair(small_spec(3));
  std::vector<int> counts(4, 0);
  for (int y : b.source_y) ++counts[static_cast<std::size_t>(y)];
  for (int c : counts) EXPECT_EQ(c, 10);
  for (const RowMatrix* x : {&b.source.x, &b.target.x}) {
    EXPECT_TRUE(x->allFinite());
    EXPECT_GE(x->minCoeff(), 0.0);
    EXPECT_LE(x->maxCoeff(), 1.0);
  }
}

TEST(Generate, SeedDeterminesBytes) {
  EXPECT_EQ(encode_bundle(generate_domain_pair(small_spec(9))), encode_bundle(generate_domain_pair(small_spec(9))));
  EXPECT_NE(encode_bundle(generate_domain_pair(small_spec(9))), encode_bundle(generate_domain_pair(small_spec(10))));
}

TEST(Generate, ZeroShiftProbeTransfers) {
  DomainSpec s;
  s.shift = DomainShift::none();
  const DatasetBundle b = generate_domain_pair(s);
  EXPECT_GE(pixel_probe_target_acc(b), 0.95);
}

TEST(Generate, NoiseMonotonicallyHurtsTransfer) {
  const std::vector<double> sigmas{0.0, 0.05, 0.1, 0.15, 0.2};
  std::vector<double> mean_acc;
  for (double sigma : sigmas) {
    double acc = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      DomainSpec s;
      s.samples_per_class = 40;
      s.shift.noise_sigma = sigma;
      s.seed = seed;
      acc += pixel_probe_target_acc(generate_domain_pair(s)) / 5.0;
    }
    mean_acc.push_back(acc);
  }
  int inversions = 0;
  for (std::size_t i = 1; i < mean_acc.size(); ++i) inversions += mean_acc[i] > mean_acc[i - 1] ? 1 : 0;
  EXPECT_LE(inversions, 1);
  EXPECT_GT(mean_acc.front(), mean_acc.back());
}

TEST(Generate, RejectsBadSpec) {
  DomainSpec s;
  s.image_side = 4;
  EXPECT_THROW(generate_domain_pair(s), ConfigError);
  s = DomainSpec{};
  s.shift.noise_sigma = -1.0;
  EXPECT_THROW(generate_domain_pair(s), ConfigError);
}

TEST(Shift, NoneIsIdentity) {
  const DatasetBundle b = generate_domain_pair(small_spec(1));
  const RowMatrix out = apply_shift(b.source.x, 16, DomainShift::none(), 5);
  EXPECT_EQ(out, b.source.x);
}

TEST(Augment, DisabledIsIdentity) {
  const DatasetBundle b = generate_domain_pair(small_spec(2));
  const ViewPair v = augment_two_views(b.source.x, 16, 11, AugmentConfig::disabled());
  EXPECT_EQ(v.a, b.source.x);
  EXPECT_EQ(v.b, b.source.x);
}

TEST(Augment, ClampedFiniteReproducibleAndDistinct) {
  const DatasetBundle b = generate_domain_pair(small_spec(2));
  const ViewPair v1 = augment_two_views(b.target.x, 16, 77);
  const ViewPair v2 = augment_two_views(b.target.x, 16, 77);
  EXPECT_EQ(v1.a, v2.a);
  EXPECT_EQ(v1.b, v2.b);
  EXPECT_NE(v1.a, v1.b);
  for (const RowMatrix* x : {&v1.a, &v1.b}) {
    EXPECT_TRUE(x->allFinite());
    EXPECT_GE(x->minCoeff(), 0.0);
    EXPECT_LE(x->maxCoeff(), 1.0);
  }
}

TEST(BundleIo, RoundTripIsBitwise) {
  DatasetBundle b = generate_domain_pair(small_spec(4));
  b.spec.shift.translation_px = 2;
  b.spec.shift.contrast_gamma = 1.25;
  const std::string path = temp_path("roundtrip.bin");
  save_bundle(path, b);
  const DatasetBundle back = load_bundle(path);
  EXPECT_EQ(back.source.x, b.source.x);
  EXPECT_EQ(back.target.x, b.target.x);
  EXPECT_EQ(back.source_y, b.source_y);
  EXPECT_EQ(back.target_y_eval, b.target_y_eval);
  EXPECT_EQ(back.spec.to_json(), b.spec.to_json());
  EXPECT_EQ(back.spec.shift.translation_px, 2);
  EXPECT_EQ(back.spec.shift.contrast_gamma, 1.25);
  EXPECT_EQ(encode_bundle(back), encode_bundle(b));
  std::filesystem::remove(path);
}

TEST(BundleIo, SidecarRoundTripsEveryField) {
  DomainSpec s;
  s.n_classes = 7;
  s.samples_per_class = 13;
  s.image_side = 12;
  s.shift = {0.55, 0.07, 1, 0.8};
  s.seed = 123456789012345ull;
  const DomainSpec back = DomainSpec::from_json(s.to_json());
  EXPECT_EQ(back.n_classes, 7);
  EXPECT_EQ(back.samples_per_class, 13);
  EXPECT_EQ(back.image_side, 12);
  EXPECT_EQ(back.shift.intensity_scale, 0.55);
  EXPECT_EQ(back.shift.noise_sigma, 0.07);
  EXPECT_EQ(back.shift.translation_px, 1);
  EXPECT_EQ(back.shift.contrast_gamma, 0.8);
  EXPECT_EQ(back.seed, 123456789012345ull);
  EXPECT_THROW(DomainSpec::from_json("{not json"), FormatError);
}

TEST(BundleIo, TruncationAndBadMagicAreFormatErrors) {
  const std::string bytes = encode_bundle(generate_domain_pair(small_spec(5)));
  for (std::size_t cut : {std::size_t{3}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(decode_bundle(std::string_view(bytes).substr(0, cut)), FormatError) << "cut at " << cut;
  }
  std::string bad = bytes;
  bad[0] = 'X';
  try {
    decode_bundle(bad);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  EXPECT_THROW(decode_bundle(bytes + "extra"), FormatError);
}

TEST(BundleIo, MissingFileIsIoError) { EXPECT_THROW(load_bundle(temp_path("does_not_exist.bin")), IoError); }
