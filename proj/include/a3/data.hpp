#pragma once

// Synthetic glyph domains with a controllable target shift, the two-view
// augmentation used by the self-supervised objective, and bundle files.

#include "a3/tensor.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace a3 {

struct DomainShift {
  double intensity_scale = 0.7;
  double noise_sigma = 0.15;
  int translation_px = 0;
  double contrast_gamma = 1.0;

  static DomainShift none() { return {1.0, 0.0, 0, 1.0}; }
  void validate() const;
};

struct DomainSpec {
  Index n_classes = 10;
  Index samples_per_class = 100;
  Index image_side = 16;
  DomainShift shift;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static DomainSpec from_json(std::string_view text);
};

/// Unlabeled square images, one per row (row-major side x side, values in [0,1]).
struct ImageSet {
  RowMatrix x;
  Index side = 0;

  Index size() const { return x.rows(); }
  ImageSet subset(const std::vector<Index>& rows) const;
};

/// Everything a generator produces. Training entry points take ImageSet only;
/// target_y_eval is read by the evaluator alone.
struct DatasetBundle {
  ImageSet source;
  std::vector<int> source_y;
  ImageSet target;
  std::vector<int> target_y_eval;
  DomainSpec spec;
};

DatasetBundle generate_domain_pair(const DomainSpec& spec);

/// Applies the target-domain transform (translate, scale, gamma, noise, clamp).
RowMatrix apply_shift(const RowMatrix& images, Index side, const DomainShift& shift, std::uint64_t seed);

struct AugmentConfig {
  bool crop = true;
  bool flip = true;
  bool noise = true;
  bool intensity = true;
  double crop_min = 0.7;
  double noise_sigma = 0.05;
  double intensity_lo = 0.8;
  double intensity_hi = 1.2;

  static AugmentConfig disabled() { return {false, false, false, false}; }
};

struct ViewPair {
  RowMatrix a;
  RowMatrix b;
};

RowMatrix augment_view(const RowMatrix& x, Index side, std::uint64_t seed, const AugmentConfig& cfg = {});
ViewPair augment_two_views(const RowMatrix& x, Index side, std::uint64_t seed, const AugmentConfig& cfg = {});

inline constexpr std::string_view kBundleMagic = "A3DATA1";

/// "A3DATA1", tensor container, then u32 length and the JSON spec sidecar.
std::string encode_bundle(const DatasetBundle& bundle);
DatasetBundle decode_bundle(std::string_view bytes);
void save_bundle(const std::string& path, const DatasetBundle& bundle);
DatasetBundle load_bundle(const std::string& path);

}  // namespace a3
