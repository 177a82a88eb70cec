#include "a3/data.hpp"

#include "a3/errors.hpp"
#include "a3/numeric.hpp"
#include "a3/tensor_io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace a3 {

using nlohmann::json;

void DomainShift::validate() const {
  if (!std::isfinite(intensity_scale) || intensity_scale < 0.0) throw ConfigError("shift: intensity_scale must be finite and >= 0");
  if (!std::isfinite(noise_sigma) || noise_sigma < 0.0) throw ConfigError("shift: noise_sigma must be finite and >= 0");
  if (!std::isfinite(contrast_gamma) || contrast_gamma <= 0.0) throw ConfigError("shift: contrast_gamma must be positive");
}

void DomainSpec::validate() const {
  if (n_classes < 2) throw ConfigError("data: n_classes must be at least 2");
  if (samples_per_class < 1) throw ConfigError("data: samples_per_class must be positive");
  if (image_side < 8) throw ConfigError("data: image_side must be at least 8");
  if (std::abs(shift.translation_px) >= image_side) throw ConfigError("data: translation exceeds the image");
  shift.validate();
}

std::string DomainSpec::to_json() const {
  const json j = {{"n_classes", n_classes},
                  {"samples_per_class", samples_per_class},
                  {"image_side", image_side},
                  {"seed", seed},
                  {"shift",
                   {{"intensity_scale", shift.intensity_scale},
                    {"noise_sigma", shift.noise_sigma},
                    {"translation_px", shift.translation_px},
                    {"contrast_gamma", shift.contrast_gamma}}}};
  return j.dump();
}

DomainSpec DomainSpec::from_json(std::string_view text) {
  try {
    const json j = json::parse(text);
    DomainSpec s;
    s.n_classes = j.at("n_classes").get<Index>();
    s.samples_per_class = j.at("samples_per_class").get<Index>();
    s.image_side = j.at("image_side").get<Index>();
    s.seed = j.at("seed").get<std::uint64_t>();
    const json& sh = j.at("shift");
    s.shift.intensity_scale = sh.at("intensity_scale").get<double>();
    s.shift.noise_sigma = sh.at("noise_sigma").get<double>();
    s.shift.translation_px = sh.at("translation_px").get<int>();
    s.shift.contrast_gamma = sh.at("contrast_gamma").get<double>();
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("bundle spec sidecar: ") + e.what(), 0);
  }
}

ImageSet ImageSet::subset(const std::vector<Index>& rows) const {
  ImageSet out;
  out.side = side;
  out.x = RowMatrix(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw ContractError("ImageSet::subset: index out of range");
    out.x.row(static_cast<Index>(i)) = x.row(rows[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Glyph rendering

namespace {

struct Point {
  double x;
  double y;
};

struct Stroke {
  Point a;
  Point b;
};

using Glyph = std::vector<Stroke>;

constexpr int kStrokesPerGlyph = 3;
constexpr double kStrokeWidth = 0.06;

double segment_distance(Point p, const Stroke& s) {
  const double dx = s.b.x - s.a.x, dy = s.b.y - s.a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - s.a.x) * dx + (p.y - s.a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = s.a.x + t * dx - p.x, ey = s.a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

Glyph draw_template(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> coord(0.15, 0.85);
  Glyph g;
  while (static_cast<int>(g.size()) < kStrokesPerGlyph) {
    Stroke s{{coord(rng), coord(rng)}, {coord(rng), coord(rng)}};
    if (std::hypot(s.b.x - s.a.x, s.b.y - s.a.y) >= 0.3) g.push_back(s);
  }
  return g;
}

Glyph jitter(const Glyph& g, std::mt19937_64& rng) {
  std::normal_distribution<double> angle(0.0, 8.0 * std::numbers::pi / 180.0);
  std::uniform_real_distribution<double> scale(0.9, 1.1);
  std::normal_distribution<double> shift(0.0, 0.04);
  std::normal_distribution<double> wobble(0.0, 0.02);
  const double th = angle(rng), sc = scale(rng), tx = shift(rng), ty = shift(rng);
  const double c = std::cos(th), s = std::sin(th);
  auto move = [&](Point p) {
    const double x = p.x - 0.5, y = p.y - 0.5;
    return Point{0.5 + sc * (c * x - s * y) + tx + wobble(rng), 0.5 + sc * (s * x + c * y) + ty + wobble(rng)};
  };
  Glyph out;
  for (const Stroke& st : g) out.push_back({move(st.a), move(st.b)});
  return out;
}

void render(const Glyph& g, Index side, double width, Eigen::Ref<Eigen::RowVectorXd> out) {
  for (Index r = 0; r < side; ++r) {
    for (Index c = 0; c < side; ++c) {
      const Point p{(static_cast<double>(c) + 0.5) / static_cast<double>(side),
                    (static_cast<double>(r) + 0.5) / static_cast<double>(side)};
      double v = 0.0;
      for (const Stroke& s : g) {
        const double d = segment_distance(p, s) / width;
        v = std::max(v, std::exp(-d * d));
      }
      out[r * side + c] = v;
    }
  }
}

ImageSet render_domain(const std::vector<Glyph>& templates, const DomainSpec& spec, std::vector<int>& labels,
                       std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> width_scale(0.8, 1.2);
  const Index n = spec.n_classes * spec.samples_per_class;
  ImageSet set;
  set.side = spec.image_side;
  set.x = RowMatrix(n, spec.image_side * spec.image_side);
  labels.clear();
  Index row = 0;
  for (Index k = 0; k < spec.n_classes; ++k) {
    for (Index i = 0; i < spec.samples_per_class; ++i, ++row) {
      const Glyph g = jitter(templates[static_cast<std::size_t>(k)], rng);
      render(g, spec.image_side, kStrokeWidth * width_scale(rng), set.x.row(row));
      labels.push_back(static_cast<int>(k));
    }
  }
  return set;
}

}  // namespace

RowMatrix apply_shift(const RowMatrix& images, Index side, const DomainShift& shift, std::uint64_t seed) {
  shift.validate();
  if (images.cols() != side * side) throw ContractError("apply_shift: images are not side x side");
  const Index t = shift.translation_px;
  RowMatrix out = RowMatrix::Zero(images.rows(), images.cols());
  for (Index n = 0; n < images.rows(); ++n) {
    for (Index r = 0; r < side; ++r) {
      for (Index c = 0; c < side; ++c) {
        const Index sr = r - t, sc = c - t;
        if (sr >= 0 && sr < side && sc >= 0 && sc < side) out(n, r * side + c) = images(n, sr * side + sc);
      }
    }
  }
  out *= shift.intensity_scale;
  if (shift.contrast_gamma != 1.0) out = out.array().pow(shift.contrast_gamma).matrix();
  if (shift.noise_sigma > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, shift.noise_sigma);
    for (Index i = 0; i < out.size(); ++i) out.data()[i] += noise(rng);
  }
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

DatasetBundle generate_domain_pair(const DomainSpec& spec) {
  spec.validate();
  std::mt19937_64 template_rng(mix_seed(spec.seed, 1));
  std::vector<Glyph> templates;
  for (Index k = 0; k < spec.n_classes; ++k) templates.push_back(draw_template(template_rng));

  DatasetBundle b;
  b.spec = spec;
  b.source = render_domain(templates, spec, b.source_y, mix_seed(spec.seed, 2));
  b.target = render_domain(templates, spec, b.target_y_eval, mix_seed(spec.seed, 3));
  b.target.x = apply_shift(b.target.x, spec.image_side, spec.shift, mix_seed(spec.seed, 4));
  return b;
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

double bilinear(const Eigen::Ref<const Eigen::RowVectorXd>& img, Index side, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(side - 1));
  x = std::clamp(x, 0.0, static_cast<double>(side - 1));
  const Index y0 = static_cast<Index>(std::floor(y)), x0 = static_cast<Index>(std::floor(x));
  const Index y1 = std::min(y0 + 1, side - 1), x1 = std::min(x0 + 1, side - 1);
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  const double top = (1 - fx) * img[y0 * side + x0] + fx * img[y0 * side + x1];
  const double bottom = (1 - fx) * img[y1 * side + x0] + fx * img[y1 * side + x1];
  return (1 - fy) * top + fy * bottom;
}

}  // namespace

RowMatrix augment_view(const RowMatrix& x, Index side, std::uint64_t seed, const AugmentConfig& cfg) {
  if (x.cols() != side * side) throw ContractError("augment_view: images are not side x side");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
  RowMatrix out = x;
  const double s = static_cast<double>(side);
  for (Index n = 0; n < x.rows(); ++n) {
    auto row = out.row(n);
    if (cfg.crop) {
      const double frac = cfg.crop_min + (1.0 - cfg.crop_min) * unit(rng);
      const double extent = frac * s;
      const double oy = (s - extent) * unit(rng), ox = (s - extent) * unit(rng);
      const Eigen::RowVectorXd src = row;
      for (Index r = 0; r < side; ++r) {
        for (Index c = 0; c < side; ++c) {
          const double sy = oy + (static_cast<double>(r) + 0.5) * extent / s - 0.5;
          const double sx = ox + (static_cast<double>(c) + 0.5) * extent / s - 0.5;
          row[r * side + c] = bilinear(src, side, sy, sx);
        }
      }
    }
    if (cfg.flip && unit(rng) < 0.5) {
      for (Index r = 0; r < side; ++r) row.segment(r * side, side).reverseInPlace();
    }
    if (cfg.noise) {
      for (Index i = 0; i < row.size(); ++i) row[i] += noise(rng);
    }
    if (cfg.intensity) row *= cfg.intensity_lo + (cfg.intensity_hi - cfg.intensity_lo) * unit(rng);
  }
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

ViewPair augment_two_views(const RowMatrix& x, Index side, std::uint64_t seed, const AugmentConfig& cfg) {
  return {augment_view(x, side, mix_seed(seed, 0), cfg), augment_view(x, side, mix_seed(seed, 1), cfg)};
}

// ---------------------------------------------------------------------------
// Bundle files

namespace {

Tensor labels_tensor(const std::vector<int>& y) {
  Eigen::VectorXd v(static_cast<Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) v[static_cast<Index>(i)] = y[i];
  return Tensor(Shape{static_cast<Index>(y.size())}, v);
}

std::vector<int> tensor_labels(const Tensor& t) {
  std::vector<int> y(static_cast<std::size_t>(t.size()));
  for (Index i = 0; i < t.size(); ++i) y[static_cast<std::size_t>(i)] = static_cast<int>(t[i]);
  return y;
}

const Tensor& require_entry(const NamedTensors& t, const std::string& name, std::uint64_t offset) {
  auto it = t.find(name);
  if (it == t.end()) throw FormatError("bundle: missing tensor '" + name + "'", offset);
  return it->second;
}

}  // namespace

std::string encode_bundle(const DatasetBundle& bundle) {
  NamedTensors t;
  t["source.x"] = Tensor::from_matrix(bundle.source.x);
  t["source.y"] = labels_tensor(bundle.source_y);
  t["target.x"] = Tensor::from_matrix(bundle.target.x);
  t["target.y_eval"] = labels_tensor(bundle.target_y_eval);
  ByteWriter w;
  w.put_bytes(kBundleMagic);
  write_tensors(w, t);
  const std::string sidecar = bundle.spec.to_json();
  w.put_u32(static_cast<std::uint32_t>(sidecar.size()));
  w.put_bytes(sidecar);
  return w.bytes();
}

DatasetBundle decode_bundle(std::string_view bytes) {
  ByteReader r(bytes);
  r.expect_magic(kBundleMagic);
  const NamedTensors t = read_tensors(r);
  const std::uint64_t sidecar_offset = r.offset();
  const std::uint32_t len = r.get_u32();
  const std::string_view sidecar = r.get_bytes(len);
  if (!r.at_end()) throw FormatError("bundle: trailing bytes", r.offset());

  DatasetBundle b;
  b.spec = DomainSpec::from_json(sidecar);
  b.source.side = b.target.side = b.spec.image_side;
  b.source.x = require_entry(t, "source.x", sidecar_offset).matrix();
  b.source_y = tensor_labels(require_entry(t, "source.y", sidecar_offset));
  b.target.x = require_entry(t, "target.x", sidecar_offset).matrix();
  b.target_y_eval = tensor_labels(require_entry(t, "target.y_eval", sidecar_offset));
  const Index pixels = b.spec.image_side * b.spec.image_side;
  if (b.source.x.cols() != pixels || b.target.x.cols() != pixels ||
      static_cast<Index>(b.source_y.size()) != b.source.x.rows() ||
      static_cast<Index>(b.target_y_eval.size()) != b.target.x.rows()) {
    throw FormatError("bundle: tensor shapes disagree with the spec sidecar", sidecar_offset);
  }
  return b;
}

void save_bundle(const std::string& path, const DatasetBundle& bundle) { write_file(path, encode_bundle(bundle)); }

DatasetBundle load_bundle(const std::string& path) { return decode_bundle(read_file(path)); }

}  // namespace a3
