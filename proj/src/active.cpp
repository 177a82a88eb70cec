#include "a3/active.hpp"

#include "a3/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace a3 {

std::string to_string(AcquisitionMode mode) {
  switch (mode) {
    case AcquisitionMode::kHybrid: return "hybrid";
    case AcquisitionMode::kUncertaintyOnly: return "uncertainty";
    case AcquisitionMode::kRandom: return "random";
  }
  return "hybrid";
}

AcquisitionMode parse_acquisition_mode(const std::string& text) {
  if (text == "hybrid") return AcquisitionMode::kHybrid;
  if (text == "uncertainty") return AcquisitionMode::kUncertaintyOnly;
  if (text == "random") return AcquisitionMode::kRandom;
  throw ConfigError("unknown acquisition mode '" + text + "' (expected hybrid, uncertainty or random)");
}

std::vector<RowMatrix> mc_dropout_probs(const RotationClassifierParams& model, const RowMatrix& x, int passes,
                                        std::uint64_t seed) {
  if (passes < 2) throw ConfigError("mc_dropout_probs: need at least 2 passes");
  std::mt19937_64 rng(seed);
  std::vector<RowMatrix> stacks(static_cast<std::size_t>(x.rows()), RowMatrix(passes, kRotationClasses));
  const Tensor input = Tensor::from_matrix(x);
  for (int t = 0; t < passes; ++t) {
    Tensor mask = make_dropout_mask(x.rows(), model.feature_dim(), model.dropout_rate, rng);
    Tape tape;
    const RowMatrix probs =
        rotation_predict(tape, model, tape.constant(input), mask, ParamScope::frozen("rotation")).value().matrix();
    for (Index i = 0; i < x.rows(); ++i) stacks[static_cast<std::size_t>(i)].row(t) = probs.row(i);
  }
  return stacks;
}

// ---------------------------------------------------------------------------
// k-means

namespace {

double squared_distance_to_nearest(const RowMatrix& points, Index i, const RowMatrix& centroids, Index count,
                                   Index* which) {
  double best = std::numeric_limits<double>::infinity();
  Index arg = 0;
  for (Index c = 0; c < count; ++c) {
    const double d = (points.row(i) - centroids.row(c)).squaredNorm();
    if (d < best) {
      best = d;
      arg = c;
    }
  }
  if (which) *which = arg;
  return best;
}

}  // namespace

KMeansResult kmeans(const RowMatrix& points, Index k, int max_iter, std::uint64_t seed, const Eigen::VectorXd* weights) {
  const Index n = points.rows();
  if (k < 1) throw ConfigError("kmeans: k must be positive");
  if (n < k) throw ContractError("kmeans: " + std::to_string(n) + " points cannot fill " + std::to_string(k) + " clusters");
  if (max_iter < 1) throw ConfigError("kmeans: max_iter must be positive");
  if (weights && weights->size() != n) throw DimensionError("kmeans: weight count differs from point count");
  auto weight = [&](Index i) { return weights ? (*weights)[i] : 1.0; };

  std::mt19937_64 rng(seed);
  KMeansResult out;
  out.centroids = RowMatrix(k, points.cols());

  // k-means++ seeding
  out.centroids.row(0) = points.row(std::uniform_int_distribution<Index>(0, n - 1)(rng));
  Eigen::VectorXd d2(n);
  for (Index c = 1; c < k; ++c) {
    for (Index i = 0; i < n; ++i) d2[i] = weight(i) * squared_distance_to_nearest(points, i, out.centroids, c, nullptr);
    const double total = d2.sum();
    Index pick = 0;
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      pick = n - 1;
      for (Index i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        if (r < d2[i]) {
          pick = i;
          break;
        }
        r -= d2[i];
      }
      while (d2[pick] <= 0.0 && pick > 0) --pick;
    } else {
      pick = std::uniform_int_distribution<Index>(0, n - 1)(rng);
    }
    out.centroids.row(c) = points.row(pick);
  }

  out.assignment.assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    double inertia = 0.0;
    for (Index i = 0; i < n; ++i) {
      Index which = 0;
      inertia += weight(i) * squared_distance_to_nearest(points, i, out.centroids, k, &which);
      if (out.assignment[static_cast<std::size_t>(i)] != which) {
        out.assignment[static_cast<std::size_t>(i)] = which;
        changed = true;
      }
    }
    out.inertia_history.push_back(inertia);
    out.inertia = inertia;
    out.iterations = it + 1;
    if (!changed && it > 0) break;

    RowMatrix sums = RowMatrix::Zero(k, points.cols());
    Eigen::VectorXd mass = Eigen::VectorXd::Zero(k);
    for (Index i = 0; i < n; ++i) {
      const Index c = out.assignment[static_cast<std::size_t>(i)];
      sums.row(c) += weight(i) * points.row(i);
      mass[c] += weight(i);
    }
    for (Index c = 0; c < k; ++c) {
      if (mass[c] > 0.0) out.centroids.row(c) = sums.row(c) / mass[c];  // empty clusters keep their centroid
    }
  }
  // Final inertia against the final centroids.
  double inertia = 0.0;
  for (Index i = 0; i < n; ++i) {
    Index which = 0;
    inertia += weight(i) * squared_distance_to_nearest(points, i, out.centroids, k, &which);
    out.assignment[static_cast<std::size_t>(i)] = which;
  }
  out.inertia = inertia;
  out.inertia_history.push_back(inertia);
  return out;
}

Eigen::VectorXd nearest_centroid_distance(const RowMatrix& points, const RowMatrix& centroids) {
  if (points.cols() != centroids.cols()) throw DimensionError("nearest_centroid_distance: width mismatch");
  Eigen::VectorXd out(points.rows());
  for (Index i = 0; i < points.rows(); ++i) {
    out[i] = std::sqrt(squared_distance_to_nearest(points, i, centroids, centroids.rows(), nullptr));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ranking and selection

std::vector<AcquisitionRecord> make_records(std::span<const Index> indices, const Eigen::VectorXd& uncertainty,
                                            const Eigen::VectorXd& diversity, AcquisitionMode mode, double beta,
                                            std::uint64_t seed) {
  if (uncertainty.size() != static_cast<Index>(indices.size()) || diversity.size() != uncertainty.size()) {
    throw DimensionError("make_records: score vectors must match the index list");
  }
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("acquisition: beta must be finite and nonnegative");
  std::vector<AcquisitionRecord> records(indices.size());
  std::vector<Index> shuffle_rank;
  if (mode == AcquisitionMode::kRandom) {
    shuffle_rank.resize(indices.size());
    std::iota(shuffle_rank.begin(), shuffle_rank.end(), Index{0});
    std::mt19937_64 rng(seed);
    std::shuffle(shuffle_rank.begin(), shuffle_rank.end(), rng);
  }
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const double u = uncertainty[static_cast<Index>(i)];
    const double d = diversity[static_cast<Index>(i)];
    if (!std::isfinite(u) || !std::isfinite(d)) throw NumericError("acquisition: non-finite score for sample " + std::to_string(indices[i]));
    AcquisitionRecord& r = records[i];
    r.sample_index = indices[i];
    r.uncertainty = u;
    r.diversity = d;
    switch (mode) {
      case AcquisitionMode::kHybrid: r.a3_score = a3_score(u, d, beta); break;
      case AcquisitionMode::kUncertaintyOnly: r.a3_score = -u; break;
      case AcquisitionMode::kRandom: r.a3_score = -static_cast<double>(shuffle_rank[i]); break;
    }
  }
  return records;
}

void sort_records(std::vector<AcquisitionRecord>& records) {
  std::stable_sort(records.begin(), records.end(), [](const AcquisitionRecord& a, const AcquisitionRecord& b) {
    if (a.a3_score != b.a3_score) return a.a3_score > b.a3_score;
    return a.sample_index < b.sample_index;
  });
}

PoolPartition partition_pool(std::vector<AcquisitionRecord> records, Index n) {
  if (n < 1) throw ConfigError("partition_pool: need at least one batch");
  if (records.empty()) throw ContractError("partition_pool: empty pool");
  const Index total = static_cast<Index>(records.size());
  if (n > total) throw ConfigError("partition_pool: " + std::to_string(n) + " batches exceed pool size " + std::to_string(total));
  sort_records(records);
  PoolPartition out;
  const Index base = total / n;
  const Index extra = total % n;
  Index pos = 0;
  for (Index b = 0; b < n; ++b) {
    const Index len = base + (b < extra ? 1 : 0);
    std::vector<Index> batch;
    for (Index i = 0; i < len; ++i) batch.push_back(records[static_cast<std::size_t>(pos + i)].sample_index);
    pos += len;
    out.batches.push_back(std::move(batch));
  }
  return out;
}

CoreSet select_topk(std::span<const AcquisitionRecord> batch, CoreSet core, Index k) {
  if (k < 0) throw ContractError("select_topk: negative k");
  if (k > core.remaining()) {
    throw BudgetError("select_topk: requested " + std::to_string(k) + " samples but only " +
                      std::to_string(core.remaining()) + " remain in the budget");
  }
  if (k > static_cast<Index>(batch.size())) throw ContractError("select_topk: k exceeds batch size");
  std::set<Index> taken(core.selected.begin(), core.selected.end());
  for (const auto& r : batch) {
    if (taken.count(r.sample_index)) {
      throw ContractError("select_topk: sample " + std::to_string(r.sample_index) + " is already in the core-set");
    }
  }
  std::vector<AcquisitionRecord> sorted(batch.begin(), batch.end());
  sort_records(sorted);
  for (Index i = 0; i < k; ++i) {
    const Index idx = sorted[static_cast<std::size_t>(i)].sample_index;
    if (!taken.insert(idx).second) throw ContractError("select_topk: duplicate index " + std::to_string(idx) + " in batch");
    core.selected.push_back(idx);
  }
  return core;
}

// ---------------------------------------------------------------------------
// Rotation pretext

Eigen::RowVectorXd rotate_image(const Eigen::Ref<const Eigen::RowVectorXd>& image, Index side, int quarter_turns) {
  if (side <= 0 || image.size() != side * side) {
    throw ContractError("rotate_image: image of " + std::to_string(image.size()) + " pixels is not " +
                        std::to_string(side) + "x" + std::to_string(side));
  }
  const int turns = ((quarter_turns % 4) + 4) % 4;
  Eigen::RowVectorXd out = image;
  for (int t = 0; t < turns; ++t) {
    Eigen::RowVectorXd next(out.size());
    // counter-clockwise: out[r][c] = in[c][side - 1 - r]
    for (Index r = 0; r < side; ++r) {
      for (Index c = 0; c < side; ++c) next[r * side + c] = out[c * side + (side - 1 - r)];
    }
    out = std::move(next);
  }
  return out;
}

RotationDataset build_rotation_pool(const RowMatrix& images, Index side, std::uint64_t seed) {
  if (images.cols() != side * side) throw ContractError("build_rotation_pool: images are not square grids of the given side");
  const Index n = images.rows();
  std::vector<Index> order(static_cast<std::size_t>(4 * n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  RotationDataset out;
  out.x = RowMatrix(4 * n, images.cols());
  out.labels.resize(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Index src = order[i] / 4;
    const int turns = static_cast<int>(order[i] % 4);
    out.x.row(static_cast<Index>(i)) = rotate_image(images.row(src), side, turns);
    out.labels[i] = turns;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Core-set files

std::string format_coreset(const CoreSet& core) {
  std::ostringstream os;
  os << "# a3-coreset v1 stage=" << core.stage << " budget=" << core.budget_total << "\n";
  for (Index i : core.selected) os << i << "\n";
  return os.str();
}

CoreSet parse_coreset(const std::string& text) {
  std::istringstream is(text);
  std::string header;
  if (!std::getline(is, header)) throw FormatError("empty core-set file", 0);
  CoreSet core;
  long long stage = 0, budget = 0;
  if (std::sscanf(header.c_str(), "# a3-coreset v1 stage=%lld budget=%lld", &stage, &budget) != 2) {
    throw FormatError("bad core-set header '" + header + "'", 0);
  }
  core.stage = stage;
  core.budget_total = budget;
  std::string line;
  std::set<Index> seen;
  std::uint64_t offset = header.size() + 1;
  while (std::getline(is, line)) {
    if (!line.empty()) {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(line, &used);
      } catch (const std::exception&) {
        throw FormatError("bad core-set index '" + line + "'", offset);
      }
      if (used != line.size() || v < 0) throw FormatError("bad core-set index '" + line + "'", offset);
      if (!seen.insert(v).second) throw FormatError("duplicate core-set index " + line, offset);
      core.selected.push_back(v);
    }
    offset += line.size() + 1;
  }
  if (core.budget_used() > core.budget_total) throw FormatError("core-set exceeds its budget", offset);
  return core;
}

void save_coreset(const std::string& path, const CoreSet& core) { write_file(path, format_coreset(core)); }

CoreSet load_coreset(const std::string& path) { return parse_coreset(read_file(path)); }

}  // namespace a3
