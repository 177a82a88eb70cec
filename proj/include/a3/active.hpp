#pragma once

// Hybrid uncertainty / diversity acquisition and iterative core-set construction.

#include "a3/errors.hpp"
#include "a3/models.hpp"
#include "a3/numeric.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace a3 {

struct AcquisitionRecord {
  Index sample_index = 0;
  double uncertainty = 0.0;  // BALD mutual information, nats
  double diversity = 0.0;    // distance to the nearest k-means centroid
  double a3_score = 0.0;     // ranking key, higher is better
};

struct CoreSet {
  std::vector<Index> selected;
  Index budget_total = 0;
  Index stage = 0;

  Index budget_used() const { return static_cast<Index>(selected.size()); }
  Index remaining() const { return budget_total - budget_used(); }
};

struct PoolPartition {
  std::vector<std::vector<Index>> batches;
};

enum class AcquisitionMode { kHybrid, kUncertaintyOnly, kRandom };

std::string to_string(AcquisitionMode mode);
AcquisitionMode parse_acquisition_mode(const std::string& text);

/// One T x 4 probability stack per sample, from T passes with independent
/// dropout masks drawn from `seed`.
std::vector<RowMatrix> mc_dropout_probs(const RotationClassifierParams& model, const RowMatrix& x, int passes,
                                        std::uint64_t seed);

/// H(mean_t p_t) - mean_t H(p_t), clipped at zero.
template <typename Derived>
typename Derived::Scalar bald_mutual_info(const Eigen::MatrixBase<Derived>& stack) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index passes = stack.rows();
  bool identical = true;
  for (Eigen::Index t = 1; t < passes && identical; ++t) identical = (stack.row(t).array() == stack.row(0).array()).all();
  if (identical) return Scalar(0);

  const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mean_row = stack.colwise().mean();
  Scalar expected = 0;
  for (Eigen::Index t = 0; t < passes; ++t) expected += shannon_entropy(stack.row(t));
  expected /= static_cast<Scalar>(passes);
  const Scalar mi = shannon_entropy(mean_row) - expected;
  return mi > Scalar(0) ? mi : Scalar(0);
}

struct KMeansResult {
  RowMatrix centroids;
  std::vector<Index> assignment;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // after each Lloyd iteration
  int iterations = 0;
};

/// Lloyd's algorithm with seeded k-means++ initialization. Optional per-sample
/// weights turn it into weighted k-means (centroids are weighted means).
KMeansResult kmeans(const RowMatrix& points, Index k, int max_iter, std::uint64_t seed,
                    const Eigen::VectorXd* weights = nullptr);

/// Euclidean distance from every row to its nearest centroid.
Eigen::VectorXd nearest_centroid_distance(const RowMatrix& points, const RowMatrix& centroids);

/// diversity - beta * uncertainty.
inline double a3_score(double uncertainty, double diversity, double beta) { return diversity - beta * uncertainty; }

/// Builds records for pool entries `indices` (positions into the per-sample
/// vectors) and assigns the ranking key for the given mode. Random mode ranks by
/// a seeded shuffle; uncertainty-only ranks by -uncertainty.
std::vector<AcquisitionRecord> make_records(std::span<const Index> indices, const Eigen::VectorXd& uncertainty,
                                            const Eigen::VectorXd& diversity, AcquisitionMode mode, double beta,
                                            std::uint64_t seed);

/// Descending a3_score, ties broken by ascending sample index.
void sort_records(std::vector<AcquisitionRecord>& records);

/// Sorted pool split into n contiguous chunks whose sizes differ by at most one
/// (larger chunks first).
PoolPartition partition_pool(std::vector<AcquisitionRecord> records, Index n);

/// Appends the k best-scoring indices of `batch` to the core-set.
CoreSet select_topk(std::span<const AcquisitionRecord> batch, CoreSet core, Index k);

/// Rotates a square image (row-major, side x side) counter-clockwise by
/// quarter_turns * 90 degrees.
Eigen::RowVectorXd rotate_image(const Eigen::Ref<const Eigen::RowVectorXd>& image, Index side, int quarter_turns);

struct RotationDataset {
  RowMatrix x;
  std::vector<int> labels;  // 0, 1, 2, 3 for 0, 90, 180, 270 degrees
};

/// Every image emitted once per rotation, shuffled with `seed`.
RotationDataset build_rotation_pool(const RowMatrix& images, Index side, std::uint64_t seed);

std::string format_coreset(const CoreSet& core);
CoreSet parse_coreset(const std::string& text);
void save_coreset(const std::string& path, const CoreSet& core);
CoreSet load_coreset(const std::string& path);

}  // namespace a3
