#pragma once

// Swapped-prediction objective: codes come from Sinkhorn-Knopp equipartition of
// prototype similarities, and each view's softmax over prototypes is trained to
// predict the other view's codes.

#include "a3/errors.hpp"
#include "a3/models.hpp"
#include "a3/numeric.hpp"

#include <cmath>
#include <string>

namespace a3 {

/// Soft assignments of B samples to K prototypes. Rows sum to 1; columns sum to
/// B/K once the iteration has converged.
struct CodeMatrix {
  RowMatrix q;
  double epsilon = 0.05;
  int iters = 3;
  bool underfilled = false;  // B < K: equipartition cannot be met by one-hot codes
};

/// Sinkhorn-Knopp in the log domain. Returns Q = diag(u) exp(scores / epsilon) diag(v)
/// scaled so that every row sums to 1 and every column to B/K. The final
/// normalization is over rows, so row sums are exact while column sums converge
/// with the iteration count.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> sinkhorn(
    const Eigen::MatrixBase<Derived>& scores, typename Derived::Scalar epsilon, int iters) {
  using Scalar = typename Derived::Scalar;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (!(epsilon > 0) || !std::isfinite(epsilon)) throw ConfigError("sinkhorn: epsilon must be positive");
  if (iters < 1) throw ConfigError("sinkhorn: iteration count must be positive");
  if (scores.rows() == 0 || scores.cols() == 0) throw DimensionError("sinkhorn: empty score matrix");
  if (!scores.allFinite()) throw NumericError("sinkhorn: non-finite scores");

  const Eigen::Index batch = scores.rows();
  const Eigen::Index clusters = scores.cols();
  const Scalar log_b = std::log(static_cast<Scalar>(batch));
  const Scalar log_k = std::log(static_cast<Scalar>(clusters));

  Mat log_q = scores / epsilon;
  for (int it = 0; it < iters; ++it) {
    for (Eigen::Index k = 0; k < clusters; ++k) log_q.col(k).array() -= log_sum_exp(log_q.col(k)) + log_k;
    for (Eigen::Index n = 0; n < batch; ++n) log_q.row(n).array() -= log_sum_exp(log_q.row(n)) + log_b;
  }
  return (log_q.array() + log_b).exp().matrix();
}

template <typename Derived>
CodeMatrix sinkhorn_codes(const Eigen::MatrixBase<Derived>& scores, double epsilon, int iters) {
  CodeMatrix c;
  c.q = sinkhorn(scores, epsilon, iters);
  c.epsilon = epsilon;
  c.iters = iters;
  c.underfilled = scores.rows() < scores.cols();
  return c;
}

struct SwapConfig {
  double tau = 0.1;
  double epsilon = 0.05;
  int sinkhorn_iters = 3;
};

struct SwapTerms {
  Var loss;
  CodeMatrix codes_a;
  CodeMatrix codes_b;
};

/// Two-view swapped-prediction loss for row-normalized embeddings z_a, z_b (B x p):
///   -(1/B) sum_n [ q_b[n] . log softmax(z_a[n] C^T / tau) + q_a[n] . log softmax(z_b[n] C^T / tau) ]
/// Codes are computed from the unscaled similarities z C^T and carry no gradient.
SwapTerms swap_loss_terms(Tape& tape, Var z_a, Var z_b, const Prototypes& prototypes, const SwapConfig& cfg,
                          const ParamScope& scope);

inline Var swap_loss(Tape& tape, Var z_a, Var z_b, const Prototypes& prototypes, const SwapConfig& cfg,
                     const ParamScope& scope) {
  return swap_loss_terms(tape, z_a, z_b, prototypes, cfg, scope).loss;
}

/// Rescales every prototype row to unit norm. Rows already within 1e-12 of unit
/// norm are left bit-for-bit unchanged, which makes the operation idempotent.
Prototypes prototype_normalize(const Prototypes& prototypes);

}  // namespace a3
