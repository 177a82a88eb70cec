#include "a3/ssl_swap.hpp"

#include "support/gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace a3;
using a3::testing::random_tensor;

namespace {

RowMatrix random_rows(Index r, Index c, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  return random_tensor({r, c}, rng, lo, hi).matrix();
}

// Plain-loop Sinkhorn in the probability domain; shares nothing with the library.
std::vector<std::vector<double>> naive_sinkhorn(const RowMatrix& s, double eps, int iters) {
  const std::size_t b = static_cast<std::size_t>(s.rows()), k = static_cast<std::size_t>(s.cols());
  std::vector<std::vector<double>> q(b, std::vector<double>(k));
  double mx = -1e300;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, s(static_cast<Index>(i), static_cast<Index>(j)));
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < k; ++j) total += q[i][j] = std::exp((s(static_cast<Index>(i), static_cast<Index>(j)) - mx) / eps);
  for (auto& row : q)
    for (double& v : row) v /= total;
  for (int it = 0; it < iters; ++it) {
    for (std::size_t j = 0; j < k; ++j) {
      double c = 0.0;
      for (std::size_t i = 0; i < b; ++i) c += q[i][j];
      for (std::size_t i = 0; i < b; ++i) q[i][j] /= c * static_cast<double>(k);
    }
    for (std::size_t i = 0; i < b; ++i) {
      const double r = std::accumulate(q[i].begin(), q[i].end(), 0.0);
      for (double& v : q[i]) v /= r * static_cast<double>(b);
    }
  }
  for (auto& row : q)
    for (double& v : row) v *= static_cast<double>(b);
  return q;
}

// Eq. 2 written term by term with scalar loops.
double direct_swap_loss(const RowMatrix& za, const RowMatrix& zb, const RowMatrix& c, double tau,
                        const std::vector<std::vector<double>>& qa, const std::vector<std::vector<double>>& qb) {
  const Index b = za.rows(), k = c.rows(), p = za.cols();
  double acc = 0.0;
  for (Index n = 0; n < b; ++n) {
    std::vector<double> sa(static_cast<std::size_t>(k)), sb(static_cast<std::size_t>(k));
    for (Index j = 0; j < k; ++j) {
      double da = 0.0, db = 0.0;
      for (Index d = 0; d < p; ++d) {
        da += za(n, d) * c(j, d);
        db += zb(n, d) * c(j, d);
      }
      sa[static_cast<std::size_t>(j)] = da / tau;
      sb[static_cast<std::size_t>(j)] = db / tau;
    }
    double lse_a = 0.0, lse_b = 0.0;
    for (Index j = 0; j < k; ++j) {
      lse_a += std::exp(sa[static_cast<std::size_t>(j)]);
      lse_b += std::exp(sb[static_cast<std::size_t>(j)]);
    }
    lse_a = std::log(lse_a);
    lse_b = std::log(lse_b);
    for (Index j = 0; j < k; ++j) {
      const auto jj = static_cast<std::size_t>(j);
      const auto nn = static_cast<std::size_t>(n);
      acc += qb[nn][jj] * sa[jj] + qa[nn][jj] * sb[jj];
    }
    // codes are distributions, so sum_k q * lse = lse
    double sum_qa = 0.0, sum_qb = 0.0;
    for (Index j = 0; j < k; ++j) {
      sum_qa += qa[static_cast<std::size_t>(n)][static_cast<std::size_t>(j)];
      sum_qb += qb[static_cast<std::size_t>(n)][static_cast<std::size_t>(j)];
    }
    acc -= sum_qb * lse_a + sum_qa * lse_b;
  }
  return -acc / static_cast<double>(b);
}

double swap_value(const RowMatrix& za, const RowMatrix& zb, const Prototypes& c, const SwapConfig& cfg) {
  Tape tape;
  return swap_loss(tape, tape.constant(Tensor::from_matrix(za)), tape.constant(Tensor::from_matrix(zb)), c, cfg,
                   ParamScope::frozen("c"))
      .value()
      .item();
}

}  // namespace

TEST(Sinkhorn, DominantDiagonalIsNearIdentity) {
  RowMatrix s = RowMatrix::Constant(4, 4, -5.0);
  s.diagonal().setConstant(5.0);
  const RowMatrix q = sinkhorn(s, 0.05, 3);
  for (Index i = 0; i < 4; ++i) {
    EXPECT_NEAR(q.row(i).sum(), 1.0, 1e-12);
    EXPECT_NEAR(q(i, i), 1.0, 1e-9);
  }
}

TEST(Sinkhorn, EqualScoresGiveUniformCodes) {
  const RowMatrix q = sinkhorn(RowMatrix::Constant(6, 3, 0.3), 0.05, 3);
  for (Index i = 0; i < q.size(); ++i) EXPECT_NEAR(q.data()[i], 1.0 / 3.0, 1e-15);
}

TEST(Sinkhorn, MatchesIndependentIteration) {
  const RowMatrix s = random_rows(8, 4, 17);
  const RowMatrix q = sinkhorn(s, 0.5, 5);
  const auto ref = naive_sinkhorn(s, 0.5, 5);
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 4; ++j) EXPECT_NEAR(q(i, j), ref[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], 1e-12);
}

TEST(Sinkhorn, ConvergedInvariants) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const RowMatrix q = sinkhorn(random_rows(16, 4, seed, -0.2, 0.2), 0.05, 200);
    EXPECT_GE(q.minCoeff(), 0.0);
    for (Index i = 0; i < q.rows(); ++i) EXPECT_NEAR(q.row(i).sum(), 1.0, 1e-6);
    for (Index j = 0; j < q.cols(); ++j) EXPECT_NEAR(q.col(j).sum(), 4.0, 1e-4);
  }
}

TEST(Sinkhorn, ThreeIterationsCloseToConvergedColumns) {
  // Scores of magnitude <= 0.02 (score / epsilon within [-0.4, 0.4]).
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const RowMatrix s = random_rows(8, 4, 50 + seed, -0.02, 0.02);
    const RowMatrix converged = sinkhorn(s, 0.05, 200);
    const RowMatrix three = sinkhorn(s, 0.05, 3);
    for (Index j = 0; j < 4; ++j) {
      EXPECT_NEAR(converged.col(j).sum(), 2.0, 1e-12);
      EXPECT_NEAR(three.col(j).sum(), converged.col(j).sum(), 1e-3);
    }
  }
}

TEST(Sinkhorn, ShiftInvariant) {
  const RowMatrix s = random_rows(8, 4, 3);
  const RowMatrix q0 = sinkhorn(s, 0.05, 3);
  const RowMatrix q1 = sinkhorn((s.array() + 7.25).matrix(), 0.05, 3);
  EXPECT_LE((q0 - q1).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Sinkhorn, Errors) {
  RowMatrix s = random_rows(4, 2, 1);
  EXPECT_THROW(sinkhorn(s, 0.0, 3), ConfigError);
  EXPECT_THROW(sinkhorn(s, -1.0, 3), ConfigError);
  EXPECT_THROW(sinkhorn(s, 0.05, 0), ConfigError);
  s(1, 1) = std::nan("");
  EXPECT_THROW(sinkhorn(s, 0.05, 3), NumericError);
  EXPECT_TRUE(sinkhorn_codes(random_rows(2, 4, 1), 0.05, 3).underfilled);
  EXPECT_FALSE(sinkhorn_codes(random_rows(4, 4, 1), 0.05, 3).underfilled);
}

TEST(SwapLoss, MatchesDirectFormula) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const RowMatrix za = normalize_rows(random_rows(8, 5, 100 + seed));
    const RowMatrix zb = normalize_rows(random_rows(8, 5, 200 + seed));
    const Prototypes c = prototype_normalize(make_prototypes(4, 5, seed));
    const SwapConfig cfg;
    const RowMatrix cm = c.weights.matrix();
    const auto qa = naive_sinkhorn(za * cm.transpose(), cfg.epsilon, cfg.sinkhorn_iters);
    const auto qb = naive_sinkhorn(zb * cm.transpose(), cfg.epsilon, cfg.sinkhorn_iters);
    EXPECT_NEAR(swap_value(za, zb, c, cfg), direct_swap_loss(za, zb, cm, cfg.tau, qa, qb), 1e-10) << "seed " << seed;
  }
}

TEST(SwapLoss, SymmetricInViews) {
  const RowMatrix za = normalize_rows(random_rows(8, 5, 1));
  const RowMatrix zb = normalize_rows(random_rows(8, 5, 2));
  const Prototypes c = make_prototypes(4, 5, 3);
  EXPECT_EQ(swap_value(za, zb, c, {}), swap_value(zb, za, c, {}));
}

TEST(SwapLoss, IdenticalViewsGiveTwiceSelfCrossEntropy) {
  const RowMatrix z = normalize_rows(random_rows(8, 5, 4));
  const Prototypes c = make_prototypes(4, 5, 5);
  const SwapConfig cfg;
  const RowMatrix q = sinkhorn(z * c.weights.matrix().transpose(), cfg.epsilon, cfg.sinkhorn_iters);
  const RowMatrix logp = prototype_scores(z, c, cfg.tau);
  double ce = 0.0;
  for (Index n = 0; n < 8; ++n) ce -= (q.row(n).array() * (logp.row(n).array() - log_sum_exp(logp.row(n)))).sum();
  EXPECT_NEAR(swap_value(z, z, c, cfg), 2.0 * ce / 8.0, 1e-12);
}

TEST(SwapLoss, BatchPermutationInvariant) {
  const RowMatrix za = normalize_rows(random_rows(8, 5, 6));
  const RowMatrix zb = normalize_rows(random_rows(8, 5, 7));
  const Prototypes c = make_prototypes(4, 5, 8);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(8);
  perm.indices() << 3, 0, 7, 1, 6, 2, 5, 4;
  const RowMatrix pa = perm * za;
  const RowMatrix pb = perm * zb;
  EXPECT_NEAR(swap_value(za, zb, c, {}), swap_value(pa, pb, c, {}), 1e-12);
}

TEST(SwapLoss, PerSampleLossBoundedByCodeEntropy) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const RowMatrix za = normalize_rows(random_rows(8, 5, 300 + seed));
    const RowMatrix zb = normalize_rows(random_rows(8, 5, 400 + seed));
    const Prototypes c = make_prototypes(4, 5, seed);
    const SwapConfig cfg;
    const RowMatrix qb = sinkhorn(zb * c.weights.matrix().transpose(), cfg.epsilon, cfg.sinkhorn_iters);
    const RowMatrix s = prototype_scores(za, c, cfg.tau);
    for (Index n = 0; n < 8; ++n) {
      const double ce = -(qb.row(n).array() * (s.row(n).array() - log_sum_exp(s.row(n)))).sum();
      EXPECT_GE(ce + 1e-12, shannon_entropy(qb.row(n)));
    }
  }
}

TEST(SwapLoss, GradientMatchesFiniteDifferencesWithCodesFixed) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const RowMatrix za = normalize_rows(random_rows(6, 4, 500 + seed));
    const RowMatrix zb = normalize_rows(random_rows(6, 4, 600 + seed));
    const Prototypes c = make_prototypes(3, 4, seed);
    const SwapConfig cfg;
    const RowMatrix cm = c.weights.matrix();
    const Tensor qa = Tensor::from_matrix(sinkhorn(za * cm.transpose(), cfg.epsilon, cfg.sinkhorn_iters));
    const Tensor qb = Tensor::from_matrix(sinkhorn(zb * cm.transpose(), cfg.epsilon, cfg.sinkhorn_iters));

    // Analytic gradient from the library loss.
    Tape tape;
    Var va = tape.param("za", Tensor::from_matrix(za));
    GradMap g = tape.backward(swap_loss(tape, va, tape.constant(Tensor::from_matrix(zb)), c, cfg, ParamScope::frozen("c")));

    // Finite differences of the same objective with the codes frozen at their base values.
    auto frozen_loss = [&](Tape& t, const std::vector<Var>& v) {
      Var ct = transpose(t.constant(c.weights));
      Var la = log_softmax(matmul(v[0], ct) * (1.0 / cfg.tau), 1);
      Var lb = log_softmax(matmul(t.constant(Tensor::from_matrix(zb)), ct) * (1.0 / cfg.tau), 1);
      return (sum(t.constant(qb) * la) + sum(t.constant(qa) * lb)) * (-1.0 / 6.0);
    };
    const auto numeric = a3::testing::numeric_gradients(frozen_loss, {Tensor::from_matrix(za)}, 1e-6);
    const Tensor& a = g.at("za");
    double worst = 0.0, scale = 1e-6;
    for (Index i = 0; i < a.size(); ++i) {
      worst = std::max(worst, std::abs(a[i] - numeric[0][i]));
      scale = std::max({scale, std::abs(a[i]), std::abs(numeric[0][i])});
    }
    EXPECT_LE(worst / scale, 1e-4) << "seed " << seed;
  }
}

TEST(SwapLoss, BatchMismatchIsDimensionError) {
  const Prototypes c = make_prototypes(4, 5, 1);
  EXPECT_THROW(swap_value(normalize_rows(random_rows(8, 5, 1)), normalize_rows(random_rows(6, 5, 2)), c, {}),
               DimensionError);
}

TEST(SwapLoss, GradientReachesPrototypesWhenTrainable) {
  const RowMatrix za = normalize_rows(random_rows(8, 5, 1));
  const RowMatrix zb = normalize_rows(random_rows(8, 5, 2));
  const Prototypes c = make_prototypes(4, 5, 3);
  Tape tape;
  Var loss = swap_loss(tape, tape.constant(Tensor::from_matrix(za)), tape.constant(Tensor::from_matrix(zb)), c, {},
                       ParamScope{"proto", true});
  GradMap g = tape.backward(loss);
  ASSERT_TRUE(g.count("proto.weights"));
  EXPECT_GT(g.at("proto.weights").data().norm(), 0.0);
}
