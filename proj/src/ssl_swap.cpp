#include "a3/ssl_swap.hpp"

namespace a3 {

SwapTerms swap_loss_terms(Tape& tape, Var z_a, Var z_b, const Prototypes& prototypes, const SwapConfig& cfg,
                          const ParamScope& scope) {
  if (z_a.shape() != z_b.shape()) {
    throw DimensionError("swap_loss: views have shapes " + shape_string(z_a.shape()) + " and " +
                         shape_string(z_b.shape()));
  }
  if (!(cfg.tau > 0.0)) throw ConfigError("swap_loss: tau must be positive");
  if (z_a.value().rank() != 2 || z_a.value().cols() != prototypes.dim()) {
    throw DimensionError("swap_loss: embeddings " + shape_string(z_a.shape()) + " vs prototypes " +
                         shape_string(prototypes.weights.shape()));
  }
  const double batch = static_cast<double>(z_a.value().rows());

  Var c_t = transpose(scope.bind(tape, "weights", prototypes.weights));
  Var sim_a = matmul(z_a, c_t);
  Var sim_b = matmul(z_b, c_t);

  SwapTerms out;
  out.codes_a = sinkhorn_codes(sim_a.value().matrix(), cfg.epsilon, cfg.sinkhorn_iters);
  out.codes_b = sinkhorn_codes(sim_b.value().matrix(), cfg.epsilon, cfg.sinkhorn_iters);

  Var log_p_a = log_softmax(sim_a * (1.0 / cfg.tau), 1);
  Var log_p_b = log_softmax(sim_b * (1.0 / cfg.tau), 1);
  Var q_a = tape.constant(Tensor::from_matrix(out.codes_a.q));
  Var q_b = tape.constant(Tensor::from_matrix(out.codes_b.q));

  out.loss = (sum(q_b * log_p_a) + sum(q_a * log_p_b)) * (-1.0 / batch);
  return out;
}

Prototypes prototype_normalize(const Prototypes& prototypes) {
  Prototypes out = prototypes;
  auto m = out.weights.matrix();
  for (Index k = 0; k < m.rows(); ++k) {
    const double n = m.row(k).norm();
    if (std::abs(n - 1.0) <= 1e-12) continue;
    m.row(k) /= n < kNormGuard ? n + kNormGuard : n;
  }
  return out;
}

}  // namespace a3
