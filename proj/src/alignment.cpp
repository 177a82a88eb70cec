#include "a3/alignment.hpp"

#include "a3/errors.hpp"
#include "a3/numeric.hpp"

#include <cmath>
#include <random>

namespace a3 {

namespace {

bool finite_nonneg(double v) { return std::isfinite(v) && v >= 0.0; }

}  // namespace

void AlignmentWeights::validate() const {
  if (!finite_nonneg(lambda1) || !finite_nonneg(lambda2) || !finite_nonneg(grl_lambda)) {
    throw ConfigError("alignment weights must be finite and nonnegative");
  }
}

void VatConfig::validate() const {
  if (!(xi > 0.0) || !std::isfinite(xi)) throw ConfigError("vat: xi must be positive");
  if (!(eps_radius > 0.0) || !std::isfinite(eps_radius)) throw ConfigError("vat: eps_radius must be positive");
  if (power_iters < 1) throw ConfigError("vat: power_iters must be at least 1");
}

Var entropy_loss(Var probs) {
  const Tensor& p = probs.value();
  if (p.rank() != 2) throw DimensionError("entropy_loss: expected B x K probabilities, got " + shape_string(p.shape()));
  const auto m = p.matrix();
  if ((m.array() < 0.0).any() || (m.array() > 1.0).any()) throw ContractError("entropy_loss: entries outside [0,1]");
  for (Index i = 0; i < m.rows(); ++i) {
    if (std::abs(m.row(i).sum() - 1.0) > 1e-6) {
      throw ContractError("entropy_loss: row " + std::to_string(i) + " sums to " + std::to_string(m.row(i).sum()));
    }
  }
  const double batch = static_cast<double>(m.rows());
  return sum(probs * log(clamp(probs, kProbClamp, 1.0))) * (-1.0 / batch);
}

RowMatrix evaluate_probs(const ProbabilityModel& model, const RowMatrix& x) {
  Tape scratch;
  return model(scratch, scratch.constant(Tensor::from_matrix(x)), false).value().matrix();
}

Var kl_divergence(Tape& tape, const RowMatrix& p, Var q) {
  if (q.value().rank() != 2 || q.value().rows() != p.rows() || q.value().cols() != p.cols()) {
    throw DimensionError("kl_divergence: shapes differ");
  }
  const RowMatrix log_p = p.cwiseMax(kProbClamp).array().log().matrix();
  Var pv = tape.constant(Tensor::from_matrix(p));
  Var lpv = tape.constant(Tensor::from_matrix(log_p));
  const double batch = static_cast<double>(p.rows());
  return sum(pv * (lpv - log(clamp(q, kProbClamp, 1.0)))) * (1.0 / batch);
}

RowMatrix vat_perturbation(const ProbabilityModel& model, const RowMatrix& x, const VatConfig& cfg,
                           std::uint64_t seed) {
  cfg.validate();
  const RowMatrix clean = evaluate_probs(model, x);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  RowMatrix d(x.rows(), x.cols());
  for (Index i = 0; i < d.size(); ++i) d.data()[i] = normal(rng);
  d = normalize_rows(d);

  for (int it = 0; it < cfg.power_iters; ++it) {
    Tape tape;
    Var probe = tape.param("vat.d", Tensor::from_matrix(d));
    Var perturbed = tape.constant(Tensor::from_matrix(x)) + probe * cfg.xi;
    Var loss = kl_divergence(tape, clean, model(tape, perturbed, false));
    const RowMatrix grad = tape.backward(loss).at("vat.d").matrix();
    for (Index i = 0; i < grad.rows(); ++i) {
      if (!grad.row(i).allFinite()) {
        throw NumericError("vat_perturbation: non-finite gradient for sample " + std::to_string(i));
      }
      const double n = grad.row(i).norm();
      // A zero gradient (input-independent model) keeps the previous direction.
      if (n > 0.0) d.row(i) = grad.row(i) / n;
    }
  }
  return d * cfg.eps_radius;
}

Var vat_loss(Tape& tape, const ProbabilityModel& model, const RowMatrix& x, const RowMatrix& r) {
  if (x.rows() != r.rows() || x.cols() != r.cols()) throw DimensionError("vat_loss: perturbation shape differs from input");
  const RowMatrix clean = evaluate_probs(model, x);
  const RowMatrix shifted = x + r;
  return kl_divergence(tape, clean, model(tape, tape.constant(Tensor::from_matrix(shifted)), true));
}

Var dal_loss(Tape& tape, const DomainClassifierParams& classifier, const ParamScope& scope, const RowMatrix& z_source,
             Var z_target, double grl_lambda) {
  if (z_source.rows() == 0 || z_target.value().size() == 0) throw ContractError("dal_loss: empty batch");
  Var p_source = domain_prob(tape, classifier, tape.constant(Tensor::from_matrix(z_source)), scope);
  Var p_target = domain_prob(tape, classifier, gradient_reversal(z_target, grl_lambda), scope);
  Var source_term = mean(log(clamp(p_source, kProbClamp, 1.0 - kProbClamp)));
  Var target_term = mean(log(clamp(1.0 - p_target, kProbClamp, 1.0 - kProbClamp)));
  return -(source_term + target_term);
}

double total_loss(const LossComponents& parts, const AlignmentWeights& w) {
  const std::pair<const char*, double> named[] = {
      {"swap", parts.swap}, {"dal", parts.dal}, {"ent", parts.ent}, {"vat", parts.vat}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw NumericError(std::string("total_loss: non-finite component '") + name + "'");
  }
  return parts.swap + w.lambda1 * parts.dal + w.lambda2 * (parts.ent + parts.vat);
}

Var total_loss(const LossVars& parts, const AlignmentWeights& w) {
  const std::pair<const char*, Var> named[] = {
      {"swap", parts.swap}, {"dal", parts.dal}, {"ent", parts.ent}, {"vat", parts.vat}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v.value().item())) {
      throw NumericError(std::string("total_loss: non-finite component '") + name + "'");
    }
  }
  return parts.swap + parts.dal * w.lambda1 + (parts.ent + parts.vat) * w.lambda2;
}

}  // namespace a3
