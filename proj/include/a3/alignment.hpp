#pragma once

// Target-alignment objectives: entropy minimization, virtual adversarial
// training, the domain adversarial loss through gradient reversal, and their
// weighted combination.

#include "a3/models.hpp"

#include <cstdint>
#include <functional>
#include <string>

namespace a3 {

/// Floor applied to every probability before it is logged.
inline constexpr double kProbClamp = 1e-7;

struct AlignmentWeights {
  double lambda1 = 1.0;     // domain adversarial weight
  double lambda2 = 0.1;     // shared entropy + VAT weight
  double grl_lambda = 1.0;  // gradient-reversal coefficient

  void validate() const;
};

struct VatConfig {
  double xi = 1e-6;
  double eps_radius = 1.0;
  int power_iters = 1;

  void validate() const;
};

/// Mean Shannon entropy of the rows of a B x K probability matrix.
Var entropy_loss(Var probs);

/// Model view used by VAT: maps a B x d input to B x K probabilities. When
/// `trainable` is false the model must bind its parameters as constants.
using ProbabilityModel = std::function<Var(Tape& tape, Var x, bool trainable)>;

/// Clean-branch probabilities, evaluated on a scratch tape.
RowMatrix evaluate_probs(const ProbabilityModel& model, const RowMatrix& x);

/// KL(p || q) averaged over rows, with p a constant and q on the tape.
Var kl_divergence(Tape& tape, const RowMatrix& p, Var q);

/// Power-iteration estimate of the most adversarial perturbation. Every
/// returned row has L2 norm eps_radius.
RowMatrix vat_perturbation(const ProbabilityModel& model, const RowMatrix& x, const VatConfig& cfg,
                           std::uint64_t seed);

/// KL(f(x) || f(x + r)); the clean branch is detached.
Var vat_loss(Tape& tape, const ProbabilityModel& model, const RowMatrix& x, const RowMatrix& r);

/// mean(-log D(z_source)) + mean(-log(1 - D(GRL(z_target)))).
/// z_source comes from the frozen source model and is a constant.
Var dal_loss(Tape& tape, const DomainClassifierParams& classifier, const ParamScope& scope, const RowMatrix& z_source,
             Var z_target, double grl_lambda);

struct LossComponents {
  double swap = 0.0;
  double dal = 0.0;
  double ent = 0.0;
  double vat = 0.0;
};

/// swap + lambda1 * dal + lambda2 * (ent + vat). Throws NumericError naming any
/// non-finite component.
double total_loss(const LossComponents& parts, const AlignmentWeights& w);

struct LossVars {
  Var swap;
  Var dal;
  Var ent;
  Var vat;
};

Var total_loss(const LossVars& parts, const AlignmentWeights& w);

}  // namespace a3
