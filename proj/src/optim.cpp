#include "a3/optim.hpp"

#include "a3/errors.hpp"

#include <cmath>
#include <numbers>

namespace a3 {

void OptimSpec::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("optimizer: lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer: momentum must be in [0,1)");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) throw ConfigError("optimizer: weight_decay must be >= 0");
  if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("optimizer: gamma must be positive");
}

double OptimSpec::lr_at(long step, long total_steps) const {
  switch (schedule) {
    case ScheduleKind::kConstant: return lr;
    case ScheduleKind::kCosine: {
      if (total_steps <= 0) return lr;
      const double t = static_cast<double>(step) / static_cast<double>(total_steps);
      return 0.5 * lr * (1.0 + std::cos(std::numbers::pi * t));
    }
    case ScheduleKind::kMultiStep: {
      double out = lr;
      for (double m : milestones) {
        if (static_cast<double>(step) >= m * static_cast<double>(total_steps)) out *= gamma;
      }
      return out;
    }
  }
  return lr;
}

std::string to_string(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::kConstant: return "constant";
    case ScheduleKind::kCosine: return "cosine";
    case ScheduleKind::kMultiStep: return "multistep";
  }
  return "constant";
}

ScheduleKind parse_schedule(const std::string& text) {
  if (text == "constant") return ScheduleKind::kConstant;
  if (text == "cosine") return ScheduleKind::kCosine;
  if (text == "multistep") return ScheduleKind::kMultiStep;
  throw ConfigError("unknown schedule '" + text + "' (expected constant, cosine or multistep)");
}

void Sgd::update(const std::string& name, Tensor& weight, const Tensor& grad, double lr) {
  if (!weight.same_shape(grad)) {
    throw DimensionError("sgd: gradient for '" + name + "' has shape " + shape_string(grad.shape()) + ", parameter " +
                         shape_string(weight.shape()));
  }
  auto [it, fresh] = velocity_.try_emplace(name, Tensor(weight.shape()));
  Tensor& v = it->second;
  v.data() = spec_.momentum * v.data() + grad.data() + spec_.weight_decay * weight.data();
  weight.data() -= lr * v.data();
}

}  // namespace a3
