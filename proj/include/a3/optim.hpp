#pragma once

// SGD with momentum and the two learning-rate schedules used by the pipeline.

#include "a3/models.hpp"

#include <map>
#include <string>
#include <vector>

namespace a3 {

enum class ScheduleKind { kConstant, kCosine, kMultiStep };

struct OptimSpec {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-6;
  ScheduleKind schedule = ScheduleKind::kConstant;
  std::vector<double> milestones{0.5, 0.75};  // fractions of total steps (multi-step)
  double gamma = 0.1;

  void validate() const;
  /// Learning rate at `step` of `total_steps`.
  double lr_at(long step, long total_steps) const;
};

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule(const std::string& text);

/// v <- momentum * v + g + weight_decay * w;  w <- w - lr * v
class Sgd {
 public:
  explicit Sgd(OptimSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  void update(const std::string& name, Tensor& weight, const Tensor& grad, double lr);

  /// Updates every parameter of `params` that has an entry in `grads`.
  template <typename Params>
  void step(Params& params, const std::string& prefix, const GradMap& grads, double lr) {
    for_each_param(params, prefix, [&](const std::string& name, Tensor& w) {
      auto it = grads.find(name);
      if (it != grads.end()) update(name, w, it->second, lr);
    });
  }

  const OptimSpec& spec() const { return spec_; }

 private:
  OptimSpec spec_;
  std::map<std::string, Tensor> velocity_;
};

}  // namespace a3
