#pragma once

// Stage-0 source pretraining, the active adaptation cycles, linear-probe
// evaluation and the ablation driver.

#include "a3/active.hpp"
#include "a3/config.hpp"
#include "a3/data.hpp"
#include "a3/models.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace a3 {

struct MetricsRecord {
  std::int64_t stage = 0;
  std::int64_t epoch = 0;
  double swap = 0.0;
  double dal = 0.0;
  double ent = 0.0;
  double vat = 0.0;
  double total = 0.0;
  Index core_set_size = 0;
  double source_probe_acc = 0.0;
  double target_acc = 0.0;
  double wall_clock_ms = 0.0;

  std::string to_json() const;
  static MetricsRecord from_json(const std::string& line);
};

std::vector<MetricsRecord> read_metrics_file(const std::string& path);

struct EvalResult {
  double source_probe_acc = 0.0;
  double target_acc = 0.0;
};

/// Scores an encoder. The training entry points only see this callback, never
/// the labels behind it.
using EvalFn = std::function<EvalResult(const EncoderParams&)>;
using MetricsSink = std::function<void(const MetricsRecord&)>;
/// Receives the per-cycle embedding dump (cycle index, tensors).
using EmbeddingSink = std::function<void(std::int64_t, const NamedTensors&)>;

struct ProbeConfig {
  int steps = 200;
  double lr = 0.1;
  ProbeFeatures features = ProbeFeatures::kEmbedding;
};

/// Multinomial logistic regression on frozen features, zero init, full-batch
/// gradient descent. Features are standardized with training-set statistics.
class LinearProbe {
 public:
  LinearProbe(const RowMatrix& features, const std::vector<int>& labels, int n_classes, const ProbeConfig& cfg);
  std::vector<int> predict(const RowMatrix& features) const;
  double accuracy(const RowMatrix& features, const std::vector<int>& labels) const;

 private:
  Eigen::RowVectorXd mean_;
  Eigen::RowVectorXd inv_std_;
  RowMatrix weight_;  // d x C
  Eigen::RowVectorXd bias_;
};

/// Owns the labels. Fits a probe on source features (every fifth sample held
/// out) and reports hold-out and target accuracy.
class Evaluator {
 public:
  Evaluator(DatasetBundle bundle, ProbeConfig cfg);
  EvalResult evaluate(const EncoderParams& encoder) const;
  EvalFn callback() const;

 private:
  DatasetBundle bundle_;
  ProbeConfig cfg_;
};

ProbeConfig probe_config(const RunConfig& cfg);

inline constexpr const char* kSourceEncoder = "source.encoder";
inline constexpr const char* kSourcePrototypes = "source.prototypes";
inline constexpr const char* kTargetEncoder = "target.encoder";
inline constexpr const char* kTargetPrototypes = "target.prototypes";
inline constexpr const char* kDomainClassifier = "domain";
inline constexpr const char* kRotationModel = "rotation";

/// Thrown when a loss turns non-finite. Carries the last checkpoint whose
/// parameters were all finite.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, Checkpoint last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const noexcept { return last_good_; }

 private:
  Checkpoint last_good_;
};

struct PipelineHooks {
  MetricsSink metrics;
  EvalFn evaluate;
  EmbeddingSink embeddings;
};

/// Randomly initialized stage-0 model (also the zero-epoch result).
Checkpoint initial_source_checkpoint(const RunConfig& cfg);

Checkpoint pretrain_source(const RunConfig& cfg, const ImageSet& source, const PipelineHooks& hooks = {});

struct AdaptResult {
  Checkpoint target;
  CoreSet core;
  std::vector<Index> cycle_sizes;  // core-set size after each cycle
};

/// Source-free adaptation: needs the stage-0 checkpoint and unlabeled target images.
AdaptResult adapt(const RunConfig& cfg, const Checkpoint& source, const ImageSet& target, const PipelineHooks& hooks = {});

EncoderParams source_encoder(const Checkpoint& ckpt);
EncoderParams target_encoder(const Checkpoint& ckpt);

struct AblationVariant {
  std::string name;
  std::function<void(RunConfig&)> apply;
};

/// hybrid, uncertainty, random, consolidated, dal_vat, entropy.
const std::vector<AblationVariant>& ablation_variants();
const AblationVariant& find_variant(const std::string& name);

}  // namespace a3
