#pragma once

// Run configuration: a flat key registry shared by config files, CLI flags and
// the canonical text that feeds the checkpoint fingerprint.

#include "a3/active.hpp"
#include "a3/alignment.hpp"
#include "a3/data.hpp"
#include "a3/optim.hpp"
#include "a3/ssl_swap.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace a3 {

enum class UncertaintySource { kBald, kEntropy };
enum class ProbeFeatures { kEmbedding, kTrunk };

struct RunConfig {
  std::uint64_t seed = 0;

  // models
  std::vector<Index> hidden_widths{128, 128};
  Index proj_dim = 32;
  Index n_prototypes = 16;
  Index domain_hidden = 64;
  double dropout_rate = 0.25;
  bool share_prototypes = true;

  // ssl_swap
  SwapConfig swap;

  // alignment
  AlignmentWeights weights;
  VatConfig vat;
  bool use_dal = true;
  bool use_entropy = true;
  bool use_vat = true;
  bool grl_warmup = true;

  // active
  AcquisitionMode acquisition = AcquisitionMode::kHybrid;
  UncertaintySource uncertainty_source = UncertaintySource::kBald;
  double beta = 1.0;
  int mc_passes = 10;
  Index kmeans_k = 8;
  int kmeans_max_iter = 100;
  bool clue_weighting = false;
  Index budget_total = 120;
  int n_cycles = 4;
  bool rescore_each_cycle = true;
  bool warm_start = true;

  // training phases
  Index batch_size = 64;
  int pretrain_epochs = 100;
  OptimSpec pretrain_opt{3e-3, 0.9, 1e-6, ScheduleKind::kConstant};
  int target_epochs = 80;
  OptimSpec target_opt{3e-3, 0.9, 1e-6, ScheduleKind::kCosine};
  int rotation_epochs = 5;
  OptimSpec rotation_opt{0.1, 0.9, 1e-6, ScheduleKind::kMultiStep};

  // evaluation probe
  int probe_steps = 200;
  double probe_lr = 0.1;
  ProbeFeatures probe_features = ProbeFeatures::kEmbedding;

  // data
  DomainSpec data;

  bool log_timing = false;

  void validate() const;
  /// Every key as `key = value`, one per line, in registry order.
  std::string canonical_text() const;
  std::uint64_t fingerprint() const;

  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
};

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<ConfigKey>& config_keys();

/// Applies `key = value` lines (with `#` comments) on top of `base`.
RunConfig parse_config_text(const std::string& text, RunConfig base = {});
RunConfig load_config_file(const std::string& path, RunConfig base = {});

/// Per-cycle selection sizes: budget_total spread over n_cycles - 1 adaptation
/// stages, earlier stages taking the remainder.
std::vector<Index> cycle_budgets(Index budget_total, int n_cycles);

}  // namespace a3
