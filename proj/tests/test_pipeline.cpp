#include "a3/errors.hpp"
#include "a3/pipeline.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <type_traits>

using namespace a3;

// The adaptation entry point accepts unlabeled images only.
static_assert(std::is_invocable_v<decltype(adapt), const RunConfig&, const Checkpoint&, const ImageSet&,
                                  const PipelineHooks&>);
static_assert(!std::is_invocable_v<decltype(adapt), const RunConfig&, const Checkpoint&, const DatasetBundle&,
                                   const PipelineHooks&>);
static_assert(!std::is_invocable_v<decltype(adapt), const RunConfig&, const Checkpoint&, const std::vector<int>&,
                                   const PipelineHooks&>);
static_assert(!std::is_invocable_v<decltype(pretrain_source), const RunConfig&, const DatasetBundle&,
                                   const PipelineHooks&>);
static_assert(!std::is_invocable_v<decltype(pretrain_source), const RunConfig&, const std::vector<int>&,
                                   const PipelineHooks&>);

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.seed = 3;
  c.hidden_widths = {24, 24};
  c.proj_dim = 8;
  c.n_prototypes = 6;
  c.domain_hidden = 8;
  c.mc_passes = 4;
  c.kmeans_k = 3;
  c.batch_size = 16;
  c.pretrain_epochs = 3;
  c.target_epochs = 2;
  c.rotation_epochs = 1;
  c.budget_total = 12;
  c.n_cycles = 4;
  c.probe_steps = 50;
  c.data.n_classes = 4;
  c.data.samples_per_class = 10;
  c.data.image_side = 8;
  c.data.seed = 3;
  return c;
}

struct TinyRun {
  Checkpoint source;
  AdaptResult result;
  std::vector<MetricsRecord> records;
  std::vector<std::string> lines;
  std::vector<std::int64_t> dumps;
};

TinyRun run_tiny(const RunConfig& cfg, const DatasetBundle& bundle, const EvalFn& eval = {}) {
  TinyRun r;
  r.source = pretrain_source(cfg, bundle.source);
  PipelineHooks hooks;
  hooks.metrics = [&](const MetricsRecord& m) {
    r.records.push_back(m);
    r.lines.push_back(m.to_json());
  };
  hooks.evaluate = eval;
  hooks.embeddings = [&](std::int64_t stage, const NamedTensors& t) {
    r.dumps.push_back(stage);
    EXPECT_EQ(t.at("embeddings").rows(), 2 * bundle.target.size());
    EXPECT_EQ(t.at("domain").size(), 2 * bundle.target.size());
  };
  r.result = adapt(cfg, r.source, bundle.target, hooks);
  return r;
}

}  // namespace

TEST(Pipeline, EvaluatorIsTheOnlyLabelConsumer) {
  const RunConfig cfg = tiny_config();
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  const Evaluator evaluator(bundle, probe_config(cfg));
  int calls = 0;
  const EvalFn counting = [&](const EncoderParams& e) {
    ++calls;
    return evaluator.evaluate(e);
  };
  const TinyRun with_eval = run_tiny(cfg, bundle, counting);

  // Scramble every label: training must not notice.
  DatasetBundle relabeled = bundle;
  for (int& y : relabeled.target_y_eval) y = (y + 1) % 4;
  for (int& y : relabeled.source_y) y = (y + 3) % 4;
  const Evaluator other(relabeled, probe_config(cfg));
  const TinyRun scrambled = run_tiny(cfg, relabeled, other.callback());
  const TinyRun silent = run_tiny(cfg, bundle);

  EXPECT_GT(calls, 0);
  EXPECT_EQ(encode_checkpoint(with_eval.result.target), encode_checkpoint(silent.result.target));
  EXPECT_EQ(encode_checkpoint(with_eval.result.target), encode_checkpoint(scrambled.result.target));
  EXPECT_EQ(with_eval.result.core.selected, scrambled.result.core.selected);
}

TEST(Pipeline, CoreSetGrowsByEqualBudgets) {
  RunConfig cfg = tiny_config();
  cfg.budget_total = 120;
  cfg.data.samples_per_class = 40;
  cfg.target_epochs = 1;
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  const TinyRun run = run_tiny(cfg, bundle);
  EXPECT_EQ(run.result.cycle_sizes, (std::vector<Index>{40, 80, 120}));
  const auto& sel = run.result.core.selected;
  EXPECT_EQ(static_cast<Index>(sel.size()), cfg.budget_total);
  EXPECT_EQ(std::set<Index>(sel.begin(), sel.end()).size(), sel.size());
  for (Index i : sel) {
    EXPECT_GE(i, 0);
    EXPECT_LT(i, bundle.target.size());
  }
  EXPECT_EQ(run.dumps, (std::vector<std::int64_t>{0, 1, 2, 3}));
}

TEST(Pipeline, MetricsTotalsMatchWeightedSum) {
  RunConfig cfg = tiny_config();
  cfg.weights.lambda1 = 0.7;
  cfg.weights.lambda2 = 0.3;
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  const TinyRun run = run_tiny(cfg, bundle);
  ASSERT_EQ(run.records.size(), 3u * static_cast<std::size_t>(cfg.target_epochs));
  for (const auto& r : run.records) {
    EXPECT_NEAR(r.total, r.swap + 0.7 * r.dal + 0.3 * (r.ent + r.vat), 1e-9);
    EXPECT_GT(r.dal, 0.0);
    EXPECT_GE(r.ent, 0.0);
    EXPECT_GE(r.vat, 0.0);
    EXPECT_EQ(r.wall_clock_ms, 0.0);
  }
}

TEST(Pipeline, DisabledComponentsLogZero) {
  RunConfig cfg = tiny_config();
  find_variant("entropy").apply(cfg);
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  const TinyRun run = run_tiny(cfg, bundle);
  for (const auto& r : run.records) {
    EXPECT_EQ(r.dal, 0.0);
    EXPECT_EQ(r.vat, 0.0);
    EXPECT_GT(r.ent, 0.0);
  }
}

TEST(Pipeline, RunsAreBitwiseReproducible) {
  const RunConfig cfg = tiny_config();
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  const TinyRun a = run_tiny(cfg, bundle);
  const TinyRun b = run_tiny(cfg, bundle);
  EXPECT_EQ(encode_checkpoint(a.source), encode_checkpoint(b.source));
  EXPECT_EQ(encode_checkpoint(a.result.target), encode_checkpoint(b.result.target));
  EXPECT_EQ(a.lines, b.lines);
  EXPECT_EQ(format_coreset(a.result.core), format_coreset(b.result.core));
}

TEST(Pipeline, SourceModelStaysFrozen) {
  const RunConfig cfg = tiny_config();
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  const Checkpoint source = pretrain_source(cfg, bundle.source);
  const std::string before = encode_checkpoint(source);
  const AdaptResult res = adapt(cfg, source, bundle.target);
  EXPECT_EQ(encode_checkpoint(source), before);
  for (const auto& [name, t] : source.tensors) EXPECT_TRUE(bitwise_equal(res.target.tensors.at(name), t)) << name;
  // The target encoder did move.
  EXPECT_FALSE(bitwise_equal(res.target.tensors.at("target.encoder.projection"),
                             source.tensors.at("source.encoder.projection")));
}

TEST(Pipeline, OptionalCyclePathsRun) {
  RunConfig cfg = tiny_config();
  cfg.warm_start = false;
  cfg.rescore_each_cycle = false;
  cfg.share_prototypes = false;
  cfg.uncertainty_source = UncertaintySource::kEntropy;
  cfg.clue_weighting = true;
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  const TinyRun run = run_tiny(cfg, bundle);
  EXPECT_EQ(run.result.cycle_sizes, (std::vector<Index>{4, 8, 12}));
  EXPECT_TRUE(run.result.target.tensors.count("target.prototypes.weights"));
}

TEST(Pipeline, BudgetMisconfigurationFailsBeforeTraining) {
  RunConfig cfg = tiny_config();
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  const Checkpoint source = initial_source_checkpoint(cfg);
  cfg.budget_total = bundle.target.size() + 1;
  int records = 0;
  PipelineHooks hooks;
  hooks.metrics = [&](const MetricsRecord&) { ++records; };
  EXPECT_THROW(adapt(cfg, source, bundle.target, hooks), ConfigError);
  EXPECT_EQ(records, 0);
  cfg = tiny_config();
  cfg.proj_dim = 4;
  EXPECT_THROW(adapt(cfg, source, bundle.target, hooks), ConfigError);
}

TEST(Pretrain, ZeroEpochsReturnsInitialization) {
  RunConfig cfg = tiny_config();
  cfg.pretrain_epochs = 0;
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  EXPECT_EQ(encode_checkpoint(pretrain_source(cfg, bundle.source)), encode_checkpoint(initial_source_checkpoint(cfg)));
}

TEST(Pretrain, DivergenceKeepsLastGoodCheckpoint) {
  RunConfig cfg = tiny_config();
  cfg.pretrain_opt.lr = 1e300;
  cfg.pretrain_opt.momentum = 0.0;
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  try {
    pretrain_source(cfg, bundle.source);
    FAIL() << "expected TrainingAborted";
  } catch (const TrainingAborted& e) {
    for (const auto& [name, t] : e.last_good().tensors) EXPECT_TRUE(t.data().allFinite()) << name;
    EXPECT_EQ(encode_checkpoint(e.last_good()), encode_checkpoint(initial_source_checkpoint(cfg)));
  }
}

TEST(Pretrain, SwapLossDecreasesOnDefaultConfig) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.data.seed = seed;
    const DatasetBundle bundle = generate_domain_pair(cfg.data);
    std::vector<double> swaps;
    PipelineHooks hooks;
    hooks.metrics = [&](const MetricsRecord& r) { swaps.push_back(r.swap); };
    pretrain_source(cfg, bundle.source, hooks);
    ASSERT_EQ(swaps.size(), static_cast<std::size_t>(cfg.pretrain_epochs));
    EXPECT_LT(swaps.back(), swaps.front()) << "seed " << seed;
  }
}

TEST(Evaluate, ZeroShiftTransfersWithTrainedSourceModel) {
  RunConfig cfg;
  cfg.data.shift = DomainShift::none();
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  const Checkpoint ckpt = pretrain_source(cfg, bundle.source);
  const EvalResult r = Evaluator(bundle, probe_config(cfg)).evaluate(source_encoder(ckpt));
  EXPECT_GE(r.target_acc, 0.95);
}

TEST(Evaluate, ConstantEncoderIsAtChance) {
  RunConfig cfg;
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  EncoderParams enc = source_encoder(initial_source_checkpoint(cfg));
  for (auto& layer : enc.layers) layer.weight.data().setZero();
  const EvalResult r = Evaluator(bundle, probe_config(cfg)).evaluate(enc);
  EXPECT_GE(r.target_acc, 0.05);
  EXPECT_LE(r.target_acc, 0.2);
}

TEST(Evaluate, RepeatedEvaluationIsIdentical) {
  const RunConfig cfg = tiny_config();
  const DatasetBundle bundle = generate_domain_pair(cfg.data);
  const Evaluator ev(bundle, probe_config(cfg));
  const EncoderParams enc = source_encoder(initial_source_checkpoint(cfg));
  const EvalResult a = ev.evaluate(enc);
  const EvalResult b = ev.evaluate(enc);
  EXPECT_EQ(a.source_probe_acc, b.source_probe_acc);
  EXPECT_EQ(a.target_acc, b.target_acc);
}

TEST(Evaluate, ProbeSeparatesLinearClasses) {
  RowMatrix x(6, 2);
  x << 0, 0, 0.1, 0, 0, 0.1, 5, 5, 5.1, 5, 5, 5.1;
  const std::vector<int> y{0, 0, 0, 1, 1, 1};
  const LinearProbe probe(x, y, 2, ProbeConfig{});
  EXPECT_EQ(probe.accuracy(x, y), 1.0);
}

TEST(Metrics, JsonRoundTripWithExactKeys) {
  MetricsRecord r;
  r.stage = 2;
  r.epoch = 5;
  r.swap = 0.1;
  r.dal = 1.0 / 3.0;
  r.ent = 2.5;
  r.vat = 1e-9;
  r.total = 4.0;
  r.core_set_size = 80;
  r.source_probe_acc = 0.9;
  r.target_acc = 0.8;
  const std::string line = r.to_json();
  EXPECT_EQ(line.find("{\"stage\":2,\"epoch\":5,\"swap\":"), 0u);
  const MetricsRecord back = MetricsRecord::from_json(line);
  EXPECT_EQ(back.to_json(), line);
  EXPECT_EQ(back.dal, r.dal);
  EXPECT_THROW(MetricsRecord::from_json("{\"stage\":1}"), IoError);
}

TEST(Ablation, SixVariantsWithExpectedSwitches) {
  std::vector<std::string> names;
  for (const auto& v : ablation_variants()) names.push_back(v.name);
  EXPECT_EQ(names, (std::vector<std::string>{"hybrid", "uncertainty", "random", "consolidated", "dal_vat", "entropy"}));
  RunConfig c;
  find_variant("random").apply(c);
  EXPECT_EQ(c.acquisition, AcquisitionMode::kRandom);
  c = RunConfig{};
  find_variant("dal_vat").apply(c);
  EXPECT_TRUE(c.use_dal && c.use_vat && !c.use_entropy);
  EXPECT_THROW(find_variant("bogus"), ConfigError);
}
