#include "a3/pipeline.hpp"

#include "a3/alignment.hpp"
#include "a3/errors.hpp"
#include "a3/numeric.hpp"
#include "a3/optim.hpp"
#include "a3/ssl_swap.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace a3 {

namespace {

// Seed streams. Every random draw in the pipeline is mix_seed(cfg.seed, stream)
// further mixed with a counter, so runs are reproducible bit for bit.
enum Stream : std::uint64_t {
  kEncoderInit = 11,
  kPrototypeInit = 12,
  kDomainInit = 13,
  kRotationInit = 14,
  kPretrainShuffle = 21,
  kPretrainViews = 22,
  kTargetShuffle = 31,
  kTargetViews = 32,
  kRotationPool = 41,
  kRotationShuffle = 42,
  kRotationDropout = 43,
  kMcDropout = 51,
  kKMeans = 52,
  kRandomRank = 53,
};

std::uint64_t stream_seed(const RunConfig& cfg, Stream s, std::uint64_t counter = 0) {
  return mix_seed(mix_seed(cfg.seed, s), counter);
}

RowMatrix gather(const RowMatrix& x, const std::vector<Index>& rows) {
  RowMatrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = x.row(rows[i]);
  return out;
}

// Shuffled minibatches; a trailing batch of one sample is folded into the previous one.
std::vector<std::vector<Index>> minibatches(const std::vector<Index>& pool, Index batch_size, std::uint64_t seed) {
  std::vector<Index> order = pool;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<Index>> out;
  for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(order.size(), pos + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (out.size() > 1 && out.back().size() < 2) {
    out[out.size() - 2].insert(out[out.size() - 2].end(), out.back().begin(), out.back().end());
    out.pop_back();
  }
  return out;
}

Index batches_per_epoch(Index n, Index batch_size) {
  Index b = (n + batch_size - 1) / batch_size;
  if (b > 1 && n % batch_size == 1) --b;
  return b;
}

std::vector<Index> iota_indices(Index n) {
  std::vector<Index> out(static_cast<std::size_t>(n));
  std::iota(out.begin(), out.end(), Index{0});
  return out;
}

class Stopwatch {
 public:
  explicit Stopwatch(bool enabled) : enabled_(enabled), start_(std::chrono::steady_clock::now()) {}
  double elapsed_ms() const {
    if (!enabled_) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  bool enabled_;
  std::chrono::steady_clock::time_point start_;
};

bool all_finite(const NamedTensors& tensors) {
  for (const auto& [name, t] : tensors) {
    if (!t.data().allFinite()) return false;
  }
  return true;
}

void check_images(const RunConfig& cfg, const ImageSet& images, const char* what) {
  if (images.side != cfg.data.image_side || images.x.cols() != images.side * images.side) {
    throw ConfigError(std::string(what) + ": images have side " + std::to_string(images.side) + ", config expects " +
                      std::to_string(cfg.data.image_side));
  }
  if (images.size() < 2) throw ConfigError(std::string(what) + ": need at least two images");
}

void emit(const PipelineHooks& hooks, MetricsRecord rec, const EncoderParams& encoder) {
  if (hooks.evaluate) {
    const EvalResult r = hooks.evaluate(encoder);
    rec.source_probe_acc = r.source_probe_acc;
    rec.target_acc = r.target_acc;
  }
  if (hooks.metrics) hooks.metrics(rec);
}

struct Accumulator {
  double swap = 0.0, dal = 0.0, ent = 0.0, vat = 0.0;
  Index count = 0;

  void add(const LossComponents& c) {
    swap += c.swap;
    dal += c.dal;
    ent += c.ent;
    vat += c.vat;
    ++count;
  }
  LossComponents mean() const {
    const double n = count > 0 ? static_cast<double>(count) : 1.0;
    return {swap / n, dal / n, ent / n, vat / n};
  }
};

Checkpoint source_checkpoint(const RunConfig& cfg, const EncoderParams& enc, const Prototypes& protos) {
  Checkpoint ckpt;
  export_params(enc, kSourceEncoder, ckpt.tensors);
  export_params(protos, kSourcePrototypes, ckpt.tensors);
  ckpt.config_fingerprint = cfg.fingerprint();
  ckpt.stage = 0;
  return ckpt;
}

std::vector<Index> model_widths(const RunConfig& cfg) {
  std::vector<Index> widths{cfg.data.image_side * cfg.data.image_side};
  widths.insert(widths.end(), cfg.hidden_widths.begin(), cfg.hidden_widths.end());
  return widths;
}

void check_compatible(const RunConfig& cfg, const EncoderParams& enc, const Prototypes& protos) {
  const std::vector<Index> want = model_widths(cfg);
  bool ok = enc.layers.size() + 1 == want.size() && enc.embed_dim() == cfg.proj_dim &&
            protos.count() == cfg.n_prototypes && protos.dim() == cfg.proj_dim;
  for (std::size_t i = 0; ok && i < enc.layers.size(); ++i) {
    ok = enc.layers[i].in_dim() == want[i] && enc.layers[i].out_dim() == want[i + 1];
  }
  if (!ok) throw ConfigError("source checkpoint does not match the configured model shape");
}

// ---------------------------------------------------------------------------
// Rotation model

void train_rotation(const RunConfig& cfg, RotationClassifierParams& rot, const RowMatrix& images, std::uint64_t cycle) {
  if (cfg.rotation_epochs == 0 || images.rows() == 0) return;
  const RotationDataset pool = build_rotation_pool(images, cfg.data.image_side, stream_seed(cfg, kRotationPool, cycle));
  const std::vector<Index> all = iota_indices(pool.x.rows());
  const Index per_epoch = batches_per_epoch(pool.x.rows(), cfg.batch_size);
  const long total = static_cast<long>(per_epoch) * cfg.rotation_epochs;
  Sgd opt(cfg.rotation_opt);
  std::mt19937_64 mask_rng(stream_seed(cfg, kRotationDropout, cycle));
  const ParamScope scope{kRotationModel, true};
  long step = 0;
  for (int epoch = 0; epoch < cfg.rotation_epochs; ++epoch) {
    for (const auto& batch : minibatches(all, cfg.batch_size, stream_seed(cfg, kRotationShuffle, cycle * 1000 + epoch))) {
      const Index b = static_cast<Index>(batch.size());
      Tensor onehot(Shape{b, kRotationClasses});
      for (Index i = 0; i < b; ++i) onehot.matrix()(i, pool.labels[static_cast<std::size_t>(batch[i])]) = 1.0;
      Tape tape;
      const Tensor mask = make_dropout_mask(b, rot.feature_dim(), rot.dropout_rate, mask_rng);
      Var logits = rotation_logits(tape, rot, tape.constant(Tensor::from_matrix(gather(pool.x, batch))), mask, scope);
      Var loss = sum(log_softmax(logits, 1) * tape.constant(onehot)) * (-1.0 / static_cast<double>(b));
      if (!std::isfinite(loss.value().item())) throw NumericError("rotation model: non-finite loss");
      opt.step(rot, kRotationModel, tape.backward(loss), cfg.rotation_opt.lr_at(step, total));
      ++step;
    }
  }
}

// ---------------------------------------------------------------------------
// Acquisition

std::vector<AcquisitionRecord> score_pool(const RunConfig& cfg, const std::vector<Index>& pool, const RowMatrix& target_x,
                                          const EncoderParams& enc, const Prototypes& protos,
                                          const RotationClassifierParams& rot, std::uint64_t cycle) {
  const RowMatrix x = gather(target_x, pool);
  const Index n = x.rows();
  Eigen::VectorXd u(n);
  if (cfg.uncertainty_source == UncertaintySource::kBald) {
    const auto stacks = mc_dropout_probs(rot, x, cfg.mc_passes, stream_seed(cfg, kMcDropout, cycle));
    for (Index i = 0; i < n; ++i) u[i] = bald_mutual_info(stacks[static_cast<std::size_t>(i)]);
  } else {
    const RowMatrix probs = softmax_rows(prototype_scores(embed(enc, x, true), protos, cfg.swap.tau));
    for (Index i = 0; i < n; ++i) u[i] = shannon_entropy(probs.row(i));
  }

  // Diversity lives in the penultimate (trunk) feature space of the target model.
  const RowMatrix z = trunk_features(enc, x);
  const Index k = std::min(cfg.kmeans_k, n);
  Eigen::VectorXd weights;
  if (cfg.clue_weighting) weights = u.array() + 1e-12;
  const KMeansResult km =
      kmeans(z, k, cfg.kmeans_max_iter, stream_seed(cfg, kKMeans, cycle), cfg.clue_weighting ? &weights : nullptr);
  const Eigen::VectorXd d = nearest_centroid_distance(z, km.centroids);
  return make_records(pool, u, d, cfg.acquisition, cfg.beta, stream_seed(cfg, kRandomRank, cycle));
}

std::vector<AcquisitionRecord> records_for(const std::vector<AcquisitionRecord>& scored, const std::vector<Index>& batch) {
  std::vector<AcquisitionRecord> out;
  const std::set<Index> wanted(batch.begin(), batch.end());
  for (const auto& r : scored) {
    if (wanted.count(r.sample_index)) out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Target training

struct TargetState {
  EncoderParams encoder;
  Prototypes prototypes;
  DomainClassifierParams domain;
};

LossComponents target_step(const RunConfig& cfg, TargetState& st, const EncoderParams& src_enc, const RowMatrix& x,
                           double grl_lambda, std::uint64_t step_seed, Sgd& opt, double lr) {
  const Index side = cfg.data.image_side;
  const bool proto_trainable = !cfg.share_prototypes;
  const ParamScope enc_scope{kTargetEncoder, true};
  const ParamScope proto_scope{kTargetPrototypes, proto_trainable};

  Tape tape;
  const ViewPair views = augment_two_views(x, side, mix_seed(step_seed, 0));
  Var za = encode(tape, st.encoder, tape.constant(Tensor::from_matrix(views.a)), true, enc_scope);
  Var zb = encode(tape, st.encoder, tape.constant(Tensor::from_matrix(views.b)), true, enc_scope);
  LossVars parts;
  parts.swap = swap_loss(tape, za, zb, st.prototypes, cfg.swap, proto_scope);

  Var z_clean = encode(tape, st.encoder, tape.constant(Tensor::from_matrix(x)), true, enc_scope);
  const Var zero = tape.constant(Tensor::scalar(0.0));

  if (cfg.use_entropy) {
    parts.ent = entropy_loss(softmax(prototype_scores(tape, z_clean, st.prototypes, cfg.swap.tau, proto_scope), 1));
  } else {
    parts.ent = zero;
  }

  if (cfg.use_vat) {
    const ProbabilityModel model = [&](Tape& t, Var in, bool trainable) {
      const ParamScope es{kTargetEncoder, trainable};
      const ParamScope ps{kTargetPrototypes, trainable && proto_trainable};
      return softmax(prototype_scores(t, encode(t, st.encoder, in, true, es), st.prototypes, cfg.swap.tau, ps), 1);
    };
    const RowMatrix r = vat_perturbation(model, x, cfg.vat, mix_seed(step_seed, 1));
    parts.vat = vat_loss(tape, model, x, r);
  } else {
    parts.vat = zero;
  }

  if (cfg.use_dal) {
    const RowMatrix z_source = embed(src_enc, x, true);
    parts.dal = dal_loss(tape, st.domain, ParamScope{kDomainClassifier, true}, z_source, z_clean, grl_lambda);
  } else {
    parts.dal = zero;
  }

  Var total = total_loss(parts, cfg.weights);
  const LossComponents values{parts.swap.value().item(), parts.dal.value().item(), parts.ent.value().item(),
                              parts.vat.value().item()};
  // Names the offending component before any parameter moves.
  total_loss(values, cfg.weights);
  if (!std::isfinite(total.value().item())) throw NumericError("target training: non-finite total loss");

  const GradMap grads = tape.backward(total);
  opt.step(st.encoder, kTargetEncoder, grads, lr);
  if (proto_trainable) {
    opt.step(st.prototypes, kTargetPrototypes, grads, lr);
    st.prototypes = prototype_normalize(st.prototypes);
  }
  if (cfg.use_dal) opt.step(st.domain, kDomainClassifier, grads, lr);
  return values;
}

NamedTensors embedding_dump(const EncoderParams& src, const EncoderParams& tgt, const RowMatrix& target_x,
                            const CoreSet& core) {
  const RowMatrix zs = embed(src, target_x, true);
  const RowMatrix zt = embed(tgt, target_x, true);
  const Index n = target_x.rows();
  RowMatrix all(2 * n, zs.cols());
  all.topRows(n) = zs;
  all.bottomRows(n) = zt;
  Eigen::VectorXd tags(2 * n);
  tags.head(n).setZero();
  tags.tail(n).setOnes();
  Eigen::VectorXd selected(static_cast<Index>(core.selected.size()));
  for (std::size_t i = 0; i < core.selected.size(); ++i) selected[static_cast<Index>(i)] = static_cast<double>(core.selected[i]);
  NamedTensors out;
  out["embeddings"] = Tensor::from_matrix(all);
  out["domain"] = Tensor::vector(tags);
  if (selected.size() > 0) out["core_set"] = Tensor::vector(selected);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Metrics

std::string MetricsRecord::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["epoch"] = epoch;
  j["swap"] = swap;
  j["dal"] = dal;
  j["ent"] = ent;
  j["vat"] = vat;
  j["total"] = total;
  j["core_set_size"] = core_set_size;
  j["source_probe_acc"] = source_probe_acc;
  j["target_acc"] = target_acc;
  j["wall_clock_ms"] = wall_clock_ms;
  return j.dump();
}

MetricsRecord MetricsRecord::from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    MetricsRecord r;
    r.stage = j.at("stage").get<std::int64_t>();
    r.epoch = j.at("epoch").get<std::int64_t>();
    r.swap = j.at("swap").get<double>();
    r.dal = j.at("dal").get<double>();
    r.ent = j.at("ent").get<double>();
    r.vat = j.at("vat").get<double>();
    r.total = j.at("total").get<double>();
    r.core_set_size = j.at("core_set_size").get<Index>();
    r.source_probe_acc = j.at("source_probe_acc").get<double>();
    r.target_acc = j.at("target_acc").get<double>();
    r.wall_clock_ms = j.at("wall_clock_ms").get<double>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("metrics record: ") + e.what());
  }
}

std::vector<MetricsRecord> read_metrics_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics file '" + path + "'");
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(MetricsRecord::from_json(line));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

LinearProbe::LinearProbe(const RowMatrix& features, const std::vector<int>& labels, int n_classes, const ProbeConfig& cfg) {
  const Index n = features.rows();
  const Index d = features.cols();
  if (n == 0 || static_cast<Index>(labels.size()) != n) throw ContractError("probe: features and labels disagree");
  mean_ = features.colwise().mean();
  const RowMatrix centered = features.rowwise() - mean_;
  const Eigen::RowVectorXd sd = (centered.array().square().colwise().sum() / static_cast<double>(n)).sqrt();
  inv_std_ = (sd.array() > 1e-12).select(sd.array().inverse(), 1.0);
  const RowMatrix f = centered.array().rowwise() * inv_std_.array();

  RowMatrix y = RowMatrix::Zero(n, n_classes);
  for (Index i = 0; i < n; ++i) y(i, labels[static_cast<std::size_t>(i)]) = 1.0;
  weight_ = RowMatrix::Zero(d, n_classes);
  bias_ = Eigen::RowVectorXd::Zero(n_classes);
  for (int s = 0; s < cfg.steps; ++s) {
    RowMatrix logits = f * weight_;
    logits.rowwise() += bias_;
    const RowMatrix g = (softmax_rows(logits) - y) / static_cast<double>(n);
    weight_ -= cfg.lr * (f.transpose() * g);
    bias_ -= cfg.lr * g.colwise().sum();
  }
}

std::vector<int> LinearProbe::predict(const RowMatrix& features) const {
  const RowMatrix f = (features.rowwise() - mean_).array().rowwise() * inv_std_.array();
  RowMatrix logits = f * weight_;
  logits.rowwise() += bias_;
  std::vector<int> out(static_cast<std::size_t>(features.rows()));
  for (Index i = 0; i < logits.rows(); ++i) {
    Index arg = 0;
    logits.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

double LinearProbe::accuracy(const RowMatrix& features, const std::vector<int>& labels) const {
  const std::vector<int> pred = predict(features);
  if (pred.empty()) return 0.0;
  Index hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

Evaluator::Evaluator(DatasetBundle bundle, ProbeConfig cfg) : bundle_(std::move(bundle)), cfg_(cfg) {}

EvalResult Evaluator::evaluate(const EncoderParams& encoder) const {
  const auto features = [&](const RowMatrix& x) {
    return cfg_.features == ProbeFeatures::kEmbedding ? embed(encoder, x, true) : trunk_features(encoder, x);
  };
  const RowMatrix fs = features(bundle_.source.x);
  std::vector<Index> train_rows, hold_rows;
  std::vector<int> train_y, hold_y;
  for (Index i = 0; i < fs.rows(); ++i) {
    const int y = bundle_.source_y[static_cast<std::size_t>(i)];
    if (i % 5 == 4) {
      hold_rows.push_back(i);
      hold_y.push_back(y);
    } else {
      train_rows.push_back(i);
      train_y.push_back(y);
    }
  }
  const int n_classes = static_cast<int>(bundle_.spec.n_classes);
  const LinearProbe probe(gather(fs, train_rows), train_y, n_classes, cfg_);
  EvalResult r;
  r.source_probe_acc = hold_rows.empty() ? 0.0 : probe.accuracy(gather(fs, hold_rows), hold_y);
  r.target_acc = probe.accuracy(features(bundle_.target.x), bundle_.target_y_eval);
  return r;
}

EvalFn Evaluator::callback() const {
  return [this](const EncoderParams& enc) { return evaluate(enc); };
}

ProbeConfig probe_config(const RunConfig& cfg) { return {cfg.probe_steps, cfg.probe_lr, cfg.probe_features}; }

// ---------------------------------------------------------------------------
// Stage 0

Checkpoint initial_source_checkpoint(const RunConfig& cfg) {
  cfg.validate();
  const EncoderParams enc = make_encoder(model_widths(cfg), cfg.proj_dim, stream_seed(cfg, kEncoderInit));
  const Prototypes protos = make_prototypes(cfg.n_prototypes, cfg.proj_dim, stream_seed(cfg, kPrototypeInit));
  return source_checkpoint(cfg, enc, protos);
}

EncoderParams source_encoder(const Checkpoint& ckpt) { return import_encoder(ckpt.tensors, kSourceEncoder); }
EncoderParams target_encoder(const Checkpoint& ckpt) { return import_encoder(ckpt.tensors, kTargetEncoder); }

Checkpoint pretrain_source(const RunConfig& cfg, const ImageSet& source, const PipelineHooks& hooks) {
  cfg.validate();
  check_images(cfg, source, "pretrain");
  const Checkpoint init = initial_source_checkpoint(cfg);
  EncoderParams enc = source_encoder(init);
  Prototypes protos = import_prototypes(init.tensors, kSourcePrototypes);

  Sgd opt(cfg.pretrain_opt);
  const std::vector<Index> all = iota_indices(source.size());
  const long total = static_cast<long>(batches_per_epoch(source.size(), cfg.batch_size)) * cfg.pretrain_epochs;
  const ParamScope enc_scope{kSourceEncoder, true};
  const ParamScope proto_scope{kSourcePrototypes, true};
  const Stopwatch clock(cfg.log_timing);
  Checkpoint last_good = init;
  long step = 0;

  for (int epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    Accumulator acc;
    for (const auto& batch : minibatches(all, cfg.batch_size, stream_seed(cfg, kPretrainShuffle, epoch))) {
      const ViewPair views = augment_two_views(gather(source.x, batch), source.side,
                                               stream_seed(cfg, kPretrainViews, static_cast<std::uint64_t>(step)));
      Tape tape;
      const auto abort = [&](const std::string& why) {
        return TrainingAborted("pretrain: " + why + " at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(step),
                               last_good);
      };
      double value = 0.0;
      GradMap grads;
      try {
        Var za = encode(tape, enc, tape.constant(Tensor::from_matrix(views.a)), true, enc_scope);
        Var zb = encode(tape, enc, tape.constant(Tensor::from_matrix(views.b)), true, enc_scope);
        Var loss = swap_loss(tape, za, zb, protos, cfg.swap, proto_scope);
        value = loss.value().item();
        if (!std::isfinite(value)) throw abort("non-finite swap loss");
        grads = tape.backward(loss);
      } catch (const TrainingAborted&) {
        throw;
      } catch (const NumericError& e) {
        throw abort(e.what());
      }
      const double lr = cfg.pretrain_opt.lr_at(step, total);
      opt.step(enc, kSourceEncoder, grads, lr);
      opt.step(protos, kSourcePrototypes, grads, lr);
      protos = prototype_normalize(protos);
      acc.add({value, 0.0, 0.0, 0.0});
      ++step;
    }
    Checkpoint snapshot = source_checkpoint(cfg, enc, protos);
    if (!all_finite(snapshot.tensors)) {
      throw TrainingAborted("pretrain: non-finite parameters after epoch " + std::to_string(epoch), last_good);
    }
    last_good = std::move(snapshot);

    const LossComponents mean = acc.mean();
    MetricsRecord rec;
    rec.stage = 0;
    rec.epoch = epoch;
    rec.swap = mean.swap;
    rec.total = total_loss(mean, cfg.weights);
    rec.wall_clock_ms = clock.elapsed_ms();
    emit(hooks, rec, enc);
  }
  return last_good;
}

// ---------------------------------------------------------------------------
// Adaptation cycles

AdaptResult adapt(const RunConfig& cfg, const Checkpoint& source, const ImageSet& target, const PipelineHooks& hooks) {
  cfg.validate();
  check_images(cfg, target, "adapt");
  if (cfg.budget_total > target.size()) {
    throw ConfigError("budget_total " + std::to_string(cfg.budget_total) + " exceeds the target pool of " +
                      std::to_string(target.size()));
  }
  const std::vector<Index> budgets = cycle_budgets(cfg.budget_total, cfg.n_cycles);
  const EncoderParams src_enc = source_encoder(source);
  const Prototypes src_protos = import_prototypes(source.tensors, kSourcePrototypes);
  check_compatible(cfg, src_enc, src_protos);

  const auto fresh_state = [&] {
    return TargetState{src_enc, src_protos,
                       make_domain_classifier(cfg.proj_dim, cfg.domain_hidden, stream_seed(cfg, kDomainInit))};
  };
  TargetState st = fresh_state();
  RotationClassifierParams rot = make_rotation_classifier(src_enc, cfg.dropout_rate, stream_seed(cfg, kRotationInit));
  const Stopwatch clock(cfg.log_timing);

  // The rotation pretext needs no labels, so the initial scorer sees the whole pool.
  train_rotation(cfg, rot, target.x, 0);

  CoreSet core{{}, cfg.budget_total, 0};
  if (hooks.embeddings) hooks.embeddings(0, embedding_dump(src_enc, st.encoder, target.x, core));

  const int stages = cfg.n_cycles - 1;
  std::vector<AcquisitionRecord> frozen_scores;
  PoolPartition frozen_partition;
  Sgd opt(cfg.target_opt);
  long step = 0;
  long cycle_one_steps = 0;
  AdaptResult result;

  // Cosine/multistep schedules span every adaptation step of the run (or of
  // one cycle without warm start).
  const auto steps_in_cycle = [&](int c) {
    Index size = 0;
    for (int i = 0; i < c; ++i) size += budgets[static_cast<std::size_t>(i)];
    return static_cast<long>(batches_per_epoch(size, cfg.batch_size)) * cfg.target_epochs;
  };
  long run_total = 0;
  for (int c = 1; c <= stages; ++c) run_total += steps_in_cycle(c);
  cycle_one_steps = steps_in_cycle(1);

  for (int c = 1; c <= stages; ++c) {
    std::vector<Index> remaining;
    {
      const std::set<Index> taken(core.selected.begin(), core.selected.end());
      for (Index i = 0; i < target.size(); ++i) {
        if (!taken.count(i)) remaining.push_back(i);
      }
    }

    std::vector<AcquisitionRecord> batch;
    if (cfg.rescore_each_cycle) {
      const auto scored = score_pool(cfg, remaining, target.x, st.encoder, st.prototypes, rot, c);
      const PoolPartition part = partition_pool(scored, stages - c + 1);
      batch = records_for(scored, part.batches.front());
    } else {
      if (c == 1) {
        frozen_scores = score_pool(cfg, remaining, target.x, st.encoder, st.prototypes, rot, c);
        frozen_partition = partition_pool(frozen_scores, stages);
      }
      batch = records_for(frozen_scores, frozen_partition.batches[static_cast<std::size_t>(c - 1)]);
    }
    core = select_topk(batch, core, budgets[static_cast<std::size_t>(c - 1)]);
    core.stage = c;
    result.cycle_sizes.push_back(core.budget_used());

    if (!cfg.warm_start) {
      st = fresh_state();
      opt = Sgd(cfg.target_opt);
      step = 0;
    }
    const long schedule_total = cfg.warm_start ? run_total : steps_in_cycle(c);

    for (int epoch = 0; epoch < cfg.target_epochs; ++epoch) {
      Accumulator acc;
      const std::uint64_t shuffle = static_cast<std::uint64_t>(c) * 1000 + static_cast<std::uint64_t>(epoch);
      for (const auto& mb : minibatches(core.selected, cfg.batch_size, stream_seed(cfg, kTargetShuffle, shuffle))) {
        double grl = cfg.weights.grl_lambda;
        if (cfg.grl_warmup && c == 1 && cycle_one_steps > 0) {
          grl *= std::min(1.0, static_cast<double>(step) / static_cast<double>(cycle_one_steps));
        }
        const std::uint64_t step_seed =
            mix_seed(stream_seed(cfg, kTargetViews, shuffle), static_cast<std::uint64_t>(acc.count));
        const double lr = cfg.target_opt.lr_at(step, schedule_total);
        acc.add(target_step(cfg, st, src_enc, gather(target.x, mb), grl, step_seed, opt, lr));
        ++step;
      }
      const LossComponents mean = acc.mean();
      MetricsRecord rec;
      rec.stage = c;
      rec.epoch = epoch;
      rec.swap = mean.swap;
      rec.dal = mean.dal;
      rec.ent = mean.ent;
      rec.vat = mean.vat;
      rec.total = total_loss(mean, cfg.weights);
      rec.core_set_size = core.budget_used();
      rec.wall_clock_ms = clock.elapsed_ms();
      emit(hooks, rec, st.encoder);
    }

    train_rotation(cfg, rot, gather(target.x, core.selected), static_cast<std::uint64_t>(c));
    if (hooks.embeddings) hooks.embeddings(c, embedding_dump(src_enc, st.encoder, target.x, core));
  }

  Checkpoint out;
  out.tensors = source.tensors;
  export_params(st.encoder, kTargetEncoder, out.tensors);
  export_params(st.prototypes, kTargetPrototypes, out.tensors);
  export_params(st.domain, kDomainClassifier, out.tensors);
  export_params(rot, kRotationModel, out.tensors);
  out.config_fingerprint = cfg.fingerprint();
  out.stage = stages;
  result.target = std::move(out);
  result.core = core;
  return result;
}

// ---------------------------------------------------------------------------
// Ablation

const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> variants = {
      {"hybrid", [](RunConfig& c) { c.acquisition = AcquisitionMode::kHybrid; }},
      {"uncertainty", [](RunConfig& c) { c.acquisition = AcquisitionMode::kUncertaintyOnly; }},
      {"random", [](RunConfig& c) { c.acquisition = AcquisitionMode::kRandom; }},
      {"consolidated", [](RunConfig& c) {
         c.use_dal = true;
         c.use_entropy = true;
         c.use_vat = true;
       }},
      {"dal_vat", [](RunConfig& c) {
         c.use_dal = true;
         c.use_entropy = false;
         c.use_vat = true;
       }},
      {"entropy", [](RunConfig& c) {
         c.use_dal = false;
         c.use_entropy = true;
         c.use_vat = false;
       }},
  };
  return variants;
}

const AblationVariant& find_variant(const std::string& name) {
  for (const auto& v : ablation_variants()) {
    if (v.name == name) return v;
  }
  throw ConfigError("unknown ablation variant '" + name +
                    "' (expected hybrid, uncertainty, random, consolidated, dal_vat or entropy)");
}

}  // namespace a3
