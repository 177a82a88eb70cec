#pragma once

// Parameter containers and forward passes for the encoder (MLP trunk plus
// projection head), the prototype matrix, the domain classifier and the
// rotation-pretext classifier used as the Bayesian scoring model.

#include "a3/autodiff.hpp"
#include "a3/tensor_io.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace a3 {

/// Binds parameter tensors onto a tape under a name prefix, either as trainable
/// leaves or as constants (frozen models, VAT probes).
struct ParamScope {
  std::string prefix;
  bool trainable = true;

  Var bind(Tape& tape, const std::string& local, const Tensor& value) const;
  static ParamScope frozen(std::string prefix) { return {std::move(prefix), false}; }
};

struct DenseLayer {
  Tensor weight;  // out x in
  Tensor bias;    // [out]

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }
};

DenseLayer make_dense(Index in, Index out, std::mt19937_64& rng);
Var dense_forward(Tape& tape, const DenseLayer& layer, Var x, const ParamScope& scope, const std::string& name);

struct EncoderParams {
  std::vector<DenseLayer> layers;  // ReLU after each layer
  Tensor projection;               // p x d_last

  Index input_dim() const { return layers.front().in_dim(); }
  Index feature_dim() const { return layers.back().out_dim(); }
  Index embed_dim() const { return projection.rows(); }
};

/// widths = [d_in, h1, ..., hL]; projection maps hL to proj_dim.
EncoderParams make_encoder(const std::vector<Index>& widths, Index proj_dim, std::uint64_t seed);

/// Penultimate activations (after the last ReLU, before projection).
Var encoder_trunk(Tape& tape, const EncoderParams& params, Var x, const ParamScope& scope);
Var encode(Tape& tape, const EncoderParams& params, Var x, bool normalize, const ParamScope& scope);

RowMatrix embed(const EncoderParams& params, const RowMatrix& x, bool normalize);
RowMatrix trunk_features(const EncoderParams& params, const RowMatrix& x);

struct Prototypes {
  Tensor weights;  // K x p

  Index count() const { return weights.rows(); }
  Index dim() const { return weights.cols(); }
};

Prototypes make_prototypes(Index count, Index dim, std::uint64_t seed);

/// scores[i][k] = <z_i, c_k> / tau.
Var prototype_scores(Tape& tape, Var z, const Prototypes& c, double tau, const ParamScope& scope);
RowMatrix prototype_scores(const RowMatrix& z, const Prototypes& c, double tau);

struct DomainClassifierParams {
  DenseLayer hidden1;
  DenseLayer hidden2;
  DenseLayer head;  // single logit
};

DomainClassifierParams make_domain_classifier(Index embed_dim, Index hidden, std::uint64_t seed);
Var domain_logit(Tape& tape, const DomainClassifierParams& params, Var z, const ParamScope& scope);
/// B x 1 probabilities in (0, 1).
Var domain_prob(Tape& tape, const DomainClassifierParams& params, Var z, const ParamScope& scope);

inline constexpr Index kRotationClasses = 4;

struct RotationClassifierParams {
  std::vector<DenseLayer> trunk;
  DenseLayer head;  // 4 x d_last
  double dropout_rate = 0.25;

  Index feature_dim() const { return trunk.back().out_dim(); }
};

/// Trunk copied from the source encoder; fresh 4-way head.
RotationClassifierParams make_rotation_classifier(const EncoderParams& source, double dropout_rate, std::uint64_t seed);

/// Logits over the 4 rotation classes. mask (B x feature_dim) applies dropout
/// to the penultimate activation; without a mask dropout is disabled.
Var rotation_logits(Tape& tape, const RotationClassifierParams& params, Var x, const std::optional<Tensor>& mask,
                    const ParamScope& scope);
Var rotation_predict(Tape& tape, const RotationClassifierParams& params, Var x, const std::optional<Tensor>& mask,
                     const ParamScope& scope);

/// Bernoulli keep-mask with P(keep) = 1 - rate.
Tensor make_dropout_mask(Index rows, Index cols, double rate, std::mt19937_64& rng);

// Parameter enumeration: (full name, tensor) in a stable order.
using ParamVisitor = std::function<void(const std::string&, Tensor&)>;
void for_each_param(EncoderParams& p, const std::string& prefix, const ParamVisitor& f);
void for_each_param(Prototypes& p, const std::string& prefix, const ParamVisitor& f);
void for_each_param(DomainClassifierParams& p, const std::string& prefix, const ParamVisitor& f);
void for_each_param(RotationClassifierParams& p, const std::string& prefix, const ParamVisitor& f);

template <typename Params>
void export_params(Params p, const std::string& prefix, NamedTensors& out) {
  for_each_param(p, prefix, [&](const std::string& name, Tensor& t) { out[name] = t; });
}

EncoderParams import_encoder(const NamedTensors& tensors, const std::string& prefix);
Prototypes import_prototypes(const NamedTensors& tensors, const std::string& prefix);
DomainClassifierParams import_domain_classifier(const NamedTensors& tensors, const std::string& prefix);
RotationClassifierParams import_rotation_classifier(const NamedTensors& tensors, const std::string& prefix,
                                                    double dropout_rate);

struct Checkpoint {
  NamedTensors tensors;
  std::uint64_t config_fingerprint = 0;
  std::int64_t stage = 0;
};

inline constexpr std::string_view kCheckpointMagic = "A3CKPT1";

/// "A3CKPT1", tensor container, then u64 config fingerprint and i64 stage index.
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace a3
