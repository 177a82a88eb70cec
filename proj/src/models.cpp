#include "a3/models.hpp"

#include "a3/errors.hpp"

#include <cmath>

namespace a3 {

Var ParamScope::bind(Tape& tape, const std::string& local, const Tensor& value) const {
  if (trainable) return tape.param(prefix + "." + local, value);
  return tape.constant(value);
}

DenseLayer make_dense(Index in, Index out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> u(-bound, bound);
  DenseLayer layer{Tensor(Shape{out, in}), Tensor(Shape{out})};
  for (Index i = 0; i < layer.weight.size(); ++i) layer.weight[i] = u(rng);
  for (Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = u(rng);
  return layer;
}

Var dense_forward(Tape& tape, const DenseLayer& layer, Var x, const ParamScope& scope, const std::string& name) {
  if (x.value().rank() != 2 || x.value().cols() != layer.in_dim()) {
    throw DimensionError(scope.prefix + "." + name + ": input shape " + shape_string(x.shape()) +
                         " does not match layer input width " + std::to_string(layer.in_dim()));
  }
  Var w = scope.bind(tape, name + ".weight", layer.weight);
  Var b = scope.bind(tape, name + ".bias", layer.bias);
  return add_bias(matmul(x, transpose(w)), b);
}

// ---------------------------------------------------------------------------
// Encoder

EncoderParams make_encoder(const std::vector<Index>& widths, Index proj_dim, std::uint64_t seed) {
  if (widths.size() < 2) throw ConfigError("encoder: need at least an input width and one hidden width");
  if (proj_dim <= 0) throw ConfigError("encoder: projection dimension must be positive");
  std::mt19937_64 rng(seed);
  EncoderParams p;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) p.layers.push_back(make_dense(widths[i], widths[i + 1], rng));
  const double bound = 1.0 / std::sqrt(static_cast<double>(widths.back()));
  std::uniform_real_distribution<double> u(-bound, bound);
  p.projection = Tensor(Shape{proj_dim, widths.back()});
  for (Index i = 0; i < p.projection.size(); ++i) p.projection[i] = u(rng);
  return p;
}

namespace {

void check_chain(const std::vector<DenseLayer>& layers, const std::string& who) {
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    if (layers[i].out_dim() != layers[i + 1].in_dim()) {
      throw DimensionError(who + ": layer " + std::to_string(i) + " output width " +
                           std::to_string(layers[i].out_dim()) + " does not feed layer " + std::to_string(i + 1) +
                           " input width " + std::to_string(layers[i + 1].in_dim()));
    }
  }
}

Var run_trunk(Tape& tape, const std::vector<DenseLayer>& layers, Var x, const ParamScope& scope) {
  check_chain(layers, scope.prefix);
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) h = relu(dense_forward(tape, layers[i], h, scope, "layer" + std::to_string(i)));
  return h;
}

}  // namespace

Var encoder_trunk(Tape& tape, const EncoderParams& params, Var x, const ParamScope& scope) {
  return run_trunk(tape, params.layers, x, scope);
}

Var encode(Tape& tape, const EncoderParams& params, Var x, bool normalize, const ParamScope& scope) {
  Var h = encoder_trunk(tape, params, x, scope);
  if (params.projection.cols() != params.feature_dim()) {
    throw DimensionError(scope.prefix + ": projection width does not match trunk output");
  }
  Var z = matmul(h, transpose(scope.bind(tape, "projection", params.projection)));
  return normalize ? l2_normalize(z, 1) : z;
}

RowMatrix embed(const EncoderParams& params, const RowMatrix& x, bool normalize) {
  Tape tape;
  return encode(tape, params, tape.constant(Tensor::from_matrix(x)), normalize, ParamScope::frozen("encoder"))
      .value()
      .matrix();
}

RowMatrix trunk_features(const EncoderParams& params, const RowMatrix& x) {
  Tape tape;
  return encoder_trunk(tape, params, tape.constant(Tensor::from_matrix(x)), ParamScope::frozen("encoder"))
      .value()
      .matrix();
}

// ---------------------------------------------------------------------------
// Prototypes

Prototypes make_prototypes(Index count, Index dim, std::uint64_t seed) {
  if (count <= 0 || dim <= 0) throw ConfigError("prototypes: count and dimension must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Prototypes c{Tensor(Shape{count, dim})};
  for (Index i = 0; i < c.weights.size(); ++i) c.weights[i] = n(rng);
  for (Index k = 0; k < count; ++k) c.weights.matrix().row(k).normalize();
  return c;
}

Var prototype_scores(Tape& tape, Var z, const Prototypes& c, double tau, const ParamScope& scope) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("prototype_scores: tau must be positive");
  if (z.value().rank() != 2 || z.value().cols() != c.dim()) {
    throw DimensionError("prototype_scores: embeddings " + shape_string(z.shape()) + " vs prototypes " +
                         shape_string(c.weights.shape()));
  }
  return matmul(z, transpose(scope.bind(tape, "weights", c.weights))) * (1.0 / tau);
}

RowMatrix prototype_scores(const RowMatrix& z, const Prototypes& c, double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw ConfigError("prototype_scores: tau must be positive");
  if (z.cols() != c.dim()) throw DimensionError("prototype_scores: embedding width does not match prototypes");
  return (z * c.weights.matrix().transpose()) / tau;
}

// ---------------------------------------------------------------------------
// Domain classifier

DomainClassifierParams make_domain_classifier(Index embed_dim, Index hidden, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  DomainClassifierParams p;
  p.hidden1 = make_dense(embed_dim, hidden, rng);
  p.hidden2 = make_dense(hidden, hidden, rng);
  p.head = make_dense(hidden, 1, rng);
  return p;
}

Var domain_logit(Tape& tape, const DomainClassifierParams& params, Var z, const ParamScope& scope) {
  Var h = relu(dense_forward(tape, params.hidden1, z, scope, "hidden1"));
  h = relu(dense_forward(tape, params.hidden2, h, scope, "hidden2"));
  return dense_forward(tape, params.head, h, scope, "head");
}

Var domain_prob(Tape& tape, const DomainClassifierParams& params, Var z, const ParamScope& scope) {
  return sigmoid(domain_logit(tape, params, z, scope));
}

// ---------------------------------------------------------------------------
// Rotation classifier

RotationClassifierParams make_rotation_classifier(const EncoderParams& source, double dropout_rate, std::uint64_t seed) {
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("rotation classifier: dropout rate must be in [0,1)");
  std::mt19937_64 rng(seed);
  RotationClassifierParams p;
  p.trunk = source.layers;
  p.head = make_dense(source.feature_dim(), kRotationClasses, rng);
  p.dropout_rate = dropout_rate;
  return p;
}

Var rotation_logits(Tape& tape, const RotationClassifierParams& params, Var x, const std::optional<Tensor>& mask,
                    const ParamScope& scope) {
  Var h = run_trunk(tape, params.trunk, x, scope);
  if (mask) {
    if (!mask->same_shape(h.value())) {
      throw DimensionError("rotation_predict: dropout mask " + shape_string(mask->shape()) +
                           " does not match penultimate activation " + shape_string(h.shape()));
    }
    h = dropout(h, *mask);
  }
  return dense_forward(tape, params.head, h, scope, "head");
}

Var rotation_predict(Tape& tape, const RotationClassifierParams& params, Var x, const std::optional<Tensor>& mask,
                     const ParamScope& scope) {
  return softmax(rotation_logits(tape, params, x, mask, scope), 1);
}

Tensor make_dropout_mask(Index rows, Index cols, double rate, std::mt19937_64& rng) {
  Tensor mask(Shape{rows, cols});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Index i = 0; i < mask.size(); ++i) mask[i] = u(rng) < rate ? 0.0 : 1.0;
  return mask;
}

// ---------------------------------------------------------------------------
// Enumeration and import

namespace {

void visit_dense(DenseLayer& l, const std::string& name, const ParamVisitor& f) {
  f(name + ".weight", l.weight);
  f(name + ".bias", l.bias);
}

const Tensor& require(const NamedTensors& t, const std::string& name) {
  auto it = t.find(name);
  if (it == t.end()) throw ContractError("checkpoint: missing tensor '" + name + "'");
  return it->second;
}

DenseLayer import_dense(const NamedTensors& t, const std::string& name) {
  DenseLayer l{require(t, name + ".weight"), require(t, name + ".bias")};
  if (l.weight.rank() != 2 || l.bias.rank() != 1 || l.bias.size() != l.weight.rows()) {
    throw DimensionError("checkpoint: inconsistent dense layer '" + name + "'");
  }
  return l;
}

std::vector<DenseLayer> import_layers(const NamedTensors& t, const std::string& prefix) {
  std::vector<DenseLayer> layers;
  for (int i = 0; t.count(prefix + ".layer" + std::to_string(i) + ".weight"); ++i) {
    layers.push_back(import_dense(t, prefix + ".layer" + std::to_string(i)));
  }
  if (layers.empty()) throw ContractError("checkpoint: no layers under '" + prefix + "'");
  check_chain(layers, prefix);
  return layers;
}

}  // namespace

void for_each_param(EncoderParams& p, const std::string& prefix, const ParamVisitor& f) {
  for (std::size_t i = 0; i < p.layers.size(); ++i) visit_dense(p.layers[i], prefix + ".layer" + std::to_string(i), f);
  f(prefix + ".projection", p.projection);
}

void for_each_param(Prototypes& p, const std::string& prefix, const ParamVisitor& f) { f(prefix + ".weights", p.weights); }

void for_each_param(DomainClassifierParams& p, const std::string& prefix, const ParamVisitor& f) {
  visit_dense(p.hidden1, prefix + ".hidden1", f);
  visit_dense(p.hidden2, prefix + ".hidden2", f);
  visit_dense(p.head, prefix + ".head", f);
}

void for_each_param(RotationClassifierParams& p, const std::string& prefix, const ParamVisitor& f) {
  for (std::size_t i = 0; i < p.trunk.size(); ++i) visit_dense(p.trunk[i], prefix + ".layer" + std::to_string(i), f);
  visit_dense(p.head, prefix + ".head", f);
}

EncoderParams import_encoder(const NamedTensors& tensors, const std::string& prefix) {
  EncoderParams p;
  p.layers = import_layers(tensors, prefix);
  p.projection = require(tensors, prefix + ".projection");
  if (p.projection.rank() != 2 || p.projection.cols() != p.feature_dim()) {
    throw DimensionError("checkpoint: projection does not match encoder trunk");
  }
  return p;
}

Prototypes import_prototypes(const NamedTensors& tensors, const std::string& prefix) {
  return Prototypes{require(tensors, prefix + ".weights")};
}

DomainClassifierParams import_domain_classifier(const NamedTensors& tensors, const std::string& prefix) {
  return {import_dense(tensors, prefix + ".hidden1"), import_dense(tensors, prefix + ".hidden2"),
          import_dense(tensors, prefix + ".head")};
}

RotationClassifierParams import_rotation_classifier(const NamedTensors& tensors, const std::string& prefix,
                                                    double dropout_rate) {
  RotationClassifierParams p;
  p.trunk = import_layers(tensors, prefix);
  p.head = import_dense(tensors, prefix + ".head");
  p.dropout_rate = dropout_rate;
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint files

std::string encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.put_bytes(kCheckpointMagic);
  write_tensors(w, ckpt.tensors);
  w.put_u64(ckpt.config_fingerprint);
  w.put_i64(ckpt.stage);
  return w.bytes();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  r.expect_magic(kCheckpointMagic);
  Checkpoint c;
  c.tensors = read_tensors(r);
  c.config_fingerprint = r.get_u64();
  c.stage = r.get_i64();
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint", r.offset());
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) { write_file(path, encode_checkpoint(ckpt)); }

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace a3
