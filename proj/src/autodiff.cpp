#include "a3/autodiff.hpp"

#include "a3/errors.hpp"

#include <algorithm>
#include <cmath>

namespace a3 {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLog: return "log";
    case OpKind::kExp: return "exp";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kL2Normalize: return "l2_normalize";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kDropout: return "dropout";
    case OpKind::kClamp: return "clamp";
    case OpKind::kGradientReversal: return "gradient_reversal";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("var: use of an unbound variable");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) { return record(OpKind::kLeaf, {}, std::move(value), nullptr); }

Var Tape::param(const std::string& name, const Tensor& value) {
  if (auto it = params_.find(name); it != params_.end()) {
    if (!bitwise_equal(nodes_[it->second].value, value)) {
      throw ContractError("tape: parameter '" + name + "' registered twice with different values");
    }
    return Var(this, it->second);
  }
  Var v = record(OpKind::kLeaf, {}, value, nullptr);
  nodes_[v.id()].requires_grad = true;
  nodes_[v.id()].name = name;
  params_.emplace(name, v.id());
  return v;
}

Var Tape::record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward) {
  if (consumed_) throw ContractError("tape: cannot record '" + std::string(op_name(kind)) + "' on a consumed tape");
  Node node;
  node.kind = kind;
  node.value = std::move(value);
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].requires_grad; });
  if (node.requires_grad) node.backward = std::move(backward);
  node.inputs = std::move(inputs);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::size_t id, Tensor grad) {
  Node& node = nodes_[id];
  if (!node.requires_grad) return;
  node.pending.push_back(std::move(grad));
}

// Contributions are summed in a canonical order (per element, ascending) so the
// result does not depend on the order in which graph branches were visited.
Tensor Tape::reduce_pending(Node& node) const {
  auto& pending = node.pending;
  if (pending.size() == 1) return std::move(pending.front());
  Tensor out(node.value.shape());
  if (pending.size() == 2) {
    out.data() = pending[0].data() + pending[1].data();
    return out;
  }
  std::vector<double> column(pending.size());
  for (Index i = 0; i < out.size(); ++i) {
    for (std::size_t k = 0; k < pending.size(); ++k) column[k] = pending[k].data()[i];
    std::sort(column.begin(), column.end());
    double acc = 0.0;
    for (double c : column) acc += c;
    out.data()[i] = acc;
  }
  return out;
}

GradMap Tape::backward(Var loss) {
  if (loss.tape() != this) throw ContractError("backward: loss does not belong to this tape");
  if (consumed_) throw ContractError("backward: tape already consumed");
  if (!loss.value().is_scalar()) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  consumed_ = true;

  GradMap grads;
  for (const auto& [name, id] : params_) grads.emplace(name, Tensor(nodes_[id].value.shape()));

  if (!nodes_[loss.id()].requires_grad) return grads;
  nodes_[loss.id()].pending.push_back(Tensor::scalar(1.0));

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.pending.empty()) continue;
    Tensor g = reduce_pending(node);
    node.pending.clear();
    if (node.backward) {
      node.backward(g, *this);
      node.backward = nullptr;
    } else if (!node.name.empty()) {
      grads[node.name] = std::move(g);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

[[noreturn]] void shape_mismatch(OpKind kind, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(op_name(kind)) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                       shape_string(b.shape()));
}

void same_tape(OpKind kind, const Var& a, const Var& b) {
  if (a.tape() != b.tape() || !a.valid()) {
    throw ContractError(std::string(op_name(kind)) + ": operands recorded on different tapes");
  }
}

void require_rank2(OpKind kind, const Tensor& t) {
  if (t.rank() != 2) throw DimensionError(std::string(op_name(kind)) + ": expected a rank-2 tensor, got shape " + shape_string(t.shape()));
}

Tensor sum_to_scalar(const Tensor& g) { return Tensor::scalar(g.data().sum()); }

// Rows of the returned matrix are the slices along `axis`.
RowMatrix to_slices(OpKind kind, const Tensor& t, int axis) {
  if (t.rank() == 1 && axis == 0) return t.matrix();
  if (t.rank() == 2 && axis == 1) return t.matrix();
  if (t.rank() == 2 && axis == 0) return t.matrix().transpose();
  throw DimensionError(std::string(op_name(kind)) + ": axis " + std::to_string(axis) + " invalid for shape " +
                       shape_string(t.shape()));
}

Tensor from_slices(const RowMatrix& s, const Shape& shape, int axis) {
  Tensor out(shape);
  if (shape.size() == 2 && axis == 0) {
    out.matrix() = s.transpose();
  } else {
    out.matrix() = s;
  }
  return out;
}

template <typename Fwd, typename Bwd>
Var unary(OpKind kind, Var x, Fwd&& forward, Bwd&& backward) {
  Tensor out(x.shape());
  forward(x.value().data(), out.data());
  const std::size_t xi = x.id();
  Tape* tape = x.tape();
  auto bwd = [xi, backward](const Tensor& g, Tape& t) {
    Tensor gx(g.shape());
    backward(g.data(), t.value(xi).data(), gx.data());
    t.accumulate(xi, std::move(gx));
  };
  return tape->record(kind, {xi}, std::move(out), bwd);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  same_tape(OpKind::kAdd, a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t ai = a.id(), bi = b.id();
  if (av.same_shape(bv)) {
    Tensor out(av.shape(), av.data() + bv.data());
    return a.tape()->record(OpKind::kAdd, {ai, bi}, std::move(out), [ai, bi](const Tensor& g, Tape& t) {
      t.accumulate(ai, g);
      t.accumulate(bi, g);
    });
  }
  if (bv.is_scalar() || av.is_scalar()) {
    const bool b_scalar = bv.is_scalar();
    const Tensor& big = b_scalar ? av : bv;
    const double s = b_scalar ? bv.item() : av.item();
    Tensor out(big.shape(), (big.data().array() + s).matrix());
    const std::size_t big_i = b_scalar ? ai : bi;
    const std::size_t small_i = b_scalar ? bi : ai;
    return a.tape()->record(OpKind::kAdd, {ai, bi}, std::move(out), [big_i, small_i](const Tensor& g, Tape& t) {
      t.accumulate(big_i, g);
      t.accumulate(small_i, sum_to_scalar(g));
    });
  }
  shape_mismatch(OpKind::kAdd, av, bv);
}

Var mul(Var a, Var b) {
  same_tape(OpKind::kMul, a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t ai = a.id(), bi = b.id();
  if (av.same_shape(bv)) {
    Tensor out(av.shape(), av.data().cwiseProduct(bv.data()));
    return a.tape()->record(OpKind::kMul, {ai, bi}, std::move(out), [ai, bi](const Tensor& g, Tape& t) {
      if (t.requires_grad(ai)) t.accumulate(ai, Tensor(g.shape(), g.data().cwiseProduct(t.value(bi).data())));
      if (t.requires_grad(bi)) t.accumulate(bi, Tensor(g.shape(), g.data().cwiseProduct(t.value(ai).data())));
    });
  }
  if (bv.is_scalar() || av.is_scalar()) {
    const bool b_scalar = bv.is_scalar();
    const std::size_t big_i = b_scalar ? ai : bi;
    const std::size_t small_i = b_scalar ? bi : ai;
    const Tensor& big = b_scalar ? av : bv;
    const double s = b_scalar ? bv.item() : av.item();
    Tensor out(big.shape(), big.data() * s);
    return a.tape()->record(OpKind::kMul, {ai, bi}, std::move(out), [big_i, small_i](const Tensor& g, Tape& t) {
      const double s = t.value(small_i).item();
      if (t.requires_grad(big_i)) t.accumulate(big_i, Tensor(g.shape(), g.data() * s));
      if (t.requires_grad(small_i)) t.accumulate(small_i, Tensor::scalar(g.data().dot(t.value(big_i).data())));
    });
  }
  shape_mismatch(OpKind::kMul, av, bv);
}

Var add(Var a, double c) { return add(a, a.tape()->constant(Tensor::scalar(c))); }
Var mul(Var a, double c) { return mul(a, a.tape()->constant(Tensor::scalar(c))); }

Var operator+(Var a, Var b) { return add(a, b); }
Var operator-(Var a, Var b) { return add(a, mul(b, -1.0)); }
Var operator*(Var a, Var b) { return mul(a, b); }
Var operator-(Var a) { return mul(a, -1.0); }
Var operator+(Var a, double c) { return add(a, c); }
Var operator+(double c, Var a) { return add(a, c); }
Var operator-(double c, Var a) { return add(mul(a, -1.0), c); }
Var operator*(Var a, double c) { return mul(a, c); }
Var operator*(double c, Var a) { return mul(a, c); }

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  same_tape(OpKind::kMatmul, a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) shape_mismatch(OpKind::kMatmul, av, bv);
  Tensor out(Shape{av.rows(), bv.cols()});
  out.matrix().noalias() = av.matrix() * bv.matrix();
  const std::size_t ai = a.id(), bi = b.id();
  return a.tape()->record(OpKind::kMatmul, {ai, bi}, std::move(out), [ai, bi](const Tensor& g, Tape& t) {
    const Tensor& A = t.value(ai);
    const Tensor& B = t.value(bi);
    if (t.requires_grad(ai)) {
      Tensor ga(A.shape());
      ga.matrix().noalias() = g.matrix() * B.matrix().transpose();
      t.accumulate(ai, std::move(ga));
    }
    if (t.requires_grad(bi)) {
      Tensor gb(B.shape());
      gb.matrix().noalias() = A.matrix().transpose() * g.matrix();
      t.accumulate(bi, std::move(gb));
    }
  });
}

Var transpose(Var a) {
  require_rank2(OpKind::kTranspose, a.value());
  Tensor out(Shape{a.value().cols(), a.value().rows()});
  out.matrix() = a.value().matrix().transpose();
  const std::size_t ai = a.id();
  return a.tape()->record(OpKind::kTranspose, {ai}, std::move(out), [ai](const Tensor& g, Tape& t) {
    Tensor ga(t.value(ai).shape());
    ga.matrix() = g.matrix().transpose();
    t.accumulate(ai, std::move(ga));
  });
}

Var add_bias(Var x, Var bias) {
  same_tape(OpKind::kAddBias, x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (xv.rank() != 2 || bv.rank() != 1 || bv.size() != xv.cols()) shape_mismatch(OpKind::kAddBias, xv, bv);
  Tensor out(xv.shape());
  out.matrix() = xv.matrix().rowwise() + bv.matrix().row(0);
  const std::size_t xi = x.id(), bi = bias.id();
  return x.tape()->record(OpKind::kAddBias, {xi, bi}, std::move(out), [xi, bi](const Tensor& g, Tape& t) {
    t.accumulate(xi, g);
    if (t.requires_grad(bi)) {
      Tensor gb(t.value(bi).shape());
      gb.matrix() = g.matrix().colwise().sum();
      t.accumulate(bi, std::move(gb));
    }
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

Var relu(Var x) {
  return unary(
      OpKind::kRelu, x, [](const auto& in, auto& out) { out = in.cwiseMax(0.0); },
      [](const auto& g, const auto& in, auto& gx) { gx = (in.array() > 0.0).select(g, 0.0); });
}

namespace {
double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(Var x) {
  return unary(
      OpKind::kSigmoid, x, [](const auto& in, auto& out) { out = in.unaryExpr(&stable_sigmoid); },
      [](const auto& g, const auto& in, auto& gx) {
        const Eigen::ArrayXd s = in.unaryExpr(&stable_sigmoid).array();
        gx = (g.array() * s * (1.0 - s)).matrix();
      });
}

Var log(Var x) {
  return unary(
      OpKind::kLog, x, [](const auto& in, auto& out) { out = in.array().log().matrix(); },
      [](const auto& g, const auto& in, auto& gx) { gx = (g.array() / in.array()).matrix(); });
}

Var exp(Var x) {
  return unary(
      OpKind::kExp, x, [](const auto& in, auto& out) { out = in.array().exp().matrix(); },
      [](const auto& g, const auto& in, auto& gx) { gx = (g.array() * in.array().exp()).matrix(); });
}

Var clamp(Var x, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lower bound exceeds upper bound");
  return unary(
      OpKind::kClamp, x, [lo, hi](const auto& in, auto& out) { out = in.cwiseMax(lo).cwiseMin(hi); },
      [lo, hi](const auto& g, const auto& in, auto& gx) {
        gx = (in.array() >= lo && in.array() <= hi).select(g, 0.0);
      });
}

// ---------------------------------------------------------------------------
// Axis-wise ops

namespace {

RowMatrix softmax_rows(const RowMatrix& x) {
  RowMatrix y = (x.colwise() - x.rowwise().maxCoeff()).array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  return y;
}

RowMatrix log_softmax_rows(const RowMatrix& x) {
  const Eigen::VectorXd m = x.rowwise().maxCoeff();
  RowMatrix shifted = x.colwise() - m;
  const Eigen::VectorXd lse = shifted.array().exp().rowwise().sum().log().matrix();
  return shifted.colwise() - lse;
}

double guarded_divisor(double norm) { return norm < kNormGuard ? norm + kNormGuard : norm; }

}  // namespace

Var softmax(Var x, int axis) {
  const Shape shape = x.shape();
  RowMatrix s = to_slices(OpKind::kSoftmax, x.value(), axis);
  Tensor out = from_slices(softmax_rows(s), shape, axis);
  const std::size_t xi = x.id();
  return x.tape()->record(OpKind::kSoftmax, {xi}, std::move(out), [xi, axis, shape](const Tensor& g, Tape& t) {
    const RowMatrix y = softmax_rows(to_slices(OpKind::kSoftmax, t.value(xi), axis));
    const RowMatrix gs = to_slices(OpKind::kSoftmax, g, axis);
    const Eigen::VectorXd dot = gs.cwiseProduct(y).rowwise().sum();
    RowMatrix gx = y.cwiseProduct(gs.colwise() - dot);
    t.accumulate(xi, from_slices(gx, shape, axis));
  });
}

Var log_softmax(Var x, int axis) {
  const Shape shape = x.shape();
  RowMatrix s = to_slices(OpKind::kLogSoftmax, x.value(), axis);
  Tensor out = from_slices(log_softmax_rows(s), shape, axis);
  const std::size_t xi = x.id();
  return x.tape()->record(OpKind::kLogSoftmax, {xi}, std::move(out), [xi, axis, shape](const Tensor& g, Tape& t) {
    const RowMatrix y = softmax_rows(to_slices(OpKind::kLogSoftmax, t.value(xi), axis));
    const RowMatrix gs = to_slices(OpKind::kLogSoftmax, g, axis);
    const Eigen::VectorXd total = gs.rowwise().sum();
    RowMatrix gx = gs - (y.array().colwise() * total.array()).matrix();
    t.accumulate(xi, from_slices(gx, shape, axis));
  });
}

Var l2_normalize(Var x, int axis) {
  const Shape shape = x.shape();
  RowMatrix s = to_slices(OpKind::kL2Normalize, x.value(), axis);
  const Eigen::VectorXd norms = s.rowwise().norm();
  for (Index r = 0; r < s.rows(); ++r) s.row(r) /= guarded_divisor(norms[r]);
  Tensor out = from_slices(s, shape, axis);
  const std::size_t xi = x.id();
  return x.tape()->record(OpKind::kL2Normalize, {xi}, std::move(out), [xi, axis, shape](const Tensor& g, Tape& t) {
    const RowMatrix xs = to_slices(OpKind::kL2Normalize, t.value(xi), axis);
    const RowMatrix gs = to_slices(OpKind::kL2Normalize, g, axis);
    RowMatrix gx(xs.rows(), xs.cols());
    for (Index r = 0; r < xs.rows(); ++r) {
      const double n = xs.row(r).norm();
      const double d = guarded_divisor(n);
      if (n == 0.0) {
        gx.row(r) = gs.row(r) / d;
        continue;
      }
      const double xg = xs.row(r).dot(gs.row(r));
      gx.row(r) = gs.row(r) / d - xs.row(r) * (xg / (n * d * d));
    }
    t.accumulate(xi, from_slices(gx, shape, axis));
  });
}

Var sum(Var x) {
  const std::size_t xi = x.id();
  return x.tape()->record(OpKind::kSum, {xi}, Tensor::scalar(x.value().data().sum()), [xi](const Tensor& g, Tape& t) {
    t.accumulate(xi, Tensor::full(t.value(xi).shape(), g.item()));
  });
}

Var mean(Var x) {
  const std::size_t xi = x.id();
  const double n = static_cast<double>(x.value().size());
  return x.tape()->record(OpKind::kMean, {xi}, Tensor::scalar(x.value().data().sum() / n),
                          [xi, n](const Tensor& g, Tape& t) {
                            t.accumulate(xi, Tensor::full(t.value(xi).shape(), g.item() / n));
                          });
}

// ---------------------------------------------------------------------------
// Structural

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  if (axis != 0 && axis != 1) throw DimensionError("concat: axis must be 0 or 1");
  const Tensor& first = parts.front().value();
  require_rank2(OpKind::kConcat, first);
  Index total = 0;
  std::vector<std::size_t> ids;
  for (const Var& p : parts) {
    same_tape(OpKind::kConcat, parts.front(), p);
    const Tensor& v = p.value();
    require_rank2(OpKind::kConcat, v);
    const bool ok = axis == 0 ? v.cols() == first.cols() : v.rows() == first.rows();
    if (!ok) shape_mismatch(OpKind::kConcat, first, v);
    total += axis == 0 ? v.rows() : v.cols();
    ids.push_back(p.id());
  }
  Tensor out(axis == 0 ? Shape{total, first.cols()} : Shape{first.rows(), total});
  Index offset = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    if (axis == 0) {
      out.matrix().middleRows(offset, v.rows()) = v.matrix();
      offset += v.rows();
    } else {
      out.matrix().middleCols(offset, v.cols()) = v.matrix();
      offset += v.cols();
    }
  }
  return parts.front().tape()->record(OpKind::kConcat, ids, std::move(out), [ids, axis](const Tensor& g, Tape& t) {
    Index off = 0;
    for (std::size_t id : ids) {
      const Tensor& v = t.value(id);
      const Index n = axis == 0 ? v.rows() : v.cols();
      if (t.requires_grad(id)) {
        Tensor gi(v.shape());
        gi.matrix() = axis == 0 ? RowMatrix(g.matrix().middleRows(off, n)) : RowMatrix(g.matrix().middleCols(off, n));
        t.accumulate(id, std::move(gi));
      }
      off += n;
    }
  });
}

Var slice(Var x, int axis, Index start, Index length) {
  const Tensor& v = x.value();
  require_rank2(OpKind::kSlice, v);
  if (axis != 0 && axis != 1) throw DimensionError("slice: axis must be 0 or 1");
  const Index extent = axis == 0 ? v.rows() : v.cols();
  if (start < 0 || length <= 0 || start + length > extent) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of bounds for shape " + shape_string(v.shape()));
  }
  Tensor out(axis == 0 ? Shape{length, v.cols()} : Shape{v.rows(), length});
  out.matrix() = axis == 0 ? RowMatrix(v.matrix().middleRows(start, length)) : RowMatrix(v.matrix().middleCols(start, length));
  const std::size_t xi = x.id();
  return x.tape()->record(OpKind::kSlice, {xi}, std::move(out), [xi, axis, start, length](const Tensor& g, Tape& t) {
    Tensor gx(t.value(xi).shape());
    if (axis == 0) {
      gx.matrix().middleRows(start, length) = g.matrix();
    } else {
      gx.matrix().middleCols(start, length) = g.matrix();
    }
    t.accumulate(xi, std::move(gx));
  });
}

Var dropout(Var x, const Tensor& mask) {
  if (!x.value().same_shape(mask)) shape_mismatch(OpKind::kDropout, x.value(), mask);
  for (Index i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0.0 && mask[i] != 1.0) throw ContractError("dropout: mask entries must be 0 or 1");
  }
  Tensor out(x.shape(), x.value().data().cwiseProduct(mask.data()));
  const std::size_t xi = x.id();
  return x.tape()->record(OpKind::kDropout, {xi}, std::move(out), [xi, mask](const Tensor& g, Tape& t) {
    t.accumulate(xi, Tensor(g.shape(), g.data().cwiseProduct(mask.data())));
  });
}

Var gradient_reversal(Var x, double lambda) {
  if (!std::isfinite(lambda) || lambda < 0.0) {
    throw ContractError("gradient_reversal: lambda must be finite and nonnegative");
  }
  const std::size_t xi = x.id();
  return x.tape()->record(OpKind::kGradientReversal, {xi}, x.value(), [xi, lambda](const Tensor& g, Tape& t) {
    t.accumulate(xi, Tensor(g.shape(), g.data() * (-lambda)));
  });
}

}  // namespace a3
