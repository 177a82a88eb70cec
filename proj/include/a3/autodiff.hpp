#pragma once

// Reverse-mode differentiation over dense f64 tensors.
//
// A Tape records every operation applied to its Vars in append order. backward()
// walks the tape once in reverse and returns gradients keyed by parameter name.
// Tapes are single-use: after backward() no further operations may be recorded.

#include "a3/tensor.hpp"

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace a3 {

enum class OpKind {
  kLeaf,
  kMatmul,
  kTranspose,
  kAdd,
  kMul,
  kAddBias,
  kRelu,
  kSigmoid,
  kLog,
  kExp,
  kSoftmax,
  kLogSoftmax,
  kL2Normalize,
  kMean,
  kSum,
  kConcat,
  kSlice,
  kDropout,
  kClamp,
  kGradientReversal,
};

std::string_view op_name(OpKind kind);

class Tape;

/// Handle to a tensor recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using GradMap = std::map<std::string, Tensor>;

class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& out_grad, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);

  /// Named trainable leaf. Registering the same name twice returns the same
  /// handle, so repeated uses accumulate into one gradient.
  Var param(const std::string& name, const Tensor& value);

  /// Gradients of a scalar loss for every registered parameter. Consumes the tape.
  GradMap backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  // Op-implementation interface.
  Var record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward);
  void accumulate(std::size_t id, Tensor grad);
  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
    std::string name;
    std::vector<Tensor> pending;
  };

  Tensor reduce_pending(Node& node) const;

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t, std::less<>> params_;
  bool consumed_ = false;
};

// Elementwise arithmetic. Operands must share a shape or one must be a scalar.
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var add(Var a, double c);
Var mul(Var a, double c);

Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator-(Var a);
Var operator+(Var a, double c);
Var operator+(double c, Var a);
Var operator-(double c, Var a);
Var operator*(Var a, double c);
Var operator*(double c, Var a);

Var matmul(Var a, Var b);
Var transpose(Var a);
/// x: BxD, bias: [D]. Adds the bias to every row.
Var add_bias(Var x, Var bias);

Var relu(Var x);
Var sigmoid(Var x);
Var log(Var x);
Var exp(Var x);
Var clamp(Var x, double lo, double hi);

Var softmax(Var x, int axis);
Var log_softmax(Var x, int axis);
/// Unit L2 norm along an axis. Slices with norm below 1e-12 are divided by (norm + 1e-12).
Var l2_normalize(Var x, int axis);

Var sum(Var x);
Var mean(Var x);

Var concat(const std::vector<Var>& parts, int axis);
Var slice(Var x, int axis, Index start, Index length);

/// x ∘ mask for a caller-supplied 0/1 mask of the same shape.
Var dropout(Var x, const Tensor& mask);

/// Identity forward; backward multiplies the upstream gradient by -lambda.
Var gradient_reversal(Var x, double lambda);

/// Guard used by every L2 normalization in the project.
inline constexpr double kNormGuard = 1e-12;

}  // namespace a3
