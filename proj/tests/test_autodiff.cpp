#include "a3/autodiff.hpp"
#include "a3/errors.hpp"

#include "support/gradcheck.hpp"
#include "support/op_cases.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace a3;
using a3::testing::max_relative_error;
using a3::testing::random_tensor;

namespace {

Tensor mat(Index r, Index c, std::initializer_list<double> values) {
  Tensor t(Shape{r, c});
  Index i = 0;
  for (double v : values) t[i++] = v;
  return t;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor(Shape{2, 3}, Eigen::VectorXd::Zero(5)), DimensionError);
  EXPECT_THROW(Tensor(Shape{0, 3}), DimensionError);
  Tensor s;
  EXPECT_TRUE(s.is_scalar());
  EXPECT_EQ(s.size(), 1);
}

TEST(Autodiff, MatmulIdentity) {
  std::mt19937_64 rng(3);
  Tape tape;
  Tensor a = random_tensor({3, 3}, rng);
  Var out = matmul(tape.constant(Tensor::from_matrix(RowMatrix::Identity(3, 3))), tape.constant(a));
  EXPECT_TRUE(bitwise_equal(out.value(), a));
}

TEST(Autodiff, SoftmaxOfZerosIsUniform) {
  Tape tape;
  Var y = softmax(tape.constant(Tensor::vector(Eigen::Vector2d(0.0, 0.0))), 0);
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Autodiff, ReluBackwardMatchesFiniteDifferences) {
  // Oracle: central differences with h = 1e-6 give [0, 1] at x = [-1, 2].
  Tensor x = Tensor::vector(Eigen::Vector2d(-1.0, 2.0));
  auto f = [](Tape&, const std::vector<Var>& v) { return sum(relu(v[0])); };
  const auto numeric = a3::testing::numeric_gradients(f, {x}, 1e-6);
  EXPECT_NEAR(numeric[0][0], 0.0, 1e-9);
  EXPECT_NEAR(numeric[0][1], 1.0, 1e-9);

  Tape tape;
  GradMap g = tape.backward(sum(relu(tape.param("x", x))));
  EXPECT_EQ(g.at("x")[0], 0.0);
  EXPECT_EQ(g.at("x")[1], 1.0);
}

TEST(Autodiff, SumOfSquares) {
  Tape tape;
  Var x = tape.param("x", Tensor::vector(Eigen::Vector3d(1, 2, 3)));
  GradMap g = tape.backward(sum(x * x));
  EXPECT_EQ(g.at("x")[0], 2.0);
  EXPECT_EQ(g.at("x")[1], 4.0);
  EXPECT_EQ(g.at("x")[2], 6.0);
}

TEST(Autodiff, MeanSoftmaxMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    Tensor w = random_tensor({4, 4}, rng);
    Tensor x = random_tensor({4, 1}, rng);
    auto f = [x](Tape& t, const std::vector<Var>& v) { return mean(softmax(matmul(v[0], t.constant(x)), 0)); };
    EXPECT_LE(max_relative_error(f, {w}, 1e-5), 1e-4) << "seed " << seed;
  }
}

TEST(Autodiff, RepeatedParameterAccumulates) {
  std::mt19937_64 rng(11);
  Tensor w = random_tensor({3, 3}, rng);
  Tensor x1 = random_tensor({3, 2}, rng);
  Tensor x2 = random_tensor({3, 2}, rng);

  auto grad_of = [&](bool first, bool second) {
    Tape tape;
    Var loss = tape.constant(Tensor::scalar(0.0));
    if (first) loss = loss + sum(exp(matmul(tape.param("w", w), tape.constant(x1))));
    if (second) loss = loss + sum(relu(matmul(tape.param("w", w), tape.constant(x2))));
    return tape.backward(loss).at("w");
  };
  const Tensor both = grad_of(true, true);
  const Tensor a = grad_of(true, false);
  const Tensor b = grad_of(false, true);
  for (Index i = 0; i < both.size(); ++i) EXPECT_NEAR(both[i], a[i] + b[i], 1e-14);
}

TEST(Autodiff, RandomizedGradientCheckEveryOp) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& c : a3::testing::make_op_cases(seed)) {
      EXPECT_LE(max_relative_error(c.loss, c.inputs), 1e-4) << c.name << " seed " << seed;
    }
  }
}

TEST(Autodiff, AccumulationIsOrderIndependent) {
  std::mt19937_64 rng(5);
  Tensor w = random_tensor({4, 4}, rng);
  std::vector<Tensor> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(random_tensor({4, 3}, rng));

  auto grad_with_order = [&](std::vector<int> order) {
    Tape tape;
    std::vector<Var> terms;
    for (int i : order) terms.push_back(mean(softmax(matmul(tape.param("w", w), tape.constant(xs[i])), 1)));
    Var loss = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) loss = loss + terms[i];
    return tape.backward(loss).at("w");
  };
  const Tensor ref = grad_with_order({0, 1, 2, 3});
  EXPECT_TRUE(bitwise_equal(ref, grad_with_order({3, 1, 0, 2})));
  EXPECT_TRUE(bitwise_equal(ref, grad_with_order({2, 3, 1, 0})));
}

TEST(GradientReversal, ForwardIsBitwiseIdentity) {
  std::mt19937_64 rng(1);
  Tape tape;
  Tensor x = random_tensor({5, 3}, rng);
  EXPECT_TRUE(bitwise_equal(gradient_reversal(tape.constant(x), 0.7).value(), x));
}

TEST(GradientReversal, BackwardScalesByNegativeLambda) {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({3, 4}, rng);
  for (double lambda : {0.0, 0.3, 1.0, 2.5}) {
    Tape plain;
    GradMap ref = plain.backward(sum(exp(plain.param("x", x)) * plain.constant(w)));
    Tape rev;
    GradMap got = rev.backward(sum(exp(gradient_reversal(rev.param("x", x), lambda)) * rev.constant(w)));
    for (Index i = 0; i < x.size(); ++i) {
      EXPECT_EQ(got.at("x")[i], -lambda * ref.at("x")[i]);
    }
  }
}

TEST(GradientReversal, LambdaOneNegatesUpstream) {
  Tape tape;
  Tensor g = mat(1, 3, {1.0, -2.0, 0.5});
  GradMap grads = tape.backward(sum(gradient_reversal(tape.param("x", Tensor(Shape{1, 3})), 1.0) * tape.constant(g)));
  EXPECT_EQ(grads.at("x")[0], -1.0);
  EXPECT_EQ(grads.at("x")[1], 2.0);
  EXPECT_EQ(grads.at("x")[2], -0.5);
}

TEST(GradientReversal, RejectsBadLambda) {
  Tape tape;
  Var x = tape.constant(Tensor(Shape{2}));
  EXPECT_THROW(gradient_reversal(x, -1.0), ContractError);
  EXPECT_THROW(gradient_reversal(x, std::nan("")), ContractError);
}

TEST(Autodiff, ShapeErrorsNameOpAndShapes) {
  Tape tape;
  Var a = tape.constant(Tensor(Shape{2, 3}));
  Var b = tape.constant(Tensor(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
  }
  EXPECT_THROW(add(a, tape.constant(Tensor(Shape{3, 2}))), DimensionError);
  EXPECT_THROW(dropout(a, Tensor(Shape{3, 2})), DimensionError);
  EXPECT_THROW(softmax(a, 2), DimensionError);
}

TEST(Autodiff, BackwardContract) {
  Tape tape;
  Var x = tape.param("x", Tensor(Shape{2, 2}));
  EXPECT_THROW(tape.backward(x * 2.0), ContractError);
  Var loss = sum(x);
  tape.backward(loss);
  EXPECT_TRUE(tape.consumed());
  EXPECT_THROW(tape.backward(loss), ContractError);
  EXPECT_THROW(relu(x), ContractError);
}

TEST(Autodiff, DropoutMaskMustBeBinary) {
  Tape tape;
  Var x = tape.constant(Tensor(Shape{1, 2}));
  EXPECT_THROW(dropout(x, mat(1, 2, {1.0, 0.5})), ContractError);
}

TEST(Autodiff, ConstantsRecordNoGradient) {
  Tape tape;
  Var c = tape.constant(Tensor(Shape{2}));
  EXPECT_FALSE(exp(c).requires_grad());
  Var p = tape.param("p", Tensor(Shape{2}));
  EXPECT_TRUE((p + c).requires_grad());
}

TEST(Autodiff, L2NormalizeGuardsZeroVectors) {
  Tape tape;
  Var y = l2_normalize(tape.constant(Tensor(Shape{2, 3})), 1);
  EXPECT_TRUE(y.value().data().isZero());
  Tensor tiny = mat(1, 2, {3e-11, 4e-11});
  Var z = l2_normalize(tape.constant(tiny), 1);
  EXPECT_NEAR(z.value().matrix().row(0).norm(), 1.0, 1e-9);
}
