#include "a3/tensor.hpp"

#include "a3/errors.hpp"

#include <cstring>
#include <sstream>

namespace a3 {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_product(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) throw DimensionError("tensor: non-positive dimension in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor() : data_(Eigen::VectorXd::Zero(1)) {}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  data_ = Eigen::VectorXd::Zero(shape_product(shape_));
}

Tensor::Tensor(Shape shape, Eigen::VectorXd data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw DimensionError("tensor: shape " + shape_string(shape_) + " does not match data length " +
                         std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(double value) {
  Tensor t;
  t.data_[0] = value;
  return t;
}

Tensor Tensor::vector(const Eigen::Ref<const Eigen::VectorXd>& values) {
  return Tensor(Shape{values.size()}, values);
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  t.data_.setConstant(value);
  return t;
}

Index Tensor::rows() const {
  switch (shape_.size()) {
    case 0:
    case 1:
      return 1;
    case 2:
      return shape_[0];
    default:
      throw DimensionError("tensor: matrix view requested for rank-" + std::to_string(shape_.size()) +
                           " tensor " + shape_string(shape_));
  }
}

Index Tensor::cols() const {
  switch (shape_.size()) {
    case 0:
      return 1;
    case 1:
      return shape_[0];
    case 2:
      return shape_[1];
    default:
      throw DimensionError("tensor: matrix view requested for rank-" + std::to_string(shape_.size()) +
                           " tensor " + shape_string(shape_));
  }
}

Eigen::Map<RowMatrix> Tensor::matrix() { return {data_.data(), rows(), cols()}; }

Eigen::Map<const RowMatrix> Tensor::matrix() const { return {data_.data(), rows(), cols()}; }

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("tensor: item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace a3
