#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace a3 {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string shape_string(const Shape& shape);

/// Dense row-major f64 array. Rank 0 is a scalar holding one element.
///
/// Ranks up to 2 can be viewed as a matrix: a scalar is 1x1, a vector [n] is 1xn.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Eigen::VectorXd data);

  static Tensor scalar(double value);
  static Tensor vector(const Eigen::Ref<const Eigen::VectorXd>& values);
  static Tensor full(Shape shape, double value);

  template <typename Derived>
  static Tensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    Tensor t(Shape{m.rows(), m.cols()});
    t.matrix() = m;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
  Index size() const noexcept { return data_.size(); }
  Index rows() const;
  Index cols() const;

  Eigen::VectorXd& data() noexcept { return data_; }
  const Eigen::VectorXd& data() const noexcept { return data_; }

  Eigen::Map<RowMatrix> matrix();
  Eigen::Map<const RowMatrix> matrix() const;

  double item() const;
  double& operator[](Index i) { return data_[i]; }
  double operator[](Index i) const { return data_[i]; }

  bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
  bool is_scalar() const noexcept { return shape_.empty(); }

 private:
  Shape shape_;
  Eigen::VectorXd data_;
};

/// Shape and every bit of the payload match.
bool bitwise_equal(const Tensor& a, const Tensor& b);

Index shape_product(const Shape& shape);

}  // namespace a3
