#pragma once

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cranio/error.hpp"

namespace cranio {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// One vertex of the reverse-mode graph. Non-leaf nodes own a closure that
// reads `grad` and accumulates into their parents.
template <typename Scalar>
struct Node {
  Shape shape;
  Array<Scalar> value;
  Array<Scalar> grad;
  bool requires_grad = false;
  bool released = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Array<Scalar>& grad_buffer() {
    if (grad.size() != value.size()) grad = Array<Scalar>::Zero(value.size());
    return grad;
  }
  bool is_leaf() const { return !backward && parents.empty(); }
};

// Dense row-major n-d array that participates in the differentiation graph.
// Copies share the underlying node.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using ArrayType = Array<Scalar>;

  Tensor() = default;
  Tensor(Shape shape, ArrayType values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  Index dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  Index size() const;

  const ArrayType& values() const;
  Scalar item() const;
  Scalar at(Index flat_index) const { return values()[flat_index]; }

  bool requires_grad() const;
  bool has_grad() const;
  const ArrayType& grad() const;
  void zero_grad();

  // Replaces the values of a leaf. Used by optimizers and finite differences.
  void assign(ArrayType values);

  Tensor detach() const;
  void backward() const;

  const char* op_name() const;
  const std::shared_ptr<Node<Scalar>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Runs backward from a scalar loss and returns d(loss)/d(param) for each param,
// after clearing any previously accumulated gradient on them.
template <typename Scalar>
std::vector<Array<Scalar>> gradients(const Tensor<Scalar>& loss, std::vector<Tensor<Scalar>> params);

namespace detail {

template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape, Array<Scalar> value,
                           std::vector<Tensor<Scalar>> inputs,
                           std::function<void(Node<Scalar>&)> backward);

template <typename Scalar>
void require_finite(const char* op, const Array<Scalar>& values);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace cranio
