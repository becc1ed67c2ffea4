#include "cranio/tensor.hpp"

#include <sstream>
#include <unordered_set>

namespace cranio {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Shape: return "shape";
    case ErrorKind::NonFinite: return "non_finite";
    case ErrorKind::InvalidArgument: return "invalid_argument";
    case ErrorKind::State: return "state";
    case ErrorKind::NotFound: return "not_found";
    case ErrorKind::Io: return "io";
    case ErrorKind::Format: return "format";
    case ErrorKind::Range: return "range";
    case ErrorKind::Usage: return "usage";
    case ErrorKind::Diverged: return "diverged";
  }
  return "unknown";
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

namespace {
thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape, Index size) {
  for (Index d : shape)
    if (d <= 0) throw Error(ErrorKind::Shape, "tensor", "non-positive dimension in " + to_string(shape));
  if (numel(shape) != size)
    throw Error(ErrorKind::Shape, "tensor",
                "shape " + to_string(shape) + " does not hold " + std::to_string(size) + " values");
}
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, ArrayType values, bool requires_grad) {
  check_shape(shape, values.size());
  detail::require_finite<Scalar>("tensor", values);
  node_ = std::make_shared<Node<Scalar>>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::zeros(Shape shape, bool requires_grad) {
  const Index n = numel(shape);
  return Tensor(std::move(shape), ArrayType::Zero(n), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::full(Shape shape, Scalar value, bool requires_grad) {
  const Index n = numel(shape);
  return Tensor(std::move(shape), ArrayType::Constant(n, value), requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::scalar(Scalar value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::from(Shape shape, std::initializer_list<Scalar> values, bool requires_grad) {
  ArrayType data(static_cast<Index>(values.size()));
  Index i = 0;
  for (Scalar v : values) data[i++] = v;
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

template <typename Scalar>
const Shape& Tensor<Scalar>::shape() const {
  if (!node_) throw Error(ErrorKind::State, "tensor", "undefined tensor");
  return node_->shape;
}

template <typename Scalar>
Index Tensor<Scalar>::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size())
    throw Error(ErrorKind::Shape, "tensor", "axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

template <typename Scalar>
Index Tensor<Scalar>::size() const {
  return values().size();
}

template <typename Scalar>
const typename Tensor<Scalar>::ArrayType& Tensor<Scalar>::values() const {
  if (!node_) throw Error(ErrorKind::State, "tensor", "undefined tensor");
  return node_->value;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw Error(ErrorKind::Shape, "item", "tensor " + to_string(shape()) + " is not a scalar");
  return values()[0];
}

template <typename Scalar>
bool Tensor<Scalar>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename Scalar>
bool Tensor<Scalar>::has_grad() const {
  return node_ && node_->grad.size() == node_->value.size();
}

template <typename Scalar>
const typename Tensor<Scalar>::ArrayType& Tensor<Scalar>::grad() const {
  if (!has_grad()) throw Error(ErrorKind::State, "grad", "no gradient has been accumulated");
  return node_->grad;
}

template <typename Scalar>
void Tensor<Scalar>::zero_grad() {
  if (node_) node_->grad.resize(0);
}

template <typename Scalar>
void Tensor<Scalar>::assign(ArrayType values) {
  if (!node_ || !node_->is_leaf()) throw Error(ErrorKind::State, "assign", "only leaf tensors can be reassigned");
  if (values.size() != node_->value.size())
    throw Error(ErrorKind::Shape, "assign",
                "expected " + std::to_string(node_->value.size()) + " values, got " + std::to_string(values.size()));
  detail::require_finite<Scalar>("assign", values);
  node_->value = std::move(values);
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::detach() const {
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = shape();
  node->value = values();
  return Tensor(std::move(node));
}

template <typename Scalar>
const char* Tensor<Scalar>::op_name() const {
  return node_ ? node_->op : "undefined";
}

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  if (!node_) throw Error(ErrorKind::State, "backward", "undefined tensor");
  if (size() != 1)
    throw Error(ErrorKind::Shape, "backward", "loss must be scalar, got " + to_string(shape()));
  if (!node_->requires_grad)
    throw Error(ErrorKind::State, "backward", "loss is detached from every tensor that requires grad");
  if (node_->released)
    throw Error(ErrorKind::State, "backward", "graph was already released by a previous backward");

  // Iterative post-order DFS gives a topological order; reverse it.
  std::vector<std::shared_ptr<Node<Scalar>>> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<std::shared_ptr<Node<Scalar>>, std::size_t>> stack;
  stack.emplace_back(node_, 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      std::shared_ptr<Node<Scalar>> parent = node->parents[next++];
      if (parent->requires_grad && seen.insert(parent.get()).second) stack.emplace_back(std::move(parent), 0);
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  node_->grad_buffer() += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = it->get();
    if (node->released)
      throw Error(ErrorKind::State, "backward", std::string("graph through '") + node->op + "' already released");
    if (node->backward) {
      node->grad_buffer();
      node->backward(*node);
      node->backward = nullptr;
      node->released = true;
      node->parents.clear();
      node->grad.resize(0);
    }
  }
}

template <typename Scalar>
std::vector<Array<Scalar>> gradients(const Tensor<Scalar>& loss, std::vector<Tensor<Scalar>> params) {
  for (auto& p : params) p.zero_grad();
  loss.backward();
  std::vector<Array<Scalar>> out;
  out.reserve(params.size());
  for (auto& p : params) out.push_back(p.has_grad() ? p.grad() : Array<Scalar>::Zero(p.size()));
  return out;
}

namespace detail {

template <typename Scalar>
void require_finite(const char* op, const Array<Scalar>& values) {
  // A finite sum proves every entry finite; only overflow needs the full scan.
  if (std::isfinite(values.sum())) return;
  if (!values.allFinite()) {
    Index bad = 0;
    while (bad < values.size() && std::isfinite(values[bad])) ++bad;
    throw Error(ErrorKind::NonFinite, op, "non-finite value at flat index " + std::to_string(bad));
  }
}

template <typename Scalar>
Tensor<Scalar> make_result(const char* op, Shape shape, Array<Scalar> value, std::vector<Tensor<Scalar>> inputs,
                           std::function<void(Node<Scalar>&)> backward) {
  require_finite<Scalar>(op, value);
  auto node = std::make_shared<Node<Scalar>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled)
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

template void require_finite<float>(const char*, const Array<float>&);
template void require_finite<double>(const char*, const Array<double>&);
template Tensor<float> make_result<float>(const char*, Shape, Array<float>, std::vector<Tensor<float>>,
                                          std::function<void(Node<float>&)>);
template Tensor<double> make_result<double>(const char*, Shape, Array<double>, std::vector<Tensor<double>>,
                                            std::function<void(Node<double>&)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;
template std::vector<Array<float>> gradients<float>(const Tensor<float>&, std::vector<Tensor<float>>);
template std::vector<Array<double>> gradients<double>(const Tensor<double>&, std::vector<Tensor<double>>);

}  // namespace cranio
