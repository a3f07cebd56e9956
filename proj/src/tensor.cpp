#include "dsai/tensor.hpp"

#include <cmath>

namespace dsai {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->data.assign(shape_numel(n->shape), 0.0);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(std::vector<std::size_t> shape, Real value, bool requires_grad) {
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->data.assign(shape_numel(n->shape), value);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<Real> values,
                         bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " expects " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Real Tensor::value() const {
  if (size() != 1) {
    throw ContractError("value(): tensor is not scalar, shape " + shape_str(shape()));
  }
  return node_->data[0];
}

Real Tensor::at(std::initializer_list<std::size_t> idx) const {
  const auto& s = node_->shape;
  if (idx.size() != s.size()) {
    throw ShapeError("at(): rank mismatch for shape " + shape_str(s));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    if (i >= s[axis]) throw ShapeError("at(): index out of bounds on axis " + std::to_string(axis));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

Real* Tensor::grad() {
  node_->ensure_grad();
  return node_->grad.data();
}

const std::vector<Real>& Tensor::grad_vector() const {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool Tensor::all_finite() const {
  for (Real v : node_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (consumed_) {
    throw ContractError("backward: tape already consumed; build a fresh tape per step");
  }
  auto node = loss.node();
  if (node->producer != this) {
    warnings_.push_back("backward: loss is not connected to this tape; no-op");
    return;
  }
  node->ensure_grad();
  node->grad[0] = 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    (*it)();
  }
  consumed_ = true;
}

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = prev_; }

}  // namespace dsai
