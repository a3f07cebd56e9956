#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "dsai/common.hpp"

namespace dsai {

class Tape;

namespace detail {

struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until first accumulation
  bool requires_grad = false;
  const Tape* producer = nullptr;  // tape that recorded the producing op, if any

  std::size_t size() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major tensor. Value-semantics handle: copies share the same
// storage node. Immutable after creation except for the grad slot (and the
// data of leaves updated by an optimizer between tapes).
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, Real value, bool requires_grad = false);
  static Tensor from_data(std::vector<std::size_t> shape, std::vector<Real> values,
                          bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data.size(); }

  Real* data() { return node_->data.data(); }
  const Real* data() const { return node_->data.data(); }

  // Scalar read; throws unless size() == 1.
  Real value() const;

  // Flat and multi-index element access (reads).
  Real at(std::size_t flat) const { return node_->data.at(flat); }
  Real at(std::initializer_list<std::size_t> idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  bool grad_allocated() const { return node_ && !node_->grad.empty(); }
  // Grad buffer, allocated (zero) on demand.
  Real* grad();
  const std::vector<Real>& grad_vector() const;
  void zero_grad();

  bool all_finite() const;

  std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode> node_;
  friend class Tape;
};

// Reverse-mode tape. Ops record a backward closure while a tape is active in
// the current thread; Tape::backward replays them in reverse. Single-writer:
// one thread builds and consumes a given tape, independent tapes may run in
// parallel threads.
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse, filling
  // the grad of every reachable requires_grad leaf. Loss must be a scalar
  // produced on this tape; a detached loss is a no-op that leaves a warning
  // record. Calling twice is an error (make a new tape per step).
  void backward(const Tensor& loss);

  bool consumed() const { return consumed_; }
  std::size_t num_ops() const { return ops_.size(); }
  const std::vector<std::string>& warnings() const { return warnings_; }

  // Active tape of the current thread, or nullptr (= no recording).
  static Tape* active();

  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
  std::vector<std::string> warnings_;
  friend class TapeScope;
};

// RAII activation of a tape for the current thread.
class TapeScope {
public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

private:
  Tape* prev_;
};

}  // namespace dsai
