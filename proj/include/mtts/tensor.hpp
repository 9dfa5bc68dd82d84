#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mtts {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  Tape* tape = nullptr;  // producing tape, null for leaves and constants
  long node_id = -1;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

/// Dense row-major tensor of doubles. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() { impl_->grad.clear(); }

  bool on_tape() const { return impl_->tape != nullptr; }

  /// Deep copy without tape linkage; keeps requires_grad.
  Tensor clone() const;
  /// Deep copy, no gradient tracking.
  Tensor detach() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Define-by-run record of differentiable operations for one forward pass.
///
/// Nodes are appended in creation order, which is a valid topological order;
/// backward() walks them in strictly decreasing order.
class Tape {
 public:
  using BackwardFn = std::function<void(const std::vector<double>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  void record(const Tensor& output, BackwardFn fn);
  std::size_t size() const { return nodes_.size(); }
  /// Node ids visited by the last backward(), in visit order.
  const std::vector<long>& last_visit_order() const { return visit_order_; }
  void clear();

  void backward(const Tensor& loss);

 private:
  struct Node {
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::vector<long> visit_order_;
};

/// Makes a tape the recording target on this thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on this thread (inference, oracle computations).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Populates grad on every requires_grad leaf reachable from the scalar loss.
/// Leaf gradients accumulate across calls; intermediate gradients are reset.
void backward(const Tensor& loss);

namespace detail {
/// True when an op with these inputs must be recorded.
bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(const std::vector<Tensor>& inputs);
/// Records `out` on the active tape and marks it as requiring grad.
void record(Tensor& out, Tape::BackwardFn fn);
/// Accumulates `g` into t's grad if t participates in differentiation.
inline bool wants_grad(const Tensor& t) { return t.impl()->requires_grad; }
}  // namespace detail

}  // namespace mtts
