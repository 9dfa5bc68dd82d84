#include "mtts/tensor.hpp"

#include <sstream>

#include "mtts/errors.hpp"

namespace mtts {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ContractViolation("Tensor::from: shape " + shape_str(shape) + " needs " +
                            std::to_string(shape_numel(shape)) + " values, got " +
                            std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw ContractViolation("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
  Tensor t = clone();
  t.impl()->requires_grad = false;
  return t;
}

Tape::~Tape() { clear(); }

void Tape::clear() {
  for (auto& node : nodes_) {
    node.output->tape = nullptr;
    node.output->node_id = -1;
  }
  nodes_.clear();
}

void Tape::record(const Tensor& output, BackwardFn fn) {
  output.impl()->tape = this;
  output.impl()->node_id = static_cast<long>(nodes_.size());
  nodes_.push_back({output.impl_ptr(), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractViolation("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  if (loss.impl()->tape != this) throw ContractViolation("backward: loss was not produced on this tape");

  for (auto& node : nodes_) node.output->grad.clear();
  loss.impl()->grad.assign(1, 1.0);

  visit_order_.clear();
  for (long i = loss.impl()->node_id; i >= 0; --i) {
    auto& node = nodes_[static_cast<std::size_t>(i)];
    if (node.output->grad.empty()) continue;
    visit_order_.push_back(i);
    node.backward(node.output->grad);
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractViolation("backward: undefined loss");
  if (loss.numel() != 1) {
    throw ContractViolation("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  Tape* tape = loss.impl()->tape;
  if (tape == nullptr) throw ContractViolation("backward: loss is not on a tape");
  tape->backward(loss);
}

namespace detail {

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

bool should_record(const std::vector<Tensor>& inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

void record(Tensor& out, Tape::BackwardFn fn) {
  out.impl()->requires_grad = true;
  g_active_tape->record(out, std::move(fn));
}

}  // namespace detail

}  // namespace mtts
