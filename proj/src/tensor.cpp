#include "corelm/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "corelm/error.hpp"

namespace corelm {

namespace {
thread_local GradientTape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

static void check_shape(const Shape& shape) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("shape entries must be positive, got " + shape_string(shape));
  }
}

Tensor::Tensor() : Tensor(Shape{1}, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<detail::TensorNode>()) {
  check_shape(shape);
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<detail::TensorNode>()) {
  check_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_string(shape) + " does not match " + std::to_string(data.size()) +
                     " values");
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

std::size_t Tensor::rows() const {
  const Shape& s = node_->shape;
  if (s.empty()) return 1;
  return numel() / s.back();
}

std::size_t Tensor::cols() const {
  const Shape& s = node_->shape;
  return s.empty() ? 1 : s.back();
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_string(shape()));
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
  node_->requires_grad = value;
  return *this;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

Tensor Tensor::clone() const {
  Tensor t(node_->shape, node_->data);
  t.node_->requires_grad = node_->requires_grad;
  return t;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data); }

const detail::NodePtr& node_of(const Tensor& t) { return t.node_; }

Tensor make_result(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return Tensor(std::move(node));
}

void GradientTape::record(std::string op, std::function<void()> adjoint) {
  if (consumed_) throw TapeError("cannot record '" + op + "' on a tape that was already replayed; reset it first");
  entries_.push_back({std::move(op), std::move(adjoint)});
}

void GradientTape::register_leaf(const Tensor& leaf) {
  for (const Tensor& t : leaves_) {
    if (t.same_storage(leaf)) return;
  }
  leaves_.push_back(leaf);
}

void GradientTape::backward(const Tensor& loss) {
  if (consumed_) throw TapeError("backward called twice on the same tape without reset");
  if (loss.numel() != 1) throw TapeError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  if (!loss.requires_grad()) throw TapeError("loss was not produced under an active tape");
  consumed_ = true;
  node_of(loss)->accumulate(0, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->adjoint();
}

void GradientTape::reset() {
  entries_.clear();
  leaves_.clear();
  consumed_ = false;
}

std::vector<std::string> GradientTape::op_names() const {
  std::vector<std::string> names;
  names.reserve(entries_.size());
  for (const auto& e : entries_) names.push_back(e.op);
  return names;
}

GradientTape* GradientTape::active() { return g_active_tape; }

TapeScope::TapeScope(GradientTape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

}  // namespace corelm
