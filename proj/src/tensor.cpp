#include "mindloop/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mindloop/errors.hpp"

namespace mindloop {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
}

}  // namespace

Tensor::Tensor() : Tensor(Shape{}, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<detail::Node>()) {
  check_extents(shape);
  node_->value.assign(numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
  check_extents(shape);
  if (numel(shape) != values.size())
    throw ShapeError("shape " + to_string(shape) + " needs " + std::to_string(numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, value); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.node_->value) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.node_->value) v = dist(rng);
  return t;
}

Tensor Tensor::from_matrix(const Eigen::Ref<const Eigen::MatrixXd>& m) {
  Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  MatrixMap(t.node_->value.data(), m.rows(), m.cols()) = m;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
  return node_->shape[axis];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

std::span<double> Tensor::values() {
  if (node_->recorded) throw ContractError("cannot mutate the output of a recorded op");
  return node_->value;
}

ConstMatrixMap Tensor::matrix() const {
  if (rank() != 2) throw ShapeError("matrix view needs rank 2, got " + to_string(shape()));
  return ConstMatrixMap(node_->value.data(), static_cast<Eigen::Index>(node_->shape[0]),
                        static_cast<Eigen::Index>(node_->shape[1]));
}

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (on)
    node_->grad.assign(size(), 0.0);
  else
    node_->grad.clear();
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (!node_->requires_grad) throw ContractError("grad() on a tensor that does not require grad");
  return node_->grad;
}

void Tensor::zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

Tensor Tensor::clone() const {
  Tensor t(node_->shape, node_->value);
  return t;
}

// ---------------------------------------------------------------------------

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(const char* op, std::shared_ptr<detail::Node> out,
                  std::vector<std::shared_ptr<detail::Node>> inputs, Backward backward) {
  for (const auto& in : inputs) {
    if (in->requires_grad && !in->recorded && leaf_set_.insert(in.get()).second)
      leaves_.push_back(in);
  }
  out->recorded = true;
  entries_.push_back(Entry{op, std::move(out), std::move(inputs), std::move(backward)});
}

void Tape::backward(const Tensor& loss) {
  const auto& node = loss.node();
  if (node->value.size() != 1)
    throw ContractError("backward needs a scalar loss, got shape " + to_string(node->shape));
  if (!node->requires_grad)
    throw ContractError("backward: loss is not connected to the tape");
  node->grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();
}

void Tape::clear() {
  for (auto& e : entries_) {
    std::fill(e.out->grad.begin(), e.out->grad.end(), 0.0);
    e.out->recorded = false;
  }
  entries_.clear();
  for (auto& weak : leaves_)
    if (auto leaf = weak.lock()) std::fill(leaf->grad.begin(), leaf->grad.end(), 0.0);
  leaves_.clear();
  leaf_set_.clear();
}

}  // namespace mindloop
