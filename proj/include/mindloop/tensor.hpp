#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

namespace mindloop {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized only when requires_grad
  bool requires_grad = false;
  bool recorded = false;     // output of an op on the active tape
};

}  // namespace detail

/// Dense row-major array of doubles with an optional gradient accumulator.
///
/// Copies share the underlying storage; use clone() for an independent copy.
/// Values are fixed once an op has consumed the tensor, except for leaf
/// parameters which optimizers update between tape clears.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng);
  static Tensor from_matrix(const Eigen::Ref<const Eigen::MatrixXd>& m);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double item() const;

  /// Mutable view of a leaf's values. Throws for tensors produced by a
  /// recorded op.
  std::span<double> values();

  ConstMatrixMap matrix() const;
  RowMatrix to_matrix() const { return matrix(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  std::span<const double> grad() const;
  void zero_grad();

  Tensor clone() const;
  Tensor detach() const { return clone(); }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Define-by-run record of differentiable operations. One tape per thread.
class Tape {
 public:
  using Backward = std::function<void()>;

  static Tape& active();

  bool recording() const { return paused_ == 0; }
  void record(const char* op, std::shared_ptr<detail::Node> out,
              std::vector<std::shared_ptr<detail::Node>> inputs, Backward backward);

  /// Propagates d(loss)/d(leaf) into every requires_grad leaf reachable
  /// through recorded ops.
  void backward(const Tensor& loss);

  /// Drops all recorded operations and zeroes every grad the tape has seen.
  void clear();

  std::size_t size() const { return entries_.size(); }

 private:
  friend class NoGradGuard;

  struct Entry {
    const char* op;
    std::shared_ptr<detail::Node> out;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    Backward backward;
  };

  std::vector<Entry> entries_;
  std::vector<std::weak_ptr<detail::Node>> leaves_;
  std::unordered_set<const detail::Node*> leaf_set_;
  int paused_ = 0;
};

/// Suspends recording on the current thread's tape for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++Tape::active().paused_; }
  ~NoGradGuard() { --Tape::active().paused_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline void backward(const Tensor& loss) { Tape::active().backward(loss); }

}  // namespace mindloop
