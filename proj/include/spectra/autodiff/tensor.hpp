#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spectra::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Thrown by primitives on incompatible operands. The message names the
/// primitive and the offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad();
};

}  // namespace detail

/// Dense row-major double tensor with an optional reverse-mode graph.
///
/// A Tensor is a cheap handle; copies share the underlying buffer. Operations
/// in ops.hpp record their adjoints eagerly when any operand requires a
/// gradient and gradient recording is enabled (see NoGradGuard). The graph
/// lives exactly as long as the tensors that reference it.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Mutable view of the values. Only meaningful on leaves; mutating an
  /// interior node invalidates the adjoints recorded against it.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  /// Gradient buffer; empty span when no backward pass has reached this tensor.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse pass from a scalar. Leaf gradients accumulate across calls;
  /// interior gradients are recomputed from scratch on every call.
  void backward() const;

  /// Same values, no history, no gradient requirement.
  Tensor detach() const;
  Tensor clone() const;

  // Internal: used by the primitive implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// True when newly created operations should record adjoints (thread-local).
bool grad_enabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace spectra::ad
