#include "spectra/autodiff/tensor.hpp"

#include <malloc.h>

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace spectra::ad {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

// Tape buffers are allocated and freed every step; keeping them in the heap
// instead of fresh mmap regions avoids a page-fault storm on each step.
[[maybe_unused]] const bool g_malloc_tuned = [] {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  return true;
}();

}  // namespace

namespace detail {

std::vector<double>& Node::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

thread_local bool t_grad_enabled = true;

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> values,
                                        bool requires_grad) {
  if (values.size() != numel_of(shape)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw std::logic_error("tensor: use of undefined tensor");
  return *node;
}

}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = numel_of(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = numel_of(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(make_leaf({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const double> Tensor::data() const { return checked(node_).value; }

std::span<double> Tensor::mutable_data() {
  checked(node_);
  return node_->value;
}

double Tensor::item() const {
  const auto& n = checked(node_);
  if (n.value.size() != 1) {
    throw ShapeError("item: tensor of shape " + shape_str(n.shape) + " is not a scalar");
  }
  return n.value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& n = checked(node_);
  if (index.size() != n.shape.size()) {
    throw ShapeError("at: index rank does not match " + shape_str(n.shape));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= n.shape[axis]) throw ShapeError("at: index out of range for " + shape_str(n.shape));
    flat = flat * n.shape[axis] + i;
    ++axis;
  }
  return n.value[flat];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  checked(node_);
  if (!node_->is_leaf) throw std::logic_error("set_requires_grad: only leaves can be toggled");
  node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return checked(node_).is_leaf; }

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const double> Tensor::grad() const { return checked(node_).grad; }

std::span<double> Tensor::mutable_grad() {
  checked(node_);
  return node_->ensure_grad();
}

void Tensor::zero_grad() {
  checked(node_);
  node_->grad.clear();
}

void Tensor::backward() const {
  const auto& root = checked(node_);
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad) return;

  // Iterative post-order DFS: `order` ends up topologically sorted with
  // every node after all of its inputs.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (!node->is_leaf) node->grad.clear();
  }
  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    // Interior nodes that received no gradient contribute nothing upstream.
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

Tensor Tensor::detach() const {
  const auto& n = checked(node_);
  return Tensor(make_leaf(n.shape, n.value, false));
}

Tensor Tensor::clone() const {
  const auto& n = checked(node_);
  return Tensor(make_leaf(n.shape, n.value, n.requires_grad));
}

}  // namespace spectra::ad
