#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace medvit {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::string to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Raised when operand extents are inconsistent with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward op produces NaN/Inf from finite inputs.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for misuse of the differentiation machinery (non-scalar roots,
/// detached graphs).
class AutodiffError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node&)>;

/// Storage plus graph bookkeeping for one tensor value.
///
/// `backward` reads `grad` of this node and accumulates into the grads of
/// `inputs`. Leaves have no backward function.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  BackwardFn backward;
  const char* op = "leaf";

  std::vector<double>& grad_buffer();
  bool is_leaf() const { return !backward; }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor scalar(double value);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<double> values() { return node_->data; }
  std::span<const double> values() const { return node_->data; }
  const double* data() const { return node_->data.data(); }
  double* data() { return node_->data.data(); }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;
  double& at(std::initializer_list<std::size_t> index);

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  /// Empty span when no gradient has been accumulated.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad_mut() { return node_->grad_buffer(); }
  void zero_grad();

  /// Reverse-mode sweep from this scalar; accumulates into every
  /// requires_grad node reachable from it.
  void backward() const;

  /// Same values, no graph history, requires_grad false.
  Tensor detach() const;
  /// Deep copy of values into a fresh leaf.
  Tensor clone() const;

  const NodePtr& node() const { return node_; }

 private:
  std::size_t flat_index(std::initializer_list<std::size_t> index) const;
  NodePtr node_;
};

/// Thread-local switch: while disabled, ops record no graph.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds an op result. Graph edges and the backward closure are kept only
/// when grad mode is on and at least one input requires grad. Throws
/// NumericError if the forward values are not finite.
Tensor make_result(Shape shape, std::vector<double> values,
                   std::vector<Tensor> inputs, const char* op,
                   BackwardFn backward);

/// Topologically ordered record of the graph below a root: every node's
/// inputs appear before it, each node exactly once.
class Tape {
 public:
  static Tape record(const Tensor& root);

  const std::vector<Node*>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }
  bool is_topological() const;
  /// Runs every backward closure in reverse order. The root's grad must
  /// already be seeded.
  void run_backward() const;

 private:
  std::vector<Node*> order_;
};

/// Named handle to a model tensor. Names are dotted paths and unique within
/// a model.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

using ParameterList = std::vector<Parameter>;

}  // namespace medvit
