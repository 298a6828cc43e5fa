#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace atd {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

/// Base error for every failure surfaced by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Extents disagree between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An op produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  void ensure_grad();
};

}  // namespace detail

/// Dense row-major float32 tensor with optional participation in reverse-mode
/// autodiff. Copies share storage; values are treated as immutable once an op
/// has produced them. Only leaves (parameters) are mutated, and only between
/// forward passes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  /// Zero-mean normal entries.
  static Tensor randn(Shape shape, float stddev, Rng& rng, bool requires_grad = false);
  /// Uniform entries in [lo, hi).
  static Tensor uniform(Shape shape, float lo, float hi, Rng& rng, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const float> data() const;
  /// Mutable view for initialisation and optimizer updates of leaves.
  std::span<float> mutable_data();
  std::vector<float> to_vector() const;
  float item() const;
  float operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  /// Same values, cut from the graph.
  Tensor detach() const;
  /// Deep copy as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  /// Reverse-mode pass from a scalar; gradients accumulate into leaves.
  void backward() const;

  const char* op_name() const;

  // Internal: used by op implementations.
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// A parameter tensor with its dotted path inside a model.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Topologically ordered list of graph nodes reachable from a root.
/// Parents always precede their children.
class Tape {
 public:
  explicit Tape(const Tensor& root);
  std::size_t size() const { return order_.size(); }
  const std::vector<detail::Node*>& nodes() const { return order_; }
  void run_backward();

 private:
  std::vector<detail::Node*> order_;
};

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

bool grad_enabled();

namespace detail {

// Builds the output node for an op. Records parents only when grad mode is on
// and some input requires grad; the finite check runs unconditionally.
Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn);

bool any_requires_grad(std::initializer_list<const Tensor*> inputs);

}  // namespace detail

}  // namespace atd
