#include "atd/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace atd {

namespace {
thread_local bool t_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

void Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  if (!t_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError(std::string(op) + ": produced " + std::to_string(data.size()) +
                     " values for shape " + shape_str(shape));
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool track = false;
  if (t_grad_enabled && backward_fn) {
    for (const auto& in : inputs) {
      if (in.defined() && in.requires_grad()) {
        track = true;
        break;
      }
    }
  }
  if (track) {
    node->requires_grad = true;
    for (auto& in : inputs) {
      if (in.defined() && in.requires_grad()) node->parents.push_back(in.node());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  std::vector<float> values(shape_numel(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, float stddev, Rng& rng, bool requires_grad) {
  std::normal_distribution<float> dist(0.0f, stddev);
  std::vector<float> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::uniform(Shape shape, float lo, float hi, Rng& rng, bool requires_grad) {
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> values(shape_numel(shape));
  for (auto& v : values) v = dist(rng);
  return from(std::move(shape), std::move(values), requires_grad);
}

static const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
  if (!node) throw Error("use of an undefined tensor");
  return *node;
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).data.size(); }

std::span<const float> Tensor::data() const { return checked(node_).data; }

std::span<float> Tensor::mutable_data() {
  checked(node_);
  return node_->data;
}

std::vector<float> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return data()[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  checked(node_);
  node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const float> Tensor::grad() const { return checked(node_).grad; }

std::span<float> Tensor::mutable_grad() {
  checked(node_);
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  checked(node_);
  node_->grad.assign(node_->data.size(), 0.0f);
}

Tensor Tensor::detach() const { return from(shape(), to_vector(), false); }

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), to_vector(), requires_grad); }

const char* Tensor::op_name() const { return checked(node_).op; }

void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!requires_grad()) throw Error("backward() on a tensor that does not require grad");
  Tape tape(*this);
  tape.run_backward();
}

Tape::Tape(const Tensor& root) {
  // Iterative post-order DFS so deep graphs do not exhaust the stack.
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

void Tape::run_backward() {
  for (auto* node : order_) {
    if (node->requires_grad) node->ensure_grad();
  }
  order_.back()->grad.assign(1, 1.0f);
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

}  // namespace atd
