#include "hydra/tensor.hpp"

#include <numeric>
#include <sstream>
#include <unordered_set>

#include "hydra/errors.hpp"

namespace hydra {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
BasicTensor<T>::BasicTensor() : node_(std::make_shared<Node>()) {
  node_->dims = {0};
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape dims, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  for (auto d : dims) {
    if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(dims));
  }
  if (shape_numel(dims) != data.size()) {
    throw ShapeError("tensor dims " + shape_str(dims) + " do not match " +
                     std::to_string(data.size()) + " values");
  }
  node_->dims = std::move(dims);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape dims, bool requires_grad) {
  return full(std::move(dims), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape dims, T value, bool requires_grad) {
  const auto n = shape_numel(dims);
  return BasicTensor(std::move(dims), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_op(Shape dims, std::vector<T> data,
                                       std::vector<BasicTensor> parents,
                                       std::function<void(Node&)> backward_fn) {
  BasicTensor out(std::move(dims), std::move(data), false);
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (auto& p : parents) out.node_->parents.push_back(p.node_);
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= node_->dims.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(node_->dims));
  }
  return node_->dims[axis];
}

template <typename T>
T BasicTensor<T>::item() const {
  if (node_->data.size() != 1) {
    throw UsageError("item() on tensor of shape " + shape_str(node_->dims));
  }
  return node_->data[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(node_->dims, node_->data, false);
}

template <typename T>
void BasicTensor<T>::backward() const {
  if (node_->data.size() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " + shape_str(node_->dims));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order with parents first.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior nodes have served their purpose; drop the graph and their grads.
  for (Node* n : order) {
    if (!n->parents.empty()) {
      n->parents.clear();
      n->backward_fn = nullptr;
      if (n != node_.get()) n->grad.clear();
    }
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace hydra
