#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hydra {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& dims);
std::string shape_str(const Shape& dims);

// Graph recording is on by default. Evaluation code disables it with NoGradGuard.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct TensorNode {
  Shape dims;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into the parents.
  std::function<void(TensorNode&)> backward_fn;

  // Lazily sized gradient buffer.
  std::vector<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// Dense row-major tensor with optional reverse-mode gradient tracking.
// Copies are shallow: two handles to the same node see the same data.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using Node = TensorNode<T>;

  BasicTensor();
  BasicTensor(Shape dims, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape dims, bool requires_grad = false);
  static BasicTensor full(Shape dims, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  // Output of an op. Records parents and backward only when grad mode is on
  // and at least one parent requires a gradient.
  static BasicTensor from_op(Shape dims, std::vector<T> data,
                             std::vector<BasicTensor> parents,
                             std::function<void(Node&)> backward_fn);

  const Shape& dims() const { return node_->dims; }
  std::size_t rank() const { return node_->dims.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::size_t flat_index) const { return node_->data.at(flat_index); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Value copy with no graph history.
  BasicTensor detach() const;
  BasicTensor clone() const { return detach(); }

  // Reverse-mode sweep from a scalar. Seeds d(self)/d(self) = 1, visits each
  // graph node once in reverse topological order, then releases the recorded
  // graph below this tensor so repeated steps do not pin memory.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Converts between precisions; the result is a fresh leaf.
template <typename To, typename From>
BasicTensor<To> cast(const BasicTensor<From>& src, bool requires_grad = false) {
  std::vector<To> out(src.numel());
  auto in = src.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(in[i]);
  return BasicTensor<To>(src.dims(), std::move(out), requires_grad);
}

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

}  // namespace hydra
