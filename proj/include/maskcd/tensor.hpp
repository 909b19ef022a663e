#pragma once

// Dense row-major float64 tensor with a reverse-mode gradient tape.
//
// Every op result that depends on a tensor with requires_grad records its
// parents and a backward closure. Tensor::backward() walks that graph once in
// reverse topological order and then frees it, so a graph is good for exactly
// one backward pass.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "maskcd/errors.hpp"

namespace maskcd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t a, std::size_t b) { return a * b; });
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline thread_local bool grad_mode_enabled = true;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(const std::vector<double>&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_enabled; }

/// Disables graph recording for its lifetime (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
  ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t size() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // Writable access for leaves only; mutating a recorded intermediate corrupts its backward pass.
  std::span<double> mutable_data() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }

  double item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }
  double at(std::size_t flat) const { return impl_->data.at(flat); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    impl_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size() && !impl_->data.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::vector<double>& mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(shape(), impl_->data); }

  /// Populates gradients of every requires_grad leaf reachable from this scalar, then frees the graph.
  void backward() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

/// Builds an op result; records the graph only when some parent needs gradients.
inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                          std::function<void(const std::vector<double>&)> backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (!needs) return out;
  auto* impl = out.impl();
  impl->requires_grad = true;
  impl->parents.reserve(parents.size());
  for (auto& p : parents) impl->parents.push_back(p.impl_ptr());
  impl->backward = std::move(backward);
  return out;
}

/// Accumulation target for a parent gradient, or nullptr if it does not need one.
inline double* grad_target(const Tensor& t) {
  if (!t.requires_grad()) return nullptr;
  return t.impl()->ensure_grad().data();
}

}  // namespace detail

inline void Tensor::backward() const {
  if (size() != 1) throw UsageError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a deterministic topological order.
  // Owning pointers keep every node alive while earlier ones release their tape.
  std::vector<std::shared_ptr<detail::TensorImpl>> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<std::shared_ptr<detail::TensorImpl>, std::size_t>> stack;
  stack.emplace_back(impl_, 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      std::shared_ptr<detail::TensorImpl> parent = top.first->parents[top.second++];
      if (parent->requires_grad && !visited.count(parent.get())) {
        visited.insert(parent.get());
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  impl_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = it->get();
    if (!node->backward) continue;
    node->ensure_grad();
    node->backward(node->grad);
    // Interior nodes are done; release the tape.
    node->backward = nullptr;
    node->parents.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->requires_grad = false;
  }
}

}  // namespace maskcd
