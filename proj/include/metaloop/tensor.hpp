// Copyright 2026 The Metaloop Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace metaloop {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

// Node ids only need to be monotone within one thread's computation; a
// process-wide counter satisfies that for every thread at once.
inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed) + 1;
}

template <typename T>
struct Node;

// Leaves elements default-initialized on resize, so buffers that are about to
// be overwritten are not zero-filled first.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U>;
  };
  DefaultInitAllocator() = default;
  template <typename U>
  DefaultInitAllocator(const DefaultInitAllocator<U>&) noexcept {}

  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    std::construct_at(p, std::forward<Args>(args)...);
  }
};

}  // namespace detail

/// Tensor storage. `Buffer<T>(n)` is uninitialized; pass a value to fill.
template <typename T>
using Buffer = std::vector<T, detail::DefaultInitAllocator<T>>;

/// True when primitive applications are being recorded on this thread.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Enables recording for the current thread while alive.
class EnableGradGuard {
 public:
  EnableGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = true; }
  ~EnableGradGuard() { detail::grad_mode_flag() = previous_; }
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tensor;

/// Backward rule of one primitive: given the gradient flowing into the
/// primitive's output and a mask of which inputs need a gradient, returns one
/// tensor per input (undefined where not needed). Rules are written in terms
/// of recorded primitives, so running them with recording enabled yields
/// gradients that are themselves differentiable.
template <typename T>
using BackwardFn = std::function<std::vector<Tensor<T>>(
    const Tensor<T>& grad_out, const std::vector<bool>& needs)>;

/// Dense row-major tensor participating in a computation record. Handles are
/// cheap to copy and share immutable storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, const std::vector<T>& values, bool requires_grad = false)
      : Tensor(from_buffer(std::move(shape), Buffer<T>(values.begin(), values.end()),
                           requires_grad)) {}

  static Tensor from_buffer(Shape shape, Buffer<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    Tensor out;
    out.node_ = std::make_shared<detail::Node<T>>();
    out.node_->shape = std::move(shape);
    out.node_->data = std::make_shared<const Buffer<T>>(std::move(values));
    out.node_->requires_grad = requires_grad;
    out.node_->id = detail::next_node_id();
    return out;
  }

  static Tensor zeros(Shape shape) { return filled(std::move(shape), T(0)); }

  static Tensor filled(Shape shape, T value) {
    const std::size_t n = shape_numel(shape);
    return from_buffer(std::move(shape), Buffer<T>(n, value));
  }

  static Tensor scalar(T value) { return from_buffer(Shape{}, Buffer<T>(1, value)); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data->size(); }

  std::span<const T> values() const { return *node_->data; }
  const T* data() const { return node_->data->data(); }
  T at(std::size_t i) const { return (*node_->data)[i]; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item: tensor of shape " + shape_str(shape()) +
                       " is not a scalar");
    }
    return at(0);
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool is_leaf() const { return !node_->record; }
  const char* op_name() const;

  /// Same values, no provenance; gradients do not flow through the result.
  Tensor detach() const { return share_as_leaf(false); }

  /// Value-identical leaf that gradients can be taken with respect to.
  Tensor requiring_grad() const { return share_as_leaf(true); }

  /// Reinterprets the storage under a new shape without recording.
  Tensor with_shape(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw ShapeError("reshape: cannot view " + shape_str(this->shape()) +
                       " as " + shape_str(shape));
    }
    Tensor out;
    out.node_ = std::make_shared<detail::Node<T>>();
    out.node_->shape = std::move(shape);
    out.node_->data = node_->data;
    out.node_->id = detail::next_node_id();
    return out;
  }

  std::vector<T> to_vector() const { return {node_->data->begin(), node_->data->end()}; }

  /// Shared storage; primitives keep it to refer to values without a copy.
  const std::shared_ptr<const Buffer<T>>& storage() const { return node_->data; }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

  /// Creates the output of a primitive. The application is recorded only
  /// when recording is enabled and some input requires a gradient.
  static Tensor make_result(const char* op, Shape shape, Buffer<T> values,
                            std::vector<Tensor> inputs, BackwardFn<T> backward);

  /// As above, sharing existing storage (for reshapes).
  static Tensor make_result(const char* op, Shape shape,
                            std::shared_ptr<const Buffer<T>> storage,
                            std::vector<Tensor> inputs, BackwardFn<T> backward);

 private:
  Tensor share_as_leaf(bool requires_grad) const {
    Tensor out;
    out.node_ = std::make_shared<detail::Node<T>>();
    out.node_->shape = node_->shape;
    out.node_->data = node_->data;
    out.node_->requires_grad = requires_grad;
    out.node_->id = detail::next_node_id();
    return out;
  }

  std::shared_ptr<detail::Node<T>> node_;
};

namespace detail {

template <typename T>
struct Record {
  const char* op = "";
  std::vector<Tensor<T>> inputs;
  BackwardFn<T> backward;
};

template <typename T>
struct Node {
  Shape shape;
  std::shared_ptr<const Buffer<T>> data;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::unique_ptr<Record<T>> record;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  // Long chains of recorded nodes would otherwise be torn down recursively.
  ~Node() {
    std::vector<std::unique_ptr<Record<T>>> pending;
    if (record) pending.push_back(std::move(record));
    while (!pending.empty()) {
      auto rec = std::move(pending.back());
      pending.pop_back();
      for (auto& input : rec->inputs) {
        auto& child = input.node();
        if (child && child.use_count() == 1 && child->record) {
          pending.push_back(std::move(child->record));
        }
      }
    }
  }
};

}  // namespace detail

template <typename T>
const char* Tensor<T>::op_name() const {
  return node_->record ? node_->record->op : "leaf";
}

template <typename T>
Tensor<T> Tensor<T>::make_result(const char* op, Shape shape,
                                 Buffer<T> values,
                                 std::vector<Tensor> inputs,
                                 BackwardFn<T> backward) {
  return make_result(op, std::move(shape),
                     std::make_shared<const Buffer<T>>(std::move(values)), std::move(inputs),
                     std::move(backward));
}

template <typename T>
Tensor<T> Tensor<T>::make_result(const char* op, Shape shape,
                                 std::shared_ptr<const Buffer<T>> storage,
                                 std::vector<Tensor> inputs,
                                 BackwardFn<T> backward) {
  if (shape_numel(shape) != storage->size()) {
    throw ShapeError(std::string(op) + ": shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(storage->size()));
  }
  Tensor out;
  out.node_ = std::make_shared<detail::Node<T>>();
  out.node_->shape = std::move(shape);
  out.node_->data = std::move(storage);
  out.node_->id = detail::next_node_id();
  if (!grad_enabled()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  auto rec = std::make_unique<detail::Record<T>>();
  rec->op = op;
  rec->inputs = std::move(inputs);
  rec->backward = std::move(backward);
  out.node_->record = std::move(rec);
  out.node_->requires_grad = true;
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

/// Reverse-mode gradient of a scalar `loss` with respect to each of `params`.
///
/// With `differentiable` false the backward pass runs unrecorded and the
/// returned gradients are detached leaves. With `differentiable` true the
/// backward pass is itself recorded, so the returned gradients carry
/// provenance and can feed further differentiation (second-order
/// meta-gradients). A param that the loss does not depend on receives a zero
/// tensor of its shape.
template <typename T>
std::vector<Tensor<T>> gradient(const Tensor<T>& loss,
                                std::span<const Tensor<T>> params,
                                bool differentiable = false) {
  using NodePtr = detail::Node<T>*;
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("gradient: loss must be a scalar, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }

  std::unordered_set<NodePtr> targets;
  for (const auto& p : params) targets.insert(p.node().get());

  // Post-order walk marking nodes from which some target is reachable.
  std::unordered_map<NodePtr, bool> needed;
  std::vector<NodePtr> order;
  if (loss.requires_grad()) {
    struct Frame {
      NodePtr node;
      std::size_t next;
    };
    std::vector<Frame> stack{{loss.node().get(), 0}};
    needed[loss.node().get()] = false;
    while (!stack.empty()) {
      Frame& top = stack.back();
      NodePtr n = top.node;
      const auto* rec = n->record.get();
      if (rec && top.next < rec->inputs.size()) {
        const auto& in = rec->inputs[top.next++];
        if (in.requires_grad() && !needed.count(in.node().get())) {
          needed[in.node().get()] = false;
          stack.push_back({in.node().get(), 0});
        }
        continue;
      }
      bool reach = targets.count(n) > 0;
      if (rec) {
        for (const auto& in : rec->inputs) {
          if (in.requires_grad() && needed[in.node().get()]) reach = true;
        }
      }
      needed[n] = reach;
      if (reach) order.push_back(n);
      stack.pop_back();
    }
  }
  std::sort(order.begin(), order.end(),
            [](NodePtr a, NodePtr b) { return a->id > b->id; });

  std::vector<Tensor<T>> result;
  result.reserve(params.size());
  {
    std::unique_ptr<NoGradGuard> guard;
    if (!differentiable) guard = std::make_unique<NoGradGuard>();

    std::unordered_map<NodePtr, Tensor<T>> grads;
    if (!order.empty()) {
      grads[loss.node().get()] = Tensor<T>::filled(loss.shape(), T(1));
    }
    for (NodePtr n : order) {
      if (!n->record) continue;
      auto it = grads.find(n);
      if (it == grads.end()) continue;
      Tensor<T> g = it->second;
      if (!targets.count(n)) grads.erase(it);
      const auto& inputs = n->record->inputs;
      std::vector<bool> needs(inputs.size());
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        needs[i] = inputs[i].requires_grad() && needed[inputs[i].node().get()];
      }
      auto in_grads = n->record->backward(g, needs);
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!needs[i] || !in_grads[i].defined()) continue;
        NodePtr key = inputs[i].node().get();
        auto slot = grads.find(key);
        if (slot == grads.end()) {
          grads.emplace(key, std::move(in_grads[i]));
        } else {
          slot->second = add(slot->second, in_grads[i]);
        }
      }
    }
    for (const auto& p : params) {
      auto it = grads.find(p.node().get());
      if (it == grads.end()) {
        result.push_back(Tensor<T>::zeros(p.shape()));
      } else {
        result.push_back(differentiable ? it->second : it->second.detach());
      }
    }
  }
  return result;
}

template <typename T>
std::vector<Tensor<T>> gradient(const Tensor<T>& loss,
                                const std::vector<Tensor<T>>& params,
                                bool differentiable = false) {
  return gradient(loss, std::span<const Tensor<T>>(params), differentiable);
}

template <typename T>
Tensor<T> detach(const Tensor<T>& t) {
  return t.detach();
}

}  // namespace metaloop
