#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string_view>

#include "cdim/tensor.hpp"

namespace cdim {

enum class OpKind : std::uint8_t {
  kLeaf,
  kConv2d,
  kMaxPool2d,
  kGlobalAvgPool,
  kReshape,
  kFullyConnected,
  kRelu,
  kL2Normalize,
  kConcat,
  kSliceRows,
  kEuclideanDistance,
  kSoftmaxCrossEntropy,
  kSum,
  kMean,
  kAdd,
  kSub,
  kMul,
  kAffineScalar,
};

inline std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kMaxPool2d: return "maxpool2d";
    case OpKind::kGlobalAvgPool: return "global_average_pool";
    case OpKind::kReshape: return "reshape";
    case OpKind::kFullyConnected: return "fully_connected";
    case OpKind::kRelu: return "relu";
    case OpKind::kL2Normalize: return "l2_normalize";
    case OpKind::kConcat: return "concatenate";
    case OpKind::kSliceRows: return "slice_rows";
    case OpKind::kEuclideanDistance: return "euclidean_distance";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kAffineScalar: return "affine_scalar";
  }
  return "unknown";
}

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// tape lives.
template <typename T>
class Var {
 public:
  using value_type = T;

  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  std::span<const T> grad() const { return tape_->grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/**
 * Computation record for reverse-mode differentiation.
 *
 * Operations append entries in execution order, so inputs always precede
 * their consumers. backward() walks the entries in reverse and then adds
 * the gradients of parameter leaves into the bound Tensor's grad buffer.
 * An entry only keeps a backward closure when one of its inputs requires a
 * gradient; evaluation-only tapes therefore save no intermediates.
 */
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Entry {
    OpKind kind = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Tensor<T>* sink = nullptr;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push_leaf(std::move(value), false, nullptr); }

  Var<T> variable(Tensor<T> value) { return push_leaf(std::move(value), true, nullptr); }

  /// Leaf bound to an external tensor; its gradient is added to
  /// `p.grad()` by backward() when `p.requires_grad()`.
  Var<T> parameter(Tensor<T>& p) {
    const bool rg = p.requires_grad();
    Tensor<T> copy(p.shape(), p.storage());
    return push_leaf(std::move(copy), rg, rg ? &p : nullptr);
  }

  Var<T> record(OpKind kind, std::initializer_list<Var<T>> inputs, Tensor<T> out,
                BackwardFn fn) {
    return record(kind, std::vector<Var<T>>(inputs), std::move(out), std::move(fn));
  }

  Var<T> record(OpKind kind, const std::vector<Var<T>>& inputs, Tensor<T> out, BackwardFn fn) {
    Entry e;
    e.kind = kind;
    for (const Var<T>& v : inputs) {
      if (&v.tape() != this) throw std::logic_error("operands recorded on different tapes");
      e.inputs.push_back(v.id());
      e.requires_grad = e.requires_grad || entries_[v.id()].requires_grad;
    }
    e.value = std::move(out);
    if (e.requires_grad) e.backward = std::move(fn);
    entries_.push_back(std::move(e));
    return Var<T>(this, entries_.size() - 1);
  }

  /// True when any operand requires a gradient, i.e. the op must save state.
  bool any_requires_grad(std::initializer_list<Var<T>> vars) const {
    for (const Var<T>& v : vars)
      if (entries_[v.id()].requires_grad) return true;
    return false;
  }

  const Tensor<T>& value(std::size_t id) const { return entries_.at(id).value; }
  bool requires_grad(std::size_t id) const { return entries_.at(id).requires_grad; }

  std::span<const T> grad(std::size_t id) const {
    const Entry& e = entries_.at(id);
    if (!e.requires_grad) throw std::logic_error("value does not require grad");
    if (e.grad.empty()) {
      zero_grad_.assign(e.value.size(), T{0});
      return zero_grad_;
    }
    return e.grad;
  }

  /// Mutable gradient buffer, allocated on first use.
  std::span<T> grad_buffer(std::size_t id) {
    Entry& e = entries_[id];
    if (e.grad.empty()) e.grad.assign(e.value.size(), T{0});
    return e.grad;
  }

  const std::deque<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  void backward(Var<T> loss) {
    if (&loss.tape() != this) throw std::logic_error("loss recorded on a different tape");
    const Entry& root = entries_[loss.id()];
    if (root.value.size() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " +
                       to_string(root.value.shape()));
    }
    for (Entry& e : entries_) e.grad.clear();
    if (!root.requires_grad) return;
    grad_buffer(loss.id())[0] = T{1};
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Entry& e = entries_[id];
      if (!e.requires_grad || e.grad.empty() || !e.backward) continue;
      e.backward(*this, id);
    }
    for (Entry& e : entries_) {
      if (!e.sink || e.grad.empty()) continue;
      auto dst = e.sink->grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += e.grad[i];
    }
  }

 private:
  Var<T> push_leaf(Tensor<T> value, bool requires_grad, Tensor<T>* sink) {
    Entry e;
    e.value = std::move(value);
    e.requires_grad = requires_grad;
    e.sink = sink;
    entries_.push_back(std::move(e));
    return Var<T>(this, entries_.size() - 1);
  }

  // deque keeps references to earlier values stable while recording.
  std::deque<Entry> entries_;
  mutable std::vector<T> zero_grad_;
};

}  // namespace cdim
