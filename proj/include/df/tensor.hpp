#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "df/common.hpp"

namespace df {

template <typename S>
class Tape;

// Immutable shaped value, optionally registered on a tape. Copies are
// cheap handles sharing the underlying storage. A tensor created from raw
// data is a constant; only Tape::leaf() and recorded ops produce taped
// tensors.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, VecX<S> values) {
    check_shape(numel(shape) == values.size(),
                "tensor: data length " + std::to_string(values.size()) +
                    " does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<const VecX<S>>(std::move(values));
    return t;
  }

  static Tensor scalar(S v) {
    VecX<S> d(1);
    d[0] = v;
    return constant({1}, std::move(d));
  }

  static Tensor zeros(Shape shape) {
    VecX<S> d = VecX<S>::Zero(numel(shape));
    return constant(std::move(shape), std::move(d));
  }

  // Row-major flattening of an Eigen matrix into a rank-2 tensor.
  template <typename Derived>
  static Tensor from_matrix(const Eigen::MatrixBase<Derived>& m) {
    MatX<S> rm = m.template cast<S>();
    Eigen::Map<const VecX<S>> flat(rm.data(), rm.size());
    return constant({int(rm.rows()), int(rm.cols())}, VecX<S>(flat));
  }

  template <typename Derived>
  static Tensor from_vector(const Eigen::MatrixBase<Derived>& v) {
    VecX<S> d = v.template cast<S>();
    const int n = int(d.size());
    return constant({n}, std::move(d));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return int(shape_.size()); }
  std::int64_t size() const { return data_ ? data_->size() : 0; }
  bool defined() const { return data_ != nullptr; }

  const VecX<S>& values() const { return *data_; }
  std::shared_ptr<const VecX<S>> data() const { return data_; }

  Tape<S>* tape() const { return tape_; }
  int node() const { return node_; }
  bool taped() const { return tape_ != nullptr; }

  int rows() const {
    check_shape(rank() >= 1 && rank() <= 2, "rows(): tensor rank must be 1 or 2");
    return shape_[0];
  }
  int cols() const {
    check_shape(rank() >= 1 && rank() <= 2, "cols(): tensor rank must be 1 or 2");
    return rank() == 2 ? shape_[1] : 1;
  }

  // Matrix view; rank-1 tensors map to column vectors.
  Eigen::Map<const MatX<S>> mat() const {
    return Eigen::Map<const MatX<S>>(data_->data(), rows(), cols());
  }

  Eigen::Map<const VecX<S>> vec() const {
    return Eigen::Map<const VecX<S>>(data_->data(), data_->size());
  }

  S scalar_value() const {
    check_shape(size() == 1, "scalar_value(): tensor has " +
                                 std::to_string(size()) + " elements");
    return (*data_)[0];
  }

 private:
  friend class Tape<S>;
  std::shared_ptr<const VecX<S>> data_;
  Shape shape_;
  Tape<S>* tape_ = nullptr;
  int node_ = -1;
};

// Ordered record of operations for reverse-mode differentiation. Nodes are
// appended in execution order, so the list is always topologically sorted
// and a single reverse sweep visits every node exactly once. A tape and the
// tensors recorded on it are confined to one thread.
template <typename S>
class Tape {
 public:
  using Grads = std::vector<VecX<S>>;
  // Accumulates input gradients given the output gradient.
  using BackwardFn = std::function<void(const VecX<S>&, Grads&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a differentiation root. The storage is shared, not copied,
  // so parameters can be updated in place between tapes.
  Tensor<S> leaf(Shape shape, std::shared_ptr<const VecX<S>> values) {
    check_shape(numel(shape) == values->size(), "leaf: data/shape mismatch");
    Tensor<S> t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(values);
    t.tape_ = this;
    t.node_ = append(t.shape_, nullptr, true);
    return t;
  }

  Tensor<S> leaf(const Tensor<S>& constant) {
    return leaf(constant.shape(), constant.data());
  }

  // Records an op result. Called by the op layer only.
  Tensor<S> record(Shape shape, VecX<S> values, BackwardFn backward) {
    Tensor<S> t = Tensor<S>::constant(std::move(shape), std::move(values));
    t.tape_ = this;
    t.node_ = append(t.shape_, std::move(backward), false);
    return t;
  }

  int size() const { return int(nodes_.size()); }
  bool is_leaf(int node) const { return nodes_[node].is_leaf; }
  std::int64_t node_numel(int node) const { return nodes_[node].numel; }

  // Reverse sweep from `root` seeded with `seed`. Returns per-node
  // gradients; untouched nodes have empty entries.
  Grads sweep(int root, const VecX<S>& seed) const {
    check_shape(root >= 0 && root < size(), "backward: node out of range");
    check_shape(seed.size() == nodes_[root].numel, "backward: seed size mismatch");
    Grads grads(nodes_.size());
    grads[root] = seed;
    for (int i = root; i >= 0; --i) {
      if (grads[i].size() == 0 || !nodes_[i].backward) continue;
      nodes_[i].backward(grads[i], grads);
    }
    return grads;
  }

 private:
  struct Node {
    BackwardFn backward;  // null for leaves
    std::int64_t numel;
    bool is_leaf;
  };

  int append(const Shape& shape, BackwardFn fn, bool is_leaf) {
    nodes_.push_back(Node{std::move(fn), numel(shape), is_leaf});
    return int(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
};

// Gradient accumulation used inside backward closures: assign on first
// touch, add afterwards.
template <typename S, typename Expr>
void acc_grad(typename Tape<S>::Grads& grads, int node, const Expr& e) {
  if (node < 0) return;
  if (grads[node].size() == 0) {
    grads[node] = e;
  } else {
    grads[node] += e;
  }
}

// Common tape of the operands (null when all are constants). Mixing tapes
// is a programming error.
template <typename S>
Tape<S>* common_tape(std::initializer_list<const Tensor<S>*> ts) {
  Tape<S>* tape = nullptr;
  for (const Tensor<S>* t : ts) {
    if (!t->taped()) continue;
    if (tape && tape != t->tape())
      throw Error("operands recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

}  // namespace df
