#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mvcbm/error.hpp"
#include "mvcbm/numerics/param_tree.hpp"

namespace mvcbm::num {

enum class Mode { kEval, kTrain };

template <typename T>
class Tape;

// Handle to a node recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Matrix<T>& value() const { return tape->value(*this); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Records a forward computation over dense matrices and replays it backwards.
// Nodes are appended in evaluation order, so reverse insertion order is a
// valid topological order for the backward sweep.
template <typename T>
class Tape {
 public:
  using Mat = Matrix<T>;
  using BackwardFn = std::function<void(const Mat& grad)>;

  explicit Tape(Mode mode = Mode::kEval, std::uint64_t seed = 0) : mode_(mode), rng_(seed) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool training() const { return mode_ == Mode::kTrain; }
  std::mt19937_64& rng() { return rng_; }

  Var<T> constant(Mat value) {
    Node node;
    node.owned = std::move(value);
    return push(std::move(node));
  }

  // Binds a leaf of `tree`. The tree must outlive the tape and must not be
  // modified while the tape is alive.
  Var<T> param(const ParamTree<T>& tree, std::string_view name) {
    const std::size_t leaf = tree.index_of(name);
    const auto key = std::make_pair(static_cast<const void*>(&tree), leaf);
    if (auto it = param_nodes_.find(key); it != param_nodes_.end()) return Var<T>{this, it->second};
    Node node;
    node.external = &tree[leaf].value;
    node.requires_grad = tree[leaf].trainable && !frozen_.contains(&tree);
    Var<T> v = push(std::move(node));
    param_nodes_.emplace(key, v.id);
    return v;
  }

  // Leaves of a frozen tree are read but never differentiated.
  void freeze(const ParamTree<T>& tree) { frozen_.insert(&tree); }
  bool frozen(const ParamTree<T>& tree) const { return frozen_.contains(&tree); }

  const Mat& value(Var<T> v) const {
    const Node& n = nodes_[check(v)];
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(Var<T> v) const { return nodes_[check(v)].requires_grad; }

  // Appends an op result. `backward` receives d(loss)/d(output) and must
  // accumulate into the inputs through grad_buffer(). It is dropped when no
  // input requires a gradient.
  Var<T> record(Mat value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    Node node;
    node.owned = std::move(value);
    for (const auto& in : inputs) {
      if (nodes_[check(in)].requires_grad) node.requires_grad = true;
    }
    if (node.requires_grad) node.backward = std::move(backward);
    return push(std::move(node));
  }

  // Zero-initialized (on first use) gradient accumulator of `v`.
  Mat& grad_buffer(Var<T> v) {
    Node& n = nodes_[check(v)];
    if (n.grad.size() == 0) n.grad = Mat::Zero(value(v).rows(), value(v).cols());
    return n.grad;
  }

  void backward(Var<T> loss) {
    const int id = check(loss);
    if (value(loss).size() != 1) throw ShapeError("backward() requires a scalar loss");
    if (!nodes_[id].requires_grad) return;
    nodes_[id].grad = Mat::Ones(1, 1);
    for (int i = id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(n.grad);
    }
  }

  // Gradient of the last backward() pass for every leaf of `tree`. Leaves the
  // loss does not depend on get zeros.
  GradTree<T> gradients(const ParamTree<T>& tree) const {
    GradTree<T> grads = tree.zeros_like();
    for (std::size_t i = 0; i < tree.size(); ++i) {
      auto it = param_nodes_.find(std::make_pair(static_cast<const void*>(&tree), i));
      if (it == param_nodes_.end()) continue;
      const Node& n = nodes_[it->second];
      if (n.grad.size() != 0) grads[i].value = n.grad;
    }
    return grads;
  }

  // Non-trainable buffer updates (batch-norm running statistics) computed in
  // training mode. They take effect only through commit_buffers().
  void stage_buffer(const ParamTree<T>& tree, std::size_t leaf, Mat value) {
    staged_.push_back(Staged{&tree, leaf, std::move(value)});
  }

  void commit_buffers(ParamTree<T>& tree) const {
    for (const auto& s : staged_) {
      if (s.tree == &tree) tree[s.leaf].value = s.value;
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Mat owned;
    const Mat* external = nullptr;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  struct Staged {
    const ParamTree<T>* tree;
    std::size_t leaf;
    Mat value;
  };

  Var<T> push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  int check(Var<T> v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
      throw InvalidArgument("variable does not belong to this tape");
    }
    return v.id;
  }

  Mode mode_;
  std::mt19937_64 rng_;
  std::vector<Node> nodes_;
  std::map<std::pair<const void*, std::size_t>, int> param_nodes_;
  std::set<const void*> frozen_;
  std::vector<Staged> staged_;
};

}  // namespace mvcbm::num
