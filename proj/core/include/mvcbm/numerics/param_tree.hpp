#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mvcbm/error.hpp"

namespace mvcbm::num {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<std::int64_t>;

// One named array. Rank-1 leaves are stored as a single row.
template <typename T>
struct Leaf {
  std::string name;
  Shape shape;
  Matrix<T> value;
  // Buffers such as batch-norm running statistics are carried with the
  // parameters but never receive gradients or optimizer updates.
  bool trainable = true;

  std::size_t numel() const { return static_cast<std::size_t>(value.size()); }
};

// Ordered collection of named leaves. Leaf order is insertion order and is
// the canonical order for serialization and optimizer state.
template <typename T>
class ParamTree {
 public:
  ParamTree() = default;

  Leaf<T>& add(std::string name, Shape shape, bool trainable = true) {
    if (index_.contains(name)) throw InvalidArgument("duplicate leaf name '" + name + "'");
    std::int64_t rows = 1;
    std::int64_t cols = 1;
    if (shape.size() == 1) {
      cols = shape[0];
    } else if (shape.size() == 2) {
      rows = shape[0];
      cols = shape[1];
    } else {
      throw ShapeError("leaf '" + name + "' must have rank 1 or 2");
    }
    if (rows < 0 || cols < 0) throw ShapeError("negative dimension for leaf '" + name + "'");
    index_.emplace(name, leaves_.size());
    leaves_.push_back(Leaf<T>{std::move(name), std::move(shape), Matrix<T>::Zero(rows, cols), trainable});
    return leaves_.back();
  }

  bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

  std::size_t index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw InvalidArgument("no leaf named '" + std::string(name) + "'");
    return it->second;
  }

  Leaf<T>& at(std::string_view name) { return leaves_[index_of(name)]; }
  const Leaf<T>& at(std::string_view name) const { return leaves_[index_of(name)]; }

  Leaf<T>& operator[](std::size_t i) { return leaves_[i]; }
  const Leaf<T>& operator[](std::size_t i) const { return leaves_[i]; }

  std::span<Leaf<T>> leaves() { return leaves_; }
  std::span<const Leaf<T>> leaves() const { return leaves_; }

  std::size_t size() const { return leaves_.size(); }
  bool empty() const { return leaves_.empty(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& leaf : leaves_) n += leaf.numel();
    return n;
  }

  // Same names, shapes, and order.
  template <typename U>
  bool same_structure(const ParamTree<U>& other) const {
    if (size() != other.size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (leaves_[i].name != other[i].name || leaves_[i].shape != other[i].shape) return false;
    }
    return true;
  }

  // Tree with the same structure and every value set to zero.
  ParamTree zeros_like() const {
    ParamTree out = *this;
    for (auto& leaf : out.leaves_) leaf.value.setZero();
    return out;
  }

  template <typename U>
  ParamTree<U> cast() const {
    ParamTree<U> out;
    for (const auto& leaf : leaves_) {
      auto& dst = out.add(leaf.name, leaf.shape, leaf.trainable);
      dst.value = leaf.value.template cast<U>();
    }
    return out;
  }

  // Copies every leaf of `other` into this tree with `prefix` prepended.
  void append(std::string_view prefix, const ParamTree& other) {
    for (const auto& leaf : other.leaves_) {
      auto& dst = add(std::string(prefix) + leaf.name, leaf.shape, leaf.trainable);
      dst.value = leaf.value;
    }
  }

  // Leaves whose names start with `prefix`, with the prefix stripped.
  ParamTree extract(std::string_view prefix) const {
    ParamTree out;
    for (const auto& leaf : leaves_) {
      if (std::string_view(leaf.name).starts_with(prefix)) {
        auto& dst = out.add(leaf.name.substr(prefix.size()), leaf.shape, leaf.trainable);
        dst.value = leaf.value;
      }
    }
    return out;
  }

  // Element-wise bit equality of all leaves (structure must match).
  bool bit_equal(const ParamTree& other) const {
    if (!same_structure(other)) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& a = leaves_[i].value;
      const auto& b = other.leaves_[i].value;
      if (std::memcmp(a.data(), b.data(), sizeof(T) * static_cast<std::size_t>(a.size())) != 0) {
        return false;
      }
    }
    return true;
  }

  bool all_finite() const {
    for (const auto& leaf : leaves_) {
      if (!leaf.value.allFinite()) return false;
    }
    return true;
  }

 private:
  std::vector<Leaf<T>> leaves_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Gradients share the parameter tree's layout.
template <typename T>
using GradTree = ParamTree<T>;

}  // namespace mvcbm::num
