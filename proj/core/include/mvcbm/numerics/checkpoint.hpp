#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvcbm/error.hpp"
#include "mvcbm/numerics/adam.hpp"
#include "mvcbm/numerics/param_tree.hpp"

namespace mvcbm::num {

enum class DType : std::uint8_t { kF32, kF64 };

std::string_view to_string(DType dtype);
DType dtype_from_string(std::string_view name);

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>, "leaves are f32 or f64");
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

// Container of named parameter groups plus free-form JSON metadata.
//
// On disk: the 8-byte magic "MVCBMCKP", a little-endian u32 format version,
// a little-endian u64 manifest length, the UTF-8 JSON manifest (metadata,
// format version, and one entry per leaf with group, name, shape, dtype,
// trainable flag, byte offset, byte length), then the raw little-endian
// IEEE-754 leaf buffers in manifest order.
class Checkpoint {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  nlohmann::json metadata = nlohmann::json::object();

  template <typename T>
  void put(std::string_view group, const ParamTree<T>& tree) {
    if (has_group(group)) throw InvalidArgument("checkpoint group '" + std::string(group) + "' already present");
    groups_.emplace_back(group);
    for (const auto& leaf : tree.leaves()) {
      Entry e;
      e.group = std::string(group);
      e.name = leaf.name;
      e.shape = leaf.shape;
      e.dtype = dtype_of<T>();
      e.trainable = leaf.trainable;
      e.bytes.resize(sizeof(T) * leaf.numel());
      if (!e.bytes.empty()) std::memcpy(e.bytes.data(), leaf.value.data(), e.bytes.size());
      entries_.push_back(std::move(e));
    }
  }

  template <typename T>
  ParamTree<T> get(std::string_view group) const {
    if (!has_group(group)) throw FormatError("checkpoint has no group '" + std::string(group) + "'");
    ParamTree<T> tree;
    for (const auto& e : entries_) {
      if (e.group != group) continue;
      if (e.dtype != dtype_of<T>()) {
        throw FormatError("leaf '" + e.group + "/" + e.name + "' stored as " + std::string(to_string(e.dtype)));
      }
      auto& leaf = tree.add(e.name, e.shape, e.trainable);
      if (e.bytes.size() != sizeof(T) * leaf.numel()) throw FormatError("leaf '" + e.name + "' has wrong byte count");
      if (!e.bytes.empty()) std::memcpy(leaf.value.data(), e.bytes.data(), e.bytes.size());
    }
    return tree;
  }

  template <typename T>
  void put_adam(std::string_view group, const AdamState<T>& state) {
    put(std::string(group) + ".m", state.m);
    put(std::string(group) + ".v", state.v);
    metadata["adam_steps"][std::string(group)] = state.t;
  }

  template <typename T>
  AdamState<T> get_adam(std::string_view group) const {
    AdamState<T> state{get<T>(std::string(group) + ".m"), get<T>(std::string(group) + ".v"), 0};
    state.t = metadata.at("adam_steps").at(std::string(group)).template get<std::int64_t>();
    return state;
  }

  bool has_group(std::string_view group) const {
    for (const auto& g : groups_) {
      if (g == group) return true;
    }
    return false;
  }

  const std::vector<std::string>& groups() const { return groups_; }

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  std::vector<std::byte> serialize() const;
  static Checkpoint deserialize(const std::vector<std::byte>& data);

 private:
  struct Entry {
    std::string group;
    std::string name;
    Shape shape;
    DType dtype = DType::kF32;
    bool trainable = true;
    std::vector<std::byte> bytes;  // host byte order
  };

  std::vector<std::string> groups_;
  std::vector<Entry> entries_;
};

}  // namespace mvcbm::num
