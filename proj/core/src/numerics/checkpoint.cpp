#include "mvcbm/numerics/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <fstream>
#include <iterator>

namespace mvcbm::num {

namespace {

constexpr std::array<char, 8> kMagic = {'M', 'V', 'C', 'B', 'M', 'C', 'K', 'P'};

std::size_t element_size(DType dtype) { return dtype == DType::kF32 ? 4 : 8; }

// Byte-swaps every element in place when the host is big-endian.
void to_little_endian(std::vector<std::byte>& bytes, std::size_t width) {
  if constexpr (std::endian::native == std::endian::little) {
    (void)bytes;
    (void)width;
  } else {
    for (std::size_t i = 0; i + width <= bytes.size(); i += width) {
      std::reverse(bytes.begin() + static_cast<std::ptrdiff_t>(i),
                   bytes.begin() + static_cast<std::ptrdiff_t>(i + width));
    }
  }
}

template <typename U>
void append_le(std::vector<std::byte>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<std::byte>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xffu));
  }
}

template <typename U>
U read_le(const std::vector<std::byte>& in, std::size_t pos) {
  if (pos + sizeof(U) > in.size()) throw FormatError("checkpoint truncated in header");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(in[pos + i]) << (8 * i);
  return static_cast<U>(v);
}

}  // namespace

std::string_view to_string(DType dtype) { return dtype == DType::kF32 ? "f32" : "f64"; }

DType dtype_from_string(std::string_view name) {
  if (name == "f32") return DType::kF32;
  if (name == "f64") return DType::kF64;
  throw FormatError("unknown dtype '" + std::string(name) + "'");
}

std::vector<std::byte> Checkpoint::serialize() const {
  nlohmann::json manifest;
  manifest["format"] = "mvcbm-checkpoint";
  manifest["format_version"] = kFormatVersion;
  manifest["metadata"] = metadata;
  manifest["groups"] = groups_;
  auto& leaves = manifest["leaves"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries_) {
    leaves.push_back({{"group", e.group},
                      {"name", e.name},
                      {"shape", e.shape},
                      {"dtype", to_string(e.dtype)},
                      {"trainable", e.trainable},
                      {"offset", offset},
                      {"bytes", e.bytes.size()}});
    offset += e.bytes.size();
  }
  const std::string text = manifest.dump();

  std::vector<std::byte> out;
  out.reserve(kMagic.size() + 12 + text.size() + offset);
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  append_le<std::uint32_t>(out, kFormatVersion);
  append_le<std::uint64_t>(out, text.size());
  for (char c : text) out.push_back(static_cast<std::byte>(c));
  for (const auto& e : entries_) {
    std::vector<std::byte> le = e.bytes;
    to_little_endian(le, element_size(e.dtype));
    out.insert(out.end(), le.begin(), le.end());
  }
  return out;
}

Checkpoint Checkpoint::deserialize(const std::vector<std::byte>& data) {
  if (data.size() < kMagic.size() + 12) throw FormatError("checkpoint too short");
  for (std::size_t i = 0; i < kMagic.size(); ++i) {
    if (static_cast<char>(data[i]) != kMagic[i]) throw FormatError("not a checkpoint file (bad magic)");
  }
  const auto version = read_le<std::uint32_t>(data, 8);
  if (version != kFormatVersion) {
    throw FormatError("unsupported checkpoint format version " + std::to_string(version));
  }
  const auto manifest_len = read_le<std::uint64_t>(data, 12);
  const std::size_t body = 20 + manifest_len;
  if (body > data.size()) throw FormatError("checkpoint truncated in manifest");
  std::string text(reinterpret_cast<const char*>(data.data()) + 20, manifest_len);

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + ex.what());
  }
  if (manifest.value("format", "") != "mvcbm-checkpoint" ||
      manifest.value("format_version", 0u) != kFormatVersion) {
    throw FormatError("checkpoint manifest has wrong format tag or version");
  }

  Checkpoint ck;
  try {
    ck.metadata = manifest.at("metadata");
    ck.groups_ = manifest.at("groups").get<std::vector<std::string>>();
    for (const auto& item : manifest.at("leaves")) {
      Entry e;
      e.group = item.at("group").get<std::string>();
      e.name = item.at("name").get<std::string>();
      e.shape = item.at("shape").get<Shape>();
      e.dtype = dtype_from_string(item.at("dtype").get<std::string>());
      e.trainable = item.at("trainable").get<bool>();
      const auto off = item.at("offset").get<std::uint64_t>();
      const auto len = item.at("bytes").get<std::uint64_t>();
      if (body + off + len > data.size()) throw FormatError("leaf '" + e.name + "' extends past end of file");
      e.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(body + off),
                     data.begin() + static_cast<std::ptrdiff_t>(body + off + len));
      to_little_endian(e.bytes, element_size(e.dtype));
      ck.entries_.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("malformed checkpoint manifest: ") + ex.what());
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> bytes(raw.size());
  std::memcpy(bytes.data(), raw.data(), raw.size());
  return deserialize(bytes);
}

}  // namespace mvcbm::num
