#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace mvcbm {

// Seeded random stream. Child streams are derived from the seed and a tag,
// never from the parent's consumption state, so adding draws to one stream
// never perturbs another.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::mt19937_64& engine() noexcept { return engine_; }

  Rng fork(std::string_view tag) const { return Rng(derive_seed(seed_, tag)); }
  Rng fork(std::uint64_t index) const { return Rng(derive_seed(seed_, index)); }

  // Fresh 64-bit seed drawn from this stream (advances the engine).
  std::uint64_t next_seed() { return engine_(); }

  static std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    // FNV-1a over the tag, then mixed with the parent seed.
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : tag) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
    return derive_seed(seed, h);
  }

  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace mvcbm
