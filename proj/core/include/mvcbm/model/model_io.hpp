#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "mvcbm/model/models.hpp"
#include "mvcbm/numerics/checkpoint.hpp"

namespace mvcbm::model {

inline constexpr std::int64_t kModelFormatVersion = 1;

// Constraints checked against the manifest on load.
struct LoadExpectations {
  std::optional<std::int64_t> concept_count;
  std::optional<FusionMode> fusion;
  std::optional<std::int64_t> view_dim;
};

num::Checkpoint to_checkpoint(const AnyModel& m);
AnyModel from_checkpoint(const num::Checkpoint& ckpt, const LoadExpectations& expect = {});

void save_model(const std::filesystem::path& path, const AnyModel& m);
AnyModel load_model(const std::filesystem::path& path, const LoadExpectations& expect = {});

// Manifest section describing the architecture.
nlohmann::json model_manifest(const AnyModel& m);
// 16 hex digits identifying the architecture and provenance.
std::string config_digest(const AnyModel& m);

}  // namespace mvcbm::model
