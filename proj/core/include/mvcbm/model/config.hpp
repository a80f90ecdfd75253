#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvcbm/numerics/layers.hpp"

namespace mvcbm::model {

enum class FusionMode { kMean, kLstm };

std::string_view to_string(FusionMode mode);
FusionMode fusion_from_string(std::string_view name);

// Model families compared in the experiments. The cbm-* and mlp families are
// trained and evaluated on the first view only.
enum class Family { kMlp, kMvbm, kCbmSeq, kCbmJoint, kMvcbmSeq, kMvcbmJoint, kSsmvcbm };

std::string_view to_string(Family family);
Family family_from_string(std::string_view name);
bool is_single_view(Family family);
bool has_concepts(Family family);

struct MvcbmConfig {
  std::int64_t view_dim = 500;
  std::vector<std::int64_t> encoder_widths{256, 256, 256, 128};
  double dropout = 0.05;
  FusionMode fusion = FusionMode::kMean;
  std::int64_t concept_count = 30;
  std::vector<std::int64_t> concept_head_widths{256, 64};
  std::int64_t target_hidden = 100;

  void validate() const;
  std::int64_t embed_dim() const { return encoder_widths.empty() ? view_dim : encoder_widths.back(); }

  bool operator==(const MvcbmConfig&) const = default;
};

void to_json(nlohmann::json& j, const MvcbmConfig& c);
void from_json(const nlohmann::json& j, MvcbmConfig& c);

// Linear, then ReLU, Dropout, and BatchNorm after every hidden layer; the
// last Linear has no activation.
std::vector<num::LayerSpec> encoder_specs(const MvcbmConfig& c);
// One LSTM layer of width embed_dim() for lstm fusion, nothing for mean.
std::vector<num::LayerSpec> fusion_specs(const MvcbmConfig& c);
// in -> widths... (ReLU between) -> out, followed by `out_act`.
std::vector<num::LayerSpec> head_specs(std::int64_t in, const std::vector<std::int64_t>& widths, std::int64_t out,
                                       num::LayerKind out_act);
// in -> H (ReLU) -> 1 (sigmoid).
std::vector<num::LayerSpec> target_specs(std::int64_t in, std::int64_t hidden);

}  // namespace mvcbm::model
