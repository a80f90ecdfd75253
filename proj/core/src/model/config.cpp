#include "mvcbm/model/config.hpp"

#include <array>
#include <string>
#include <utility>

#include "mvcbm/error.hpp"

namespace mvcbm::model {

namespace {

constexpr std::array<std::pair<Family, std::string_view>, 7> kFamilies{{
    {Family::kMlp, "mlp"},
    {Family::kMvbm, "mvbm"},
    {Family::kCbmSeq, "cbm-seq"},
    {Family::kCbmJoint, "cbm-joint"},
    {Family::kMvcbmSeq, "mvcbm-seq"},
    {Family::kMvcbmJoint, "mvcbm-joint"},
    {Family::kSsmvcbm, "ssmvcbm"},
}};

}  // namespace

std::string_view to_string(FusionMode mode) { return mode == FusionMode::kMean ? "mean" : "lstm"; }

FusionMode fusion_from_string(std::string_view name) {
  if (name == "mean") return FusionMode::kMean;
  if (name == "lstm") return FusionMode::kLstm;
  throw InvalidArgument("unknown fusion mode '" + std::string(name) + "' (expected mean or lstm)");
}

std::string_view to_string(Family family) {
  for (const auto& [f, name] : kFamilies) {
    if (f == family) return name;
  }
  return "unknown";
}

Family family_from_string(std::string_view name) {
  for (const auto& [f, n] : kFamilies) {
    if (n == name) return f;
  }
  throw InvalidArgument("unknown model family '" + std::string(name) + "'");
}

bool is_single_view(Family family) {
  return family == Family::kMlp || family == Family::kCbmSeq || family == Family::kCbmJoint;
}

bool has_concepts(Family family) { return family != Family::kMlp && family != Family::kMvbm; }

void MvcbmConfig::validate() const {
  if (view_dim < 1) throw InvalidArgument("view_dim must be positive");
  if (concept_count < 1) throw InvalidArgument("concept_count must be at least 1");
  if (target_hidden < 1) throw InvalidArgument("target_hidden must be at least 1");
  if (dropout < 0.0 || dropout >= 1.0) throw InvalidArgument("dropout must lie in [0, 1)");
  for (auto w : encoder_widths) {
    if (w < 1) throw InvalidArgument("encoder widths must be positive");
  }
  for (auto w : concept_head_widths) {
    if (w < 1) throw InvalidArgument("concept head widths must be positive");
  }
}

void to_json(nlohmann::json& j, const MvcbmConfig& c) {
  j = {{"view_dim", c.view_dim},
       {"encoder_widths", c.encoder_widths},
       {"dropout", c.dropout},
       {"fusion", to_string(c.fusion)},
       {"concept_count", c.concept_count},
       {"concept_head_widths", c.concept_head_widths},
       {"target_hidden", c.target_hidden}};
}

void from_json(const nlohmann::json& j, MvcbmConfig& c) {
  const MvcbmConfig d;
  c.view_dim = j.value("view_dim", d.view_dim);
  c.encoder_widths = j.value("encoder_widths", d.encoder_widths);
  c.dropout = j.value("dropout", d.dropout);
  c.fusion = fusion_from_string(j.value("fusion", std::string(to_string(d.fusion))));
  c.concept_count = j.value("concept_count", d.concept_count);
  c.concept_head_widths = j.value("concept_head_widths", d.concept_head_widths);
  c.target_hidden = j.value("target_hidden", d.target_hidden);
}

std::vector<num::LayerSpec> encoder_specs(const MvcbmConfig& c) {
  using num::LayerSpec;
  std::vector<LayerSpec> specs;
  std::int64_t in = c.view_dim;
  for (std::size_t i = 0; i < c.encoder_widths.size(); ++i) {
    const auto w = c.encoder_widths[i];
    specs.push_back(LayerSpec::linear(in, w));
    if (i + 1 < c.encoder_widths.size()) {
      specs.push_back(LayerSpec::relu(w));
      specs.push_back(LayerSpec::dropout(w, c.dropout));
      specs.push_back(LayerSpec::batch_norm(w));
    }
    in = w;
  }
  return specs;
}

std::vector<num::LayerSpec> fusion_specs(const MvcbmConfig& c) {
  if (c.fusion == FusionMode::kMean) return {};
  return {num::LayerSpec::lstm(c.embed_dim(), c.embed_dim())};
}

std::vector<num::LayerSpec> head_specs(std::int64_t in, const std::vector<std::int64_t>& widths, std::int64_t out,
                                       num::LayerKind out_act) {
  using num::LayerSpec;
  std::vector<LayerSpec> specs;
  for (auto w : widths) {
    specs.push_back(LayerSpec::linear(in, w));
    specs.push_back(LayerSpec::relu(w));
    in = w;
  }
  specs.push_back(LayerSpec::linear(in, out));
  switch (out_act) {
    case num::LayerKind::kSigmoid:
      specs.push_back(LayerSpec::sigmoid(out));
      break;
    case num::LayerKind::kTanh:
      specs.push_back(LayerSpec::tanh(out));
      break;
    default:
      throw InvalidArgument("head activation must be sigmoid or tanh");
  }
  return specs;
}

std::vector<num::LayerSpec> target_specs(std::int64_t in, std::int64_t hidden) {
  return head_specs(in, {hidden}, 1, num::LayerKind::kSigmoid);
}

}  // namespace mvcbm::model
