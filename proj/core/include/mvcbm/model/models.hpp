#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvcbm/model/config.hpp"
#include "mvcbm/model/views.hpp"
#include "mvcbm/numerics/layers.hpp"
#include "mvcbm/rng.hpp"

namespace mvcbm::model {

using num::LayerSpec;
using num::Mode;
using num::ParamTree;
using num::Tape;
using num::Var;

// Layer stacks of one encoder -> fusion -> head pipeline.
struct BranchSpecs {
  std::vector<LayerSpec> encoder;
  std::vector<LayerSpec> fusion;
  std::vector<LayerSpec> head;
  FusionMode fusion_mode = FusionMode::kMean;
};

// Concept branch: head ends in K sigmoid units.
BranchSpecs concept_branch_specs(const MvcbmConfig& c);
// Representation branch: head ends in J tanh units.
BranchSpecs rep_branch_specs(const MvcbmConfig& c, std::int64_t rep_dim);
// J -> 256 -> 64 -> K with sigmoid output, mirroring the concept head.
std::vector<LayerSpec> adversary_specs(const MvcbmConfig& c, std::int64_t rep_dim);

// psi: per-view encoder, xi: fusion (empty for mean), zeta: head.
template <typename T>
struct Branch {
  ParamTree<T> psi;
  ParamTree<T> xi;
  ParamTree<T> zeta;

  template <typename U>
  Branch<U> cast() const {
    return {psi.template cast<U>(), xi.template cast<U>(), zeta.template cast<U>()};
  }
  bool bit_equal(const Branch& o) const { return psi.bit_equal(o.psi) && xi.bit_equal(o.xi) && zeta.bit_equal(o.zeta); }
};

template <typename T>
Branch<T> init_branch(const BranchSpecs& s, const Rng& rng) {
  Rng r_psi = rng.fork("psi");
  Rng r_xi = rng.fork("xi");
  Rng r_zeta = rng.fork("zeta");
  return {num::build_mlp<T>(s.encoder, r_psi), num::build_mlp<T>(s.fusion, r_xi), num::build_mlp<T>(s.head, r_zeta)};
}

// Fuses per-view features (one row per view) into one row per sample.
template <typename T>
Var<T> fuse(Tape<T>& tape, Var<T> h, const num::Segments& segs, FusionMode mode, const ParamTree<T>& xi,
            std::span<const LayerSpec> fusion_specs) {
  if (mode == FusionMode::kMean) return num::segment_mean(h, segs);
  return num::forward_layers(tape, xi, fusion_specs, h, &segs);
}

// Encoder on every view, fusion, then the head.
template <typename T>
Var<T> branch_forward(Tape<T>& tape, const ParamTree<T>& psi, const ParamTree<T>& xi, const ParamTree<T>& zeta,
                      const BranchSpecs& s, Var<T> rows, const num::Segments& segs) {
  if (segs.total() != rows.rows()) throw ShapeError("view rows do not match the segment layout");
  Var<T> h = num::forward_layers(tape, psi, s.encoder, rows, &segs);
  Var<T> fused = fuse(tape, h, segs, s.fusion_mode, xi, s.fusion);
  return num::forward_layers(tape, zeta, s.head, fused);
}

template <typename T>
Var<T> branch_forward(Tape<T>& tape, const Branch<T>& br, const BranchSpecs& s, Var<T> rows,
                      const num::Segments& segs) {
  return branch_forward(tape, br.psi, br.xi, br.zeta, s, rows, segs);
}

template <typename T>
void commit_buffers(const Tape<T>& tape, Branch<T>& br) {
  tape.commit_buffers(br.psi);
  tape.commit_buffers(br.xi);
  tape.commit_buffers(br.zeta);
}

template <typename T>
void freeze(Tape<T>& tape, const Branch<T>& br) {
  tape.freeze(br.psi);
  tape.freeze(br.xi);
  tape.freeze(br.zeta);
}

// Provenance carried with a trained model.
struct ModelMeta {
  Family family = Family::kMvcbmSeq;
  // Dataset concept columns supervising the K outputs (empty for black boxes).
  std::vector<std::size_t> concept_columns;
  std::uint64_t seed = 0;
  nlohmann::json train_config = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const ModelMeta& m);
void from_json(const nlohmann::json& j, ModelMeta& m);

struct MvcbmModel {
  MvcbmConfig config;
  Branch<float> phi;
  ParamTree<float> theta;
  ModelMeta meta;

  BranchSpecs branch_specs() const { return concept_branch_specs(config); }
  std::vector<LayerSpec> theta_specs() const { return target_specs(config.concept_count, config.target_hidden); }
};

struct SsmvcbmModel {
  MvcbmConfig config;
  std::int64_t rep_dim = 0;
  Branch<float> phi_c;
  Branch<float> phi_z;
  ParamTree<float> theta;
  ParamTree<float> tau;
  ModelMeta meta;

  BranchSpecs concept_specs() const { return concept_branch_specs(config); }
  BranchSpecs rep_specs() const { return rep_branch_specs(config, rep_dim); }
  std::vector<LayerSpec> theta_specs() const {
    return target_specs(config.concept_count + rep_dim, config.target_hidden);
  }
  std::vector<LayerSpec> tau_specs() const { return adversary_specs(config, rep_dim); }
};

using AnyModel = std::variant<MvcbmModel, SsmvcbmModel>;

MvcbmModel init_mvcbm(const MvcbmConfig& c, const Rng& rng);
SsmvcbmModel init_ssmvcbm(const MvcbmConfig& c, std::int64_t rep_dim, const Rng& rng);

struct Outputs {
  Matrix<float> c_hat;  // B x K in (0, 1)
  Matrix<float> z_hat;  // B x J in (-1, 1); B x 0 for MVCBM
  Matrix<float> y_hat;  // B x 1 in (0, 1)
};

Outputs mvcbm_forward(const MvcbmModel& m, const PackedViews& batch, Mode mode = Mode::kEval,
                      std::uint64_t seed = 0);
Outputs mvcbm_forward(const MvcbmModel& m, const ViewBatch& batch, Mode mode = Mode::kEval, std::uint64_t seed = 0);
Outputs ssmvcbm_forward(const SsmvcbmModel& m, const PackedViews& batch, Mode mode = Mode::kEval,
                        std::uint64_t seed = 0);
Outputs ssmvcbm_forward(const SsmvcbmModel& m, const ViewBatch& batch, Mode mode = Mode::kEval,
                        std::uint64_t seed = 0);
Matrix<float> adversary_forward(const ParamTree<float>& tau, std::span<const LayerSpec> specs,
                                const Matrix<float>& z_hat);

// Eval-mode forward for either model kind.
Outputs forward(const AnyModel& m, const PackedViews& batch);
// Eval-mode forward over the given dataset rows, in chunks.
Outputs predict(const AnyModel& m, const MultiviewDataset& ds, std::span<const std::size_t> rows,
                std::size_t chunk = 1024);
// Target head applied to supplied concept (and representation) values.
Matrix<float> target_from_concepts(const AnyModel& m, const Matrix<float>& c_hat, const Matrix<float>& z_hat);

const MvcbmConfig& config_of(const AnyModel& m);
const ModelMeta& meta_of(const AnyModel& m);
ModelMeta& meta_of(AnyModel& m);
std::int64_t rep_dim_of(const AnyModel& m);

// Dataset view for evaluating `m`: first view only for single-view families,
// concept columns restricted to the ones the model was trained on.
MultiviewDataset eval_view(const AnyModel& m, const MultiviewDataset& ds);

}  // namespace mvcbm::model
