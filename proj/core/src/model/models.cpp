#include "mvcbm/model/models.hpp"

#include <algorithm>
#include <string>

#include "mvcbm/error.hpp"

namespace mvcbm::model {

namespace {

const std::vector<std::int64_t> kAdversaryWidths{256, 64};

void check_batch(const MvcbmConfig& c, const PackedViews& batch) {
  if (batch.rows.cols() != c.view_dim) {
    throw ShapeError("batch has view width " + std::to_string(batch.rows.cols()) + ", model expects " +
                     std::to_string(c.view_dim));
  }
  if (batch.segments.total() != batch.rows.rows()) throw ShapeError("batch rows do not match its segment layout");
}

Matrix<float> run_head(const ParamTree<float>& params, std::span<const LayerSpec> specs, const Matrix<float>& x) {
  if (!specs.empty() && x.cols() != specs.front().in) {
    throw ShapeError("head expects " + std::to_string(specs.front().in) + " inputs, got " + std::to_string(x.cols()));
  }
  return num::apply_layers(params, specs, x);
}

Matrix<float> concat(const Matrix<float>& a, const Matrix<float>& b) {
  Matrix<float> out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a;
  out.rightCols(b.cols()) = b;
  return out;
}

}  // namespace

BranchSpecs concept_branch_specs(const MvcbmConfig& c) {
  c.validate();
  return {encoder_specs(c), fusion_specs(c),
          head_specs(c.embed_dim(), c.concept_head_widths, c.concept_count, num::LayerKind::kSigmoid), c.fusion};
}

BranchSpecs rep_branch_specs(const MvcbmConfig& c, std::int64_t rep_dim) {
  c.validate();
  if (rep_dim < 0) throw InvalidArgument("representation size must be non-negative");
  return {encoder_specs(c), fusion_specs(c),
          head_specs(c.embed_dim(), c.concept_head_widths, rep_dim, num::LayerKind::kTanh), c.fusion};
}

std::vector<LayerSpec> adversary_specs(const MvcbmConfig& c, std::int64_t rep_dim) {
  if (rep_dim < 0) throw InvalidArgument("representation size must be non-negative");
  return head_specs(rep_dim, kAdversaryWidths, c.concept_count, num::LayerKind::kSigmoid);
}

void to_json(nlohmann::json& j, const ModelMeta& m) {
  j = {{"family", to_string(m.family)},
       {"concept_columns", m.concept_columns},
       {"seed", m.seed},
       {"train_config", m.train_config}};
}

void from_json(const nlohmann::json& j, ModelMeta& m) {
  m.family = family_from_string(j.at("family").get<std::string>());
  m.concept_columns = j.value("concept_columns", std::vector<std::size_t>{});
  m.seed = j.value("seed", std::uint64_t{0});
  m.train_config = j.value("train_config", nlohmann::json::object());
}

MvcbmModel init_mvcbm(const MvcbmConfig& c, const Rng& rng) {
  MvcbmModel m;
  m.config = c;
  m.phi = init_branch<float>(m.branch_specs(), rng.fork("phi"));
  Rng r_theta = rng.fork("theta");
  m.theta = num::build_mlp<float>(m.theta_specs(), r_theta);
  return m;
}

SsmvcbmModel init_ssmvcbm(const MvcbmConfig& c, std::int64_t rep_dim, const Rng& rng) {
  SsmvcbmModel m;
  m.config = c;
  m.rep_dim = rep_dim;
  m.phi_c = init_branch<float>(m.concept_specs(), rng.fork("phi"));
  if (rep_dim > 0) m.phi_z = init_branch<float>(m.rep_specs(), rng.fork("phi_z"));
  Rng r_theta = rng.fork("theta");
  m.theta = num::build_mlp<float>(m.theta_specs(), r_theta);
  Rng r_tau = rng.fork("tau");
  m.tau = num::build_mlp<float>(m.tau_specs(), r_tau);
  return m;
}

Outputs mvcbm_forward(const MvcbmModel& m, const PackedViews& batch, Mode mode, std::uint64_t seed) {
  check_batch(m.config, batch);
  const auto specs = m.branch_specs();
  const auto tspecs = m.theta_specs();
  Tape<float> tape(mode, seed);
  auto c = branch_forward(tape, m.phi, specs, tape.constant(batch.rows), batch.segments);
  auto y = num::forward_layers(tape, m.theta, tspecs, c);
  return {c.value(), Matrix<float>(c.rows(), 0), y.value()};
}

Outputs mvcbm_forward(const MvcbmModel& m, const ViewBatch& batch, Mode mode, std::uint64_t seed) {
  return mvcbm_forward(m, batch.pack(), mode, seed);
}

Outputs ssmvcbm_forward(const SsmvcbmModel& m, const PackedViews& batch, Mode mode, std::uint64_t seed) {
  check_batch(m.config, batch);
  Tape<float> tape(mode, seed);
  const auto rows = tape.constant(batch.rows);
  auto c = branch_forward(tape, m.phi_c, m.concept_specs(), rows, batch.segments);
  Var<float> input = c;
  Matrix<float> z(c.rows(), 0);
  if (m.rep_dim > 0) {
    auto zv = branch_forward(tape, m.phi_z, m.rep_specs(), rows, batch.segments);
    z = zv.value();
    input = num::concat_cols(c, zv);
  }
  auto y = num::forward_layers(tape, m.theta, m.theta_specs(), input);
  return {c.value(), std::move(z), y.value()};
}

Outputs ssmvcbm_forward(const SsmvcbmModel& m, const ViewBatch& batch, Mode mode, std::uint64_t seed) {
  return ssmvcbm_forward(m, batch.pack(), mode, seed);
}

Matrix<float> adversary_forward(const ParamTree<float>& tau, std::span<const LayerSpec> specs,
                                const Matrix<float>& z_hat) {
  return run_head(tau, specs, z_hat);
}

Outputs forward(const AnyModel& m, const PackedViews& batch) {
  if (const auto* mv = std::get_if<MvcbmModel>(&m)) return mvcbm_forward(*mv, batch);
  return ssmvcbm_forward(std::get<SsmvcbmModel>(m), batch);
}

Outputs predict(const AnyModel& m, const MultiviewDataset& ds, std::span<const std::size_t> rows,
                std::size_t chunk) {
  const auto& c = config_of(m);
  Outputs out;
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.c_hat.resize(n, c.concept_count);
  out.z_hat.resize(n, rep_dim_of(m));
  out.y_hat.resize(n, 1);
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const std::size_t len = std::min(chunk, rows.size() - start);
    const auto part = forward(m, pack(ds, rows.subspan(start, len)));
    const auto s = static_cast<Eigen::Index>(start);
    const auto l = static_cast<Eigen::Index>(len);
    out.c_hat.middleRows(s, l) = part.c_hat;
    out.z_hat.middleRows(s, l) = part.z_hat;
    out.y_hat.middleRows(s, l) = part.y_hat;
  }
  return out;
}

Matrix<float> target_from_concepts(const AnyModel& m, const Matrix<float>& c_hat, const Matrix<float>& z_hat) {
  if (const auto* mv = std::get_if<MvcbmModel>(&m)) {
    return run_head(mv->theta, mv->theta_specs(), c_hat);
  }
  const auto& ss = std::get<SsmvcbmModel>(m);
  if (z_hat.rows() != c_hat.rows() || z_hat.cols() != ss.rep_dim) {
    throw ShapeError("representation must be " + std::to_string(c_hat.rows()) + " x " + std::to_string(ss.rep_dim));
  }
  return run_head(ss.theta, ss.theta_specs(), ss.rep_dim > 0 ? concat(c_hat, z_hat) : c_hat);
}

const MvcbmConfig& config_of(const AnyModel& m) {
  return std::visit([](const auto& x) -> const MvcbmConfig& { return x.config; }, m);
}

const ModelMeta& meta_of(const AnyModel& m) {
  return std::visit([](const auto& x) -> const ModelMeta& { return x.meta; }, m);
}

ModelMeta& meta_of(AnyModel& m) {
  return std::visit([](auto& x) -> ModelMeta& { return x.meta; }, m);
}

std::int64_t rep_dim_of(const AnyModel& m) {
  if (const auto* ss = std::get_if<SsmvcbmModel>(&m)) return ss->rep_dim;
  return 0;
}

MultiviewDataset eval_view(const AnyModel& m, const MultiviewDataset& ds) {
  const auto& meta = meta_of(m);
  MultiviewDataset out = is_single_view(meta.family) ? ds.truncate_views(1) : ds;
  if (!meta.concept_columns.empty()) out = out.select_concepts(meta.concept_columns);
  return out;
}

}  // namespace mvcbm::model
