#include "mvcbm/training/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "mvcbm/error.hpp"

namespace mvcbm::train {

namespace {

using model::BranchSpecs;
using model::PackedViews;
using num::LayerSpec;
using num::Mode;
using num::ParamTree;
using num::Tape;
using num::Var;

std::vector<double> inverse_count_weights(const std::vector<double>& column, const std::string& name) {
  std::size_t pos = 0;
  for (double v : column) pos += v != 0.0 ? 1 : 0;
  const std::size_t neg = column.size() - pos;
  if (pos == 0 || neg == 0) throw InvalidArgument(name + " has a single class");
  std::vector<double> w(column.size());
  for (std::size_t i = 0; i < column.size(); ++i) {
    w[i] = 1.0 / static_cast<double>(column[i] != 0.0 ? pos : neg);
  }
  return w;
}

Matrix<float> gather_rows(const Matrix<float>& m, std::span<const std::size_t> rows) {
  Matrix<float> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(rows[r]));
  }
  return out;
}

Matrix<float> gather_rows(const Matrix<double>& m, std::span<const std::size_t> rows) {
  Matrix<float> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(rows[r])).cast<float>();
  }
  return out;
}

Matrix<float> target_weight_column(const SampleWeights& w, std::span<const std::size_t> rows) {
  Matrix<float> out(static_cast<Eigen::Index>(rows.size()), 1);
  for (std::size_t r = 0; r < rows.size(); ++r) out(static_cast<Eigen::Index>(r), 0) = static_cast<float>(w.target[rows[r]]);
  return out;
}

// w_i^t * w_i^{c_k} for the given rows.
Matrix<float> concept_loss_weights(const SampleWeights& w, std::span<const std::size_t> rows) {
  Matrix<float> out(static_cast<Eigen::Index>(rows.size()), w.concepts.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto i = static_cast<Eigen::Index>(rows[r]);
    out.row(static_cast<Eigen::Index>(r)) = (w.target[rows[r]] * w.concepts.row(i)).cast<float>();
  }
  return out;
}

// Eval-mode branch outputs for every sample of ds.
Matrix<float> branch_outputs(const Branch<float>& br, const BranchSpecs& specs, const MultiviewDataset& ds,
                             std::size_t chunk = 1024) {
  const std::int64_t width = specs.head.empty() ? 0 : specs.head.back().out;
  Matrix<float> out(static_cast<Eigen::Index>(ds.size()), width);
  const auto rows = model::all_rows(ds);
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const std::size_t len = std::min(chunk, rows.size() - start);
    const PackedViews views = model::pack(ds, std::span(rows).subspan(start, len));
    Tape<float> tape(Mode::kEval);
    auto v = model::branch_forward(tape, br, specs, tape.constant(views.rows), views.segments);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(len)) = v.value();
  }
  return out;
}

// Mini-batch loop shared by every phase: per-epoch shuffle, one tape per step
// seeded from rng (dropout masks), finite-loss guard, optimizer step.
template <typename BuildLoss>
void run_epochs(std::size_t n, int epochs, int batch_size, Rng rng, const std::string& phase, int iteration,
                const EpochLogger& log, TreeOptimizer& opt, BuildLoss&& build) {
  if (epochs <= 0 || n == 0) return;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(batch_size);
  std::int64_t step = 0;
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    double total = 0.0;
    std::int64_t steps = 0;
    for (std::size_t start = 0; start < n; start += bs) {
      const auto rows = std::span<const std::size_t>(order).subspan(start, std::min(bs, n - start));
      Tape<float> tape(Mode::kTrain, rng.next_seed());
      Var<float> loss = build(tape, rows);
      const double value = loss.value()(0, 0);
      if (!std::isfinite(value)) {
        throw NonFiniteError(phase + " step " + std::to_string(step), "loss is " + std::to_string(value));
      }
      tape.backward(loss);
      try {
        opt.step(tape);
      } catch (const NonFiniteError& err) {
        throw NonFiniteError(phase + " step " + std::to_string(step) + " leaf " + err.where(), "gradient");
      }
      total += value;
      ++steps;
      ++step;
    }
    if (log) log(EpochRecord{phase, iteration, e, total / static_cast<double>(steps), steps});
  }
}

// Phase 1: concept model on sum_i sum_k w_i^t w_i^{c_k} BCE(c_hat_ik, c_ik).
void fit_concept_branch(Branch<float>& phi, const BranchSpecs& specs, const MultiviewDataset& ds,
                        const SampleWeights& w, const TrainConfig& cfg, const Rng& rng, const EpochLogger& log) {
  TreeOptimizer opt({&phi.psi, &phi.xi, &phi.zeta}, cfg.lr_c);
  run_epochs(ds.size(), cfg.epochs_c, cfg.batch_size, rng, "concept", -1, log, opt,
             [&](Tape<float>& tape, std::span<const std::size_t> rows) {
               const PackedViews views = model::pack(ds, rows);
               auto c = model::branch_forward(tape, phi, specs, tape.constant(views.rows), views.segments);
               return num::weighted_bce(c, model::concept_matrix(ds, rows), concept_loss_weights(w, rows));
             });
}

// Target head on fixed inputs (cached predictions).
void fit_head_on_inputs(ParamTree<float>& theta, const std::vector<LayerSpec>& specs, const Matrix<float>& inputs,
                        const MultiviewDataset& ds, const SampleWeights& w, int epochs, double lr, int batch_size,
                        const Rng& rng, const std::string& phase, const EpochLogger& log) {
  TreeOptimizer opt({&theta}, lr);
  run_epochs(ds.size(), epochs, batch_size, rng, phase, -1, log, opt,
             [&](Tape<float>& tape, std::span<const std::size_t> rows) {
               auto y = num::forward_layers(tape, theta, specs, tape.constant(gather_rows(inputs, rows)));
               return num::weighted_bce(y, model::label_column(ds, rows), target_weight_column(w, rows));
             });
}

void check_dataset(const MultiviewDataset& ds, const MvcbmConfig& arch, bool concepts) {
  if (ds.empty()) throw InvalidArgument("training data is empty");
  if (static_cast<std::int64_t>(ds.view_dim()) != arch.view_dim) {
    throw ShapeError("dataset views have width " + std::to_string(ds.view_dim()) + ", model expects " +
                     std::to_string(arch.view_dim));
  }
  if (concepts && static_cast<std::int64_t>(ds.concept_count()) != arch.concept_count) {
    throw ShapeError("dataset has " + std::to_string(ds.concept_count()) + " concepts, model expects " +
                     std::to_string(arch.concept_count));
  }
}

}  // namespace

SampleWeights class_weights(const MultiviewDataset& ds) {
  SampleWeights w = target_weights(ds);
  const auto n = static_cast<Eigen::Index>(ds.size());
  const auto k = static_cast<Eigen::Index>(ds.concept_count());
  w.concepts.resize(n, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    const auto col = inverse_count_weights(ds.concept_column(static_cast<std::size_t>(j)),
                                           "concept column " + std::to_string(j));
    for (Eigen::Index i = 0; i < n; ++i) w.concepts(i, j) = col[static_cast<std::size_t>(i)];
  }
  w.concepts /= w.concepts.sum();
  return w;
}

SampleWeights target_weights(const MultiviewDataset& ds) {
  SampleWeights w;
  w.target = inverse_count_weights(ds.label_vector(), "label column");
  const double total = std::accumulate(w.target.begin(), w.target.end(), 0.0);
  for (double& v : w.target) v /= total;
  return w;
}

void TrainConfig::validate() const {
  if (epochs_c < 0 || epochs_y < 0) throw InvalidArgument("epoch counts must be non-negative");
  if (!(lr_c > 0.0) || !(lr_y > 0.0)) throw InvalidArgument("learning rates must be positive");
  if (batch_size < 1) throw InvalidArgument("batch size must be positive");
  if (!(alpha >= 0.0)) throw InvalidArgument("alpha must be non-negative");
}

void SsTrainConfig::validate() const {
  base.validate();
  if (iterations < 0 || epochs_z < 0 || epochs_a < 0) throw InvalidArgument("epoch counts must be non-negative");
  if (!(lr_z > 0.0) || !(lr_a > 0.0)) throw InvalidArgument("learning rates must be positive");
  if (!(lambda >= 0.0)) throw InvalidArgument("lambda must be non-negative");
  if (rep_dim < 0) throw InvalidArgument("representation size must be non-negative");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs_c", c.epochs_c}, {"epochs_y", c.epochs_y},     {"lr_c", c.lr_c},
       {"lr_y", c.lr_y},         {"batch_size", c.batch_size}, {"alpha", c.alpha},
       {"mode", c.mode == TrainMode::kSequential ? "sequential" : "joint"}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs_c = j.value("epochs_c", d.epochs_c);
  c.epochs_y = j.value("epochs_y", d.epochs_y);
  c.lr_c = j.value("lr_c", d.lr_c);
  c.lr_y = j.value("lr_y", d.lr_y);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.alpha = j.value("alpha", d.alpha);
  const auto mode = j.value("mode", std::string("sequential"));
  if (mode != "sequential" && mode != "joint") throw InvalidArgument("unknown training mode '" + mode + "'");
  c.mode = mode == "joint" ? TrainMode::kJoint : TrainMode::kSequential;
}

void to_json(nlohmann::json& j, const SsTrainConfig& c) {
  j = c.base;
  j["iterations"] = c.iterations;
  j["epochs_z"] = c.epochs_z;
  j["epochs_a"] = c.epochs_a;
  j["lr_z"] = c.lr_z;
  j["lr_a"] = c.lr_a;
  j["lambda"] = c.lambda;
  j["rep_dim"] = c.rep_dim;
}

void from_json(const nlohmann::json& j, SsTrainConfig& c) {
  const SsTrainConfig d = ss_preset();
  c.base = d.base;
  from_json(j, c.base);
  c.iterations = j.value("iterations", d.iterations);
  c.epochs_z = j.value("epochs_z", d.epochs_z);
  c.epochs_a = j.value("epochs_a", d.epochs_a);
  c.lr_z = j.value("lr_z", d.lr_z);
  c.lr_a = j.value("lr_a", d.lr_a);
  c.lambda = j.value("lambda", d.lambda);
  c.rep_dim = j.value("rep_dim", d.rep_dim);
}

TrainConfig preset(Family family) {
  TrainConfig c;
  switch (family) {
    case Family::kMlp:
    case Family::kMvbm:
      c.epochs_c = 0;
      c.epochs_y = 150;
      break;
    case Family::kCbmJoint:
    case Family::kMvcbmJoint:
      c.epochs_c = 0;
      c.epochs_y = 120;
      c.lr_c = 1e-4;
      c.lr_y = 1e-4;
      c.mode = TrainMode::kJoint;
      break;
    case Family::kCbmSeq:
    case Family::kMvcbmSeq:
    case Family::kSsmvcbm:
      break;
  }
  return c;
}

SsTrainConfig ss_preset() {
  SsTrainConfig c;
  c.base = preset(Family::kSsmvcbm);
  return c;
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"phase", r.phase}, {"epoch", r.epoch}, {"mean_loss", r.mean_loss}, {"steps", r.steps}};
  if (r.iteration >= 0) j["iteration"] = r.iteration;
}

JsonlLogger::JsonlLogger(const std::filesystem::path& path) : out_(path, std::ios::app) {
  if (!out_) throw Error("cannot open log file " + path.string());
}

void JsonlLogger::operator()(const EpochRecord& r) {
  out_ << nlohmann::json(r).dump() << '\n';
  out_.flush();
}

EpochLogger JsonlLogger::sink() {
  return [this](const EpochRecord& r) { (*this)(r); };
}

TreeOptimizer::TreeOptimizer(std::vector<ParamTree<float>*> trees, double lr) : trees_(std::move(trees)) {
  opts_.lr = lr;
  for (auto* t : trees_) states_.push_back(num::AdamState<float>::zeros_like(*t));
}

void TreeOptimizer::step(const Tape<float>& tape) {
  for (std::size_t i = 0; i < trees_.size(); ++i) {
    auto& tree = *trees_[i];
    if (tree.empty()) continue;
    const auto grads = tape.gradients(tree);
    for (const auto& leaf : grads.leaves()) {
      if (!leaf.value.allFinite()) throw NonFiniteError(leaf.name, "gradient");
    }
    num::adam_step(tree, grads, states_[i], opts_);
    tape.commit_buffers(tree);
  }
}

MvcbmModel train_concepts(const MultiviewDataset& ds, const MvcbmConfig& arch, const TrainConfig& cfg,
                          const Rng& rng, const EpochLogger& log) {
  cfg.validate();
  check_dataset(ds, arch, true);
  const SampleWeights w = class_weights(ds);
  MvcbmModel m = model::init_mvcbm(arch, rng.fork("init"));
  fit_concept_branch(m.phi, m.branch_specs(), ds, w, cfg, rng.fork("phase1"), log);
  m.meta.seed = rng.seed();
  return m;
}

void train_target_head(MvcbmModel& m, const MultiviewDataset& ds, const TrainConfig& cfg, const Rng& rng,
                       const EpochLogger& log) {
  cfg.validate();
  check_dataset(ds, m.config, false);
  const SampleWeights w = target_weights(ds);
  const Matrix<float> c_hat = branch_outputs(m.phi, m.branch_specs(), ds);
  fit_head_on_inputs(m.theta, m.theta_specs(), c_hat, ds, w, cfg.epochs_y, cfg.lr_y, cfg.batch_size,
                     rng.fork("phase2"), "target", log);
}

MvcbmModel train_sequential(const MultiviewDataset& ds, const MvcbmConfig& arch, const TrainConfig& cfg,
                            const Rng& rng, const EpochLogger& log) {
  MvcbmModel m = train_concepts(ds, arch, cfg, rng, log);
  train_target_head(m, ds, cfg, rng, log);
  m.meta.train_config = cfg;
  return m;
}

Var<float> joint_loss(Tape<float>& tape, const MvcbmModel& m, const MultiviewDataset& ds, const SampleWeights& w,
                      std::span<const std::size_t> rows, double alpha) {
  const PackedViews views = model::pack(ds, rows);
  auto c = model::branch_forward(tape, m.phi, m.branch_specs(), tape.constant(views.rows), views.segments);
  auto y = num::forward_layers(tape, m.theta, m.theta_specs(), c);
  auto lt = num::weighted_bce(y, model::label_column(ds, rows), target_weight_column(w, rows));
  auto lc = num::weighted_bce(c, model::concept_matrix(ds, rows), concept_loss_weights(w, rows));
  return num::axpby(lt, 1.0f, lc, static_cast<float>(alpha));
}

MvcbmModel train_joint(const MultiviewDataset& ds, const MvcbmConfig& arch, const TrainConfig& cfg, const Rng& rng,
                       const EpochLogger& log) {
  cfg.validate();
  check_dataset(ds, arch, true);
  const SampleWeights w = class_weights(ds);
  MvcbmModel m = model::init_mvcbm(arch, rng.fork("init"));
  TreeOptimizer opt({&m.phi.psi, &m.phi.xi, &m.phi.zeta, &m.theta}, cfg.lr_y);
  run_epochs(ds.size(), cfg.epochs_y, cfg.batch_size, rng.fork("joint"), "joint", -1, log, opt,
             [&](Tape<float>& tape, std::span<const std::size_t> rows) {
               return joint_loss(tape, m, ds, w, rows, cfg.alpha);
             });
  m.meta.family = Family::kMvcbmJoint;
  m.meta.seed = rng.seed();
  m.meta.train_config = cfg;
  return m;
}

MvcbmModel train_blackbox(const MultiviewDataset& ds, const MvcbmConfig& arch, const TrainConfig& cfg,
                          const Rng& rng, BlackBoxKind kind, const EpochLogger& log) {
  cfg.validate();
  const MultiviewDataset single = kind == BlackBoxKind::kSingleViewMlp ? ds.truncate_views(1) : MultiviewDataset{};
  const MultiviewDataset& data = kind == BlackBoxKind::kSingleViewMlp ? single : ds;
  check_dataset(data, arch, false);
  const SampleWeights w = target_weights(data);
  MvcbmModel m = model::init_mvcbm(arch, rng.fork("init"));
  const auto specs = m.branch_specs();
  const auto tspecs = m.theta_specs();
  TreeOptimizer opt({&m.phi.psi, &m.phi.xi, &m.phi.zeta, &m.theta}, cfg.lr_y);
  run_epochs(data.size(), cfg.epochs_y, cfg.batch_size, rng.fork("blackbox"), "blackbox", -1, log, opt,
             [&](Tape<float>& tape, std::span<const std::size_t> rows) {
               const PackedViews views = model::pack(data, rows);
               auto c = model::branch_forward(tape, m.phi, specs, tape.constant(views.rows), views.segments);
               auto y = num::forward_layers(tape, m.theta, tspecs, c);
               return num::weighted_bce(y, model::label_column(data, rows), target_weight_column(w, rows));
             });
  m.meta.family = kind == BlackBoxKind::kSingleViewMlp ? Family::kMlp : Family::kMvbm;
  m.meta.seed = rng.seed();
  m.meta.train_config = cfg;
  return m;
}

LossTerms blackbox_loss_terms(const MvcbmModel& m, const MultiviewDataset& ds, std::span<const std::size_t> rows) {
  const SampleWeights w = target_weights(ds);
  const auto views = model::pack(ds, rows);
  const auto out = model::mvcbm_forward(m, views);
  Tape<float> tape(Mode::kEval);
  auto lt = num::weighted_bce(tape.constant(out.y_hat), model::label_column(ds, rows), target_weight_column(w, rows));
  return {lt.value()(0, 0), 0.0};
}

SsmvcbmTrainer::SsmvcbmTrainer(const MultiviewDataset& ds, const MvcbmConfig& arch, const SsTrainConfig& cfg,
                               const Rng& rng, EpochLogger log)
    : ds_(ds), cfg_(cfg), rng_(rng), log_(std::move(log)) {
  cfg_.validate();
  check_dataset(ds_, arch, true);
  weights_ = class_weights(ds_);
  model_ = model::init_ssmvcbm(arch, cfg_.rep_dim, rng_.fork("init"));
  model_.meta.family = Family::kSsmvcbm;
  model_.meta.seed = rng_.seed();
  model_.meta.train_config = cfg_;
}

void SsmvcbmTrainer::phase1() {
  fit_concept_branch(model_.phi_c, model_.concept_specs(), ds_, weights_, cfg_.base, rng_.fork("phase1"), log_);
  c_cache_.reset();
  concepts_trained_ = true;
}

void SsmvcbmTrainer::adopt_concept_branch(const Branch<float>& phi_c) {
  if (!phi_c.psi.same_structure(model_.phi_c.psi) || !phi_c.xi.same_structure(model_.phi_c.xi) ||
      !phi_c.zeta.same_structure(model_.phi_c.zeta)) {
    throw ShapeError("concept branch does not match the model architecture");
  }
  model_.phi_c = phi_c;
  c_cache_.reset();
  concepts_trained_ = true;
}

const Matrix<float>& SsmvcbmTrainer::concept_cache() {
  if (!c_cache_) c_cache_ = branch_outputs(model_.phi_c, model_.concept_specs(), ds_);
  return *c_cache_;
}

Matrix<float> SsmvcbmTrainer::representation_cache() const {
  return branch_outputs(model_.phi_z, model_.rep_specs(), ds_);
}

void SsmvcbmTrainer::phase2a(int iteration) {
  if (model_.rep_dim == 0) return;
  const Matrix<float>& c_hat = concept_cache();
  if (!opt_rep_) {
    opt_rep_ = std::make_unique<TreeOptimizer>(
        std::vector<ParamTree<float>*>{&model_.phi_z.psi, &model_.phi_z.xi, &model_.phi_z.zeta, &model_.theta},
        cfg_.lr_z);
  }
  const auto rspecs = model_.rep_specs();
  const auto tspecs = model_.theta_specs();
  const auto aspecs = model_.tau_specs();
  const auto lambda = static_cast<float>(cfg_.lambda);
  run_epochs(ds_.size(), cfg_.epochs_z, cfg_.base.batch_size, rng_.fork("phase2a").fork(iteration), "representation",
             iteration, log_, *opt_rep_, [&](Tape<float>& tape, std::span<const std::size_t> rows) {
               tape.freeze(model_.tau);
               const PackedViews views = model::pack(ds_, rows);
               auto z = model::branch_forward(tape, model_.phi_z, rspecs, tape.constant(views.rows), views.segments);
               const Matrix<float> c_rows = gather_rows(c_hat, rows);
               auto y = num::forward_layers(tape, model_.theta, tspecs, num::concat_cols(tape.constant(c_rows), z));
               auto lt = num::weighted_bce(y, model::label_column(ds_, rows), target_weight_column(weights_, rows));
               auto a = num::forward_layers(tape, model_.tau, aspecs, z);
               auto la = num::weighted_bce(a, c_rows, gather_rows(weights_.concepts, rows));
               return num::axpby(lt, 1.0f, la, -lambda);
             });
}

void SsmvcbmTrainer::phase2b(int iteration) {
  if (model_.rep_dim == 0) return;
  const Matrix<float>& c_hat = concept_cache();
  const Matrix<float> z_hat = representation_cache();
  if (!opt_tau_) opt_tau_ = std::make_unique<TreeOptimizer>(std::vector<ParamTree<float>*>{&model_.tau}, cfg_.lr_a);
  const auto aspecs = model_.tau_specs();
  run_epochs(ds_.size(), cfg_.epochs_a, cfg_.base.batch_size, rng_.fork("phase2b").fork(iteration), "adversary",
             iteration, log_, *opt_tau_, [&](Tape<float>& tape, std::span<const std::size_t> rows) {
               auto a = num::forward_layers(tape, model_.tau, aspecs, tape.constant(gather_rows(z_hat, rows)));
               return num::weighted_bce(a, gather_rows(c_hat, rows), gather_rows(weights_.concepts, rows));
             });
}

void SsmvcbmTrainer::phase3() {
  Rng r = rng_.fork("reinit");
  model_.theta = num::build_mlp<float>(model_.theta_specs(), r);
}

void SsmvcbmTrainer::phase4() {
  const Matrix<float>& c_hat = concept_cache();
  Matrix<float> inputs = c_hat;
  if (model_.rep_dim > 0) {
    const Matrix<float> z_hat = representation_cache();
    inputs.conservativeResize(Eigen::NoChange, c_hat.cols() + z_hat.cols());
    inputs.rightCols(z_hat.cols()) = z_hat;
  }
  fit_head_on_inputs(model_.theta, model_.theta_specs(), inputs, ds_, weights_, cfg_.base.epochs_y, cfg_.base.lr_y,
                     cfg_.base.batch_size, rng_.fork("phase4"), "target", log_);
}

SsmvcbmModel SsmvcbmTrainer::run() {
  if (!concepts_trained_) phase1();
  for (int c = 0; c < cfg_.iterations; ++c) {
    phase2a(c);
    phase2b(c);
  }
  phase3();
  phase4();
  return model_;
}

SsmvcbmModel train_ssmvcbm(const MultiviewDataset& ds, const MvcbmConfig& arch, const SsTrainConfig& cfg,
                           const Rng& rng, const EpochLogger& log) {
  SsmvcbmTrainer trainer(ds, arch, cfg, rng, log);
  return trainer.run();
}

}  // namespace mvcbm::train
