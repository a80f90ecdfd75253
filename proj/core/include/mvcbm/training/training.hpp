#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvcbm/model/models.hpp"
#include "mvcbm/numerics/adam.hpp"

namespace mvcbm::train {

using model::Branch;
using model::Family;
using model::MvcbmConfig;
using model::MvcbmModel;
using model::SsmvcbmModel;
using num::Matrix;

// Normalized inverse class counts. target sums to 1 over samples, concept
// sums to 1 over all (sample, concept) cells.
struct SampleWeights {
  std::vector<double> target;
  Matrix<double> concepts;  // N x K
};

// Throws InvalidArgument naming the first column (label or concept k) that
// has a single class.
SampleWeights class_weights(const MultiviewDataset& ds);
// Target weights only; concept columns are not inspected.
SampleWeights target_weights(const MultiviewDataset& ds);

enum class TrainMode { kSequential, kJoint };

struct TrainConfig {
  int epochs_c = 100;
  int epochs_y = 50;
  double lr_c = 1e-3;
  double lr_y = 1e-3;
  int batch_size = 64;
  double alpha = 1.0;
  TrainMode mode = TrainMode::kSequential;

  void validate() const;
};

struct SsTrainConfig {
  TrainConfig base;
  int iterations = 7;
  int epochs_z = 30;
  int epochs_a = 30;
  double lr_z = 1e-3;
  double lr_a = 1e-3;
  double lambda = 0.01;
  std::int64_t rep_dim = 25;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const SsTrainConfig& c);
void from_json(const nlohmann::json& j, SsTrainConfig& c);

// Synthetic-benchmark hyperparameters for each family.
TrainConfig preset(Family family);
SsTrainConfig ss_preset();

// One record per epoch.
struct EpochRecord {
  std::string phase;
  int iteration = -1;  // adversarial iteration, -1 outside the loop
  int epoch = 0;
  double mean_loss = 0.0;
  std::int64_t steps = 0;
};

void to_json(nlohmann::json& j, const EpochRecord& r);

using EpochLogger = std::function<void(const EpochRecord&)>;

// Appends records as JSON lines.
class JsonlLogger {
 public:
  explicit JsonlLogger(const std::filesystem::path& path);
  void operator()(const EpochRecord& r);
  EpochLogger sink();

 private:
  std::ofstream out_;
};

// Adam over a fixed set of parameter trees. Applies the gradients recorded
// on a tape after backward() and commits staged batch-norm statistics.
class TreeOptimizer {
 public:
  TreeOptimizer(std::vector<num::ParamTree<float>*> trees, double lr);
  void step(const num::Tape<float>& tape);

 private:
  std::vector<num::ParamTree<float>*> trees_;
  std::vector<num::AdamState<float>> states_;
  num::AdamOptions opts_;
};

// The dataset passed to every trainer is the training data itself; callers
// select the split, concept subset, and views beforehand.

// Phase 1 alone: concept model {psi, xi, zeta} on the concept loss.
MvcbmModel train_concepts(const MultiviewDataset& ds, const MvcbmConfig& arch, const TrainConfig& cfg,
                          const Rng& rng, const EpochLogger& log = {});
// Phase 1 followed by the target head on frozen concept predictions.
MvcbmModel train_sequential(const MultiviewDataset& ds, const MvcbmConfig& arch, const TrainConfig& cfg,
                            const Rng& rng, const EpochLogger& log = {});
// Continues a phase-1 model with the target phase only.
void train_target_head(MvcbmModel& m, const MultiviewDataset& ds, const TrainConfig& cfg, const Rng& rng,
                       const EpochLogger& log = {});
// Joint objective on one batch: target term plus alpha times the concept term.
num::Var<float> joint_loss(num::Tape<float>& tape, const MvcbmModel& m, const MultiviewDataset& ds,
                           const SampleWeights& w, std::span<const std::size_t> rows, double alpha);
MvcbmModel train_joint(const MultiviewDataset& ds, const MvcbmConfig& arch, const TrainConfig& cfg, const Rng& rng,
                       const EpochLogger& log = {});

enum class BlackBoxKind { kSingleViewMlp, kMvbm };

// Same network as the MVCBM trained on the target loss only; the single-view
// MLP sees the first view of every sample.
MvcbmModel train_blackbox(const MultiviewDataset& ds, const MvcbmConfig& arch, const TrainConfig& cfg,
                          const Rng& rng, BlackBoxKind kind, const EpochLogger& log = {});

// Loss of a black-box batch split into its terms; the concept term is
// always zero and exists so callers can assert on it.
struct LossTerms {
  double target = 0.0;
  double concepts = 0.0;
};
LossTerms blackbox_loss_terms(const MvcbmModel& m, const MultiviewDataset& ds, std::span<const std::size_t> rows);

// Semi-supervised training, one method per phase so that phases can be
// inspected in isolation. run() executes all of them in order.
class SsmvcbmTrainer {
 public:
  SsmvcbmTrainer(const MultiviewDataset& ds, const MvcbmConfig& arch, const SsTrainConfig& cfg, const Rng& rng,
                 EpochLogger log = {});
  SsmvcbmTrainer(const SsmvcbmTrainer&) = delete;
  SsmvcbmTrainer& operator=(const SsmvcbmTrainer&) = delete;

  // Concept branch, identical to train_concepts with the same rng.
  void phase1();
  // Skips phase 1 by adopting an already trained concept branch.
  void adopt_concept_branch(const Branch<float>& phi_c);
  // Representation branch and target head against a frozen adversary.
  void phase2a(int iteration);
  // Adversary against frozen representation.
  void phase2b(int iteration);
  // Fresh target head.
  void phase3();
  // Target head on [c_hat, z_hat] with both branches frozen.
  void phase4();

  SsmvcbmModel run();

  const SsmvcbmModel& model() const { return model_; }
  SsmvcbmModel& model() { return model_; }

 private:
  const Matrix<float>& concept_cache();
  Matrix<float> representation_cache() const;

  const MultiviewDataset& ds_;
  SsTrainConfig cfg_;
  Rng rng_;
  EpochLogger log_;
  SampleWeights weights_;
  SsmvcbmModel model_;
  std::optional<Matrix<float>> c_cache_;
  bool concepts_trained_ = false;
  // Optimizer state persists across adversarial iterations.
  std::unique_ptr<TreeOptimizer> opt_rep_;
  std::unique_ptr<TreeOptimizer> opt_tau_;
};

SsmvcbmModel train_ssmvcbm(const MultiviewDataset& ds, const MvcbmConfig& arch, const SsTrainConfig& cfg,
                           const Rng& rng, const EpochLogger& log = {});

}  // namespace mvcbm::train
