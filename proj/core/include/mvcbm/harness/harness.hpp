#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvcbm/interventions/interventions.hpp"
#include "mvcbm/metrics/metrics.hpp"
#include "mvcbm/synthgen/synthgen.hpp"
#include "mvcbm/training/training.hpp"

namespace mvcbm::harness {

using model::AnyModel;
using model::Family;
using model::FusionMode;

// Everything needed to train one model from the full-concept training data.
struct TrainRequest {
  Family family = Family::kMvcbmSeq;
  model::MvcbmConfig arch;  // concept_count is replaced by the subset size
  std::vector<std::size_t> concept_columns;
  train::TrainConfig config;
  train::SsTrainConfig ss;  // ssmvcbm only; ss.base is ignored in favor of config
  std::uint64_t seed = 0;
  train::EpochLogger log;
};

// Selects concepts and views for the family, trains, and fills the metadata.
// Black boxes keep the bottleneck width of `arch` and ignore concept_columns.
AnyModel train_model(const MultiviewDataset& train, const TrainRequest& req);

// Uniform K_obs-subset of 0..K-1, sorted; a function of (seed, K, K_obs) only.
std::vector<std::size_t> concept_subset(std::uint64_t seed, std::size_t k, std::size_t k_obs);

struct ExperimentSpec {
  // Each seed simulates its own dataset (data.seed is replaced by the run
  // seed) unless data_dir points at a fixed one.
  synth::SyntheticConfig data;
  std::optional<std::filesystem::path> data_dir;
  std::vector<Family> families{Family::kMvcbmSeq};
  FusionMode fusion = FusionMode::kMean;
  std::vector<std::size_t> k_obs{30};
  std::optional<std::int64_t> rep_dim;  // default K - K_obs
  std::vector<double> lambdas{0.01};
  std::vector<std::uint64_t> seeds{0};
  model::MvcbmConfig arch;
  nlohmann::json train_overrides = nlohmann::json::object();  // merged into every family preset
  nlohmann::json ss_overrides = nlohmann::json::object();
  bool intervention_sweep = false;  // per concept model, sizes 0..K_obs
  int intervention_trials = 3;
  std::vector<double> tpr_levels;
  bool save_models = false;
  int workers = 0;  // 0: MVCBM_WORKERS or 1
  std::filesystem::path out_dir;

  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentSpec& s);
void from_json(const nlohmann::json& j, ExperimentSpec& s);
ExperimentSpec load_spec(const std::filesystem::path& path);

// Worker count: spec value, else MVCBM_WORKERS, else 1.
int resolve_workers(int requested);

struct CellResult {
  Family family = Family::kMvcbmSeq;
  FusionMode fusion = FusionMode::kMean;
  std::size_t k_obs = 0;  // 0 for black boxes
  std::optional<double> lambda;
  std::uint64_t seed = 0;
  metrics::EvalReport eval;
  std::optional<metrics::CondCorr> cond_corr;
  std::optional<interv::SweepCurve> sweep;
  std::optional<AnyModel> model;

  // Flat records carrying family, fusion, k_obs, lambda, seed, metric, value.
  std::vector<nlohmann::json> records() const;
};

struct Report {
  std::vector<CellResult> cells;

  // Cells matching family (and k_obs / lambda when given).
  std::vector<const CellResult*> select(Family family, std::optional<std::size_t> k_obs = std::nullopt,
                                        std::optional<double> lambda = std::nullopt) const;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for one value
  std::size_t n = 0;
};
MeanStd mean_std(const std::vector<double>& v);

// Trains every (family, K_obs, seed) cell; black boxes once per seed.
// Writes records.jsonl and summary.csv when spec.out_dir is set.
Report run_concept_sweep(const ExperimentSpec& spec);
// MVCBM-seq plus SSMVCBM per lambda at the first K_obs, sharing one concept
// branch per seed. Writes records.jsonl, ablation.csv and intervention.csv.
Report run_lambda_ablation(const ExperimentSpec& spec);

void write_records(const std::filesystem::path& path, const Report& r);
std::string summary_csv(const Report& r);
std::string ablation_csv(const Report& r);
std::string intervention_csv(const Report& r);

}  // namespace mvcbm::harness
