#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvcbm/numerics/layers.hpp"
#include "mvcbm/numerics/param_tree.hpp"
#include "mvcbm/rng.hpp"
#include "mvcbm/synthgen/dataset.hpp"

namespace mvcbm::synth {

struct SyntheticConfig {
  std::size_t n = 8000;
  std::size_t p = 500;
  std::size_t views = 3;
  std::size_t concepts = 30;
  std::size_t test_size = 2000;
  std::uint64_t seed = 0;
  // Hidden widths of the ground-truth maps g: R^{pV} -> R^K and f: R^K -> R.
  std::size_t g_hidden = 100;
  std::size_t f_hidden = 50;

  void validate() const;
  std::size_t dim() const { return p * views; }
};

void to_json(nlohmann::json& j, const SyntheticConfig& c);
void from_json(const nlohmann::json& j, SyntheticConfig& c);

struct PopulationParams {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  Eigen::MatrixXd cholesky_factor;  // lower triangular, L L^T = sigma
};

struct GroundTruthMaps {
  std::vector<num::LayerSpec> g_specs;
  std::vector<num::LayerSpec> f_specs;
  num::ParamTree<double> g_params;
  num::ParamTree<double> f_params;
  Eigen::VectorXd concept_medians;
  double label_median = 0.0;
};

struct ConceptAssignment {
  std::vector<std::uint8_t> concepts;  // N x K, row-major
  Eigen::VectorXd medians;
};

struct LabelAssignment {
  std::vector<std::uint8_t> labels;
  double median = 0.0;
};

struct SyntheticBenchmark {
  MultiviewDataset dataset;
  GroundTruthMaps truth;
  PopulationParams population;
};

// Tag recorded in the dataset manifest for the covariance construction.
inline constexpr const char* kSigmaConstruction = "AAt_over_dim_plus_identity";

// Median with the mean of the two central order statistics for even sizes.
double median(std::vector<double> values);

std::vector<num::LayerSpec> g_architecture(const SyntheticConfig& config);
std::vector<num::LayerSpec> f_architecture(const SyntheticConfig& config);

// mu_j ~ Uniform(-5, 5); Sigma = A A^T / (pV) + I with A iid standard normal.
PopulationParams gen_population(const SyntheticConfig& config, Rng& rng);

// c_ik = 1{[g(X_i)]_k >= m_k}, m_k the median of column k of g(X).
ConceptAssignment make_concepts(const num::Matrix<double>& x, const num::ParamTree<double>& g_params,
                                std::span<const num::LayerSpec> g_specs);

// y_i = 1{f(c_i) >= m_y}, m_y the median of f over all rows of C.
LabelAssignment make_labels(std::span<const std::uint8_t> concepts, std::size_t concept_count,
                            const num::ParamTree<double>& f_params, std::span<const num::LayerSpec> f_specs);

// Draws the whole benchmark from a single generator seeded with config.seed.
// The last test_size samples form the test split.
SyntheticBenchmark generate_dataset(const SyntheticConfig& config);

// Dataset directory: manifest.json, features.f32, view_counts.u8,
// concepts.u8, labels.u8, splits.u8, and (for generated data)
// ground_truth.ckpt.
void save_dataset(const std::filesystem::path& dir, const MultiviewDataset& dataset,
                  const SyntheticConfig* config = nullptr, const GroundTruthMaps* truth = nullptr);
MultiviewDataset load_dataset(const std::filesystem::path& dir);
GroundTruthMaps load_ground_truth(const std::filesystem::path& dir);
nlohmann::json load_dataset_manifest(const std::filesystem::path& dir);

}  // namespace mvcbm::synth
