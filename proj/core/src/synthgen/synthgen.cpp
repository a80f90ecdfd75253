#include "mvcbm/synthgen/synthgen.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <fstream>
#include <iterator>
#include <random>
#include <string>

#include "mvcbm/error.hpp"
#include "mvcbm/numerics/checkpoint.hpp"

namespace mvcbm::synth {

namespace {

constexpr int kFormatVersion = 1;

template <typename U>
void write_raw(const std::filesystem::path& path, std::span<const U> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

template <typename U>
std::vector<U> read_raw(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path.string() + "'");
  std::vector<U> out(count);
  in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(U)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(U) || in.peek() != std::ifstream::traits_type::eof()) {
    throw FormatError("'" + path.string() + "' has the wrong size");
  }
  return out;
}

}  // namespace

void SyntheticConfig::validate() const {
  if (p < 1 || views < 1 || concepts < 1) throw InvalidArgument("p, V, and K must be at least 1");
  if (n <= test_size) throw InvalidArgument("N must exceed the test size");
  if (g_hidden < 1 || f_hidden < 1) throw InvalidArgument("ground-truth hidden widths must be positive");
}

void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = {{"n", c.n},         {"p", c.p},         {"views", c.views},       {"concepts", c.concepts},
       {"test_size", c.test_size}, {"seed", c.seed}, {"g_hidden", c.g_hidden}, {"f_hidden", c.f_hidden}};
}

void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  const SyntheticConfig d;
  c.n = j.value("n", d.n);
  c.p = j.value("p", d.p);
  c.views = j.value("views", d.views);
  c.concepts = j.value("concepts", d.concepts);
  c.test_size = j.value("test_size", d.test_size);
  c.seed = j.value("seed", d.seed);
  c.g_hidden = j.value("g_hidden", d.g_hidden);
  c.f_hidden = j.value("f_hidden", d.f_hidden);
}

double median(std::vector<double> values) {
  if (values.empty()) throw InvalidArgument("median of an empty set");
  const std::size_t n = values.size();
  const auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(values.begin(), mid, values.end());
  const double upper = *mid;
  if (n % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), mid);
  return 0.5 * (lower + upper);
}

std::vector<num::LayerSpec> g_architecture(const SyntheticConfig& c) {
  const auto in = static_cast<std::int64_t>(c.dim());
  const auto h = static_cast<std::int64_t>(c.g_hidden);
  const auto k = static_cast<std::int64_t>(c.concepts);
  return {num::LayerSpec::linear(in, h), num::LayerSpec::relu(h), num::LayerSpec::linear(h, k)};
}

std::vector<num::LayerSpec> f_architecture(const SyntheticConfig& c) {
  const auto k = static_cast<std::int64_t>(c.concepts);
  const auto h = static_cast<std::int64_t>(c.f_hidden);
  return {num::LayerSpec::linear(k, h), num::LayerSpec::relu(h), num::LayerSpec::linear(h, 1)};
}

PopulationParams gen_population(const SyntheticConfig& config, Rng& rng) {
  const auto d = static_cast<Eigen::Index>(config.dim());
  PopulationParams pop;
  std::uniform_real_distribution<double> unif(-5.0, 5.0);
  pop.mu.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) pop.mu(j) = unif(rng.engine());

  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd a(d, d);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = normal(rng.engine());
  pop.sigma = Eigen::MatrixXd::Identity(d, d);
  pop.sigma.selfadjointView<Eigen::Lower>().rankUpdate(a, 1.0 / static_cast<double>(d));
  pop.sigma.triangularView<Eigen::StrictlyUpper>() = pop.sigma.transpose();

  Eigen::LLT<Eigen::MatrixXd> llt(pop.sigma);
  if (llt.info() != Eigen::Success) throw Error("Cholesky factorization of the covariance failed");
  pop.cholesky_factor = llt.matrixL();
  return pop;
}

ConceptAssignment make_concepts(const num::Matrix<double>& x, const num::ParamTree<double>& g_params,
                                std::span<const num::LayerSpec> g_specs) {
  const num::Matrix<double> g = num::apply_layers(g_params, g_specs, x);
  const auto n = static_cast<std::size_t>(g.rows());
  const auto k = static_cast<std::size_t>(g.cols());
  ConceptAssignment out;
  out.medians.resize(g.cols());
  out.concepts.assign(n * k, 0);
  std::vector<double> column(n);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < n; ++i) column[i] = g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
    const double m = median(column);
    out.medians(static_cast<Eigen::Index>(c)) = m;
    for (std::size_t i = 0; i < n; ++i) out.concepts[i * k + c] = column[i] >= m ? 1 : 0;
  }
  return out;
}

LabelAssignment make_labels(std::span<const std::uint8_t> concepts, std::size_t concept_count,
                            const num::ParamTree<double>& f_params, std::span<const num::LayerSpec> f_specs) {
  if (concept_count == 0 || concepts.size() % concept_count != 0) throw ShapeError("concept matrix shape");
  const std::size_t n = concepts.size() / concept_count;
  num::Matrix<double> c(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(concept_count));
  for (std::size_t i = 0; i < concepts.size(); ++i) c.data()[i] = concepts[i];
  const num::Matrix<double> f = num::apply_layers(f_params, f_specs, c);
  std::vector<double> values(f.data(), f.data() + f.size());
  LabelAssignment out;
  out.median = median(values);
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.labels[i] = values[i] >= out.median ? 1 : 0;
  return out;
}

SyntheticBenchmark generate_dataset(const SyntheticConfig& config) {
  config.validate();
  Rng rng(config.seed);
  SyntheticBenchmark bench;
  bench.population = gen_population(config, rng);

  const auto n = static_cast<Eigen::Index>(config.n);
  const auto d = static_cast<Eigen::Index>(config.dim());
  std::normal_distribution<double> normal(0.0, 1.0);
  num::Matrix<double> z(n, d);
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = normal(rng.engine());
  num::Matrix<double> x(n, d);
  x.noalias() = z * bench.population.cholesky_factor.triangularView<Eigen::Lower>().transpose();
  x.rowwise() += bench.population.mu.transpose();
  // Features are stored as f32; concepts are defined on the stored values.
  x = x.cast<float>().cast<double>();

  auto& truth = bench.truth;
  truth.g_specs = g_architecture(config);
  truth.f_specs = f_architecture(config);
  truth.g_params = num::build_mlp<double>(truth.g_specs, rng);
  truth.f_params = num::build_mlp<double>(truth.f_specs, rng);

  const auto concepts = make_concepts(x, truth.g_params, truth.g_specs);
  truth.concept_medians = concepts.medians;
  const auto labels = make_labels(concepts.concepts, config.concepts, truth.f_params, truth.f_specs);
  truth.label_median = labels.median;

  bench.dataset = MultiviewDataset(config.views, config.p, config.concepts);
  std::vector<float> row(static_cast<std::size_t>(d));
  const std::size_t first_test = config.n - config.test_size;
  for (std::size_t i = 0; i < config.n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) row[static_cast<std::size_t>(j)] = static_cast<float>(x(static_cast<Eigen::Index>(i), j));
    bench.dataset.add_sample(row, static_cast<int>(config.views),
                             std::span<const std::uint8_t>(concepts.concepts).subspan(i * config.concepts, config.concepts),
                             labels.labels[i], i >= first_test ? Split::kTest : Split::kTrain);
  }
  return bench;
}

void save_dataset(const std::filesystem::path& dir, const MultiviewDataset& dataset, const SyntheticConfig* config,
                  const GroundTruthMaps* truth) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "mvcbm-dataset";
  manifest["format_version"] = kFormatVersion;
  manifest["size"] = dataset.size();
  manifest["max_views"] = dataset.max_views();
  manifest["view_dim"] = dataset.view_dim();
  manifest["concepts"] = dataset.concept_count();
  manifest["arrays"] = {
      {"features", {{"file", "features.f32"}, {"dtype", "f32"}, {"shape", {dataset.size(), dataset.max_views(), dataset.view_dim()}}}},
      {"view_counts", {{"file", "view_counts.u8"}, {"dtype", "u8"}, {"shape", {dataset.size()}}}},
      {"concepts", {{"file", "concepts.u8"}, {"dtype", "u8"}, {"shape", {dataset.size(), dataset.concept_count()}}}},
      {"labels", {{"file", "labels.u8"}, {"dtype", "u8"}, {"shape", {dataset.size()}}}},
      {"splits", {{"file", "splits.u8"}, {"dtype", "u8"}, {"shape", {dataset.size()}}, {"values", {"train", "test"}}}},
  };
  if (config != nullptr) {
    manifest["generator"] = *config;
    manifest["sigma_construction"] = kSigmaConstruction;
  }

  // Little-endian hosts only for the f32 buffer; u8 arrays are order-free.
  static_assert(std::endian::native == std::endian::little, "dataset writer assumes a little-endian host");
  write_raw<float>(dir / "features.f32", dataset.raw_features());
  std::vector<std::uint8_t> counts(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset.view_count(i) > 255) throw InvalidArgument("view counts above 255 are not representable");
    counts[i] = static_cast<std::uint8_t>(dataset.view_count(i));
  }
  write_raw<std::uint8_t>(dir / "view_counts.u8", counts);
  write_raw<std::uint8_t>(dir / "concepts.u8", dataset.raw_concepts());
  write_raw<std::uint8_t>(dir / "labels.u8", dataset.raw_labels());
  std::vector<std::uint8_t> splits(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) splits[i] = static_cast<std::uint8_t>(dataset.split(i));
  write_raw<std::uint8_t>(dir / "splits.u8", splits);

  if (truth != nullptr) {
    num::Checkpoint ck;
    ck.metadata["kind"] = "ground_truth_maps";
    ck.metadata["label_median"] = truth->label_median;
    ck.put("g", truth->g_params);
    ck.put("f", truth->f_params);
    num::ParamTree<double> medians;
    medians.add("concept_medians", {truth->concept_medians.size()}).value =
        truth->concept_medians.transpose();
    ck.put("medians", medians);
    ck.save(dir / "ground_truth.ckpt");
    manifest["ground_truth"] = "ground_truth.ckpt";
  }

  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw Error("cannot write dataset manifest in '" + dir.string() + "'");
  out << manifest.dump(2) << '\n';
}

nlohmann::json load_dataset_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw FormatError("no manifest.json in '" + dir.string() + "'");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("dataset manifest is not valid JSON: ") + ex.what());
  }
  if (manifest.value("format", "") != "mvcbm-dataset" || manifest.value("format_version", 0) != kFormatVersion) {
    throw FormatError("'" + dir.string() + "' is not a supported dataset directory");
  }
  return manifest;
}

MultiviewDataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = load_dataset_manifest(dir);
  const auto n = manifest.at("size").get<std::size_t>();
  const auto v = manifest.at("max_views").get<std::size_t>();
  const auto p = manifest.at("view_dim").get<std::size_t>();
  const auto k = manifest.at("concepts").get<std::size_t>();
  const auto features = read_raw<float>(dir / "features.f32", n * v * p);
  const auto counts = read_raw<std::uint8_t>(dir / "view_counts.u8", n);
  const auto concepts = read_raw<std::uint8_t>(dir / "concepts.u8", n * k);
  const auto labels = read_raw<std::uint8_t>(dir / "labels.u8", n);
  const auto splits = read_raw<std::uint8_t>(dir / "splits.u8", n);

  MultiviewDataset ds(v, p, k);
  for (std::size_t i = 0; i < n; ++i) {
    if (splits[i] > 1) throw FormatError("invalid split tag in '" + dir.string() + "'");
    const std::span<const float> views(features.data() + i * v * p, counts[i] * p);
    ds.add_sample(views, counts[i], std::span<const std::uint8_t>(concepts).subspan(i * k, k), labels[i],
                  static_cast<Split>(splits[i]));
  }
  return ds;
}

GroundTruthMaps load_ground_truth(const std::filesystem::path& dir) {
  const auto manifest = load_dataset_manifest(dir);
  if (!manifest.contains("generator") || !manifest.contains("ground_truth")) {
    throw FormatError("dataset in '" + dir.string() + "' carries no ground-truth maps");
  }
  const auto config = manifest.at("generator").get<SyntheticConfig>();
  const auto ck = num::Checkpoint::load(dir / manifest.at("ground_truth").get<std::string>());
  GroundTruthMaps truth;
  truth.g_specs = g_architecture(config);
  truth.f_specs = f_architecture(config);
  truth.g_params = ck.get<double>("g");
  truth.f_params = ck.get<double>("f");
  truth.concept_medians = ck.get<double>("medians").at("concept_medians").value.row(0).transpose();
  truth.label_median = ck.metadata.at("label_median").get<double>();
  return truth;
}

}  // namespace mvcbm::synth
