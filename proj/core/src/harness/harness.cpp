#include "mvcbm/harness/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "mvcbm/error.hpp"
#include "mvcbm/model/model_io.hpp"

namespace mvcbm::harness {

namespace {

using model::MvcbmModel;
using train::SsTrainConfig;
using train::TrainConfig;

template <typename C>
C merged(const C& base, const nlohmann::json& overrides) {
  nlohmann::json j = base;
  j.merge_patch(overrides);
  return j.get<C>();
}

TrainConfig family_config(const ExperimentSpec& s, Family f) { return merged(train::preset(f), s.train_overrides); }

SsTrainConfig ss_config(const ExperimentSpec& s) {
  SsTrainConfig c = merged(train::ss_preset(), s.ss_overrides);
  c.base = family_config(s, Family::kSsmvcbm);
  return c;
}

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream out;
  out << std::fixed << std::setprecision(6) << v;
  return out.str();
}

std::string lambda_text(const std::optional<double>& l) {
  if (!l) return "";
  std::ostringstream out;
  out << *l;
  return out.str();
}

struct SeedData {
  MultiviewDataset train;
  MultiviewDataset test;
};

SeedData load_data(const ExperimentSpec& spec, std::uint64_t seed) {
  MultiviewDataset all;
  if (spec.data_dir) {
    all = synth::load_dataset(*spec.data_dir);
  } else {
    synth::SyntheticConfig c = spec.data;
    c.seed = seed;
    all = synth::generate_dataset(c).dataset;
  }
  return {all.only(Split::kTrain), all.only(Split::kTest)};
}

// Runs task(i) for i in [0, n) on up to `workers` threads.
template <typename F>
void parallel_for(std::size_t n, int workers, F&& task) {
  const auto w = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(workers, 1)));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < w; ++t) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          task(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : threads) th.join();
  if (error) std::rethrow_exception(error);
}

std::string cell_name(const CellResult& c) {
  std::string name = std::string(model::to_string(c.family)) + "-" + std::string(model::to_string(c.fusion)) + "-k" +
                     std::to_string(c.k_obs) + "-s" + std::to_string(c.seed);
  if (c.lambda) name += "-l" + lambda_text(c.lambda);
  return name;
}

std::vector<std::size_t> sweep_sizes(std::size_t k) {
  std::vector<std::size_t> s(k + 1);
  std::iota(s.begin(), s.end(), std::size_t{0});
  return s;
}

CellResult evaluate_cell(const ExperimentSpec& spec, AnyModel m, const MultiviewDataset& test, std::size_t k_obs,
                         std::optional<double> lambda, std::uint64_t seed) {
  CellResult c;
  c.family = model::meta_of(m).family;
  c.fusion = model::config_of(m).fusion;
  c.k_obs = k_obs;
  c.lambda = lambda;
  c.seed = seed;
  try {
    c.eval = metrics::evaluate(m, test, spec.tpr_levels);
    if (c.family == Family::kSsmvcbm && model::rep_dim_of(m) > 0) {
      const auto view = model::eval_view(m, test);
      const auto out = model::predict(m, view, model::all_rows(view));
      c.cond_corr = metrics::median_abs_cond_corr(out.c_hat.cast<double>(), out.z_hat.cast<double>(),
                                                  view.label_vector());
    }
    if (spec.intervention_sweep && model::has_concepts(c.family)) {
      Rng rng = Rng(seed).fork("sweep").fork(k_obs);
      const auto sizes = sweep_sizes(k_obs);
      c.sweep = interv::intervention_sweep(m, test, sizes, spec.intervention_trials, rng);
    }
  } catch (const Error& e) {
    throw Error("evaluating " + cell_name(c) + ": " + e.what());
  }
  if (spec.save_models && !spec.out_dir.empty()) {
    std::filesystem::create_directories(spec.out_dir / "models");
    model::save_model(spec.out_dir / "models" / (cell_name(c) + ".ckpt"), m);
  }
  c.model = std::move(m);
  return c;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

double concept_auroc(const CellResult& c) { return c.eval.mean_concept_auroc(); }

template <typename Key>
std::vector<Key> ordered_keys(const Report& r, Key (*key)(const CellResult&)) {
  std::vector<Key> keys;
  for (const auto& c : r.cells) {
    const Key k = key(c);
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  }
  return keys;
}

using GroupKey = std::tuple<Family, std::size_t, std::optional<double>>;
GroupKey group_key(const CellResult& c) { return {c.family, c.k_obs, c.lambda}; }

std::vector<const CellResult*> group(const Report& r, const GroupKey& k) {
  std::vector<const CellResult*> out;
  for (const auto& c : r.cells) {
    if (group_key(c) == k) out.push_back(&c);
  }
  return out;
}

std::vector<double> collect(const std::vector<const CellResult*>& cells, double (*f)(const CellResult&)) {
  std::vector<double> v;
  for (const auto* c : cells) v.push_back(f(*c));
  return v;
}

}  // namespace

std::vector<std::size_t> concept_subset(std::uint64_t seed, std::size_t k, std::size_t k_obs) {
  if (k_obs > k) throw InvalidArgument("K_obs exceeds the number of concepts");
  std::vector<std::size_t> cols(k);
  std::iota(cols.begin(), cols.end(), std::size_t{0});
  Rng rng = Rng(seed).fork("concept-subset").fork(static_cast<std::uint64_t>(k_obs));
  std::shuffle(cols.begin(), cols.end(), rng.engine());
  cols.resize(k_obs);
  std::sort(cols.begin(), cols.end());
  return cols;
}

AnyModel train_model(const MultiviewDataset& train, const TrainRequest& req) {
  const Rng rng(req.seed);
  model::MvcbmConfig arch = req.arch;
  arch.view_dim = static_cast<std::int64_t>(train.view_dim());
  if (!model::has_concepts(req.family)) {
    const auto kind = req.family == Family::kMlp ? train::BlackBoxKind::kSingleViewMlp : train::BlackBoxKind::kMvbm;
    return train::train_blackbox(train, arch, req.config, rng, kind, req.log);
  }
  std::vector<std::size_t> cols = req.concept_columns;
  if (cols.empty()) {
    cols.resize(train.concept_count());
    std::iota(cols.begin(), cols.end(), std::size_t{0});
  }
  MultiviewDataset data = train.select_concepts(cols);
  if (model::is_single_view(req.family)) data = data.truncate_views(1);
  arch.concept_count = static_cast<std::int64_t>(cols.size());
  AnyModel out;
  switch (req.family) {
    case Family::kCbmSeq:
    case Family::kMvcbmSeq:
      out = train::train_sequential(data, arch, req.config, rng, req.log);
      break;
    case Family::kCbmJoint:
    case Family::kMvcbmJoint:
      out = train::train_joint(data, arch, req.config, rng, req.log);
      break;
    case Family::kSsmvcbm: {
      SsTrainConfig ss = req.ss;
      ss.base = req.config;
      out = train::train_ssmvcbm(data, arch, ss, rng, req.log);
      break;
    }
    default:
      throw InvalidArgument("unsupported family");
  }
  std::visit(
      [&](auto& m) {
        m.meta.family = req.family;
        m.meta.concept_columns = cols;
      },
      out);
  return out;
}

void ExperimentSpec::validate() const {
  if (!data_dir) data.validate();
  if (families.empty()) throw InvalidArgument("no model families given");
  if (seeds.empty()) throw InvalidArgument("no seeds given");
  if (lambdas.empty()) throw InvalidArgument("no lambda values given");
  for (double l : lambdas) {
    if (!(l >= 0.0)) throw InvalidArgument("lambda must be non-negative");
  }
  if (intervention_trials < 1) throw InvalidArgument("need at least one intervention trial");
  if (rep_dim && *rep_dim < 0) throw InvalidArgument("representation size must be non-negative");
  const bool concepts = std::any_of(families.begin(), families.end(), model::has_concepts);
  if (concepts && k_obs.empty()) throw InvalidArgument("no observed-concept counts given");
  const std::size_t k = data_dir ? std::numeric_limits<std::size_t>::max() : data.concepts;
  for (auto n : k_obs) {
    if (n < 1 || n > k) throw InvalidArgument("K_obs " + std::to_string(n) + " outside 1..K");
  }
  arch.validate();
}

void to_json(nlohmann::json& j, const ExperimentSpec& s) {
  std::vector<std::string> families;
  for (auto f : s.families) families.emplace_back(model::to_string(f));
  j = {{"data", s.data},
       {"families", families},
       {"fusion", model::to_string(s.fusion)},
       {"k_obs", s.k_obs},
       {"lambdas", s.lambdas},
       {"seeds", s.seeds},
       {"arch", s.arch},
       {"train", s.train_overrides},
       {"ss", s.ss_overrides},
       {"intervention_sweep", s.intervention_sweep},
       {"intervention_trials", s.intervention_trials},
       {"tpr_levels", s.tpr_levels},
       {"save_models", s.save_models},
       {"workers", s.workers},
       {"out_dir", s.out_dir.string()}};
  if (s.data_dir) j["data_dir"] = s.data_dir->string();
  if (s.rep_dim) j["rep_dim"] = *s.rep_dim;
}

void from_json(const nlohmann::json& j, ExperimentSpec& s) {
  static const std::set<std::string> known{"data",      "data_dir",   "families",   "fusion",
                                           "k_obs",     "rep_dim",    "lambdas",    "seeds",
                                           "arch",      "train",      "ss",         "intervention_sweep",
                                           "intervention_trials",     "tpr_levels", "save_models",
                                           "workers",   "out_dir"};
  if (!j.is_object()) throw FormatError("experiment spec must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw FormatError("unknown experiment key '" + key + "'");
  }
  const ExperimentSpec d;
  s = d;
  if (j.contains("data")) s.data = j.at("data").get<synth::SyntheticConfig>();
  if (j.contains("data_dir")) s.data_dir = j.at("data_dir").get<std::string>();
  if (j.contains("families")) {
    s.families.clear();
    for (const auto& f : j.at("families")) s.families.push_back(model::family_from_string(f.get<std::string>()));
  }
  if (j.contains("fusion")) s.fusion = model::fusion_from_string(j.at("fusion").get<std::string>());
  s.k_obs = j.value("k_obs", d.k_obs);
  if (j.contains("rep_dim") && !j.at("rep_dim").is_null()) s.rep_dim = j.at("rep_dim").get<std::int64_t>();
  s.lambdas = j.value("lambdas", d.lambdas);
  s.seeds = j.value("seeds", d.seeds);
  if (j.contains("arch")) s.arch = j.at("arch").get<model::MvcbmConfig>();
  s.train_overrides = j.value("train", d.train_overrides);
  s.ss_overrides = j.value("ss", d.ss_overrides);
  s.intervention_sweep = j.value("intervention_sweep", d.intervention_sweep);
  s.intervention_trials = j.value("intervention_trials", d.intervention_trials);
  s.tpr_levels = j.value("tpr_levels", d.tpr_levels);
  s.save_models = j.value("save_models", d.save_models);
  s.workers = j.value("workers", d.workers);
  s.out_dir = j.value("out_dir", std::string());
}

ExperimentSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in).get<ExperimentSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

int resolve_workers(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("MVCBM_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<int>(v);
    throw InvalidArgument(std::string("MVCBM_WORKERS must be a positive integer, got '") + env + "'");
  }
  return 1;
}

std::vector<nlohmann::json> CellResult::records() const {
  auto stamp = [&](nlohmann::json r) {
    r["family"] = model::to_string(family);
    r["fusion"] = model::to_string(fusion);
    r["k_obs"] = k_obs;
    r["lambda"] = lambda ? nlohmann::json(*lambda) : nlohmann::json(nullptr);
    r["seed"] = seed;
    return r;
  };
  std::vector<nlohmann::json> out;
  for (auto& r : eval.records()) out.push_back(stamp(std::move(r)));
  if (cond_corr) {
    out.push_back(stamp({{"variable", "concepts_vs_representation"},
                         {"metric", "median_abs_cond_corr"},
                         {"value", cond_corr->median},
                         {"pairs", cond_corr->pairs},
                         {"excluded", cond_corr->excluded}}));
  }
  if (sweep) {
    for (const auto& p : sweep->points) {
      for (std::size_t t = 0; t < p.auroc.size(); ++t) {
        out.push_back(stamp({{"variable", "target"},
                             {"metric", "intervened_auroc"},
                             {"size", p.size},
                             {"trial", t},
                             {"value", p.auroc[t]}}));
        out.push_back(stamp({{"variable", "target"},
                             {"metric", "intervened_aupr"},
                             {"size", p.size},
                             {"trial", t},
                             {"value", p.aupr[t]}}));
      }
    }
  }
  return out;
}

std::vector<const CellResult*> Report::select(Family family, std::optional<std::size_t> k_obs,
                                              std::optional<double> lambda) const {
  std::vector<const CellResult*> out;
  for (const auto& c : cells) {
    if (c.family != family) continue;
    if (k_obs && c.k_obs != *k_obs) continue;
    if (lambda && c.lambda != lambda) continue;
    out.push_back(&c);
  }
  return out;
}

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  m.n = v.size();
  if (v.empty()) {
    m.mean = m.std = std::nan("");
    return m;
  }
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return m;
}

Report run_concept_sweep(const ExperimentSpec& spec) {
  spec.validate();
  std::vector<std::vector<CellResult>> per_seed(spec.seeds.size());
  parallel_for(spec.seeds.size(), resolve_workers(spec.workers), [&](std::size_t s) {
    const std::uint64_t seed = spec.seeds[s];
    const SeedData data = load_data(spec, seed);
    const std::size_t k = data.train.concept_count();
    auto& cells = per_seed[s];
    for (Family f : spec.families) {
      TrainRequest req;
      req.family = f;
      req.arch = spec.arch;
      req.arch.fusion = spec.fusion;
      req.config = family_config(spec, f);
      req.ss = ss_config(spec);
      req.seed = seed;
      if (!model::has_concepts(f)) {
        req.arch.concept_count = static_cast<std::int64_t>(k);
        cells.push_back(evaluate_cell(spec, train_model(data.train, req), data.test, 0, std::nullopt, seed));
        continue;
      }
      for (std::size_t k_obs : spec.k_obs) {
        if (k_obs > k) throw InvalidArgument("K_obs " + std::to_string(k_obs) + " exceeds the dataset's K");
        req.concept_columns = concept_subset(seed, k, k_obs);
        std::optional<double> lambda;
        if (f == Family::kSsmvcbm) {
          lambda = spec.lambdas.front();
          req.ss.lambda = *lambda;
          req.ss.rep_dim = spec.rep_dim.value_or(static_cast<std::int64_t>(k - k_obs));
        }
        cells.push_back(evaluate_cell(spec, train_model(data.train, req), data.test, k_obs, lambda, seed));
      }
    }
  });
  Report r;
  for (auto& cells : per_seed) {
    for (auto& c : cells) r.cells.push_back(std::move(c));
  }
  if (!spec.out_dir.empty()) {
    std::filesystem::create_directories(spec.out_dir);
    write_records(spec.out_dir / "records.jsonl", r);
    write_text(spec.out_dir / "summary.csv", summary_csv(r));
  }
  return r;
}

Report run_lambda_ablation(const ExperimentSpec& spec) {
  spec.validate();
  if (spec.k_obs.empty()) throw InvalidArgument("no observed-concept count given");
  std::vector<std::vector<CellResult>> per_seed(spec.seeds.size());
  parallel_for(spec.seeds.size(), resolve_workers(spec.workers), [&](std::size_t s) {
    const std::uint64_t seed = spec.seeds[s];
    const SeedData data = load_data(spec, seed);
    const std::size_t k = data.train.concept_count();
    const std::size_t k_obs = spec.k_obs.front();
    if (k_obs > k) throw InvalidArgument("K_obs " + std::to_string(k_obs) + " exceeds the dataset's K");
    const auto cols = concept_subset(seed, k, k_obs);
    const MultiviewDataset sub = data.train.select_concepts(cols);
    model::MvcbmConfig arch = spec.arch;
    arch.fusion = spec.fusion;
    arch.view_dim = static_cast<std::int64_t>(sub.view_dim());
    arch.concept_count = static_cast<std::int64_t>(k_obs);
    const Rng rng(seed);

    const TrainConfig seq = family_config(spec, Family::kMvcbmSeq);
    MvcbmModel m = train::train_concepts(sub, arch, seq, rng);
    const model::Branch<float> phi = m.phi;
    train::train_target_head(m, sub, seq, rng);
    m.meta.family = Family::kMvcbmSeq;
    m.meta.concept_columns = cols;
    m.meta.train_config = seq;
    auto& cells = per_seed[s];
    cells.push_back(evaluate_cell(spec, m, data.test, k_obs, std::nullopt, seed));

    for (double lambda : spec.lambdas) {
      SsTrainConfig ss = ss_config(spec);
      ss.lambda = lambda;
      ss.rep_dim = spec.rep_dim.value_or(static_cast<std::int64_t>(k - k_obs));
      train::SsmvcbmTrainer trainer(sub, arch, ss, rng);
      // The concept phase depends only on these settings and the seed.
      if (ss.base.epochs_c == seq.epochs_c && ss.base.lr_c == seq.lr_c && ss.base.batch_size == seq.batch_size) {
        trainer.adopt_concept_branch(phi);
      }
      auto sm = trainer.run();
      sm.meta.concept_columns = cols;
      cells.push_back(evaluate_cell(spec, sm, data.test, k_obs, lambda, seed));
    }
  });
  Report r;
  for (auto& cells : per_seed) {
    for (auto& c : cells) r.cells.push_back(std::move(c));
  }
  if (!spec.out_dir.empty()) {
    std::filesystem::create_directories(spec.out_dir);
    write_records(spec.out_dir / "records.jsonl", r);
    write_text(spec.out_dir / "ablation.csv", ablation_csv(r));
    if (spec.intervention_sweep) write_text(spec.out_dir / "intervention.csv", intervention_csv(r));
  }
  return r;
}

void write_records(const std::filesystem::path& path, const Report& r) {
  std::ostringstream out;
  for (const auto& c : r.cells) {
    for (const auto& rec : c.records()) out << rec.dump() << '\n';
  }
  write_text(path, out.str());
}

std::string summary_csv(const Report& r) {
  std::ostringstream out;
  out << "family,fusion,k_obs,lambda,n,target_auroc_mean,target_auroc_std,target_aupr_mean,target_aupr_std,"
         "concept_auroc_mean,concept_auroc_std,target_auroc_minus_mvbm\n";
  const auto mvbm = collect(r.select(Family::kMvbm), [](const CellResult& c) { return c.eval.target.auroc; });
  const double mvbm_mean = mvbm.empty() ? std::nan("") : mean_std(mvbm).mean;
  for (const auto& key : ordered_keys<GroupKey>(r, group_key)) {
    const auto cells = group(r, key);
    const auto t = mean_std(collect(cells, [](const CellResult& c) { return c.eval.target.auroc; }));
    const auto p = mean_std(collect(cells, [](const CellResult& c) { return c.eval.target.aupr; }));
    const Family f = std::get<0>(key);
    const auto ca = model::has_concepts(f) ? mean_std(collect(cells, concept_auroc)) : MeanStd{std::nan(""), std::nan(""), 0};
    out << model::to_string(f) << ',' << model::to_string(cells.front()->fusion) << ',' << std::get<1>(key) << ','
        << lambda_text(std::get<2>(key)) << ',' << t.n << ',' << fmt(t.mean) << ',' << fmt(t.std) << ','
        << fmt(p.mean) << ',' << fmt(p.std) << ',' << fmt(ca.mean) << ',' << fmt(ca.std) << ','
        << (f == Family::kMvbm ? "" : fmt(t.mean - mvbm_mean)) << '\n';
  }
  return out.str();
}

std::string ablation_csv(const Report& r) {
  std::ostringstream out;
  out << "model,lambda,n,target_auroc_mean,target_auroc_std,concept_auroc_mean,concept_auroc_std,"
         "cond_corr_median,cond_corr_q25,cond_corr_q75\n";
  for (const auto& key : ordered_keys<GroupKey>(r, group_key)) {
    const auto cells = group(r, key);
    const auto t = mean_std(collect(cells, [](const CellResult& c) { return c.eval.target.auroc; }));
    const auto ca = mean_std(collect(cells, concept_auroc));
    std::vector<double> corr;
    for (const auto* c : cells) {
      if (c->cond_corr) corr.push_back(c->cond_corr->median);
    }
    const Family f = std::get<0>(key);
    out << (f == Family::kSsmvcbm ? std::string("SSMVCBM") : f == Family::kMvcbmSeq ? std::string("MVCBM") : std::string(model::to_string(f))) << ','
        << lambda_text(std::get<2>(key)) << ',' << t.n << ',' << fmt(t.mean) << ',' << fmt(t.std) << ','
        << fmt(ca.mean) << ',' << fmt(ca.std) << ',' << fmt(interv::quantile(corr, 0.5)) << ','
        << fmt(interv::quantile(corr, 0.25)) << ',' << fmt(interv::quantile(corr, 0.75)) << '\n';
  }
  return out.str();
}

std::string intervention_csv(const Report& r) {
  std::ostringstream out;
  out << "family,k_obs,lambda,size,trials,median,q25,q75\n";
  for (const auto& key : ordered_keys<GroupKey>(r, group_key)) {
    std::vector<interv::SweepCurve> curves;
    for (const auto* c : group(r, key)) {
      if (c->sweep) curves.push_back(*c->sweep);
    }
    if (curves.empty()) continue;
    const auto pooled = interv::pool(curves);
    for (const auto& p : pooled.points) {
      out << model::to_string(std::get<0>(key)) << ',' << std::get<1>(key) << ',' << lambda_text(std::get<2>(key))
          << ',' << p.size << ',' << p.auroc.size() << ',' << fmt(p.median) << ',' << fmt(p.q25) << ','
          << fmt(p.q75) << '\n';
    }
  }
  return out.str();
}

}  // namespace mvcbm::harness
