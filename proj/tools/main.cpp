#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>

#include "mvcbm/error.hpp"
#include "mvcbm/harness/harness.hpp"
#include "mvcbm/model/model_io.hpp"
#include "mvcbm/serve/serve.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mvcbm;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError("malformed config " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << '\n';
  if (!out) throw Error("cannot write " + path.string());
}

// Flat command config: keys are long flag names with '_' or '-'. Values from
// the file fill options not given on the command line.
class FlatConfig {
 public:
  void load(const std::string& path, std::set<std::string> nested = {}) {
    if (path.empty()) return;
    j_ = read_json(path);
    if (!j_.is_object()) throw FormatError("config must be a JSON object");
    nested_ = std::move(nested);
    for (const auto& [key, _] : j_.items()) {
      std::string k = key;
      std::replace(k.begin(), k.end(), '_', '-');
      if (!nested_.contains(key)) known_.insert(k);
      keys_[k] = key;
    }
  }

  template <typename T>
  void pick(const CLI::Option* opt, T& value) {
    const std::string name = opt->get_single_name();
    auto it = keys_.find(name);
    if (it == keys_.end()) return;
    used_.insert(name);
    if (opt->count() > 0) return;
    try {
      value = j_.at(it->second).get<T>();
    } catch (const json::exception& e) {
      throw FormatError("config key '" + it->second + "': " + e.what());
    }
  }

  const json* section(const std::string& key) const {
    return j_.is_object() && j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& k : known_) {
      if (!used_.contains(k)) throw FormatError("unknown config key '" + keys_.at(k) + "'");
    }
  }

 private:
  json j_;
  std::set<std::string> nested_;
  std::set<std::string> known_;
  std::set<std::string> used_;
  std::map<std::string, std::string> keys_;
};

fs::path checkpoint_path(const fs::path& p) { return fs::is_directory(p) ? p / "model.ckpt" : p; }

struct GenerateArgs {
  std::string config, out;
  synth::SyntheticConfig data;
};

struct TrainArgs {
  std::string config, data, out, family = "mvcbm-seq", fusion = "mean";
  std::uint64_t seed = 0;
  std::size_t k_obs = 0;  // 0: every concept column
  double lambda = 0.01;
  std::int64_t rep_dim = -1;  // -1: K - K_obs, or the preset when that is 0
};

struct ModelDataArgs {
  std::string config, model, data, out;
  std::uint64_t seed = 0;
  std::vector<double> tpr;
  std::vector<std::size_t> sizes;
  int trials = 3;
  int repeats = 1;
};

struct SpecArgs {
  std::string config, out, data, fusion;
  std::vector<std::string> families;
  std::vector<std::size_t> k_obs;
  std::vector<double> lambdas;
  std::vector<std::uint64_t> seeds;
  int workers = 0;
  int trials = 0;
  bool sweep = false;
  bool save_models = false;
};

struct ServeArgs {
  std::string config, model, data, host = "127.0.0.1";
  int port = 8080;
  std::size_t page_size = 50;
};

void cmd_generate(GenerateArgs& a, CLI::App& sub) {
  FlatConfig cfg;
  cfg.load(a.config);
  cfg.pick(sub.get_option("--out"), a.out);
  cfg.pick(sub.get_option("--seed"), a.data.seed);
  cfg.pick(sub.get_option("--n"), a.data.n);
  cfg.pick(sub.get_option("--p"), a.data.p);
  cfg.pick(sub.get_option("--views"), a.data.views);
  cfg.pick(sub.get_option("--concepts"), a.data.concepts);
  cfg.pick(sub.get_option("--test-size"), a.data.test_size);
  cfg.pick(sub.get_option("--g-hidden"), a.data.g_hidden);
  cfg.pick(sub.get_option("--f-hidden"), a.data.f_hidden);
  cfg.finish();
  if (a.out.empty()) throw InvalidArgument("--out is required");
  a.data.validate();
  const auto bench = synth::generate_dataset(a.data);
  synth::save_dataset(a.out, bench.dataset, &a.data, &bench.truth);
  std::cout << "wrote " << bench.dataset.size() << " samples to " << a.out << '\n';
}

void cmd_train(TrainArgs& a, CLI::App& sub) {
  FlatConfig cfg;
  cfg.load(a.config, {"arch", "train", "ss"});
  cfg.pick(sub.get_option("--data"), a.data);
  cfg.pick(sub.get_option("--out"), a.out);
  cfg.pick(sub.get_option("--family"), a.family);
  cfg.pick(sub.get_option("--fusion"), a.fusion);
  cfg.pick(sub.get_option("--seed"), a.seed);
  cfg.pick(sub.get_option("--k-obs"), a.k_obs);
  cfg.pick(sub.get_option("--lambda"), a.lambda);
  cfg.pick(sub.get_option("--rep-dim"), a.rep_dim);
  cfg.finish();
  if (a.data.empty() || a.out.empty()) throw InvalidArgument("--data and --out are required");

  const auto full = synth::load_dataset(a.data);
  const std::size_t k = full.concept_count();
  const std::size_t k_obs = a.k_obs == 0 ? k : a.k_obs;

  harness::TrainRequest req;
  req.family = model::family_from_string(a.family);
  req.seed = a.seed;
  req.concept_columns = harness::concept_subset(a.seed, k, k_obs);
  if (const auto* s = cfg.section("arch")) req.arch = s->get<model::MvcbmConfig>();
  req.arch.fusion = model::fusion_from_string(a.fusion);
  req.arch.concept_count = static_cast<std::int64_t>(k_obs);
  json train = train::preset(req.family);
  if (const auto* s = cfg.section("train")) train.merge_patch(*s);
  req.config = train.get<train::TrainConfig>();
  json ss = train::ss_preset();
  if (const auto* s = cfg.section("ss")) ss.merge_patch(*s);
  req.ss = ss.get<train::SsTrainConfig>();
  req.ss.lambda = a.lambda;
  if (a.rep_dim >= 0) {
    req.ss.rep_dim = a.rep_dim;
  } else if (k > k_obs) {
    req.ss.rep_dim = static_cast<std::int64_t>(k - k_obs);
  }

  fs::create_directories(a.out);
  train::JsonlLogger log(fs::path(a.out) / "epochs.jsonl");
  req.log = log.sink();
  const auto m = harness::train_model(full.only(Split::kTrain), req);
  model::save_model(fs::path(a.out) / "model.ckpt", m);
  write_json(fs::path(a.out) / "model.json", model::model_manifest(m));
  std::cout << "trained " << a.family << " (" << a.fusion << ", K=" << k_obs << ") into " << a.out << '\n';
}

void pick_model_data(ModelDataArgs& a, CLI::App& sub, FlatConfig& cfg) {
  cfg.load(a.config);
  cfg.pick(sub.get_option("--model"), a.model);
  cfg.pick(sub.get_option("--data"), a.data);
  cfg.pick(sub.get_option("--out"), a.out);
  if (a.model.empty() || a.data.empty()) throw InvalidArgument("--model and --data are required");
}

fs::path default_out(const ModelDataArgs& a, const char* name) {
  if (!a.out.empty()) return a.out;
  const fs::path m(a.model);
  return (fs::is_directory(m) ? m : m.parent_path()) / name;
}

void cmd_evaluate(ModelDataArgs& a, CLI::App& sub) {
  FlatConfig cfg;
  pick_model_data(a, sub, cfg);
  cfg.pick(sub.get_option("--tpr"), a.tpr);
  cfg.finish();
  const auto m = model::load_model(checkpoint_path(a.model));
  const auto test = synth::load_dataset(a.data).only(Split::kTest);
  auto report = metrics::evaluate(m, test, a.tpr);
  report.condition = {{"family", model::to_string(model::meta_of(m).family)},
                      {"digest", model::config_digest(m)},
                      {"split", "test"}};
  const auto path = default_out(a, "eval.json");
  write_json(path, report);
  std::cout << "target auroc " << report.target.auroc << " aupr " << report.target.aupr << " brier "
            << report.target.brier;
  if (!report.concepts.empty()) std::cout << " concept auroc " << report.mean_concept_auroc();
  std::cout << "\nwrote " << path.string() << '\n';
}

void cmd_intervene_sweep(ModelDataArgs& a, CLI::App& sub) {
  FlatConfig cfg;
  pick_model_data(a, sub, cfg);
  cfg.pick(sub.get_option("--sizes"), a.sizes);
  cfg.pick(sub.get_option("--trials"), a.trials);
  cfg.pick(sub.get_option("--seed"), a.seed);
  cfg.finish();
  const auto m = model::load_model(checkpoint_path(a.model));
  const auto test = synth::load_dataset(a.data).only(Split::kTest);
  auto sizes = a.sizes;
  if (sizes.empty()) {
    sizes.resize(static_cast<std::size_t>(model::config_of(m).concept_count) + 1);
    std::iota(sizes.begin(), sizes.end(), std::size_t{0});
  }
  Rng rng = Rng(a.seed).fork("intervention-sweep");
  const auto curve = interv::intervention_sweep(m, test, sizes, a.trials, rng);
  json points = json::array();
  for (const auto& p : curve.points) {
    points.push_back({{"size", p.size}, {"auroc", p.auroc}, {"aupr", p.aupr},
                      {"median", p.median}, {"q25", p.q25}, {"q75", p.q75}});
    std::cout << "size " << p.size << " median auroc " << p.median << '\n';
  }
  const auto path = default_out(a, "intervention.json");
  write_json(path, {{"digest", model::config_digest(m)}, {"trials", a.trials}, {"seed", a.seed}, {"points", points}});
  std::cout << "wrote " << path.string() << '\n';
}

void cmd_shuffle_eval(ModelDataArgs& a, CLI::App& sub) {
  FlatConfig cfg;
  pick_model_data(a, sub, cfg);
  cfg.pick(sub.get_option("--repeats"), a.repeats);
  cfg.pick(sub.get_option("--seed"), a.seed);
  cfg.finish();
  const auto m = model::load_model(checkpoint_path(a.model));
  const auto test = synth::load_dataset(a.data).only(Split::kTest);
  Rng rng = Rng(a.seed).fork("shuffle-eval");
  const auto cmp = interv::shuffled_view_eval(m, test, rng, a.repeats);
  const auto path = default_out(a, "shuffle.json");
  write_json(path, {{"digest", model::config_digest(m)}, {"ordered", cmp.ordered}, {"shuffled", cmp.shuffled}});
  std::cout << "ordered auroc " << cmp.ordered.target.auroc << " shuffled auroc " << cmp.shuffled.target.auroc
            << "\nwrote " << path.string() << '\n';
}

harness::ExperimentSpec load_spec_args(SpecArgs& a) {
  harness::ExperimentSpec s;
  if (!a.config.empty()) s = harness::load_spec(a.config);
  if (!a.out.empty()) s.out_dir = a.out;
  if (!a.data.empty()) s.data_dir = a.data;
  if (!a.fusion.empty()) s.fusion = model::fusion_from_string(a.fusion);
  if (!a.families.empty()) {
    s.families.clear();
    for (const auto& f : a.families) s.families.push_back(model::family_from_string(f));
  }
  if (!a.k_obs.empty()) s.k_obs = a.k_obs;
  if (!a.lambdas.empty()) s.lambdas = a.lambdas;
  if (!a.seeds.empty()) s.seeds = a.seeds;
  if (a.workers > 0) s.workers = a.workers;
  if (a.trials > 0) s.intervention_trials = a.trials;
  if (a.sweep) s.intervention_sweep = true;
  if (a.save_models) s.save_models = true;
  if (s.out_dir.empty()) throw InvalidArgument("an output directory is required (--out or out_dir)");
  s.validate();
  return s;
}

void cmd_serve(ServeArgs& a, CLI::App& sub) {
  FlatConfig cfg;
  cfg.load(a.config);
  cfg.pick(sub.get_option("--model"), a.model);
  cfg.pick(sub.get_option("--data"), a.data);
  cfg.pick(sub.get_option("--host"), a.host);
  cfg.pick(sub.get_option("--port"), a.port);
  cfg.pick(sub.get_option("--page-size"), a.page_size);
  cfg.finish();
  if (a.model.empty() || a.data.empty()) throw InvalidArgument("--model and --data are required");
  serve::ServeOptions opts;
  opts.page_size = a.page_size;
  const serve::Service service(model::load_model(checkpoint_path(a.model)), synth::load_dataset(a.data), opts);
  std::cout << "serving on http://" << a.host << ':' << a.port << std::endl;
  serve::run_server(service, a.host, a.port);
}

void add_model_data(CLI::App* sub, ModelDataArgs& a) {
  sub->add_option("--config", a.config, "JSON config; flags override its keys");
  sub->add_option("--model", a.model, "Checkpoint file or training output directory");
  sub->add_option("--data", a.data, "Dataset directory");
  sub->add_option("--out", a.out, "Output file");
}

void add_spec(CLI::App* sub, SpecArgs& a) {
  sub->add_option("--config", a.config, "Experiment spec (JSON)");
  sub->add_option("--out", a.out, "Output directory");
  sub->add_option("--data", a.data, "Fixed dataset directory instead of per-seed generation");
  sub->add_option("--families", a.families, "Model families");
  sub->add_option("--fusion", a.fusion, "mean or lstm");
  sub->add_option("--k-obs", a.k_obs, "Observed concept counts");
  sub->add_option("--lambdas", a.lambdas, "Adversarial weights");
  sub->add_option("--seeds", a.seeds, "Seeds");
  sub->add_option("--workers", a.workers, "Parallel workers (default MVCBM_WORKERS or 1)");
  sub->add_option("--trials", a.trials, "Intervention trials per size");
  sub->add_flag("--intervention-sweep", a.sweep, "Run intervention sweeps");
  sub->add_flag("--save-models", a.save_models, "Write checkpoints under out/models");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiview concept bottleneck models on synthetic data"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "Simulate a synthetic multiview benchmark");
  g->add_option("--config", gen.config, "JSON config; flags override its keys");
  g->add_option("--out", gen.out, "Dataset directory");
  g->add_option("--seed", gen.data.seed, "Seed");
  g->add_option("--n", gen.data.n, "Samples");
  g->add_option("--p", gen.data.p, "Features per view");
  g->add_option("--views", gen.data.views, "Views per sample");
  g->add_option("--concepts", gen.data.concepts, "Concept count K");
  g->add_option("--test-size", gen.data.test_size, "Samples in the test split");
  g->add_option("--g-hidden", gen.data.g_hidden, "Hidden width of the concept map");
  g->add_option("--f-hidden", gen.data.f_hidden, "Hidden width of the label map");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train one model on a dataset directory");
  t->add_option("--config", tr.config, "JSON config with optional arch/train/ss sections");
  t->add_option("--data", tr.data, "Dataset directory");
  t->add_option("--out", tr.out, "Output directory");
  t->add_option("--family", tr.family, "mlp, mvbm, cbm-seq, cbm-joint, mvcbm-seq, mvcbm-joint or ssmvcbm");
  t->add_option("--fusion", tr.fusion, "mean or lstm");
  t->add_option("--seed", tr.seed, "Seed");
  t->add_option("--k-obs", tr.k_obs, "Observed concepts (default all)");
  t->add_option("--lambda", tr.lambda, "Adversarial weight (ssmvcbm)");
  t->add_option("--rep-dim", tr.rep_dim, "Side-channel width (ssmvcbm)");

  ModelDataArgs ev;
  auto* e = app.add_subcommand("evaluate", "Evaluate a model on the test split");
  add_model_data(e, ev);
  e->add_option("--tpr", ev.tpr, "TPR levels for FPR@TPR");

  ModelDataArgs is;
  auto* iv = app.add_subcommand("intervene-sweep", "Random concept interventions of growing size");
  add_model_data(iv, is);
  iv->add_option("--sizes", is.sizes, "Intervention sizes (default 0..K)");
  iv->add_option("--trials", is.trials, "Random subsets per size");
  iv->add_option("--seed", is.seed, "Seed");

  ModelDataArgs sh;
  auto* se = app.add_subcommand("shuffle-eval", "Compare ordered and shuffled view order");
  add_model_data(se, sh);
  se->add_option("--repeats", sh.repeats, "Shuffles averaged");
  se->add_option("--seed", sh.seed, "Seed");

  SpecArgs sw;
  auto* s = app.add_subcommand("sweep-concepts", "Train families over observed-concept subsets");
  add_spec(s, sw);

  SpecArgs ab;
  auto* a = app.add_subcommand("ablate-lambda", "SSMVCBM over a grid of adversarial weights");
  add_spec(a, ab);

  ServeArgs sv;
  auto* srv = app.add_subcommand("serve", "HTTP prediction and intervention service");
  srv->add_option("--config", sv.config, "JSON config; flags override its keys");
  srv->add_option("--model", sv.model, "Checkpoint file or training output directory");
  srv->add_option("--data", sv.data, "Dataset directory");
  srv->add_option("--host", sv.host, "Bind address");
  srv->add_option("--port", sv.port, "Port");
  srv->add_option("--page-size", sv.page_size, "Samples per page");

  CLI11_PARSE(app, argc, argv);

  try {
    if (g->parsed()) cmd_generate(gen, *g);
    if (t->parsed()) cmd_train(tr, *t);
    if (e->parsed()) cmd_evaluate(ev, *e);
    if (iv->parsed()) cmd_intervene_sweep(is, *iv);
    if (se->parsed()) cmd_shuffle_eval(sh, *se);
    if (s->parsed()) {
      const auto spec = load_spec_args(sw);
      const auto r = harness::run_concept_sweep(spec);
      std::cout << harness::summary_csv(r) << "wrote " << spec.out_dir.string() << '\n';
    }
    if (a->parsed()) {
      const auto spec = load_spec_args(ab);
      const auto r = harness::run_lambda_ablation(spec);
      std::cout << harness::ablation_csv(r) << "wrote " << spec.out_dir.string() << '\n';
    }
    if (srv->parsed()) cmd_serve(sv, *srv);
  } catch (const std::exception& ex) {
    std::cerr << "mvcbm: " << ex.what() << '\n';
    return 1;
  }
  return 0;
}
