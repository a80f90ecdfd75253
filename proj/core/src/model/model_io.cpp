#include "mvcbm/model/model_io.hpp"

#include <cstdio>

#include "mvcbm/error.hpp"

namespace mvcbm::model {

namespace {

constexpr const char* kFormat = "mvcbm-model";

void put_branch(num::Checkpoint& ckpt, const std::string& prefix, const Branch<float>& br) {
  ckpt.put(prefix + ".psi", br.psi);
  ckpt.put(prefix + ".xi", br.xi);
  ckpt.put(prefix + ".zeta", br.zeta);
}

void check_tree(const ParamTree<float>& tree, std::span<const LayerSpec> specs, const std::string& group) {
  Rng rng(0);
  const auto ref = num::build_mlp<float>(specs, rng);
  if (!tree.same_structure(ref)) {
    throw FormatError("checkpoint group '" + group + "' does not match the architecture in the manifest");
  }
}

Branch<float> get_branch(const num::Checkpoint& ckpt, const std::string& prefix, const BranchSpecs& specs) {
  Branch<float> br{ckpt.get<float>(prefix + ".psi"), ckpt.get<float>(prefix + ".xi"),
                   ckpt.get<float>(prefix + ".zeta")};
  check_tree(br.psi, specs.encoder, prefix + ".psi");
  check_tree(br.xi, specs.fusion, prefix + ".xi");
  check_tree(br.zeta, specs.head, prefix + ".zeta");
  return br;
}

}  // namespace

nlohmann::json model_manifest(const AnyModel& m) {
  const auto& c = config_of(m);
  return {{"format", kFormat},
          {"version", kModelFormatVersion},
          {"kind", std::holds_alternative<MvcbmModel>(m) ? "mvcbm" : "ssmvcbm"},
          {"config", c},
          {"fusion", to_string(c.fusion)},
          {"K", c.concept_count},
          {"J", rep_dim_of(m)},
          {"H", c.target_hidden},
          {"meta", meta_of(m)}};
}

std::string config_digest(const AnyModel& m) {
  const std::string text = model_manifest(m).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

num::Checkpoint to_checkpoint(const AnyModel& m) {
  num::Checkpoint ckpt;
  ckpt.metadata["model"] = model_manifest(m);
  if (const auto* mv = std::get_if<MvcbmModel>(&m)) {
    put_branch(ckpt, "phi", mv->phi);
    ckpt.put("theta", mv->theta);
  } else {
    const auto& ss = std::get<SsmvcbmModel>(m);
    put_branch(ckpt, "phi", ss.phi_c);
    put_branch(ckpt, "phi_z", ss.phi_z);
    ckpt.put("theta", ss.theta);
    ckpt.put("tau", ss.tau);
  }
  return ckpt;
}

AnyModel from_checkpoint(const num::Checkpoint& ckpt, const LoadExpectations& expect) {
  if (!ckpt.metadata.contains("model")) throw FormatError("checkpoint has no model manifest");
  const auto& man = ckpt.metadata.at("model");
  try {
    if (man.at("format").get<std::string>() != kFormat) throw FormatError("not a model checkpoint");
    const auto version = man.at("version").get<std::int64_t>();
    if (version != kModelFormatVersion) {
      throw FormatError("unsupported model format version " + std::to_string(version));
    }
    const auto cfg = man.at("config").get<MvcbmConfig>();
    const auto k = man.at("K").get<std::int64_t>();
    const auto j = man.at("J").get<std::int64_t>();
    const auto fusion = fusion_from_string(man.at("fusion").get<std::string>());
    if (k != cfg.concept_count || fusion != cfg.fusion || man.at("H").get<std::int64_t>() != cfg.target_hidden) {
      throw FormatError("model manifest is inconsistent with its config");
    }
    if (expect.concept_count && *expect.concept_count != k) {
      throw FormatError("checkpoint has K=" + std::to_string(k) + " concepts, expected " +
                        std::to_string(*expect.concept_count));
    }
    if (expect.fusion && *expect.fusion != fusion) {
      throw FormatError("checkpoint uses " + std::string(to_string(fusion)) + " fusion, expected " +
                        std::string(to_string(*expect.fusion)));
    }
    if (expect.view_dim && *expect.view_dim != cfg.view_dim) {
      throw FormatError("checkpoint expects views of width " + std::to_string(cfg.view_dim) + ", expected " +
                        std::to_string(*expect.view_dim));
    }
    const auto meta = man.at("meta").get<ModelMeta>();
    const auto kind = man.at("kind").get<std::string>();
    if (kind == "mvcbm") {
      if (j != 0) throw FormatError("mvcbm checkpoint with nonzero J");
      MvcbmModel m;
      m.config = cfg;
      m.meta = meta;
      m.phi = get_branch(ckpt, "phi", m.branch_specs());
      m.theta = ckpt.get<float>("theta");
      check_tree(m.theta, m.theta_specs(), "theta");
      return m;
    }
    if (kind != "ssmvcbm") throw FormatError("unknown model kind '" + kind + "'");
    SsmvcbmModel m;
    m.config = cfg;
    m.rep_dim = j;
    m.meta = meta;
    m.phi_c = get_branch(ckpt, "phi", m.concept_specs());
    if (j > 0) {
      m.phi_z = get_branch(ckpt, "phi_z", m.rep_specs());
    } else {
      m.phi_z = Branch<float>{ckpt.get<float>("phi_z.psi"), ckpt.get<float>("phi_z.xi"),
                              ckpt.get<float>("phi_z.zeta")};
    }
    m.theta = ckpt.get<float>("theta");
    check_tree(m.theta, m.theta_specs(), "theta");
    m.tau = ckpt.get<float>("tau");
    check_tree(m.tau, m.tau_specs(), "tau");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed model manifest: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("malformed model manifest: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const AnyModel& m) { to_checkpoint(m).save(path); }

AnyModel load_model(const std::filesystem::path& path, const LoadExpectations& expect) {
  return from_checkpoint(num::Checkpoint::load(path), expect);
}

}  // namespace mvcbm::model
