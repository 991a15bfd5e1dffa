#pragma once

// Staged pipeline driven by one JSON config:
//   ensemble -> pca -> train -> calibrate / eval
// Every stage writes a manifest under <workspace>/manifests/ listing the
// checksums of what it read and wrote. Downstream stages refuse to start when
// an upstream artifact no longer matches its manifest.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epical/calibrate.hpp"
#include "epical/ensemble.hpp"
#include "epical/eval.hpp"
#include "epical/io.hpp"
#include "epical/pca.hpp"
#include "epical/simcore.hpp"
#include "epical/surrogate.hpp"

namespace epical::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "1.0.0";
inline constexpr const char* kWorkspaceEnv = "EPICAL_WORKSPACE";

struct Paths {
  fs::path workspace = "work";
  fs::path dataset = "dataset";
  fs::path basis = "pca/basis.txt";
  fs::path model = "model/surrogate.txt";
  fs::path posteriors = "posteriors";
  fs::path reports = "reports";
};

struct EnsembleSection {
  fs::path msas;  ///< relative to the config file
  std::size_t runs_per_msa = 500;
  std::size_t n_train_msas = 10;
  int horizon = 28;
  std::uint64_t seed = 0;
  ParameterBox box = ParameterBox::ensemble_default();
};

struct PcaSection {
  std::size_t components = 10;
};

struct CalibrateSection {
  std::vector<std::string> msas;  ///< first is the target
  std::size_t run = 0;            ///< planted observation: this run of each MSA
  fs::path observed;              ///< optional CSV msa_id,day,value (cumulative, normalized)
  std::size_t t_obs = 20;
  std::vector<Method> methods{Method::Naive, Method::Opt, Method::OptKld, Method::OptGlobal};
  std::size_t top_k = 100;
  std::size_t histogram_bins = 20;
  OptimizerConfig optimizer;
};

struct EvalSection {
  std::vector<Method> methods{Method::Naive, Method::Opt, Method::OptKld, Method::OptGlobal};
  std::vector<std::size_t> t_obs_list{10, 20, 25};
  std::size_t n_test_curves = 15;
  std::string target_msa;
  std::vector<std::string> partner_msas;
  std::size_t top_k = 100;
};

struct PipelineConfig {
  fs::path base_dir;  ///< directory of the config file
  Paths paths;
  EnsembleSection ensemble;
  PcaSection pca;
  TrainConfig train;
  CalibrateSection calibrate;
  EvalSection eval;
  std::size_t jobs = 1;
  json source;  ///< config after overrides, echoed into manifests

  fs::path workspace() const {
    return paths.workspace.is_absolute() ? paths.workspace : base_dir / paths.workspace;
  }
  fs::path at(const fs::path& p) const { return p.is_absolute() ? p : workspace() / p; }
  fs::path manifest(const std::string& stage) const {
    return workspace() / "manifests" / (stage + ".json");
  }
};

// ---------------------------------------------------------------------------
// Config parsing. Errors are collected so one run reports all of them.

namespace detail {

template <class T>
std::optional<std::string> convert(const json& j, T& out) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) return "expected true/false";
    out = j.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) return "expected a string";
    out = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, fs::path>) {
    if (!j.is_string()) return "expected a path string";
    out = j.get<std::string>();
  } else if constexpr (std::is_same_v<T, double>) {
    if (!j.is_number()) return "expected a number";
    out = j.get<double>();
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    if (!j.is_number_unsigned()) return "expected a nonnegative integer";
    out = j.get<T>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) return "expected an integer";
    out = j.get<T>();
  } else {
    if (!j.is_array()) return "expected a list";
    out.clear();
    for (const auto& e : j) {
      typename T::value_type v{};
      if (auto err = convert(e, v)) return "list element: " + *err;
      out.push_back(v);
    }
  }
  return std::nullopt;
}

class Section {
 public:
  Section(const json* obj, std::string name, std::vector<std::string>& issues)
      : obj_(obj), name_(std::move(name)), issues_(&issues) {
    if (obj_ && !obj_->is_object()) {
      issues_->push_back(name_ + ": expected an object");
      obj_ = nullptr;
    }
  }

  template <class T>
  void get(const char* key, T& out, bool required = false) {
    seen_.insert(key);
    if (!obj_ || !obj_->contains(key)) {
      if (required) issues_->push_back(where(key) + ": missing required field");
      return;
    }
    if (auto err = convert(obj_->at(key), out)) issues_->push_back(where(key) + ": " + *err);
  }

  const json* raw(const char* key) {
    seen_.insert(key);
    return obj_ && obj_->contains(key) ? &obj_->at(key) : nullptr;
  }

  Section child(const char* key) { return Section(raw(key), where(key), *issues_); }

  void fail(const std::string& key, const std::string& msg) {
    issues_->push_back(where(key) + ": " + msg);
  }

  /// Flags keys that were never looked up.
  void finish() const {
    if (!obj_) return;
    for (const auto& [k, v] : obj_->items())
      if (!seen_.count(k)) issues_->push_back(where(k) + ": unknown field");
  }

  std::string where(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

 private:
  const json* obj_;
  std::string name_;
  std::vector<std::string>* issues_;
  std::set<std::string> seen_;
};

inline std::vector<Method> methods_from(Section& s, const char* key, std::vector<Method> fallback) {
  std::vector<std::string> names;
  s.get(key, names);
  if (names.empty()) return fallback;
  std::vector<Method> out;
  for (const auto& n : names) {
    try {
      out.push_back(method_from_string(n));
    } catch (const std::exception& e) {
      s.fail(key, e.what());
    }
  }
  return out;
}

template <class E>
void enum_field(Section& s, const char* key, E& out,
                std::initializer_list<std::pair<const char*, E>> options) {
  std::string text;
  s.get(key, text);
  if (text.empty()) return;
  for (const auto& [name, value] : options)
    if (text == name) {
      out = value;
      return;
    }
  std::string expected;
  for (const auto& [name, value] : options) expected += std::string(expected.empty() ? "" : ", ") + name;
  s.fail(key, "'" + text + "' is not one of " + expected);
}

template <class F>
void check(std::vector<std::string>& issues, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    issues.push_back(e.what());
  }
}

/// Sets root[a][b]... = value for a dotted path; value is parsed as JSON when possible.
inline void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ValidationError("override '" + assignment + "' is not of the form section.key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ValidationError("override '" + assignment + "' has an empty key");
    if (!node->is_object()) throw ValidationError("override '" + assignment + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

}  // namespace detail

/// Parses and validates a config. Every problem found is listed in one ValidationError.
inline PipelineConfig parse_config(json root, const fs::path& base_dir,
                                   const std::vector<std::string>& overrides = {}) {
  for (const auto& o : overrides) detail::apply_override(root, o);

  PipelineConfig cfg;
  cfg.base_dir = base_dir;
  cfg.source = root;
  std::vector<std::string> issues;
  detail::Section top(&root, "", issues);

  auto paths = top.child("paths");
  paths.get("workspace", cfg.paths.workspace);
  paths.get("dataset", cfg.paths.dataset);
  paths.get("basis", cfg.paths.basis);
  paths.get("model", cfg.paths.model);
  paths.get("posteriors", cfg.paths.posteriors);
  paths.get("reports", cfg.paths.reports);
  paths.finish();
  if (const char* env = std::getenv(kWorkspaceEnv); env && *env) cfg.paths.workspace = env;

  top.get("jobs", cfg.jobs);
  if (cfg.jobs < 1) top.fail("jobs", "must be >= 1");

  auto ens = top.child("ensemble");
  ens.get("msas", cfg.ensemble.msas, true);
  ens.get("runs_per_msa", cfg.ensemble.runs_per_msa);
  ens.get("n_train_msas", cfg.ensemble.n_train_msas);
  ens.get("horizon", cfg.ensemble.horizon);
  ens.get("seed", cfg.ensemble.seed, true);
  if (const auto* box = ens.raw("box")) {
    try {
      cfg.ensemble.box = box_from_json(*box);
    } catch (const std::exception& e) {
      ens.fail("box", e.what());
    }
  }
  ens.finish();
  if (cfg.ensemble.runs_per_msa < 1) ens.fail("runs_per_msa", "must be >= 1");
  if (cfg.ensemble.horizon < 1) ens.fail("horizon", "must be >= 1");

  std::vector<MsaProfile> msas;
  if (!cfg.ensemble.msas.empty()) {
    const auto path = cfg.ensemble.msas.is_absolute() ? cfg.ensemble.msas : base_dir / cfg.ensemble.msas;
    try {
      msas = load_msa_profiles(path);
    } catch (const std::exception& e) {
      ens.fail("msas", e.what());
    }
  }
  auto msa_index = [&](const std::string& id) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < msas.size(); ++i)
      if (msas[i].id == id) return i;
    return std::nullopt;
  };
  if (!msas.empty() && (cfg.ensemble.n_train_msas < 1 || cfg.ensemble.n_train_msas >= msas.size()))
    ens.fail("n_train_msas", "must leave at least one TRAIN and one TEST MSA (have " +
                                 std::to_string(msas.size()) + ")");

  auto pca = top.child("pca");
  pca.get("components", cfg.pca.components);
  pca.finish();
  if (cfg.pca.components < 1 || cfg.pca.components > static_cast<std::size_t>(std::max(1, cfg.ensemble.horizon)))
    pca.fail("components", "must lie in [1, horizon]");

  auto tr = top.child("train");
  tr.get("hidden1", cfg.train.hidden1);
  tr.get("hidden2", cfg.train.hidden2);
  tr.get("learning_rate", cfg.train.learning_rate);
  tr.get("batch_size", cfg.train.batch_size);
  tr.get("epochs", cfg.train.epochs);
  tr.get("beta1", cfg.train.beta1);
  tr.get("beta2", cfg.train.beta2);
  tr.get("epsilon", cfg.train.epsilon);
  tr.get("validation_fraction", cfg.train.validation_fraction);
  tr.get("leaky_slope", cfg.train.leaky_slope);
  tr.get("bn_momentum", cfg.train.bn_momentum);
  tr.get("seed", cfg.train.seed, true);
  tr.finish();
  detail::check(issues, [&] { cfg.train.validate(); });

  auto cal = top.child("calibrate");
  cal.get("msas", cfg.calibrate.msas, true);
  cal.get("run", cfg.calibrate.run);
  cal.get("observed", cfg.calibrate.observed);
  cal.get("t_obs", cfg.calibrate.t_obs);
  cfg.calibrate.methods = detail::methods_from(cal, "methods", cfg.calibrate.methods);
  cal.get("top_k", cfg.calibrate.top_k);
  cal.get("histogram_bins", cfg.calibrate.histogram_bins);
  auto& oc = cfg.calibrate.optimizer;
  auto opt = cal.child("optimizer");
  opt.get("n_seeds", oc.n_seeds);
  opt.get("n_init_naive", oc.n_init_naive);
  opt.get("max_steps", oc.max_steps);
  opt.get("step_size", oc.step_size);
  opt.get("lambda_kld", oc.lambda_kld);
  opt.get("lambda_global", oc.lambda_global);
  opt.get("jitter", oc.jitter);
  opt.get("convergence_window", oc.convergence_window);
  opt.get("convergence_tol", oc.convergence_tol);
  opt.get("adam_beta1", oc.adam_beta1);
  opt.get("adam_beta2", oc.adam_beta2);
  opt.get("adam_epsilon", oc.adam_epsilon);
  detail::enum_field(opt, "kld_scope", oc.kld_scope,
                     {{"all", KldScope::All}, {"target", KldScope::Target}});
  detail::enum_field(opt, "residual_norm", oc.residual_norm,
                     {{"mean_squared", ResidualNorm::MeanSquared}, {"l2", ResidualNorm::L2}});
  detail::enum_field(opt, "seed_reduction", oc.seed_reduction,
                     {{"mean", SeedReduction::Mean}, {"sum", SeedReduction::Sum}});
  opt.get("trace_every", oc.trace_every);
  opt.get("seed", oc.seed, true);
  opt.finish();
  cal.finish();
  oc.top_k = cfg.calibrate.top_k;
  detail::check(issues, [&] { oc.validate(); });
  if (cfg.calibrate.top_k > oc.n_seeds || cfg.calibrate.top_k > oc.n_init_naive)
    cal.fail("top_k", "exceeds optimizer.n_seeds or optimizer.n_init_naive");
  if (cfg.calibrate.t_obs < 1 || cfg.calibrate.t_obs > static_cast<std::size_t>(std::max(1, cfg.ensemble.horizon)))
    cal.fail("t_obs", "must lie in [1, horizon]");
  if (cfg.calibrate.histogram_bins < 1) cal.fail("histogram_bins", "must be >= 1");
  if (cfg.calibrate.methods.empty()) cal.fail("methods", "must name at least one method");
  if (cfg.calibrate.msas.empty()) cal.fail("msas", "must name at least one MSA");
  for (const auto& id : cfg.calibrate.msas)
    if (!msas.empty() && !msa_index(id)) cal.fail("msas", "unknown MSA '" + id + "'");
  if (std::count(cfg.calibrate.methods.begin(), cfg.calibrate.methods.end(), Method::OptGlobal) &&
      cfg.calibrate.msas.size() < 2)
    cal.fail("methods", "OPT_GLOBAL needs at least two MSAs");
  if (!cfg.calibrate.observed.empty() &&
      std::count(cfg.calibrate.methods.begin(), cfg.calibrate.methods.end(), Method::Truth))
    cal.fail("methods", "TRUTH needs a planted observation, not an observed file");
  if (cfg.calibrate.run >= cfg.ensemble.runs_per_msa)
    cal.fail("run", "must be < ensemble.runs_per_msa");

  auto ev = top.child("eval");
  cfg.eval.methods = detail::methods_from(ev, "methods", cfg.eval.methods);
  ev.get("t_obs_list", cfg.eval.t_obs_list);
  ev.get("n_test_curves", cfg.eval.n_test_curves);
  ev.get("target_msa", cfg.eval.target_msa, true);
  ev.get("partner_msas", cfg.eval.partner_msas);
  ev.get("top_k", cfg.eval.top_k);
  ev.finish();
  if (cfg.eval.methods.empty()) ev.fail("methods", "must name at least one method");
  if (cfg.eval.t_obs_list.empty()) ev.fail("t_obs_list", "must not be empty");
  for (auto t : cfg.eval.t_obs_list)
    if (t < 1 || t > static_cast<std::size_t>(std::max(1, cfg.ensemble.horizon)))
      ev.fail("t_obs_list", "T_obs=" + std::to_string(t) + " outside [1, horizon]");
  if (cfg.eval.n_test_curves < 1 || cfg.eval.n_test_curves > cfg.ensemble.runs_per_msa)
    ev.fail("n_test_curves", "must lie in [1, ensemble.runs_per_msa]");
  if (cfg.eval.top_k < 1 || cfg.eval.top_k > oc.n_seeds || cfg.eval.top_k > oc.n_init_naive)
    ev.fail("top_k", "must lie in [1, min(optimizer.n_seeds, optimizer.n_init_naive)]");
  if (!msas.empty() && !cfg.eval.target_msa.empty()) {
    const auto idx = msa_index(cfg.eval.target_msa);
    if (!idx)
      ev.fail("target_msa", "unknown MSA '" + cfg.eval.target_msa + "'");
    else if (*idx < cfg.ensemble.n_train_msas)
      ev.fail("target_msa", "'" + cfg.eval.target_msa + "' is a TRAIN MSA; pick a TEST MSA");
  }
  for (const auto& id : cfg.eval.partner_msas)
    if (!msas.empty() && !msa_index(id)) ev.fail("partner_msas", "unknown MSA '" + id + "'");
  if (std::count(cfg.eval.methods.begin(), cfg.eval.methods.end(), Method::OptGlobal) &&
      cfg.eval.partner_msas.empty())
    ev.fail("partner_msas", "OPT_GLOBAL needs at least one partner MSA");

  top.finish();
  if (!issues.empty()) {
    std::string msg = "invalid config (" + std::to_string(issues.size()) + " problem" +
                      (issues.size() == 1 ? "" : "s") + "):";
    for (const auto& i : issues) msg += "\n  - " + i;
    throw ValidationError(msg);
  }
  return cfg;
}

inline PipelineConfig load_config(const fs::path& path, const std::vector<std::string>& overrides = {}) {
  json root;
  try {
    root = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(std::move(root), fs::absolute(path).parent_path(), overrides);
}

// ---------------------------------------------------------------------------
// Manifests

struct Manifest {
  std::string stage;
  std::uint64_t seed = 0;
  json config;
  std::map<std::string, std::string> inputs;   ///< workspace-relative path -> checksum
  std::map<std::string, std::string> outputs;

  json to_json() const {
    return {{"stage", stage}, {"version", kVersion}, {"seed", seed},
            {"config", config}, {"inputs", inputs},  {"outputs", outputs}};
  }
};

inline std::string relative_key(const PipelineConfig& cfg, const fs::path& p) {
  return fs::path(p).lexically_relative(cfg.workspace()).generic_string();
}

/// Every regular file under `p` (or `p` itself), keyed by workspace-relative path.
inline std::map<std::string, std::string> checksums(const PipelineConfig& cfg, const fs::path& p) {
  std::map<std::string, std::string> out;
  if (fs::is_regular_file(p)) {
    out[relative_key(cfg, p)] = io::file_checksum(p);
  } else if (fs::is_directory(p)) {
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file()) out[relative_key(cfg, e.path())] = io::file_checksum(e.path());
  }
  return out;
}

inline void write_manifest(const PipelineConfig& cfg, const Manifest& m) {
  io::write_file(cfg.manifest(m.stage), m.to_json().dump(2) + "\n");
}

/// Checks that the outputs recorded by `stage` are present and unchanged; returns them.
inline std::map<std::string, std::string> verify_upstream(const PipelineConfig& cfg,
                                                          const std::string& stage,
                                                          const fs::path& artifact) {
  if (!fs::exists(artifact))
    throw ValidationError("missing " + stage + " artifact '" + artifact.string() +
                          "' (run `epical " + stage + "` first)");
  const auto mpath = cfg.manifest(stage);
  if (!fs::exists(mpath))
    throw ValidationError("missing manifest '" + mpath.string() + "' for " + stage + " artifacts");
  json j;
  try {
    j = json::parse(io::read_file(mpath));
  } catch (const json::parse_error& e) {
    throw ValidationError("manifest '" + mpath.string() + "' is corrupt: " + e.what());
  }
  const auto declared = j.at("outputs").get<std::map<std::string, std::string>>();
  const auto found = checksums(cfg, artifact);
  if (found.empty()) throw ValidationError("no files found at '" + artifact.string() + "'");
  for (const auto& [path, sum] : found) {
    const auto it = declared.find(path);
    if (it == declared.end())
      throw ValidationError("'" + path + "' is not listed in the " + stage + " manifest");
    if (it->second != sum)
      throw ValidationError("checksum mismatch for '" + path + "': manifest " + it->second +
                            ", found " + sum);
  }
  return found;
}

// ---------------------------------------------------------------------------
// Stages

inline Eigen::MatrixXd train_curves(const EnsembleDataset& ds) {
  const auto recs = ds.records_in(Split::Train);
  Eigen::MatrixXd curves(static_cast<Eigen::Index>(recs.size()), ds.horizon);
  for (std::size_t i = 0; i < recs.size(); ++i)
    curves.row(static_cast<Eigen::Index>(i)) =
        Eigen::Map<const Eigen::RowVectorXd>(recs[i]->normalized.data(), ds.horizon);
  return curves;
}

inline EnsembleDataset cmd_ensemble(const PipelineConfig& cfg) {
  const auto& e = cfg.ensemble;
  const auto msas = load_msa_profiles(e.msas.is_absolute() ? e.msas : cfg.base_dir / e.msas);
  auto ds = generate_ensemble(msas, e.runs_per_msa, e.box, e.horizon, e.seed, e.n_train_msas);
  const auto dir = cfg.at(cfg.paths.dataset);
  fs::remove_all(dir);
  write_dataset(ds, dir);
  write_manifest(cfg, {"ensemble", e.seed, cfg.source.value("ensemble", json::object()), {},
                       checksums(cfg, dir)});
  return ds;
}

inline PcaBasis cmd_pca(const PipelineConfig& cfg) {
  const auto dir = cfg.at(cfg.paths.dataset);
  const auto inputs = verify_upstream(cfg, "ensemble", dir);
  const auto ds = read_dataset(dir);
  auto basis = fit_pca(train_curves(ds), cfg.pca.components);
  const auto out = cfg.at(cfg.paths.basis);
  write_basis(basis, out);
  write_manifest(cfg, {"pca", 0, cfg.source.value("pca", json::object()), inputs, checksums(cfg, out)});
  return basis;
}

inline SurrogateModel cmd_train(const PipelineConfig& cfg) {
  const auto dir = cfg.at(cfg.paths.dataset);
  const auto basis_path = cfg.at(cfg.paths.basis);
  auto inputs = verify_upstream(cfg, "ensemble", dir);
  inputs.merge(verify_upstream(cfg, "pca", basis_path));
  const auto ds = read_dataset(dir);
  const auto basis = read_basis(basis_path);
  auto model = train_surrogate(ds, basis, cfg.train);
  const auto out = cfg.at(cfg.paths.model);
  write_model(model, out);
  std::string curve = "epoch,train_loss,validation_loss\n";
  for (std::size_t i = 0; i < model.summary.train_loss.size(); ++i)
    curve += std::to_string(i) + ',' + io::fmt(model.summary.train_loss[i]) + ',' +
             io::fmt(i < model.summary.validation_loss.size() ? model.summary.validation_loss[i] : 0.0) +
             '\n';
  const auto loss_path = out.parent_path() / "training_loss.csv";
  io::write_file(loss_path, curve);
  auto outputs = checksums(cfg, out);
  outputs.merge(checksums(cfg, loss_path));
  write_manifest(cfg, {"train", cfg.train.seed, cfg.source.value("train", json::object()), inputs, outputs});
  return model;
}

/// Dataset, basis and model after upstream verification.
struct Artifacts {
  EnsembleDataset ds;
  PcaBasis basis;
  SurrogateModel model;
  std::map<std::string, std::string> checksums;
};

inline Artifacts load_artifacts(const PipelineConfig& cfg) {
  Artifacts a;
  const auto dir = cfg.at(cfg.paths.dataset);
  const auto basis_path = cfg.at(cfg.paths.basis);
  const auto model_path = cfg.at(cfg.paths.model);
  a.checksums = verify_upstream(cfg, "ensemble", dir);
  a.checksums.merge(verify_upstream(cfg, "pca", basis_path));
  a.checksums.merge(verify_upstream(cfg, "train", model_path));
  a.ds = read_dataset(dir);
  a.basis = read_basis(basis_path);
  a.model = read_model(model_path);
  check_length(a.basis, a.ds.horizon, "pipeline");
  return a;
}

/// Reads msa_id,day,value rows (cumulative, population-normalized) into per-MSA curves.
inline std::map<std::string, std::vector<double>> read_observed(const fs::path& path) {
  std::map<std::string, std::vector<double>> out;
  const auto text = io::read_file(path);
  const auto rows = io::lines(text);
  if (rows.empty() || rows.front() != "msa_id,day,value")
    throw ValidationError("observed file '" + path.string() + "' must start with msa_id,day,value");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto cols = io::split(rows[i]);
    if (cols.size() != 3)
      throw ValidationError("observed file line " + std::to_string(i + 1) + ": expected 3 columns");
    auto& curve = out[std::string(cols[0])];
    const auto day = io::parse_int(cols[1]);
    if (day != static_cast<long long>(curve.size()))
      throw ValidationError("observed file line " + std::to_string(i + 1) +
                            ": days must start at 0 and be consecutive per MSA");
    curve.push_back(io::parse_double(cols[2]));
  }
  return out;
}

struct Observation {
  std::vector<CalibrationProblem> problems;   ///< calibrate.msas order
  std::vector<std::vector<double>> truth;     ///< normalized cumulative truth per problem; empty if unknown
  std::optional<EpiParams> truth_params;      ///< target truth when planted
};

inline Observation observation_for(const PipelineConfig& cfg, const EnsembleDataset& ds) {
  const auto& c = cfg.calibrate;
  Observation obs;
  if (!c.observed.empty()) {
    const auto curves = read_observed(c.observed.is_absolute() ? c.observed : cfg.base_dir / c.observed);
    for (const auto& id : c.msas) {
      const auto it = curves.find(id);
      if (it == curves.end()) throw ValidationError("observed file has no curve for '" + id + "'");
      if (it->second.size() < c.t_obs)
        throw ValidationError("observed curve for '" + id + "' is shorter than t_obs");
      CalibrationProblem p;
      p.msa = ds.msa(id);
      p.horizon = static_cast<std::size_t>(ds.horizon);
      p.y_obs = Eigen::Map<const Eigen::VectorXd>(it->second.data(), static_cast<Eigen::Index>(c.t_obs));
      p.validate();
      obs.problems.push_back(std::move(p));
      obs.truth.emplace_back();
    }
    return obs;
  }
  BenchmarkConfig b;
  b.target_msa = c.msas.front();
  b.partner_msas.assign(c.msas.begin() + 1, c.msas.end());
  auto pc = make_planted_case(ds, b, c.run, c.t_obs);
  obs.truth_params = pc.truth;
  // Truth curves: the target's own run; partners carry the target's global parameters.
  const auto target_truth = pc.truth.to_array();
  for (std::size_t i = 0; i < pc.problems.size(); ++i) {
    const auto& msa = pc.problems[i].msa;
    auto p = ds.records_of(msa.id)[c.run]->params.to_array();
    if (i > 0)
      for (std::size_t d = kNumLocal; d < kNumParams; ++d) p[d] = target_truth[d];
    obs.truth.push_back(
        make_record(msa, ds.msa_index(msa.id), c.run, EpiParams::from_array(p), ds.horizon).normalized);
  }
  obs.problems = std::move(pc.problems);
  return obs;
}

inline std::string posterior_csv(const std::vector<PosteriorSamples>& posts) {
  std::string out = "msa_id,rank";
  for (auto n : kParamNames) out += "," + std::string(n);
  out += ",gof\n";
  for (const auto& p : posts)
    for (std::size_t i = 0; i < p.size(); ++i) {
      out += p.msa_id + ',' + std::to_string(i);
      for (double v : p.sample(i)) out += ',' + io::fmt(v);
      out += ',' + io::fmt(i < p.gof.size() ? p.gof[i] : 0.0) + '\n';
    }
  return out;
}

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::string out = "step,total,data,kld,global\n";
  for (const auto& r : trace)
    out += std::to_string(r.step) + ',' + io::fmt(r.total) + ',' + io::fmt(r.data) + ',' +
           io::fmt(r.kld) + ',' + io::fmt(r.global) + '\n';
  return out;
}

/// Histogram of each parameter's top-k posterior values over its box range.
inline std::string marginals_csv(const std::vector<PosteriorSamples>& posts, const ParameterBox& box,
                                 std::size_t top_k, std::size_t bins) {
  std::string out = "msa_id,param,bin,low,high,count\n";
  for (const auto& p : posts) {
    const auto n = std::min(top_k, p.size());
    for (std::size_t d = 0; d < kNumParams; ++d) {
      std::vector<std::size_t> counts(bins, 0);
      const double w = box.width(d) / static_cast<double>(bins);
      for (std::size_t i = 0; i < n; ++i) {
        const double v = p.samples(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d));
        auto b = static_cast<std::size_t>(std::floor((v - box.low[d]) / w));
        ++counts[std::min(b, bins - 1)];
      }
      for (std::size_t b = 0; b < bins; ++b)
        out += p.msa_id + ',' + std::string(kParamNames[d]) + ',' + std::to_string(b) + ',' +
               io::fmt(box.low[d] + w * static_cast<double>(b)) + ',' +
               io::fmt(box.low[d] + w * static_cast<double>(b + 1)) + ',' + std::to_string(counts[b]) + '\n';
    }
  }
  return out;
}

/// Long-form curves for overlay plots: observed prefix, truth when known, and the
/// oracle curve of every top-k sample (all cumulative, population-normalized).
inline std::string overlay_csv(const std::vector<PosteriorSamples>& posts, const Observation& obs,
                               const EnsembleDataset& ds, std::size_t top_k) {
  std::string out = "msa_id,series,day,value\n";
  for (std::size_t j = 0; j < posts.size(); ++j) {
    const auto& prob = obs.problems[j];
    const auto& id = prob.msa.id;
    for (Eigen::Index t = 0; t < prob.y_obs.size(); ++t)
      out += id + ",observed," + std::to_string(t) + ',' + io::fmt(prob.y_obs(t)) + '\n';
    for (std::size_t t = 0; t < obs.truth[j].size(); ++t)
      out += id + ",truth," + std::to_string(t) + ',' + io::fmt(obs.truth[j][t]) + '\n';
    const auto evals = oracle_reevaluate(posts[j], prob.msa, ds.horizon, std::min(top_k, posts[j].size()));
    for (std::size_t i = 0; i < evals.size(); ++i) {
      const auto cum = cumulative_of(evals[i].daily);
      for (std::size_t t = 0; t < cum.size(); ++t)
        out += id + ",sample_" + std::to_string(i) + ',' + std::to_string(t) + ',' +
               io::fmt(cum[t] / prob.msa.population) + '\n';
    }
  }
  return out;
}

/// Posterior samples for every problem under one method.
inline CalibrationRun calibrate_method(Method method, const Observation& obs, const Artifacts& a,
                                       const MvnModel& prior, const CalibrateSection& c) {
  CalibrationRun run;
  switch (method) {
    case Method::Naive:
      for (const auto& p : obs.problems)
        run.posteriors.push_back(naive_posterior(a.model, a.basis, prior, p, a.ds.box, c.optimizer, c.top_k));
      return run;
    case Method::Truth:
      for (std::size_t j = 0; j < obs.problems.size(); ++j) {
        PosteriorSamples p;
        p.msa_id = obs.problems[j].msa.id;
        p.method = Method::Truth;
        auto x = a.ds.records_of(p.msa_id)[c.run]->params.to_array();
        if (j > 0)
          for (std::size_t d = kNumLocal; d < kNumParams; ++d) x[d] = obs.truth_params->to_array()[d];
        p.samples.resize(static_cast<Eigen::Index>(c.top_k), kNumParams);
        for (Eigen::Index i = 0; i < p.samples.rows(); ++i)
          for (std::size_t d = 0; d < kNumParams; ++d) p.samples(i, static_cast<Eigen::Index>(d)) = x[d];
        p.gof.assign(c.top_k, 0.0);
        run.posteriors.push_back(std::move(p));
      }
      return run;
    case Method::Opt:
    case Method::OptKld:
      // Regions are independent without the consistency term.
      for (const auto& p : obs.problems) {
        auto r = optimize_posterior({p}, a.model, a.basis, prior, a.ds.box, c.optimizer, flags_for(method));
        if (run.trace.empty()) run.trace = r.trace;
        run.posteriors.push_back(std::move(r.posteriors.front()));
      }
      return run;
    case Method::OptGlobal:
      return optimize_posterior(obs.problems, a.model, a.basis, prior, a.ds.box, c.optimizer, flags_for(method));
  }
  throw ArgumentError("unknown method");
}

inline void cmd_calibrate(const PipelineConfig& cfg) {
  const auto a = load_artifacts(cfg);
  const auto& c = cfg.calibrate;
  auto inputs = a.checksums;
  if (!c.observed.empty()) {
    const auto p = c.observed.is_absolute() ? c.observed : cfg.base_dir / c.observed;
    inputs["observed:" + p.filename().string()] = io::file_checksum(p);
  }
  const auto prior = fit_prior(a.ds, c.optimizer.jitter);
  const auto obs = observation_for(cfg, a.ds);
  const auto root = cfg.at(cfg.paths.posteriors);
  fs::remove_all(root);
  for (auto method : c.methods) {
    const auto run = calibrate_method(method, obs, a, prior, c);
    for (auto& p : run.posteriors)
      if (!p.samples.allFinite()) throw NumericError("calibration produced non-finite samples");
    const auto dir = root / std::string(to_string(method));
    io::write_file(dir / "posterior.csv", posterior_csv(run.posteriors));
    io::write_file(dir / "trace.csv", trace_csv(run.trace));
    io::write_file(dir / "marginals.csv", marginals_csv(run.posteriors, a.ds.box, c.top_k, c.histogram_bins));
    io::write_file(dir / "overlay.csv", overlay_csv(run.posteriors, obs, a.ds, c.top_k));
  }
  write_manifest(cfg, {"calibrate", c.optimizer.seed, cfg.source.value("calibrate", json::object()),
                       inputs, checksums(cfg, root)});
}

inline EvalReport cmd_eval(const PipelineConfig& cfg) {
  const auto a = load_artifacts(cfg);
  BenchmarkConfig b;
  b.methods = cfg.eval.methods;
  b.t_obs_list = cfg.eval.t_obs_list;
  b.n_test_curves = cfg.eval.n_test_curves;
  b.target_msa = cfg.eval.target_msa;
  b.partner_msas = cfg.eval.partner_msas;
  b.top_k = cfg.eval.top_k;
  b.jobs = cfg.jobs;
  b.optimizer = cfg.calibrate.optimizer;
  b.optimizer.top_k = cfg.eval.top_k;
  const auto prior = fit_prior(a.ds, b.optimizer.jitter);
  auto report = run_benchmark(a.ds, a.model, a.basis, prior, b);
  const auto dir = cfg.at(cfg.paths.reports);
  fs::remove_all(dir);
  write_report(report, dir);
  json eval_cfg = cfg.source.value("eval", json::object());
  eval_cfg["optimizer"] = cfg.source.value("calibrate", json::object()).value("optimizer", json::object());
  write_manifest(cfg, {"eval", b.optimizer.seed, eval_cfg, a.checksums, checksums(cfg, dir)});
  return report;
}

inline void cmd_all(const PipelineConfig& cfg) {
  cmd_ensemble(cfg);
  cmd_pca(cfg);
  cmd_train(cfg);
  cmd_calibrate(cfg);
  cmd_eval(cfg);
}

}  // namespace epical::pipeline
