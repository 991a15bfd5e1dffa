#pragma once

// Parameter sampling, ensemble generation and the reversible curve transforms
// (daily -> cumulative -> population-normalized).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "epical/error.hpp"
#include "epical/io.hpp"
#include "epical/rng.hpp"
#include "epical/simcore.hpp"

namespace epical {

/// Latin-hypercube sample: for each parameter, the n values fall in n distinct
/// equal-width strata of the box.
inline std::vector<EpiParams> sample_parameters(std::size_t n, const ParameterBox& box,
                                                std::uint64_t seed) {
  if (n < 1) throw ArgumentError("sample_parameters: n must be >= 1");
  box.validate();
  Rng rng(seed);
  std::vector<ParamVector> points(n);
  std::vector<std::size_t> strata(n);
  for (std::size_t d = 0; d < kNumParams; ++d) {
    std::iota(strata.begin(), strata.end(), std::size_t{0});
    rng.shuffle(strata.begin(), strata.end());
    for (std::size_t i = 0; i < n; ++i) {
      const double u = (static_cast<double>(strata[i]) + rng.uniform()) / static_cast<double>(n);
      points[i][d] = box.clamp(d, box.low[d] + u * box.width(d));
    }
  }
  std::vector<EpiParams> out;
  out.reserve(n);
  for (const auto& p : points) out.push_back(EpiParams::from_array(p));
  return out;
}

inline EpidemicCurve to_cumulative(const EpidemicCurve& daily) {
  if (daily.kind != CurveKind::DailyNew)
    throw ArgumentError("to_cumulative expects a DAILY_NEW curve, got " +
                        std::string(to_string(daily.kind)));
  EpidemicCurve out{daily.msa_id, daily.values, CurveKind::Cumulative};
  std::partial_sum(daily.values.begin(), daily.values.end(), out.values.begin());
  return out;
}

/// Inverse of to_cumulative (first differences).
inline EpidemicCurve to_daily(const EpidemicCurve& cumulative) {
  if (cumulative.kind != CurveKind::Cumulative)
    throw ArgumentError("to_daily expects a CUMULATIVE curve, got " +
                        std::string(to_string(cumulative.kind)));
  EpidemicCurve out{cumulative.msa_id, cumulative.values, CurveKind::DailyNew};
  std::adjacent_difference(cumulative.values.begin(), cumulative.values.end(),
                           out.values.begin());
  return out;
}

inline EpidemicCurve normalize_by_population(const EpidemicCurve& cumulative, double population) {
  if (cumulative.kind != CurveKind::Cumulative)
    throw ArgumentError("normalize_by_population expects a CUMULATIVE curve");
  if (!(population >= 1.0)) throw DomainError("population must be >= 1");
  EpidemicCurve out{cumulative.msa_id, cumulative.values, CurveKind::CumulativeNormalized};
  for (std::size_t t = 0; t < out.values.size(); ++t) {
    if (cumulative.values[t] > population)
      throw DomainError("curve '" + cumulative.msa_id + "' exceeds population at day " +
                        std::to_string(t));
    out.values[t] /= population;
  }
  return out;
}

inline EpidemicCurve denormalize(const EpidemicCurve& normalized, double population) {
  if (normalized.kind != CurveKind::CumulativeNormalized)
    throw ArgumentError("denormalize expects a CUMULATIVE_NORMALIZED curve");
  if (!(population >= 1.0)) throw DomainError("population must be >= 1");
  EpidemicCurve out{normalized.msa_id, normalized.values, CurveKind::Cumulative};
  for (auto& v : out.values) v *= population;
  return out;
}

enum class Split { Train, Test };

inline std::string_view to_string(Split s) { return s == Split::Train ? "TRAIN" : "TEST"; }

struct EnsembleRecord {
  std::string msa_id;
  std::size_t msa_index = 0;
  std::size_t run = 0;
  EpiParams params;
  std::vector<double> raw;         ///< daily new infections, persons
  std::vector<double> normalized;  ///< cumulative, fraction of population
};

struct EnsembleDataset {
  std::uint64_t seed = 0;
  int horizon = 28;
  std::size_t runs_per_msa = 0;
  ParameterBox box;
  std::vector<MsaProfile> msas;
  std::vector<Split> splits;  ///< parallel to msas
  std::vector<EnsembleRecord> records;

  const MsaProfile& msa(const std::string& id) const {
    for (const auto& m : msas)
      if (m.id == id) return m;
    throw ValidationError("dataset has no MSA '" + id + "'");
  }

  std::size_t msa_index(const std::string& id) const {
    for (std::size_t i = 0; i < msas.size(); ++i)
      if (msas[i].id == id) return i;
    throw ValidationError("dataset has no MSA '" + id + "'");
  }

  Split split_of(const std::string& id) const { return splits[msa_index(id)]; }

  std::vector<const EnsembleRecord*> records_in(Split s) const {
    std::vector<const EnsembleRecord*> out;
    for (const auto& r : records)
      if (splits[r.msa_index] == s) out.push_back(&r);
    return out;
  }

  std::vector<const EnsembleRecord*> records_of(const std::string& id) const {
    std::vector<const EnsembleRecord*> out;
    for (const auto& r : records)
      if (r.msa_id == id) out.push_back(&r);
    return out;
  }
};

/// Seed of the Latin hypercube drawn for one MSA; run r of that MSA is row r.
inline std::uint64_t msa_sample_seed(std::uint64_t seed, std::size_t msa_index) {
  return derive_seed(seed, 0x5eed, msa_index);
}

inline EnsembleRecord make_record(const MsaProfile& msa, std::size_t msa_index, std::size_t run,
                                  const EpiParams& params, int horizon) {
  EnsembleRecord rec;
  rec.msa_id = msa.id;
  rec.msa_index = msa_index;
  rec.run = run;
  rec.params = params;
  try {
    const auto daily = simulate(params, msa, horizon);
    rec.raw = daily.values;
    rec.normalized = normalize_by_population(to_cumulative(daily), msa.population).values;
  } catch (const std::exception& e) {
    throw DomainError("simulation failed for msa '" + msa.id + "' run " + std::to_string(run) +
                      ": " + e.what());
  }
  return rec;
}

/// Runs every MSA at runs_per_msa Latin-hypercube points. The first
/// n_train_msas MSAs are tagged TRAIN, the rest TEST.
inline EnsembleDataset generate_ensemble(const std::vector<MsaProfile>& msas,
                                         std::size_t runs_per_msa, const ParameterBox& box,
                                         int horizon, std::uint64_t seed,
                                         std::size_t n_train_msas) {
  if (msas.empty()) throw ArgumentError("generate_ensemble: no MSAs");
  if (runs_per_msa < 1) throw ArgumentError("generate_ensemble: runs_per_msa must be >= 1");
  if (horizon < 1) throw ArgumentError("generate_ensemble: horizon must be >= 1");
  if (n_train_msas > msas.size())
    throw ArgumentError("generate_ensemble: more TRAIN MSAs than MSAs");
  for (std::size_t a = 0; a < msas.size(); ++a)
    for (std::size_t b = a + 1; b < msas.size(); ++b)
      if (msas[a].id == msas[b].id)
        throw ArgumentError("generate_ensemble: duplicate MSA id '" + msas[a].id + "'");
  box.validate();

  EnsembleDataset ds;
  ds.seed = seed;
  ds.horizon = horizon;
  ds.runs_per_msa = runs_per_msa;
  ds.box = box;
  ds.msas = msas;
  for (std::size_t m = 0; m < msas.size(); ++m)
    ds.splits.push_back(m < n_train_msas ? Split::Train : Split::Test);

  ds.records.reserve(msas.size() * runs_per_msa);
  for (std::size_t m = 0; m < msas.size(); ++m) {
    msas[m].validate();
    const auto points = sample_parameters(runs_per_msa, box, msa_sample_seed(seed, m));
    for (std::size_t r = 0; r < runs_per_msa; ++r)
      ds.records.push_back(make_record(msas[m], m, r, points[r], horizon));
  }
  return ds;
}

inline nlohmann::json box_to_json(const ParameterBox& box) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < kNumParams; ++i)
    j[std::string(kParamNames[i])] = {box.low[i], box.high[i]};
  return j;
}

inline ParameterBox box_from_json(const nlohmann::json& j) {
  ParameterBox box;
  for (std::size_t i = 0; i < kNumParams; ++i) {
    const auto& pair = j.at(std::string(kParamNames[i]));
    if (!pair.is_array() || pair.size() != 2)
      throw ValidationError("box entry '" + std::string(kParamNames[i]) +
                            "' must be [low, high]");
    box.low[i] = pair[0].get<double>();
    box.high[i] = pair[1].get<double>();
  }
  box.validate();
  return box;
}

/// Writes meta.json, params.csv and curves.csv into dir.
inline void write_dataset(const EnsembleDataset& ds, const std::filesystem::path& dir) {
  nlohmann::json meta;
  meta["seed"] = ds.seed;
  meta["horizon"] = ds.horizon;
  meta["runs_per_msa"] = ds.runs_per_msa;
  meta["box"] = box_to_json(ds.box);
  meta["simulator"] = SimConstants::to_json();
  meta["msas"] = nlohmann::json::array();
  for (std::size_t m = 0; m < ds.msas.size(); ++m) {
    auto j = msa_to_json(ds.msas[m]);
    j["split"] = std::string(to_string(ds.splits[m]));
    meta["msas"].push_back(j);
  }
  io::write_file(dir / "meta.json", meta.dump(2) + "\n");

  std::string params = "msa_id,run";
  for (auto name : kParamNames) params += "," + std::string(name);
  params += '\n';
  std::string curves = "msa_id,run,day,raw,normalized\n";
  for (const auto& r : ds.records) {
    params += r.msa_id + ',' + std::to_string(r.run);
    for (double v : r.params.to_array()) params += ',' + io::fmt(v);
    params += '\n';
    for (std::size_t t = 0; t < r.raw.size(); ++t)
      curves += r.msa_id + ',' + std::to_string(r.run) + ',' + std::to_string(t) + ',' +
                io::fmt(r.raw[t]) + ',' + io::fmt(r.normalized[t]) + '\n';
  }
  io::write_file(dir / "params.csv", params);
  io::write_file(dir / "curves.csv", curves);
}

inline EnsembleDataset read_dataset(const std::filesystem::path& dir) {
  EnsembleDataset ds;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_file(dir / "meta.json"));
    ds.seed = meta.at("seed").get<std::uint64_t>();
    ds.horizon = meta.at("horizon").get<int>();
    ds.runs_per_msa = meta.at("runs_per_msa").get<std::size_t>();
    ds.box = box_from_json(meta.at("box"));
    for (const auto& j : meta.at("msas")) {
      ds.msas.push_back(msa_from_json(j));
      const auto tag = j.at("split").get<std::string>();
      if (tag != "TRAIN" && tag != "TEST") throw ValidationError("bad split tag '" + tag + "'");
      ds.splits.push_back(tag == "TRAIN" ? Split::Train : Split::Test);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("dataset meta '" + (dir / "meta.json").string() + "': " + e.what());
  }

  std::map<std::pair<std::string, std::size_t>, std::size_t> index;
  const auto params_text = io::read_file(dir / "params.csv");
  const auto param_lines = io::lines(params_text);
  for (std::size_t i = 1; i < param_lines.size(); ++i) {
    const auto cols = io::split(param_lines[i]);
    if (cols.size() != 2 + kNumParams)
      throw ValidationError("params.csv line " + std::to_string(i + 1) + ": wrong column count");
    EnsembleRecord rec;
    rec.msa_id = std::string(cols[0]);
    rec.msa_index = ds.msa_index(rec.msa_id);
    rec.run = static_cast<std::size_t>(io::parse_int(cols[1]));
    ParamVector v{};
    for (std::size_t d = 0; d < kNumParams; ++d) v[d] = io::parse_double(cols[2 + d]);
    rec.params = EpiParams::from_array(v);
    rec.raw.assign(static_cast<std::size_t>(ds.horizon), 0.0);
    rec.normalized.assign(static_cast<std::size_t>(ds.horizon), 0.0);
    index[{rec.msa_id, rec.run}] = ds.records.size();
    ds.records.push_back(std::move(rec));
  }

  const auto curves_text = io::read_file(dir / "curves.csv");
  const auto curve_lines = io::lines(curves_text);
  for (std::size_t i = 1; i < curve_lines.size(); ++i) {
    const auto cols = io::split(curve_lines[i]);
    if (cols.size() != 5)
      throw ValidationError("curves.csv line " + std::to_string(i + 1) + ": wrong column count");
    const auto it = index.find({std::string(cols[0]), static_cast<std::size_t>(io::parse_int(cols[1]))});
    if (it == index.end())
      throw ValidationError("curves.csv line " + std::to_string(i + 1) + ": unknown record");
    const auto day = static_cast<std::size_t>(io::parse_int(cols[2]));
    if (day >= static_cast<std::size_t>(ds.horizon))
      throw ValidationError("curves.csv line " + std::to_string(i + 1) + ": day out of range");
    auto& rec = ds.records[it->second];
    rec.raw[day] = io::parse_double(cols[3]);
    rec.normalized[day] = io::parse_double(cols[4]);
  }
  return ds;
}

}  // namespace epical
