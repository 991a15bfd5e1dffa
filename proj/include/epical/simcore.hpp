#pragma once

// Deterministic SEIR stand-in simulator with asymptomatic and symptomatic
// infectious compartments. Two half-day steps per day; the daily output is
// the number of new entries into I_s + I_a.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "epical/error.hpp"
#include "epical/io.hpp"

namespace epical {

inline constexpr std::size_t kNumParams = 6;
inline constexpr std::size_t kNumLocal = 3;

/// Parameter order is fixed: indices 0-2 are local, 3-5 global.
inline constexpr std::array<std::string_view, kNumParams> kParamNames = {
    "infected", "removed", "compliance", "trans_prob", "prop_asym", "rel_inf"};

inline constexpr std::size_t kInfected = 0;
inline constexpr std::size_t kRemoved = 1;
inline constexpr std::size_t kCompliance = 2;
inline constexpr std::size_t kTransProb = 3;
inline constexpr std::size_t kPropAsym = 4;
inline constexpr std::size_t kRelInf = 5;

using ParamVector = std::array<double, kNumParams>;

struct EpiParams {
  double infected = 0.0;    ///< seed-scaling factor applied to reported initial cases
  double removed = 0.0;     ///< fraction of the population already removed
  double compliance = 0.0;  ///< fraction complying with distancing guidelines
  double trans_prob = 0.0;  ///< per-contact transmission probability
  double prop_asym = 0.0;   ///< fraction of infections that are asymptomatic
  double rel_inf = 0.0;     ///< relative infectiousness of asymptomatic cases

  ParamVector to_array() const {
    return {infected, removed, compliance, trans_prob, prop_asym, rel_inf};
  }

  static EpiParams from_array(std::span<const double> v) {
    if (v.size() != kNumParams)
      throw ArgumentError("EpiParams needs 6 values, got " + std::to_string(v.size()));
    return {v[0], v[1], v[2], v[3], v[4], v[5]};
  }

  double operator[](std::size_t i) const { return to_array()[i]; }

  bool operator==(const EpiParams&) const = default;
};

struct ParameterBox {
  ParamVector low{};
  ParamVector high{};

  /// Physical validity range accepted by the simulator.
  static ParameterBox simulator_default() {
    return {{0.01, 0.0, 0.01, 0.01, 0.01, 0.1}, {1.0, 1.0, 1.0, 1.0, 1.0, 1.0}};
  }

  /// Exploration range used for ensembles and calibration.
  static ParameterBox ensemble_default() {
    return {{0.1, 0.0, 0.1, 0.05, 0.2, 0.2}, {1.0, 0.3, 0.9, 0.6, 0.6, 1.0}};
  }

  /// Accepts everything finite; for tests that switch a parameter off.
  static ParameterBox unbounded() {
    ParameterBox b;
    b.low.fill(-1e300);
    b.high.fill(1e300);
    return b;
  }

  void validate() const {
    for (std::size_t i = 0; i < kNumParams; ++i) {
      if (!std::isfinite(low[i]) || !std::isfinite(high[i]) || !(low[i] < high[i]))
        throw ArgumentError("degenerate parameter box for '" + std::string(kParamNames[i]) +
                            "': [" + io::fmt(low[i]) + ", " + io::fmt(high[i]) + "]");
    }
  }

  double width(std::size_t i) const { return high[i] - low[i]; }

  bool contains(const ParamVector& v) const {
    for (std::size_t i = 0; i < kNumParams; ++i)
      if (!(v[i] >= low[i] && v[i] <= high[i])) return false;
    return true;
  }

  double clamp(std::size_t i, double v) const { return std::clamp(v, low[i], high[i]); }

  /// Throws DomainError naming the first offending field.
  void check(const EpiParams& p) const {
    const auto v = p.to_array();
    for (std::size_t i = 0; i < kNumParams; ++i) {
      if (!std::isfinite(v[i]))
        throw DomainError("parameter '" + std::string(kParamNames[i]) + "' is not finite");
      if (v[i] < low[i] || v[i] > high[i])
        throw DomainError("parameter '" + std::string(kParamNames[i]) + "' = " + io::fmt(v[i]) +
                          " outside [" + io::fmt(low[i]) + ", " + io::fmt(high[i]) + "]");
    }
  }

  bool operator==(const ParameterBox&) const = default;
};

struct MsaProfile {
  std::string id;
  double population = 0.0;
  double initial_cases = 0.0;
  double contact_scale = 1.0;
  double underreport_factor = 3.0;

  void validate() const {
    if (!(population >= 1000.0) || !std::isfinite(population))
      throw DomainError("MSA '" + id + "': population must be >= 1000");
    if (!(initial_cases >= 0.0) || initial_cases > population)
      throw DomainError("MSA '" + id + "': initial_cases must lie in [0, population]");
    if (!(contact_scale > 0.0) || !std::isfinite(contact_scale))
      throw DomainError("MSA '" + id + "': contact_scale must be positive");
    if (!(underreport_factor > 0.0) || !std::isfinite(underreport_factor))
      throw DomainError("MSA '" + id + "': underreport_factor must be positive");
  }

  bool operator==(const MsaProfile&) const = default;
};

enum class CurveKind { DailyNew, Cumulative, CumulativeNormalized };

inline std::string_view to_string(CurveKind k) {
  switch (k) {
    case CurveKind::DailyNew: return "DAILY_NEW";
    case CurveKind::Cumulative: return "CUMULATIVE";
    case CurveKind::CumulativeNormalized: return "CUMULATIVE_NORMALIZED";
  }
  return "?";
}

struct EpidemicCurve {
  std::string msa_id;
  std::vector<double> values;
  CurveKind kind = CurveKind::DailyNew;

  std::size_t size() const { return values.size(); }

  void validate() const {
    for (std::size_t t = 0; t < values.size(); ++t) {
      const double v = values[t];
      if (!std::isfinite(v) || v < 0.0)
        throw DomainError("curve '" + msa_id + "' day " + std::to_string(t) +
                          " is negative or non-finite");
      if (kind != CurveKind::DailyNew && t > 0 && v < values[t - 1])
        throw DomainError("cumulative curve '" + msa_id + "' decreases at day " +
                          std::to_string(t));
      if (kind == CurveKind::CumulativeNormalized && v > 1.0)
        throw DomainError("normalized curve '" + msa_id + "' exceeds 1 at day " +
                          std::to_string(t));
    }
  }
};

/// Fixed dynamics constants; reported in dataset metadata.
struct SimConstants {
  static constexpr double kLatentDays = 3.0;
  static constexpr double kInfectiousDays = 5.0;
  static constexpr int kStepsPerDay = 2;
  static constexpr double kStep = 1.0 / kStepsPerDay;
  static constexpr double kMaxComplianceReduction = 0.5;

  static nlohmann::json to_json() {
    return {{"latent_days", kLatentDays},
            {"infectious_days", kInfectiousDays},
            {"steps_per_day", kStepsPerDay},
            {"max_compliance_reduction", kMaxComplianceReduction}};
  }
};

struct SimState {
  double susceptible = 0.0;
  double exposed = 0.0;
  double infectious_sym = 0.0;
  double infectious_asym = 0.0;
  double removed = 0.0;

  double total() const {
    return susceptible + exposed + infectious_sym + infectious_asym + removed;
  }
};

namespace detail {

template <class OnStep>
std::vector<double> run_seir(const EpiParams& p, const MsaProfile& msa, int horizon_days,
                             OnStep&& on_step) {
  const double n = msa.population;
  const double seeded = p.infected * msa.initial_cases * msa.underreport_factor;

  SimState s;
  s.infectious_asym = p.prop_asym * seeded;
  s.infectious_sym = (1.0 - p.prop_asym) * seeded;
  s.removed = p.removed * n;
  s.susceptible = std::max(0.0, n - seeded - s.removed);
  on_step(s);

  const double beta = p.trans_prob * msa.contact_scale *
                      (1.0 - SimConstants::kMaxComplianceReduction * p.compliance);
  constexpr double dt = SimConstants::kStep;

  std::vector<double> daily(static_cast<std::size_t>(horizon_days), 0.0);
  for (auto& today : daily) {
    for (int h = 0; h < SimConstants::kStepsPerDay; ++h) {
      const double force = beta * (s.infectious_sym + p.rel_inf * s.infectious_asym) / n;
      const double exposures = std::min(force * s.susceptible * dt, s.susceptible);
      const double onsets = std::min(s.exposed / SimConstants::kLatentDays * dt, s.exposed);
      const double rec_sym =
          std::min(s.infectious_sym / SimConstants::kInfectiousDays * dt, s.infectious_sym);
      const double rec_asym =
          std::min(s.infectious_asym / SimConstants::kInfectiousDays * dt, s.infectious_asym);

      s.susceptible -= exposures;
      s.exposed += exposures - onsets;
      s.infectious_sym += (1.0 - p.prop_asym) * onsets - rec_sym;
      s.infectious_asym += p.prop_asym * onsets - rec_asym;
      s.removed += rec_sym + rec_asym;
      today += onsets;
      on_step(s);
    }
  }
  return daily;
}

inline void check_inputs(const EpiParams& params, const MsaProfile& msa, int horizon_days,
                         const ParameterBox& box) {
  if (horizon_days < 1)
    throw ArgumentError("horizon_days must be >= 1, got " + std::to_string(horizon_days));
  box.check(params);
  msa.validate();
}

}  // namespace detail

/// Expected daily new infections for one region. Pure and thread-safe.
inline EpidemicCurve simulate(const EpiParams& params, const MsaProfile& msa, int horizon_days,
                              const ParameterBox& box = ParameterBox::simulator_default()) {
  detail::check_inputs(params, msa, horizon_days, box);
  auto daily = detail::run_seir(params, msa, horizon_days, [](const SimState&) {});
  return {msa.id, std::move(daily), CurveKind::DailyNew};
}

/// Compartment states at t = 0 and after every half-step.
inline std::vector<SimState> simulate_states(
    const EpiParams& params, const MsaProfile& msa, int horizon_days,
    const ParameterBox& box = ParameterBox::simulator_default()) {
  detail::check_inputs(params, msa, horizon_days, box);
  std::vector<SimState> states;
  states.reserve(static_cast<std::size_t>(horizon_days * SimConstants::kStepsPerDay + 1));
  detail::run_seir(params, msa, horizon_days, [&](const SimState& s) { states.push_back(s); });
  return states;
}

inline MsaProfile msa_from_json(const nlohmann::json& j) {
  MsaProfile m;
  m.id = j.at("id").get<std::string>();
  m.population = j.at("population").get<double>();
  m.initial_cases = j.at("initial_cases").get<double>();
  m.contact_scale = j.at("contact_scale").get<double>();
  m.underreport_factor = j.value("underreport_factor", 3.0);
  m.validate();
  return m;
}

inline nlohmann::json msa_to_json(const MsaProfile& m) {
  return {{"id", m.id},
          {"population", m.population},
          {"initial_cases", m.initial_cases},
          {"contact_scale", m.contact_scale},
          {"underreport_factor", m.underreport_factor}};
}

/// Reads `{"msas": [ {id, population, initial_cases, contact_scale, underreport_factor}, ... ]}`.
inline std::vector<MsaProfile> load_msa_profiles(const std::filesystem::path& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(io::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("MSA file '" + path.string() + "': " + e.what());
  }
  std::vector<MsaProfile> out;
  try {
    for (const auto& rec : doc.at("msas")) out.push_back(msa_from_json(rec));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("MSA file '" + path.string() + "': " + e.what());
  }
  if (out.empty()) throw ValidationError("MSA file '" + path.string() + "' lists no MSAs");
  return out;
}

/// CSV with header `msa_id,day,value,kind`.
inline std::string curves_to_csv(std::span<const EpidemicCurve> curves) {
  std::string out = "msa_id,day,value,kind\n";
  for (const auto& c : curves)
    for (std::size_t t = 0; t < c.values.size(); ++t)
      out += c.msa_id + ',' + std::to_string(t) + ',' + io::fmt(c.values[t]) + ',' +
             std::string(to_string(c.kind)) + '\n';
  return out;
}

}  // namespace epical
