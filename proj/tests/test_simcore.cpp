#include <gtest/gtest.h>

#include <thread>

#include "epical/io.hpp"
#include "epical/simcore.hpp"
#include "support.hpp"

using namespace epical;
using epical::testing::fixture_msa;

namespace {

const EpiParams kFixture{0.5, 0.1, 0.5, 0.3, 0.4, 0.5};

}  // namespace

// Golden values come from tests/oracle/seir_reference.py, an independent
// implementation of the same recurrence.
TEST(Simulate, MatchesReferenceImplementation) {
  const auto text = io::read_file(epical::testing::source_path("tests/data/simulate_golden.csv"));
  const auto rows = io::lines(text);
  ASSERT_EQ(rows.front(), "day,value");
  const auto curve = simulate(kFixture, fixture_msa(), 28);
  ASSERT_EQ(rows.size() - 1, curve.size());
  for (std::size_t t = 0; t < curve.size(); ++t) {
    const auto cols = io::split(rows[t + 1]);
    EXPECT_EQ(io::parse_int(cols[0]), static_cast<long long>(t));
    EXPECT_NEAR(curve.values[t], io::parse_double(cols[1]), 1e-9 * (1.0 + curve.values[t]));
  }
}

TEST(Simulate, BitIdenticalAcrossCallsAndThreads) {
  const auto a = simulate(kFixture, fixture_msa(), 28);
  std::vector<double> other;
  std::thread th([&] { other = simulate(kFixture, fixture_msa(), 28).values; });
  th.join();
  EXPECT_EQ(a.values, other);
  EXPECT_EQ(a.values, simulate(kFixture, fixture_msa(), 28).values);
  EXPECT_EQ(a.kind, CurveKind::DailyNew);
  EXPECT_EQ(a.msa_id, "FIX");
}

TEST(Simulate, ValuesWithinPopulationAndCompartmentsConserved) {
  Rng rng(3);
  const auto box = ParameterBox::simulator_default();
  for (int trial = 0; trial < 200; ++trial) {
    ParamVector v{};
    for (std::size_t i = 0; i < kNumParams; ++i) v[i] = rng.uniform(box.low[i], box.high[i]);
    const auto& msa = epical::testing::test_msas()[static_cast<std::size_t>(trial) % 15];
    const auto p = EpiParams::from_array(v);
    const auto curve = simulate(p, msa, 40);
    double total = 0.0;
    for (double x : curve.values) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, msa.population);
      total += x;
    }
    EXPECT_LE(total, msa.population);
    for (const auto& s : simulate_states(p, msa, 40)) {
      EXPECT_GE(s.susceptible, 0.0);
      EXPECT_GE(s.exposed, 0.0);
      EXPECT_GE(s.infectious_sym, 0.0);
      EXPECT_GE(s.infectious_asym, 0.0);
      EXPECT_NEAR(s.total(), std::max(msa.population, p.infected * msa.initial_cases *
                                                           msa.underreport_factor +
                                                       p.removed * msa.population),
                  1e-6 * msa.population);
    }
  }
}

TEST(Simulate, NoSeedsMeansNoInfections) {
  auto msa = fixture_msa();
  msa.initial_cases = 0.0;
  for (double v : simulate(kFixture, msa, 10).values) EXPECT_EQ(v, 0.0);
}

TEST(Simulate, ParameterSemantics) {
  const auto msa = fixture_msa();
  auto total = [&](EpiParams p) {
    double s = 0.0;
    for (double v : simulate(p, msa, 28).values) s += v;
    return s;
  };
  auto more = kFixture;
  more.trans_prob = 0.5;
  EXPECT_GT(total(more), total(kFixture));
  more = kFixture;
  more.compliance = 0.9;
  EXPECT_LT(total(more), total(kFixture));
  more = kFixture;
  more.infected = 0.9;
  EXPECT_GT(total(more), total(kFixture));
  more = kFixture;
  more.removed = 0.5;
  EXPECT_LT(total(more), total(kFixture));
  more = kFixture;
  more.rel_inf = 1.0;
  EXPECT_GT(total(more), total(kFixture));
}

TEST(Simulate, OutOfBoxParameterNamesField) {
  auto p = kFixture;
  p.prop_asym = 1.5;
  try {
    simulate(p, fixture_msa(), 5);
    FAIL() << "expected DomainError";
  } catch (const DomainError& e) {
    EXPECT_NE(std::string(e.what()).find("prop_asym"), std::string::npos);
  }
  p = kFixture;
  p.trans_prob = std::nan("");
  EXPECT_THROW(simulate(p, fixture_msa(), 5), DomainError);
}

TEST(Simulate, NonpositiveHorizonIsArgumentError) {
  EXPECT_THROW(simulate(kFixture, fixture_msa(), 0), ArgumentError);
  EXPECT_THROW(simulate(kFixture, fixture_msa(), -3), ArgumentError);
}

TEST(MsaProfile, Invariants) {
  auto m = fixture_msa();
  EXPECT_NO_THROW(m.validate());
  m.population = 999;
  EXPECT_THROW(m.validate(), DomainError);
  m = fixture_msa();
  m.initial_cases = 2e6;
  EXPECT_THROW(m.validate(), DomainError);
  m = fixture_msa();
  m.contact_scale = 0.0;
  EXPECT_THROW(m.validate(), DomainError);
}

TEST(MsaProfile, JsonRoundTrip) {
  for (const auto& m : epical::testing::test_msas()) EXPECT_EQ(msa_from_json(msa_to_json(m)), m);
  EXPECT_THROW(load_msa_profiles("/nonexistent/msas.json"), ValidationError);
}

TEST(EpiParams, FixedOrdering) {
  const auto v = kFixture.to_array();
  EXPECT_EQ(v[kInfected], 0.5);
  EXPECT_EQ(v[kRemoved], 0.1);
  EXPECT_EQ(v[kCompliance], 0.5);
  EXPECT_EQ(v[kTransProb], 0.3);
  EXPECT_EQ(v[kPropAsym], 0.4);
  EXPECT_EQ(v[kRelInf], 0.5);
  EXPECT_EQ(EpiParams::from_array(v), kFixture);
  EXPECT_EQ(kParamNames[kTransProb], "trans_prob");
  EXPECT_THROW(EpiParams::from_array(std::vector<double>{1.0, 2.0}), ArgumentError);
}

TEST(EpidemicCurve, Validation) {
  EpidemicCurve c{"A", {0.0, 0.2, 0.1}, CurveKind::DailyNew};
  EXPECT_NO_THROW(c.validate());
  c.kind = CurveKind::Cumulative;
  EXPECT_THROW(c.validate(), DomainError);
  c = {"A", {0.0, 0.5, 1.5}, CurveKind::CumulativeNormalized};
  EXPECT_THROW(c.validate(), DomainError);
  c = {"A", {-1.0}, CurveKind::DailyNew};
  EXPECT_THROW(c.validate(), DomainError);
}

TEST(CurvesCsv, Header) {
  const auto c = simulate(kFixture, fixture_msa(), 2);
  const auto csv = curves_to_csv(std::span<const EpidemicCurve>(&c, 1));
  const auto rows = io::lines(csv);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], "msa_id,day,value,kind");
  EXPECT_EQ(rows[1].substr(0, 6), "FIX,0,");
  EXPECT_NE(rows[2].find("DAILY_NEW"), std::string::npos);
}
