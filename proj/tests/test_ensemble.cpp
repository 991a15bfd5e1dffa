#include <gtest/gtest.h>

#include <filesystem>

#include "epical/ensemble.hpp"
#include "support.hpp"

using namespace epical;

namespace {

ParameterBox unit_box() {
  ParameterBox b;
  b.low.fill(0.0);
  b.high.fill(1.0);
  return b;
}

}  // namespace

TEST(SampleParameters, SinglePointInsideBox) {
  const auto pts = sample_parameters(1, unit_box(), 7);
  ASSERT_EQ(pts.size(), 1u);
  EXPECT_TRUE(unit_box().contains(pts[0].to_array()));
}

TEST(SampleParameters, LatinHypercubeStrata) {
  for (const auto& box : {unit_box(), ParameterBox::ensemble_default()}) {
    const std::size_t n = 500;
    const auto pts = sample_parameters(n, box, 11);
    ASSERT_EQ(pts.size(), n);
    for (std::size_t d = 0; d < kNumParams; ++d) {
      std::vector<int> hist(n, 0);
      for (const auto& p : pts) {
        const double u = (p[d] - box.low[d]) / box.width(d);
        const auto s = std::min(n - 1, static_cast<std::size_t>(u * static_cast<double>(n)));
        ++hist[s];
      }
      for (int h : hist) ASSERT_EQ(h, 1) << "parameter " << d;
    }
    for (const auto& p : pts) EXPECT_TRUE(box.contains(p.to_array()));
  }
}

TEST(SampleParameters, Deterministic) {
  const auto a = sample_parameters(500, unit_box(), 42);
  EXPECT_EQ(a, sample_parameters(500, unit_box(), 42));
  EXPECT_NE(a, sample_parameters(500, unit_box(), 43));
}

TEST(SampleParameters, Errors) {
  auto box = unit_box();
  box.high[2] = box.low[2];
  EXPECT_THROW(sample_parameters(3, box, 1), ArgumentError);
  EXPECT_THROW(sample_parameters(0, unit_box(), 1), ArgumentError);
}

TEST(Transforms, RoundTrip) {
  const auto daily = simulate({0.5, 0.1, 0.5, 0.3, 0.4, 0.5}, epical::testing::fixture_msa(), 28);
  const auto cum = to_cumulative(daily);
  EXPECT_EQ(cum.kind, CurveKind::Cumulative);
  EXPECT_NO_THROW(cum.validate());
  const auto norm = normalize_by_population(cum, 1e6);
  EXPECT_EQ(norm.kind, CurveKind::CumulativeNormalized);
  EXPECT_NO_THROW(norm.validate());
  const auto back = to_daily(denormalize(norm, 1e6));
  ASSERT_EQ(back.size(), daily.size());
  for (std::size_t t = 0; t < daily.size(); ++t) EXPECT_NEAR(back.values[t], daily.values[t], 1e-6);
}

TEST(Transforms, KindErrors) {
  EpidemicCurve c{"X", {1.0, 2.0}, CurveKind::Cumulative};
  EXPECT_THROW(to_cumulative(c), ArgumentError);
  EXPECT_THROW(normalize_by_population(c, 0.0), DomainError);
}

TEST(GenerateEnsemble, ShapeSplitsAndInvariants) {
  const auto& msas = epical::testing::test_msas();
  const auto ds = generate_ensemble(msas, 12, ParameterBox::ensemble_default(), 28, 5, 10);
  EXPECT_EQ(ds.records.size(), 15u * 12u);
  EXPECT_EQ(ds.records_in(Split::Train).size(), 10u * 12u);
  EXPECT_EQ(ds.records_in(Split::Test).size(), 5u * 12u);
  EXPECT_EQ(ds.split_of("MSA010"), Split::Train);
  EXPECT_EQ(ds.split_of("MSA011"), Split::Test);
  for (const auto& r : ds.records) {
    ASSERT_EQ(r.normalized.size(), 28u);
    EpidemicCurve{r.msa_id, r.normalized, CurveKind::CumulativeNormalized}.validate();
    const auto sim = simulate(r.params, ds.msa(r.msa_id), 28);
    EXPECT_EQ(sim.values, r.raw);
  }
}

TEST(GenerateEnsemble, RunsAreRowsOfPerMsaHypercube) {
  const auto& msas = epical::testing::test_msas();
  const auto box = ParameterBox::ensemble_default();
  const auto ds = generate_ensemble(msas, 9, box, 28, 77, 10);
  const auto pts = sample_parameters(9, box, msa_sample_seed(77, 3));
  const auto recs = ds.records_of(msas[3].id);
  for (std::size_t r = 0; r < 9; ++r) EXPECT_EQ(recs[r]->params, pts[r]);
}

TEST(GenerateEnsemble, Errors) {
  const auto& msas = epical::testing::test_msas();
  EXPECT_THROW(generate_ensemble(msas, 0, ParameterBox::ensemble_default(), 28, 1, 10), ArgumentError);
  EXPECT_THROW(generate_ensemble(msas, 3, ParameterBox::ensemble_default(), 0, 1, 10), ArgumentError);
  EXPECT_THROW(generate_ensemble(msas, 3, ParameterBox::ensemble_default(), 28, 1, 16), ArgumentError);
  auto dup = msas;
  dup[1].id = dup[0].id;
  EXPECT_THROW(generate_ensemble(dup, 3, ParameterBox::ensemble_default(), 28, 1, 10), ArgumentError);
}

TEST(Dataset, WriteReadRoundTrip) {
  const auto ds = generate_ensemble(epical::testing::test_msas(), 4, ParameterBox::ensemble_default(),
                                    28, 8, 10);
  const auto dir = std::filesystem::temp_directory_path() / "epical_test_dataset";
  std::filesystem::remove_all(dir);
  write_dataset(ds, dir);
  const auto back = read_dataset(dir);
  EXPECT_EQ(back.seed, ds.seed);
  EXPECT_EQ(back.horizon, ds.horizon);
  EXPECT_EQ(back.box, ds.box);
  EXPECT_EQ(back.msas, ds.msas);
  EXPECT_EQ(back.splits, ds.splits);
  ASSERT_EQ(back.records.size(), ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    EXPECT_EQ(back.records[i].params, ds.records[i].params);
    EXPECT_EQ(back.records[i].raw, ds.records[i].raw);
    EXPECT_EQ(back.records[i].normalized, ds.records[i].normalized);
  }
  std::filesystem::remove_all(dir);
  EXPECT_THROW(read_dataset(dir), ValidationError);
}
