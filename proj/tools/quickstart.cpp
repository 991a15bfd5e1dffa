// Minimal in-memory walk through the library: simulate, build a small
// ensemble, compress, train a surrogate and calibrate one planted curve.
//
//   quickstart [path/to/msas.json]

#include <cstdio>
#include <string>

#include "epical/eval.hpp"

using namespace epical;

int main(int argc, char** argv) {
  const std::string msa_file = argc > 1 ? argv[1] : "configs/msas.json";
  const auto msas = load_msa_profiles(msa_file);

  EpiParams x{0.5, 0.1, 0.5, 0.3, 0.4, 0.5};
  const auto daily = simulate(x, msas.front(), 28);
  std::printf("%s day 0..4 new infections: %.1f %.1f %.1f %.1f %.1f\n", msas.front().id.c_str(),
              daily.values[0], daily.values[1], daily.values[2], daily.values[3], daily.values[4]);

  const auto ds = generate_ensemble(msas, 60, ParameterBox::ensemble_default(), 28, 7, 10);
  Eigen::MatrixXd curves(static_cast<Eigen::Index>(ds.records_in(Split::Train).size()), 28);
  Eigen::Index row = 0;
  for (const auto* r : ds.records_in(Split::Train))
    curves.row(row++) = Eigen::Map<const Eigen::RowVectorXd>(r->normalized.data(), 28);
  const auto basis = fit_pca(curves, 10);
  std::printf("PCA reconstruction RMSE: %.3g\n", reconstruction_rmse(basis, curves));

  TrainConfig tc;
  tc.epochs = 60;
  tc.seed = 1;
  const auto model = train_surrogate(ds, basis, tc);
  std::printf("surrogate train loss %.3g, validation loss %.3g\n", model.summary.final_train_loss,
              model.summary.final_validation_loss);

  BenchmarkConfig bc;
  bc.target_msa = ds.msas.back().id;
  bc.top_k = 20;
  bc.optimizer.n_seeds = 64;
  bc.optimizer.n_init_naive = 5000;
  bc.optimizer.max_steps = 300;
  const auto prior = fit_prior(ds, bc.optimizer.jitter);
  const auto pc = make_planted_case(ds, bc, 0, 20);
  for (auto m : {Method::Naive, Method::OptKld}) {
    const auto post = run_method(m, pc, model, basis, prior, ds.box, bc);
    const auto score = score_posterior(post, pc, ds.msa(bc.target_msa), ds.horizon, bc.top_k, 0);
    std::printf("%-8s curve RMSE %.3f permille, INFECTED RMSE %.3f, TRANSPROP RMSE %.3f\n",
                std::string(to_string(m)).c_str(), score.curve_rmse, score.infected_rmse,
                score.transprop_rmse);
  }
  return 0;
}
