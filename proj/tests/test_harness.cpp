#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "shiftdiff/harness.hpp"

using namespace shiftdiff;
using nlohmann::json;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "shiftdiff_test_harness" / name;
  std::filesystem::remove_all(dir);
  return dir;
}

json gaussian_task_json() {
  return {{"kind", "gaussian"}, {"mean", {1.0, -0.5}}, {"var", {0.5, 2.0}}, {"offset", {0.8, -0.6}}};
}

ExperimentConfig config(json j, const std::string& name) {
  ExperimentConfig cfg = parse_config(j);
  cfg.out = scratch(name);
  return cfg;
}

std::vector<std::string> csv_header(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<std::string> cols;
  std::stringstream ss(line);
  std::string c;
  while (std::getline(ss, c, ',')) cols.push_back(c);
  return cols;
}

int column(const std::vector<std::string>& header, const std::string& name) {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  ADD_FAILURE() << "missing column " << name;
  return 0;
}

}  // namespace

TEST(Config, DefaultsAndParsing) {
  const ExperimentConfig cfg = parse_config(json::object());
  EXPECT_EQ(cfg.solver.order, 3);
  EXPECT_EQ(cfg.solver.steps, 5);
  EXPECT_EQ(cfg.schedule.t1, 0.5);
  EXPECT_EQ(cfg.toy().kind(), TaskKind::gaussian_mixture);
  EXPECT_EQ(cfg.fractions, (std::vector<double>{1.0, 2.0 / 3.0, 0.5, 1.0 / 3.0}));
  const DoSSchedule s = cfg.schedule.build();
  // Per-display-step betas become 0.1 and 20 per unit time.
  EXPECT_NEAR(s.noise().beta_min(), 0.1, 1e-15);
  EXPECT_NEAR(s.noise().beta_max(), 20.0, 1e-12);
  EXPECT_EQ(cfg.toy().degradation().contraction, 0.3);

  EXPECT_THROW(parse_config(json{{"solver", {{"order", 4}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"task", {{"kind", "spiral"}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"sweep", {{"fractions", {0.0}}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"schedule", {{"t1", 1.5}}}}), ConfigError);
  EXPECT_THROW(parse_config(json{{"task", {{"kind", "gaussian"}, {"mean", {1.0}}, {"var", {-1.0}}}}}), ConfigError);
  EXPECT_THROW(parse_config(json::array()), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(ToyTaskTest, DegradationContractsTowardMean) {
  const ToyTask task = default_task();
  Rng rng(1);
  const StateBatch x0 = task.sample(1000, rng);
  const StateBatch src = task.degrade(x0);
  const Vector mu = task.mean();
  for (Eigen::Index i = 0; i < 5; ++i) {
    const Eigen::RowVectorXd want = mu.transpose() + 0.3 * (x0.row(i) - mu.transpose()) + Eigen::RowVector2d(0.8, -0.6);
    EXPECT_LT((src.row(i) - want).cwiseAbs().maxCoeff(), 1e-14);
  }
  EXPECT_THROW(ToyTask::ring(1.0, 1, 0.1, Degradation{}), ConfigError);
  Degradation bad;
  bad.contraction = 1.5;
  EXPECT_THROW(ToyTask::gaussian(GaussianSpec(Vector::Zero(2), Vector::Ones(2)), bad), ConfigError);
}

TEST(Forward, CurvesMatchAnalyticMoments) {
  ExperimentConfig cfg = config({{"task", gaussian_task_json()}, {"forward", {{"times", 21}, {"mc_samples", 4000}}}},
                                "forward");
  const json summary = cmd_forward(cfg);
  EXPECT_EQ(summary["command"], "forward");
  const auto path = cfg.out / "forward_curves.csv";
  const auto header = csv_header(path);
  const StateBatch rows = read_batch_csv(path);
  const DoSSchedule s = cfg.schedule.build();
  const GaussianSpec q0 = *cfg.toy().as_gaussian();
  const Vector xhat0 = cfg.toy().shared_source().row(0).transpose();
  double prev_lambda = -1.0;
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    const double t = rows(r, column(header, "t"));
    const Moments m = marginal_moments(q0, xhat0, t, s);
    for (int j = 0; j < 2; ++j) {
      EXPECT_NEAR(rows(r, column(header, "mean" + std::to_string(j))), m.mean[j], 1e-12);
      EXPECT_NEAR(rows(r, column(header, "var" + std::to_string(j))), m.var[j], 1e-12);
    }
    const double eta = rows(r, column(header, "eta"));
    if (t == 0.0) {
      EXPECT_EQ(eta, 0.0);
    }
    if (t >= 0.5) {
      EXPECT_EQ(eta, 1.0);
    }
    const double lambda = rows(r, column(header, "lambda"));
    if (t < 0.5) {
      EXPECT_GT(lambda, prev_lambda);
      prev_lambda = lambda;
    } else {
      EXPECT_TRUE(std::isinf(lambda));
    }
  }
  EXPECT_TRUE(std::filesystem::exists(cfg.out / "forward_samples.csv"));
  EXPECT_TRUE(std::filesystem::exists(cfg.out / "summary.json"));
}

TEST(Forward, UnwritableOutputIsIoError) {
  const auto base = scratch("blocked");
  std::filesystem::create_directories(base);
  { std::ofstream(base / "file") << "x"; }
  ExperimentConfig cfg = parse_config(json::object());
  cfg.out = base / "file" / "sub";
  EXPECT_THROW(cmd_forward(cfg), IoError);
}

TEST(Sample, DefaultRunUsesFiveEvaluations) {
  ExperimentConfig cfg = config({{"samples", 2000}}, "sample_default");
  const json j = cmd_sample(cfg);
  EXPECT_EQ(j["nfe"], 5);
  EXPECT_EQ(j["solver"]["order"], 3);
  EXPECT_EQ(j["solver"]["t1"], 0.5);
  EXPECT_TRUE(std::isfinite(j["energy_distance"].get<double>()));
  const StateBatch samples = read_batch_csv(cfg.out / "samples.csv");
  EXPECT_EQ(samples.rows(), 2000);
  EXPECT_EQ(read_batch_csv(cfg.out / "trace.csv").rows(), 5);
}

TEST(Sample, SingleStepRunReportsMetrics) {
  ExperimentConfig cfg = config({{"samples", 2000}, {"solver", {{"steps", 1}}}}, "sample_single");
  const json j = cmd_sample(cfg);
  EXPECT_EQ(j["nfe"], 1);
  EXPECT_TRUE(std::isfinite(j["energy_distance"].get<double>()));
  EXPECT_TRUE(read_batch_csv(cfg.out / "samples.csv").allFinite());
}

TEST(Sample, OracleGaussianAtTwoHundredSteps) {
  ExperimentConfig cfg = config(
      {{"task", gaussian_task_json()}, {"samples", 100000}, {"solver", {{"steps", 200}, {"order", 1}}}}, "sample_200");
  const json j = cmd_sample(cfg);
  EXPECT_LT(j["mean_rel_error"].get<double>(), 0.02);
  EXPECT_LT(j["var_rel_error"].get<double>(), 0.02);
}

TEST(Sample, MissingPredictorFileIsConfigError) {
  ExperimentConfig cfg = config({{"predictor", "/nonexistent/predictor.bin"}}, "sample_missing");
  EXPECT_THROW(cmd_sample(cfg), ConfigError);
}

TEST(Sample, DeterministicUnderFixedSeed) {
  ExperimentConfig a = config({{"samples", 500}, {"seed", 3}}, "det_a");
  ExperimentConfig b = config({{"samples", 500}, {"seed", 3}}, "det_b");
  json ja = cmd_sample(a), jb = cmd_sample(b);
  ja.erase("wall_time_s");
  jb.erase("wall_time_s");
  EXPECT_EQ(ja, jb);
  const StateBatch sa = read_batch_csv(a.out / "samples.csv");
  const StateBatch sb = read_batch_csv(b.out / "samples.csv");
  EXPECT_EQ(sa, sb);
}

TEST(SweepT1, RowsAndFullNoiseStart) {
  ExperimentConfig cfg = config({{"samples", 1000}}, "sweep_t1");
  const json j = cmd_sweep_t1(cfg);
  ASSERT_EQ(j["rows"].size(), 4u);
  const json& full = j["rows"][0];
  EXPECT_EQ(full["fraction"], 1.0);
  EXPECT_LE(full["alpha_t1"].get<double>(), 1e-2);
  // Init mean is alpha_T xhat0 plus Monte Carlo error at 1000 draws.
  EXPECT_LT(full["init_mean_norm"].get<double>(), 0.1);
  for (const json& r : j["rows"]) EXPECT_EQ(r["nfe"], 5);
  EXPECT_EQ(read_batch_csv(cfg.out / "sweep_t1.csv").rows(), 4);
}

TEST(SweepOrder, ThreeOrdersWithOrderedErrors) {
  ExperimentConfig cfg = config({{"samples", 2000}}, "sweep_order");
  const json j = cmd_sweep_order(cfg);
  ASSERT_EQ(j["rows"].size(), 3u);
  std::vector<double> err;
  for (const json& r : j["rows"]) {
    EXPECT_EQ(r["steps"], 5);
    EXPECT_EQ(r["nfe"], 5);
    err.push_back(r["deterministic_step_error"].get<double>());
  }
  EXPECT_LE(err[2], err[1]);
  EXPECT_LE(err[1], err[0]);
}

TEST(ScoreField, GaussianOracleMatchesAnalyticScore) {
  const json task = {{"kind", "gaussian"}, {"mean", {0.0, 0.0}}, {"var", {0.7, 0.7}}, {"offset", {0.0, 0.0}}};
  ExperimentConfig cfg = config({{"task", task}, {"scorefield", {{"resolution", 11}, {"t", 0.25}}}}, "scorefield");
  const json j = cmd_scorefield(cfg);
  const StateBatch rows = read_batch_csv(cfg.out / "scorefield.csv");
  ASSERT_EQ(rows.rows(), 121);
  const DoSSchedule s = cfg.schedule.build();
  const GaussianSpec q0 = *cfg.toy().as_gaussian();
  const Vector xhat0 = cfg.toy().shared_source().row(0).transpose();
  const StateBatch pts = rows.leftCols(2);
  const StateBatch want = gaussian_marginal_score(q0, xhat0, pts, 0.25, s);
  const Moments m = marginal_moments(q0, xhat0, 0.25, s);
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    const double n = want.row(r).norm();
    const double got_n = rows.row(r).tail(2).norm();
    if (n == 0.0) {
      EXPECT_LT(got_n, 1e-12);
      continue;
    }
    EXPECT_LT((rows.row(r).tail(2) - want.row(r)).norm(), 1e-8 * n);
    // Linear growth with distance from the mean.
    const double dist = (pts.row(r).transpose() - m.mean).norm();
    EXPECT_NEAR(got_n / dist, 1.0 / m.var[0], 1e-8 / m.var[0]);
  }
  // The grid contains the origin, which is the marginal mean here.
  EXPECT_LT(rows.row(60).tail(2).norm(), 1e-12);
}

TEST(ScoreField, RequiresTwoDimensions) {
  const json task = {{"kind", "gaussian"}, {"mean", {0.0, 0.0, 0.0}}, {"var", {1.0, 1.0, 1.0}}};
  ExperimentConfig cfg = config({{"task", task}}, "scorefield_3d");
  EXPECT_THROW(cmd_scorefield(cfg), ConfigError);
}

TEST(Train, WritesReloadableModel) {
  ExperimentConfig cfg = config({{"train", {{"steps", 300}, {"dataset_size", 4000}, {"heldout_size", 1000}}}}, "train");
  const json j = cmd_train(cfg);
  EXPECT_LT(j["final_running_loss"].get<double>(), j["initial_running_loss"].get<double>());
  EXPECT_LT(j["heldout_noise_loss"].get<double>(), j["zero_predictor_noise_loss"].get<double>());
  const auto file = cfg.out / "predictor.bin";
  ASSERT_TRUE(std::filesystem::exists(file));
  EXPECT_EQ(read_batch_csv(cfg.out / "loss_curve.csv").rows(), 300);

  ExperimentConfig run = config({{"predictor", file.string()}, {"samples", 500}}, "train_sample");
  const json js = cmd_sample(run);
  EXPECT_EQ(js["predictor"], "trained");
  EXPECT_EQ(js["nfe"], 5);
}

TEST(Train, DivergenceLeavesCheckpoint) {
  ExperimentConfig cfg =
      config({{"train", {{"steps", 5}, {"lr", 1e308}, {"width", 8}, {"dataset_size", 100}}}}, "train_diverge");
  EXPECT_THROW(cmd_train(cfg), TrainingError);
  EXPECT_TRUE(std::filesystem::exists(cfg.out / "predictor.bin.last_good"));
}
