#pragma once

// Toy domain-shift tasks, experiment configuration and the experiment
// commands behind the CLI. Every command writes CSV files into the output
// directory and returns a JSON summary (also written as summary.json).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "shiftdiff/forward.hpp"
#include "shiftdiff/io.hpp"
#include "shiftdiff/metrics.hpp"
#include "shiftdiff/mlp.hpp"
#include "shiftdiff/prediction.hpp"
#include "shiftdiff/schedule.hpp"
#include "shiftdiff/solver.hpp"

namespace shiftdiff {

using nlohmann::json;

enum class TaskKind { gaussian, gaussian_mixture, ring };

inline TaskKind parse_task_kind(const std::string& name) {
  if (name == "gaussian") return TaskKind::gaussian;
  if (name == "gaussian-mixture") return TaskKind::gaussian_mixture;
  if (name == "ring") return TaskKind::ring;
  throw ConfigError("unknown task kind '" + name + "'");
}

inline const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::gaussian: return "gaussian";
    case TaskKind::gaussian_mixture: return "gaussian-mixture";
    case TaskKind::ring: return "ring";
  }
  return "?";
}

/// xhat0 = A (center + c (x0 - center)) + offset, with center the target mean.
struct Degradation {
  double contraction = 0.3;
  Vector offset;
  Eigen::MatrixXd map;  // A; identity when empty

  StateBatch apply(const StateBatch& x0, const Vector& center) const {
    StateBatch pulled = contraction * x0;
    pulled.rowwise() += ((1.0 - contraction) * center).transpose();
    StateBatch out = map.size() == 0 ? pulled : StateBatch(pulled * map.transpose());
    out.rowwise() += offset.transpose();
    return out;
  }
};

/// Target distribution (a diagonal Gaussian mixture; a single Gaussian and
/// a ring of modes are special cases) plus the degradation producing sources.
class ToyTask {
 public:
  ToyTask(TaskKind kind, GaussianMixture target, Degradation deg)
      : kind_(kind), target_(std::move(target)), deg_(std::move(deg)) {
    if (!(deg_.contraction > 0.0 && deg_.contraction <= 1.0)) {
      throw ConfigError("degradation contraction must lie in (0, 1]");
    }
    if (deg_.offset.size() == 0) deg_.offset = Vector::Zero(dim());
    if (deg_.offset.size() != dim()) throw ConfigError("degradation offset has the wrong dimension");
    if (deg_.map.size() != 0 && (deg_.map.rows() != dim() || deg_.map.cols() != dim())) {
      throw ConfigError("degradation map must be d x d");
    }
  }

  static ToyTask gaussian(GaussianSpec q0, Degradation deg) {
    return {TaskKind::gaussian, GaussianMixture({1.0}, {std::move(q0)}), std::move(deg)};
  }

  /// `modes` equal-weight components on a circle in the first two coordinates.
  static ToyTask ring(double radius, int modes, double std_dev, Degradation deg) {
    if (modes < 2 || !(radius > 0.0) || !(std_dev > 0.0)) throw ConfigError("ring needs modes >= 2, radius > 0, std > 0");
    std::vector<double> w(static_cast<std::size_t>(modes), 1.0);
    std::vector<GaussianSpec> comps;
    for (int k = 0; k < modes; ++k) {
      const double ang = 2.0 * std::numbers::pi * k / modes;
      Vector m(2);
      m << radius * std::cos(ang), radius * std::sin(ang);
      comps.emplace_back(m, Vector::Constant(2, std_dev * std_dev));
    }
    return {TaskKind::ring, GaussianMixture(std::move(w), std::move(comps)), std::move(deg)};
  }

  TaskKind kind() const { return kind_; }
  Eigen::Index dim() const { return target_.dim(); }
  const GaussianMixture& target() const { return target_; }
  const Degradation& degradation() const { return deg_; }

  Vector mean() const { return target_.mean(); }
  Vector variance() const { return target_.variance(); }
  StateBatch sample(Eigen::Index n, Rng& rng) const { return target_.sample(n, rng); }
  StateBatch degrade(const StateBatch& x0) const { return deg_.apply(x0, mean()); }

  /// Source used by oracle runs: the degraded target mean.
  StateBatch shared_source() const { return degrade(row_batch(mean())); }

  std::optional<GaussianSpec> as_gaussian() const {
    if (target_.components.size() != 1) return std::nullopt;
    return target_.components.front();
  }

  std::unique_ptr<Predictor> oracle(const DoSSchedule& s) const {
    if (auto g = as_gaussian()) return std::make_unique<GaussianOracle>(*g, s);
    return std::make_unique<MixtureOracle>(target_, s);
  }

 private:
  TaskKind kind_;
  GaussianMixture target_;
  Degradation deg_;
};

// ---------------------------------------------------------------------------
// Configuration

namespace detail {

inline Vector vector_from(const json& j, const char* what) {
  if (!j.is_array() || j.empty()) throw ConfigError(std::string(what) + " must be a nonempty array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError(std::string(what) + " must hold numbers");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

template <class T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace detail

/// Beta limits are per display step (DDPM convention) and are multiplied by
/// T_display to obtain rates per unit time.
struct ScheduleSettings {
  std::string kind = "linear-beta";
  double beta_min = 1e-4;
  double beta_max = 2e-2;
  double cosine_offset = 0.008;
  double t1 = 0.5;
  int t_display = kDisplaySteps;
  std::string shift = "cosine";

  DoSSchedule build() const { return build(t1); }

  DoSSchedule build(double pivot) const {
    NoiseSchedule noise = kind == "cosine" ? NoiseSchedule::cosine(cosine_offset)
                          : kind == "linear-beta"
                              ? NoiseSchedule::linear_beta(beta_min * t_display, beta_max * t_display)
                              : throw ConfigError("unknown schedule kind '" + kind + "'");
    if (shift == "cosine") return {noise, ShiftingSequence::cosine(pivot)};
    if (shift == "none") return {noise, ShiftingSequence::none(pivot)};
    throw ConfigError("unknown shift '" + shift + "'");
  }
};

struct SolverSettings {
  int order = 3;
  int steps = 5;
  double t_end = 1e-3;
  GridSpacing spacing = GridSpacing::uniform_t;
  FinalOutput final_output = FinalOutput::data_prediction;
  bool noise = true;

  SolverConfig build(const DoSSchedule& s, std::uint64_t seed) const {
    SolverConfig cfg(make_time_grid(s, steps, t_end, spacing));
    cfg.order = order;
    cfg.seed = seed;
    cfg.final_output = final_output;
    cfg.noise = noise;
    return cfg;
  }
};

struct TrainSettings {
  TrainConfig train;
  int dataset_size = 20000;
  int heldout_size = 4000;
  std::string file = "predictor.bin";
};

struct ScoreFieldSettings {
  double xmin = -3.0, xmax = 3.0, ymin = -3.0, ymax = 3.0;
  int resolution = 21;
  double t = 0.25;
};

struct ForwardSettings {
  int times = 41;
  int mc_samples = 2000;
  int trajectory_samples = 200;
};

enum class SourceMode { shared, paired };

struct ExperimentConfig {
  ScheduleSettings schedule;
  std::optional<ToyTask> task;
  SolverSettings solver;
  int samples = 10000;
  std::string predictor = "oracle";
  std::optional<SourceMode> source;  // default: shared for the oracle, paired otherwise
  TrainSettings train;
  std::vector<double> fractions{1.0, 2.0 / 3.0, 0.5, 1.0 / 3.0};
  bool retrain = false;
  ScoreFieldSettings scorefield;
  ForwardSettings forward;
  int quad_points = 64;
  int error_rows = 256;
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";

  const ToyTask& toy() const { return *task; }
  bool uses_oracle() const { return predictor == "oracle"; }
  SourceMode source_mode() const { return source.value_or(uses_oracle() ? SourceMode::shared : SourceMode::paired); }
};

/// Default task: 2-D three-component mixture, contraction 0.3 plus an offset.
inline ToyTask default_task() {
  const Vector v = Vector::Constant(2, 0.35 * 0.35);
  Vector m1(2), m2(2), m3(2);
  m1 << -1.5, 0.5;
  m2 << 1.0, 1.5;
  m3 << 0.5, -1.2;
  Degradation deg;
  deg.offset = Vector(2);
  deg.offset << 0.8, -0.6;
  return {TaskKind::gaussian_mixture, GaussianMixture({0.3, 0.4, 0.3}, {{m1, v}, {m2, v}, {m3, v}}), deg};
}

inline ToyTask parse_task(const json& j) {
  Degradation deg;
  deg.contraction = detail::get_or(j, "contraction", 0.3);
  if (j.contains("offset")) deg.offset = detail::vector_from(j.at("offset"), "task.offset");
  if (j.contains("map")) {
    const json& rows = j.at("map");
    if (!rows.is_array() || rows.empty()) throw ConfigError("task.map must be an array of rows");
    deg.map.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Vector r = detail::vector_from(rows[i], "task.map row");
      if (r.size() != deg.map.cols()) throw ConfigError("task.map must be square");
      deg.map.row(static_cast<Eigen::Index>(i)) = r.transpose();
    }
  }
  const TaskKind kind = parse_task_kind(detail::get_or<std::string>(j, "kind", "gaussian-mixture"));
  try {
    switch (kind) {
      case TaskKind::gaussian:
        return ToyTask::gaussian(
            GaussianSpec(detail::vector_from(j.at("mean"), "task.mean"), detail::vector_from(j.at("var"), "task.var")),
            deg);
      case TaskKind::gaussian_mixture: {
        if (!j.contains("components")) {
          ToyTask base = default_task();
          if (!j.contains("offset")) deg.offset = base.degradation().offset;
          return {TaskKind::gaussian_mixture, base.target(), deg};
        }
        std::vector<double> w;
        std::vector<GaussianSpec> comps;
        for (const json& c : j.at("components")) {
          w.push_back(detail::get_or(c, "weight", 1.0));
          comps.emplace_back(detail::vector_from(c.at("mean"), "component mean"),
                             detail::vector_from(c.at("var"), "component var"));
        }
        return {TaskKind::gaussian_mixture, GaussianMixture(std::move(w), std::move(comps)), deg};
      }
      case TaskKind::ring:
        return ToyTask::ring(detail::get_or(j, "radius", 2.0), detail::get_or(j, "modes", 8),
                             detail::get_or(j, "std", 0.2), deg);
    }
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("invalid task: ") + e.what());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid task: ") + e.what());
  }
  throw ConfigError("unreachable task kind");
}

inline ExperimentConfig parse_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig cfg;
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    cfg.schedule.kind = detail::get_or(s, "kind", cfg.schedule.kind);
    cfg.schedule.beta_min = detail::get_or(s, "beta_min", cfg.schedule.beta_min);
    cfg.schedule.beta_max = detail::get_or(s, "beta_max", cfg.schedule.beta_max);
    cfg.schedule.cosine_offset = detail::get_or(s, "cosine_offset", cfg.schedule.cosine_offset);
    cfg.schedule.t1 = detail::get_or(s, "t1", cfg.schedule.t1);
    cfg.schedule.t_display = detail::get_or(s, "T_display", cfg.schedule.t_display);
    cfg.schedule.shift = detail::get_or(s, "shift", cfg.schedule.shift);
    if (cfg.schedule.t_display < 1) throw ConfigError("schedule.T_display must be positive");
  }
  cfg.task = j.contains("task") ? parse_task(j.at("task")) : default_task();
  if (j.contains("solver")) {
    const json& s = j.at("solver");
    cfg.solver.order = detail::get_or(s, "order", cfg.solver.order);
    cfg.solver.steps = detail::get_or(s, "steps", cfg.solver.steps);
    cfg.solver.t_end = detail::get_or(s, "t_end", cfg.solver.t_end);
    cfg.solver.spacing = parse_spacing(detail::get_or<std::string>(s, "spacing", "uniform-t"));
    const std::string fo = detail::get_or<std::string>(s, "final_output", "data_prediction");
    if (fo == "data_prediction") cfg.solver.final_output = FinalOutput::data_prediction;
    else if (fo == "state") cfg.solver.final_output = FinalOutput::state;
    else throw ConfigError("solver.final_output must be 'state' or 'data_prediction'");
    cfg.solver.noise = detail::get_or(s, "noise", cfg.solver.noise);
    if (cfg.solver.order < 1 || cfg.solver.order > 3) throw ConfigError("solver.order must be 1, 2 or 3");
    if (cfg.solver.steps < 1) throw ConfigError("solver.steps must be at least 1");
  }
  cfg.samples = detail::get_or(j, "samples", cfg.samples);
  if (cfg.samples < 2) throw ConfigError("samples must be at least 2");
  cfg.predictor = detail::get_or(j, "predictor", cfg.predictor);
  if (j.contains("source")) {
    const std::string src = j.at("source").get<std::string>();
    if (src == "shared") cfg.source = SourceMode::shared;
    else if (src == "paired") cfg.source = SourceMode::paired;
    else throw ConfigError("source must be 'shared' or 'paired'");
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    TrainConfig& tc = cfg.train.train;
    tc.steps = detail::get_or(t, "steps", tc.steps);
    tc.batch = detail::get_or(t, "batch", tc.batch);
    tc.lr = detail::get_or(t, "lr", tc.lr);
    tc.width = detail::get_or(t, "width", tc.width);
    tc.freqs = detail::get_or(t, "freqs", tc.freqs);
    tc.weighting = parse_weighting(detail::get_or<std::string>(t, "weighting", weighting_name(tc.weighting)));
    cfg.train.dataset_size = detail::get_or(t, "dataset_size", cfg.train.dataset_size);
    cfg.train.heldout_size = detail::get_or(t, "heldout_size", cfg.train.heldout_size);
    cfg.train.file = detail::get_or(t, "file", cfg.train.file);
    if (tc.steps < 1 || tc.batch < 1 || !(tc.lr > 0.0) || tc.width < 1 || tc.freqs < 1 ||
        cfg.train.dataset_size < 1 || cfg.train.heldout_size < 1) {
      throw ConfigError("train settings must be positive");
    }
  }
  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    if (s.contains("fractions")) {
      cfg.fractions.clear();
      for (const json& f : s.at("fractions")) cfg.fractions.push_back(f.get<double>());
    }
    cfg.retrain = detail::get_or(s, "retrain", cfg.retrain);
    for (double f : cfg.fractions) {
      if (!(f > 0.0 && f <= 1.0)) throw ConfigError("sweep fractions must lie in (0, 1]");
    }
  }
  if (j.contains("scorefield")) {
    const json& s = j.at("scorefield");
    ScoreFieldSettings& f = cfg.scorefield;
    f.xmin = detail::get_or(s, "xmin", f.xmin);
    f.xmax = detail::get_or(s, "xmax", f.xmax);
    f.ymin = detail::get_or(s, "ymin", f.ymin);
    f.ymax = detail::get_or(s, "ymax", f.ymax);
    f.resolution = detail::get_or(s, "resolution", f.resolution);
    f.t = detail::get_or(s, "t", f.t);
    if (f.resolution < 2 || !(f.xmax > f.xmin) || !(f.ymax > f.ymin)) throw ConfigError("bad scorefield bounds");
  }
  if (j.contains("forward")) {
    const json& s = j.at("forward");
    cfg.forward.times = detail::get_or(s, "times", cfg.forward.times);
    cfg.forward.mc_samples = detail::get_or(s, "mc_samples", cfg.forward.mc_samples);
    cfg.forward.trajectory_samples = detail::get_or(s, "trajectory_samples", cfg.forward.trajectory_samples);
    if (cfg.forward.times < 2 || cfg.forward.mc_samples < 2) throw ConfigError("forward needs times, mc_samples >= 2");
  }
  cfg.quad_points = detail::get_or(j, "quad_points", cfg.quad_points);
  cfg.error_rows = detail::get_or(j, "error_rows", cfg.error_rows);
  cfg.seed = detail::get_or<std::uint64_t>(j, "seed", cfg.seed);
  if (j.contains("out")) cfg.out = j.at("out").get<std::string>();
  // Validates schedule parameters early.
  try {
    (void)cfg.schedule.build();
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("invalid schedule: ") + e.what());
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Commands

namespace detail {

// Named streams derived from the run seed.
enum StreamId : std::uint64_t { kReferenceStream = 2, kSourceStream = 3, kForwardStream = 4, kDatasetStream = 10 };

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline void write_summary(const std::filesystem::path& out, const json& summary) {
  std::ofstream f(out / "summary.json");
  if (!f) throw IoError("cannot write " + (out / "summary.json").string());
  f << summary.dump(2) << '\n';
}

/// The configured predictor bound to schedule `s`. Oracles are built for
/// `s`; trained networks are loaded and rebound to `s`.
inline std::unique_ptr<Predictor> make_predictor(const ExperimentConfig& cfg, const DoSSchedule& s) {
  if (cfg.uses_oracle()) return cfg.toy().oracle(s);
  MlpPredictor loaded = load_predictor(cfg.predictor);
  if (loaded.network().shape().dim != cfg.toy().dim()) throw ConfigError("predictor dimension does not match task");
  return std::make_unique<MlpPredictor>(loaded.network(), s);
}

inline StateBatch make_sources(const ExperimentConfig& cfg, Eigen::Index n) {
  if (cfg.source_mode() == SourceMode::shared) return cfg.toy().shared_source().replicate(n, 1);
  Rng rng = Rng::stream(cfg.seed, kSourceStream);
  return cfg.toy().degrade(cfg.toy().sample(n, rng));
}

inline StateBatch reference_samples(const ExperimentConfig& cfg, Eigen::Index n) {
  Rng rng = Rng::stream(cfg.seed, kReferenceStream);
  return cfg.toy().sample(n, rng);
}

struct QualityReport {
  double energy_distance;
  MomentError moments;
};

inline QualityReport quality(const ExperimentConfig& cfg, const StateBatch& samples) {
  const StateBatch ref = reference_samples(cfg, std::min<Eigen::Index>(samples.rows(), 10000));
  return {energy_distance(samples, ref), moment_error(samples, cfg.toy().mean(), cfg.toy().variance())};
}

inline void write_trace(const std::filesystem::path& path, const std::vector<StepTrace>& trace) {
  CsvWriter w(path, {"step", "t_from", "t_to", "t_display", "lambda_from", "lambda_to", "order_used", "linear_norm",
                     "dosg_norm", "pat_norm", "noise_norm"});
  for (const StepTrace& s : trace) {
    w.row({static_cast<double>(s.index), s.t_from, s.t_to, static_cast<double>(display_step(s.t_to)), s.lambda_from,
           s.lambda_to, static_cast<double>(s.order_used), s.linear_norm, s.dosg_norm, s.pat_norm, s.noise_norm});
  }
}

inline json base_summary(const char* command, const ExperimentConfig& cfg) {
  json j;
  j["command"] = command;
  j["seed"] = cfg.seed;
  j["task"] = task_kind_name(cfg.toy().kind());
  j["dim"] = cfg.toy().dim();
  j["predictor"] = cfg.uses_oracle() ? "oracle" : "trained";
  return j;
}

inline json solver_json(const SolverSettings& s, double t1) {
  return {{"order", s.order},
          {"steps", s.steps},
          {"t1", t1},
          {"t_end", s.t_end},
          {"spacing", spacing_name(s.spacing)},
          {"final_output", s.final_output == FinalOutput::state ? "state" : "data_prediction"}};
}

}  // namespace detail

/// Schedule curves, analytic marginal moments and Monte Carlo marginals on
/// a uniform time grid over [0, 1] that includes t1.
inline json cmd_forward(const ExperimentConfig& cfg) {
  detail::Stopwatch clock;
  ensure_directory(cfg.out);
  const DoSSchedule s = cfg.schedule.build();
  const ToyTask& task = cfg.toy();
  const Eigen::Index d = task.dim();
  const StateBatch src = task.shared_source();
  const Vector xhat0 = src.row(0).transpose();

  std::vector<double> times;
  for (int i = 0; i < cfg.forward.times; ++i) times.push_back(static_cast<double>(i) / (cfg.forward.times - 1));
  times.push_back(s.pivot());
  std::sort(times.begin(), times.end());
  times.erase(std::unique(times.begin(), times.end()), times.end());

  std::vector<std::string> cols{"t", "t_display", "alpha", "sigma", "eta", "lambda"};
  for (const auto& c : dim_columns("mean", d)) cols.push_back(c);
  for (const auto& c : dim_columns("var", d)) cols.push_back(c);
  for (const auto& c : dim_columns("mc_mean", d)) cols.push_back(c);
  for (const auto& c : dim_columns("mc_var", d)) cols.push_back(c);
  CsvWriter curves(cfg.out / "forward_curves.csv", cols);

  std::vector<std::string> tcols{"t"};
  for (const auto& c : dim_columns("x", d)) tcols.push_back(c);
  CsvWriter traj(cfg.out / "forward_samples.csv", tcols);

  Rng rng = Rng::stream(cfg.seed, detail::kForwardStream);
  const StateBatch x0 = task.sample(cfg.forward.mc_samples, rng);
  const Vector mu = task.mean();
  const Vector var = task.variance();
  double max_mc_dev = 0.0;
  for (double t : times) {
    const double a = s.target_scale(t);
    const double b = s.source_scale(t);
    const double sig = s.sigma(t);
    const Vector mean = a * mu + b * xhat0;
    const Vector v = (a * a) * var + Vector::Constant(d, sig * sig);
    const MarginalDraw draw = sample_marginal(x0, src, t, s, rng);
    const SampleMoments mc = sample_moments(draw.x_t);
    std::vector<double> row{t,
                            static_cast<double>(display_step(t)),
                            s.alpha(t),
                            sig,
                            s.eta(t),
                            s.shift().saturated(t) ? kInf : s.lambda(t)};
    for (Eigen::Index j = 0; j < d; ++j) row.push_back(mean[j]);
    for (Eigen::Index j = 0; j < d; ++j) row.push_back(v[j]);
    for (Eigen::Index j = 0; j < d; ++j) row.push_back(mc.mean[j]);
    for (Eigen::Index j = 0; j < d; ++j) row.push_back(mc.var[j]);
    curves.row(row);
    for (Eigen::Index j = 0; j < d; ++j) {
      const double se = std::sqrt(v[j] / cfg.forward.mc_samples);
      max_mc_dev = std::max(max_mc_dev, std::abs(mc.mean[j] - mean[j]) / se);
    }
    const Eigen::Index keep = std::min<Eigen::Index>(cfg.forward.trajectory_samples, draw.x_t.rows());
    for (Eigen::Index i = 0; i < keep; ++i) {
      std::vector<double> r{t};
      for (Eigen::Index j = 0; j < d; ++j) r.push_back(draw.x_t(i, j));
      traj.row(r);
    }
  }
  json j = detail::base_summary("forward", cfg);
  j["t1"] = s.pivot();
  j["times"] = times.size();
  j["mc_samples"] = cfg.forward.mc_samples;
  j["max_mean_deviation_se"] = max_mc_dev;
  j["wall_time_s"] = clock.seconds();
  detail::write_summary(cfg.out, j);
  return j;
}

/// One sampling run with the configured solver.
inline json cmd_sample(const ExperimentConfig& cfg) {
  detail::Stopwatch clock;
  ensure_directory(cfg.out);
  const DoSSchedule s = cfg.schedule.build();
  const auto predictor = detail::make_predictor(cfg, s);
  const StateBatch src = detail::make_sources(cfg, cfg.samples);
  const SolverConfig sc = cfg.solver.build(predictor->schedule(), cfg.seed);
  const SampleResult res = sample(*predictor, src, sc);
  if (!res.output.allFinite()) throw NumericError("sampler produced non-finite values");
  write_batch_csv(cfg.out / "samples.csv", res.output);
  detail::write_trace(cfg.out / "trace.csv", res.trace);
  const detail::QualityReport q = detail::quality(cfg, res.output);
  json j = detail::base_summary("sample", cfg);
  j["solver"] = detail::solver_json(cfg.solver, predictor->schedule().pivot());
  j["samples"] = cfg.samples;
  j["nfe"] = res.nfe;
  j["energy_distance"] = q.energy_distance;
  j["mean_rel_error"] = q.moments.mean_rel;
  j["var_rel_error"] = q.moments.var_rel;
  j["sample_mean"] = detail::vector_json(sample_moments(res.output).mean);
  j["wall_time_s"] = clock.seconds();
  detail::write_summary(cfg.out, j);
  return j;
}

namespace detail {

struct TrainOutcome {
  MlpPredictor predictor;
  TrainResult result;
  double heldout_loss;
  double zero_loss;
};

inline TrainOutcome train_for(const ExperimentConfig& cfg, const DoSSchedule& s) {
  Rng data_rng = Rng::stream(cfg.seed, kDatasetStream);
  const StateBatch x0 = cfg.toy().sample(cfg.train.dataset_size, data_rng);
  const StateBatch xhat0 = cfg.toy().degrade(x0);
  TrainConfig tc = cfg.train.train;
  tc.seed = cfg.seed;
  TrainResult res = train_noise_predictor(x0, xhat0, s, tc);
  const StateBatch hx0 = cfg.toy().sample(cfg.train.heldout_size, data_rng);
  const StateBatch hsrc = cfg.toy().degrade(hx0);
  Rng eval_rng = Rng::stream(cfg.seed, kDatasetStream + 1);
  const double held = noise_prediction_loss(res.predictor, hx0, hsrc, 8, eval_rng).mean_squared;
  Rng zero_rng = Rng::stream(cfg.seed, kDatasetStream + 1);
  const double zero = noise_prediction_loss(ZeroNoisePredictor(s), hx0, hsrc, 8, zero_rng).mean_squared;
  MlpPredictor p = res.predictor;
  return {std::move(p), std::move(res), held, zero};
}

}  // namespace detail

/// Trains the small network on (x0, degrade(x0)) pairs from the task.
inline json cmd_train(const ExperimentConfig& cfg) {
  detail::Stopwatch clock;
  ensure_directory(cfg.out);
  const DoSSchedule s = cfg.schedule.build();
  const auto path = cfg.out / cfg.train.file;
  try {
    const detail::TrainOutcome o = detail::train_for(cfg, s);
    save_predictor(o.predictor, path.string(), cfg.seed, o.result.final_running_loss, cfg.train.train.weighting);
    CsvWriter curve(cfg.out / "loss_curve.csv", {"step", "loss", "running_mean"});
    const int w = cfg.train.train.running_window;
    const std::vector<double> rm = running_mean(o.result.losses, w);
    for (std::size_t i = 0; i < o.result.losses.size(); ++i) {
      const double r = i + 1 >= static_cast<std::size_t>(w) ? rm[i + 1 - w] : std::nan("");
      curve.row({static_cast<double>(i), o.result.losses[i], r});
    }
    json j = detail::base_summary("train", cfg);
    j["predictor"] = "trained";
    j["predictor_file"] = path.string();
    j["steps"] = cfg.train.train.steps;
    j["batch"] = cfg.train.train.batch;
    j["loss_weighting"] = weighting_name(cfg.train.train.weighting);
    j["initial_running_loss"] = o.result.initial_running_loss;
    j["final_running_loss"] = o.result.final_running_loss;
    j["heldout_noise_loss"] = o.heldout_loss;
    j["zero_predictor_noise_loss"] = o.zero_loss;
    j["wall_time_s"] = clock.seconds();
    detail::write_summary(cfg.out, j);
    return j;
  } catch (const TrainingDivergedError& e) {
    const MlpPredictor last(TinyMlp(e.shape, e.last_good_params), s);
    const auto ckpt = cfg.out / (cfg.train.file + ".last_good");
    save_predictor(last, ckpt.string(), cfg.seed, std::nan(""), cfg.train.train.weighting);
    throw TrainingError(std::string(e.what()) + "; last good parameters written to " + ckpt.string());
  }
}

/// Sample quality against the pivot t1 = fraction * T.
inline json cmd_sweep_t1(const ExperimentConfig& cfg) {
  detail::Stopwatch clock;
  ensure_directory(cfg.out);
  CsvWriter csv(cfg.out / "sweep_t1.csv", {"fraction", "t1", "t1_display", "alpha_t1", "init_mean_norm",
                                            "energy_distance", "mean_rel_error", "var_rel_error", "nfe"});
  json rows = json::array();
  for (double f : cfg.fractions) {
    const double t1 = f * kHorizon;
    const DoSSchedule s = cfg.schedule.build(t1);
    std::unique_ptr<Predictor> predictor;
    if (!cfg.uses_oracle() && cfg.retrain) {
      predictor = std::make_unique<MlpPredictor>(detail::train_for(cfg, s).predictor);
    } else {
      predictor = detail::make_predictor(cfg, s);
    }
    const StateBatch src = detail::make_sources(cfg, cfg.samples);
    const SolverConfig sc = cfg.solver.build(s, cfg.seed);
    Rng init_rng(cfg.seed);
    const StateBatch init = init_state(src, t1, s, init_rng);
    const double init_mean_norm = sample_moments(init).mean.norm();
    const SampleResult res = sample(*predictor, src, sc);
    const detail::QualityReport q = detail::quality(cfg, res.output);
    csv.row({f, t1, static_cast<double>(display_step(t1)), s.alpha(t1), init_mean_norm, q.energy_distance,
             q.moments.mean_rel, q.moments.var_rel, static_cast<double>(res.nfe)});
    rows.push_back({{"fraction", f},
                    {"t1", t1},
                    {"alpha_t1", s.alpha(t1)},
                    {"init_mean_norm", init_mean_norm},
                    {"energy_distance", q.energy_distance},
                    {"mean_rel_error", q.moments.mean_rel},
                    {"var_rel_error", q.moments.var_rel},
                    {"nfe", res.nfe}});
  }
  json j = detail::base_summary("sweep-t1", cfg);
  j["solver"] = detail::solver_json(cfg.solver, cfg.schedule.t1);
  j["retrain"] = cfg.retrain;
  j["rows"] = rows;
  j["wall_time_s"] = clock.seconds();
  detail::write_summary(cfg.out, j);
  return j;
}

struct DeterministicStepErrors {
  std::vector<double> per_step;  // RMS deviation from the quadrature reference, steps 2..N (N-1 with data output)
  double mean = 0.0;
};

/// Runs the solver without step noise (the initial value keeps its noise)
/// and compares every step that starts below t1 with exact_step_quadrature
/// from the same state. With data_prediction output the last update never
/// reaches the sample and is skipped.
inline DeterministicStepErrors deterministic_step_errors(const Predictor& p, const StateBatch& xhat0,
                                                         const SolverConfig& cfg, int quad_points = 64) {
  const DoSSchedule& s = p.schedule();
  Rng rng(cfg.seed);
  const StateBatch src = broadcast_rows(xhat0, xhat0.rows(), "deterministic_step_errors");
  SolverState state(init_state(src, cfg.grid.front(), s, rng, cfg.init_noise), cfg.grid.front());
  DeterministicStepErrors out;
  StepOptions opts;
  opts.noise = false;
  for (std::size_t i = 0; i < cfg.grid.steps(); ++i) {
    const StateBatch before = state.x;
    const double from = state.t;
    const StepReport rep = solver_step(state, cfg.grid[i + 1], cfg.order, p, src, nullptr, opts);
    if (s.shift().saturated(from)) continue;
    if (i + 1 == cfg.grid.steps() && cfg.final_output == FinalOutput::data_prediction) break;
    const QuadratureResult q = exact_step_quadrature(before, from, cfg.grid[i + 1], p, src, quad_points);
    const StateBatch diff = rep.terms.deterministic() - q.mean;
    out.per_step.push_back(diff.norm() / std::sqrt(static_cast<double>(diff.rows())));
  }
  for (double e : out.per_step) out.mean += e;
  if (!out.per_step.empty()) out.mean /= static_cast<double>(out.per_step.size());
  return out;
}

/// Orders 1-3 at a fixed step count with identical seeds.
inline json cmd_sweep_order(const ExperimentConfig& cfg) {
  detail::Stopwatch clock;
  ensure_directory(cfg.out);
  const DoSSchedule s = cfg.schedule.build();
  const auto predictor = detail::make_predictor(cfg, s);
  const StateBatch src = detail::make_sources(cfg, cfg.samples);
  const StateBatch err_src = src.topRows(std::min<Eigen::Index>(cfg.error_rows, src.rows()));
  CsvWriter csv(cfg.out / "sweep_order.csv",
                {"order", "steps", "nfe", "deterministic_step_error", "energy_distance", "mean_rel_error",
                 "var_rel_error"});
  CsvWriter steps_csv(cfg.out / "sweep_order_steps.csv", {"order", "step", "deterministic_step_error"});
  json rows = json::array();
  for (int order = 1; order <= 3; ++order) {
    SolverSettings settings = cfg.solver;
    settings.order = order;
    const SolverConfig sc = settings.build(s, cfg.seed);
    const SampleResult res = sample(*predictor, src, sc);
    const detail::QualityReport q = detail::quality(cfg, res.output);
    const DeterministicStepErrors det = deterministic_step_errors(*predictor, err_src, sc, cfg.quad_points);
    for (std::size_t k = 0; k < det.per_step.size(); ++k) {
      steps_csv.row({static_cast<double>(order), static_cast<double>(k + 2), det.per_step[k]});
    }
    csv.row({static_cast<double>(order), static_cast<double>(settings.steps), static_cast<double>(res.nfe), det.mean,
             q.energy_distance, q.moments.mean_rel, q.moments.var_rel});
    rows.push_back({{"order", order},
                    {"steps", settings.steps},
                    {"nfe", res.nfe},
                    {"deterministic_step_error", det.mean},
                    {"energy_distance", q.energy_distance},
                    {"mean_rel_error", q.moments.mean_rel},
                    {"var_rel_error", q.moments.var_rel}});
  }
  json j = detail::base_summary("sweep-order", cfg);
  j["solver"] = detail::solver_json(cfg.solver, s.pivot());
  j["rows"] = rows;
  j["wall_time_s"] = clock.seconds();
  detail::write_summary(cfg.out, j);
  return j;
}

/// Score of the configured predictor on a 2-D grid at time t, through
/// data_to_score with the shared source point.
inline json cmd_scorefield(const ExperimentConfig& cfg) {
  detail::Stopwatch clock;
  if (cfg.toy().dim() != 2) throw ConfigError("scorefield needs a 2-D task");
  ensure_directory(cfg.out);
  const DoSSchedule s = cfg.schedule.build();
  const auto predictor = detail::make_predictor(cfg, s);
  const ScoreFieldSettings& f = cfg.scorefield;
  if (!(f.t > 0.0 && f.t <= kHorizon)) throw ConfigError("scorefield.t must lie in (0, 1]");
  const int n = f.resolution;
  StateBatch grid(static_cast<Eigen::Index>(n) * n, 2);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k) {
      grid(i * n + k, 0) = f.xmin + (f.xmax - f.xmin) * k / (n - 1);
      grid(i * n + k, 1) = f.ymin + (f.ymax - f.ymin) * i / (n - 1);
    }
  const StateBatch src = cfg.toy().shared_source();
  const StateBatch score = predictor->predict_score(grid, src, f.t);
  CsvWriter csv(cfg.out / "scorefield.csv", {"x", "y", "score_x", "score_y"});
  double max_norm = 0.0;
  for (Eigen::Index r = 0; r < grid.rows(); ++r) {
    csv.row({grid(r, 0), grid(r, 1), score(r, 0), score(r, 1)});
    max_norm = std::max(max_norm, score.row(r).norm());
  }
  const Vector xhat0 = src.row(0).transpose();
  const Vector mean = s.target_scale(f.t) * cfg.toy().mean() + s.source_scale(f.t) * xhat0;
  json j = detail::base_summary("scorefield", cfg);
  j["t"] = f.t;
  j["resolution"] = n;
  j["marginal_mean"] = detail::vector_json(mean);
  j["max_score_norm"] = max_norm;
  j["wall_time_s"] = clock.seconds();
  detail::write_summary(cfg.out, j);
  return j;
}

}  // namespace shiftdiff
