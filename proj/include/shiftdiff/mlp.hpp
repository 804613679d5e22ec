#pragma once

// Small trainable predictor: a two-hidden-layer SiLU network with a
// preconditioned output head.
//
// With y = x_t - alpha eta xhat0 = a x0 + sigma eps (a = alpha (1 - eta)) and
// n = sqrt(a^2 + sigma^2), the raw network output F defines
//   x_data = y a / n^2 + (sigma / n) F
//   eps    = y sigma / n^2 - (a / n) F
// so both predictions exist on all of (0, t1], including t1 where a = 0.
// The regression target for F is (sigma x0 - a eps) / n, and
//   |eps_hat - eps|^2 = (a^2 / n^2) |F - F*|^2.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "shiftdiff/prediction.hpp"
#include "shiftdiff/schedule.hpp"
#include "shiftdiff/state.hpp"

namespace shiftdiff {

struct MlpShape {
  int dim = 2;
  int width = 64;
  int freqs = 8;

  int input_dim() const { return 2 * dim + 2 * freqs; }
  int param_count() const { return width * input_dim() + width + width * width + width + dim * width + dim; }
};

/// Sinusoidal time features at geometric frequencies 1 .. 100.
inline double embedding_frequency(int k, int freqs) {
  if (freqs == 1) return 1.0;
  return std::pow(100.0, static_cast<double>(k) / (freqs - 1));
}

/// Network inputs for one batch; `times` holds one time per row.
inline StateBatch mlp_features(const StateBatch& x_t, const StateBatch& xhat0, const Vector& times,
                               const DoSSchedule& s, int freqs) {
  const Eigen::Index n = x_t.rows();
  const Eigen::Index d = x_t.cols();
  const StateBatch src = broadcast_rows(xhat0, n, "mlp_features");
  StateBatch in(n, 2 * d + 2 * freqs);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = times[i];
    const double a = s.target_scale(t);
    const double sig = s.sigma(t);
    const double scale = 1.0 / std::sqrt(a * a + sig * sig);
    in.row(i).head(d) = (x_t.row(i) - s.source_scale(t) * src.row(i)) * scale;
    in.row(i).segment(d, d) = src.row(i);
    for (int k = 0; k < freqs; ++k) {
      const double w = embedding_frequency(k, freqs) * t;
      in(i, 2 * d + 2 * k) = std::sin(w);
      in(i, 2 * d + 2 * k + 1) = std::cos(w);
    }
  }
  return in;
}

class TinyMlp {
 public:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const RowMat>;
  using ConstVecMap = Eigen::Map<const Eigen::RowVectorXd>;

  TinyMlp(MlpShape shape, Vector params) : shape_(shape), params_(std::move(params)) {
    if (shape_.dim < 1 || shape_.width < 1 || shape_.freqs < 1) throw ArgumentError("TinyMlp: bad shape");
    if (params_.size() != shape_.param_count()) throw ArgumentError("TinyMlp: parameter count mismatch");
    if (!params_.allFinite()) throw ArgumentError("TinyMlp: parameters must be finite");
  }

  /// Scaled normal initialization; the output layer starts small.
  static TinyMlp initialize(MlpShape shape, std::uint64_t seed) {
    Rng rng(seed);
    Vector p = Vector::Zero(shape.param_count());
    const int in = shape.input_dim();
    const int w = shape.width;
    Eigen::Index off = 0;
    auto fill = [&](Eigen::Index count, double scale) {
      for (Eigen::Index i = 0; i < count; ++i) p[off + i] = scale * rng.normal();
      off += count;
    };
    fill(static_cast<Eigen::Index>(w) * in, 1.0 / std::sqrt(in));
    off += w;
    fill(static_cast<Eigen::Index>(w) * w, 1.0 / std::sqrt(w));
    off += w;
    fill(static_cast<Eigen::Index>(shape.dim) * w, 0.1 / std::sqrt(w));
    return TinyMlp(shape, std::move(p));
  }

  const MlpShape& shape() const { return shape_; }
  const Vector& params() const { return params_; }
  void set_params(Vector p) { *this = TinyMlp(shape_, std::move(p)); }

  StateBatch forward(const StateBatch& in) const {
    Cache c;
    return run(in, c);
  }

  /// Mean over rows of weight_i * |F_i - target_i|^2, with the exact gradient
  /// written into `grad` when given. Empty `weights` means unit weights.
  double loss(const StateBatch& in, const StateBatch& target, const Vector& weights, Vector* grad) const {
    Cache c;
    const StateBatch out = run(in, c);
    check_same_shape(out, target, "TinyMlp::loss");
    const StateBatch diff = out - target;
    const double n = static_cast<double>(in.rows());
    Vector row_sq = diff.rowwise().squaredNorm();
    if (weights.size() > 0) row_sq.array() *= weights.array();
    const double value = row_sq.sum() / n;
    if (!grad) return value;

    StateBatch g_out = (2.0 / n) * diff;
    if (weights.size() > 0) g_out.array().colwise() *= weights.array();
    grad->setZero(params_.size());
    const Layout L = layout();
    Eigen::Map<RowMat> dW1(grad->data() + L.w1, shape_.width, shape_.input_dim());
    Eigen::Map<Eigen::RowVectorXd> db1(grad->data() + L.b1, shape_.width);
    Eigen::Map<RowMat> dW2(grad->data() + L.w2, shape_.width, shape_.width);
    Eigen::Map<Eigen::RowVectorXd> db2(grad->data() + L.b2, shape_.width);
    Eigen::Map<RowMat> dW3(grad->data() + L.w3, shape_.dim, shape_.width);
    Eigen::Map<Eigen::RowVectorXd> db3(grad->data() + L.b3, shape_.dim);

    dW3.noalias() = g_out.transpose() * c.h2;
    db3 = g_out.colwise().sum();
    RowMat g2 = g_out * w3();
    g2.array() *= silu_prime(c.z2).array();
    dW2.noalias() = g2.transpose() * c.h1;
    db2 = g2.colwise().sum();
    RowMat g1 = g2 * w2();
    g1.array() *= silu_prime(c.z1).array();
    dW1.noalias() = g1.transpose() * in;
    db1 = g1.colwise().sum();
    return value;
  }

 private:
  struct Layout {
    Eigen::Index w1, b1, w2, b2, w3, b3;
  };

  struct Cache {
    RowMat z1, h1, z2, h2;
  };

  Layout layout() const {
    Layout L{};
    const Eigen::Index w = shape_.width;
    L.w1 = 0;
    L.b1 = L.w1 + w * shape_.input_dim();
    L.w2 = L.b1 + w;
    L.b2 = L.w2 + w * w;
    L.w3 = L.b2 + w;
    L.b3 = L.w3 + static_cast<Eigen::Index>(shape_.dim) * w;
    return L;
  }

  ConstMap w1() const { return ConstMap(params_.data() + layout().w1, shape_.width, shape_.input_dim()); }
  ConstVecMap b1() const { return ConstVecMap(params_.data() + layout().b1, shape_.width); }
  ConstMap w2() const { return ConstMap(params_.data() + layout().w2, shape_.width, shape_.width); }
  ConstVecMap b2() const { return ConstVecMap(params_.data() + layout().b2, shape_.width); }
  ConstMap w3() const { return ConstMap(params_.data() + layout().w3, shape_.dim, shape_.width); }
  ConstVecMap b3() const { return ConstVecMap(params_.data() + layout().b3, shape_.dim); }

  static RowMat silu(const RowMat& z) { return z.array() / (1.0 + (-z.array()).exp()); }

  static RowMat silu_prime(const RowMat& z) {
    const Eigen::ArrayXXd sig = 1.0 / (1.0 + (-z.array()).exp());
    return (sig * (1.0 + z.array() * (1.0 - sig))).matrix();
  }

  StateBatch run(const StateBatch& in, Cache& c) const {
    if (in.cols() != shape_.input_dim()) throw ArgumentError("TinyMlp: input width mismatch");
    c.z1.noalias() = in * w1().transpose();
    c.z1.rowwise() += b1();
    c.h1 = silu(c.z1);
    c.z2.noalias() = c.h1 * w2().transpose();
    c.z2.rowwise() += b2();
    c.h2 = silu(c.z2);
    StateBatch out = c.h2 * w3().transpose();
    out.rowwise() += b3();
    return out;
  }

  MlpShape shape_;
  Vector params_;
};

/// Predictor backed by a TinyMlp through the preconditioned head.
class MlpPredictor : public Predictor {
 public:
  MlpPredictor(TinyMlp net, DoSSchedule s) : net_(std::move(net)), schedule_(std::move(s)) {}

  const DoSSchedule& schedule() const override { return schedule_; }
  const TinyMlp& network() const { return net_; }

  StateBatch raw_output(const StateBatch& x_t, const StateBatch& xhat0, double t) const {
    check_input(x_t);
    return net_.forward(mlp_features(x_t, xhat0, Vector::Constant(x_t.rows(), t), schedule_, net_.shape().freqs));
  }

  StateBatch predict_noise(const StateBatch& x_t, const StateBatch& xhat0, double t) const override {
    const StateBatch f = raw_output(x_t, xhat0, t);
    const double a = schedule_.target_scale(t);
    const double sig = schedule_.sigma(t);
    const double n2 = a * a + sig * sig;
    return residual(x_t, xhat0, t) * (sig / n2) - (a / std::sqrt(n2)) * f;
  }

  StateBatch predict_data(const StateBatch& x_t, const StateBatch& xhat0, double t) const override {
    const StateBatch f = raw_output(x_t, xhat0, t);
    const double a = schedule_.target_scale(t);
    const double sig = schedule_.sigma(t);
    const double n2 = a * a + sig * sig;
    return residual(x_t, xhat0, t) * (a / n2) + (sig / std::sqrt(n2)) * f;
  }

 private:
  void check_input(const StateBatch& x_t) const {
    if (x_t.cols() != net_.shape().dim) throw ArgumentError("MlpPredictor: state dimension mismatch");
  }

  StateBatch residual(const StateBatch& x_t, const StateBatch& xhat0, double t) const {
    return x_t - schedule_.source_scale(t) * broadcast_rows(xhat0, x_t.rows(), "MlpPredictor");
  }

  TinyMlp net_;
  DoSSchedule schedule_;
};

enum class LossWeighting {
  unit_output,  // unit weight on the network output; w(t) = 1 + lambda^2 on the noise error
  unit_noise,   // unit weight on the noise error
};

inline LossWeighting parse_weighting(const std::string& name) {
  if (name == "unit-output") return LossWeighting::unit_output;
  if (name == "unit-noise") return LossWeighting::unit_noise;
  throw ConfigError("unknown loss weighting '" + name + "'");
}

inline const char* weighting_name(LossWeighting w) {
  return w == LossWeighting::unit_output ? "unit-output" : "unit-noise";
}

struct TrainConfig {
  int steps = 3000;
  int batch = 1024;
  double lr = 2e-3;
  double lr_final_fraction = 0.05;  // cosine decay to lr * fraction
  std::uint64_t seed = 0;
  int width = 64;
  int freqs = 8;
  LossWeighting weighting = LossWeighting::unit_output;
  int running_window = 20;
};

struct TrainResult {
  MlpPredictor predictor;
  std::vector<double> losses;  // per step
  double initial_running_loss;
  double final_running_loss;
};

/// Carries the last parameters that produced a finite loss.
struct TrainingDivergedError : TrainingError {
  TrainingDivergedError(const std::string& what, TinyMlp last_good, int step)
      : TrainingError(what), last_good_params(last_good.params()), shape(last_good.shape()), step(step) {}
  Vector last_good_params;
  MlpShape shape;
  int step;
};

struct TrainingBatch {
  StateBatch features;
  StateBatch target;
  Vector weights;  // empty for unit weights
};

/// Draws rows of the (x0, xhat0) dataset, times uniform on (0, t1] and fresh
/// noise, and forms the network inputs and regression targets.
inline TrainingBatch draw_training_batch(const StateBatch& x0, const StateBatch& xhat0, const DoSSchedule& s,
                                         int batch, int freqs, LossWeighting weighting, Rng& rng) {
  const Eigen::Index d = x0.cols();
  StateBatch xb(batch, d), sb(batch, d);
  Vector times(batch);
  std::uniform_int_distribution<Eigen::Index> pick(0, x0.rows() - 1);
  // stratified times: one shared offset, batch spread evenly over (0, t1]
  const double offset = rng.uniform();
  for (int i = 0; i < batch; ++i) {
    const Eigen::Index k = pick(rng.engine());
    xb.row(i) = x0.row(k);
    sb.row(i) = xhat0.row(k);
    times[i] = s.pivot() * (1.0 - (i + offset) / batch);
  }
  const StateBatch eps = rng.standard_normal(batch, d);
  StateBatch x_t(batch, d), target(batch, d);
  Vector weights;
  if (weighting == LossWeighting::unit_noise) weights.resize(batch);
  for (int i = 0; i < batch; ++i) {
    const double t = times[i];
    const double a = s.target_scale(t);
    const double sig = s.sigma(t);
    const double n = std::sqrt(a * a + sig * sig);
    x_t.row(i) = a * xb.row(i) + s.source_scale(t) * sb.row(i) + sig * eps.row(i);
    target.row(i) = (sig * xb.row(i) - a * eps.row(i)) / n;
    if (weighting == LossWeighting::unit_noise) weights[i] = a * a / (n * n);
  }
  return {mlp_features(x_t, sb, times, s, freqs), std::move(target), std::move(weights)};
}

/// Adam on the denoising objective over pairs (x0[i], xhat0[i]).
inline TrainResult train_noise_predictor(const StateBatch& x0, const StateBatch& xhat0, const DoSSchedule& s,
                                         const TrainConfig& cfg) {
  check_batch(x0, "train x0");
  check_same_shape(x0, xhat0, "train dataset");
  if (cfg.steps < 1 || cfg.batch < 1 || !(cfg.lr > 0.0) || cfg.running_window < 1) {
    throw ArgumentError("train: steps, batch, lr and window must be positive");
  }
  const MlpShape shape{static_cast<int>(x0.cols()), cfg.width, cfg.freqs};
  TinyMlp net = TinyMlp::initialize(shape, cfg.seed);
  Rng rng = Rng::stream(cfg.seed, 1);

  Vector m = Vector::Zero(shape.param_count());
  Vector v = Vector::Zero(shape.param_count());
  Vector grad(shape.param_count());
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::vector<double> losses;
  losses.reserve(cfg.steps);

  for (int step = 0; step < cfg.steps; ++step) {
    const TrainingBatch b = draw_training_batch(x0, xhat0, s, cfg.batch, cfg.freqs, cfg.weighting, rng);
    const double value = net.loss(b.features, b.target, b.weights, &grad);
    if (!std::isfinite(value) || !grad.allFinite()) {
      throw TrainingDivergedError("training diverged at step " + std::to_string(step) + " (loss " +
                                      std::to_string(value) + ")",
                                  net, step);
    }
    losses.push_back(value);
    const double progress = static_cast<double>(step) / cfg.steps;
    const double lr = cfg.lr * (cfg.lr_final_fraction +
                                (1.0 - cfg.lr_final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    m = beta1 * m + (1.0 - beta1) * grad;
    v = beta2 * v + (1.0 - beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1, step + 1);
    const double c2 = 1.0 - std::pow(beta2, step + 1);
    Vector next = net.params() - lr * ((m / c1).array() / ((v / c2).array().sqrt() + adam_eps)).matrix();
    if (!next.allFinite()) {
      throw TrainingDivergedError("non-finite parameters at step " + std::to_string(step), net, step);
    }
    net.set_params(std::move(next));
  }

  const int w = std::min<int>(cfg.running_window, static_cast<int>(losses.size()));
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < w; ++i) {
    head += losses[i];
    tail += losses[losses.size() - 1 - i];
  }
  return {MlpPredictor(std::move(net), s), std::move(losses), head / w, tail / w};
}

/// Running mean over the trailing `window` entries, one value per entry from
/// index window - 1 on.
inline std::vector<double> running_mean(const std::vector<double>& xs, int window) {
  std::vector<double> out;
  if (window < 1 || xs.size() < static_cast<std::size_t>(window)) return out;
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= static_cast<std::size_t>(window)) acc -= xs[i - window];
    if (i + 1 >= static_cast<std::size_t>(window)) out.push_back(acc / window);
  }
  return out;
}

// Predictor files: one line of JSON, then the parameters as raw
// little-endian float64.

inline constexpr const char* kMlpFormat = "shiftdiff-tinymlp";
inline constexpr int kMlpFormatVersion = 1;

inline nlohmann::json schedule_to_json(const DoSSchedule& s) {
  nlohmann::json j;
  const NoiseSchedule& n = s.noise();
  j["kind"] = n.kind() == NoiseKind::linear_beta ? "linear-beta" : "cosine";
  j["beta_min"] = n.beta_min();
  j["beta_max"] = n.beta_max();
  j["cosine_offset"] = n.cosine_offset();
  j["t1"] = s.pivot();
  j["shift"] = s.shift().shifting() ? "cosine" : "none";
  return j;
}

inline DoSSchedule schedule_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  const NoiseSchedule noise = kind == "cosine" ? NoiseSchedule::cosine(j.value("cosine_offset", 0.008))
                                               : NoiseSchedule::linear_beta(j.at("beta_min"), j.at("beta_max"));
  const double t1 = j.at("t1").get<double>();
  const bool shifting = j.value("shift", std::string("cosine")) == "cosine";
  return {noise, shifting ? ShiftingSequence::cosine(t1) : ShiftingSequence::none(t1)};
}

inline void save_predictor(const MlpPredictor& p, const std::string& path, std::uint64_t seed, double final_loss,
                           LossWeighting weighting) {
  const TinyMlp& net = p.network();
  nlohmann::json header;
  header["format"] = kMlpFormat;
  header["version"] = kMlpFormatVersion;
  header["d"] = net.shape().dim;
  header["W"] = net.shape().width;
  header["K"] = net.shape().freqs;
  header["seed"] = seed;
  header["loss"] = final_loss;
  header["loss_weighting"] = weighting_name(weighting);
  header["n_params"] = net.params().size();
  header["schedule"] = schedule_to_json(p.schedule());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write predictor file " + path);
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(net.params().data()),
            static_cast<std::streamsize>(net.params().size() * sizeof(double)));
  if (!out) throw IoError("failed writing predictor file " + path);
}

inline MlpPredictor load_predictor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("predictor file not found: " + path);
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("predictor file " + path + " has a malformed header: " + e.what());
  }
  if (header.value("format", std::string()) != kMlpFormat || header.value("version", 0) != kMlpFormatVersion) {
    throw ConfigError("predictor file " + path + " has an unsupported format");
  }
  const MlpShape shape{header.at("d").get<int>(), header.at("W").get<int>(), header.at("K").get<int>()};
  const auto count = header.at("n_params").get<Eigen::Index>();
  if (count != shape.param_count()) throw ConfigError("predictor file " + path + ": parameter count mismatch");
  Vector params(count);
  in.read(reinterpret_cast<char*>(params.data()), static_cast<std::streamsize>(count * sizeof(double)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(double))) {
    throw IoError("predictor file " + path + " is truncated");
  }
  return {TinyMlp(shape, std::move(params)), schedule_from_json(header.at("schedule"))};
}

}  // namespace shiftdiff
