#pragma once

// Rescale-constant estimation, mini-batch SGD with momentum and a plateau
// learning-rate schedule, and the HCNN checkpoint format.

#include <cmath>
#include <cstring>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "hccr/common.hpp"
#include "hccr/convnet.hpp"

namespace hccr::nn {

struct RescaleConstant {
  double v = 1.0;
  double delta = 0.0;  // averaged s_max - s_mean it was derived from
};

/// v = -ln(0.8) / delta. Throws NumericError unless delta is finite and > 0.
inline RescaleConstant rescale_from_gap(double delta) {
  if (!std::isfinite(delta) || delta <= 0) throw NumericError("degenerate logit gap for rescaling", -1);
  return {-std::log(0.8) / delta, delta};
}

/// Average of s_max - s_mean over the pre-softmax vectors.
inline double mean_logit_gap(std::span<const double> logits, std::size_t classes) {
  if (classes == 0 || logits.empty() || logits.size() % classes) throw std::invalid_argument("mean_logit_gap: shape");
  const std::size_t count = logits.size() / classes;
  double acc = 0;
  for (std::size_t s = 0; s < count; ++s) {
    auto z = logits.subspan(s * classes, classes);
    double mx = z[0], sum = 0;
    for (double v : z) mx = std::max(mx, v), sum += v;
    acc += mx - sum / static_cast<double>(classes);
  }
  return acc / static_cast<double>(count);
}

inline constexpr std::size_t kRescaleSubsample = 10000;

/// Estimates the rescale constant on up to `max_samples` maps (evenly
/// strided over the set; 0 means all) with input_scale temporarily 1.
template <typename T>
RescaleConstant estimate_rescale(const Network<T>& net, const TensorSet& set, std::size_t max_samples = kRescaleSubsample) {
  for (const auto& b : net.biases)
    for (T v : b)
      if (v != T(0)) throw std::invalid_argument("estimate_rescale expects zero biases");
  if (set.size() == 0) throw NumericError("empty estimation set", -1);
  const std::size_t n = max_samples == 0 ? set.size() : std::min(set.size(), max_samples);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i * set.size() / n;
  Network<T> probe = net;
  probe.input_scale = 1.0;
  std::vector<double> all;
  for (std::size_t b = 0; b < n; b += 64) {
    const std::size_t e = std::min(n, b + 64);
    const auto x = gather<T>(set, std::span(idx).subspan(b, e - b));
    const auto z = detail::forward_range(probe, std::span<const T>(x), static_cast<int>(e - b), 0,
                                         probe.arch.layers.size(), Mode::eval, 0, 0, nullptr);
    all.insert(all.end(), z.begin(), z.end());
  }
  return rescale_from_gap(mean_logit_gap(all, static_cast<std::size_t>(net.num_classes())));
}

// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 1000;
  double momentum = 0.9;
  double learning_rate = 0.005;
  double decay_factor = 0.3;
  double weight_decay = kWeightDecay;
  int patience = 2;
  int max_decays = 3;
  int max_epochs = 100;
  std::uint64_t seed = 1;
  int jobs = 1;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(momentum > 0 && momentum < 1)) throw ConfigError("momentum must be in (0, 1)");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
    if (!(decay_factor > 0 && decay_factor < 1)) throw ConfigError("decay_factor must be in (0, 1)");
    if (!(weight_decay > 0)) throw ConfigError("weight_decay must be positive");
    if (patience < 1) throw ConfigError("patience must be positive");
    if (max_decays < 1) throw ConfigError("max_decays must be positive");
    if (max_epochs < 1) throw ConfigError("max_epochs must be positive");
    if (jobs < 1) throw ConfigError("jobs must be positive");
  }
};

/// Multiplies the rate by `factor` once the best training accuracy has not
/// improved for `patience` epochs; stops `patience` epochs after the last
/// allowed decay.
class PlateauSchedule {
 public:
  enum class Step { keep, decay, stop };

  PlateauSchedule(double lr, double factor, int patience, int max_decays)
      : lr_(lr), factor_(factor), patience_(patience), max_decays_(max_decays) {}

  Step observe(double train_accuracy) {
    if (train_accuracy > best_) {
      best_ = train_accuracy;
      stale_ = 0;
    } else {
      ++stale_;
    }
    ++since_decay_;
    if (decays_ == max_decays_) return since_decay_ >= patience_ ? Step::stop : Step::keep;
    if (stale_ >= patience_) {
      lr_ *= factor_;
      ++decays_;
      stale_ = 0;
      since_decay_ = 0;
      return Step::decay;
    }
    return Step::keep;
  }

  double lr() const { return lr_; }
  int decays() const { return decays_; }

 private:
  double lr_, factor_;
  int patience_, max_decays_;
  double best_ = -1.0;
  int stale_ = 0, since_decay_ = 0, decays_ = 0;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double learning_rate = 0;
  double loss = 0;
  double train_accuracy = 0;  // train-mode accuracy accumulated over the epoch
  std::optional<double> test_accuracy;
  bool decayed = false;  // rate dropped after this epoch
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<int> decay_epochs;
  bool stopped_by_schedule = false;
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, TrainLog log) : NumericError(what, -1), log_(std::move(log)) {}
  const TrainLog& log() const { return log_; }

 private:
  TrainLog log_;
};

/// One momentum step: velocity = mu * velocity - lr * g; w += velocity.
template <typename T>
void momentum_step(Network<T>& net, Gradients<T>& velocity, const Gradients<T>& g, double lr, double mu) {
  const T m = static_cast<T>(mu), a = static_cast<T>(lr);
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    for (std::size_t k = 0; k < net.weights[i].size(); ++k) {
      velocity.weights[i][k] = m * velocity.weights[i][k] - a * g.weights[i][k];
      net.weights[i][k] += velocity.weights[i][k];
    }
    for (std::size_t k = 0; k < net.biases[i].size(); ++k) {
      velocity.biases[i][k] = m * velocity.biases[i][k] - a * g.biases[i][k];
      net.biases[i][k] += velocity.biases[i][k];
    }
  }
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains in place. Each epoch draws a fresh permutation from
/// (seed, epoch); dropout masks come from (seed, epoch, batch).
template <typename T>
TrainLog fit(Network<T>& net, const TrainConfig& cfg, const TensorSet& train, const TensorSet* test = nullptr,
             const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train.size() == 0) throw std::invalid_argument("fit: empty training set");
  if (train.sample_size != net.input_size()) throw std::invalid_argument("fit: sample size mismatch");
  TrainLog log;
  PlateauSchedule sched(cfg.learning_rate, cfg.decay_factor, cfg.patience, cfg.max_decays);
  auto velocity = Gradients<T>::zeros_like(net);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x73687566, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.learning_rate = sched.lr();
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t b = 0, batch = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size), ++batch) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      const auto idx = std::span(order).subspan(b, e - b);
      const auto x = gather<T>(train, idx);
      std::vector<int> y;
      for (auto i : idx) y.push_back(train.labels[i]);
      Gradients<T> g;
      try {
        g = gradient(net, std::span<const T>(x), std::span<const int>(y),
                     mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), batch), Mode::train, cfg.weight_decay, cfg.jobs);
      } catch (const NumericError& err) {
        throw TrainingDiverged(std::string("training diverged in epoch ") + std::to_string(epoch) + ": " + err.what(), log);
      }
      loss_sum += g.loss * static_cast<double>(e - b);
      correct += static_cast<std::size_t>(g.correct);
      momentum_step(net, velocity, g, sched.lr(), cfg.momentum);
    }
    rec.loss = loss_sum / static_cast<double>(train.size());
    rec.train_accuracy = double(correct) / double(train.size());
    if (test) rec.test_accuracy = accuracy(net, *test);
    const auto step = sched.observe(rec.train_accuracy);
    rec.decayed = step == PlateauSchedule::Step::decay;
    if (rec.decayed) log.decay_epochs.push_back(epoch);
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (step == PlateauSchedule::Step::stop) {
      log.stopped_by_schedule = true;
      break;
    }
  }
  return log;
}

// ---------------------------------------------------------------------------
// Checkpoint: "HCNN" u32 version, u32 c,h,w, f64 leaky slope, u32 layer
// count, per layer (u8 kind, u32 units, u32 kernel, u32 padding, u32 pool,
// f32 dropout, u8 activation), f64 input scale, then every layer's weights
// and biases as f32.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
Bytes serialize_checkpoint(const Network<T>& net) {
  Bytes out = {'H', 'C', 'N', 'N'};
  le::put<std::uint32_t>(out, kCheckpointVersion);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(net.arch.input.c));
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(net.arch.input.h));
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(net.arch.input.w));
  le::put<double>(out, net.arch.leaky_slope);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(net.arch.layers.size()));
  for (const auto& l : net.arch.layers) {
    le::put<std::uint8_t>(out, static_cast<std::uint8_t>(l.kind));
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.units));
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.kernel));
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.padding));
    le::put<std::uint32_t>(out, static_cast<std::uint32_t>(l.pool));
    le::put<float>(out, static_cast<float>(l.dropout));
    le::put<std::uint8_t>(out, l.activation ? 1 : 0);
  }
  le::put<double>(out, net.input_scale);
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    for (T v : net.weights[i]) le::put<float>(out, static_cast<float>(v));
    for (T v : net.biases[i]) le::put<float>(out, static_cast<float>(v));
  }
  return out;
}

template <typename T = float>
Network<T> parse_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), "HCNN", 4) != 0) throw DataError("bad checkpoint magic", 0);
  if (r.get<std::uint32_t>("version") != kCheckpointVersion) throw DataError("unsupported checkpoint version", 4);
  Architecture a;
  a.input.c = static_cast<int>(r.get<std::uint32_t>("channels"));
  a.input.h = static_cast<int>(r.get<std::uint32_t>("height"));
  a.input.w = static_cast<int>(r.get<std::uint32_t>("width"));
  a.leaky_slope = r.get<double>("leaky slope");
  const auto count = r.get<std::uint32_t>("layer count");
  if (count > 1024) throw DataError("implausible layer count", r.offset());
  for (std::uint32_t i = 0; i < count; ++i) {
    LayerSpec l;
    const auto kind = r.get<std::uint8_t>("layer kind");
    if (kind > 2) throw DataError("unknown layer kind", r.offset() - 1);
    l.kind = static_cast<LayerKind>(kind);
    l.units = static_cast<int>(r.get<std::uint32_t>("units"));
    l.kernel = static_cast<int>(r.get<std::uint32_t>("kernel"));
    l.padding = static_cast<int>(r.get<std::uint32_t>("padding"));
    l.pool = static_cast<int>(r.get<std::uint32_t>("pool"));
    l.dropout = r.get<float>("dropout");
    const auto act = r.get<std::uint8_t>("activation");
    if (act > 1) throw DataError("bad activation flag", r.offset() - 1);
    l.activation = act == 1;
    a.layers.push_back(l);
  }
  try {
    a.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("invalid architecture in checkpoint: ") + e.what(), r.offset());
  }
  if (a.parameter_count() * 4 != r.remaining() - 8) {
    if (r.remaining() < 8 || a.parameter_count() * 4 > r.remaining() - 8)
      throw DataError("truncated checkpoint", r.offset());
    throw DataError("trailing bytes in checkpoint", r.offset());
  }
  Network<T> net(a);
  net.input_scale = r.get<double>("input scale");
  if (!std::isfinite(net.input_scale) || net.input_scale <= 0) throw DataError("bad input scale", r.offset() - 8);
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    for (auto& v : net.weights[i]) v = static_cast<T>(r.get<float>("weight"));
    for (auto& v : net.biases[i]) v = static_cast<T>(r.get<float>("bias"));
  }
  return net;
}

}  // namespace hccr::nn
