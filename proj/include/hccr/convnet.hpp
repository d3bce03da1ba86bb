#pragma once

// A small deterministic convolutional network engine: 3x3 convolutions,
// 2x2 max-pooling, fully-connected layers, leaky-ReLU, inverted dropout and
// a softmax/NLL head. Templated on the scalar type (float for training runs,
// double for verification).

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "hccr/common.hpp"

namespace hccr::nn {

enum class LayerKind : std::uint8_t { conv = 0, maxpool = 1, dense = 2 };

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  int units = 0;  // output channels (conv) or units (dense)
  int kernel = 3;
  int padding = 1;
  int pool = 2;
  double dropout = 0.0;    // on this layer's activated output, train mode only
  bool activation = true;  // leaky-ReLU; false for the class layer

  static LayerSpec conv(int channels, double dropout = 0.0) { return {LayerKind::conv, channels, 3, 1, 2, dropout, true}; }
  static LayerSpec maxpool() { return {LayerKind::maxpool, 0, 0, 0, 2, 0.0, false}; }
  static LayerSpec dense(int units, double dropout = 0.0, bool activation = true) {
    return {LayerKind::dense, units, 0, 0, 0, dropout, activation};
  }

  bool has_params() const { return kind != LayerKind::maxpool; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct Shape {
  int c = 0, h = 0, w = 0;
  int size() const { return c * h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline constexpr double kLeakySlope = 1.0 / 3.0;
inline constexpr double kInitStddev = 0.01;
inline constexpr double kWeightDecay = 0.0005;

/// Dropout for hidden layers 1..10 of the full network.
inline constexpr std::array<double, 10> kFullDropout = {0.0, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.50, 0.0};

struct Architecture {
  Shape input{8, 32, 32};
  std::vector<LayerSpec> layers;
  double leaky_slope = kLeakySlope;

  /// Output shape of every layer (dense layers as units x 1 x 1).
  std::vector<Shape> shapes() const {
    std::vector<Shape> out;
    Shape s = input;
    for (const auto& l : layers) {
      switch (l.kind) {
        case LayerKind::conv:
          s = {l.units, s.h + 2 * l.padding - l.kernel + 1, s.w + 2 * l.padding - l.kernel + 1};
          break;
        case LayerKind::maxpool:
          s = {s.c, s.h / l.pool, s.w / l.pool};
          break;
        case LayerKind::dense:
          s = {l.units, 1, 1};
          break;
      }
      out.push_back(s);
    }
    return out;
  }

  Shape input_shape(std::size_t layer) const { return layer == 0 ? input : shapes()[layer - 1]; }

  int num_classes() const { return layers.empty() ? 0 : layers.back().units; }

  /// Width of the vector entering the first dense layer.
  int flatten_dim() const {
    const auto sh = shapes();
    for (std::size_t i = 0; i < layers.size(); ++i)
      if (layers[i].kind == LayerKind::dense) return i == 0 ? input.size() : sh[i - 1].size();
    return 0;
  }

  std::size_t weight_count(std::size_t i) const {
    const auto& l = layers[i];
    const Shape in = input_shape(i);
    if (l.kind == LayerKind::conv) return static_cast<std::size_t>(l.units) * in.c * l.kernel * l.kernel;
    if (l.kind == LayerKind::dense) return static_cast<std::size_t>(l.units) * in.size();
    return 0;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < layers.size(); ++i)
      n += weight_count(i) + (layers[i].has_params() ? static_cast<std::size_t>(layers[i].units) : 0);
    return n;
  }

  /// Last hidden dense layer: where the adaptation layer goes by default.
  int default_source_layer() const {
    for (int i = static_cast<int>(layers.size()) - 2; i >= 0; --i)
      if (layers[static_cast<std::size_t>(i)].kind == LayerKind::dense) return i;
    throw ConfigError("architecture has no hidden dense layer");
  }

  void validate() const {
    if (input.c < 1 || input.h < 1 || input.w < 1) throw ConfigError("input shape must be positive");
    if (layers.empty() || layers.back().kind != LayerKind::dense || layers.back().activation)
      throw ConfigError("architecture must end in a dense class layer without activation");
    Shape s = input;
    bool flat = false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (!(l.dropout >= 0 && l.dropout < 1)) throw ConfigError("dropout must be in [0, 1)");
      if (l.kind != LayerKind::dense && flat) throw ConfigError("spatial layer after a dense layer");
      if (l.kind == LayerKind::conv && (l.units < 1 || l.kernel < 1 || l.padding < 0 ||
                                        s.h + 2 * l.padding - l.kernel + 1 < 1 || s.w + 2 * l.padding - l.kernel + 1 < 1))
        throw ConfigError("invalid conv layer " + std::to_string(i));
      if (l.kind == LayerKind::maxpool && (l.pool < 1 || s.h / l.pool < 1 || s.w / l.pool < 1))
        throw ConfigError("invalid pool layer " + std::to_string(i));
      if (l.kind == LayerKind::dense) {
        if (l.units < 1) throw ConfigError("invalid dense layer " + std::to_string(i));
        flat = true;
      }
      s = shapes()[i];
    }
  }

  /// The 11-layer network: eight 3x3 conv layers 50..400 wide, a 2x2 pool
  /// after every second one, dense 900 and 200, then the class layer.
  static Architecture full(int classes = 3755, int directions = 8, int size = 32) {
    Architecture a;
    a.input = {directions, size, size};
    for (int i = 0; i < 8; ++i) {
      a.layers.push_back(LayerSpec::conv(50 * (i + 1), kFullDropout[static_cast<std::size_t>(i)]));
      if (i % 2 == 1) a.layers.push_back(LayerSpec::maxpool());
    }
    a.layers.push_back(LayerSpec::dense(900, kFullDropout[8]));
    a.layers.push_back(LayerSpec::dense(200, kFullDropout[9]));
    a.layers.push_back(LayerSpec::dense(classes, 0.0, false));
    return a;
  }

  /// Desk-scale network of the same layer pattern for CPU experiments.
  /// `dropout_scale` multiplies a monotone per-depth dropout schedule.
  static Architecture toy(int classes, int directions = 8, int size = 32, double dropout_scale = 0.0) {
    Architecture a;
    a.input = {directions, size, size};
    a.layers = {LayerSpec::conv(12),
                LayerSpec::maxpool(),
                LayerSpec::conv(16, 0.10 * dropout_scale),
                LayerSpec::maxpool(),
                LayerSpec::conv(24, 0.20 * dropout_scale),
                LayerSpec::maxpool(),
                LayerSpec::dense(64, 0.30 * dropout_scale),
                LayerSpec::dense(32),
                LayerSpec::dense(classes, 0.0, false)};
    return a;
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

// ---------------------------------------------------------------------------

enum class Mode { eval, train };

template <typename T>
class Network {
 public:
  Architecture arch;
  std::vector<std::vector<T>> weights;  // per layer; empty for pooling layers
  std::vector<std::vector<T>> biases;
  double input_scale = 1.0;  // rescale constant applied to every input

  Network() = default;
  explicit Network(Architecture a) : arch(std::move(a)) {
    arch.validate();
    for (std::size_t i = 0; i < arch.layers.size(); ++i) {
      weights.emplace_back(arch.weight_count(i), T(0));
      biases.emplace_back(arch.layers[i].has_params() ? static_cast<std::size_t>(arch.layers[i].units) : 0, T(0));
    }
  }

  /// Weights i.i.d. N(0, stddev^2) from a seeded generator, biases zero.
  static Network init(const Architecture& a, std::uint64_t seed, double stddev = kInitStddev) {
    Network net(a);
    std::mt19937_64 rng(mix_seed(seed, 0x696E6974));
    std::normal_distribution<double> normal(0.0, stddev);
    for (auto& w : net.weights)
      for (auto& v : w) v = static_cast<T>(normal(rng));
    return net;
  }

  int input_size() const { return arch.input.size(); }
  int num_classes() const { return arch.num_classes(); }

  template <typename U>
  Network<U> cast() const {
    Network<U> out(arch);
    for (std::size_t i = 0; i < weights.size(); ++i) {
      std::transform(weights[i].begin(), weights[i].end(), out.weights[i].begin(), [](T v) { return U(v); });
      std::transform(biases[i].begin(), biases[i].end(), out.biases[i].begin(), [](T v) { return U(v); });
    }
    out.input_scale = input_scale;
    return out;
  }

  friend bool operator==(const Network&, const Network&) = default;
};

// ---------------------------------------------------------------------------
// Kernels

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
void im2col(const T* x, const Shape& in, int k, int pad, int ho, int wo, T* cols) {
  for (int c = 0; c < in.c; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = cols + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * ho * wo;
        for (int y = 0; y < ho; ++y) {
          const int sy = y + ky - pad;
          T* dst = row + static_cast<std::size_t>(y) * wo;
          if (sy < 0 || sy >= in.h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::size_t>(c) * in.h + sy) * in.w;
          for (int xx = 0; xx < wo; ++xx) {
            const int sx = xx + kx - pad;
            dst[xx] = (sx >= 0 && sx < in.w) ? src[sx] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* cols, const Shape& in, int k, int pad, int ho, int wo, T* dx) {
  for (int c = 0; c < in.c; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * ho * wo;
        for (int y = 0; y < ho; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= in.h) continue;
          const T* src = row + static_cast<std::size_t>(y) * wo;
          T* dst = dx + (static_cast<std::size_t>(c) * in.h + sy) * in.w;
          for (int xx = 0; xx < wo; ++xx) {
            const int sx = xx + kx - pad;
            if (sx >= 0 && sx < in.w) dst[sx] += src[xx];
          }
        }
      }
}

template <typename T>
struct LayerCache {
  std::vector<T> out;       // batch x size, after activation and dropout
  std::vector<T> mask;      // dropout multipliers (0 or 1/(1-p)); empty when no dropout
  std::vector<int> argmax;  // pooling source index per output
};

/// Dropout stream for (seed, global sample index, layer): independent of
/// how a batch is split into chunks.
inline std::uint64_t dropout_seed(std::uint64_t seed, std::size_t sample, std::size_t layer) {
  return mix_seed(seed, sample, layer);
}

template <typename T>
void check_finite(std::span<const T> v, std::size_t layer) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw NumericError("non-finite activation at layer " + std::to_string(layer), static_cast<int>(layer));
}

/// Runs layers [first, last) on `count` samples. `in` is the output of
/// layer first-1 (or the raw input when first == 0, scaled by input_scale).
template <typename T>
std::vector<T> forward_range(const Network<T>& net, std::type_identity_t<std::span<const T>> in, int count, std::size_t first,
                             std::size_t last, Mode mode, std::uint64_t seed, std::size_t sample0,
                             std::type_identity_t<std::vector<LayerCache<T>>>* caches) {
  const auto& arch = net.arch;
  const auto shapes = arch.shapes();
  std::vector<T> cur(in.begin(), in.end());
  if (first == 0 && net.input_scale != 1.0)
    for (auto& v : cur) v *= static_cast<T>(net.input_scale);
  const T slope = static_cast<T>(arch.leaky_slope);
  std::vector<T> cols;

  for (std::size_t li = first; li < last; ++li) {
    const auto& l = arch.layers[li];
    const Shape is = arch.input_shape(li), os = shapes[li];
    std::vector<T> next(static_cast<std::size_t>(count) * os.size());
    LayerCache<T>* cache = caches ? &(*caches)[li] : nullptr;

    if (l.kind == LayerKind::conv) {
      const int ckk = is.c * l.kernel * l.kernel, hw = os.h * os.w;
      cols.resize(static_cast<std::size_t>(ckk) * hw);
      Eigen::Map<const RowMat<T>> W(net.weights[li].data(), l.units, ckk);
      Eigen::Map<const Vec<T>> b(net.biases[li].data(), l.units);
      for (int s = 0; s < count; ++s) {
        im2col(cur.data() + static_cast<std::size_t>(s) * is.size(), is, l.kernel, l.padding, os.h, os.w, cols.data());
        Eigen::Map<const RowMat<T>> C(cols.data(), ckk, hw);
        Eigen::Map<RowMat<T>> O(next.data() + static_cast<std::size_t>(s) * os.size(), l.units, hw);
        O.noalias() = W * C;
        O.colwise() += b;
      }
    } else if (l.kind == LayerKind::dense) {
      Eigen::Map<const RowMat<T>> W(net.weights[li].data(), l.units, is.size());
      Eigen::Map<const Vec<T>> b(net.biases[li].data(), l.units);
      Eigen::Map<const RowMat<T>> X(cur.data(), count, is.size());
      Eigen::Map<RowMat<T>> O(next.data(), count, l.units);
      O.noalias() = X * W.transpose();
      O.rowwise() += b.transpose();
    } else {
      const int p = l.pool;
      if (cache) cache->argmax.assign(next.size(), 0);
      for (int s = 0; s < count; ++s)
        for (int c = 0; c < os.c; ++c)
          for (int y = 0; y < os.h; ++y)
            for (int x = 0; x < os.w; ++x) {
              const std::size_t base = static_cast<std::size_t>(s) * is.size() + static_cast<std::size_t>(c) * is.h * is.w;
              std::size_t best = base + static_cast<std::size_t>(y * p) * is.w + x * p;
              for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx) {
                  const std::size_t idx = base + static_cast<std::size_t>(y * p + dy) * is.w + x * p + dx;
                  if (cur[idx] > cur[best]) best = idx;
                }
              const std::size_t o = static_cast<std::size_t>(s) * os.size() + (static_cast<std::size_t>(c) * os.h + y) * os.w + x;
              next[o] = cur[best];
              if (cache) cache->argmax[o] = static_cast<int>(best);
            }
    }

    if (l.has_params() && l.activation)
      for (auto& v : next)
        if (v < 0) v *= slope;

    if (mode == Mode::train && l.dropout > 0) {
      const T keep_scale = static_cast<T>(1.0 / (1.0 - l.dropout));
      std::vector<T> mask(next.size());
      const std::size_t per = static_cast<std::size_t>(os.size());
      for (int s = 0; s < count; ++s) {
        std::mt19937_64 rng(dropout_seed(seed, sample0 + static_cast<std::size_t>(s), li));
        for (std::size_t i = 0; i < per; ++i) {
          const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
          mask[s * per + i] = u >= l.dropout ? keep_scale : T(0);
        }
      }
      for (std::size_t i = 0; i < next.size(); ++i) next[i] *= mask[i];
      if (cache) cache->mask = std::move(mask);
    } else if (cache) {
      cache->mask.clear();
    }

    check_finite<T>(next, li);
    if (cache) cache->out = next;
    cur = std::move(next);
  }
  return cur;
}

}  // namespace detail

/// Numerically safe softmax: exp(s_i - s_max), normalized.
inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0;
  for (std::size_t i = 0; i < p.size(); ++i) sum += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= sum;
  return p;
}

/// Pre-softmax vector for one input.
template <typename T>
std::vector<double> logits(const Network<T>& net, std::span<const T> input, Mode mode = Mode::eval,
                           std::uint64_t seed = 0) {
  auto out = detail::forward_range(net, input, 1, 0, net.arch.layers.size(), mode, seed, 0, nullptr);
  return {out.begin(), out.end()};
}

/// Class probabilities for one input.
template <typename T>
std::vector<double> forward(const Network<T>& net, std::span<const T> input, Mode mode = Mode::eval,
                            std::uint64_t seed = 0) {
  const auto s = logits(net, input, mode, seed);
  return softmax(s);
}

/// Eval-mode output of layer `layer` (inclusive) for `count` inputs.
template <typename T>
std::vector<T> activations(const Network<T>& net, std::span<const T> inputs, int count, int layer) {
  return detail::forward_range(net, inputs, count, 0, static_cast<std::size_t>(layer) + 1, Mode::eval, 0, 0, nullptr);
}

/// Eval-mode logits when `act` replaces the output of layer `layer`.
template <typename T>
std::vector<T> logits_from(const Network<T>& net, std::span<const T> act, int count, int layer) {
  return detail::forward_range(net, act, count, static_cast<std::size_t>(layer) + 1, net.arch.layers.size(),
                               Mode::eval, 0, 0, nullptr);
}

// ---------------------------------------------------------------------------
// Gradient

template <typename T>
struct Gradients {
  std::vector<std::vector<T>> weights, biases;
  double loss = 0.0;  // mean negative log-likelihood (without the decay term)
  int correct = 0;    // argmax hits in the forward pass used for the gradient

  static Gradients zeros_like(const Network<T>& net) {
    Gradients g;
    for (std::size_t i = 0; i < net.weights.size(); ++i) {
      g.weights.emplace_back(net.weights[i].size(), T(0));
      g.biases.emplace_back(net.biases[i].size(), T(0));
    }
    return g;
  }
};

namespace detail {

inline constexpr int kChunk = 8;

/// Sum (not mean) of per-sample NLL gradients for one chunk.
template <typename T>
void backprop_chunk(const Network<T>& net, std::span<const T> x, std::span<const int> y, Mode mode,
                    std::uint64_t seed, std::size_t sample0, Gradients<T>& g) {
  const auto& arch = net.arch;
  const int count = static_cast<int>(y.size());
  const std::size_t L = arch.layers.size();
  std::vector<LayerCache<T>> caches(L);
  std::vector<T> input(x.begin(), x.end());
  if (net.input_scale != 1.0)
    for (auto& v : input) v *= static_cast<T>(net.input_scale);
  // forward_range applies input_scale itself, so it gets the raw input.
  const auto logits_v = forward_range(net, x, count, 0, L, mode, seed, sample0, &caches);

  const int C = arch.num_classes();
  std::vector<T> delta(logits_v.size());
  for (int s = 0; s < count; ++s) {
    std::vector<double> z(logits_v.begin() + static_cast<std::ptrdiff_t>(s) * C,
                          logits_v.begin() + static_cast<std::ptrdiff_t>(s + 1) * C);
    const auto p = softmax(z);
    const int label = y[static_cast<std::size_t>(s)];
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0;
    for (double v : z) sum += std::exp(v - mx);
    g.loss += mx + std::log(sum) - z[static_cast<std::size_t>(label)];
    if (std::max_element(z.begin(), z.end()) - z.begin() == label) ++g.correct;
    for (int c = 0; c < C; ++c)
      delta[static_cast<std::size_t>(s) * C + c] = static_cast<T>(p[static_cast<std::size_t>(c)] - (c == label ? 1.0 : 0.0));
  }

  const auto shapes = arch.shapes();
  const T slope = static_cast<T>(arch.leaky_slope);
  std::vector<T> cols, dcols;
  for (std::size_t li = L; li-- > 0;) {
    const auto& l = arch.layers[li];
    const auto& cache = caches[li];
    const Shape is = arch.input_shape(li), os = shapes[li];
    const std::vector<T>& in = li == 0 ? input : caches[li - 1].out;

    if (!cache.mask.empty())
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] *= cache.mask[i];
    if (l.has_params() && l.activation)
      for (std::size_t i = 0; i < delta.size(); ++i)
        if (cache.out[i] < 0) delta[i] *= slope;

    std::vector<T> dx(li == 0 ? 0 : static_cast<std::size_t>(count) * is.size(), T(0));
    if (l.kind == LayerKind::conv) {
      const int ckk = is.c * l.kernel * l.kernel, hw = os.h * os.w;
      cols.resize(static_cast<std::size_t>(ckk) * hw);
      dcols.resize(cols.size());
      Eigen::Map<const RowMat<T>> W(net.weights[li].data(), l.units, ckk);
      Eigen::Map<RowMat<T>> dW(g.weights[li].data(), l.units, ckk);
      Eigen::Map<Vec<T>> db(g.biases[li].data(), l.units);
      for (int s = 0; s < count; ++s) {
        im2col(in.data() + static_cast<std::size_t>(s) * is.size(), is, l.kernel, l.padding, os.h, os.w, cols.data());
        Eigen::Map<const RowMat<T>> Cm(cols.data(), ckk, hw);
        Eigen::Map<const RowMat<T>> D(delta.data() + static_cast<std::size_t>(s) * os.size(), l.units, hw);
        dW.noalias() += D * Cm.transpose();
        db += D.rowwise().sum();
        if (li > 0) {
          Eigen::Map<RowMat<T>> DC(dcols.data(), ckk, hw);
          DC.noalias() = W.transpose() * D;
          col2im(dcols.data(), is, l.kernel, l.padding, os.h, os.w, dx.data() + static_cast<std::size_t>(s) * is.size());
        }
      }
    } else if (l.kind == LayerKind::dense) {
      Eigen::Map<const RowMat<T>> W(net.weights[li].data(), l.units, is.size());
      Eigen::Map<RowMat<T>> dW(g.weights[li].data(), l.units, is.size());
      Eigen::Map<Vec<T>> db(g.biases[li].data(), l.units);
      Eigen::Map<const RowMat<T>> X(in.data(), count, is.size());
      Eigen::Map<const RowMat<T>> D(delta.data(), count, l.units);
      dW.noalias() += D.transpose() * X;
      db += D.colwise().sum().transpose();
      if (li > 0) {
        Eigen::Map<RowMat<T>> DX(dx.data(), count, is.size());
        DX.noalias() = D * W;
      }
    } else if (li > 0) {
      for (std::size_t o = 0; o < delta.size(); ++o) dx[static_cast<std::size_t>(cache.argmax[o])] += delta[o];
    }
    delta = std::move(dx);
  }
}

template <typename T>
void add_into(Gradients<T>& acc, const Gradients<T>& g) {
  for (std::size_t i = 0; i < acc.weights.size(); ++i) {
    for (std::size_t k = 0; k < acc.weights[i].size(); ++k) acc.weights[i][k] += g.weights[i][k];
    for (std::size_t k = 0; k < acc.biases[i].size(); ++k) acc.biases[i][k] += g.biases[i][k];
  }
  acc.loss += g.loss;
  acc.correct += g.correct;
}

}  // namespace detail

/// Gradient of mean NLL + (weight_decay / 2) * ||weights||^2 over a batch:
/// the decay enters as weight_decay * w on weights (not biases). Dropout
/// masks are fixed by (seed, sample0 + index). The batch is processed in
/// fixed chunks of 8 samples whose sums are reduced in chunk order, so the
/// result does not depend on `jobs`.
template <typename T>
Gradients<T> gradient(const Network<T>& net, std::span<const T> inputs, std::span<const int> labels,
                      std::uint64_t seed, Mode mode = Mode::train, double weight_decay = kWeightDecay,
                      int jobs = 1, std::size_t sample0 = 0) {
  const int count = static_cast<int>(labels.size());
  const int in_size = net.input_size();
  if (count < 1) throw std::invalid_argument("gradient: empty batch");
  if (inputs.size() != static_cast<std::size_t>(count) * in_size) throw std::invalid_argument("gradient: input size");
  for (int y : labels)
    if (y < 0 || y >= net.num_classes()) throw std::invalid_argument("gradient: label out of range");

  const int chunks = (count + detail::kChunk - 1) / detail::kChunk;
  std::vector<Gradients<T>> parts(static_cast<std::size_t>(chunks));
  auto run = [&](int c) {
    const int b = c * detail::kChunk, e = std::min(count, b + detail::kChunk);
    auto& g = parts[static_cast<std::size_t>(c)];
    g = Gradients<T>::zeros_like(net);
    detail::backprop_chunk(net, inputs.subspan(static_cast<std::size_t>(b) * in_size, static_cast<std::size_t>(e - b) * in_size),
                           labels.subspan(static_cast<std::size_t>(b), static_cast<std::size_t>(e - b)), mode, seed,
                           sample0 + static_cast<std::size_t>(b), g);
  };
  if (jobs <= 1 || chunks == 1) {
    for (int c = 0; c < chunks; ++c) run(c);
  } else {
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
    std::vector<std::thread> pool;
    for (int j = 0; j < std::min(jobs, chunks); ++j)
      pool.emplace_back([&, j] {
        try {
          for (int c; (c = next++) < chunks;) run(c);
        } catch (...) {
          errors[static_cast<std::size_t>(j)] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  Gradients<T> total = std::move(parts[0]);
  for (std::size_t c = 1; c < parts.size(); ++c) detail::add_into(total, parts[c]);
  const T inv = static_cast<T>(1.0 / count);
  const T wd = static_cast<T>(weight_decay);
  for (std::size_t i = 0; i < total.weights.size(); ++i) {
    for (std::size_t k = 0; k < total.weights[i].size(); ++k)
      total.weights[i][k] = total.weights[i][k] * inv + wd * net.weights[i][k];
    for (auto& v : total.biases[i]) v *= inv;
  }
  total.loss /= count;
  if (!std::isfinite(total.loss)) throw NumericError("non-finite loss", -1);
  return total;
}

// ---------------------------------------------------------------------------
// Data

/// Flat float samples with labels.
struct TensorSet {
  int sample_size = 0;
  std::vector<float> data;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const float> sample(std::size_t i) const {
    return {data.data() + i * static_cast<std::size_t>(sample_size), static_cast<std::size_t>(sample_size)};
  }
  void add(std::span<const float> x, int label) {
    if (sample_size == 0) sample_size = static_cast<int>(x.size());
    if (x.size() != static_cast<std::size_t>(sample_size)) throw std::invalid_argument("TensorSet: sample size mismatch");
    data.insert(data.end(), x.begin(), x.end());
    labels.push_back(label);
  }
};

template <typename T>
std::vector<T> gather(const TensorSet& set, std::span<const std::size_t> idx) {
  std::vector<T> out;
  out.reserve(idx.size() * static_cast<std::size_t>(set.sample_size));
  for (auto i : idx) {
    auto s = set.sample(i);
    for (float v : s) out.push_back(static_cast<T>(v));
  }
  return out;
}

/// Eval-mode class probabilities for every sample in the set (row-major).
template <typename T>
std::vector<double> predict_all(const Network<T>& net, const TensorSet& set, int batch = 64) {
  std::vector<double> out;
  out.reserve(set.size() * static_cast<std::size_t>(net.num_classes()));
  for (std::size_t b = 0; b < set.size(); b += static_cast<std::size_t>(batch)) {
    const std::size_t e = std::min(set.size(), b + static_cast<std::size_t>(batch));
    std::vector<std::size_t> idx(e - b);
    std::iota(idx.begin(), idx.end(), b);
    const auto x = gather<T>(set, idx);
    const auto z = detail::forward_range(net, std::span<const T>(x), static_cast<int>(e - b), 0, net.arch.layers.size(),
                                         Mode::eval, 0, 0, nullptr);
    const int C = net.num_classes();
    for (std::size_t s = 0; s < e - b; ++s) {
      std::vector<double> zs(z.begin() + static_cast<std::ptrdiff_t>(s * C), z.begin() + static_cast<std::ptrdiff_t>((s + 1) * C));
      const auto p = softmax(zs);
      out.insert(out.end(), p.begin(), p.end());
    }
  }
  return out;
}

/// Indices of the n largest entries, ties to the lower index.
inline std::vector<int> top_n(std::span<const double> probs, int n) {
  std::vector<int> idx(probs.size());
  std::iota(idx.begin(), idx.end(), 0);
  n = std::min<int>(n, static_cast<int>(idx.size()));
  std::partial_sort(idx.begin(), idx.begin() + n, idx.end(), [&](int a, int b) {
    return probs[static_cast<std::size_t>(a)] > probs[static_cast<std::size_t>(b)] ||
           (probs[static_cast<std::size_t>(a)] == probs[static_cast<std::size_t>(b)] && a < b);
  });
  idx.resize(static_cast<std::size_t>(n));
  return idx;
}

inline int argmax(std::span<const double> probs) { return top_n(probs, 1).front(); }

template <typename T>
double accuracy(const Network<T>& net, const TensorSet& set) {
  if (set.size() == 0) return 0.0;
  const auto p = predict_all(net, set);
  const auto C = static_cast<std::size_t>(net.num_classes());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < set.size(); ++i)
    hits += argmax(std::span(p).subspan(i * C, C)) == set.labels[i];
  return double(hits) / double(set.size());
}

// ---------------------------------------------------------------------------
// Ensembles

/// Cellwise mean of the members' probability vectors.
template <typename T>
std::vector<double> ensemble_probabilities(std::span<const Network<T>> members, std::span<const T> input) {
  if (members.empty()) throw ConfigError("ensemble needs at least one model");
  std::vector<double> acc(static_cast<std::size_t>(members[0].num_classes()), 0.0);
  for (const auto& m : members) {
    if (!(m.arch == members[0].arch)) throw ConfigError("ensemble members differ in architecture");
    const auto p = forward(m, input);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
  }
  for (auto& v : acc) v /= static_cast<double>(members.size());
  return acc;
}

template <typename T>
std::vector<int> predict_top_n(std::span<const Network<T>> members, std::span<const T> input, int n) {
  if (n < 1) throw ConfigError("top-N needs N >= 1");
  const auto p = ensemble_probabilities(members, input);
  return top_n(p, n);
}

}  // namespace hccr::nn
