#pragma once

// Writer adaptation: an affine layer (A, b) inserted after a source layer,
// fitted in closed form toward class means with confidence weights, and
// refined by self-training on unlabeled samples.

#include <cmath>
#include <cstring>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "hccr/common.hpp"
#include "hccr/convnet.hpp"

namespace hccr::adapt {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct ClassMeans {
  MatrixXd means;  // classes x d; rows of undefined classes are zero
  std::vector<std::size_t> counts;

  bool defined(int c) const { return c >= 0 && c < static_cast<int>(counts.size()) && counts[static_cast<std::size_t>(c)] > 0; }
  int dim() const { return static_cast<int>(means.cols()); }
};

/// Per-class means of the rows of `features` (0-based labels).
inline ClassMeans class_means(const MatrixXd& features, std::span<const int> labels, int classes) {
  if (static_cast<std::size_t>(features.rows()) != labels.size()) throw std::invalid_argument("class_means: row/label count");
  ClassMeans m{MatrixXd::Zero(classes, features.cols()), std::vector<std::size_t>(static_cast<std::size_t>(classes), 0)};
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= classes) throw DataError("label out of range");
    m.means.row(y) += features.row(i);
    ++m.counts[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < classes; ++c)
    if (m.counts[static_cast<std::size_t>(c)]) m.means.row(c) /= static_cast<double>(m.counts[static_cast<std::size_t>(c)]);
  return m;
}

struct StyleTransform {
  MatrixXd A;
  VectorXd b;

  static StyleTransform identity(int d) { return {MatrixXd::Identity(d, d), VectorXd::Zero(d)}; }
  int dim() const { return static_cast<int>(b.size()); }

  VectorXd apply(const VectorXd& phi) const {
    if (phi.size() != b.size()) throw std::invalid_argument("StyleTransform: dimension mismatch");
    return A * phi + b;
  }
  /// Row-wise application to an n x d matrix.
  MatrixXd apply_rows(const MatrixXd& phi) const {
    if (phi.cols() != b.size()) throw std::invalid_argument("StyleTransform: dimension mismatch");
    return (phi * A.transpose()).rowwise() + b.transpose();
  }
  bool is_identity() const { return A == MatrixXd::Identity(A.rows(), A.cols()) && b.isZero(0); }
};

/// sum_i f_i ||A phi_i + b - t_i||^2 + beta ||A - I||_F^2 + gamma ||b||^2
inline double stm_objective(const StyleTransform& T, const MatrixXd& phi, const MatrixXd& targets, const VectorXd& f,
                            double beta, double gamma) {
  const MatrixXd r = T.apply_rows(phi) - targets;
  double J = 0;
  for (Eigen::Index i = 0; i < r.rows(); ++i) J += f(i) * r.row(i).squaredNorm();
  J += beta * (T.A - MatrixXd::Identity(T.A.rows(), T.A.cols())).squaredNorm() + gamma * T.b.squaredNorm();
  return J;
}

/// ||dJ/dA||_F + ||dJ/db|| at T.
inline double stm_kkt_residual(const StyleTransform& T, const MatrixXd& phi, const MatrixXd& targets, const VectorXd& f,
                               double beta, double gamma) {
  const MatrixXd r = T.apply_rows(phi) - targets;  // n x d
  const MatrixXd fr = f.asDiagonal() * r;
  const MatrixXd gA = 2 * fr.transpose() * phi + 2 * beta * (T.A - MatrixXd::Identity(T.A.rows(), T.A.cols()));
  const VectorXd gb = 2 * fr.colwise().sum().transpose() + 2 * gamma * T.b;
  return gA.norm() + gb.norm();
}

/// Stationary point of stm_objective: b = (t_bar - A phi_bar) / (f + gamma),
/// A = Q P^-1.
inline StyleTransform solve_stm(const MatrixXd& phi, const MatrixXd& targets, const VectorXd& f, double beta, double gamma) {
  const auto n = phi.rows(), d = phi.cols();
  if (n < 1) throw std::invalid_argument("solve_stm: no samples");
  if (targets.rows() != n || targets.cols() != d || f.size() != n) throw std::invalid_argument("solve_stm: shape mismatch");
  if (!phi.allFinite() || !targets.allFinite() || !f.allFinite() || !std::isfinite(beta) || !std::isfinite(gamma))
    throw NumericError("solve_stm: non-finite input", 0);
  if (beta < 0 || gamma < 0) throw std::invalid_argument("solve_stm: negative regularization");
  for (Eigen::Index i = 0; i < n; ++i)
    if (f(i) < 0 || f(i) > 1) throw std::invalid_argument("solve_stm: confidence outside [0, 1]");

  const double fs = f.sum();
  const VectorXd phibar = phi.transpose() * f;
  const VectorXd tbar = targets.transpose() * f;
  const MatrixXd Fphi = f.asDiagonal() * phi;
  const double inv = fs + gamma > 0 ? 1.0 / (fs + gamma) : 0.0;
  MatrixXd P = phi.transpose() * Fphi - inv * phibar * phibar.transpose();
  MatrixXd Q = targets.transpose() * Fphi - inv * tbar * phibar.transpose();
  P.diagonal().array() += beta;
  Q.diagonal().array() += beta;
  P = 0.5 * (P + P.transpose());

  StyleTransform T;
  if (beta > 0) {
    Eigen::LLT<MatrixXd> llt(P);
    if (llt.info() != Eigen::Success) throw NumericError("solve_stm: P not positive definite", 0);
    T.A = llt.solve(Q.transpose()).transpose();
  } else {
    Eigen::FullPivLU<MatrixXd> lu(P);
    if (!lu.isInvertible()) throw NumericError("solve_stm: singular P", 0);
    T.A = lu.solve(Q.transpose()).transpose();
  }
  T.b = inv * (tbar - T.A * phibar);
  if (!T.A.allFinite() || !T.b.allFinite()) throw NumericError("solve_stm: non-finite solution", 0);
  return T;
}

/// beta = (beta_tilde / (1 - beta_tilde)) * (1/d) * sum_i f_i ||phi_i||^2
inline double beta_from_ratio(double beta_tilde, const MatrixXd& phi, const VectorXd& f) {
  if (!(beta_tilde >= 0 && beta_tilde < 1)) throw ConfigError("beta_tilde must be in [0, 1)");
  const double energy = (phi.rowwise().squaredNorm().array() * f.array()).sum();
  return beta_tilde / (1 - beta_tilde) * energy / static_cast<double>(phi.cols());
}

/// (err_initial - err_adapted) / err_initial; empty when err_initial == 0.
inline std::optional<double> error_reduction_rate(double err_initial, double err_adapted) {
  if (err_initial < 0 || err_adapted < 0) throw std::invalid_argument("error rates must be non-negative");
  if (err_initial == 0) return std::nullopt;
  return (err_initial - err_adapted) / err_initial;
}

struct AdaptConfig {
  double beta_tilde = 0.2;
  double gamma = 0.0;
  int iterations = 3;
  std::optional<double> beta;  // overrides the data-derived beta

  void validate() const {
    if (!(beta_tilde >= 0 && beta_tilde < 1)) throw ConfigError("beta_tilde must be in [0, 1)");
    if (!(gamma >= 0)) throw ConfigError("gamma must be non-negative");
    if (iterations < 1) throw ConfigError("iterations must be positive");
    if (beta && !(*beta >= 0)) throw ConfigError("beta must be non-negative");
  }
};

struct AdaptResult {
  std::vector<int> initial_predictions;
  std::vector<int> predictions;
  std::vector<double> confidences;  // softmax max with the final transform
  StyleTransform transform;
  std::size_t skipped = 0;  // samples dropped in the last solve (undefined class mean)
};

/// Source-layer features of `count` inputs, one row each.
template <typename T>
MatrixXd source_features(const nn::Network<T>& net, std::span<const T> inputs, int count, int layer) {
  const auto act = nn::activations(net, inputs, count, layer);
  const auto d = static_cast<Eigen::Index>(act.size() / static_cast<std::size_t>(count));
  MatrixXd out(count, d);
  for (Eigen::Index i = 0; i < count; ++i)
    for (Eigen::Index j = 0; j < d; ++j) out(i, j) = static_cast<double>(act[static_cast<std::size_t>(i * d + j)]);
  return out;
}

/// Predictions and max-softmax confidences with `T` inserted after `layer`.
template <typename Net>
void predict_adapted(const Net& net, const MatrixXd& phi, const StyleTransform& T, int layer, std::vector<int>& pred,
                     std::vector<double>& conf) {
  using S = typename std::remove_cvref_t<decltype(net.weights[0])>::value_type;
  const MatrixXd z = T.apply_rows(phi);
  std::vector<S> act(static_cast<std::size_t>(z.size()));
  for (Eigen::Index i = 0; i < z.rows(); ++i)
    for (Eigen::Index j = 0; j < z.cols(); ++j) act[static_cast<std::size_t>(i * z.cols() + j)] = static_cast<S>(z(i, j));
  const auto logits = nn::logits_from(net, std::span<const S>(act), static_cast<int>(z.rows()), layer);
  const auto C = static_cast<std::size_t>(net.num_classes());
  pred.assign(static_cast<std::size_t>(z.rows()), 0);
  conf.assign(static_cast<std::size_t>(z.rows()), 0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    std::vector<double> s(logits.begin() + static_cast<std::ptrdiff_t>(i * C), logits.begin() + static_cast<std::ptrdiff_t>((i + 1) * C));
    const auto p = nn::softmax(s);
    pred[i] = nn::argmax(p);
    conf[i] = p[static_cast<std::size_t>(pred[i])];
  }
}

/// Self-training: `iterations` rounds of predict-with-current-transform then
/// re-solve, followed by a final prediction. The network is not modified.
template <typename T>
AdaptResult adapt_unsupervised(const nn::Network<T>& net, const ClassMeans& means, std::span<const T> inputs, int count,
                               int layer, const AdaptConfig& cfg) {
  cfg.validate();
  if (count < 1) throw std::invalid_argument("adapt_unsupervised: no samples");
  const MatrixXd phi = source_features(net, inputs, count, layer);
  if (phi.cols() != means.dim()) throw std::invalid_argument("adapt_unsupervised: class means live on another layer");
  AdaptResult res;
  res.transform = StyleTransform::identity(static_cast<int>(phi.cols()));
  std::vector<int> pred;
  std::vector<double> conf;
  for (int it = 0; it < cfg.iterations; ++it) {
    predict_adapted(net, phi, res.transform, layer, pred, conf);
    if (it == 0) res.initial_predictions = pred;
    std::vector<Eigen::Index> keep;
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (means.defined(pred[i])) keep.push_back(static_cast<Eigen::Index>(i));
    res.skipped = pred.size() - keep.size();
    if (keep.empty()) break;
    MatrixXd P(static_cast<Eigen::Index>(keep.size()), phi.cols()), Tg(P.rows(), P.cols());
    VectorXd f(P.rows());
    for (Eigen::Index r = 0; r < P.rows(); ++r) {
      const auto i = keep[static_cast<std::size_t>(r)];
      P.row(r) = phi.row(i);
      Tg.row(r) = means.means.row(pred[static_cast<std::size_t>(i)]);
      f(r) = conf[static_cast<std::size_t>(i)];
    }
    const double beta = cfg.beta ? *cfg.beta : beta_from_ratio(cfg.beta_tilde, P, f);
    res.transform = solve_stm(P, Tg, f, beta, cfg.gamma);
  }
  predict_adapted(net, phi, res.transform, layer, res.predictions, res.confidences);
  return res;
}

// ---------------------------------------------------------------------------
// STMA file: "STMA" u32 d, A row-major f64, b f64.

inline Bytes serialize_stma(const StyleTransform& T) {
  const auto d = T.b.size();
  if (T.A.rows() != d || T.A.cols() != d) throw std::invalid_argument("StyleTransform: shape mismatch");
  Bytes out = {'S', 'T', 'M', 'A'};
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) le::put<double>(out, T.A(i, j));
  for (Eigen::Index i = 0; i < d; ++i) le::put<double>(out, T.b(i));
  return out;
}

inline StyleTransform parse_stma(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.take(4, "STMA magic");
  if (std::memcmp(magic.data(), "STMA", 4) != 0) throw DataError("bad STMA magic", 0);
  const auto d = r.get<std::uint32_t>("STMA dimension");
  if (d == 0) throw DataError("STMA dimension is zero", 4);
  const std::uint64_t need = (static_cast<std::uint64_t>(d) * d + d) * 8;
  if (r.remaining() != need) throw DataError(r.remaining() < need ? "truncated STMA payload" : "trailing bytes after STMA", r.offset());
  StyleTransform T{MatrixXd(d, d), VectorXd(d)};
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < d; ++j) T.A(i, j) = r.get<double>("STMA A");
  for (Eigen::Index i = 0; i < d; ++i) T.b(i) = r.get<double>("STMA b");
  if (!T.A.allFinite() || !T.b.allFinite()) throw DataError("non-finite STMA entries");
  return T;
}

}  // namespace hccr::adapt
