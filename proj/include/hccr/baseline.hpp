#pragma once

// Traditional pipeline: Gaussian-blurred 8x8 sampling of each direction
// plane, square-root Box-Cox, PCA/FDA projection, and nearest-prototype or
// MQDF classification.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "hccr/common.hpp"
#include "hccr/directmap.hpp"

namespace hccr::baseline {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr int kGrid = 8;
inline constexpr double kTruncation = 3.0;  // kernel radius in sigmas, per axis

inline double default_sigma(double interval) { return interval * std::numbers::sqrt2 / std::numbers::pi; }

/// Normalized 1-D weights of pixel centers x + 0.5 around `center`, zero
/// beyond kTruncation * sigma.
inline std::vector<double> axis_weights(int length, double center, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(length), 0.0);
  double sum = 0;
  for (int x = 0; x < length; ++x) {
    const double d = x + 0.5 - center;
    if (std::abs(d) <= kTruncation * sigma) sum += (w[static_cast<std::size_t>(x)] = std::exp(-d * d / (2 * sigma * sigma)));
  }
  for (auto& v : w) v /= sum;
  return w;
}

/// Samples each plane at the centers of a grid x grid cell layout with a
/// truncated Gaussian (weights normalized per sample point). Output is
/// plane-major, then row, then column.
inline std::vector<double> blur_sample(const DirectMap& m, int grid = kGrid, std::optional<double> sigma = {}) {
  if (grid < 1 || m.n % grid) throw ConfigError("grid must divide the map size");
  const double t = static_cast<double>(m.n) / grid;
  const double s = sigma.value_or(default_sigma(t));
  std::vector<std::vector<double>> w;
  for (int j = 0; j < grid; ++j) w.push_back(axis_weights(m.n, (j + 0.5) * t, s));
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(m.d) * grid * grid);
  std::vector<double> rows(static_cast<std::size_t>(grid) * m.n);
  for (int p = 0; p < m.d; ++p) {
    // Horizontal pass per sample column, then vertical.
    for (int y = 0; y < m.n; ++y)
      for (int j = 0; j < grid; ++j) {
        double acc = 0;
        for (int x = 0; x < m.n; ++x) acc += w[static_cast<std::size_t>(j)][static_cast<std::size_t>(x)] * m.at(p, y, x);
        rows[static_cast<std::size_t>(j) * m.n + y] = acc;
      }
    for (int i = 0; i < grid; ++i)
      for (int j = 0; j < grid; ++j) {
        double acc = 0;
        for (int y = 0; y < m.n; ++y) acc += w[static_cast<std::size_t>(i)][static_cast<std::size_t>(y)] * rows[static_cast<std::size_t>(j) * m.n + y];
        out.push_back(acc);
      }
  }
  return out;
}

/// Box-Cox with exponent 0.5.
inline std::vector<double> boxcox(std::span<const double> x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] >= 0)) throw DataError("boxcox: negative or non-finite component " + std::to_string(i));
    out[i] = std::sqrt(x[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Projections

enum class ProjectionKind { pca, fda };

inline constexpr double kScatterRegularization = 1e-4;

struct ProjectionModel {
  ProjectionKind kind = ProjectionKind::pca;
  VectorXd mean;
  MatrixXd basis;       // d x out_dim, columns ordered by eigenvalue
  VectorXd eigenvalues;  // descending

  VectorXd project(const VectorXd& x) const { return basis.transpose() * (x - mean); }
  MatrixXd project_rows(const MatrixXd& X) const { return (X.rowwise() - mean.transpose()) * basis; }
};

/// Per-class sums and counts for rows of X.
struct ClassStats {
  MatrixXd means;  // C x d
  std::vector<std::size_t> counts;
};

inline ClassStats class_stats(const MatrixXd& X, std::span<const int> labels, int classes) {
  ClassStats s{MatrixXd::Zero(classes, X.cols()), std::vector<std::size_t>(static_cast<std::size_t>(classes), 0)};
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= classes) throw DataError("label out of range");
    s.means.row(y) += X.row(i);
    ++s.counts[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < classes; ++c)
    if (s.counts[static_cast<std::size_t>(c)]) s.means.row(c) /= static_cast<double>(s.counts[static_cast<std::size_t>(c)]);
  return s;
}

/// Within-class scatter (divided by N) with eps * trace / d added to the
/// diagonal.
inline MatrixXd regularized_within_scatter(const MatrixXd& X, std::span<const int> labels, const ClassStats& st,
                                           double eps = kScatterRegularization) {
  const auto d = X.cols();
  MatrixXd Sw = MatrixXd::Zero(d, d);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const VectorXd r = (X.row(i) - st.means.row(labels[static_cast<std::size_t>(i)])).transpose();
    Sw.selfadjointView<Eigen::Lower>().rankUpdate(r);
  }
  Sw = Sw.selfadjointView<Eigen::Lower>();
  Sw /= static_cast<double>(X.rows());
  const double tr = Sw.trace();
  if (!(tr > 0) || !std::isfinite(tr)) throw NumericError("within-class scatter is singular", 0);
  Sw.diagonal().array() += eps * tr / static_cast<double>(d);
  return Sw;
}

inline ProjectionModel fit_projection(const MatrixXd& X, std::span<const int> labels, int classes, ProjectionKind kind,
                                      int out_dim = 160) {
  const auto d = X.cols();
  if (X.rows() < 2) throw ConfigError("projection needs at least two samples");
  if (out_dim < 1 || out_dim > d) throw ConfigError("projection output dimension out of range");
  ProjectionModel m;
  m.kind = kind;
  m.mean = X.colwise().mean().transpose();
  Eigen::VectorXd vals;
  MatrixXd vecs;
  if (kind == ProjectionKind::pca) {
    const MatrixXd Xc = X.rowwise() - m.mean.transpose();
    const MatrixXd S = (Xc.transpose() * Xc) / static_cast<double>(X.rows());
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
    vals = es.eigenvalues();
    vecs = es.eigenvectors();
  } else {
    if (out_dim > std::min<Eigen::Index>(classes - 1, d)) throw ConfigError("FDA output dimension exceeds min(C-1, d)");
    const auto st = class_stats(X, labels, classes);
    for (auto n : st.counts)
      if (n < 2) throw ConfigError("FDA needs at least two samples per class");
    const MatrixXd Sw = regularized_within_scatter(X, labels, st);
    MatrixXd Sb = MatrixXd::Zero(d, d);
    for (int c = 0; c < classes; ++c) {
      const VectorXd r = st.means.row(c).transpose() - m.mean;
      Sb += static_cast<double>(st.counts[static_cast<std::size_t>(c)]) * r * r.transpose();
    }
    Sb /= static_cast<double>(X.rows());
    Eigen::GeneralizedSelfAdjointEigenSolver<MatrixXd> es(Sb, Sw);
    if (es.info() != Eigen::Success) throw NumericError("generalized eigensolve failed", 0);
    vals = es.eigenvalues();
    vecs = es.eigenvectors();  // normalized so that v' Sw v = 1
  }
  // Eigen returns ascending order.
  m.eigenvalues = vals.reverse().head(out_dim);
  m.basis = vecs.rowwise().reverse().leftCols(out_dim);
  return m;
}

// ---------------------------------------------------------------------------
// Classifiers

/// Index of the smallest value; ties to the lower index.
inline int argmin(std::span<const double> v) {
  if (v.empty()) throw ConfigError("argmin of empty vector");
  return static_cast<int>(std::min_element(v.begin(), v.end()) - v.begin());
}

struct NearestPrototype {
  MatrixXd means;  // C x d

  static NearestPrototype fit(const MatrixXd& X, std::span<const int> labels, int classes) {
    return {class_stats(X, labels, classes).means};
  }

  std::vector<double> distances(const VectorXd& x) const {
    std::vector<double> d(static_cast<std::size_t>(means.rows()));
    for (Eigen::Index c = 0; c < means.rows(); ++c) d[static_cast<std::size_t>(c)] = (means.row(c).transpose() - x).squaredNorm();
    return d;
  }

  int classify(const VectorXd& x) const {
    if (means.rows() == 0) throw ConfigError("nearest-prototype model is empty");
    return argmin(distances(x));
  }
};

inline constexpr double kEigenFloor = 1e-10;
inline constexpr int kDefaultPrincipalAxes = 10;

struct MqdfClass {
  VectorXd mean;
  VectorXd eigenvalues;  // k, descending, floored
  MatrixXd eigenvectors;  // d x k, orthonormal
};

struct MqdfModel {
  int k = kDefaultPrincipalAxes;
  double delta_minor = 1.0;
  std::vector<MqdfClass> classes;

  int dim() const { return classes.empty() ? 0 : static_cast<int>(classes[0].mean.size()); }

  /// Builds the model from per-class Gaussians. `delta` overrides the
  /// minor-eigenvalue constant (default: mean of the floored minor
  /// eigenvalues over all classes; 1 when k == d).
  static MqdfModel from_gaussians(const std::vector<VectorXd>& means, const std::vector<MatrixXd>& covariances, int k,
                                  std::optional<double> delta = {}) {
    if (means.empty() || means.size() != covariances.size()) throw ConfigError("MQDF needs one covariance per class");
    const auto d = means[0].size();
    if (k < 1 || k > d) throw ConfigError("MQDF k out of range");
    MqdfModel m;
    m.k = k;
    double minor_sum = 0;
    std::size_t minor_count = 0;
    for (std::size_t c = 0; c < means.size(); ++c) {
      Eigen::SelfAdjointEigenSolver<MatrixXd> es(covariances[c]);
      if (es.info() != Eigen::Success) throw NumericError("class covariance eigensolve failed", static_cast<int>(c));
      VectorXd vals = es.eigenvalues().reverse();
      const MatrixXd vecs = es.eigenvectors().rowwise().reverse();
      const double top = vals(0);
      if (!(top > 0) || !std::isfinite(top)) throw NumericError("class covariance is not positive definite", static_cast<int>(c));
      vals = vals.cwiseMax(kEigenFloor * top);
      for (Eigen::Index i = k; i < d; ++i, ++minor_count) minor_sum += vals(i);
      m.classes.push_back({means[c], vals.head(k), vecs.leftCols(k)});
    }
    if (delta) m.delta_minor = *delta;
    else if (minor_count) m.delta_minor = minor_sum / static_cast<double>(minor_count);
    if (!(m.delta_minor > 0)) throw NumericError("minor eigenvalue constant is not positive", -1);
    return m;
  }

  static MqdfModel fit(const MatrixXd& X, std::span<const int> labels, int classes, int k = kDefaultPrincipalAxes,
                       std::optional<double> delta = {}) {
    const auto st = class_stats(X, labels, classes);
    std::vector<VectorXd> means;
    std::vector<MatrixXd> covs(static_cast<std::size_t>(classes), MatrixXd::Zero(X.cols(), X.cols()));
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const int y = labels[static_cast<std::size_t>(i)];
      const VectorXd r = (X.row(i) - st.means.row(y)).transpose();
      covs[static_cast<std::size_t>(y)] += r * r.transpose();
    }
    for (int c = 0; c < classes; ++c) {
      if (st.counts[static_cast<std::size_t>(c)] == 0) throw ConfigError("MQDF class without samples");
      covs[static_cast<std::size_t>(c)] /= static_cast<double>(st.counts[static_cast<std::size_t>(c)]);
      means.push_back(st.means.row(c).transpose());
    }
    return from_gaussians(means, covs, k, delta);
  }

  double discriminant(std::size_t c, const VectorXd& x) const {
    const auto& cl = classes[c];
    const VectorXd r = x - cl.mean;
    const VectorXd proj = cl.eigenvectors.transpose() * r;
    const double d = static_cast<double>(r.size());
    double g = 0, major = 0;
    for (Eigen::Index i = 0; i < proj.size(); ++i) {
      g += proj(i) * proj(i) / cl.eigenvalues(i) + std::log(cl.eigenvalues(i));
      major += proj(i) * proj(i);
    }
    g += (r.squaredNorm() - major) / delta_minor + (d - static_cast<double>(k)) * std::log(delta_minor);
    return g;
  }

  std::vector<double> discriminants(const VectorXd& x) const {
    std::vector<double> g(classes.size());
    for (std::size_t c = 0; c < classes.size(); ++c) g[c] = discriminant(c, x);
    return g;
  }

  int classify(const VectorXd& x) const {
    if (classes.empty()) throw ConfigError("MQDF model is empty");
    return argmin(discriminants(x));
  }
};

}  // namespace hccr::baseline
