#pragma once

// Gray-level normalization and shape-normalization coordinate mappings.
//
// Coordinates are continuous: pixel (i, j) of an image covers [i, i+1) x
// [j, j+1) and its mass sits at the center (i + 0.5, j + 0.5). A
// CoordinateMap sends original coordinates into the target square [0, n]^2.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "hccr/common.hpp"
#include "hccr/sample_io.hpp"

namespace hccr {

enum class GrayMode { none, linear, nonlinear };

using IntensityField = Grid<double>;

/// Lower end of the linear gray range: the faintest foreground level maps
/// here, the darkest to 1.
inline constexpr double kGrayFloor = 1.0 / 255.0;

/// Gray normalization of an already-reversed field (background 0).
/// none is the identity; linear stretches the foreground range onto
/// [kGrayFloor, 1]; nonlinear applies sqrt after the linear stretch.
inline IntensityField normalize_field(IntensityField f, GrayMode mode) {
  if (mode == GrayMode::none) return f;
  double lo = 1e300, hi = -1e300;
  for (double v : f.values)
    if (v > 0) lo = std::min(lo, v), hi = std::max(hi, v);
  if (hi < lo) return f;  // blank
  for (double& v : f.values) {
    if (v <= 0) continue;
    v = hi > lo ? kGrayFloor + (1.0 - kGrayFloor) * (v - lo) / (hi - lo) : 1.0;
    if (mode == GrayMode::nonlinear) v = std::sqrt(v);
  }
  return f;
}

/// Reverse the stored levels (background 255 -> 0), scale to [0, 1], then
/// normalize per `mode`.
inline IntensityField gray_normalize(const OfflineSample& s, GrayMode mode) {
  IntensityField f(s.width, s.height);
  for (std::size_t i = 0; i < f.size(); ++i) f.values[i] = (255.0 - s.gray[i]) / 255.0;
  return normalize_field(std::move(f), mode);
}

// ---------------------------------------------------------------------------

/// Non-decreasing piecewise-linear function with linear extrapolation by
/// the end slopes.
class MonotoneCurve {
 public:
  MonotoneCurve() = default;
  MonotoneCurve(std::vector<double> xs, std::vector<double> ys) : xs_(std::move(xs)), ys_(std::move(ys)) {
    if (xs_.size() < 2 || xs_.size() != ys_.size()) throw std::invalid_argument("MonotoneCurve needs >= 2 knots");
    for (std::size_t i = 1; i < xs_.size(); ++i)
      if (!(xs_[i] > xs_[i - 1]) || ys_[i] < ys_[i - 1])
        throw std::invalid_argument("MonotoneCurve knots must be increasing / non-decreasing");
  }

  double operator()(double x) const {
    std::size_t i;
    if (x <= xs_.front()) i = 0;
    else if (x >= xs_.back()) i = xs_.size() - 2;
    else i = static_cast<std::size_t>(std::upper_bound(xs_.begin(), xs_.end(), x) - xs_.begin()) - 1;
    const double t = (x - xs_[i]) / (xs_[i + 1] - xs_[i]);
    return ys_[i] + t * (ys_[i + 1] - ys_[i]);
  }

  const std::vector<double>& knots() const { return xs_; }
  const std::vector<double>& values() const { return ys_; }

 private:
  std::vector<double> xs_, ys_;
};

/// One axis of a pseudo-2-D map: target(along, across) is a weighted blend
/// of per-band 1-D curves in `along`, weights depending only on `across`.
struct AxisMap {
  enum class Blend { single, gaussian, hat };

  Blend blend = Blend::single;
  std::vector<MonotoneCurve> curves;
  std::vector<double> centers;  // band centers along the `across` axis
  double sigma = 1.0;           // gaussian blend width

  std::vector<double> weights(double across) const {
    const std::size_t k = curves.size();
    std::vector<double> w(k, 0.0);
    if (blend == Blend::single || k == 1) {
      w[0] = 1.0;
    } else if (blend == Blend::gaussian) {
      double best = -1e300;
      for (std::size_t b = 0; b < k; ++b) {
        const double z = (across - centers[b]) / sigma;
        w[b] = -0.5 * z * z;
        best = std::max(best, w[b]);
      }
      double sum = 0;
      for (double& v : w) sum += (v = std::exp(v - best));
      for (double& v : w) v /= sum;
    } else {
      if (across <= centers.front()) {
        w.front() = 1.0;
      } else if (across >= centers.back()) {
        w.back() = 1.0;
      } else {
        std::size_t b = 0;
        while (across > centers[b + 1]) ++b;
        const double t = (across - centers[b]) / (centers[b + 1] - centers[b]);
        w[b] = 1.0 - t;
        w[b + 1] = t;
      }
    }
    return w;
  }

  double operator()(double along, double across) const {
    if (curves.size() == 1) return curves[0](along);
    const auto w = weights(across);
    double v = 0;
    for (std::size_t b = 0; b < curves.size(); ++b)
      if (w[b] != 0) v += w[b] * curves[b](along);
    return v;
  }
};

class CoordinateMap {
 public:
  CoordinateMap() = default;
  CoordinateMap(AxisMap x, AxisMap y, int n) : x_(std::move(x)), y_(std::move(y)), n_(n) {}

  int target_size() const { return n_; }
  const AxisMap& x_axis() const { return x_; }
  const AxisMap& y_axis() const { return y_; }

  /// Unclipped mapping.
  Point2 operator()(double x, double y) const { return {x_(x, y), y_(y, x)}; }

  /// Mapping clipped into [0, n]^2; `clipped` is set when clipping applied.
  Point2 clamped(double x, double y, bool& clipped) const {
    Point2 p = (*this)(x, y);
    const double n = n_;
    clipped = p.x < 0 || p.y < 0 || p.x > n || p.y > n;
    p.x = std::clamp(p.x, 0.0, n);
    p.y = std::clamp(p.y, 0.0, n);
    return p;
  }

  /// Identity map onto an n x n target (original coordinates already in [0, n)).
  static CoordinateMap identity(int n) {
    AxisMap a;
    a.curves = {MonotoneCurve({0.0, 1.0}, {0.0, 1.0})};
    return {a, a, n};
  }

 private:
  AxisMap x_, y_;
  int n_ = 0;
};

// ---------------------------------------------------------------------------
// Mass distributions

struct MassPoint {
  double x, y, w;
};

inline std::vector<MassPoint> mass_points(const IntensityField& f) {
  std::vector<MassPoint> pts;
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x)
      if (f(x, y) > 0) pts.push_back({x + 0.5, y + 0.5, f(x, y)});
  return pts;
}

/// Trajectory mass: real strokes cut into pieces no longer than 1/64 of the
/// bounding-box diagonal, each piece weighted by its length. A trajectory
/// made only of dots falls back to unit point masses.
inline std::vector<MassPoint> mass_points(const OnlineSample& s) {
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const auto& st : s.strokes)
    for (const auto& p : st) x0 = std::min<double>(x0, p.x), x1 = std::max<double>(x1, p.x),
                             y0 = std::min<double>(y0, p.y), y1 = std::max<double>(y1, p.y);
  const double step = std::max(std::hypot(x1 - x0, y1 - y0) / 64.0, 1e-9);
  std::vector<MassPoint> pts;
  for (const auto& st : s.strokes)
    for (std::size_t i = 1; i < st.size(); ++i) {
      const double ax = st[i - 1].x, ay = st[i - 1].y, bx = st[i].x, by = st[i].y;
      const double len = std::hypot(bx - ax, by - ay);
      if (len == 0) continue;
      const int pieces = std::max(1, static_cast<int>(std::ceil(len / step)));
      for (int k = 0; k < pieces; ++k) {
        const double t = (k + 0.5) / pieces;
        pts.push_back({ax + t * (bx - ax), ay + t * (by - ay), len / pieces});
      }
    }
  if (pts.empty())
    for (const auto& st : s.strokes)
      for (const auto& p : st) pts.push_back({double(p.x), double(p.y), 1.0});
  return pts;
}

struct Box {
  double x0, y0, x1, y1;  // [x0, x1) x [y0, y1)
};

inline std::optional<Box> ink_box(const IntensityField& f) {
  int x0 = f.width, y0 = f.height, x1 = -1, y1 = -1;
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x)
      if (f(x, y) > 0) x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
  if (x1 < 0) return std::nullopt;
  return Box{double(x0), double(y0), double(x1 + 1), double(y1 + 1)};
}

inline std::optional<Box> ink_box(const OnlineSample& s) {
  if (s.strokes.empty()) return std::nullopt;
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const auto& st : s.strokes)
    for (const auto& p : st) x0 = std::min<double>(x0, p.x), x1 = std::max<double>(x1, p.x),
                             y0 = std::min<double>(y0, p.y), y1 = std::max<double>(y1, p.y);
  return Box{x0, y0, x1, y1};
}

// ---------------------------------------------------------------------------
// Linear

enum class AspectMode { preserve, fill, adaptive };

/// Affine map of `box` onto the target square. The longer side spans [0, n];
/// the shorter spans n*r' centered, with r' = r (preserve), 1 (fill) or
/// sqrt(sin(pi r / 2)) (adaptive), r = short/long.
inline CoordinateMap fit_linear(const Box& box, int n, AspectMode aspect = AspectMode::adaptive) {
  const double w = box.x1 - box.x0, h = box.y1 - box.y0;
  if (!(w > 0) || !(h > 0)) throw DataError("fit_linear: bounding box has zero extent");
  const double r = std::min(w, h) / std::max(w, h);
  double rp = 1.0;
  if (aspect == AspectMode::preserve) rp = r;
  else if (aspect == AspectMode::adaptive) rp = std::sqrt(std::sin(std::numbers::pi * r / 2));
  const double span_x = w >= h ? n : n * rp;
  const double span_y = h >= w ? n : n * rp;
  auto axis = [](double a0, double a1, double span, double n) {
    const double off = (n - span) / 2;
    AxisMap m;
    m.curves = {MonotoneCurve({a0, a1}, {off, off + span})};
    return m;
  };
  return {axis(box.x0, box.x1, span_x, n), axis(box.y0, box.y1, span_y, n), n};
}

// ---------------------------------------------------------------------------
// Bi-moment

inline constexpr double kBimomentK = 2.0;

struct BimomentBounds {
  double lower, center, upper;
};

/// Centroid and one-sided second moments of a 1-D weighted point set. The
/// one-sided moments are normalized by the mass on their own side. A side
/// without mass mirrors the other side; both empty is degenerate.
inline BimomentBounds bimoment_bounds(std::span<const double> coords, std::span<const double> weights,
                                      double k = kBimomentK) {
  double total = 0, first = 0;
  for (std::size_t i = 0; i < coords.size(); ++i) total += weights[i], first += weights[i] * coords[i];
  if (!(total > 0)) throw DataError("bi-moment fit: zero mass");
  const double c = first / total;
  double ml = 0, sl = 0, mu = 0, su = 0;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const double d = coords[i] - c;
    if (coords[i] < c) ml += weights[i], sl += weights[i] * d * d;
    else mu += weights[i], su += weights[i] * d * d;
  }
  double dl = ml > 0 ? sl / ml : 0.0;
  double du = mu > 0 ? su / mu : 0.0;
  if (dl <= 0 && du <= 0) throw DataError("bi-moment fit: all mass at a single coordinate");
  if (dl <= 0) dl = du;
  if (du <= 0) du = dl;
  return {c - k * std::sqrt(dl), c, c + k * std::sqrt(du)};
}

/// [lower, c] -> [0, n/2], [c, upper] -> [n/2, n].
inline MonotoneCurve bimoment_curve(const BimomentBounds& b, int n) {
  return MonotoneCurve({b.lower, b.center, b.upper}, {0.0, n / 2.0, double(n)});
}

namespace detail {

inline BimomentBounds axis_bounds(std::span<const MassPoint> pts, bool x_axis, std::span<const double> extra_w = {}) {
  std::vector<double> c(pts.size()), w(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    c[i] = x_axis ? pts[i].x : pts[i].y;
    w[i] = pts[i].w * (extra_w.empty() ? 1.0 : extra_w[i]);
  }
  return bimoment_bounds(c, w);
}

}  // namespace detail

inline CoordinateMap fit_bimoment(std::span<const MassPoint> pts, int n) {
  AxisMap x, y;
  x.curves = {bimoment_curve(detail::axis_bounds(pts, true), n)};
  y.curves = {bimoment_curve(detail::axis_bounds(pts, false), n)};
  return {x, y, n};
}

inline CoordinateMap fit_bimoment(const IntensityField& f, int n) { return fit_bimoment(mass_points(f), n); }
inline CoordinateMap fit_bimoment(const OnlineSample& s, int n) { return fit_bimoment(mass_points(s), n); }

// ---------------------------------------------------------------------------
// Pseudo-2-D bi-moment

/// Gaussian band memberships across `bounds`: centers at (b+1)/(B+1) of the
/// extent, sigma = extent/(B+1). A single band has uniform membership.
inline std::vector<double> band_centers(const BimomentBounds& bounds, int bands) {
  std::vector<double> c;
  const double ext = bounds.upper - bounds.lower;
  for (int b = 0; b < bands; ++b) c.push_back(bounds.lower + ext * (b + 1) / (bands + 1));
  return c;
}

namespace detail {

/// Fit the `along` axis (x if along_x) with bands partitioning the other axis.
inline AxisMap p2d_axis(std::span<const MassPoint> pts, int n, bool along_x, int bands) {
  AxisMap m;
  const BimomentBounds global = axis_bounds(pts, along_x);
  if (bands <= 1) {
    m.curves = {bimoment_curve(global, n)};
    return m;
  }
  const BimomentBounds across = axis_bounds(pts, !along_x);
  m.blend = AxisMap::Blend::gaussian;
  m.centers = band_centers(across, bands);
  m.sigma = (across.upper - across.lower) / (bands + 1);
  std::vector<double> g(pts.size());
  for (int b = 0; b < bands; ++b) {
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double z = ((along_x ? pts[i].y : pts[i].x) - m.centers[b]) / m.sigma;
      g[i] = std::exp(-0.5 * z * z);
    }
    try {
      m.curves.push_back(bimoment_curve(axis_bounds(pts, along_x, g), n));
    } catch (const DataError&) {
      m.curves.push_back(bimoment_curve(global, n));
    }
  }
  return m;
}

}  // namespace detail

inline constexpr int kP2dBands = 3;

inline CoordinateMap fit_p2dbmn(std::span<const MassPoint> pts, int n, int bands = kP2dBands) {
  return {detail::p2d_axis(pts, n, true, bands), detail::p2d_axis(pts, n, false, bands), n};
}

inline CoordinateMap fit_p2dbmn(const OnlineSample& s, int n, int bands = kP2dBands) {
  return fit_p2dbmn(mass_points(s), n, bands);
}
inline CoordinateMap fit_p2dbmn(const IntensityField& f, int n, int bands = kP2dBands) {
  return fit_p2dbmn(mass_points(f), n, bands);
}

// ---------------------------------------------------------------------------
// Line density projection interpolation

/// Local line density along rows (horizontal) or columns (vertical):
/// foreground pixels 1, background pixels enclosed by foreground on the
/// scan line 1/(run length), leading/trailing background 0.
inline Grid<double> line_density(const IntensityField& f, bool horizontal) {
  Grid<double> d(f.width, f.height, 0.0);
  const int lines = horizontal ? f.height : f.width;
  const int len = horizontal ? f.width : f.height;
  auto at = [&](int line, int i) -> double { return horizontal ? f(i, line) : f(line, i); };
  auto set = [&](int line, int i, double v) { (horizontal ? d(i, line) : d(line, i)) = v; };
  for (int line = 0; line < lines; ++line) {
    int prev_fg = -1;
    for (int i = 0; i < len; ++i) {
      if (at(line, i) <= 0) continue;
      set(line, i, 1.0);
      if (prev_fg >= 0 && i - prev_fg > 1) {
        const double v = 1.0 / (i - prev_fg - 1);
        for (int j = prev_fg + 1; j < i; ++j) set(line, j, v);
      }
      prev_fg = i;
    }
  }
  return d;
}

inline constexpr int kLdpiSlices = 3;
inline constexpr double kDensityFloor = 1e-6;

namespace detail {

/// Cumulative-density curve over [0, len]: profile scaled to max 1,
/// floor-clamped, normalized to span [0, n].
inline MonotoneCurve cumulative_curve(std::vector<double> profile, int n) {
  const double mx = *std::max_element(profile.begin(), profile.end());
  for (double& p : profile) p = std::max(mx > 0 ? p / mx : 0.0, kDensityFloor);
  double total = 0;
  for (double p : profile) total += p;
  std::vector<double> xs(profile.size() + 1), ys(profile.size() + 1);
  double acc = 0;
  for (std::size_t i = 0; i <= profile.size(); ++i) {
    xs[i] = double(i);
    ys[i] = n * acc / total;
    if (i < profile.size()) acc += profile[i];
  }
  ys.back() = n;
  return {xs, ys};
}

inline AxisMap ldpi_axis(const Grid<double>& density, int n, bool along_x, int slices) {
  const int len = along_x ? density.width : density.height;
  const int across_len = along_x ? density.height : density.width;
  auto at = [&](int along, int across) { return along_x ? density(along, across) : density(across, along); };
  AxisMap m;
  m.blend = slices > 1 ? AxisMap::Blend::hat : AxisMap::Blend::single;
  const double sigma = double(across_len) / (slices + 1);
  for (int s = 0; s < slices; ++s) {
    const double center = slices > 1 ? across_len * double(s + 1) / (slices + 1) : across_len / 2.0;
    m.centers.push_back(center);
    std::vector<double> profile(static_cast<std::size_t>(len), 0.0);
    for (int a = 0; a < across_len; ++a) {
      double g = 1.0;
      if (slices > 1) {
        const double z = (a + 0.5 - center) / sigma;
        g = std::exp(-0.5 * z * z);
      }
      for (int i = 0; i < len; ++i) profile[i] += g * at(i, a);
    }
    m.curves.push_back(cumulative_curve(std::move(profile), n));
  }
  return m;
}

}  // namespace detail

/// Coordinate map from explicit horizontal/vertical density fields (same
/// dimensions). x' comes from the horizontal field, y' from the vertical.
inline CoordinateMap fit_density_projection(const Grid<double>& horizontal, const Grid<double>& vertical, int n,
                                            int slices = kLdpiSlices) {
  if (horizontal.width != vertical.width || horizontal.height != vertical.height)
    throw DataError("density fields differ in size");
  double mass = 0;
  for (double v : horizontal.values) mass += v;
  for (double v : vertical.values) mass += v;
  if (!(mass > 0)) throw DataError("LDPI fit: zero mass");
  return {detail::ldpi_axis(horizontal, n, true, slices), detail::ldpi_axis(vertical, n, false, slices), n};
}

inline CoordinateMap fit_ldpi(const IntensityField& f, int n, int slices = kLdpiSlices) {
  return fit_density_projection(line_density(f, true), line_density(f, false), n, slices);
}

}  // namespace hccr
