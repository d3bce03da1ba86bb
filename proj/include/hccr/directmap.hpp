#pragma once

// Direction-decomposed feature maps. Elements (gradient vectors offline,
// stroke segments online) are decomposed onto the two adjacent chaincode
// directions and scattered through a CoordinateMap into d planes of n x n.

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "hccr/common.hpp"
#include "hccr/sample_io.hpp"
#include "hccr/shape_norm.hpp"

namespace hccr {

enum class Modality : std::uint8_t { offline = 0, online = 1 };

struct DirectMap {
  int d = 8;
  int n = 32;
  std::vector<float> values;  // plane-major: values[(plane * n + row) * n + col]
  LabelCode code;
  int label = -1;
  std::int64_t writer_id = 0;
  Modality modality = Modality::offline;

  DirectMap() = default;
  DirectMap(int d_, int n_) : d(d_), n(n_), values(static_cast<std::size_t>(d_) * n_ * n_, 0.0f) {}

  float& at(int plane, int row, int col) { return values[(static_cast<std::size_t>(plane) * n + row) * n + col]; }
  float at(int plane, int row, int col) const { return values[(static_cast<std::size_t>(plane) * n + row) * n + col]; }

  double plane_mass(int plane) const {
    double s = 0;
    for (int i = 0; i < n * n; ++i) s += values[static_cast<std::size_t>(plane) * n * n + i];
    return s;
  }

  double total_mass() const {
    double s = 0;
    for (float v : values) s += v;
    return s;
  }

  friend bool operator==(const DirectMap&, const DirectMap&) = default;
};

// ---------------------------------------------------------------------------
// Chaincode decomposition

inline constexpr int kDirections = 8;

/// u_k at k * 45 degrees, x right / y down (direction 1 points down-right).
inline constexpr std::array<Point2, 8> chaincode_basis() {
  constexpr double s = std::numbers::sqrt2 / 2;
  return {{{1, 0}, {s, s}, {0, 1}, {-s, s}, {-1, 0}, {-s, -s}, {0, -1}, {s, -s}}};
}

/// g = a * u_first + b * u_second with second = (first + 1) mod 8, a, b >= 0.
struct Decomposition {
  int first = 0;
  double a = 0.0;
  int second = 1;
  double b = 0.0;
  bool empty = true;
};

/// Parallelogram-rule decomposition. The sector of g is floor(angle / 45deg),
/// so a vector lying on u_i gets (i, |g|), (i+1, 0).
inline Decomposition decompose_vector(double gx, double gy) {
  Decomposition r;
  if (gx == 0 && gy == 0) return r;
  // Rotate by -90 degrees (exact) until the angle lies in [0, 90).
  int quadrant = 0;
  while (!(gx > 0 && gy >= 0)) {
    const double t = gx;
    gx = gy;
    gy = -t;
    ++quadrant;
  }
  int local;
  if (gx > gy) {
    local = 0;  // between (1,0) and (s,s)
    r.a = gx - gy;
    r.b = std::numbers::sqrt2 * gy;
  } else {
    local = 1;  // between (s,s) and (0,1)
    r.a = std::numbers::sqrt2 * gx;
    r.b = gy - gx;
  }
  r.first = 2 * quadrant + local;
  r.second = (r.first + 1) % kDirections;
  r.empty = false;
  return r;
}

// ---------------------------------------------------------------------------
// Scatter

struct ExtractStats {
  double decomposed_mass = 0.0;  // sum of (a + b) * scale over all elements
  double clipped_mass = 0.0;     // part of it whose mapped position was clipped into the square
  std::size_t elements = 0;

  double clipped_fraction() const { return decomposed_mass > 0 ? clipped_mass / decomposed_mass : 0.0; }
};

namespace detail {

/// Accumulates in double; planes are n x n. Bilinear splat around cell
/// centers; weights falling outside the square are folded onto the edge
/// cells so the four weights always sum to one.
class PlaneAccumulator {
 public:
  PlaneAccumulator(int d, int n) : d_(d), n_(n), acc_(static_cast<std::size_t>(d) * n * n, 0.0) {}

  void splat(int plane, Point2 p, double w) {
    const double gx = p.x - 0.5, gy = p.y - 0.5;
    const double fx0 = std::floor(gx), fy0 = std::floor(gy);
    const double tx = gx - fx0, ty = gy - fy0;
    const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
    add(plane, x0, y0, w * (1 - tx) * (1 - ty));
    add(plane, x0 + 1, y0, w * tx * (1 - ty));
    add(plane, x0, y0 + 1, w * (1 - tx) * ty);
    add(plane, x0 + 1, y0 + 1, w * tx * ty);
  }

  void add_cell(int plane, int x, int y, double w) { add(plane, x, y, w); }

  DirectMap finish() const {
    DirectMap m(d_, n_);
    for (std::size_t i = 0; i < acc_.size(); ++i) m.values[i] = static_cast<float>(acc_[i]);
    return m;
  }

 private:
  void add(int plane, int x, int y, double w) {
    if (w == 0) return;
    x = std::clamp(x, 0, n_ - 1);
    y = std::clamp(y, 0, n_ - 1);
    acc_[(static_cast<std::size_t>(plane) * n_ + y) * n_ + x] += w;
  }

  int d_, n_;
  std::vector<double> acc_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Offline

enum class Cooperation { cooperated, based };

/// zero: outside the image is background and gradients are also taken on
/// the one-pixel ring around it. replicate: edge pixels extend outward and
/// gradients are taken inside the image only.
enum class BorderMode { zero, replicate };

struct OfflineOptions {
  Cooperation mode = Cooperation::cooperated;
  BorderMode border = BorderMode::zero;
  double element_scale = 1.0;  // multiplies every decomposed weight (cooperated mode)
};

struct Gradient {
  double gx, gy;
};

inline Gradient sobel(const IntensityField& f, int x, int y, BorderMode border) {
  auto v = [&](int i, int j) -> double {
    if (border == BorderMode::replicate) {
      i = std::clamp(i, 0, f.width - 1);
      j = std::clamp(j, 0, f.height - 1);
      return f(i, j);
    }
    return f.contains(i, j) ? f(i, j) : 0.0;
  };
  const double gx = (v(x + 1, y - 1) + 2 * v(x + 1, y) + v(x + 1, y + 1)) -
                    (v(x - 1, y - 1) + 2 * v(x - 1, y) + v(x - 1, y + 1));
  const double gy = (v(x - 1, y + 1) + 2 * v(x, y + 1) + v(x + 1, y + 1)) -
                    (v(x - 1, y - 1) + 2 * v(x, y - 1) + v(x + 1, y - 1));
  return {gx, gy};
}

/// Resample a field through `map` onto n x n by supersampled forward
/// splatting with coverage normalization (area average).
inline IntensityField resample(const IntensityField& f, const CoordinateMap& map) {
  const int n = map.target_size();
  double slope = 0;
  for (int y = 0; y <= f.height; y += std::max(1, f.height / 16))
    for (int x = 0; x < f.width; ++x) slope = std::max(slope, map(x + 1.0, y).x - map(double(x), y).x);
  for (int x = 0; x <= f.width; x += std::max(1, f.width / 16))
    for (int y = 0; y < f.height; ++y) slope = std::max(slope, map(x, y + 1.0).y - map(x, double(y)).y);
  const int sub = std::clamp(static_cast<int>(std::ceil(2 * slope)), 1, 8);
  detail::PlaneAccumulator value(1, n), cover(1, n);
  const double w = 1.0 / (sub * sub);
  bool clipped;
  for (int y = 0; y < f.height; ++y)
    for (int x = 0; x < f.width; ++x)
      for (int sy = 0; sy < sub; ++sy)
        for (int sx = 0; sx < sub; ++sx) {
          const Point2 p = map.clamped(x + (sx + 0.5) / sub, y + (sy + 0.5) / sub, clipped);
          if (f(x, y) != 0) value.splat(0, p, w * f(x, y));
          cover.splat(0, p, w);
        }
  const DirectMap vm = value.finish(), cm = cover.finish();
  IntensityField out(n, n, 0.0);
  for (std::size_t i = 0; i < out.size(); ++i)
    if (cm.values[i] > 0) out.values[i] = double(vm.values[i]) / cm.values[i];
  return out;
}

inline DirectMap extract_offline(const IntensityField& f, const CoordinateMap& map, const OfflineOptions& opt = {},
                                 ExtractStats* stats = nullptr) {
  const int n = map.target_size();
  if (n < 1 || n > 256) throw DataError("directMap size must be in [1, 256]");
  if (f.width < 1 || f.height < 1) throw DataError("intensity field is empty");
  detail::PlaneAccumulator acc(kDirections, n);
  ExtractStats st;

  if (opt.mode == Cooperation::cooperated) {
    const int lo = opt.border == BorderMode::zero ? -1 : 0;
    for (int y = lo; y < f.height - lo; ++y)
      for (int x = lo; x < f.width - lo; ++x) {
        const auto g = sobel(f, x, y, opt.border);
        const auto dec = decompose_vector(g.gx, g.gy);
        if (dec.empty) continue;
        bool clipped;
        const Point2 p = map.clamped(x + 0.5, y + 0.5, clipped);
        const double a = dec.a * opt.element_scale, b = dec.b * opt.element_scale;
        acc.splat(dec.first, p, a);
        acc.splat(dec.second, p, b);
        st.decomposed_mass += a + b;
        if (clipped) st.clipped_mass += a + b;
        ++st.elements;
      }
  } else {
    const IntensityField norm = resample(f, map);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const auto g = sobel(norm, x, y, BorderMode::zero);
        const auto dec = decompose_vector(g.gx, g.gy);
        if (dec.empty) continue;
        acc.add_cell(dec.first, x, y, dec.a);
        acc.add_cell(dec.second, x, y, dec.b);
        st.decomposed_mass += dec.a + dec.b;
        ++st.elements;
      }
  }
  if (stats) *stats = st;
  DirectMap m = acc.finish();
  m.modality = Modality::offline;
  return m;
}

// ---------------------------------------------------------------------------
// Online

inline constexpr double kImaginaryStrokeWeight = 0.5;
inline constexpr double kOnlineStep = 0.5;  // max splat spacing in target pixels

struct OnlineOptions {
  double element_scale = 1.0;
  double imaginary_weight = kImaginaryStrokeWeight;
  bool imaginary_strokes = true;
};

namespace detail {

inline void splat_segment(PlaneAccumulator& acc, const CoordinateMap& map, Point2 p, Point2 q, double weight,
                          ExtractStats& st) {
  const auto dec = decompose_vector(q.x - p.x, q.y - p.y);
  if (dec.empty) return;
  bool c0, c1;
  const Point2 tp = map.clamped(p.x, p.y, c0), tq = map.clamped(q.x, q.y, c1);
  const int k = std::max(1, static_cast<int>(std::ceil(std::hypot(tq.x - tp.x, tq.y - tp.y) / kOnlineStep)));
  const double a = dec.a * weight / k, b = dec.b * weight / k;
  for (int i = 0; i < k; ++i) {
    const double t = (i + 0.5) / k;
    bool clipped;
    const Point2 s = map.clamped(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y), clipped);
    acc.splat(dec.first, s, a);
    acc.splat(dec.second, s, b);
    if (clipped) st.clipped_mass += a + b;
  }
  st.decomposed_mass += (dec.a + dec.b) * weight;
  ++st.elements;
}

}  // namespace detail

/// Segments between consecutive (deduplicated) points of each stroke, plus
/// pen-lift connectors between strokes at `imaginary_weight`.
inline DirectMap extract_online(const OnlineSample& s, const CoordinateMap& map, const OnlineOptions& opt = {},
                                ExtractStats* stats = nullptr) {
  if (s.strokes.empty()) throw DataError("online sample has no strokes");
  const int n = map.target_size();
  if (n < 1 || n > 256) throw DataError("directMap size must be in [1, 256]");
  detail::PlaneAccumulator acc(kDirections, n);
  ExtractStats st;
  std::optional<Point2> last;
  for (const auto& stroke : s.strokes) {
    std::vector<Point2> pts;
    for (const auto& p : stroke) {
      Point2 q{double(p.x), double(p.y)};
      if (pts.empty() || !(pts.back() == q)) pts.push_back(q);
    }
    if (pts.empty()) continue;
    if (last && opt.imaginary_strokes)
      detail::splat_segment(acc, map, *last, pts.front(), opt.imaginary_weight * opt.element_scale, st);
    for (std::size_t i = 1; i < pts.size(); ++i)
      detail::splat_segment(acc, map, pts[i - 1], pts[i], opt.element_scale, st);
    last = pts.back();
  }
  if (stats) *stats = st;
  DirectMap m = acc.finish();
  m.modality = Modality::online;
  m.code = s.code;
  m.label = s.label;
  m.writer_id = s.writer_id;
  return m;
}

// ---------------------------------------------------------------------------

inline double sparsity(const DirectMap& m) {
  if (m.values.empty()) return 1.0;
  std::size_t zeros = 0;
  for (float v : m.values) zeros += v == 0.0f;
  return double(zeros) / double(m.values.size());
}

inline Grid<double> average_map(const DirectMap& m) {
  Grid<double> g(m.n, m.n, 0.0);
  for (int p = 0; p < m.d; ++p)
    for (int r = 0; r < m.n; ++r)
      for (int c = 0; c < m.n; ++c) g(c, r) += m.at(p, r, c);
  for (double& v : g.values) v /= m.d;
  return g;
}

// ---------------------------------------------------------------------------
// DMAP sparse container (little-endian):
//   "DMAP" u8 version=1 u8 d u16 n u8 modality u8 code_size 4*u8 code i64 writer
//   u32 count, then count * (u8 plane, u8 row, u8 col, f32 value)
// Cells strictly increasing in (plane, row, col); values finite and > 0.

inline constexpr std::uint8_t kDmapVersion = 1;

inline Bytes serialize_dmap(const DirectMap& m) {
  if (m.d < 1 || m.d > 255 || m.n < 1 || m.n > 256) throw DataError("DMAP dimensions out of range");
  if (m.values.size() != static_cast<std::size_t>(m.d) * m.n * m.n) throw DataError("DMAP value count mismatch");
  Bytes out = {'D', 'M', 'A', 'P', kDmapVersion, static_cast<std::uint8_t>(m.d)};
  le::put<std::uint16_t>(out, static_cast<std::uint16_t>(m.n));
  out.push_back(static_cast<std::uint8_t>(m.modality));
  out.push_back(m.code.size);
  le::put_bytes(out, m.code.bytes);
  le::put<std::int64_t>(out, m.writer_id);
  std::uint32_t count = 0;
  for (float v : m.values) count += v != 0.0f;
  le::put<std::uint32_t>(out, count);
  for (int p = 0; p < m.d; ++p)
    for (int r = 0; r < m.n; ++r)
      for (int c = 0; c < m.n; ++c) {
        const float v = m.at(p, r, c);
        if (v == 0.0f) continue;
        if (!(v > 0) || !std::isfinite(v)) throw DataError("DMAP values must be finite and non-negative");
        out.push_back(static_cast<std::uint8_t>(p));
        out.push_back(static_cast<std::uint8_t>(r));
        out.push_back(static_cast<std::uint8_t>(c));
        le::put<float>(out, v);
      }
  return out;
}

inline DirectMap parse_dmap(std::span<const std::uint8_t> bytes) {
  ByteReader in(bytes);
  auto magic = in.take(4, "DMAP magic");
  if (!std::equal(magic.begin(), magic.end(), "DMAP")) throw DataError("not a DMAP file", 0);
  if (in.get<std::uint8_t>("DMAP version") != kDmapVersion) throw DataError("unsupported DMAP version", 4);
  const int d = in.get<std::uint8_t>("DMAP d");
  if (d < 1) throw DataError("DMAP d must be positive", 5);
  const std::size_t n_at = in.offset();
  const int n = in.get<std::uint16_t>("DMAP n");
  if (n < 1 || n > 256) throw DataError("DMAP n out of range", n_at);
  DirectMap m(d, n);
  const std::size_t mod_at = in.offset();
  const auto mod = in.get<std::uint8_t>("DMAP modality");
  if (mod > 1) throw DataError("DMAP modality invalid", mod_at);
  m.modality = static_cast<Modality>(mod);
  const std::size_t code_at = in.offset();
  m.code.size = in.get<std::uint8_t>("DMAP code size");
  auto code = in.take(4, "DMAP code");
  std::copy(code.begin(), code.end(), m.code.bytes.begin());
  if (m.code.size != 2 && m.code.size != 4) throw DataError("DMAP code size invalid", code_at);
  for (std::size_t i = m.code.size; i < 4; ++i)
    if (m.code.bytes[i] != 0) throw DataError("DMAP code padding not zero", code_at);
  m.writer_id = in.get<std::int64_t>("DMAP writer id");
  const auto count = in.get<std::uint32_t>("DMAP cell count");
  in.require(static_cast<std::size_t>(count) * 7, "DMAP cell records");
  long prev = -1;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = in.offset();
    const int p = in.get<std::uint8_t>("plane"), r = in.get<std::uint8_t>("row"), c = in.get<std::uint8_t>("col");
    const float v = in.get<float>("value");
    if (p >= d || r >= n || c >= n) throw DataError("DMAP cell index out of range", at);
    const long key = (long(p) * n + r) * n + c;
    if (key <= prev) throw DataError("DMAP cells not strictly increasing", at);
    if (!(v > 0) || !std::isfinite(v)) throw DataError("DMAP cell value must be finite and positive", at);
    prev = key;
    m.values[static_cast<std::size_t>(key)] = v;
  }
  if (!in.done()) throw DataError("trailing bytes after DMAP records", in.offset());
  return m;
}

}  // namespace hccr
