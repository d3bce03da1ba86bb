#pragma once

// Deterministic synthetic writers: a small grammar of multi-stroke glyph
// templates rendered under per-writer style distortions into an online
// trajectory and its rasterized offline twin.

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "hccr/common.hpp"
#include "hccr/sample_io.hpp"

namespace hccr::synth {

using Polyline = std::vector<Point2>;

struct WriterStyle {
  std::uint64_t seed = 0;
  double slant = 0.0;  // radians, shear x += y * tan(slant)
  double scale_x = 1.0;
  double scale_y = 1.0;
  double jitter_sigma = 0.0;  // template units
  double thickness = 2.0;     // pixels
  double contrast = 1.0;      // [0, 1]

  void validate() const {
    if (!(scale_x > 0) || !(scale_y > 0)) throw ConfigError("writer style scale factors must be positive");
    if (!(jitter_sigma >= 0)) throw ConfigError("writer style jitter must be non-negative");
    if (!(thickness > 0)) throw ConfigError("writer style thickness must be positive");
    if (!(contrast >= 0 && contrast <= 1)) throw ConfigError("writer style contrast must be in [0, 1]");
  }
};

/// Offline rendering resolution: template units per image pixel.
inline constexpr double kUnitsPerPixel = 15.625;  // 1000-unit frame -> 64 px
inline constexpr std::uint16_t kFirstCode = 0xB0A1;  // first GB2312 level-1 code

class ClassGrammar {
 public:
  /// The 20 built-in glyph classes in a 1000x1000 frame. seed 0 is the
  /// canonical grammar; other seeds displace every template vertex by a
  /// deterministic offset of up to 30 units.
  static ClassGrammar builtin(std::uint64_t seed = 0) {
    ClassGrammar g;
    g.seed_ = seed;
    auto P = [](double x, double y) { return Point2{x, y}; };
    auto& t = g.templates_;
    t = {
        {{P(100, 500), P(900, 500)}},
        {{P(200, 300), P(800, 300)}, {P(100, 700), P(900, 700)}},
        {{P(200, 200), P(800, 200)}, {P(250, 500), P(750, 500)}, {P(100, 820), P(900, 820)}},
        {{P(100, 450), P(900, 450)}, {P(500, 80), P(500, 930)}},
        {{P(250, 400), P(750, 400)}, {P(500, 100), P(500, 850)}, {P(100, 850), P(900, 850)}},
        {{P(200, 150), P(800, 150)}, {P(250, 500), P(750, 500)}, {P(500, 150), P(500, 850)},
         {P(100, 850), P(900, 850)}},
        {{P(200, 200), P(200, 800)}, {P(200, 200), P(800, 200), P(800, 800)}, {P(200, 800), P(800, 800)}},
        {{P(250, 100), P(250, 900)},
         {P(250, 100), P(750, 100), P(750, 900)},
         {P(250, 500), P(750, 500)},
         {P(250, 900), P(750, 900)}},
        {{P(150, 150), P(150, 850)},
         {P(150, 150), P(850, 150), P(850, 850)},
         {P(150, 500), P(850, 500)},
         {P(500, 150), P(500, 850)},
         {P(150, 850), P(850, 850)}},
        {{P(500, 100), P(450, 400), P(150, 900)}, {P(480, 420), P(850, 900)}},
        {{P(150, 350), P(850, 350)}, {P(500, 100), P(450, 450), P(150, 900)}, {P(480, 470), P(850, 900)}},
        {{P(200, 200), P(800, 200)}, {P(500, 200), P(500, 800)}, {P(100, 800), P(900, 800)}},
        {{P(500, 120), P(500, 800)}, {P(180, 380), P(180, 800), P(820, 800), P(820, 380)}},
        {{P(250, 100), P(230, 500), P(120, 900)}, {P(500, 150), P(500, 800)}, {P(780, 100), P(780, 920)}},
        {{P(500, 80), P(500, 880), P(420, 820)}, {P(300, 350), P(150, 700)}, {P(700, 350), P(850, 700)}},
        {{P(150, 300), P(150, 650)}, {P(150, 300), P(850, 300), P(850, 650)}, {P(150, 650), P(850, 650)},
         {P(500, 80), P(500, 950)}},
        {{P(100, 200), P(900, 200)}, {P(500, 200), P(500, 880), P(400, 800)}},
        {{P(450, 100), P(450, 850)}, {P(450, 450), P(800, 450)}, {P(100, 850), P(900, 850)}},
        {{P(100, 150), P(900, 150)}, {P(450, 150), P(450, 900)}, {P(520, 420), P(750, 580)}},
        {{P(100, 350), P(900, 350)}, {P(500, 80), P(500, 930)}, {P(480, 380), P(120, 800)},
         {P(520, 380), P(880, 800)}},
    };
    if (seed != 0) {
      std::mt19937_64 rng(mix_seed(seed, 0x6772616D));
      std::uniform_real_distribution<double> off(-30.0, 30.0);
      for (auto& glyph : t)
        for (auto& stroke : glyph)
          for (auto& p : stroke) {
            p.x += off(rng);
            p.y += off(rng);
          }
    }
    return g;
  }

  std::uint64_t seed() const { return seed_; }
  int class_count() const { return static_cast<int>(templates_.size()); }

  const std::vector<Polyline>& glyph(int class_index) const {
    if (class_index < 0 || class_index >= class_count())
      throw ConfigError("unknown synthetic class index " + std::to_string(class_index));
    return templates_[static_cast<std::size_t>(class_index)];
  }

  static LabelCode offline_code(int class_index) {
    return LabelCode::gb(static_cast<std::uint16_t>(kFirstCode + class_index));
  }

  static LabelCode online_code(int class_index) {
    auto c = offline_code(class_index);
    c.size = 4;
    return c;
  }

 private:
  std::uint64_t seed_ = 0;
  std::vector<std::vector<Polyline>> templates_;
};

/// Slant, then scale: (x, y) -> ((x + y tan(slant)) sx, y sy). Jitter is
/// added separately.
inline Point2 apply_style(const WriterStyle& s, Point2 p) {
  return {(p.x + p.y * std::tan(s.slant)) * s.scale_x, p.y * s.scale_y};
}

namespace detail {

inline std::int16_t to_tablet(double v) {
  return static_cast<std::int16_t>(std::clamp(std::lround(v), -32768L, 32767L));
}

inline double segment_distance(Point2 p, Point2 a, Point2 b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

}  // namespace detail

/// Rasterize a trajectory (tablet units) with anti-aliased round pens.
inline OfflineSample rasterize(const OnlineSample& online, double thickness, double contrast) {
  constexpr double kMargin = 2.0;
  std::vector<std::vector<Point2>> px;
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const auto& st : online.strokes) {
    auto& out = px.emplace_back();
    for (const auto& p : st) {
      Point2 q{p.x / kUnitsPerPixel, p.y / kUnitsPerPixel};
      out.push_back(q);
      x0 = std::min(x0, q.x), y0 = std::min(y0, q.y), x1 = std::max(x1, q.x), y1 = std::max(y1, q.y);
    }
  }
  const double pad = thickness / 2 + kMargin;
  const double ox = std::floor(x0 - pad), oy = std::floor(y0 - pad);
  const int w = std::max(1, static_cast<int>(std::ceil(x1 + pad - ox)));
  const int h = std::max(1, static_cast<int>(std::ceil(y1 + pad - oy)));

  Grid<double> ink(w, h, 0.0);
  const double r = thickness / 2;
  for (const auto& st : px) {
    for (std::size_t i = 0; i < st.size(); ++i) {
      const Point2 a{st[i].x - ox, st[i].y - oy};
      const Point2 b = i + 1 < st.size() ? Point2{st[i + 1].x - ox, st[i + 1].y - oy} : a;
      if (i + 1 == st.size() && st.size() > 1) break;
      const int bx0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - r - 1)));
      const int bx1 = std::min(w - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + r + 1)));
      const int by0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - r - 1)));
      const int by1 = std::min(h - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + r + 1)));
      for (int y = by0; y <= by1; ++y)
        for (int x = bx0; x <= bx1; ++x) {
          const double d = detail::segment_distance({x + 0.5, y + 0.5}, a, b);
          ink(x, y) = std::max(ink(x, y), std::clamp(r + 0.5 - d, 0.0, 1.0));
        }
    }
  }

  OfflineSample off;
  off.width = w;
  off.height = h;
  off.gray.resize(ink.size());
  for (std::size_t i = 0; i < ink.size(); ++i)
    off.gray[i] = static_cast<std::uint8_t>(255 - std::lround(255.0 * contrast * ink.values[i]));
  off.label = online.label;
  off.writer_id = online.writer_id;
  return off;
}

/// Render one glyph under a writer style. Pure function of
/// (grammar seed, style, class_index).
inline std::pair<OnlineSample, OfflineSample> generate(const ClassGrammar& grammar, const WriterStyle& style,
                                                       int class_index) {
  style.validate();
  const auto& glyph = grammar.glyph(class_index);
  std::mt19937_64 rng(mix_seed(grammar.seed(), style.seed, static_cast<std::uint64_t>(class_index)));
  std::normal_distribution<double> noise(0.0, 1.0);

  OnlineSample on;
  on.code = ClassGrammar::online_code(class_index);
  on.label = class_index;
  for (const auto& poly : glyph) {
    Stroke st;
    for (const auto& p : poly) {
      Point2 q = apply_style(style, p);
      if (style.jitter_sigma > 0) {
        q.x += style.jitter_sigma * noise(rng);
        q.y += style.jitter_sigma * noise(rng);
      }
      TabletPoint t{detail::to_tablet(q.x), detail::to_tablet(q.y)};
      if (t == kStrokeEnd || t == kCharEnd) t.x = -2;
      st.push_back(t);
    }
    on.strokes.push_back(std::move(st));
  }
  OfflineSample off = rasterize(on, style.thickness, style.contrast);
  off.code = ClassGrammar::offline_code(class_index);
  return {std::move(on), std::move(off)};
}

/// Ranges from which writer styles are drawn.
struct StyleRange {
  double slant_min = -0.15, slant_max = 0.15;
  double scale_min = 0.8, scale_max = 1.2;
  double aspect_min = 0.9, aspect_max = 1.1;  // scale_y / scale_x
  double jitter_min = 10.0, jitter_max = 25.0;
  double thickness_min = 1.5, thickness_max = 3.0;
  double contrast_min = 0.6, contrast_max = 1.0;
};

inline WriterStyle random_writer(std::uint64_t seed, const StyleRange& r = {}) {
  std::mt19937_64 rng(mix_seed(seed, 0x77726974));
  auto U = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  WriterStyle s;
  s.seed = seed;
  s.slant = U(r.slant_min, r.slant_max);
  s.scale_x = U(r.scale_min, r.scale_max);
  s.scale_y = s.scale_x * U(r.aspect_min, r.aspect_max);
  s.jitter_sigma = U(r.jitter_min, r.jitter_max);
  s.thickness = U(r.thickness_min, r.thickness_max);
  s.contrast = U(r.contrast_min, r.contrast_max);
  return s;
}

/// Per-sample variant of a writer style: same distortion, fresh jitter.
inline WriterStyle sample_style(const WriterStyle& writer, std::uint64_t repetition) {
  WriterStyle s = writer;
  s.seed = mix_seed(writer.seed, repetition);
  return s;
}

}  // namespace hccr::synth
