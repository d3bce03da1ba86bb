#pragma once

// Sample -> directMap feature pipeline and synthetic dataset assembly.

#include <optional>
#include <string>
#include <vector>

#include "hccr/common.hpp"
#include "hccr/convnet.hpp"
#include "hccr/directmap.hpp"
#include "hccr/sample_io.hpp"
#include "hccr/shape_norm.hpp"
#include "hccr/synth.hpp"

namespace hccr::pipeline {

enum class Normalization { linear, bimoment, p2dbmn, ldpi };

inline const char* to_string(Normalization n) {
  switch (n) {
    case Normalization::linear: return "linear";
    case Normalization::bimoment: return "bimoment";
    case Normalization::p2dbmn: return "p2dbmn";
    case Normalization::ldpi: return "ldpi";
  }
  return "?";
}
inline const char* to_string(GrayMode g) {
  switch (g) {
    case GrayMode::none: return "none";
    case GrayMode::linear: return "linear";
    case GrayMode::nonlinear: return "nonlinear";
  }
  return "?";
}
inline const char* to_string(Cooperation c) { return c == Cooperation::cooperated ? "cooperated" : "based"; }
inline const char* to_string(Modality m) { return m == Modality::offline ? "offline" : "online"; }

struct FeatureOptions {
  Modality modality = Modality::offline;
  GrayMode gray = GrayMode::nonlinear;
  Normalization norm = Normalization::ldpi;
  Cooperation coop = Cooperation::cooperated;
  int size = 32;

  static FeatureOptions offline_default() { return {}; }
  static FeatureOptions online_default() {
    return {Modality::online, GrayMode::none, Normalization::p2dbmn, Cooperation::cooperated, 32};
  }

  void validate() const {
    if (size < 4 || size > 256) throw ConfigError("feature size must be in [4, 256]");
    if (modality == Modality::online && norm == Normalization::ldpi)
      throw ConfigError("LDPI normalization needs an image; it does not apply to online trajectories");
    if (modality == Modality::online && coop == Cooperation::based)
      throw ConfigError("normalization-based extraction is defined for offline images only");
  }
};

/// Shape normalization map for an intensity field; falls back to the linear
/// fit when the chosen method has a degenerate input (single-point mass).
inline CoordinateMap fit_map(const IntensityField& f, Normalization norm, int n, bool* fell_back = nullptr) {
  const auto box = ink_box(f);
  if (!box) throw DataError("sample has no ink");
  if (fell_back) *fell_back = false;
  try {
    switch (norm) {
      case Normalization::linear: return fit_linear(*box, n);
      case Normalization::bimoment: return fit_bimoment(f, n);
      case Normalization::p2dbmn: return fit_p2dbmn(f, n);
      case Normalization::ldpi: return fit_ldpi(f, n);
    }
  } catch (const DataError&) {
  } catch (const NumericError&) {
  } catch (const std::invalid_argument&) {
  }
  if (fell_back) *fell_back = true;
  return fit_linear(*box, n);
}

inline CoordinateMap fit_map(const OnlineSample& s, Normalization norm, int n, bool* fell_back = nullptr) {
  const auto box = ink_box(s);
  if (!box) throw DataError("sample has no points");
  if (fell_back) *fell_back = false;
  try {
    switch (norm) {
      case Normalization::linear: return fit_linear(*box, n);
      case Normalization::bimoment: return fit_bimoment(s, n);
      case Normalization::p2dbmn: return fit_p2dbmn(s, n);
      case Normalization::ldpi: throw ConfigError("LDPI normalization does not apply to online trajectories");
    }
  } catch (const DataError&) {
  } catch (const NumericError&) {
  } catch (const std::invalid_argument&) {
  }
  if (fell_back) *fell_back = true;
  return fit_linear(*box, n);
}

inline DirectMap extract(const OfflineSample& s, const FeatureOptions& opt, ExtractStats* stats = nullptr) {
  const auto field = gray_normalize(s, opt.gray);
  const auto map = fit_map(field, opt.norm, opt.size);
  OfflineOptions o;
  o.mode = opt.coop;
  auto m = extract_offline(field, map, o, stats);
  m.code = s.code;
  m.label = s.label;
  m.writer_id = s.writer_id;
  return m;
}

inline DirectMap extract(const OnlineSample& s, const FeatureOptions& opt, ExtractStats* stats = nullptr) {
  const auto map = fit_map(s, opt.norm, opt.size);
  auto m = extract_online(s, map, {}, stats);
  m.code = s.code;
  m.label = s.label;
  m.writer_id = s.writer_id;
  return m;
}

/// Raw-image network input of the same shape: the gray-normalized image
/// linearly fitted into size x size, replicated across `planes` channels.
inline DirectMap raw_image_input(const OfflineSample& s, const FeatureOptions& opt, int planes = kDirections) {
  const auto field = gray_normalize(s, opt.gray);
  const auto box = ink_box(field);
  if (!box) throw DataError("sample has no ink");
  const auto img = resample(field, fit_linear(*box, opt.size));
  DirectMap m;
  m.d = planes;
  m.n = opt.size;
  m.values.assign(static_cast<std::size_t>(planes) * opt.size * opt.size, 0.0f);
  for (int p = 0; p < planes; ++p)
    for (int y = 0; y < opt.size; ++y)
      for (int x = 0; x < opt.size; ++x)
        m.values[(static_cast<std::size_t>(p) * opt.size + y) * opt.size + x] = static_cast<float>(img(x, y));
  m.code = s.code;
  m.label = s.label;
  m.writer_id = s.writer_id;
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic corpora

struct SynthSpec {
  int classes = 20;
  int writers = 10;
  int samples_per_writer = 1;  // repetitions of each class per writer
  std::uint64_t seed = 1;
  std::int64_t first_writer = 1;
  synth::StyleRange range{};
  std::optional<synth::WriterStyle> style_shift;  // composed onto every writer

  void validate() const {
    if (classes < 1 || classes > 20) throw ConfigError("synthetic class count must be in [1, 20]");
    if (writers < 1) throw ConfigError("synthetic writer count must be positive");
    if (samples_per_writer < 1) throw ConfigError("samples per writer must be positive");
  }
};

struct SynthCorpus {
  std::vector<OnlineSample> online;
  std::vector<OfflineSample> offline;
};

/// Writers w = first_writer .. first_writer + writers - 1, each with every
/// class repeated samples_per_writer times. Writer styles depend on
/// (seed, writer id) only.
inline SynthCorpus make_corpus(const SynthSpec& spec) {
  spec.validate();
  const auto grammar = synth::ClassGrammar::builtin(0);
  SynthCorpus out;
  for (int w = 0; w < spec.writers; ++w) {
    const std::int64_t id = spec.first_writer + w;
    auto style = synth::random_writer(mix_seed(spec.seed, static_cast<std::uint64_t>(id)), spec.range);
    if (spec.style_shift) {
      const auto& sh = *spec.style_shift;
      style.slant += sh.slant;
      style.scale_x *= sh.scale_x;
      style.scale_y *= sh.scale_y;
      style.jitter_sigma += sh.jitter_sigma;
      style.thickness *= sh.thickness / 2.0;
      style.contrast = std::min(1.0, style.contrast * sh.contrast);
    }
    for (int r = 0; r < spec.samples_per_writer; ++r)
      for (int c = 0; c < spec.classes; ++c) {
        auto [on, off] = synth::generate(grammar, synth::sample_style(style, static_cast<std::uint64_t>(r)), c);
        on.writer_id = off.writer_id = id;
        on.label = off.label = c;
        out.online.push_back(std::move(on));
        out.offline.push_back(std::move(off));
      }
  }
  return out;
}

inline void append(nn::TensorSet& set, const DirectMap& m) { set.add(m.values, m.label); }

}  // namespace hccr::pipeline
