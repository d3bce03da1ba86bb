#pragma once

// Experiment configuration: INI text (sections + key = value), strictly
// validated. Unknown sections or keys are errors.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "hccr/adaptation.hpp"
#include "hccr/convnet.hpp"
#include "hccr/pipeline.hpp"
#include "hccr/training.hpp"

namespace hccr::harness {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | manifest
  std::string manifest;              // manifest path when source = manifest
  int classes = 20;
  int train_writers = 20;
  int train_samples = 5;  // repetitions of every class per training writer
  int test_writers = 10;
  int test_samples = 10;
  double shift_slant = 0.3;  // style shift of held-out writers (radians)
  double shift_jitter = 20.0;
  std::uint64_t seed = 11;

  pipeline::SynthSpec train_spec() const {
    pipeline::SynthSpec s;
    s.classes = classes;
    s.writers = train_writers;
    s.samples_per_writer = train_samples;
    s.seed = seed;
    s.first_writer = 1;
    return s;
  }
  pipeline::SynthSpec test_spec() const {
    pipeline::SynthSpec s;
    s.classes = classes;
    s.writers = test_writers;
    s.samples_per_writer = test_samples;
    s.seed = seed;
    s.first_writer = 1001;
    synth::WriterStyle shift;
    shift.slant = shift_slant;
    shift.jitter_sigma = shift_jitter;
    s.style_shift = shift;
    return s;
  }
};

struct ExperimentConfig {
  DataConfig data;
  pipeline::FeatureOptions features;
  std::string arch = "toy";  // toy | full
  double dropout_scale = 0.0;
  int source_layer = -1;  // -1: last hidden dense layer
  nn::TrainConfig train = toy_train_defaults();
  std::size_t rescale_samples = nn::kRescaleSubsample;
  adapt::AdaptConfig adapt;
  int ensemble = 1;
  std::string output_dir = "out";
  std::uint64_t seed = 1;
  int precision = 32;

  /// SGD settings for the desk-scale network: the full recipe with a
  /// smaller batch and a rate scaled to the narrower layers.
  static nn::TrainConfig toy_train_defaults() {
    nn::TrainConfig t;
    t.batch_size = 50;
    t.learning_rate = 1e-4;
    t.max_epochs = 30;
    return t;
  }

  nn::Architecture architecture(int classes) const {
    if (arch == "full") return nn::Architecture::full(classes, kDirections, features.size);
    return nn::Architecture::toy(classes, kDirections, features.size, dropout_scale);
  }

  void validate() const {
    features.validate();
    train.validate();
    adapt.validate();
    if (data.source != "synthetic" && data.source != "manifest") throw ConfigError("data.source must be synthetic or manifest");
    if (data.source == "manifest" && data.manifest.empty()) throw ConfigError("data.manifest is required when data.source = manifest");
    if (data.source == "synthetic") {
      data.train_spec().validate();
      if (data.test_writers < 1 || data.test_samples < 1) throw ConfigError("synthetic test writers and samples must be positive");
    }
    if (arch != "toy" && arch != "full") throw ConfigError("network.arch must be toy or full");
    if (arch == "full" && features.size != 32) throw ConfigError("the full architecture expects 32x32 maps");
    if (arch == "toy" && features.size % 8) throw ConfigError("the toy architecture needs a map size divisible by 8");
    if (!(dropout_scale >= 0 && dropout_scale <= 2)) throw ConfigError("network.dropout_scale must be in [0, 2]");
    if (ensemble < 1 || ensemble > 16) throw ConfigError("eval.ensemble must be in [1, 16]");
    if (precision != 32 && precision != 64) throw ConfigError("precision must be 32 or 64");
    if (output_dir.empty()) throw ConfigError("output.dir must not be empty");
  }
};

namespace detail {

template <typename E>
E parse_enum(const std::string& key, const std::string& v, std::initializer_list<std::pair<const char*, E>> table) {
  for (const auto& [name, value] : table)
    if (v == name) return value;
  std::string options;
  for (const auto& [name, value] : table) options += std::string(options.empty() ? "" : ", ") + name;
  throw ConfigError(key + ": unknown value '" + v + "' (expected one of " + options + ")");
}

template <typename T>
T get(const boost::property_tree::ptree& pt, const std::string& key, T fallback) {
  const auto node = pt.get_child_optional(boost::property_tree::ptree::path_type(key, '.'));
  if (!node) return fallback;
  const auto text = node->get_value<std::string>();
  if constexpr (std::is_same_v<T, std::string>) {
    return text;
  } else {
    std::istringstream is(text);
    T v{};
    is >> v;
    if (is.fail() || !(is >> std::ws).eof()) throw ConfigError(key + ": cannot parse '" + text + "'");
    return v;
  }
}

inline const std::map<std::string, std::set<std::string>>& allowed_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"data", {"source", "manifest", "classes", "train_writers", "train_samples", "test_writers", "test_samples",
                "shift_slant", "shift_jitter", "seed"}},
      {"features", {"modality", "gray", "normalization", "cooperation", "size"}},
      {"network", {"arch", "dropout_scale", "source_layer"}},
      {"train", {"batch_size", "learning_rate", "momentum", "decay_factor", "weight_decay", "patience", "max_decays",
                 "max_epochs", "rescale_samples"}},
      {"adapt", {"beta_tilde", "gamma", "iterations", "beta"}},
      {"eval", {"ensemble"}},
      {"output", {"dir"}},
      {"run", {"seed", "jobs", "precision"}},
  };
  return keys;
}

}  // namespace detail

/// Parses INI text. Relative paths stay relative to `base_dir`.
inline ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {}) {
  boost::property_tree::ptree pt;
  try {
    std::istringstream is(text);
    boost::property_tree::read_ini(is, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  const auto& allowed = detail::allowed_keys();
  for (const auto& [section, child] : pt) {
    auto it = allowed.find(section);
    if (it == allowed.end()) throw ConfigError("unknown config section [" + section + "]");
    if (!child.data().empty() && child.empty()) throw ConfigError("key '" + section + "' outside a section");
    for (const auto& [key, value] : child)
      if (!it->second.count(key)) throw ConfigError("unknown config key " + section + "." + key);
  }

  using detail::get;
  ExperimentConfig c;
  auto& d = c.data;
  d.source = get(pt, "data.source", d.source);
  d.manifest = get(pt, "data.manifest", d.manifest);
  if (!d.manifest.empty() && !base_dir.empty() && std::filesystem::path(d.manifest).is_relative())
    d.manifest = (base_dir / d.manifest).string();
  d.classes = get(pt, "data.classes", d.classes);
  d.train_writers = get(pt, "data.train_writers", d.train_writers);
  d.train_samples = get(pt, "data.train_samples", d.train_samples);
  d.test_writers = get(pt, "data.test_writers", d.test_writers);
  d.test_samples = get(pt, "data.test_samples", d.test_samples);
  d.shift_slant = get(pt, "data.shift_slant", d.shift_slant);
  d.shift_jitter = get(pt, "data.shift_jitter", d.shift_jitter);
  d.seed = get(pt, "data.seed", d.seed);

  auto& f = c.features;
  const auto modality = get<std::string>(pt, "features.modality", "offline");
  f = modality == "online" ? pipeline::FeatureOptions::online_default() : pipeline::FeatureOptions::offline_default();
  f.modality = detail::parse_enum<Modality>("features.modality", modality,
                                            {{"offline", Modality::offline}, {"online", Modality::online}});
  if (auto v = pt.get_optional<std::string>("features.gray"))
    f.gray = detail::parse_enum<GrayMode>("features.gray", *v,
                                          {{"none", GrayMode::none}, {"linear", GrayMode::linear}, {"nonlinear", GrayMode::nonlinear}});
  if (auto v = pt.get_optional<std::string>("features.normalization"))
    f.norm = detail::parse_enum<pipeline::Normalization>(
        "features.normalization", *v,
        {{"linear", pipeline::Normalization::linear}, {"bimoment", pipeline::Normalization::bimoment},
         {"p2dbmn", pipeline::Normalization::p2dbmn}, {"ldpi", pipeline::Normalization::ldpi}});
  if (auto v = pt.get_optional<std::string>("features.cooperation"))
    f.coop = detail::parse_enum<Cooperation>("features.cooperation", *v,
                                             {{"cooperated", Cooperation::cooperated}, {"based", Cooperation::based}});
  f.size = get(pt, "features.size", f.size);

  c.arch = get(pt, "network.arch", c.arch);
  c.dropout_scale = get(pt, "network.dropout_scale", c.dropout_scale);
  c.source_layer = get(pt, "network.source_layer", c.source_layer);

  auto& t = c.train;
  if (c.arch == "full") t = nn::TrainConfig{};
  t.batch_size = get(pt, "train.batch_size", t.batch_size);
  t.learning_rate = get(pt, "train.learning_rate", t.learning_rate);
  t.momentum = get(pt, "train.momentum", t.momentum);
  t.decay_factor = get(pt, "train.decay_factor", t.decay_factor);
  t.weight_decay = get(pt, "train.weight_decay", t.weight_decay);
  t.patience = get(pt, "train.patience", t.patience);
  t.max_decays = get(pt, "train.max_decays", t.max_decays);
  t.max_epochs = get(pt, "train.max_epochs", t.max_epochs);
  c.rescale_samples = get(pt, "train.rescale_samples", c.rescale_samples);

  auto& a = c.adapt;
  a.beta_tilde = get(pt, "adapt.beta_tilde", a.beta_tilde);
  a.gamma = get(pt, "adapt.gamma", a.gamma);
  a.iterations = get(pt, "adapt.iterations", a.iterations);
  if (pt.get_optional<std::string>("adapt.beta")) a.beta = get(pt, "adapt.beta", 0.0);

  c.ensemble = get(pt, "eval.ensemble", c.ensemble);
  c.output_dir = get(pt, "output.dir", c.output_dir);
  if (!base_dir.empty() && std::filesystem::path(c.output_dir).is_relative()) c.output_dir = (base_dir / c.output_dir).string();
  c.seed = get(pt, "run.seed", c.seed);
  c.train.jobs = get(pt, "run.jobs", c.train.jobs);
  c.precision = get(pt, "run.precision", c.precision);
  c.train.seed = c.seed;
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

}  // namespace hccr::harness
