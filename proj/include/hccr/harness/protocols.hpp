#pragma once

// In-memory experiment protocols on the synthetic corpus: model training,
// per-writer adaptation, and the ablation tables.

#include <algorithm>
#include <iomanip>
#include <span>
#include <sstream>
#include <map>
#include <vector>

#include "hccr/adaptation.hpp"
#include "hccr/baseline.hpp"
#include "hccr/harness/config.hpp"
#include "hccr/harness/metrics.hpp"
#include "hccr/pipeline.hpp"
#include "hccr/training.hpp"

namespace hccr::harness {

struct Dataset {
  nn::TensorSet train, test;
  std::vector<std::int64_t> test_writers;  // writer id of every test sample
  int classes = 0;
};

/// Synthetic train/test maps. `raw` replaces directMaps by the normalized
/// gray image replicated across planes (same tensor shape).
inline Dataset build_synthetic(const DataConfig& data, const pipeline::FeatureOptions& opt, bool raw = false) {
  opt.validate();
  Dataset ds;
  ds.classes = data.classes;
  auto add = [&](const pipeline::SynthCorpus& c, nn::TensorSet& set, std::vector<std::int64_t>* writers) {
    for (std::size_t i = 0; i < c.offline.size(); ++i) {
      DirectMap m;
      if (raw) m = pipeline::raw_image_input(c.offline[i], opt);
      else if (opt.modality == Modality::online) m = pipeline::extract(c.online[i], opt);
      else m = pipeline::extract(c.offline[i], opt);
      pipeline::append(set, m);
      if (writers) writers->push_back(m.writer_id);
    }
  };
  add(pipeline::make_corpus(data.train_spec()), ds.train, nullptr);
  add(pipeline::make_corpus(data.test_spec()), ds.test, &ds.test_writers);
  return ds;
}

/// Initializes (seeded by (seed, member)), rescales and trains one model.
template <typename T>
nn::Network<T> train_model(const ExperimentConfig& cfg, int classes, const nn::TensorSet& train,
                           const nn::TensorSet* test, int member = 0, nn::TrainLog* log = nullptr,
                           const nn::EpochCallback& on_epoch = {}) {
  auto net = nn::Network<T>::init(cfg.architecture(classes), mix_seed(cfg.seed, 0x6D6F64, static_cast<std::uint64_t>(member)));
  net.input_scale = nn::estimate_rescale(net, train, cfg.rescale_samples).v;
  auto tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, 0x747261, static_cast<std::uint64_t>(member));
  auto l = nn::fit(net, tc, train, test, on_epoch);
  if (log) *log = std::move(l);
  return net;
}

/// First epoch whose training accuracy is 1, or -1.
inline int epochs_to_full(const nn::TrainLog& log) {
  for (const auto& e : log.epochs)
    if (e.train_accuracy >= 1.0) return e.epoch;
  return -1;
}

inline int source_layer(const ExperimentConfig& cfg, const nn::Architecture& arch) {
  if (cfg.source_layer < 0) return arch.default_source_layer();
  if (cfg.source_layer >= static_cast<int>(arch.layers.size()) - 1) throw ConfigError("network.source_layer out of range");
  return cfg.source_layer;
}

/// Unsupervised adaptation of every test writer separately. Class means come
/// from the training set on the source layer.
template <typename T>
MetricsReport run_adaptation(const nn::Network<T>& net, const ExperimentConfig& cfg, const nn::TensorSet& train,
                             const nn::TensorSet& test, std::span<const std::int64_t> writers,
                             std::map<std::int64_t, adapt::StyleTransform>* transforms = nullptr) {
  const int layer = source_layer(cfg, net.arch);
  std::vector<T> train_x(train.data.begin(), train.data.end());
  const auto phi = adapt::source_features(net, std::span<const T>(train_x), static_cast<int>(train.size()), layer);
  const auto means = adapt::class_means(phi, train.labels, net.num_classes());

  std::vector<std::int64_t> ids;
  for (auto w : writers)
    if (std::find(ids.begin(), ids.end(), w) == ids.end()) ids.push_back(w);

  MetricsReport rep;
  rep.command = "adapt";
  rep.samples = test.size();
  double pre_sum = 0, post_sum = 0, rate_sum = 0;
  std::size_t rate_n = 0;
  for (auto id : ids) {
    std::vector<T> x;
    std::vector<int> y;
    for (std::size_t i = 0; i < test.size(); ++i)
      if (writers[i] == id) {
        auto s = test.sample(i);
        x.insert(x.end(), s.begin(), s.end());
        y.push_back(test.labels[i]);
      }
    if (y.empty()) continue;
    const auto r = adapt::adapt_unsupervised(net, means, std::span<const T>(x), static_cast<int>(y.size()), layer, cfg.adapt);
    std::size_t a0 = 0, a1 = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      a0 += r.initial_predictions[i] == y[i];
      a1 += r.predictions[i] == y[i];
    }
    WriterResult w;
    w.writer = id;
    w.samples = y.size();
    w.accuracy = double(a0) / double(y.size());
    w.adapted = double(a1) / double(y.size());
    w.reduction_rate = adapt::error_reduction_rate(1.0 - w.accuracy, 1.0 - *w.adapted);
    pre_sum += w.accuracy;
    post_sum += *w.adapted;
    if (w.reduction_rate) rate_sum += *w.reduction_rate, ++rate_n;
    rep.writers.push_back(w);
    if (transforms) (*transforms)[id] = r.transform;
  }
  if (!rep.writers.empty()) {
    rep.scalars["mean_accuracy"] = pre_sum / static_cast<double>(rep.writers.size());
    rep.scalars["mean_adapted_accuracy"] = post_sum / static_cast<double>(rep.writers.size());
  }
  if (rate_n) rep.scalars["mean_reduction_rate"] = rate_sum / static_cast<double>(rate_n);
  return rep;
}

// ---------------------------------------------------------------------------
// Ablations

struct TrainingRun {
  nn::TrainLog log;
  double train_accuracy = 0;  // last epoch
  double test_accuracy = 0;   // eval mode, after training
  int epochs_to_full = -1;
};

template <typename T>
TrainingRun run_training(const ExperimentConfig& cfg, const Dataset& ds) {
  TrainingRun r;
  const auto net = train_model<T>(cfg, ds.classes, ds.train, nullptr, 0, &r.log);
  r.train_accuracy = r.log.epochs.back().train_accuracy;
  r.test_accuracy = nn::accuracy(net, ds.test);
  r.epochs_to_full = epochs_to_full(r.log);
  return r;
}

inline TableRow training_row(const std::string& table, const std::string& variant, const TrainingRun& r) {
  return {table,
          variant,
          {{"train_accuracy", r.train_accuracy},
           {"test_accuracy", r.test_accuracy},
           {"epochs", static_cast<double>(r.log.epochs.size())},
           {"epochs_to_full", static_cast<double>(r.epochs_to_full)}}};
}

/// Same network and data with and without dropout.
template <typename T>
std::vector<TableRow> ablation_dropout(ExperimentConfig cfg, double dropout_scale = 1.0) {
  const auto ds = build_synthetic(cfg.data, cfg.features);
  cfg.dropout_scale = 0.0;
  const auto plain = run_training<T>(cfg, ds);
  cfg.dropout_scale = dropout_scale;
  const auto drop = run_training<T>(cfg, ds);
  return {training_row("dropout", "no_dropout", plain), training_row("dropout", "dropout", drop)};
}

/// directMap input vs normalized raw image at equal architecture.
template <typename T>
std::vector<TableRow> ablation_input(const ExperimentConfig& cfg) {
  const auto maps = run_training<T>(cfg, build_synthetic(cfg.data, cfg.features));
  const auto raw = run_training<T>(cfg, build_synthetic(cfg.data, cfg.features, true));
  return {training_row("input", "directmap", maps), training_row("input", "raw_image", raw)};
}

/// Cooperated vs based extraction and the three gray modes (offline).
template <typename T>
std::vector<TableRow> ablation_normalization(ExperimentConfig cfg) {
  cfg.features.modality = Modality::offline;
  std::vector<TableRow> rows;
  for (auto coop : {Cooperation::cooperated, Cooperation::based}) {
    auto c = cfg;
    c.features.coop = coop;
    rows.push_back(training_row("cooperation", pipeline::to_string(coop), run_training<T>(c, build_synthetic(c.data, c.features))));
  }
  for (auto gray : {GrayMode::none, GrayMode::linear, GrayMode::nonlinear}) {
    auto c = cfg;
    c.features.gray = gray;
    c.features.coop = Cooperation::cooperated;
    rows.push_back(training_row("gray", pipeline::to_string(gray), run_training<T>(c, build_synthetic(c.data, c.features))));
  }
  return rows;
}

/// Blur-sampled 512-dim features of every map in the set, one row each;
/// `box_cox` applies the square root.
inline Eigen::MatrixXd blur_features(const nn::TensorSet& set, int d, int n, bool box_cox) {
  Eigen::MatrixXd X;
  for (std::size_t i = 0; i < set.size(); ++i) {
    DirectMap m(d, n);
    const auto s = set.sample(i);
    std::copy(s.begin(), s.end(), m.values.begin());
    auto f = baseline::blur_sample(m);
    if (box_cox) f = baseline::boxcox(f);
    if (i == 0) X.resize(static_cast<Eigen::Index>(set.size()), static_cast<Eigen::Index>(f.size()));
    X.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
  }
  return X;
}

/// Traditional pipeline on the same maps: NPC on raw blurred features
/// against blur, Box-Cox, FDA and then NPC or MQDF.
inline std::vector<TableRow> baseline_table(const Dataset& ds, int d, int n, int mqdf_k = baseline::kDefaultPrincipalAxes) {
  auto score = [&](auto&& classify, const Eigen::MatrixXd& X) {
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < X.rows(); ++i) hits += classify(Eigen::VectorXd(X.row(i).transpose())) == ds.test.labels[static_cast<std::size_t>(i)];
    return X.rows() ? double(hits) / double(X.rows()) : 0.0;
  };
  std::vector<TableRow> rows;
  const auto raw_train = blur_features(ds.train, d, n, false), raw_test = blur_features(ds.test, d, n, false);
  const auto npc_raw = baseline::NearestPrototype::fit(raw_train, ds.train.labels, ds.classes);
  rows.push_back({"baseline", "npc_raw", {{"test_accuracy", score([&](const auto& x) { return npc_raw.classify(x); }, raw_test)}}});

  const auto bc_train = blur_features(ds.train, d, n, true), bc_test = blur_features(ds.test, d, n, true);
  const int out_dim = std::min<int>(160, ds.classes - 1);
  const auto fda = baseline::fit_projection(bc_train, ds.train.labels, ds.classes, baseline::ProjectionKind::fda, out_dim);
  const Eigen::MatrixXd z_train = fda.project_rows(bc_train), z_test = fda.project_rows(bc_test);
  const auto npc = baseline::NearestPrototype::fit(z_train, ds.train.labels, ds.classes);
  rows.push_back({"baseline", "fda_npc", {{"test_accuracy", score([&](const auto& x) { return npc.classify(x); }, z_test)}}});
  const auto mqdf = baseline::MqdfModel::fit(z_train, ds.train.labels, ds.classes, std::min(mqdf_k, out_dim));
  rows.push_back({"baseline", "fda_mqdf", {{"test_accuracy", score([&](const auto& x) { return mqdf.classify(x); }, z_test)}}});
  return rows;
}

/// Plain-text rendering of table rows.
inline std::string format_table(std::span<const TableRow> rows) {
  std::ostringstream os;
  os << std::left << std::setw(12) << "table" << std::setw(14) << "variant" << std::setw(10) << "train" << std::setw(10)
     << "test" << std::setw(8) << "epochs" << "to_100%\n";
  for (const auto& r : rows) {
    auto v = [&](const char* k) { auto it = r.values.find(k); return it == r.values.end() ? 0.0 : it->second; };
    os << std::left << std::setw(12) << r.table << std::setw(14) << r.variant << std::setw(10) << std::fixed
       << std::setprecision(4) << v("train_accuracy") << std::setw(10) << v("test_accuracy") << std::setw(8)
       << std::setprecision(0) << v("epochs") << v("epochs_to_full") << '\n';
  }
  return os.str();
}

}  // namespace hccr::harness
