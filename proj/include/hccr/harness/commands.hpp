#pragma once

// File-based subcommands. Layout under the output directory:
//   data/manifest.tsv, data/{train,test}.{gnt,pot}   gen-synth
//   cache/index.tsv, cache/<split>/<n>.dmap           extract
//   models/model_<k>.hcnn, models/model_<k>.log.jsonl train
//   adapt/writer_<id>.stma                            adapt
//   metrics/<command>.jsonl                           every command

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hccr/adaptation.hpp"
#include "hccr/baseline.hpp"
#include "hccr/harness/config.hpp"
#include "hccr/harness/metrics.hpp"
#include "hccr/harness/protocols.hpp"
#include "hccr/pipeline.hpp"
#include "hccr/sample_io.hpp"
#include "hccr/training.hpp"

namespace hccr::harness {

namespace fs = std::filesystem;

inline fs::path out_dir(const ExperimentConfig& c) { return fs::path(c.output_dir); }

inline void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  write_file(p.string(), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline void write_metrics(const ExperimentConfig& c, const MetricsReport& r) {
  write_text(out_dir(c) / "metrics" / (r.command + ".jsonl"), r.to_jsonl());
}

inline fs::path manifest_path(const ExperimentConfig& c) {
  return c.data.source == "manifest" ? fs::path(c.data.manifest) : out_dir(c) / "data" / "manifest.tsv";
}

// ---------------------------------------------------------------------------
// gen-synth

inline MetricsReport cmd_gen_synth(const ExperimentConfig& c) {
  if (c.data.source != "synthetic") throw ConfigError("gen-synth needs data.source = synthetic");
  const bool online = c.features.modality == Modality::online;
  const std::string ext = online ? ".pot" : ".gnt";
  ClassVocabulary vocab;
  for (int k = 0; k < c.data.classes; ++k)
    vocab.add(online ? synth::ClassGrammar::online_code(k) : synth::ClassGrammar::offline_code(k));
  DatasetManifest manifest(vocab);
  MetricsReport rep;
  rep.command = "gen-synth";
  for (auto [split, spec] : {std::pair{Split::train, c.data.train_spec()}, std::pair{Split::test, c.data.test_spec()}}) {
    const auto corpus = pipeline::make_corpus(spec);
    const std::string name = std::string(to_string(split)) + ext;
    Bytes bytes;
    for (std::size_t i = 0; i < corpus.offline.size(); ++i) {
      const auto offset = bytes.size();
      if (online) append_pot(bytes, corpus.online[i]);
      else append_gnt(bytes, corpus.offline[i]);
      const auto& code = online ? corpus.online[i].code : corpus.offline[i].code;
      manifest.add({name, offset, code, corpus.offline[i].writer_id, split});
    }
    fs::create_directories(out_dir(c) / "data");
    write_file((out_dir(c) / "data" / name).string(), bytes);
    rep.scalars[std::string(to_string(split)) + "_samples"] = static_cast<double>(corpus.offline.size());
    rep.samples += corpus.offline.size();
  }
  manifest.save((out_dir(c) / "data" / "manifest.tsv").string());
  write_metrics(c, rep);
  return rep;
}

// ---------------------------------------------------------------------------
// Sample loading

/// Samples of one split in manifest order. Each container file is parsed
/// once; records are matched by byte offset.
template <typename S>
std::vector<S> load_split(const DatasetManifest& m, const fs::path& base, Split split) {
  std::map<std::string, std::map<std::uint64_t, S>> files;
  std::vector<S> out;
  for (const auto& e : m.select(split)) {
    auto it = files.find(e.path);
    if (it == files.end()) {
      const auto path = fs::path(e.path).is_absolute() ? fs::path(e.path) : base / e.path;
      const auto bytes = read_file(path.string());
      std::map<std::uint64_t, S> by_offset;
      std::vector<S> parsed;
      try {
        if constexpr (std::is_same_v<S, OfflineSample>) parsed = parse_gnt(bytes);
        else parsed = parse_pot(bytes);
      } catch (const DataError& err) {
        throw DataError(path.string() + ": " + err.what());
      }
      std::uint64_t off = 0;
      for (auto& s : parsed) {
        const std::uint64_t size = [&] {
          if constexpr (std::is_same_v<S, OfflineSample>) return kGntHeaderSize + static_cast<std::uint64_t>(s.width) * s.height;
          else return static_cast<std::uint64_t>(pot_record_size(s));
        }();
        by_offset.emplace(off, std::move(s));
        off += size;
      }
      it = files.emplace(e.path, std::move(by_offset)).first;
    }
    auto rec = it->second.find(e.offset);
    if (rec == it->second.end()) throw DataError(e.path + ": no record starts at manifest offset", e.offset);
    S s = rec->second;
    if (!(s.code == e.code)) throw DataError(e.path + ": record tag " + s.code.hex() + " differs from manifest " + e.code.hex(), e.offset);
    s.label = m.label_of(e);
    s.writer_id = e.writer_id;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// extract

inline MetricsReport cmd_extract(const ExperimentConfig& c) {
  const auto mpath = manifest_path(c);
  const auto manifest = DatasetManifest::load(mpath.string());
  const auto base = mpath.parent_path();
  const auto cache = out_dir(c) / "cache";
  fs::remove_all(cache);
  std::ostringstream index;
  index << "# classes " << manifest.vocabulary().size() << '\n';
  double sparsity_sum = 0, clipped_sum = 0;
  std::size_t count = 0;
  for (auto split : {Split::train, Split::test, Split::adapt}) {
    std::vector<DirectMap> maps;
    std::vector<ExtractStats> stats;
    auto run = [&](const auto& samples) {
      for (const auto& s : samples) {
        ExtractStats st;
        maps.push_back(pipeline::extract(s, c.features, &st));
        stats.push_back(st);
      }
    };
    if (c.features.modality == Modality::online) run(load_split<OnlineSample>(manifest, base, split));
    else run(load_split<OfflineSample>(manifest, base, split));
    if (maps.empty()) continue;
    fs::create_directories(cache / to_string(split));
    for (std::size_t i = 0; i < maps.size(); ++i) {
      std::ostringstream name;
      name << to_string(split) << '/' << std::setw(6) << std::setfill('0') << i << ".dmap";
      write_file((cache / name.str()).string(), serialize_dmap(maps[i]));
      index << to_string(split) << '\t' << name.str() << '\t' << maps[i].label << '\t' << maps[i].writer_id << '\n';
      sparsity_sum += sparsity(maps[i]);
      clipped_sum += stats[i].clipped_fraction();
      ++count;
    }
  }
  write_text(cache / "index.tsv", index.str());
  MetricsReport rep;
  rep.command = "extract";
  rep.samples = count;
  if (count) {
    rep.scalars["mean_sparsity"] = sparsity_sum / static_cast<double>(count);
    rep.scalars["mean_clipped_fraction"] = clipped_sum / static_cast<double>(count);
  }
  write_metrics(c, rep);
  return rep;
}

struct CacheSplit {
  nn::TensorSet set;
  std::vector<std::int64_t> writers;
  int classes = 0;
};

inline CacheSplit load_cache(const ExperimentConfig& c, Split split) {
  const auto cache = out_dir(c) / "cache";
  const auto bytes = read_file((cache / "index.tsv").string());
  std::istringstream is(std::string(bytes.begin(), bytes.end()));
  CacheSplit out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("# classes ", 0) == 0) {
      out.classes = std::stoi(line.substr(10));
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string sp, file;
    int label;
    std::int64_t writer;
    if (!(ls >> sp >> file >> label >> writer)) throw DataError("malformed cache index line: " + line);
    if (parse_split(sp) != split) continue;
    const auto m = parse_dmap(read_file((cache / file).string()));
    if (m.n != c.features.size) throw DataError("cache map size differs from features.size; rerun extract");
    out.set.add(m.values, label);
    out.writers.push_back(writer);
  }
  if (out.classes < 1) throw DataError("cache index lacks a class count");
  return out;
}

// ---------------------------------------------------------------------------
// train / eval

inline fs::path model_path(const ExperimentConfig& c, int k) {
  return out_dir(c) / "models" / ("model_" + std::to_string(k) + ".hcnn");
}

inline std::string epoch_jsonl(const nn::EpochRecord& e) {
  nlohmann::json j = {{"epoch", e.epoch}, {"learning_rate", e.learning_rate}, {"loss", e.loss},
                      {"train_accuracy", e.train_accuracy}, {"decayed", e.decayed}};
  if (e.test_accuracy) j["test_accuracy"] = *e.test_accuracy;
  return j.dump() + "\n";
}

template <typename T>
MetricsReport cmd_train(const ExperimentConfig& c, std::ostream& log = std::cout) {
  const auto train = load_cache(c, Split::train);
  const auto test = load_cache(c, Split::test);
  if (train.set.size() == 0) throw DataError("no training maps in the cache");
  MetricsReport rep;
  rep.command = "train";
  rep.samples = train.set.size();
  for (int k = 0; k < c.ensemble; ++k) {
    nn::TrainLog tl;
    std::string lines;
    try {
      const auto net = train_model<T>(c, train.classes, train.set, test.set.size() ? &test.set : nullptr, k, &tl,
                                      [&](const nn::EpochRecord& e) {
                                        lines += epoch_jsonl(e);
                                        log << "model " << k << " epoch " << e.epoch << " lr " << e.learning_rate << " loss "
                                            << e.loss << " train " << e.train_accuracy;
                                        if (e.test_accuracy) log << " test " << *e.test_accuracy;
                                        log << (e.decayed ? " (rate x" + std::to_string(c.train.decay_factor) + ")" : "") << '\n';
                                      });
      fs::create_directories(model_path(c, k).parent_path());
      write_file(model_path(c, k).string(), nn::serialize_checkpoint(net));
      rep.model_bytes = net.arch.parameter_count() * 4;
    } catch (const nn::TrainingDiverged& e) {
      for (const auto& rec : e.log().epochs) lines += epoch_jsonl(rec);
      write_text(out_dir(c) / "models" / ("model_" + std::to_string(k) + ".log.jsonl"), lines);
      throw;
    }
    write_text(out_dir(c) / "models" / ("model_" + std::to_string(k) + ".log.jsonl"), lines);
    const std::string p = "model_" + std::to_string(k) + "_";
    rep.scalars[p + "epochs"] = static_cast<double>(tl.epochs.size());
    rep.scalars[p + "train_accuracy"] = tl.epochs.back().train_accuracy;
    if (tl.epochs.back().test_accuracy) rep.scalars[p + "test_accuracy"] = *tl.epochs.back().test_accuracy;
    rep.scalars[p + "decays"] = static_cast<double>(tl.decay_epochs.size());
  }
  write_metrics(c, rep);
  return rep;
}

template <typename T>
std::vector<nn::Network<T>> load_ensemble(const ExperimentConfig& c) {
  std::vector<nn::Network<T>> nets;
  for (int k = 0; k < c.ensemble; ++k) {
    const auto p = model_path(c, k);
    if (!fs::exists(p)) throw DataError("missing checkpoint " + p.string() + "; run train first");
    nets.push_back(nn::parse_checkpoint<T>(read_file(p.string())));
    if (!(nets.back().arch == nets.front().arch)) throw ConfigError("ensemble members differ in architecture");
  }
  return nets;
}

inline TimingStats summarize_timing(const std::string& stage, std::vector<double> ms) {
  TimingStats t{stage, ms.size(), 0, 0};
  if (ms.empty()) return t;
  double sum = 0;
  for (double v : ms) sum += v;
  t.mean_ms = sum / static_cast<double>(ms.size());
  std::sort(ms.begin(), ms.end());
  t.median_ms = ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
  return t;
}

inline constexpr std::size_t kTimingSamples = 200;
inline constexpr std::size_t kFullTimingSamples = 20;

/// Batch-1, single-thread inference time per character for the ensemble.
template <typename T>
TimingStats time_inference(std::span<const nn::Network<T>> nets, const nn::TensorSet& set, std::size_t limit = kTimingSamples) {
  std::vector<double> ms;
  for (std::size_t i = 0; i < std::min(limit, set.size()); ++i) {
    const auto s = set.sample(i);
    std::vector<T> x(s.begin(), s.end());
    const auto t0 = std::chrono::steady_clock::now();
    const auto p = nn::ensemble_probabilities(nets, std::span<const T>(x));
    const auto t1 = std::chrono::steady_clock::now();
    if (p.empty()) throw NumericError("empty prediction", -1);
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return summarize_timing("inference", ms);
}

inline constexpr int kMaxTopN = 10;

template <typename T>
MetricsReport cmd_eval(const ExperimentConfig& c) {
  const auto nets = load_ensemble<T>(c);
  const auto test = load_cache(c, Split::test);
  if (test.set.size() == 0) throw DataError("no test maps in the cache");
  const int C = nets.front().num_classes();
  const int N = std::min(kMaxTopN, C);
  std::vector<std::size_t> hits(static_cast<std::size_t>(N), 0);
  std::map<std::int64_t, std::pair<std::size_t, std::size_t>> per_writer;  // hits, total
  std::map<std::pair<int, int>, std::size_t> confusions;
  // Probabilities averaged over members, computed in batches.
  std::vector<double> avg(test.set.size() * static_cast<std::size_t>(C), 0.0);
  for (const auto& net : nets) {
    const auto p = nn::predict_all(net, test.set);
    for (std::size_t i = 0; i < avg.size(); ++i) avg[i] += p[i];
  }
  for (auto& v : avg) v /= static_cast<double>(nets.size());
  for (std::size_t i = 0; i < test.set.size(); ++i) {
    const auto ranked = nn::top_n(std::span<const double>(avg).subspan(i * C, static_cast<std::size_t>(C)), N);
    const int y = test.set.labels[i];
    const auto pos = std::find(ranked.begin(), ranked.end(), y) - ranked.begin();
    for (auto k = pos; k < N; ++k) ++hits[static_cast<std::size_t>(k)];
    auto& w = per_writer[test.writers[i]];
    w.first += ranked[0] == y;
    ++w.second;
    if (ranked[0] != y) ++confusions[{y, ranked[0]}];
  }
  MetricsReport rep;
  rep.command = "eval";
  rep.samples = test.set.size();
  for (auto h : hits) rep.top_n.push_back(double(h) / double(test.set.size()));
  for (const auto& [id, w] : per_writer) rep.writers.push_back({id, w.second, double(w.first) / double(w.second), {}, {}});
  std::vector<Confusion> conf;
  for (const auto& [k, n] : confusions) conf.push_back({k.first, k.second, n});
  std::stable_sort(conf.begin(), conf.end(), [](const Confusion& a, const Confusion& b) { return a.count > b.count; });
  if (conf.size() > 10) conf.resize(10);
  rep.confusions = conf;
  rep.model_bytes = nets.front().arch.parameter_count() * 4 * nets.size();
  rep.timings.push_back(time_inference<T>(nets, test.set));
  rep.scalars["ensemble"] = static_cast<double>(nets.size());
  write_metrics(c, rep);
  return rep;
}

// ---------------------------------------------------------------------------
// adapt

template <typename T>
MetricsReport cmd_adapt(const ExperimentConfig& c, std::ostream& log = std::cout) {
  const auto nets = load_ensemble<T>(c);
  const auto train = load_cache(c, Split::train);
  auto target = load_cache(c, Split::adapt);
  if (target.set.size() == 0) target = load_cache(c, Split::test);
  if (target.set.size() == 0) throw DataError("no test or adapt maps in the cache");
  std::map<std::int64_t, adapt::StyleTransform> transforms;
  auto rep = run_adaptation<T>(nets.front(), c, train.set, target.set, target.writers, &transforms);
  for (const auto& [id, t] : transforms)
    write_file((fs::create_directories(out_dir(c) / "adapt"), out_dir(c) / "adapt" / ("writer_" + std::to_string(id) + ".stma")).string(),
               adapt::serialize_stma(t));
  for (const auto& w : rep.writers)
    log << "writer " << w.writer << " samples " << w.samples << " accuracy " << w.accuracy << " -> " << *w.adapted
        << " reduction " << (w.reduction_rate ? std::to_string(*w.reduction_rate) : std::string("n/a")) << '\n';
  write_metrics(c, rep);
  return rep;
}

// ---------------------------------------------------------------------------
// bench

/// Per-character extraction timing on preloaded samples (no file I/O).
inline TimingStats time_extraction(const ExperimentConfig& c, std::size_t limit = kTimingSamples) {
  const auto mpath = manifest_path(c);
  const auto manifest = DatasetManifest::load(mpath.string());
  std::vector<double> ms;
  auto run = [&](const auto& samples) {
    for (std::size_t i = 0; i < std::min(limit, samples.size()); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto m = pipeline::extract(samples[i], c.features);
      const auto t1 = std::chrono::steady_clock::now();
      if (m.values.empty()) throw DataError("empty map");
      ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
  };
  if (c.features.modality == Modality::online) run(load_split<OnlineSample>(manifest, mpath.parent_path(), Split::test));
  else run(load_split<OfflineSample>(manifest, mpath.parent_path(), Split::test));
  return summarize_timing("extraction", ms);
}

template <typename T>
MetricsReport cmd_bench(const ExperimentConfig& c, const std::string& ablation = "", std::ostream& log = std::cout) {
  MetricsReport rep;
  rep.command = "bench";
  if (ablation.empty()) {
    const auto nets = load_ensemble<T>(c);
    const auto test = load_cache(c, Split::test);
    rep.samples = test.set.size();
    rep.timings.push_back(time_extraction(c));
    rep.timings.push_back(time_inference<T>(std::span(nets).first(1), test.set));
    rep.model_bytes = nets.front().arch.parameter_count() * 4;
    // Full 3755-class network with random weights: size and batch-1 speed.
    const auto full = nn::Network<T>::init(nn::Architecture::full(), c.seed);
    rep.scalars["full_model_bytes"] = static_cast<double>(full.arch.parameter_count() * 4);
    if (c.features.size == full.arch.input.h) {
      auto t = time_inference<T>(std::span(&full, 1), test.set, kFullTimingSamples);
      t.stage = "inference_full";
      rep.timings.push_back(t);
    }
    for (const auto& t : rep.timings) log << t.stage << ": mean " << t.mean_ms << " ms, median " << t.median_ms << " ms\n";
  } else {
    if (c.data.source != "synthetic") throw ConfigError("ablations run on the synthetic corpus");
    if (ablation == "dropout") rep.rows = ablation_dropout<T>(c);
    else if (ablation == "input") rep.rows = ablation_input<T>(c);
    else if (ablation == "normalization") rep.rows = ablation_normalization<T>(c);
    else if (ablation == "baseline") rep.rows = baseline_table(build_synthetic(c.data, c.features), kDirections, c.features.size);
    else throw ConfigError("unknown ablation '" + ablation + "' (dropout, input, normalization, baseline)");
    rep.command = "bench-" + ablation;
    log << format_table(rep.rows);
  }
  write_metrics(c, rep);
  return rep;
}

// ---------------------------------------------------------------------------
// inspect

inline std::string inspect_file(const fs::path& path) {
  const auto bytes = read_file(path.string());
  std::ostringstream os;
  auto magic = [&](const char* m) { return bytes.size() >= 4 && std::equal(m, m + 4, bytes.begin()); };
  if (magic("DMAP")) {
    const auto m = parse_dmap(bytes);
    os << "DMAP d=" << m.d << " n=" << m.n << " modality=" << pipeline::to_string(m.modality) << " code=" << m.code.hex()
       << " writer=" << m.writer_id << " mass=" << m.total_mass() << " sparsity=" << sparsity(m) << '\n';
    for (int p = 0; p < m.d; ++p) os << "  plane " << p << " mass " << m.plane_mass(p) << '\n';
  } else if (magic("HCNN")) {
    const auto net = nn::parse_checkpoint<float>(bytes);
    os << "HCNN layers=" << net.arch.layers.size() << " classes=" << net.num_classes()
       << " parameters=" << net.arch.parameter_count() << " input_scale=" << net.input_scale << '\n';
    const auto shapes = net.arch.shapes();
    const char* kinds[] = {"conv", "maxpool", "dense"};
    for (std::size_t i = 0; i < shapes.size(); ++i)
      os << "  " << i << ' ' << kinds[static_cast<int>(net.arch.layers[i].kind)] << " -> " << shapes[i].c << 'x'
         << shapes[i].h << 'x' << shapes[i].w << " dropout " << net.arch.layers[i].dropout << '\n';
  } else if (magic("STMA")) {
    const auto t = adapt::parse_stma(bytes);
    os << "STMA d=" << t.dim() << " |A-I|_F=" << (t.A - Eigen::MatrixXd::Identity(t.dim(), t.dim())).norm()
       << " |b|=" << t.b.norm() << '\n';
  } else if (path.extension() == ".gnt") {
    const auto s = parse_gnt(bytes);
    os << "GNT records=" << s.size() << '\n';
    for (std::size_t i = 0; i < std::min<std::size_t>(s.size(), 5); ++i)
      os << "  " << s[i].code.hex() << ' ' << s[i].width << 'x' << s[i].height << '\n';
  } else if (path.extension() == ".pot") {
    const auto s = parse_pot(bytes);
    os << "POT records=" << s.size() << '\n';
    for (std::size_t i = 0; i < std::min<std::size_t>(s.size(), 5); ++i)
      os << "  " << s[i].code.hex() << " strokes " << s[i].strokes.size() << '\n';
  } else if (path.extension() == ".tsv") {
    const auto m = DatasetManifest::from_text(std::string(bytes.begin(), bytes.end()));
    os << "manifest classes=" << m.vocabulary().size() << " entries=" << m.entries().size();
    for (auto sp : {Split::train, Split::test, Split::adapt}) {
      const auto e = m.select(sp);
      os << ' ' << to_string(sp) << '=' << e.size() << " (" << writers_of(e).size() << " writers)";
    }
    os << '\n';
  } else if (path.extension() == ".jsonl") {
    const auto text = std::string(bytes.begin(), bytes.end());
    const auto r = MetricsReport::from_jsonl(text);
    os << "metrics command=" << r.command << " samples=" << r.samples << '\n';
    for (std::size_t i = 0; i < r.top_n.size(); ++i) os << "  top-" << i + 1 << ' ' << r.top_n[i] << '\n';
    for (const auto& [k, v] : r.scalars) os << "  " << k << ' ' << v << '\n';
  } else {
    throw DataError("unrecognized file type: " + path.string());
  }
  return os.str();
}

}  // namespace hccr::harness
