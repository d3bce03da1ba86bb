#pragma once

// Metrics report emitted as JSON Lines: one self-describing object per
// line, tagged by "record".

#include <cstdint>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hccr/common.hpp"

namespace hccr::harness {

struct WriterResult {
  std::int64_t writer = 0;
  std::size_t samples = 0;
  double accuracy = 0;                  // unadapted top-1
  std::optional<double> adapted;        // top-1 after adaptation
  std::optional<double> reduction_rate;  // empty when the initial error is 0
  friend bool operator==(const WriterResult&, const WriterResult&) = default;
};

struct Confusion {
  int truth = 0;
  int predicted = 0;
  std::size_t count = 0;
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

struct TimingStats {
  std::string stage;  // "extraction" or "inference"
  std::size_t samples = 0;
  double mean_ms = 0;
  double median_ms = 0;
  friend bool operator==(const TimingStats&, const TimingStats&) = default;
};

/// One row of an ablation table.
struct TableRow {
  std::string table;
  std::string variant;
  std::map<std::string, double> values;
  friend bool operator==(const TableRow&, const TableRow&) = default;
};

struct MetricsReport {
  std::string command;
  std::size_t samples = 0;
  std::vector<double> top_n;  // top_n[k] = top-(k+1) accuracy
  std::vector<WriterResult> writers;
  std::vector<Confusion> confusions;
  std::vector<TimingStats> timings;
  std::vector<TableRow> rows;
  std::optional<std::uint64_t> model_bytes;
  std::map<std::string, double> scalars;  // command-specific summary values

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;

  void validate() const {
    auto unit = [](double v) { return v >= 0 && v <= 1; };
    for (double a : top_n)
      if (!unit(a)) throw std::invalid_argument("top-N accuracy outside [0, 1]");
    for (const auto& w : writers)
      if (!unit(w.accuracy) || (w.adapted && !unit(*w.adapted))) throw std::invalid_argument("writer accuracy outside [0, 1]");
  }

  std::string to_jsonl() const {
    using nlohmann::json;
    std::ostringstream os;
    json head = {{"record", "summary"}, {"command", command}, {"samples", samples}};
    if (model_bytes) head["model_bytes"] = *model_bytes;
    json sc = json::object();
    for (const auto& [k, v] : scalars) sc[k] = v;
    head["scalars"] = sc;
    os << head.dump() << '\n';
    for (std::size_t i = 0; i < top_n.size(); ++i)
      os << json{{"record", "top_n"}, {"n", i + 1}, {"accuracy", top_n[i]}}.dump() << '\n';
    for (const auto& w : writers) {
      json j = {{"record", "writer"}, {"writer", w.writer}, {"samples", w.samples}, {"accuracy", w.accuracy}};
      if (w.adapted) j["adapted"] = *w.adapted;
      if (w.reduction_rate) j["reduction_rate"] = *w.reduction_rate;
      os << j.dump() << '\n';
    }
    for (const auto& c : confusions)
      os << json{{"record", "confusion"}, {"truth", c.truth}, {"predicted", c.predicted}, {"count", c.count}}.dump() << '\n';
    for (const auto& t : timings)
      os << json{{"record", "timing"}, {"stage", t.stage}, {"samples", t.samples}, {"mean_ms", t.mean_ms}, {"median_ms", t.median_ms}}
                .dump()
         << '\n';
    for (const auto& r : rows) {
      json v = json::object();
      for (const auto& [k, x] : r.values) v[k] = x;
      os << json{{"record", "row"}, {"table", r.table}, {"variant", r.variant}, {"values", v}}.dump() << '\n';
    }
    return os.str();
  }

  static MetricsReport from_jsonl(const std::string& text) {
    using nlohmann::json;
    MetricsReport r;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    bool have_summary = false;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        const auto j = json::parse(line);
        const auto kind = j.at("record").get<std::string>();
        if (kind == "summary") {
          r.command = j.at("command").get<std::string>();
          r.samples = j.at("samples").get<std::size_t>();
          if (j.contains("model_bytes")) r.model_bytes = j["model_bytes"].get<std::uint64_t>();
          for (const auto& [k, v] : j.at("scalars").items()) r.scalars[k] = v.get<double>();
          have_summary = true;
        } else if (kind == "top_n") {
          if (j.at("n").get<std::size_t>() != r.top_n.size() + 1) throw DataError("top_n records out of order");
          r.top_n.push_back(j.at("accuracy").get<double>());
        } else if (kind == "writer") {
          WriterResult w;
          w.writer = j.at("writer").get<std::int64_t>();
          w.samples = j.at("samples").get<std::size_t>();
          w.accuracy = j.at("accuracy").get<double>();
          if (j.contains("adapted")) w.adapted = j["adapted"].get<double>();
          if (j.contains("reduction_rate")) w.reduction_rate = j["reduction_rate"].get<double>();
          r.writers.push_back(w);
        } else if (kind == "confusion") {
          r.confusions.push_back({j.at("truth").get<int>(), j.at("predicted").get<int>(), j.at("count").get<std::size_t>()});
        } else if (kind == "timing") {
          r.timings.push_back({j.at("stage").get<std::string>(), j.at("samples").get<std::size_t>(),
                               j.at("mean_ms").get<double>(), j.at("median_ms").get<double>()});
        } else if (kind == "row") {
          TableRow row{j.at("table").get<std::string>(), j.at("variant").get<std::string>(), {}};
          for (const auto& [k, v] : j.at("values").items()) row.values[k] = v.get<double>();
          r.rows.push_back(std::move(row));
        } else {
          throw DataError("unknown record type '" + kind + "'");
        }
      } catch (const nlohmann::json::exception& e) {
        throw DataError("metrics line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    if (!have_summary) throw DataError("metrics stream has no summary record");
    return r;
  }
};

}  // namespace hccr::harness
