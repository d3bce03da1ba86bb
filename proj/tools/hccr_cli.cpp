// hccr: command-line driver for the directMap + convNet pipeline.
//
// Exit codes: 0 success, 2 configuration error, 3 data error.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hccr/harness/commands.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<int> precision;
  std::string ablation;
  std::vector<std::string> files;
};

hccr::harness::ExperimentConfig resolve(const Options& o) {
  auto c = o.config.empty() ? hccr::harness::ExperimentConfig{} : hccr::harness::load_config(o.config);
  if (o.seed) c.seed = c.train.seed = *o.seed;
  if (o.jobs) c.train.jobs = *o.jobs;
  if (o.precision) c.precision = *o.precision;
  c.validate();
  return c;
}

void print_summary(const hccr::harness::MetricsReport& r) {
  std::cout << r.command << ": " << r.samples << " samples";
  if (r.model_bytes) std::cout << ", model " << *r.model_bytes << " bytes";
  std::cout << '\n';
  for (std::size_t i = 0; i < r.top_n.size(); ++i) std::cout << "  top-" << i + 1 << " " << r.top_n[i] << '\n';
  for (const auto& t : r.timings)
    std::cout << "  " << t.stage << " mean " << t.mean_ms << " ms median " << t.median_ms << " ms (" << t.samples << ")\n";
  for (const auto& [k, v] : r.scalars) std::cout << "  " << k << " " << v << '\n';
}

template <typename T>
hccr::harness::MetricsReport dispatch(const std::string& cmd, const hccr::harness::ExperimentConfig& c, const Options& o) {
  using namespace hccr::harness;
  if (cmd == "train") return cmd_train<T>(c);
  if (cmd == "eval") return cmd_eval<T>(c);
  if (cmd == "adapt") return cmd_adapt<T>(c);
  return cmd_bench<T>(c, o.ablation);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"directMap feature extraction, convNet training and writer adaptation"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "experiment config (INI)")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "override run.seed");
  app.add_option("--jobs", o.jobs, "worker threads")->check(CLI::Range(1, 256));
  app.add_option("--precision", o.precision, "floating-point width of the network")->check(CLI::IsMember({32, 64}));

  std::vector<CLI::App*> subs;
  subs.push_back(app.add_subcommand("gen-synth", "write a synthetic corpus and manifest"));
  subs.push_back(app.add_subcommand("extract", "extract directMaps into the cache"));
  subs.push_back(app.add_subcommand("train", "train the configured ensemble"));
  subs.push_back(app.add_subcommand("eval", "top-N, per-writer and timing report"));
  subs.push_back(app.add_subcommand("adapt", "unsupervised per-writer adaptation"));
  auto* bench = app.add_subcommand("bench", "per-character timings or an ablation table");
  bench->add_option("--ablation", o.ablation, "dropout | input | normalization | baseline");
  subs.push_back(bench);
  auto* inspect = app.add_subcommand("inspect", "summarize GNT, POT, DMAP, HCNN, STMA, manifest or metrics files");
  inspect->add_option("files", o.files)->required()->check(CLI::ExistingFile);
  for (auto* s : subs) s->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "inspect") {
      for (const auto& f : o.files) std::cout << f << ": " << hccr::harness::inspect_file(f);
      return 0;
    }
    const auto c = resolve(o);
    hccr::harness::MetricsReport r;
    if (cmd == "gen-synth") r = hccr::harness::cmd_gen_synth(c);
    else if (cmd == "extract") r = hccr::harness::cmd_extract(c);
    else r = c.precision == 64 ? dispatch<double>(cmd, c, o) : dispatch<float>(cmd, c, o);
    print_summary(r);
    return 0;
  } catch (const hccr::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const hccr::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const hccr::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "file error: " << e.what() << '\n';
    return kExitData;
  }
}
