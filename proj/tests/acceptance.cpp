// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Arguments select a subset by number (default: all).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gen.hpp"
#include "hccr/harness/protocols.hpp"
#include "oracles.hpp"

using namespace hccr;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int workers() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

// 1 -------------------------------------------------------------------------
Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  auto net = nn::Network<double>::init(oracle::miniature(), 5, 0.3);
  gen::Rng r(3);
  const auto x = oracle::random_inputs<double>(r, 3, net.input_size());
  const std::vector<int> y = {0, 3, 4};
  const auto c = oracle::gradient_check(net, x, y, nn::kWeightDecay, 1e-3);
  const double secs = seconds_since(t0);
  return {c.worst < 1e-4 && c.loss_error < 1e-12 && c.compared > 9 * c.straddled && secs < 60,
          fmt("max rel err %.2e over %d probes (%d kink-straddling probes excluded), %.1f s", c.worst, c.compared,
              c.straddled, secs)};
}

// 2 -------------------------------------------------------------------------
Outcome init_rescale() {
  harness::DataConfig data;
  const auto ds = harness::build_synthetic(data, pipeline::FeatureOptions::offline_default());
  auto net = nn::Network<double>::init(nn::Architecture::toy(data.classes), 1);
  double homog = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto x = nn::gather<double>(ds.train, std::vector<std::size_t>{i * 37});
    const auto base = nn::logits(net, std::span<const double>(x));
    for (double v : {0.5, 2.0, 10.0}) {
      auto vx = x;
      for (auto& e : vx) e *= v;
      const auto z = nn::logits(net, std::span<const double>(vx));
      for (std::size_t k = 0; k < z.size(); ++k)
        homog = std::max(homog, std::abs(z[k] - v * base[k]) / std::max(std::abs(v * base[k]), 1e-300));
    }
  }
  const auto rc = nn::estimate_rescale(net, ds.train);
  net.input_scale = rc.v;
  double ratio = 0;
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    const auto x = nn::gather<double>(ds.train, std::vector<std::size_t>{i});
    const auto z = nn::logits(net, std::span<const double>(x));
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0;
    for (double v : z) sum += std::exp(v - mx);
    ratio += sum / static_cast<double>(z.size());
  }
  ratio /= static_cast<double>(ds.train.size());
  return {homog <= 1e-9 && ratio >= 0.75 && ratio <= 0.85,
          fmt("homogeneity rel err %.2e; v = %.4g, mean exp(s - s_max) = %.4f on %zu maps", homog, rc.v, ratio,
              ds.train.size())};
}

// 3 -------------------------------------------------------------------------
Outcome parallelogram() {
  gen::Rng r(21);
  const auto u = chaincode_basis();
  double worst = 0;
  bool nonneg = true, rot = true;
  for (int t = 0; t < 100000; ++t) {
    const double gx = gen::normal(r), gy = gen::normal(r);
    const auto d = decompose_vector(gx, gy);
    nonneg = nonneg && d.a >= 0 && d.b >= 0 && d.second == (d.first + 1) % 8;
    worst = std::max(worst, std::hypot(d.a * u[d.first].x + d.b * u[d.second].x - gx, d.a * u[d.first].y + d.b * u[d.second].y - gy));
    // +45 degrees: the index shifts by one and the weights carry over.
    const double s = std::numbers::sqrt2 / 2;
    const double frac = std::fmod(std::atan2(gy, gx) + 2 * std::numbers::pi, std::numbers::pi / 4) / (std::numbers::pi / 4);
    if (frac > 1e-6 && frac < 1 - 1e-6) {
      const auto e = decompose_vector(s * (gx - gy), s * (gx + gy));
      rot = rot && e.first == (d.first + 1) % 8 && std::abs(e.a - d.a) <= 1e-15 * std::max(1.0, d.a) + 1e-15 &&
            std::abs(e.b - d.b) <= 1e-15 * std::max(1.0, d.b) + 1e-15;
    }
    // +90 degrees is exact in floating point: bit-identical weights.
    const auto q = decompose_vector(-gy, gx);
    rot = rot && q.first == (d.first + 2) % 8 && q.a == d.a && q.b == d.b;
  }
  return {worst <= 1e-12 && nonneg && rot,
          fmt("1e5 gradients: max residual %.2e, weights %s, rotation shift %s", worst, nonneg ? "non-negative" : "NEGATIVE",
              rot ? "exact" : "BROKEN")};
}

// 4 -------------------------------------------------------------------------
Outcome mass_conservation() {
  const auto corpus = pipeline::make_corpus({20, 5, 1, 26, 1, {}, {}});
  double worst = 0;
  for (std::size_t i = 0; i < corpus.offline.size(); ++i) {
    ExtractStats a, b;
    const auto off = pipeline::extract(corpus.offline[i], pipeline::FeatureOptions::offline_default(), &a);
    const auto on = pipeline::extract(corpus.online[i], pipeline::FeatureOptions::online_default(), &b);
    worst = std::max(worst, std::abs(off.total_mass() - a.decomposed_mass) / a.decomposed_mass);
    worst = std::max(worst, std::abs(on.total_mass() - b.decomposed_mass) / b.decomposed_mass);
  }
  // Matched segments: 10 units right, a 10-unit pen lift down, 10 units left.
  OnlineSample s;
  s.strokes = {{{0, 0}, {10, 0}}, {{10, 10}, {0, 10}}};
  const auto m = extract_online(s, fit_linear({-5, -5, 15, 15}, 32));
  const double ratio = m.plane_mass(2) / m.plane_mass(0);
  return {worst <= 1e-6 && std::abs(ratio - 0.5) <= 1e-6,
          fmt("max relative mass error %.2e over %zu samples x 2 modalities; imaginary-stroke ratio %.9f", worst,
              corpus.offline.size(), ratio)};
}

// 5 -------------------------------------------------------------------------
Outcome stm_closed_form() {
  gen::Rng r(2);
  double kkt = 0, gap = -1e300, ident = 0, bias = 0;
  for (int t = 0; t < 100; ++t) {
    const auto in = oracle::random_stm_instance(r);
    const auto T = adapt::solve_stm(in.phi, in.targets, in.f, in.beta, in.gamma);
    kkt = std::max(kkt, adapt::stm_kkt_residual(T, in.phi, in.targets, in.f, in.beta, in.gamma));
    const auto G = oracle::stm_gradient_descent(in, 10000);
    gap = std::max(gap, adapt::stm_objective(T, in.phi, in.targets, in.f, in.beta, in.gamma) -
                            adapt::stm_objective(G, in.phi, in.targets, in.f, in.beta, in.gamma));
    const auto H = adapt::solve_stm(in.phi, in.targets, in.f, 1e12, 1e12);
    ident = std::max(ident, (H.A - Eigen::MatrixXd::Identity(H.dim(), H.dim())).norm());
    bias = std::max(bias, H.b.norm());
  }
  return {kkt < 1e-8 && gap <= 1e-8 && ident < 1e-4 && bias < 1e-4,
          fmt("100 instances: max KKT %.2e, objective - minimizer %.2e; pinned |A-I| %.2e, |b| %.2e", kkt, gap, ident,
              bias)};
}

// 6 -------------------------------------------------------------------------
Outcome adaptation_protocol() {
  const auto t0 = Clock::now();
  harness::ExperimentConfig cfg;
  cfg.train.jobs = workers();
  const auto ds = harness::build_synthetic(cfg.data, cfg.features);
  const auto net = harness::train_model<float>(cfg, ds.classes, ds.train, nullptr);
  const auto rep = harness::run_adaptation<float>(net, cfg, ds.train, ds.test, ds.test_writers);
  double worst_loss = 0;
  for (const auto& w : rep.writers) worst_loss = std::max(worst_loss, w.accuracy - *w.adapted);
  const double rate = rep.scalars.count("mean_reduction_rate") ? rep.scalars.at("mean_reduction_rate") : 0.0;
  const double secs = seconds_since(t0);
  return {rep.writers.size() == 10 && rate > 0.15 && worst_loss <= 0.005 + 1e-12 && secs < 1800,
          fmt("%zu writers: accuracy %.4f -> %.4f, mean reduction rate %.3f, largest per-writer drop %.2f pp, %.0f s",
              rep.writers.size(), rep.scalars.at("mean_accuracy"), rep.scalars.at("mean_adapted_accuracy"), rate,
              100 * worst_loss, secs)};
}

// 7 -------------------------------------------------------------------------
Outcome toy_training() {
  harness::ExperimentConfig cfg;
  cfg.train.jobs = workers();
  cfg.data.classes = 10;
  cfg.data.train_writers = 40;  // 40 writers x 5 repetitions = 200 samples per class
  cfg.data.train_samples = 5;
  const auto maps = harness::run_training<float>(cfg, harness::build_synthetic(cfg.data, cfg.features));
  const auto raw = harness::run_training<float>(cfg, harness::build_synthetic(cfg.data, cfg.features, true));
  double best = 0;
  int first = -1;
  for (const auto& e : maps.log.epochs)
    if (e.epoch <= 30) {
      best = std::max(best, e.train_accuracy);
      if (first < 0 && e.train_accuracy >= 0.99) first = e.epoch;
    }
  return {first > 0, fmt("directMap: train %.4f (>= 99%% at epoch %d), test %.4f; raw image: train %.4f, test %.4f", best,
                         first, maps.test_accuracy, raw.train_accuracy, raw.test_accuracy)};
}

// 8 -------------------------------------------------------------------------
Outcome architecture() {
  const auto a = nn::Architecture::full();
  const auto params = a.parameter_count();
  const double mb = static_cast<double>(params) * 4 / (1024.0 * 1024.0);
  return {params >= 6'000'000 && params <= 6'300'000 && a.flatten_dim() == 1600 && std::abs(mb - 23.5) <= 1.5,
          fmt("%zu parameters = %.2f MB at 4 bytes each, flatten dim %d", static_cast<std::size_t>(params), mb,
              a.flatten_dim())};
}

// 9 -------------------------------------------------------------------------
Outcome reduction_spot_value() {
  const auto rate = adapt::error_reduction_rate(0.0067, 0.0037);
  return {rate && std::abs(*rate - 0.4478) <= 0.0005, fmt("rate(0.67%%, 0.37%%) = %.4f", rate ? *rate : -1.0)};
}

// 10 ------------------------------------------------------------------------
Outcome round_trips() {
  gen::Rng r(10);
  int failures = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    std::vector<OfflineSample> off(static_cast<std::size_t>(gen::uniform_int(r, 1, 3)));
    for (auto& s : off) s = gen::offline(r);
    const auto g = serialize_gnt(off);
    failures += serialize_gnt(parse_gnt(g)) != g;

    std::vector<OnlineSample> on(static_cast<std::size_t>(gen::uniform_int(r, 1, 3)));
    for (auto& s : on) s = gen::online(r);
    const auto p = serialize_pot(on);
    failures += serialize_pot(parse_pot(p)) != p;

    const auto m = gen::direct_map(r, gen::uniform_int(r, 1, 8), gen::uniform_int(r, 1, 32), gen::uniform(r, 0, 0.5));
    const auto d = serialize_dmap(m);
    failures += serialize_dmap(parse_dmap(d)) != d;

    const auto net = oracle::random_network(r);
    const auto c = nn::serialize_checkpoint(net);
    failures += nn::serialize_checkpoint(nn::parse_checkpoint<float>(c)) != c;

    const int dim = gen::uniform_int(r, 1, 10);
    const adapt::StyleTransform t{oracle::random_matrix(r, dim, dim, 10.0), oracle::random_matrix(r, dim, 1, 10.0)};
    const auto s = adapt::serialize_stma(t);
    failures += adapt::serialize_stma(adapt::parse_stma(s)) != s;
  }
  return {failures == 0, fmt("%d instances each of GNT, POT, DMAP, HCNN, STMA: %d mismatches", n, failures)};
}

// 11 ------------------------------------------------------------------------
Outcome baseline_oracles() {
  gen::Rng r(9);
  int mismatches = 0;
  for (int t = 0; t < 100; ++t) {
    const int d = gen::uniform_int(r, 1, 6), classes = gen::uniform_int(r, 2, 5);
    std::vector<Eigen::VectorXd> means;
    std::vector<Eigen::MatrixXd> covs;
    for (int c = 0; c < classes; ++c) {
      means.push_back(oracle::random_vector(r, d));
      covs.push_back(oracle::random_spd(r, d));
    }
    const auto m = baseline::MqdfModel::from_gaussians(means, covs, d);
    const Eigen::VectorXd x = oracle::random_vector(r, d, 1.5);
    std::vector<double> q;
    for (int c = 0; c < classes; ++c) q.push_back(oracle::qdf(x, means[static_cast<std::size_t>(c)], covs[static_cast<std::size_t>(c)]));
    mismatches += m.classify(x) != static_cast<int>(std::min_element(q.begin(), q.end()) - q.begin());
  }
  double blur = 0;
  for (int t = 0; t < 20; ++t) {
    const auto m = gen::direct_map(r, 8, 32, 0.2);
    const auto f = baseline::blur_sample(m);
    const auto want = oracle::dense_blur(m, 8, baseline::default_sigma(4.0));
    for (std::size_t i = 0; i < f.size(); ++i) blur = std::max(blur, std::abs(f[i] - want[i]));
  }
  double fda = 0;
  for (int t = 0; t < 10; ++t) {
    const int d = gen::uniform_int(r, 3, 12), classes = gen::uniform_int(r, 2, 12);
    const auto [X, y] = oracle::clusters(r, classes, 30, d, 2.0);
    const int k = std::min(d, classes - 1);
    const auto m = baseline::fit_projection(X, y, classes, baseline::ProjectionKind::fda, k);
    fda = std::max(fda, oracle::fda_deviation(m, oracle::fda_reference(X, y, classes), k));
  }
  return {mismatches == 0 && blur <= 1e-10 && fda <= 1e-8,
          fmt("MQDF(k=d) vs QDF argmin: %d/100 mismatches; blur vs dense max err %.2e; FDA vs reduced eigensolve %.2e",
              mismatches, blur, fda)};
}

// 12 ------------------------------------------------------------------------
Outcome dropout_ablation() {
  harness::ExperimentConfig cfg;
  cfg.train.jobs = workers();
  const auto rows = harness::ablation_dropout<float>(cfg);
  auto epochs = [](const harness::TableRow& row) {
    const double e = row.values.at("epochs_to_full");
    return e < 0 ? std::numeric_limits<double>::infinity() : e;
  };
  const double plain = epochs(rows[0]), drop = epochs(rows[1]);
  const double tp = rows[0].values.at("test_accuracy"), td = rows[1].values.at("test_accuracy");
  return {plain < drop, fmt("epochs to 100%% train: no dropout %g, dropout %g; test accuracy %.4f vs %.4f (%s)", plain,
                            drop, tp, td, td > tp ? "dropout higher" : td < tp ? "no-dropout higher" : "equal")};
}

// 13 ------------------------------------------------------------------------
Outcome normalization_ablation() {
  harness::ExperimentConfig cfg;
  cfg.train.jobs = workers();
  const auto rows = harness::ablation_normalization<float>(cfg);
  std::cout << harness::format_table(rows);
  const std::set<std::string> want = {"cooperation/cooperated", "cooperation/based", "gray/none", "gray/linear", "gray/nonlinear"};
  std::set<std::string> got;
  bool finite = true;
  std::string summary;
  for (const auto& row : rows) {
    got.insert(row.table + "/" + row.variant);
    for (const auto& [k, v] : row.values) finite = finite && std::isfinite(v);
    summary += fmt("%s%s %.4f", summary.empty() ? "" : ", ", row.variant.c_str(), row.values.at("test_accuracy"));
  }
  return {got == want && finite, "test accuracy: " + summary};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient oracle", gradient_oracle},
      {"init rescale", init_rescale},
      {"parallelogram decomposition", parallelogram},
      {"directMap mass conservation", mass_conservation},
      {"STM closed form", stm_closed_form},
      {"synthetic adaptation protocol", adaptation_protocol},
      {"toy training", toy_training},
      {"architecture consistency", architecture},
      {"error-reduction spot value", reduction_spot_value},
      {"format round-trips", round_trips},
      {"baseline oracles", baseline_oracles},
      {"dropout ablation", dropout_ablation},
      {"normalization ablation", normalization_ablation},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ": " << o.detail << std::endl;
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
