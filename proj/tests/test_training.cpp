#include <gtest/gtest.h>

#include <cmath>

#include "gen.hpp"
#include "oracles.hpp"
#include "hccr/training.hpp"

using namespace hccr;
using namespace hccr::nn;
using namespace oracle;

namespace {

Architecture small_arch(int classes = 2) {
  Architecture a;
  a.input = {2, 4, 4};
  a.layers = {LayerSpec::conv(4), LayerSpec::maxpool(), LayerSpec::dense(8), LayerSpec::dense(classes, 0.0, false)};
  return a;
}

// Class k puts its mass in channel k.
TensorSet separable(gen::Rng& r, int per_class) {
  TensorSet set;
  for (int i = 0; i < 2 * per_class; ++i) {
    const int label = i % 2;
    std::vector<float> x(32);
    for (int k = 0; k < 32; ++k) {
      const bool hot = k / 16 == label;
      x[static_cast<std::size_t>(k)] = static_cast<float>(hot ? gen::uniform(r, 0.5, 1.0) : gen::uniform(r, 0.0, 0.2));
    }
    set.add(x, label);
  }
  return set;
}

}  // namespace

TEST(Rescale, ThreeLogitExample) {
  const std::vector<double> s = {2, 1, 0};
  EXPECT_DOUBLE_EQ(mean_logit_gap(s, 3), 1.0);
  const auto rc = rescale_from_gap(1.0);
  EXPECT_NEAR(rc.v, 0.22314355131420976, 1e-15);
  EXPECT_EQ(rc.delta, 1.0);
}

TEST(Rescale, RejectsDegenerateGap) {
  EXPECT_THROW(rescale_from_gap(0.0), NumericError);
  EXPECT_THROW(rescale_from_gap(-1.0), NumericError);
  EXPECT_THROW(rescale_from_gap(std::nan("")), NumericError);
  Network<double> zero(Architecture::toy(5));
  TensorSet set;
  set.add(std::vector<float>(static_cast<std::size_t>(zero.input_size()), 1.0f), 0);
  EXPECT_THROW(estimate_rescale(zero, set), NumericError);
  auto biased = Network<double>::init(Architecture::toy(5), 1);
  biased.biases.back()[0] = 1.0;
  EXPECT_THROW(estimate_rescale(biased, set), std::invalid_argument);
}

TEST(Rescale, ScaledNetworkHasTargetMeanProbabilityRatio) {
  auto net = Network<double>::init(Architecture::toy(20), 3);
  gen::Rng r(3);
  TensorSet set;
  for (int i = 0; i < 200; ++i) {
    std::vector<float> x(static_cast<std::size_t>(net.input_size()));
    for (auto& v : x) v = gen::uniform_int(r, 0, 4) == 0 ? static_cast<float>(gen::uniform(r, 0.0, 1.0)) : 0.0f;
    set.add(x, i % 20);
  }
  const auto rc = estimate_rescale(net, set, 0);
  EXPECT_GT(rc.v, 0.0);
  net.input_scale = rc.v;
  double ratio = 0, gap = 0;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto x = gather<double>(set, std::vector<std::size_t>{i});
    const auto z = logits(net, std::span<const double>(x));
    const double mx = *std::max_element(z.begin(), z.end());
    double sum = 0, total = 0;
    for (double v : z) {
      sum += std::exp(v - mx);
      total += v;
    }
    ratio += sum / static_cast<double>(z.size());
    gap += mx - total / static_cast<double>(z.size());
  }
  ratio /= static_cast<double>(set.size());
  gap /= static_cast<double>(set.size());
  EXPECT_NEAR(gap, -std::log(0.8), 1e-9);
  EXPECT_GE(ratio, 0.75);
  EXPECT_LE(ratio, 0.85);
}

TEST(Plateau, FlatHistoryDecaysOnceAfterThirdEpoch) {
  PlateauSchedule s(0.005, 0.3, 2, 3);
  EXPECT_EQ(s.observe(0.5), PlateauSchedule::Step::keep);
  EXPECT_EQ(s.observe(0.5), PlateauSchedule::Step::keep);
  EXPECT_EQ(s.observe(0.5), PlateauSchedule::Step::decay);
  EXPECT_EQ(s.decays(), 1);
  EXPECT_DOUBLE_EQ(s.lr(), 0.005 * 0.3);
}

TEST(Plateau, StopsPatienceEpochsAfterLastDecay) {
  PlateauSchedule s(1.0, 0.3, 2, 3);
  std::vector<PlateauSchedule::Step> steps;
  for (int e = 0; e < 9; ++e) steps.push_back(s.observe(0.7));
  using S = PlateauSchedule::Step;
  EXPECT_EQ(steps, (std::vector<S>{S::keep, S::keep, S::decay, S::keep, S::decay, S::keep, S::decay, S::keep, S::stop}));
  EXPECT_EQ(s.decays(), 3);
}

TEST(Plateau, ImprovementResetsPatience) {
  PlateauSchedule s(1.0, 0.3, 2, 3);
  for (double a : {0.1, 0.2, 0.2, 0.3, 0.3, 0.4}) EXPECT_EQ(s.observe(a), PlateauSchedule::Step::keep);
  EXPECT_EQ(s.decays(), 0);
}

TEST(Update, ZeroDataGradientShrinksWeights) {
  auto net = Network<double>::init(small_arch(), 4, 0.1);
  const auto before = net;
  TensorSet zeros;
  for (int i = 0; i < 6; ++i) zeros.add(std::vector<float>(32, 0.0f), i % 2);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.batch_size = 6;
  cfg.max_epochs = 1;
  fit(net, cfg, zeros);
  for (std::size_t i = 0; i < net.weights.size(); ++i)
    for (std::size_t k = 0; k < net.weights[i].size(); ++k) {
      const double expect = before.weights[i][k] * (1 - 0.1 * 0.0005);
      ASSERT_NEAR(net.weights[i][k], expect, 1e-16 + 1e-15 * std::abs(expect));
    }
}

TEST(Update, MomentumAccumulatesVelocity) {
  Network<double> net(small_arch());
  auto v = Gradients<double>::zeros_like(net);
  auto g = Gradients<double>::zeros_like(net);
  g.weights[0][0] = 1.0;
  momentum_step(net, v, g, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(net.weights[0][0], -0.1);
  momentum_step(net, v, g, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(v.weights[0][0], -0.19);
  EXPECT_DOUBLE_EQ(net.weights[0][0], -0.29);
}

TEST(Fit, SeparableProblemReachesFullTrainingAccuracy) {
  gen::Rng r(5);
  const auto train = separable(r, 50);
  auto net = Network<double>::init(small_arch(), 5, 0.1);
  TrainConfig cfg;
  cfg.batch_size = 10;
  cfg.learning_rate = 0.01;
  cfg.max_epochs = 20;
  const auto log = fit(net, cfg, train);
  bool reached = false;
  for (const auto& e : log.epochs) reached = reached || e.train_accuracy == 1.0;
  EXPECT_TRUE(reached);
  EXPECT_EQ(accuracy(net, train), 1.0);
}

TEST(Fit, DeterministicAndIndependentOfJobs) {
  gen::Rng r(6);
  const auto train = separable(r, 30);
  auto arch = small_arch();
  arch.layers[2].dropout = 0.3;
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.01;
  cfg.max_epochs = 4;
  cfg.seed = 77;
  auto a = Network<double>::init(arch, 1, 0.1), b = a, c = a;
  fit(a, cfg, train);
  fit(b, cfg, train);
  cfg.jobs = 3;
  fit(c, cfg, train);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a, c);
  cfg.seed = 78;
  auto d = Network<double>::init(arch, 1, 0.1);
  fit(d, cfg, train);
  EXPECT_FALSE(a == d);
}

TEST(Fit, DivergenceCarriesEpochLog) {
  gen::Rng r(7);
  const auto train = separable(r, 20);
  auto net = Network<double>::init(small_arch(), 7, 0.1);
  TrainConfig cfg;
  cfg.batch_size = 10;
  cfg.learning_rate = 1e200;
  cfg.momentum = 0.5;
  cfg.max_epochs = 5;
  try {
    fit(net, cfg, train);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_LE(e.log().epochs.size(), 4u);
  }
}

TEST(Fit, ConfigValidation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  for (auto mutate : std::vector<void (*)(TrainConfig&)>{
           [](TrainConfig& t) { t.batch_size = 0; }, [](TrainConfig& t) { t.momentum = 1.0; },
           [](TrainConfig& t) { t.learning_rate = 0; }, [](TrainConfig& t) { t.decay_factor = 1.0; },
           [](TrainConfig& t) { t.weight_decay = 0; }, [](TrainConfig& t) { t.patience = 0; },
           [](TrainConfig& t) { t.max_decays = 0; }, [](TrainConfig& t) { t.max_epochs = 0; }}) {
    TrainConfig t;
    mutate(t);
    EXPECT_THROW(t.validate(), ConfigError);
  }
}

TEST(Checkpoint, FuzzRoundTrip) {
  gen::Rng r(8);
  for (int i = 0; i < 10000; ++i) {
    const auto net = random_network(r);
    const auto bytes = serialize_checkpoint(net);
    const auto back = parse_checkpoint<float>(bytes);
    ASSERT_EQ(back, net);
    ASSERT_EQ(serialize_checkpoint(back), bytes);
  }
}

TEST(Checkpoint, DoublePrecisionStoresFloatValues) {
  auto net = Network<double>::init(small_arch(), 9, 0.1);
  net.input_scale = 0.3;
  const auto back = parse_checkpoint<double>(serialize_checkpoint(net));
  EXPECT_EQ(back.arch, net.arch);
  EXPECT_EQ(back.input_scale, 0.3);
  EXPECT_EQ(back.weights[0][0], static_cast<double>(static_cast<float>(net.weights[0][0])));
}

TEST(Checkpoint, RejectsMalformed) {
  gen::Rng r(9);
  const auto bytes = serialize_checkpoint(random_network(r));
  for (std::size_t cut = 0; cut < bytes.size(); ++cut)
    EXPECT_THROW(parse_checkpoint<float>(std::span(bytes.data(), cut)), DataError) << cut;
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(parse_checkpoint<float>(extra), DataError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(parse_checkpoint<float>(magic), DataError);
  auto version = bytes;
  version[4] = 2;
  EXPECT_THROW(parse_checkpoint<float>(version), DataError);
  // first layer descriptor starts after magic, version, c/h/w, slope, count
  const std::size_t layer0 = 4 + 4 + 12 + 8 + 4;
  auto kind = bytes;
  kind[layer0] = 3;
  EXPECT_THROW(parse_checkpoint<float>(kind), DataError);
  auto act = bytes;
  act[layer0 + 1 + 16 + 4] = 2;
  EXPECT_THROW(parse_checkpoint<float>(act), DataError);
}

TEST(Checkpoint, RejectsBadInputScale) {
  Network<float> net(small_arch());
  for (double bad : {0.0, -1.0, std::nan("")}) {
    net.input_scale = bad;
    EXPECT_THROW(parse_checkpoint<float>(serialize_checkpoint(net)), DataError);
  }
}
