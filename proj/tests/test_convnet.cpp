#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "gen.hpp"
#include "oracles.hpp"
#include "hccr/convnet.hpp"

using namespace hccr;
using namespace hccr::nn;
using namespace oracle;

namespace {

// Single dense class layer on a 1-element input whose softmax is `p`.
Network<double> constant_model(const std::vector<double>& p) {
  Architecture a;
  a.input = {1, 1, 1};
  a.layers = {LayerSpec::dense(static_cast<int>(p.size()), 0.0, false)};
  Network<double> net(a);
  for (std::size_t i = 0; i < p.size(); ++i) net.biases[0][i] = std::log(p[i]);
  return net;
}

}  // namespace

TEST(Architecture, FullNetworkShape) {
  const auto a = Architecture::full();
  EXPECT_EQ(a.flatten_dim(), 1600);
  EXPECT_EQ(a.num_classes(), 3755);
  const auto params = a.parameter_count();
  EXPECT_GE(params, 6'000'000u);
  EXPECT_LE(params, 6'300'000u);
  // hidden layer 1 is the first conv, hidden layer 10 the 200-unit dense layer
  EXPECT_EQ(a.layers.front().dropout, 0.0);
  ASSERT_EQ(a.layers[13].kind, LayerKind::dense);
  EXPECT_EQ(a.layers[13].units, 200);
  EXPECT_EQ(a.layers[13].dropout, 0.0);
  EXPECT_EQ(a.layers[12].units, 900);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].kind == LayerKind::conv) {
      EXPECT_EQ(a.layers[i].padding, 1);
    }
  }
}

TEST(Architecture, ParameterCountLayerByLayer) {
  std::size_t n = 0;
  int in = 8;
  for (int i = 1; i <= 8; ++i) {
    n += static_cast<std::size_t>(50 * i) * in * 9 + 50 * i;
    in = 50 * i;
  }
  n += 1600 * 900 + 900 + 900 * 200 + 200 + 200 * 3755 + 3755;
  EXPECT_EQ(Architecture::full().parameter_count(), n);
}

TEST(Architecture, RejectsMalformed) {
  Architecture a = miniature();
  a.layers.back().activation = true;
  EXPECT_THROW(a.validate(), ConfigError);
  a = miniature();
  a.layers.insert(a.layers.begin() + 5, LayerSpec::conv(4));
  EXPECT_THROW(a.validate(), ConfigError);
  a = miniature();
  a.layers[0].dropout = 1.0;
  EXPECT_THROW(a.validate(), ConfigError);
}

TEST(Init, DeterministicPerSeed) {
  const auto a = Architecture::toy(10);
  EXPECT_EQ(Network<float>::init(a, 3), Network<float>::init(a, 3));
  EXPECT_FALSE(Network<float>::init(a, 3) == Network<float>::init(a, 4));
}

TEST(Init, GaussianStatistics) {
  const auto net = Network<double>::init(Architecture::full(20), 11);
  int checked = 0;
  for (std::size_t i = 0; i < net.weights.size(); ++i) {
    for (double b : net.biases[i]) ASSERT_EQ(b, 0.0);
    const auto& w = net.weights[i];
    if (w.size() < 10000) continue;
    double mean = 0;
    for (double v : w) mean += v;
    mean /= static_cast<double>(w.size());
    double var = 0;
    for (double v : w) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(w.size() - 1));
    EXPECT_LT(std::abs(mean), 5 * kInitStddev / std::sqrt(static_cast<double>(w.size()))) << i;
    EXPECT_NEAR(sd, kInitStddev, 0.1 * kInitStddev) << i;
    ++checked;
  }
  EXPECT_GE(checked, 8);
}

TEST(Forward, HandComputedConvolution) {
  Architecture a;
  a.input = {1, 2, 2};
  a.layers = {LayerSpec::conv(1), LayerSpec::dense(2, 0.0, false)};
  Network<double> net(a);
  for (int k = 0; k < 9; ++k) net.weights[0][static_cast<std::size_t>(k)] = k + 1;
  net.biases[0][0] = -50;
  const std::vector<double> x = {1, 2, 3, 4};
  const auto out = activations(net, std::span<const double>(x), 1, 0);
  // raw sums 77, 67, 47, 37 (cross-correlation, zero padding) minus 50
  ASSERT_EQ(out.size(), 4u);
  EXPECT_DOUBLE_EQ(out[0], 27.0);
  EXPECT_DOUBLE_EQ(out[1], 17.0);
  EXPECT_DOUBLE_EQ(out[2], -3.0 / 3.0);
  EXPECT_DOUBLE_EQ(out[3], -13.0 / 3.0);
}

TEST(Forward, ZeroParametersGiveUniformOutput) {
  Network<double> net(Architecture::toy(7));
  gen::Rng r(1);
  for (int t = 0; t < 5; ++t) {
    const auto x = random_inputs<double>(r, 1, net.input_size());
    for (double p : forward(net, std::span<const double>(x))) EXPECT_DOUBLE_EQ(p, 1.0 / 7.0);
  }
}

TEST(Forward, ProbabilitiesSumToOne) {
  const auto net = Network<float>::init(Architecture::toy(10), 2, 0.1);
  gen::Rng r(2);
  for (int t = 0; t < 100; ++t) {
    const auto x = random_inputs<float>(r, 1, net.input_size(), 0.0, 3.0);
    const auto p = forward(net, std::span<const float>(x), t % 2 ? Mode::train : Mode::eval, 9);
    double sum = 0;
    for (double v : p) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Forward, InvertedDropoutScalesKeptUnits) {
  Architecture a;
  a.input = {2, 6, 6};
  a.layers = {LayerSpec::conv(6, 0.4), LayerSpec::dense(3, 0.0, false)};
  const auto net = Network<double>::init(a, 4, 0.3);
  gen::Rng r(3);
  const auto x = random_inputs<double>(r, 1, net.input_size());
  const auto eval = nn::detail::forward_range(net, std::span<const double>(x), 1, 0, 1, Mode::eval, 0, 0, nullptr);
  const auto train = nn::detail::forward_range(net, std::span<const double>(x), 1, 0, 1, Mode::train, 17, 0, nullptr);
  int dropped = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    if (train[i] == 0.0) {
      ++dropped;
    } else {
      EXPECT_NEAR(train[i], eval[i] / 0.6, 1e-12);
    }
  }
  EXPECT_GT(dropped, 0);
  EXPECT_LT(dropped, static_cast<int>(eval.size()));
  const auto again = nn::detail::forward_range(net, std::span<const double>(x), 1, 0, 1, Mode::train, 17, 0, nullptr);
  EXPECT_EQ(train, again);
}

TEST(Forward, NonFiniteActivationReportsLayer) {
  auto net = Network<double>::init(miniature(), 1);
  net.weights[2][0] = std::numeric_limits<double>::infinity();
  gen::Rng r(4);
  const auto x = random_inputs<double>(r, 1, net.input_size(), 0.5, 1.0);
  try {
    forward(net, std::span<const double>(x));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find('2'), std::string::npos) << e.what();
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  const std::vector<double> z = {700, 0, -700};
  const auto p = softmax(z);
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  for (double v : p) EXPECT_TRUE(std::isfinite(v));
  const std::vector<double> eq = {1000, 1000};
  EXPECT_EQ(softmax(eq), (std::vector<double>{0.5, 0.5}));
  gen::Rng r(5);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> s(static_cast<std::size_t>(gen::uniform_int(r, 1, 20)));
    for (auto& v : s) v = gen::uniform(r, -700, 700);
    double sum = 0;
    for (double v : softmax(s)) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Homogeneity, LogitsScaleWithInput) {
  const auto net = Network<double>::init(Architecture::toy(10), 6, 0.05);
  gen::Rng r(6);
  for (int t = 0; t < 5; ++t) {
    const auto x = random_inputs<double>(r, 1, net.input_size());
    const auto base = logits(net, std::span<const double>(x));
    for (double v : {0.5, 2.0, 10.0}) {
      auto vx = x;
      for (auto& e : vx) e *= v;
      const auto z = logits(net, std::span<const double>(vx));
      for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(z[i], v * base[i], 1e-9 * std::abs(v * base[i]) + 1e-300);
    }
  }
}

TEST(Gradient, MatchesCentralDifferences) {
  auto net = Network<double>::init(miniature(), 5, 0.3);
  gen::Rng r(3);
  const auto x = random_inputs<double>(r, 3, net.input_size());
  const std::vector<int> y = {0, 3, 4};
  const auto c = gradient_check(net, x, y, kWeightDecay, 1e-3);
  EXPECT_LT(c.loss_error, 1e-12);
  EXPECT_LT(c.worst, 1e-4);
  EXPECT_GT(c.compared, 9 * c.straddled) << c.compared << " compared, " << c.straddled << " straddled";
}

TEST(Gradient, ZeroInputLeavesOnlyWeightDecay) {
  const auto net = Network<double>::init(Architecture::toy(6), 7, 0.1);
  const std::vector<double> x(static_cast<std::size_t>(net.input_size()) * 4, 0.0);
  const std::vector<int> y = {0, 1, 2, 5};
  const auto g = gradient(net, std::span<const double>(x), std::span<const int>(y), 1, Mode::train);
  for (std::size_t i = 0; i < net.weights.size(); ++i)
    for (std::size_t k = 0; k < net.weights[i].size(); ++k) ASSERT_EQ(g.weights[i][k], kWeightDecay * net.weights[i][k]);
}

TEST(Gradient, DuplicatedSampleCountsTwice) {
  const auto net = Network<double>::init(miniature(), 8, 0.3);
  gen::Rng r(8);
  const auto a = random_inputs<double>(r, 1, net.input_size());
  const auto b = random_inputs<double>(r, 1, net.input_size());
  auto abb = a;
  abb.insert(abb.end(), b.begin(), b.end());
  abb.insert(abb.end(), b.begin(), b.end());
  const std::vector<int> la = {1}, lb = {2}, labb = {1, 2, 2};
  auto grad = [&](const std::vector<double>& x, const std::vector<int>& y) {
    return gradient(net, std::span<const double>(x), std::span<const int>(y), 0, Mode::eval, 0.0);
  };
  const auto ga = grad(a, la), gb = grad(b, lb), g3 = grad(abb, labb);
  for (std::size_t i = 0; i < net.weights.size(); ++i)
    for (std::size_t k = 0; k < net.weights[i].size(); ++k) {
      const double expect = ga.weights[i][k] + 2 * gb.weights[i][k];
      EXPECT_NEAR(3 * g3.weights[i][k], expect, 1e-12 * (1 + std::abs(expect)));
    }
  EXPECT_NEAR(3 * g3.loss, ga.loss + 2 * gb.loss, 1e-12);
}

TEST(Gradient, IndependentOfWorkerCount) {
  const auto net = Network<double>::init(Architecture::toy(10, 8, 32, 1.0), 9);
  gen::Rng r(9);
  const int count = 21;
  const auto x = random_inputs<double>(r, count, net.input_size(), 0.0, 1.0);
  std::vector<int> y;
  for (int i = 0; i < count; ++i) y.push_back(i % 10);
  const auto g1 = gradient(net, std::span<const double>(x), std::span<const int>(y), 42, Mode::train, kWeightDecay, 1);
  const auto g4 = gradient(net, std::span<const double>(x), std::span<const int>(y), 42, Mode::train, kWeightDecay, 4);
  EXPECT_EQ(g1.weights, g4.weights);
  EXPECT_EQ(g1.biases, g4.biases);
  EXPECT_EQ(g1.loss, g4.loss);
}

TEST(Gradient, RejectsBadLabels) {
  const auto net = Network<double>::init(miniature(), 1);
  const std::vector<double> x(static_cast<std::size_t>(net.input_size()), 0.0);
  const std::vector<int> y = {5};
  EXPECT_THROW(gradient(net, std::span<const double>(x), std::span<const int>(y), 0), std::invalid_argument);
}

TEST(Gradient, LeadingPoolLayer) {
  Architecture a;
  a.input = {2, 4, 4};
  a.layers = {LayerSpec::maxpool(), LayerSpec::dense(3, 0.0, false)};
  const auto net = Network<double>::init(a, 2, 0.5);
  gen::Rng r(11);
  const auto x = random_inputs<double>(r, 2, net.input_size());
  const std::vector<int> y = {0, 2};
  const auto g = gradient(net, std::span<const double>(x), std::span<const int>(y), 0, Mode::eval, 0.0);
  EXPECT_NEAR(g.loss, objective(net, x, y, 0.0), 1e-12);
}

TEST(TopN, TiesGoToLowerIndex) {
  const std::vector<double> p = {0.25, 0.5, 0.25, 0.5, 0.0};
  EXPECT_EQ(top_n(p, 5), (std::vector<int>{1, 3, 0, 2, 4}));
  EXPECT_EQ(argmax(p), 1);
  EXPECT_EQ(top_n(p, 9).size(), 5u);
}

TEST(Ensemble, SingleModelKeepsItsRanking) {
  const std::vector<Network<double>> one = {constant_model({0.1, 0.5, 0.4})};
  const std::vector<double> x = {0.0};
  EXPECT_EQ(predict_top_n(std::span<const Network<double>>(one), std::span<const double>(x), 3),
            (std::vector<int>{1, 2, 0}));
}

TEST(Ensemble, TwoModelAverage) {
  const std::vector<Network<double>> m = {constant_model({0.6, 0.4}), constant_model({0.2, 0.8})};
  const std::vector<double> x = {0.0};
  const auto p = ensemble_probabilities(std::span<const Network<double>>(m), std::span<const double>(x));
  EXPECT_NEAR(p[0], 0.4, 1e-15);
  EXPECT_NEAR(p[1], 0.6, 1e-15);
  EXPECT_EQ(predict_top_n(std::span<const Network<double>>(m), std::span<const double>(x), 1).front(), 1);
}

TEST(Ensemble, ArgmaxCanDifferFromEveryMember) {
  const std::vector<std::vector<double>> outs = {{0.5, 0.45, 0.05}, {0.05, 0.45, 0.5}};
  std::vector<Network<double>> m;
  for (const auto& o : outs) m.push_back(constant_model(o));
  const std::vector<double> x = {0.0};
  const auto p = ensemble_probabilities(std::span<const Network<double>>(m), std::span<const double>(x));
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p[c], (outs[0][c] + outs[1][c]) / 2, 1e-15);
  const int top = argmax(p);
  EXPECT_EQ(top, 1);
  for (const auto& o : outs) EXPECT_NE(argmax(o), top);
}

TEST(Ensemble, RejectsMismatchedMembers) {
  const std::vector<Network<double>> m = {constant_model({0.5, 0.5}), constant_model({0.2, 0.3, 0.5})};
  const std::vector<double> x = {0.0};
  EXPECT_THROW(ensemble_probabilities(std::span<const Network<double>>(m), std::span<const double>(x)), ConfigError);
  const std::vector<Network<double>> none;
  EXPECT_THROW(ensemble_probabilities(std::span<const Network<double>>(none), std::span<const double>(x)), ConfigError);
}

TEST(Batch, PredictAllMatchesSingleForward) {
  const auto net = Network<float>::init(Architecture::toy(5), 10, 0.1);
  gen::Rng r(10);
  TensorSet set;
  for (int i = 0; i < 70; ++i) {
    const auto x = random_inputs<float>(r, 1, net.input_size(), 0.0, 1.0);
    set.add(x, i % 5);
  }
  const auto all = predict_all(net, set, 16);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto one = forward(net, set.sample(i));
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(all[i * 5 + c], one[c], 1e-6);
  }
}
