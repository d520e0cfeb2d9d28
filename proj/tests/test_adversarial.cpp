#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "tada/adversarial.hpp"
#include "tada/model.hpp"

using namespace tada;
using namespace tada::adv;

namespace {

Tensor<double> gaussian(Shape4 s, double mean, std::mt19937_64& rng) {
  std::normal_distribution<double> g(mean, 1.0);
  Tensor<double> t(s);
  for (auto& v : t.vec()) v = g(rng);
  return t;
}

DiscriminatorConfig fast_disc() {
  DiscriminatorConfig c;
  c.width = 16;
  c.optimizer = {"adam", 1e-2};
  return c;
}

}  // namespace

TEST(GradientReversal, ForwardIsIdentity) {
  std::mt19937_64 rng(1);
  const auto x = gaussian({2, 3, 4, 4}, 0.0, rng);
  EXPECT_EQ(grad_reverse_forward(x).vec(), x.vec());
}

TEST(GradientReversal, BackwardScalesByMinusLambda) {
  std::mt19937_64 rng(2);
  const auto g = gaussian({1, 2, 3, 3}, 0.0, rng);
  for (double lambda : {0.0, 0.3, 1.0}) {
    const auto r = grad_reverse_backward(g, lambda);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_DOUBLE_EQ(r[i], -lambda * g[i]);
  }
  EXPECT_THROW(grad_reverse_backward(g, -0.1), std::invalid_argument);
}

TEST(GradientReversal, FiniteDifferenceOfComposedObjective) {
  // f(x) = <w, x> seen through the reversal: the generator sees d/dx = -lambda w.
  std::mt19937_64 rng(3);
  const auto x = gaussian({1, 1, 2, 5}, 0.0, rng);
  const auto w = gaussian(x.shape(), 0.0, rng);
  auto f = [&](const Tensor<double>& in) {
    const auto y = grad_reverse_forward(in);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
    return s;
  };
  const double lambda = 0.3, h = 1e-6;
  const auto an = grad_reverse_backward(w, lambda);
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto up = x, down = x;
    up[i] += h;
    down[i] -= h;
    const double fd = (f(up) - f(down)) / (2 * h);
    EXPECT_NEAR(an[i], -lambda * fd, 1e-8);
  }
}

TEST(Discriminator, IdenticalBatchesStayAtChance) {
  std::mt19937_64 rng(4);
  Discriminator<double> disc(DiscKind::feature, 4, fast_disc());
  AdaptHealth health(100);
  for (int step = 0; step < 100; ++step) {
    const auto x = gaussian({4, 4, 4, 4}, 0.0, rng);
    adversarial_step(x, x, disc, 0.0, health);
  }
  // Identical inputs get identical logits, so exactly one domain is "right".
  EXPECT_NEAR(health.rolling_accuracy(), 0.5, 1e-12);
}

TEST(Discriminator, SeparableGaussiansAreLearned) {
  std::mt19937_64 rng(5);
  for (auto kind : {DiscKind::feature, DiscKind::output}) {
    Discriminator<double> disc(kind, 3, fast_disc());
    AdaptHealth health(20);
    for (int step = 0; step < 200; ++step) {
      adversarial_step(gaussian({4, 3, 8, 8}, 1.5, rng), gaussian({4, 3, 8, 8}, -1.5, rng), disc, 0.0, health);
    }
    EXPECT_GT(health.rolling_accuracy(), 0.95) << "kind " << static_cast<int>(kind);
    EXPECT_EQ(health.fraction_below(), 0.0);
  }
}

TEST(Discriminator, ZeroLambdaGivesZeroGeneratorGradient) {
  std::mt19937_64 rng(6);
  for (auto kind : {DiscKind::feature, DiscKind::output}) {
    Discriminator<double> disc(kind, 3, fast_disc());
    AdaptHealth health;
    const auto r = adversarial_step(gaussian({2, 3, 8, 8}, 0.0, rng), gaussian({2, 3, 8, 8}, 1.0, rng), disc, 0.0, health);
    for (double v : r.grad_target.vec()) EXPECT_EQ(v, 0.0);
    for (double v : r.grad_source.vec()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Discriminator, FeatureGradientIsReversedDiscriminatorGradient) {
  // With the discriminator frozen (lr tiny), the generator gradient points
  // against the direction that lowers the discriminator loss.
  std::mt19937_64 rng(7);
  DiscriminatorConfig cfg = fast_disc();
  cfg.optimizer.lr = 1e-12;
  Discriminator<double> disc(DiscKind::feature, 3, cfg);
  AdaptHealth health;
  const auto s = gaussian({2, 3, 4, 4}, 0.5, rng), t = gaussian({2, 3, 4, 4}, -0.5, rng);
  const auto r = adversarial_step(s, t, disc, 1.0, health);
  auto s_step = s;
  const double eta = 1e-4;
  for (std::size_t i = 0; i < s.size(); ++i) s_step[i] -= eta * r.grad_source[i];
  const auto r2 = adversarial_step(s_step, t, disc, 1.0, health);
  EXPECT_GT(r2.disc_loss, r.disc_loss);
}

TEST(Discriminator, MismatchedBatchSizesThrow) {
  std::mt19937_64 rng(8);
  Discriminator<double> disc(DiscKind::feature, 3, fast_disc());
  AdaptHealth health;
  EXPECT_THROW(adversarial_step(gaussian({2, 3, 4, 4}, 0, rng), gaussian({3, 3, 4, 4}, 0, rng), disc, 0.1, health),
               AdversarialError);
}

TEST(Discriminator, ParametersDisjointFromNetwork) {
  model::ModelConfig mc;
  mc.image_size = 16;
  model::MultiTaskNet<float> net(mc);
  Discriminator<float> disc(DiscKind::feature, mc.decoder_width, {});
  std::set<std::string> names;
  for (auto* p : net.parameters()) names.insert(p->name);
  for (auto* p : disc.parameters()) {
    EXPECT_EQ(p->part, nn::Partition::discriminator);
    EXPECT_FALSE(names.count(p->name)) << p->name;
  }
}

TEST(AdaptHealth, RollingWindowAndThreshold) {
  AdaptHealth h(4, 0.55);
  for (double a : {1.0, 1.0, 0.5, 0.5, 0.5, 0.6}) h.record(a);
  EXPECT_EQ(h.size(), 4u);
  EXPECT_NEAR(h.rolling_accuracy(), 0.525, 1e-12);
  EXPECT_NEAR(h.fraction_below(), 0.75, 1e-12);
  EXPECT_THROW(h.record(1.5), AdversarialError);
  EXPECT_EQ(h.to_json().at("window").get<std::size_t>(), 4u);
}

TEST(Discriminator, RunawayLossIsReportedAsDivergence) {
  std::mt19937_64 rng(9);
  Discriminator<double> disc(DiscKind::output, 3, fast_disc());
  AdaptHealth health;
  auto s = gaussian({2, 3, 8, 8}, 0.0, rng), t = gaussian({2, 3, 8, 8}, 0.0, rng);
  for (auto* x : {&s, &t})
    for (auto& v : x->vec()) v *= 1e9;
  try {
    adversarial_step(s, t, disc, 0.1, health);
    FAIL() << "expected a runaway-loss error";
  } catch (const AdversarialError& e) {
    EXPECT_NE(std::string(e.what()).find("runaway"), std::string::npos);
  }
  EXPECT_EQ(health.size(), 0u);
}

TEST(FeatureScaling, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  const auto x = gaussian({2, 3, 2, 3}, 0.4, rng);
  const auto w = gaussian(x.shape(), 0.0, rng);
  auto f = [&](const Tensor<double>& in) {
    std::vector<double> rms;
    const auto y = nn::rms_normalize(in, rms);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += w[i] * y[i];
    return acc;
  };
  std::vector<double> rms;
  const auto y = nn::rms_normalize(x, rms);
  const auto an = nn::rms_normalize_backward(y, rms, w);
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto up = x, down = x;
    up[i] += h;
    down[i] -= h;
    EXPECT_NEAR(an[i], (f(up) - f(down)) / (2 * h), 1e-8);
  }
}

TEST(Discriminator, FeatureLogitsIgnoreInputScale) {
  std::mt19937_64 rng(11);
  Discriminator<double> disc(DiscKind::feature, 4, fast_disc());
  const auto x = gaussian({2, 4, 4, 4}, 0.2, rng);
  auto big = x;
  for (auto& v : big.vec()) v *= 1e6;
  const auto a = disc.forward(x), b = disc.forward(big);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9 * (1.0 + std::abs(a[i])));
}
