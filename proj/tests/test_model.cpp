#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "tada/batching.hpp"
#include "tada/datagen.hpp"
#include "tada/model.hpp"
#include "tada/optimizer.hpp"
#include "support.hpp"

using namespace tada;
using namespace tada::model;

namespace {

ModelConfig tiny(int size = 16, bool depth = false) {
  ModelConfig c;
  c.image_size = size;
  c.stem_width = 4;
  c.encoder_widths = {6, 8, 8};
  c.decoder_width = 6;
  c.anchor_channels = 3;
  c.depth_branch = depth;
  c.fc_hidden = 5;
  c.init_seed = 3;
  return c;
}

template <class T>
Tensor<T> random_images(int n, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<T> t({n, 3, size, size});
  for (auto& v : t.vec()) v = static_cast<T>(u(rng));
  return t;
}

template <class T>
Tensor<T> random_like(const Tensor<T>& ref, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Tensor<T> t(ref.shape());
  for (auto& v : t.vec()) v = static_cast<T>(g(rng));
  return t;
}

template <class T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

/// Trains the head once, freezes it, then takes `steps` trunk-only updates.
void freeze_and_train(MultiTaskNet<float>& net, int steps) {
  optim::Optimizer<float> opt({"rmsprop", 1e-2});
  std::mt19937_64 rng(9);
  auto step = [&](std::uint64_t seed) {
    const auto x = random_images<float>(2, net.config().image_size, seed);
    net.zero_grad();
    const auto o = net.forward(x);
    net.backward({random_like(o.main, rng), random_like(o.anchor, rng), {}, {}, {}, {}});
    opt.step(net.trainable_parameters());
    net.record_update();
  };
  step(100);
  net.set_frozen(Partition::head);
  for (int s = 0; s < steps; ++s) step(200 + s);
}

}  // namespace

TEST(Forward, ShapesAndResolution) {
  MultiTaskNet<float> net(tiny(64, true));
  const auto o = net.forward(random_images<float>(2, 64, 1));
  EXPECT_EQ(o.main.shape(), (Shape4{2, 3, 32, 32}));
  EXPECT_EQ(o.anchor.shape(), (Shape4{2, 3, 32, 32}));
  EXPECT_EQ(o.depth.shape(), (Shape4{2, 3, 1, 1}));
  EXPECT_EQ(o.features.shape(), (Shape4{2, 6, 32, 32}));
  EXPECT_EQ(o.up1.shape().h, 8);
  EXPECT_EQ(o.up2.shape().h, 16);
  EXPECT_EQ(net.output_size(), 32);
}

TEST(Forward, MainOutputsAreUnitNormals) {
  MultiTaskNet<float> net(tiny(32));
  const auto o = net.forward(random_images<float>(3, 32, 2));
  const Shape4 s = o.main.shape();
  for (int n = 0; n < s.n; ++n)
    for (int i = 0; i < s.h; ++i)
      for (int j = 0; j < s.w; ++j) {
        double len = 0.0;
        for (int c = 0; c < 3; ++c) len += static_cast<double>(o.main(n, c, i, j)) * o.main(n, c, i, j);
        EXPECT_NEAR(std::sqrt(len), 1.0, 1e-5);
      }
}

TEST(Forward, WrongInputShapeThrows) {
  MultiTaskNet<float> net(tiny(16));
  EXPECT_THROW(net.forward(random_images<float>(1, 32, 1)), ShapeError);
  EXPECT_THROW(MultiTaskNet<float>(tiny(18)), ModelError);
}

TEST(Forward, ZeroOutputLayerGivesNoNaN) {
  MultiTaskNet<float> net(tiny(16));
  for (auto* p : net.parameters())
    if (p->name.rfind("out.main", 0) == 0) p->value.zero();
  const auto o = net.forward(random_images<float>(1, 16, 3));
  for (float v : o.main.vec()) EXPECT_FALSE(std::isnan(v));
  Tensor<float> g(o.main.shape(), 1.0f);
  net.backward({g, {}, {}, {}, {}, {}});
  for (auto* p : net.parameters())
    for (float v : p->grad.vec()) EXPECT_TRUE(std::isfinite(v)) << p->name;
}

TEST(Partition, TotalAndDisjoint) {
  MultiTaskNet<float> net(tiny(16, true));
  const auto all = net.parameters();
  const auto trunk = net.parameters(Partition::trunk);
  const auto head = net.parameters(Partition::head);
  EXPECT_EQ(trunk.size() + head.size(), all.size());
  std::set<std::string> names;
  for (auto* p : all) EXPECT_TRUE(names.insert(p->name).second) << "duplicate " << p->name;
  std::set<const void*> t(trunk.begin(), trunk.end());
  for (auto* p : head) EXPECT_FALSE(t.count(p));
  const std::set<std::string> head_prefixes{"up3.lateral", "up3.conv", "out.main", "out.anchor", "depth.fc1",
                                            "depth.fc2"};
  for (auto* p : all) {
    const std::string layer = p->name.substr(0, p->name.rfind('.'));
    EXPECT_EQ(head_prefixes.count(layer) == 1, p->part == Partition::head) << p->name;
  }
}

TEST(Freeze, RefusedBeforeAnyHeadUpdate) {
  MultiTaskNet<float> net(tiny(16));
  EXPECT_THROW(net.set_frozen(Partition::head), ModelError);
  EXPECT_THROW(net.set_frozen(Partition::trunk), ModelError);
  net.record_update();
  EXPECT_NO_THROW(net.set_frozen(Partition::head));
  EXPECT_TRUE(net.head_frozen());
  EXPECT_EQ(net.trainable_parameters().size(), net.parameters(Partition::trunk).size());
}

TEST(Freeze, HeadChecksumUnchangedOverHundredSteps) {
  MultiTaskNet<float> net(tiny(16));
  freeze_and_train(net, 0);
  const auto head0 = net.checksum(Partition::head);
  const auto trunk0 = net.checksum(Partition::trunk);
  freeze_and_train(net, 100);
  EXPECT_EQ(net.checksum(Partition::head), head0);
  EXPECT_NE(net.checksum(Partition::trunk), trunk0);
}

TEST(Freeze, TrunkStillReceivesGradient) {
  MultiTaskNet<float> net(tiny(16));
  freeze_and_train(net, 0);
  net.zero_grad();
  const auto o = net.forward(random_images<float>(2, 16, 5));
  std::mt19937_64 rng(1);
  net.backward({random_like(o.main, rng), {}, {}, {}, {}, {}});
  for (auto* p : net.parameters(Partition::trunk)) {
    double norm = 0.0;
    for (float v : p->grad.vec()) norm += std::abs(v);
    EXPECT_GT(norm, 0.0) << p->name;
  }
}

TEST(Features, BoundsAreChecked) {
  MultiTaskNet<float> net(tiny(16));
  const auto img = random_images<float>(1, 16, 1);
  EXPECT_THROW(net.extract_features(img, {{8, 0}}), ModelError);
  EXPECT_THROW(net.extract_features(img, {{0, -1}}), ModelError);
  const auto probe = net.extract_features(img, {{0, 0}, {7, 7}});
  EXPECT_EQ(probe.feature_size, 8);
  ASSERT_EQ(probe.vectors.size(), 2u);
  EXPECT_EQ(probe.vectors[0].size(), 6u);
  EXPECT_THROW(net.extract_features(random_images<float>(2, 16, 1), {{0, 0}}), ShapeError);
}

TEST(Features, DifferAcrossStylesOfOneScene) {
  data::ToyWorldSpec spec;
  spec.image_size = 16;
  spec.pose_shift.target = spec.pose_shift.source;
  const auto scene = data::regenerate_scene(spec, data::Domain::source, data::Split::train, 0);
  std::mt19937_64 r1(1), r2(1);
  spec.target_style.tint = {1.0, 0.6, 0.3};
  spec.target_style.texture_amp = 0.4;
  const auto a = data::render_sample(scene, spec, data::Domain::source, data::Split::train, 0, r1);
  const auto b = data::render_sample(scene, spec, data::Domain::target, data::Split::train, 0, r2);
  MultiTaskNet<float> net(tiny(16));
  const auto fa = net.extract_features(images_to_batch<float>({&a.image}, 16), {{4, 4}});
  const auto fb = net.extract_features(images_to_batch<float>({&b.image}, 16), {{4, 4}});
  EXPECT_NE(fa.vectors[0], fb.vectors[0]);
}

TEST(Checkpoint, RoundTrip) {
  MultiTaskNet<float> net(tiny(16, true));
  freeze_and_train(net, 3);
  const auto dir = tada::testing::temp_dir("ckpt");
  std::filesystem::create_directories(dir);
  net.save(dir / "m.ckpt");
  auto back = MultiTaskNet<float>::load(dir / "m.ckpt");
  EXPECT_EQ(back.checksum(Partition::head), net.checksum(Partition::head));
  EXPECT_EQ(back.checksum(Partition::trunk), net.checksum(Partition::trunk));
  EXPECT_TRUE(back.head_frozen());
  EXPECT_EQ(back.head_updates(), net.head_updates());
  const auto x = random_images<float>(1, 16, 4);
  EXPECT_EQ(back.forward(x).main.vec(), net.forward(x).main.vec());

  MultiTaskNet<float> other(tiny(32));
  other.save(dir / "other.ckpt");
  {
    std::ofstream f(dir / "junk.ckpt", std::ios::binary);
    f << "NOTACKPT";
  }
  EXPECT_THROW(MultiTaskNet<float>::load(dir / "junk.ckpt"), ModelError);
  EXPECT_THROW(MultiTaskNet<double>::load(dir / "m.ckpt"), ModelError);
  std::filesystem::resize_file(dir / "other.ckpt", std::filesystem::file_size(dir / "other.ckpt") / 2);
  EXPECT_THROW(MultiTaskNet<float>::load(dir / "other.ckpt"), ModelError);
  std::filesystem::remove_all(dir);
}

TEST(Backward, MatchesFiniteDifferencesInDoublePrecision) {
  // L = <Gm, main> + <Ga, anchor> + <Gd, depth>; compare analytic parameter
  // gradients with central differences on a sample of coordinates per tensor.
  MultiTaskNet<double> net(tiny(16, true));
  const auto x = random_images<double>(2, 16, 8);
  std::mt19937_64 rng(17);
  auto o = net.forward(x);
  const auto gm = random_like(o.main, rng), ga = random_like(o.anchor, rng), gd = random_like(o.depth, rng);
  auto objective = [&]() {
    const auto r = net.forward(x);
    return dot(gm, r.main) + dot(ga, r.anchor) + dot(gd, r.depth);
  };
  net.zero_grad();
  net.forward(x);
  net.backward({gm, ga, gd, {}, {}, {}});
  const double h = 1e-6;
  double worst = 0.0;
  int checked = 0;
  for (auto* p : net.parameters()) {
    std::uniform_int_distribution<std::size_t> pick(0, p->value.size() - 1);
    for (int k = 0; k < 4; ++k) {
      const std::size_t i = pick(rng);
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double up = objective();
      p->value[i] = keep - h;
      const double down = objective();
      p->value[i] = keep;
      const double fd = (up - down) / (2 * h);
      const double an = p->grad[i];
      const double rel = std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an));
      worst = std::max(worst, rel);
      EXPECT_LT(rel, 1e-4) << p->name << "[" << i << "] analytic " << an << " numeric " << fd;
      ++checked;
    }
  }
  EXPECT_GT(checked, 50);
}
