#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "xfb/arch.hpp"
#include "xfb/error.hpp"
#include "xfb/nn.hpp"
#include "xfb/train.hpp"

using namespace xfb;

namespace {

// Two Gaussian blobs in 4 dims.
void blobs(Tensor& x, std::vector<std::size_t>& y, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  x = Tensor({n, 4});
  y.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = i % 2;
    for (std::size_t c = 0; c < 4; ++c) x.at(i, c) = rng.normal() + (y[i] == 1 ? 1.5 : -1.5);
  }
}

}  // namespace

TEST_CASE("train: learning-rate schedule") {
  TrainConfig c;
  c.initial_lr = 0.1;
  c.lr_decay_every = 3;
  c.lr_decay_factor = 0.5;
  CHECK(c.learning_rate(0) == 0.1);
  CHECK(c.learning_rate(2) == 0.1);
  CHECK(c.learning_rate(3) == 0.05);
  CHECK(c.learning_rate(7) == 0.025);
  c.lr_decay_every = 0;
  CHECK(c.learning_rate(100) == 0.1);
}

TEST_CASE("train: config validation") {
  TrainConfig c;
  c.initial_lr = -1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = {};
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("train: both optimizers separate two blobs and lower the loss") {
  Tensor x;
  std::vector<std::size_t> y;
  blobs(x, y, 200, 1);
  const auto arch = ArchitectureSpec::parse("family=mlp input=1x4x1 hidden=dense:8 classes=2");
  for (auto opt : {OptimizerKind::sgd_momentum, OptimizerKind::adam}) {
    TrainConfig c;
    c.optimizer = opt;
    c.initial_lr = opt == OptimizerKind::adam ? 0.01 : 0.05;
    c.epochs = 10;
    c.seed = 3;
    const auto r = train_with_history(Model::initialize(arch, 2), x, one_hot(y, 2), c);
    CHECK(r.epoch_loss.size() == 10);
    CHECK(r.epoch_loss.back() < r.epoch_loss.front());
    CHECK(accuracy(r.model, x, y) > 0.95);
    CHECK(r.model.trained_epochs == 10);
  }
}

TEST_CASE("train: result is a pure function of its inputs") {
  Tensor x;
  std::vector<std::size_t> y;
  blobs(x, y, 64, 2);
  const auto arch = ArchitectureSpec::parse("family=mlp input=1x4x1 hidden=dense:6 classes=2");
  TrainConfig c;
  c.epochs = 3;
  c.seed = 11;
  const Model a = train(Model::initialize(arch, 5), x, one_hot(y, 2), c);
  const Model b = train(Model::initialize(arch, 5), x, one_hot(y, 2), c);
  CHECK(a == b);
  c.seed = 12;
  const Model d = train(Model::initialize(arch, 5), x, one_hot(y, 2), c);
  CHECK(a.params != d.params);
}

TEST_CASE("train: divergence is reported") {
  Tensor x;
  std::vector<std::size_t> y;
  blobs(x, y, 64, 3);
  for (double& v : x.values()) v *= 1e150;
  const auto arch = ArchitectureSpec::parse("family=mlp input=1x4x1 hidden=dense:6 classes=2");
  TrainConfig c;
  c.initial_lr = 10.0;
  c.epochs = 5;
  try {
    train(Model::initialize(arch, 1), x, one_hot(y, 2), c);
    FAIL("expected divergence");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::divergence);
  }
}

TEST_CASE("train: one_hot and accuracy validate labels") {
  const std::vector<std::size_t> labels = {0, 2, 1};
  const Tensor t = one_hot(labels, 3);
  CHECK(t.at(1, 2) == 1.0);
  CHECK(t.at(1, 0) == 0.0);
  const std::vector<std::size_t> bad = {3};
  CHECK_THROWS_AS(one_hot(bad, 3), Error);
}

TEST_CASE("train: He initialization scale") {
  const auto arch = ArchitectureSpec::parse("family=mlp input=1x400x1 hidden=dense:200 classes=2");
  const Model m = Model::initialize(arch, 9);
  const auto layers = layout(arch);
  double s2 = 0.0;
  for (std::size_t i = 0; i < layers[0].weight_count; ++i) s2 += m.params[i] * m.params[i];
  const double var = s2 / static_cast<double>(layers[0].weight_count);
  CHECK(std::abs(var - 2.0 / 400.0) < 0.1 * 2.0 / 400.0);
  for (std::size_t i = 0; i < layers[0].bias_count; ++i) CHECK(m.params[layers[0].bias_offset + i] == 0.0);
}
