#include <doctest.h>

#include <cmath>
#include <map>

#include "support.hpp"
#include "xfb/datagen.hpp"
#include "xfb/error.hpp"

using namespace xfb;

namespace {

DatasetSpec small_spec(std::uint64_t seed = 1) {
  DatasetSpec s;
  s.family.seed = seed;
  s.family.num_prototypes = 4;
  s.family.dims = {8, 8, 1};
  s.family.smoothness = 2.0;
  s.classes = 4;
  s.samples_per_class = 12;
  s.noise_sigma = 0.1;
  s.split_seed = seed + 100;
  return s;
}

double msd(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / static_cast<double>(a.size());
}

}  // namespace

TEST_CASE("datagen: prototypes are in [0, 1] and pairwise distinct") {
  for (double shared : {0.0, 0.7}) {
    FamilyParams p{3, 10, {16, 16, 1}, 3.0, shared};
    const PatternFamily f = make_family(p);
    REQUIRE(f.prototypes.size() == 10);
    for (const auto& proto : f.prototypes) {
      REQUIRE(proto.size() == 256);
      double lo = 1.0, hi = 0.0;
      for (double v : proto) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      CHECK(lo >= 0.0);
      CHECK(hi <= 1.0);
      CHECK(hi - lo > 0.5);
    }
    for (std::size_t i = 0; i < 10; ++i) {
      for (std::size_t j = i + 1; j < 10; ++j) {
        CHECK(msd(f.prototypes[i], f.prototypes[j]) >= kPrototypeDistanceFloor);
      }
    }
  }
}

TEST_CASE("datagen: shared weight makes classes more alike") {
  const PatternFamily loose = make_family({4, 6, {16, 16, 1}, 3.0, 0.0});
  const PatternFamily tight = make_family({4, 6, {16, 16, 1}, 3.0, 0.8});
  double a = 0.0, b = 0.0;
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = i + 1; j < 6; ++j) {
      a += msd(loose.prototypes[i], loose.prototypes[j]);
      b += msd(tight.prototypes[i], tight.prototypes[j]);
    }
  }
  CHECK(b < a);
}

TEST_CASE("datagen: family parameters are validated") {
  CHECK_THROWS_AS(make_family({1, 0, {16, 16, 1}, 3.0, 0.0}), Error);
  CHECK_THROWS_AS(make_family({1, 3, {16, 16, 1}, 0.5, 0.0}), Error);
  CHECK_THROWS_AS(make_family({1, 3, {16, 16, 1}, 9.0, 0.0}), Error);
  CHECK_THROWS_AS(make_family({1, 3, {16, 16, 1}, 3.0, 1.0}), Error);
}

TEST_CASE("datagen: draw_sample with no noise and no jitter reproduces the prototype") {
  const PatternFamily f = make_family({5, 2, {8, 8, 1}, 2.0, 0.0});
  std::vector<double> out(64);
  Rng rng(1);
  draw_sample(f.prototypes[0], {8, 8, 1}, 0.0, 0, rng, out);
  CHECK(out == f.prototypes[0]);
}

TEST_CASE("datagen: jitter is a circular shift") {
  const PatternFamily f = make_family({6, 1, {8, 8, 1}, 2.0, 0.0});
  std::vector<double> out(64);
  Rng rng(2);
  draw_sample(f.prototypes[0], {8, 8, 1}, 0.0, 2, rng, out);
  bool matched = false;
  for (int dy = -2; dy <= 2 && !matched; ++dy) {
    for (int dx = -2; dx <= 2 && !matched; ++dx) {
      bool ok = true;
      for (int y = 0; y < 8 && ok; ++y) {
        for (int x = 0; x < 8 && ok; ++x) {
          const int sy = ((y - dy) % 8 + 8) % 8, sx = ((x - dx) % 8 + 8) % 8;
          ok = out[static_cast<std::size_t>(y * 8 + x)] == f.prototypes[0][static_cast<std::size_t>(sy * 8 + sx)];
        }
      }
      matched = ok;
    }
  }
  CHECK(matched);
}

TEST_CASE("datagen: split is stratified, seeded and normalized with train statistics") {
  const DatasetSplit a = sample_dataset(small_spec());
  const DatasetSplit b = sample_dataset(small_spec());
  CHECK(a.train.inputs == b.train.inputs);
  CHECK(a.test.labels == b.test.labels);
  CHECK(a.train.size() == 4 * 8);
  CHECK(a.test.size() == 4 * 4);
  std::map<std::size_t, int> counts;
  for (auto l : a.train.labels) ++counts[l];
  for (auto& [c, n] : counts) CHECK(n == 8);

  // Train inputs have zero mean and unit population std per channel.
  double s1 = 0.0, s2 = 0.0;
  for (double v : a.train.inputs.values()) {
    s1 += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(a.train.inputs.size());
  CHECK(std::abs(s1 / n) < 1e-12);
  CHECK(std::abs(s2 / n - 1.0) < 1e-9);

  // Raw values come back inside [0, 1].
  for (double v : a.test.raw_inputs().values()) {
    CHECK(v >= -1e-12);
    CHECK(v <= 1.0 + 1e-12);
  }

  const DatasetSplit c = sample_dataset(small_spec(2));
  CHECK(c.train.inputs != a.train.inputs);
}

TEST_CASE("datagen: train and test indices partition the sample list") {
  const DatasetSplit s = sample_dataset(small_spec());
  std::vector<int> seen(48, 0);
  for (auto i : s.train_indices) ++seen[i];
  for (auto i : s.test_indices) ++seen[i];
  for (int v : seen) CHECK(v == 1);
}

TEST_CASE("datagen: dataset spec validation") {
  DatasetSpec s = small_spec();
  s.classes = 5;
  CHECK_THROWS_AS(sample_dataset(s), Error);
  s = small_spec();
  s.samples_per_class = 1;
  CHECK_THROWS_AS(sample_dataset(s), Error);
  s = small_spec();
  s.noise_sigma = -0.1;
  CHECK_THROWS_AS(sample_dataset(s), Error);
}

TEST_CASE("datagen: pool composition follows alpha") {
  const DatasetSpec spec = small_spec();
  const FamilyParams foreign{77, 5, {8, 8, 1}, 2.0, 0.0};
  for (double alpha : {0.0, 0.25, 0.5, 1.0}) {
    const AttackerPool pool = sample_pool(spec, foreign, 101, alpha, 9);
    CHECK(pool.size() == 101);
    CHECK(pool.victim_count() == static_cast<std::size_t>(std::floor(alpha * 101)));
    for (double v : pool.inputs.values()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK_THROWS_AS(sample_pool(spec, foreign, 10, 1.5, 9), Error);
  CHECK(sample_pool(spec, foreign, 50, 0.5, 9).inputs == sample_pool(spec, foreign, 50, 0.5, 9).inputs);
  CHECK(sample_pool(spec, foreign, 50, 0.5, 9).inputs != sample_pool(spec, foreign, 50, 0.5, 10).inputs);
}

TEST_CASE("datagen: class weights skew the victim part of the pool") {
  const DatasetSpec spec = small_spec();
  const FamilyParams foreign{77, 5, {8, 8, 1}, 2.0, 0.0};
  PoolOptions o;
  o.victim_class_weights = {1.0, 0.0, 0.0, 0.0};
  const AttackerPool pool = sample_pool(spec, foreign, 40, 1.0, 3, o);
  // Every row is near prototype 0.
  const PatternFamily fam = make_family(spec.family);
  for (std::size_t r = 0; r < pool.size(); ++r) {
    std::vector<double> row(pool.inputs.row(r).begin(), pool.inputs.row(r).end());
    const double d0 = msd(row, fam.prototypes[0]);
    for (std::size_t k = 1; k < 4; ++k) CHECK(d0 < msd(row, fam.prototypes[k]));
  }
  o.victim_class_weights = {1.0, 1.0};
  CHECK_THROWS_AS(sample_pool(spec, foreign, 40, 1.0, 3, o), Error);
}

TEST_CASE("datagen: foreign noise level is configurable") {
  const DatasetSpec spec = small_spec();
  const FamilyParams foreign{77, 1, {8, 8, 1}, 2.0, 0.0};
  PoolOptions o;
  o.foreign_noise_sigma = 0.0;
  const AttackerPool pool = sample_pool(spec, foreign, 5, 0.0, 3, o);
  const PatternFamily fam = make_family(foreign);
  for (std::size_t r = 0; r < 5; ++r) {
    CHECK(std::vector<double>(pool.inputs.row(r).begin(), pool.inputs.row(r).end()) == fam.prototypes[0]);
  }
  o.foreign_noise_sigma = -1.0;
  CHECK_THROWS_AS(sample_pool(spec, foreign, 5, 0.0, 3, o), Error);
}

TEST_CASE("datagen: channel statistics") {
  Tensor raw({2, 4}, {0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0});
  const Normalization n = channel_statistics(raw, 2);
  CHECK(n.mean[0] == 0.5);
  CHECK(n.stddev[0] == 0.5);
  CHECK(n.mean[1] == 1.0);
  CHECK(n.stddev[1] == 1.0);
  CHECK(n.lower(0) == -1.0);
  CHECK(n.upper(0) == 1.0);
}
