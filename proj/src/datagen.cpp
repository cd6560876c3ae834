#include "xfb/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "xfb/container.hpp"
#include "xfb/error.hpp"
#include "xfb/io.hpp"

namespace xfb {

namespace {

constexpr std::uint64_t kSampleStream = 0x53414d50ULL;  // "SAMP"
constexpr std::uint64_t kSplitStream = 0x53504c54ULL;   // "SPLT"
constexpr std::uint64_t kPoolVictimStream = 0x504f4f4cULL;
constexpr std::uint64_t kPoolForeignStream = 0x464f5245ULL;
constexpr std::uint64_t kPoolOrderStream = 0x4f524452ULL;
constexpr int kMaxPrototypeRedraws = 100;

double mean_squared_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]) * (a[i] - b[i]);
  return sum / static_cast<double>(a.size());
}

std::vector<double> draw_waves(const FamilyParams& p, Rng& rng) {
  const Dims& d = p.dims;
  std::vector<double> image(d.size(), 0.0);
  const auto cutoff = static_cast<int>(std::floor(p.smoothness));
  for (std::size_t ch = 0; ch < d.channels; ++ch) {
    // Half-plane of frequencies so (u, v) and (-u, -v) are not both drawn.
    for (int v = 0; v <= cutoff; ++v) {
      for (int u = -cutoff; u <= cutoff; ++u) {
        if (v == 0 && u <= 0) continue;
        if (std::hypot(u, v) > p.smoothness) continue;
        const double amplitude = rng.normal();
        const double phase = 2.0 * std::numbers::pi * rng.uniform();
        for (std::size_t y = 0; y < d.height; ++y) {
          for (std::size_t x = 0; x < d.width; ++x) {
            const double arg = 2.0 * std::numbers::pi *
                                   (u * static_cast<double>(y) / static_cast<double>(d.height) +
                                    v * static_cast<double>(x) / static_cast<double>(d.width)) +
                               phase;
            image[(y * d.width + x) * d.channels + ch] += amplitude * std::cos(arg);
          }
        }
      }
    }
  }
  return image;
}

// Min-max scale into [0, 1]; empty when the image is constant.
std::vector<double> rescale(std::vector<double> image) {
  const auto [lo, hi] = std::minmax_element(image.begin(), image.end());
  const double low = *lo;
  const double span = *hi - *lo;
  if (!(span > 0.0)) return {};
  for (double& v : image) v = (v - low) / span;
  return image;
}

Normalization channel_statistics_impl(const Tensor& raw, std::size_t channels) {
  Normalization norm;
  norm.mean.assign(channels, 0.0);
  norm.stddev.assign(channels, 0.0);
  std::vector<double> counts(channels, 0.0);
  const auto values = raw.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    norm.mean[i % channels] += values[i];
    counts[i % channels] += 1.0;
  }
  for (std::size_t c = 0; c < channels; ++c) norm.mean[c] /= counts[c];
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double dv = values[i] - norm.mean[i % channels];
    norm.stddev[i % channels] += dv * dv;
  }
  for (std::size_t c = 0; c < channels; ++c) {
    norm.stddev[c] = std::sqrt(norm.stddev[c] / counts[c]);
    // A constant channel (e.g. noise-free single prototype) keeps unit scale.
    if (!(norm.stddev[c] > 1e-12)) norm.stddev[c] = 1.0;
  }
  return norm;
}

void check_dims(const Dims& d) {
  require(d.height >= 2 && d.width >= 2 && d.channels >= 1, ErrorKind::validation,
          "degenerate dims " + to_string(d) + ": need at least 2x2x1");
}

std::vector<double> labels_as_doubles(const std::vector<std::size_t>& labels) {
  return {labels.begin(), labels.end()};
}

}  // namespace

Normalization channel_statistics(const Tensor& raw, std::size_t channels) {
  require(raw.rows() > 0, ErrorKind::validation, "statistics of an empty sample");
  require(channels > 0 && raw.cols() % channels == 0, ErrorKind::dimension, "row width is not a multiple of channels");
  return channel_statistics_impl(raw, channels);
}

PatternFamily make_family(const FamilyParams& params) {
  check_dims(params.dims);
  require(params.num_prototypes >= 1, ErrorKind::validation, "a family needs at least one prototype");
  require(std::isfinite(params.smoothness) && params.smoothness >= 1.0, ErrorKind::validation,
          "smoothness must be at least 1 (the lowest nonzero frequency)");
  require(params.smoothness <= static_cast<double>(std::min(params.dims.height, params.dims.width)) / 2.0,
          ErrorKind::validation, "smoothness exceeds the Nyquist limit of the image");

  require(params.shared_weight >= 0.0 && params.shared_weight < 1.0, ErrorKind::validation,
          "shared_weight must be in [0, 1)");

  PatternFamily family{params, {}};
  Rng rng(params.seed);
  std::vector<double> base;
  if (params.shared_weight > 0.0) base = draw_waves(params, rng);
  for (std::size_t k = 0; k < params.num_prototypes; ++k) {
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxPrototypeRedraws && !accepted; ++attempt) {
      auto own = draw_waves(params, rng);
      if (!base.empty()) {
        for (std::size_t i = 0; i < own.size(); ++i) {
          own[i] = params.shared_weight * base[i] + (1.0 - params.shared_weight) * own[i];
        }
      }
      auto candidate = rescale(std::move(own));
      if (candidate.empty()) continue;
      accepted = std::all_of(family.prototypes.begin(), family.prototypes.end(), [&](const auto& other) {
        return mean_squared_distance(candidate, other) > kPrototypeDistanceFloor;
      });
      if (accepted) family.prototypes.push_back(std::move(candidate));
    }
    if (!accepted) {
      fail(ErrorKind::validation, "could not draw " + std::to_string(params.num_prototypes) +
                                      " prototypes above the distance floor; lower the count or "
                                      "raise smoothness");
    }
  }
  return family;
}

void draw_sample(const std::vector<double>& prototype, const Dims& dims, double noise_sigma,
                 std::size_t jitter, Rng& rng, std::span<double> out) {
  const auto span = static_cast<std::uint64_t>(2 * jitter + 1);
  const auto h = static_cast<std::ptrdiff_t>(dims.height);
  const auto w = static_cast<std::ptrdiff_t>(dims.width);
  const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(rng.below(span)) - static_cast<std::ptrdiff_t>(jitter);
  const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(rng.below(span)) - static_cast<std::ptrdiff_t>(jitter);
  const std::size_t c = dims.channels;
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    const std::ptrdiff_t sy = ((y - dy) % h + h) % h;
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      const std::ptrdiff_t sx = ((x - dx) % w + w) % w;
      for (std::size_t ch = 0; ch < c; ++ch) {
        double v = prototype[static_cast<std::size_t>(sy * w + sx) * c + ch];
        if (noise_sigma > 0.0) v += noise_sigma * rng.normal();
        out[static_cast<std::size_t>(y * w + x) * c + ch] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
}

void DatasetSpec::validate() const {
  check_dims(family.dims);
  require(classes >= 2, ErrorKind::validation, "a dataset needs at least 2 classes");
  require(classes <= family.num_prototypes, ErrorKind::validation,
          "classes exceed the family's prototype count");
  require(samples_per_class >= 2, ErrorKind::validation,
          "samples_per_class must be at least 2 to split into train and test");
  require(std::isfinite(noise_sigma) && noise_sigma >= 0.0, ErrorKind::validation,
          "noise_sigma must be nonnegative");
  require(train_fraction > 0.0 && train_fraction < 1.0, ErrorKind::validation,
          "train_fraction must be in (0, 1)");
}

void LabeledDataset::validate() const {
  require(inputs.rows() == labels.size(), ErrorKind::validation, "dataset label count mismatch");
  require(inputs.empty() || inputs.cols() == dims.size(), ErrorKind::validation,
          "dataset row width does not match dims");
  require(inputs.all_finite(), ErrorKind::validation, "dataset contains non-finite inputs");
  for (std::size_t label : labels) {
    require(label < classes, ErrorKind::validation, "dataset label out of range");
  }
  normalization.validate(dims.channels);
}

DatasetSplit sample_dataset(const DatasetSpec& spec) {
  spec.validate();
  const PatternFamily family = make_family(spec.family);
  const Dims& dims = spec.family.dims;
  const std::size_t total = spec.classes * spec.samples_per_class;

  Tensor raw({total, dims.size()});
  std::vector<std::size_t> labels(total);
  Rng sampler(Rng::derive(spec.split_seed, kSampleStream));
  for (std::size_t c = 0; c < spec.classes; ++c) {
    for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
      const std::size_t idx = c * spec.samples_per_class + i;
      labels[idx] = c;
      draw_sample(family.prototypes[c], dims, spec.noise_sigma, spec.jitter_pixels, sampler,
                  raw.row(idx));
    }
  }

  auto train_per_class = static_cast<std::size_t>(
      std::llround(spec.train_fraction * static_cast<double>(spec.samples_per_class)));
  train_per_class = std::clamp<std::size_t>(train_per_class, 1, spec.samples_per_class - 1);

  DatasetSplit split;
  Rng splitter(Rng::derive(spec.split_seed, kSplitStream));
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::vector<std::size_t> members(spec.samples_per_class);
    std::iota(members.begin(), members.end(), c * spec.samples_per_class);
    splitter.shuffle(std::span<std::size_t>(members));
    std::sort(members.begin(), members.begin() + static_cast<std::ptrdiff_t>(train_per_class));
    std::sort(members.begin() + static_cast<std::ptrdiff_t>(train_per_class), members.end());
    split.train_indices.insert(split.train_indices.end(), members.begin(),
                               members.begin() + static_cast<std::ptrdiff_t>(train_per_class));
    split.test_indices.insert(split.test_indices.end(),
                              members.begin() + static_cast<std::ptrdiff_t>(train_per_class),
                              members.end());
  }

  const Tensor train_raw = raw.gather_rows(split.train_indices);
  const Tensor test_raw = raw.gather_rows(split.test_indices);
  const Normalization norm = channel_statistics(train_raw, dims.channels);

  auto build = [&](const Tensor& part_raw, const std::vector<std::size_t>& indices,
                   const char* part) {
    LabeledDataset d;
    d.dims = dims;
    d.classes = spec.classes;
    d.inputs = norm.apply(part_raw);
    d.labels.reserve(indices.size());
    for (std::size_t i : indices) d.labels.push_back(labels[i]);
    d.normalization = norm;
    d.family_seed = spec.family.seed;
    d.split_seed = spec.split_seed;
    d.part = part;
    return d;
  };
  split.train = build(train_raw, split.train_indices, "train");
  split.test = build(test_raw, split.test_indices, "test");
  return split;
}

std::size_t AttackerPool::victim_count() const {
  return static_cast<std::size_t>(
      std::count(source.victim_origin.begin(), source.victim_origin.end(), std::uint8_t{1}));
}

AttackerPool sample_pool(const DatasetSpec& victim, const FamilyParams& disjoint, std::size_t size,
                         double alpha, std::uint64_t seed, const PoolOptions& options) {
  victim.validate();
  require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::validation, "alpha must be in [0, 1]");
  require(disjoint.dims == victim.family.dims, ErrorKind::validation,
          "pool families have different dims: " + to_string(victim.family.dims) + " vs " +
              to_string(disjoint.dims));
  const auto victim_count = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(size)));

  std::vector<double> cumulative;
  if (!options.victim_class_weights.empty()) {
    require(options.victim_class_weights.size() == victim.classes, ErrorKind::validation,
            "victim_class_weights must have one entry per class");
    double total = 0.0;
    for (double w : options.victim_class_weights) {
      require(std::isfinite(w) && w >= 0.0, ErrorKind::validation, "class weights must be >= 0");
      total += w;
      cumulative.push_back(total);
    }
    require(total > 0.0, ErrorKind::validation, "class weights must not all be zero");
    for (double& c : cumulative) c /= total;
  }

  const double foreign_sigma = options.foreign_noise_sigma.value_or(victim.noise_sigma);
  require(std::isfinite(foreign_sigma) && foreign_sigma >= 0.0, ErrorKind::validation,
          "foreign noise sigma must be nonnegative");

  const Dims& dims = victim.family.dims;
  const PatternFamily victim_family = make_family(victim.family);
  const PatternFamily foreign_family =
      size > victim_count ? make_family(disjoint) : PatternFamily{disjoint, {}};

  Tensor raw({size, dims.size()});
  std::vector<std::uint8_t> flags(size, 0);
  Rng victim_rng(Rng::derive(seed, kPoolVictimStream));
  Rng foreign_rng(Rng::derive(seed, kPoolForeignStream));
  for (std::size_t i = 0; i < size; ++i) {
    if (i < victim_count) {
      std::size_t cls = 0;
      if (cumulative.empty()) {
        cls = static_cast<std::size_t>(victim_rng.below(victim.classes));
      } else {
        const double u = victim_rng.uniform();
        cls = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) -
                                       cumulative.begin());
        cls = std::min(cls, victim.classes - 1);
      }
      draw_sample(victim_family.prototypes[cls], dims, victim.noise_sigma, victim.jitter_pixels,
                  victim_rng, raw.row(i));
      flags[i] = 1;
    } else {
      const auto k = static_cast<std::size_t>(foreign_rng.below(foreign_family.prototypes.size()));
      draw_sample(foreign_family.prototypes[k], dims, foreign_sigma, victim.jitter_pixels,
                  foreign_rng, raw.row(i));
    }
  }

  std::vector<std::size_t> order(size);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng order_rng(Rng::derive(seed, kPoolOrderStream));
  order_rng.shuffle(std::span<std::size_t>(order));

  AttackerPool pool;
  pool.dims = dims;
  pool.inputs = raw.gather_rows(order);
  pool.alpha = alpha;
  pool.source.victim_family_seed = victim.family.seed;
  pool.source.disjoint_family_seed = disjoint.seed;
  pool.source.pool_seed = seed;
  pool.source.victim_origin.resize(size);
  for (std::size_t i = 0; i < size; ++i) pool.source.victim_origin[i] = flags[order[i]];
  return pool;
}

std::string serialize_dataset(const LabeledDataset& data) {
  data.validate();
  Container c;
  c.kind = "labeled";
  c.field("dims", to_string(data.dims))
      .field("count", std::to_string(data.size()))
      .field("classes", std::to_string(data.classes))
      .field("part", data.part.empty() ? "unspecified" : data.part)
      .field("family_seed", std::to_string(data.family_seed))
      .field("split_seed", std::to_string(data.split_seed))
      .field("norm_mean", join_doubles(data.normalization.mean))
      .field("norm_std", join_doubles(data.normalization.stddev));
  c.section("inputs", data.inputs.storage()).section("labels", labels_as_doubles(data.labels));
  return encode_container(c);
}

LabeledDataset deserialize_dataset(std::string_view bytes) {
  const Container c = decode_container(bytes, "labeled");
  LabeledDataset d;
  try {
    d.dims = parse_dims(c.get("dims"));
  } catch (const Error& e) {
    fail(ErrorKind::format, e.what());
  }
  const auto count = parse_u64(c.get("count"), "count");
  d.classes = parse_u64(c.get("classes"), "classes");
  d.part = c.get("part");
  d.family_seed = parse_u64(c.get("family_seed"), "family_seed");
  d.split_seed = parse_u64(c.get("split_seed"), "split_seed");
  d.normalization.mean = parse_double_list(c.get("norm_mean"));
  d.normalization.stddev = parse_double_list(c.get("norm_std"));
  const auto& inputs = c.data("inputs");
  const auto& labels = c.data("labels");
  if (inputs.size() != count * d.dims.size() || labels.size() != count) {
    fail(ErrorKind::format, "dataset sections do not match the declared count");
  }
  d.inputs = Tensor({count, d.dims.size()}, inputs);
  for (double v : labels) {
    if (!(v >= 0.0) || v != std::floor(v)) fail(ErrorKind::format, "label is not a nonnegative integer");
    d.labels.push_back(static_cast<std::size_t>(v));
  }
  try {
    d.validate();
  } catch (const Error& e) {
    fail(ErrorKind::format, std::string("inconsistent dataset file: ") + e.what());
  }
  return d;
}

std::string serialize_pool(const AttackerPool& pool) {
  Container c;
  c.kind = "pool";
  c.field("dims", to_string(pool.dims))
      .field("count", std::to_string(pool.size()))
      .field("alpha", format_double(pool.alpha))
      .field("victim_count", std::to_string(pool.victim_count()))
      .field("victim_family_seed", std::to_string(pool.source.victim_family_seed))
      .field("disjoint_family_seed", std::to_string(pool.source.disjoint_family_seed))
      .field("pool_seed", std::to_string(pool.source.pool_seed));
  c.section("inputs", pool.inputs.storage())
      .section("origin", std::vector<double>(pool.source.victim_origin.begin(),
                                             pool.source.victim_origin.end()));
  return encode_container(c);
}

AttackerPool deserialize_pool(std::string_view bytes) {
  const Container c = decode_container(bytes, "pool");
  AttackerPool pool;
  try {
    pool.dims = parse_dims(c.get("dims"));
  } catch (const Error& e) {
    fail(ErrorKind::format, e.what());
  }
  const auto count = parse_u64(c.get("count"), "count");
  pool.alpha = parse_double(c.get("alpha"), "alpha");
  pool.source.victim_family_seed = parse_u64(c.get("victim_family_seed"), "victim_family_seed");
  pool.source.disjoint_family_seed = parse_u64(c.get("disjoint_family_seed"), "disjoint_family_seed");
  pool.source.pool_seed = parse_u64(c.get("pool_seed"), "pool_seed");
  const auto& inputs = c.data("inputs");
  const auto& origin = c.data("origin");
  if (inputs.size() != count * pool.dims.size() || origin.size() != count) {
    fail(ErrorKind::format, "pool sections do not match the declared count");
  }
  pool.inputs = Tensor({count, pool.dims.size()}, inputs);
  for (double v : origin) {
    if (v != 0.0 && v != 1.0) fail(ErrorKind::format, "origin flag must be 0 or 1");
    pool.source.victim_origin.push_back(static_cast<std::uint8_t>(v));
  }
  if (pool.victim_count() != parse_u64(c.get("victim_count"), "victim_count")) {
    fail(ErrorKind::format, "victim_count does not match the origin flags");
  }
  return pool;
}

void save_dataset(const std::string& path, const LabeledDataset& data) {
  write_file(path, serialize_dataset(data));
}
LabeledDataset load_dataset(const std::string& path) { return deserialize_dataset(read_file(path)); }
void save_pool(const std::string& path, const AttackerPool& pool) {
  write_file(path, serialize_pool(pool));
}
AttackerPool load_pool(const std::string& path) { return deserialize_pool(read_file(path)); }

}  // namespace xfb
