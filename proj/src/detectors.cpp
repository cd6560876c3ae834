#include "xfb/detectors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "xfb/container.hpp"
#include "xfb/error.hpp"
#include "xfb/io.hpp"
#include "xfb/nn.hpp"
#include "xfb/rng.hpp"

namespace xfb {

namespace {

constexpr std::uint64_t kCvStream = 0x43564644ULL;        // "CVFD"
constexpr std::uint64_t kHoldoutStream = 0x484f4c44ULL;   // "HOLD"
constexpr std::string_view kScoreConvention = "higher_is_more_ood";

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r) {
    const auto row = t.row(r);
    for (std::size_t c = 0; c < t.cols(); ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
  }
  return m;
}

std::vector<double> to_vector(const Eigen::MatrixXd& m) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out.push_back(m(r, c));
  }
  return out;
}

Eigen::MatrixXd from_vector(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  require(v.size() == rows * cols, ErrorKind::format, "matrix section has the wrong size");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v[r * cols + c];
  }
  return m;
}

double sigmoid(double s) {
  if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

// log(1 + e^s), stable for large |s|.
double softplus(double s) { return s > 0.0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }

double logistic_objective(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                          double b, double lambda) {
  const Eigen::VectorXd s = (z * w).array() + b;
  double total = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) total += softplus(s(i)) - y(i) * s(i);
  return total / static_cast<double>(s.size()) + 0.5 * lambda * w.squaredNorm();
}

std::vector<double> normalized_domain_bounds(const Normalization& norm, std::size_t size, bool upper) {
  std::vector<double> out(size);
  const std::size_t c = norm.channels();
  for (std::size_t i = 0; i < size; ++i) out[i] = upper ? norm.upper(i % c) : norm.lower(i % c);
  return out;
}

// Split [0, n) into (fit, held-out) index lists, seeded; both sorted.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n, double fraction,
                                                                            std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(Rng::derive(seed, kHoldoutStream));
  rng.shuffle(std::span<std::size_t>(order));
  auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  held = std::clamp<std::size_t>(held, 1, n - 1);
  std::vector<std::size_t> fit(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  std::vector<std::size_t> hold(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  std::sort(fit.begin(), fit.end());
  std::sort(hold.begin(), hold.end());
  return {fit, hold};
}

}  // namespace

std::string_view to_string(DetectorKind kind) {
  switch (kind) {
    case DetectorKind::binary: return "binary";
    case DetectorKind::msp: return "msp";
    case DetectorKind::odin: return "odin";
    case DetectorKind::mahalanobis: return "mahalanobis";
  }
  return "?";
}

DetectorKind parse_detector_kind(std::string_view text) {
  if (text == "binary") return DetectorKind::binary;
  if (text == "msp") return DetectorKind::msp;
  if (text == "odin") return DetectorKind::odin;
  if (text == "mahalanobis") return DetectorKind::mahalanobis;
  fail(ErrorKind::validation, "unknown detector kind '" + std::string(text) + "'");
}

Tensor embed(const Model& backbone, const Tensor& raw_inputs) {
  require(raw_inputs.empty() || raw_inputs.cols() == backbone.input_size(), ErrorKind::dimension,
          "embedding input width " + std::to_string(raw_inputs.cols()) + " does not match backbone input " +
              std::to_string(backbone.input_size()));
  require(!backbone.normalization.empty(), ErrorKind::validation, "backbone has no normalization attached");
  return penultimate(backbone, backbone.normalization.apply(raw_inputs));
}

void save_embedding(const std::string& path, const Tensor& features, const std::string& backbone_digest) {
  Container c;
  c.kind = "embedding";
  c.field("count", std::to_string(features.rows()))
      .field("dim", std::to_string(features.cols()))
      .field("backbone_digest", backbone_digest)
      .section("features", {features.values().begin(), features.values().end()});
  write_file(path, encode_container(c));
}

Tensor load_embedding(const std::string& path, const std::string& backbone_digest) {
  const Container c = decode_container(read_file(path), "embedding");
  require(c.get("backbone_digest") == backbone_digest, ErrorKind::validation,
          "cached embedding was computed with a different backbone");
  const auto rows = parse_u64(c.get("count"), "count");
  const auto cols = parse_u64(c.get("dim"), "dim");
  return Tensor({rows, cols}, c.data("features"));
}

// ---- logistic regression ---------------------------------------------------

double LogisticModel::decision(std::span<const double> z) const {
  require(z.size() == weights.size(), ErrorKind::dimension, "feature width mismatch");
  double s = bias;
  for (std::size_t i = 0; i < z.size(); ++i) s += weights[i] * z[i];
  return s;
}

double LogisticModel::probability(std::span<const double> z) const { return sigmoid(decision(z)); }

LogisticModel fit_logistic(const Eigen::MatrixXd& z, const std::vector<int>& y, double lambda,
                           const LogisticOptions& options) {
  require(z.rows() > 0 && static_cast<std::size_t>(z.rows()) == y.size(), ErrorKind::dimension,
          "logistic regression needs one label per row");
  require(std::isfinite(lambda) && lambda >= 0.0, ErrorKind::parameter, "lambda must be >= 0");
  const Eigen::Index n = z.rows();
  const Eigen::Index d = z.cols();
  const auto nd = static_cast<double>(n);
  Eigen::VectorXd yv(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    require(y[static_cast<std::size_t>(i)] == 0 || y[static_cast<std::size_t>(i)] == 1, ErrorKind::validation,
            "logistic labels must be 0 or 1");
    yv(i) = y[static_cast<std::size_t>(i)];
  }

  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  double b = 0.0;
  double objective = logistic_objective(z, yv, w, b, lambda);
  LogisticModel model;
  model.lambda = lambda;
  std::size_t iter = 0;
  for (; iter < options.max_iterations; ++iter) {
    const Eigen::VectorXd s = (z * w).array() + b;
    Eigen::VectorXd p(n);
    Eigen::VectorXd curvature(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      p(i) = sigmoid(s(i));
      curvature(i) = p(i) * (1.0 - p(i));
    }
    const Eigen::VectorXd residual = p - yv;
    Eigen::VectorXd grad(d + 1);
    grad.head(d) = z.transpose() * residual / nd + lambda * w;
    grad(d) = residual.sum() / nd;
    if (grad.norm() < options.tolerance) {
      model.converged = true;
      break;
    }

    Eigen::MatrixXd hessian(d + 1, d + 1);
    const Eigen::MatrixXd weighted = z.array().colwise() * curvature.array();
    hessian.topLeftCorner(d, d) = z.transpose() * weighted / nd;
    hessian.topLeftCorner(d, d).diagonal().array() += lambda;
    const Eigen::VectorXd cross = weighted.colwise().sum().transpose() / nd;
    hessian.topRightCorner(d, 1) = cross;
    hessian.bottomLeftCorner(1, d) = cross.transpose();
    hessian(d, d) = curvature.sum() / nd;
    // Tiny ridge keeps the solve defined when the data are separable and
    // lambda is 0.
    hessian.diagonal().array() += 1e-12;
    Eigen::VectorXd step = hessian.ldlt().solve(grad);
    if (!step.allFinite()) step = grad;

    // Backtracking (Armijo) on the objective.
    double t = 1.0;
    const double slope = grad.dot(step);
    bool moved = false;
    for (int halving = 0; halving < 50; ++halving) {
      const Eigen::VectorXd w_new = w - t * step.head(d);
      const double b_new = b - t * step(d);
      const double candidate = logistic_objective(z, yv, w_new, b_new, lambda);
      if (candidate <= objective - 1e-4 * t * slope) {
        w = w_new;
        b = b_new;
        objective = candidate;
        moved = true;
        break;
      }
      t *= 0.5;
    }
    if (!moved) {
      // No descent possible at float64 resolution: treat as converged when the
      // gradient is already tiny, otherwise stop and keep the best iterate.
      model.converged = grad.norm() < std::sqrt(options.tolerance);
      break;
    }
  }
  model.iterations = iter;
  model.weights.assign(w.data(), w.data() + d);
  model.bias = b;
  return model;
}

Standardizer Standardizer::fit(const Eigen::MatrixXd& x) {
  require(x.rows() > 0, ErrorKind::validation, "cannot standardize an empty matrix");
  Standardizer s;
  const auto n = static_cast<double>(x.rows());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const double mean = x.col(c).sum() / n;
    const double var = (x.col(c).array() - mean).square().sum() / n;
    const double sd = std::sqrt(var);
    s.mean.push_back(mean);
    s.scale.push_back(sd > 1e-12 ? sd : 1.0);
  }
  return s;
}

Eigen::MatrixXd Standardizer::apply(const Eigen::MatrixXd& x) const {
  require(static_cast<std::size_t>(x.cols()) == mean.size(), ErrorKind::dimension, "feature width mismatch");
  Eigen::MatrixXd z = x;
  for (Eigen::Index c = 0; c < z.cols(); ++c) {
    z.col(c) = (z.col(c).array() - mean[static_cast<std::size_t>(c)]) / scale[static_cast<std::size_t>(c)];
  }
  return z;
}

std::vector<double> Standardizer::apply(std::span<const double> row) const {
  require(row.size() == mean.size(), ErrorKind::dimension, "feature width mismatch");
  std::vector<double> z(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) z[i] = (row[i] - mean[i]) / scale[i];
  return z;
}

CrossValidation cross_validate(const Eigen::MatrixXd& z, const std::vector<int>& y,
                               std::span<const double> lambdas, std::size_t folds, std::uint64_t seed,
                               const LogisticOptions& options) {
  const auto n = static_cast<std::size_t>(z.rows());
  require(!lambdas.empty(), ErrorKind::parameter, "lambda grid is empty");
  require(folds >= 2 && folds <= n, ErrorKind::parameter,
          "need between 2 and " + std::to_string(n) + " folds, got " + std::to_string(folds));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(Rng::derive(seed, kCvStream));
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::size_t> fold_of(n);
  for (std::size_t p = 0; p < n; ++p) fold_of[order[p]] = p % folds;
  return cross_validate_folds(z, y, lambdas, fold_of, options);
}

CrossValidation cross_validate_folds(const Eigen::MatrixXd& z, const std::vector<int>& y,
                                     std::span<const double> lambdas, const std::vector<std::size_t>& fold_of,
                                     const LogisticOptions& options) {
  const auto n = static_cast<std::size_t>(z.rows());
  require(!lambdas.empty(), ErrorKind::parameter, "lambda grid is empty");
  require(fold_of.size() == n && y.size() == n, ErrorKind::dimension, "one fold index and label per row required");
  const std::size_t folds = n == 0 ? 0 : *std::max_element(fold_of.begin(), fold_of.end()) + 1;
  std::vector<std::size_t> fold_size(folds, 0);
  for (std::size_t f : fold_of) ++fold_size[f];
  for (std::size_t f = 0; f < folds; ++f) {
    require(fold_size[f] > 0, ErrorKind::parameter, "fold " + std::to_string(f) + " is empty");
  }
  require(folds >= 2, ErrorKind::parameter, "need at least 2 folds");

  CrossValidation cv;
  cv.lambdas.assign(lambdas.begin(), lambdas.end());
  for (double lambda : lambdas) {
    double sum = 0.0;
    for (std::size_t f = 0; f < folds; ++f) {
      std::vector<Eigen::Index> train_rows;
      std::vector<Eigen::Index> valid_rows;
      for (std::size_t i = 0; i < n; ++i) {
        (fold_of[i] == f ? valid_rows : train_rows).push_back(static_cast<Eigen::Index>(i));
      }
      Eigen::MatrixXd zt(static_cast<Eigen::Index>(train_rows.size()), z.cols());
      std::vector<int> yt;
      for (std::size_t k = 0; k < train_rows.size(); ++k) {
        zt.row(static_cast<Eigen::Index>(k)) = z.row(train_rows[k]);
        yt.push_back(y[static_cast<std::size_t>(train_rows[k])]);
      }
      const LogisticModel m = fit_logistic(zt, yt, lambda, options);
      std::size_t correct = 0;
      for (Eigen::Index r : valid_rows) {
        std::vector<double> row(static_cast<std::size_t>(z.cols()));
        for (Eigen::Index c = 0; c < z.cols(); ++c) row[static_cast<std::size_t>(c)] = z(r, c);
        const int predicted = m.probability(row) >= 0.5 ? 1 : 0;
        if (predicted == y[static_cast<std::size_t>(r)]) ++correct;
      }
      sum += static_cast<double>(correct) / static_cast<double>(valid_rows.size());
    }
    cv.mean_accuracy.push_back(sum / static_cast<double>(folds));
  }

  std::size_t best = 0;
  for (std::size_t i = 1; i < cv.lambdas.size(); ++i) {
    const double a = cv.mean_accuracy[i];
    const double b = cv.mean_accuracy[best];
    if (a > b || (a == b && cv.lambdas[i] > cv.lambdas[best])) best = i;
  }
  cv.chosen_lambda = cv.lambdas[best];
  return cv;
}

BinaryFit fit_binary(const Tensor& in_features, const Tensor& out_features, std::span<const double> lambdas,
                     std::size_t folds, std::uint64_t seed, const LogisticOptions& options) {
  require(in_features.rows() > 0 && out_features.rows() > 0, ErrorKind::validation,
          "binary detector needs both in- and out-of-distribution features");
  require(in_features.cols() == out_features.cols(), ErrorKind::dimension, "feature widths differ");
  const std::size_t n_in = in_features.rows();
  Eigen::MatrixXd x(static_cast<Eigen::Index>(n_in + out_features.rows()),
                    static_cast<Eigen::Index>(in_features.cols()));
  x.topRows(static_cast<Eigen::Index>(n_in)) = to_eigen(in_features);
  x.bottomRows(static_cast<Eigen::Index>(out_features.rows())) = to_eigen(out_features);
  std::vector<int> y(n_in, 0);
  y.resize(n_in + out_features.rows(), 1);

  BinaryFit fit;
  fit.standardizer = Standardizer::fit(x);
  const Eigen::MatrixXd z = fit.standardizer.apply(x);
  fit.cv = cross_validate(z, y, lambdas, folds, seed, options);
  fit.logistic = fit_logistic(z, y, fit.cv.chosen_lambda, options);
  return fit;
}

// ---- score-based comparators -----------------------------------------------

double score_msp(const Model& victim, std::span<const double> x) {
  require(x.size() == victim.input_size(), ErrorKind::dimension, "input width mismatch");
  const Tensor batch({1, x.size()}, std::vector<double>(x.begin(), x.end()));
  const Tensor logits = forward(victim, batch);
  const auto probs = softmax(logits.row(0), 1.0);
  return 1.0 - *std::max_element(probs.begin(), probs.end());
}

double score_odin(const Model& victim, std::span<const double> x, double temperature, double epsilon,
                  std::span<const double> lower, std::span<const double> upper) {
  require(std::isfinite(temperature) && temperature > 0.0, ErrorKind::parameter, "ODIN temperature must be > 0");
  require(std::isfinite(epsilon) && epsilon >= 0.0, ErrorKind::parameter, "ODIN epsilon must be >= 0");
  require(x.size() == victim.input_size() && lower.size() == x.size() && upper.size() == x.size(),
          ErrorKind::dimension, "input width mismatch");
  std::vector<double> perturbed(x.begin(), x.end());
  if (epsilon > 0.0) {
    // Move against the gradient of the loss -log S_max, i.e. along the sign of
    // d log S_max / dx.
    const auto g = grad_input(victim, x, OutputSelector::predicted(), temperature);
    for (std::size_t i = 0; i < perturbed.size(); ++i) {
      const double sign = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      perturbed[i] = std::clamp(perturbed[i] + epsilon * sign, lower[i], upper[i]);
    }
  }
  const std::size_t n = perturbed.size();
  const Tensor batch({1, n}, std::move(perturbed));
  const Tensor logits = forward(victim, batch);
  const auto probs = softmax(logits.row(0), temperature);
  return 1.0 - *std::max_element(probs.begin(), probs.end());
}

void MahalanobisParams::factorize() {
  llt_.compute(covariance);
  require(llt_.info() == Eigen::Success, ErrorKind::numeric,
          "Mahalanobis covariance is not positive definite; use a ridge gamma > 0");
}

double MahalanobisParams::score(std::span<const double> feature) const {
  require(feature.size() == static_cast<std::size_t>(means.cols()), ErrorKind::dimension,
          "feature width mismatch");
  require(llt_.rows() == covariance.rows(), ErrorKind::runtime, "Mahalanobis parameters not factorized");
  const Eigen::Map<const Eigen::VectorXd> f(feature.data(), static_cast<Eigen::Index>(feature.size()));
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < means.rows(); ++c) {
    const Eigen::VectorXd diff = f - means.row(c).transpose();
    const Eigen::VectorXd solved = llt_.matrixL().solve(diff);
    best = std::min(best, solved.squaredNorm());
  }
  return best;
}

MahalanobisParams fit_mahalanobis(const Tensor& features, std::span<const std::size_t> labels,
                                  std::size_t classes, std::optional<double> gamma) {
  require(features.rows() == labels.size(), ErrorKind::dimension, "one label per feature row required");
  require(classes >= 1, ErrorKind::validation, "need at least one class");
  const auto d = static_cast<Eigen::Index>(features.cols());
  std::vector<std::size_t> counts(classes, 0);
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(classes), d);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] < classes, ErrorKind::validation, "label out of range");
    ++counts[labels[i]];
    const auto row = features.row(i);
    for (Eigen::Index c = 0; c < d; ++c) means(static_cast<Eigen::Index>(labels[i]), c) += row[static_cast<std::size_t>(c)];
  }
  for (std::size_t k = 0; k < classes; ++k) {
    require(counts[k] >= 2, ErrorKind::validation,
            "class " + std::to_string(k) + " has " + std::to_string(counts[k]) + " samples; need at least 2");
    means.row(static_cast<Eigen::Index>(k)) /= static_cast<double>(counts[k]);
  }
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = features.row(i);
    Eigen::VectorXd diff(d);
    for (Eigen::Index c = 0; c < d; ++c) diff(c) = row[static_cast<std::size_t>(c)] - means(static_cast<Eigen::Index>(labels[i]), c);
    cov.noalias() += diff * diff.transpose();
  }
  cov /= static_cast<double>(labels.size());

  MahalanobisParams p;
  p.gamma = gamma.value_or(1e-6 * cov.trace() / static_cast<double>(d));
  require(std::isfinite(p.gamma) && p.gamma >= 0.0, ErrorKind::parameter, "gamma must be >= 0");
  cov.diagonal().array() += p.gamma;
  p.means = std::move(means);
  p.covariance = std::move(cov);
  p.factorize();
  // Positive definite in name only is not enough: reject near-singular
  // matrices whose inverse would be dominated by rounding.
  const Eigen::VectorXd diag = p.covariance.llt().matrixL().toDenseMatrix().diagonal();
  const double rcond = (diag.minCoeff() * diag.minCoeff()) / (diag.maxCoeff() * diag.maxCoeff());
  require(rcond > 1e-14, ErrorKind::numeric,
          "Mahalanobis covariance is numerically singular; use a ridge gamma > 0");
  return p;
}

// ---- thresholds and metrics ------------------------------------------------

double calibrate_threshold(std::span<const double> in_scores, double target_tnr) {
  require(!in_scores.empty(), ErrorKind::validation, "no in-distribution scores to calibrate on");
  require(std::isfinite(target_tnr) && target_tnr > 0.0 && target_tnr <= 1.0, ErrorKind::parameter,
          "target TNR must be in (0, 1]");
  std::vector<double> sorted(in_scores.begin(), in_scores.end());
  for (double s : sorted) require(std::isfinite(s), ErrorKind::numeric, "non-finite detector score");
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double above_max = std::nextafter(sorted.back(), std::numeric_limits<double>::infinity());
  if (target_tnr == 1.0) return above_max;

  const auto k = static_cast<std::size_t>(std::ceil(target_tnr * static_cast<double>(n) - 1e-9));
  if (k >= n) {
    fail(ErrorKind::validation,
         "target TNR " + format_double(target_tnr) + " is not reachable below the maximum score with " +
             std::to_string(n) + " in-distribution scores (resolution 1/" + std::to_string(n) + "); need at least " +
             std::to_string(static_cast<std::size_t>(std::ceil(1.0 / (1.0 - target_tnr) - 1e-9))));
  }
  if (k == 0) return sorted.front();
  // fraction(score < t) >= k / n requires t > sorted[k - 1].
  const auto it = std::upper_bound(sorted.begin(), sorted.end(), sorted[k - 1]);
  return it == sorted.end() ? above_max : *it;
}

DetectionMetrics evaluate_scores(std::span<const double> in_scores, std::span<const double> out_scores,
                                 double threshold) {
  require(!in_scores.empty() && !out_scores.empty(), ErrorKind::validation,
          "evaluation needs in- and out-of-distribution samples");
  DetectionMetrics m;
  m.threshold = threshold;
  m.in_total = in_scores.size();
  m.out_total = out_scores.size();
  for (double s : in_scores) m.in_passed += s < threshold ? 1 : 0;
  for (double s : out_scores) m.out_flagged += s >= threshold ? 1 : 0;
  m.tpr = static_cast<double>(m.out_flagged) / static_cast<double>(m.out_total);
  m.tnr = static_cast<double>(m.in_passed) / static_cast<double>(m.in_total);
  return m;
}

// ---- fitted detector -------------------------------------------------------

std::string Detector::model_digest() const { return sha256_hex(serialize_model(model)); }

double Detector::score(std::span<const double> raw) const {
  require(raw.size() == model.input_size(), ErrorKind::dimension,
          "detector input width " + std::to_string(raw.size()) + " != " + std::to_string(model.input_size()));
  std::vector<double> x(raw.begin(), raw.end());
  model.normalization.apply_inplace(x);
  switch (kind) {
    case DetectorKind::msp:
      return score_msp(model, x);
    case DetectorKind::odin: {
      const auto lower = normalized_domain_bounds(model.normalization, x.size(), false);
      const auto upper = normalized_domain_bounds(model.normalization, x.size(), true);
      return score_odin(model, x, temperature, epsilon, lower, upper);
    }
    case DetectorKind::binary:
    case DetectorKind::mahalanobis: {
      const std::size_t n = x.size();
      const Tensor f = penultimate(model, Tensor({1, n}, std::move(x)));
      if (kind == DetectorKind::mahalanobis) return mahalanobis.score(f.row(0));
      return binary.logistic.probability(binary.standardizer.apply(f.row(0)));
    }
  }
  fail(ErrorKind::runtime, "unknown detector kind");
}

std::vector<double> Detector::scores(const Tensor& raw) const {
  require(raw.empty() || raw.cols() == model.input_size(), ErrorKind::dimension, "detector input width mismatch");
  std::vector<double> out;
  out.reserve(raw.rows());
  if (kind == DetectorKind::binary || kind == DetectorKind::mahalanobis) {
    // Batched embedding; identical values to the per-row path.
    constexpr std::size_t kChunk = 256;
    for (std::size_t start = 0; start < raw.rows(); start += kChunk) {
      const std::size_t end = std::min(raw.rows(), start + kChunk);
      std::vector<std::size_t> idx(end - start);
      std::iota(idx.begin(), idx.end(), start);
      const Tensor f = embed(model, raw.gather_rows(idx));
      for (std::size_t r = 0; r < f.rows(); ++r) {
        out.push_back(kind == DetectorKind::mahalanobis
                          ? mahalanobis.score(f.row(r))
                          : binary.logistic.probability(binary.standardizer.apply(f.row(r))));
      }
    }
    return out;
  }
  for (std::size_t r = 0; r < raw.rows(); ++r) out.push_back(score(raw.row(r)));
  return out;
}

Detector fit_detector(DetectorKind kind, const Model& model, const Tensor& in_raw,
                      std::span<const std::size_t> in_labels, const Tensor& out_raw,
                      const DetectorFitOptions& options) {
  model.validate();
  require(!model.normalization.empty(), ErrorKind::validation, "detector model has no normalization attached");
  require(in_raw.rows() >= 2, ErrorKind::validation, "need at least 2 in-distribution samples");
  require(in_raw.cols() == model.input_size() && (out_raw.empty() || out_raw.cols() == model.input_size()),
          ErrorKind::dimension, "sample width does not match the model input");
  require(options.calibration_fraction > 0.0 && options.calibration_fraction < 1.0, ErrorKind::parameter,
          "calibration fraction must be in (0, 1)");

  Detector det;
  det.kind = kind;
  det.model = model;
  det.target_tnr = options.target_tnr;
  const auto [fit_rows, calib_rows] = holdout_split(in_raw.rows(), options.calibration_fraction, options.seed);
  const Tensor in_fit = in_raw.gather_rows(fit_rows);
  const Tensor in_calib = in_raw.gather_rows(calib_rows);

  switch (kind) {
    case DetectorKind::binary: {
      require(out_raw.rows() > 0, ErrorKind::validation, "binary detector needs out-of-distribution samples");
      det.binary = fit_binary(embed(model, in_fit), embed(model, out_raw), options.lambdas, options.folds,
                              options.seed);
      break;
    }
    case DetectorKind::msp:
      break;
    case DetectorKind::odin: {
      require(out_raw.rows() >= 2, ErrorKind::validation, "ODIN epsilon selection needs out-of-distribution samples");
      require(!options.odin_epsilons.empty(), ErrorKind::parameter, "ODIN epsilon grid is empty");
      det.temperature = options.odin_temperature;
      // Tune epsilon on held-out in rows and the first half of the out rows:
      // best TPR at the target TNR, ties to the smaller epsilon.
      std::vector<std::size_t> half(out_raw.rows() / 2);
      std::iota(half.begin(), half.end(), std::size_t{0});
      const Tensor out_tune = out_raw.gather_rows(half);
      double best_tpr = -1.0;
      double best_eps = options.odin_epsilons.front();
      for (double eps : options.odin_epsilons) {
        det.epsilon = eps;
        const auto in_s = det.scores(in_calib);
        const double t = calibrate_threshold(in_s, options.target_tnr);
        const double tpr = evaluate_scores(in_s, det.scores(out_tune), t).tpr;
        if (tpr > best_tpr) {
          best_tpr = tpr;
          best_eps = eps;
        }
      }
      det.epsilon = best_eps;
      break;
    }
    case DetectorKind::mahalanobis: {
      require(in_labels.size() == in_raw.rows(), ErrorKind::validation, "mahalanobis needs labels for in rows");
      std::vector<std::size_t> labels;
      for (std::size_t r : fit_rows) labels.push_back(in_labels[r]);
      det.mahalanobis = fit_mahalanobis(embed(model, in_fit), labels, model.classes(), options.mahalanobis_gamma);
      break;
    }
  }

  if (kind == DetectorKind::binary && options.fixed_threshold) {
    det.threshold = 0.5;
    det.threshold_mode = "fixed";
  } else {
    det.threshold = calibrate_threshold(det.scores(in_calib), options.target_tnr);
    det.threshold_mode = "calibrated";
  }
  return det;
}

DetectionMetrics evaluate(const Detector& detector, const Tensor& in_raw, const Tensor& out_raw) {
  return evaluate_scores(detector.scores(in_raw), detector.scores(out_raw), detector.threshold);
}

// ---- detector file -----------------------------------------------------------

std::string serialize_detector(const Detector& d) {
  Container c;
  c.kind = "detector";
  c.field("detector_kind", std::string(to_string(d.kind)))
      .field("score_convention", std::string(kScoreConvention))
      .field("threshold", format_double(d.threshold))
      .field("threshold_mode", d.threshold_mode)
      .field("target_tnr", format_double(d.target_tnr))
      .field("model_role", d.kind == DetectorKind::binary ? "backbone" : "victim")
      .field("model_digest", d.model_digest())
      .field("model_arch", d.model.arch.to_text())
      .field("model_seed", std::to_string(d.model.seed))
      .field("model_trained_epochs", std::to_string(d.model.trained_epochs))
      .field("model_norm_mean", join_doubles(d.model.normalization.mean))
      .field("model_norm_std", join_doubles(d.model.normalization.stddev));
  c.section("model_params", d.model.params);
  switch (d.kind) {
    case DetectorKind::binary:
      c.field("lambda", format_double(d.binary.logistic.lambda))
          .field("converged", d.binary.logistic.converged ? "true" : "false")
          .field("iterations", std::to_string(d.binary.logistic.iterations))
          .field("cv_lambdas", join_doubles(d.binary.cv.lambdas))
          .field("cv_accuracy", join_doubles(d.binary.cv.mean_accuracy))
          .field("bias", format_double(d.binary.logistic.bias));
      c.section("weights", d.binary.logistic.weights)
          .section("feature_mean", d.binary.standardizer.mean)
          .section("feature_scale", d.binary.standardizer.scale);
      break;
    case DetectorKind::msp:
      break;
    case DetectorKind::odin:
      c.field("temperature", format_double(d.temperature)).field("epsilon", format_double(d.epsilon));
      break;
    case DetectorKind::mahalanobis:
      c.field("gamma", format_double(d.mahalanobis.gamma))
          .field("classes", std::to_string(d.mahalanobis.means.rows()))
          .field("dim", std::to_string(d.mahalanobis.means.cols()));
      c.section("means", to_vector(d.mahalanobis.means)).section("covariance", to_vector(d.mahalanobis.covariance));
      break;
  }
  return encode_container(c);
}

Detector deserialize_detector(std::string_view bytes) {
  const Container c = decode_container(bytes, "detector");
  require(c.get("score_convention") == kScoreConvention, ErrorKind::format, "unsupported score convention");
  Detector d;
  d.kind = parse_detector_kind(c.get("detector_kind"));
  d.threshold = parse_double(c.get("threshold"), "threshold");
  d.threshold_mode = c.get("threshold_mode");
  d.target_tnr = parse_double(c.get("target_tnr"), "target_tnr");
  d.model.arch = ArchitectureSpec::parse(c.get("model_arch"));
  d.model.seed = parse_u64(c.get("model_seed"), "model_seed");
  d.model.trained_epochs = parse_u64(c.get("model_trained_epochs"), "model_trained_epochs");
  d.model.normalization.mean = parse_double_list(c.get("model_norm_mean"));
  d.model.normalization.stddev = parse_double_list(c.get("model_norm_std"));
  d.model.params = c.data("model_params");
  d.model.validate();
  require(d.model_digest() == c.get("model_digest"), ErrorKind::format,
          "detector model digest does not match its embedded parameters");
  switch (d.kind) {
    case DetectorKind::binary:
      d.binary.logistic.lambda = parse_double(c.get("lambda"), "lambda");
      d.binary.logistic.converged = c.get("converged") == "true";
      d.binary.logistic.iterations = parse_u64(c.get("iterations"), "iterations");
      d.binary.logistic.bias = parse_double(c.get("bias"), "bias");
      d.binary.cv.lambdas = parse_double_list(c.get("cv_lambdas"));
      d.binary.cv.mean_accuracy = parse_double_list(c.get("cv_accuracy"));
      d.binary.cv.chosen_lambda = d.binary.logistic.lambda;
      d.binary.logistic.weights = c.data("weights");
      d.binary.standardizer.mean = c.data("feature_mean");
      d.binary.standardizer.scale = c.data("feature_scale");
      require(d.binary.logistic.weights.size() == d.binary.standardizer.mean.size() &&
                  d.binary.standardizer.mean.size() == d.binary.standardizer.scale.size(),
              ErrorKind::format, "binary detector sections disagree in width");
      break;
    case DetectorKind::msp:
      break;
    case DetectorKind::odin:
      d.temperature = parse_double(c.get("temperature"), "temperature");
      d.epsilon = parse_double(c.get("epsilon"), "epsilon");
      break;
    case DetectorKind::mahalanobis: {
      const auto classes = parse_u64(c.get("classes"), "classes");
      const auto dim = parse_u64(c.get("dim"), "dim");
      d.mahalanobis.gamma = parse_double(c.get("gamma"), "gamma");
      d.mahalanobis.means = from_vector(c.data("means"), classes, dim);
      d.mahalanobis.covariance = from_vector(c.data("covariance"), dim, dim);
      d.mahalanobis.factorize();
      break;
    }
  }
  return d;
}

void save_detector(const std::string& path, const Detector& detector) {
  write_file(path, serialize_detector(detector));
}

Detector load_detector(const std::string& path) { return deserialize_detector(read_file(path)); }

}  // namespace xfb
