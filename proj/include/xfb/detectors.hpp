#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "xfb/model.hpp"
#include "xfb/tensor.hpp"

namespace xfb {

enum class DetectorKind { binary, msp, odin, mahalanobis };

std::string_view to_string(DetectorKind kind);
DetectorKind parse_detector_kind(std::string_view text);

// Penultimate activations of `backbone` for raw (pixel-domain) inputs; the
// backbone's own normalization is applied first.
Tensor embed(const Model& backbone, const Tensor& raw_inputs);
void save_embedding(const std::string& path, const Tensor& features, const std::string& backbone_digest);
Tensor load_embedding(const std::string& path, const std::string& backbone_digest);

// ---- logistic regression ---------------------------------------------------

// Objective: mean_i [log(1 + e^s_i) - y_i s_i] + (lambda / 2) |w|^2 with
// s = w . z + b on standardized features z; the bias is not penalized.
// Solved by damped Newton iterations until |grad| < tolerance.
struct LogisticModel {
  std::vector<double> weights;
  double bias = 0.0;
  double lambda = 0.0;
  bool converged = false;
  std::size_t iterations = 0;

  double decision(std::span<const double> z) const;  // w . z + b
  double probability(std::span<const double> z) const;
};

struct LogisticOptions {
  double tolerance = 1e-6;
  std::size_t max_iterations = 100;
};

// y[i] is 0 (in-distribution) or 1 (out-of-distribution).
LogisticModel fit_logistic(const Eigen::MatrixXd& z, const std::vector<int>& y, double lambda,
                           const LogisticOptions& options = {});

// Per-column mean and scale (population std, 1 where a column is constant).
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const Eigen::MatrixXd& x);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const;
  std::vector<double> apply(std::span<const double> row) const;
};

inline const std::vector<double> kDefaultLambdaGrid = {1e-4, 1e-3, 1e-2, 1e-1, 1.0};

struct CrossValidation {
  std::vector<double> lambdas;
  std::vector<double> mean_accuracy;  // one per lambda
  double chosen_lambda = 0.0;
};

// k-fold CV over already standardized rows. Rows are permuted by `seed`;
// row at permuted position p goes to fold p % folds. Highest mean validation
// accuracy wins; exact ties go to the larger lambda.
CrossValidation cross_validate(const Eigen::MatrixXd& z, const std::vector<int>& y,
                               std::span<const double> lambdas, std::size_t folds, std::uint64_t seed,
                               const LogisticOptions& options = {});
// Same with an explicit fold index per row (0 .. folds-1, every fold non-empty).
CrossValidation cross_validate_folds(const Eigen::MatrixXd& z, const std::vector<int>& y,
                                     std::span<const double> lambdas, const std::vector<std::size_t>& fold_of,
                                     const LogisticOptions& options = {});

struct BinaryFit {
  Standardizer standardizer;
  LogisticModel logistic;
  CrossValidation cv;
};

BinaryFit fit_binary(const Tensor& in_features, const Tensor& out_features,
                     std::span<const double> lambdas = kDefaultLambdaGrid, std::size_t folds = 10,
                     std::uint64_t seed = 0, const LogisticOptions& options = {});

// ---- score-based comparators -----------------------------------------------

// 1 - max softmax; x is a normalized input.
double score_msp(const Model& victim, std::span<const double> x);

// One signed-gradient step of size epsilon that raises the temperature-scaled
// max-softmax, clamped to [lower, upper] per channel, then 1 - max softmax at T.
double score_odin(const Model& victim, std::span<const double> x, double temperature, double epsilon,
                  std::span<const double> lower, std::span<const double> upper);

inline const std::vector<double> kDefaultOdinEpsilons = {0.0, 0.0005, 0.0014, 0.002};
inline constexpr double kDefaultOdinTemperature = 1000.0;

struct MahalanobisParams {
  Eigen::MatrixXd means;       // classes x dim
  Eigen::MatrixXd covariance;  // dim x dim, ridge already added
  double gamma = 0.0;

  double score(std::span<const double> feature) const;
  void factorize();  // must be called after means/covariance change

 private:
  Eigen::LLT<Eigen::MatrixXd> llt_;
};

// Tied covariance (1/N) sum (f - mu_c)(f - mu_c)^T + gamma I. An unset gamma
// means 1e-6 * trace / dim. Numeric error when the result is not positive
// definite.
MahalanobisParams fit_mahalanobis(const Tensor& features, std::span<const std::size_t> labels,
                                  std::size_t classes, std::optional<double> gamma = std::nullopt);

// ---- thresholds and metrics ------------------------------------------------

// Smallest score value t with fraction(in_scores < t) >= target_tnr. With
// sorted scores s and k = ceil(target * N), t = s[k] unless duplicates force
// the next larger value; target 1 gives the next double above the maximum.
// When target < 1 but k reaches N, the sample is too small to express the
// target and a validation error reports the resolution.
double calibrate_threshold(std::span<const double> in_scores, double target_tnr);

struct DetectionMetrics {
  double tpr = 0.0;
  double tnr = 0.0;
  double threshold = 0.0;
  std::size_t out_flagged = 0;
  std::size_t out_total = 0;
  std::size_t in_passed = 0;
  std::size_t in_total = 0;
};

// Flagged means score >= threshold.
DetectionMetrics evaluate_scores(std::span<const double> in_scores, std::span<const double> out_scores,
                                 double threshold);

// ---- fitted detector -------------------------------------------------------

struct Detector {
  DetectorKind kind = DetectorKind::msp;
  Model model;  // backbone for binary, victim otherwise
  double threshold = 0.0;
  std::string threshold_mode = "calibrated";  // or "fixed"
  double target_tnr = 0.95;

  BinaryFit binary;               // kind == binary
  double temperature = 1.0;       // kind == odin
  double epsilon = 0.0;           // kind == odin
  MahalanobisParams mahalanobis;  // kind == mahalanobis

  std::string model_digest() const;  // sha256 of the serialized model

  // Raw (pixel-domain) input; higher = more out-of-distribution.
  double score(std::span<const double> raw) const;
  std::vector<double> scores(const Tensor& raw) const;
  bool flags(double score) const { return score >= threshold; }
};

struct DetectorFitOptions {
  double target_tnr = 0.95;
  bool fixed_threshold = false;  // binary only: keep 0.5 on the out probability
  double calibration_fraction = 0.25;
  std::uint64_t seed = 0;
  std::vector<double> lambdas = kDefaultLambdaGrid;
  std::size_t folds = 10;
  double odin_temperature = kDefaultOdinTemperature;
  std::vector<double> odin_epsilons = kDefaultOdinEpsilons;
  std::optional<double> mahalanobis_gamma;
};

// Fits a detector from raw in-distribution samples (with labels, needed by
// mahalanobis) and raw out-of-distribution samples. A seeded fraction of the
// in-distribution rows is held out and used only for threshold calibration
// (and for ODIN's epsilon choice together with half of the out rows).
Detector fit_detector(DetectorKind kind, const Model& model, const Tensor& in_raw,
                      std::span<const std::size_t> in_labels, const Tensor& out_raw,
                      const DetectorFitOptions& options);

DetectionMetrics evaluate(const Detector& detector, const Tensor& in_raw, const Tensor& out_raw);

std::string serialize_detector(const Detector& detector);
Detector deserialize_detector(std::string_view bytes);
void save_detector(const std::string& path, const Detector& detector);
Detector load_detector(const std::string& path);

}  // namespace xfb
