#pragma once

#include <optional>
#include <span>
#include <vector>

#include "posfuse/model.hpp"
#include "posfuse/rng.hpp"

namespace posfuse {

/// Sorted draws of a scalar predictand.
class PredictiveSample {
 public:
  /// Draws on the probability scale; every draw must lie in [0, 1].
  static PredictiveSample probability(std::vector<double> draws);
  /// No range restriction (differences, test distributions).
  static PredictiveSample unbounded(std::vector<double> draws);

  const std::vector<double>& draws() const { return draws_; }
  std::size_t size() const { return draws_.size(); }
  double mean() const;
  /// Type-7 (linearly interpolated) quantile.
  double quantile(double p) const;

 private:
  explicit PredictiveSample(std::vector<double> draws);
  std::vector<double> draws_;
};

double crps(double y, const PredictiveSample& pred);

struct Interval {
  double lower = 0.0;
  double upper = 0.0;
};

/// Equal-tailed empirical interval: l = sup{x : F(x) <= a/2}, u = inf{x : F(x) >= 1 - a/2}.
Interval empirical_interval(const PredictiveSample& pred, double alpha = 0.05);
double interval_score(double y, const PredictiveSample& pred, double alpha = 0.05);

double fuzzy_coverage(double y, const PredictiveSample& pred, double alpha = 0.05);
double fuzzy_width(const PredictiveSample& pred, double alpha = 0.05);

double mse(double y, const PredictiveSample& pred);

struct MetricSet {
  double bias = 0.0;
  double mse = 0.0;
  double crps = 0.0;
  double interval_score = 0.0;
  double coverage = 0.0;
  double width = 0.0;
};

MetricSet score_all(double y, const PredictiveSample& pred, double alpha = 0.05);

/// Fold label in 1..n_folds per cluster. Strata are (survey, region, urbanicity).
struct FoldPlan {
  int n_folds = 10;
  std::vector<int> fold;
  std::vector<int> stratum;

  std::vector<std::size_t> members(int f) const;
};

FoldPlan make_folds(std::span<const ClusterRecord> data, Rng& rng, int n_folds = 10);

struct DirectEstimate {
  double mean = 0.0;
  std::optional<double> variance;  // missing with fewer than two clusters
};

/// Hajek ratio estimate with the with-replacement linearization variance.
DirectEstimate direct_estimate(std::span<const ClusterRecord> clusters);

DirectEstimate precision_weighted_combine(const DirectEstimate& a, const DirectEstimate& b);

/// Per-pair differences model - direct, where direct ~ N(mean, var) truncated to [0, 1].
PredictiveSample diff_distribution(const PredictiveSample& model_draws, const DirectEstimate& direct, Rng& rng,
                                   std::size_t m);

/// Weighted mean; units with zero weight are excluded.
double aggregate_scores(std::span<const double> scores, std::span<const double> weights);

/// Two-survey cluster-level combination with weights proportional to N per survey.
double combine_survey_scores(double score_a, double n_a, double score_b, double n_b);

}  // namespace posfuse
