#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "posfuse/grid.hpp"
#include "posfuse/model.hpp"
#include "posfuse/priors.hpp"

namespace posfuse {

struct McmcConfig {
  int n_iterations = 2000;
  int n_burnin = 500;
  int thin = 1;
  std::uint64_t seed = 1;
  int adapt_window = 50;
  double target_scalar = 0.44;
  double target_vector = 0.234;
  int gh_order = 9;

  void validate() const;
};

struct PosteriorSamples {
  std::vector<ModelParams> params;
  std::vector<LatentField> latent;
  /// Post-burn-in acceptance rate per block ("beta", "w", "v", "tau", "phi",
  /// "phi_switch", "sigma_eps_sq").
  std::map<std::string, double> acceptance;
  std::vector<std::string> covariate_names;

  std::size_t size() const { return params.size(); }
};

struct FitHooks {
  /// When set, replaces the data likelihood by a function of beta alone.
  std::function<double(const Eigen::VectorXd&)> beta_log_lik;
};

PosteriorSamples fit(std::span<const ClusterRecord> data, const FineGrid& grid, const PriorSet& priors,
                     const McmcConfig& config, const FitHooks& hooks = {});

void write_samples_csv(const PosteriorSamples& samples, const std::string& path);
PosteriorSamples read_samples_csv(const std::string& path);

/// Draws x cells. Row d holds the risk surface of the d-th selected draw.
struct RiskDraws {
  Eigen::MatrixXd values;
};

enum class RiskScale {
  surface,  // logistic(eta), nugget excluded
  cluster   // E_eps[logistic(eta + eps)], nugget integrated out
};

/// Uses n_draws posterior draws spaced evenly over the stored chain.
RiskDraws predict_risk(const PosteriorSamples& samples, const FineGrid& grid, std::size_t n_draws,
                       RiskScale scale = RiskScale::surface, int gh_order = 25);

enum class AggregationLevel { region, admin2 };

/// Draws x areas of population-weighted means. Areas without population are NaN.
Eigen::MatrixXd aggregate(const RiskDraws& draws, const FineGrid& grid, const std::vector<int>& labels,
                          int n_areas);
Eigen::MatrixXd aggregate(const RiskDraws& draws, const FineGrid& grid, AggregationLevel level);

}  // namespace posfuse
