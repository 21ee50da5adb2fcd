#pragma once

#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "posfuse/gauss_hermite.hpp"
#include "posfuse/grid.hpp"
#include "posfuse/integration.hpp"
#include "posfuse/priors.hpp"

namespace posfuse {

struct ModelParams {
  Eigen::VectorXd beta;  // intercept first, then one coefficient per covariate
  double tau = 1.0;
  double phi = 0.5;
  double sigma_eps_sq = 1.0;

  bool in_support() const;
};

struct LatentField {
  Eigen::VectorXd w;  // structured, sum-to-zero within each graph component
  Eigen::VectorXd v;  // unstructured
};

enum class SurveyTag { jittered, geomasked };

struct ClusterRecord {
  int y = 0;
  int n = 1;
  Urbanicity urbanicity = Urbanicity::rural;
  SurveyTag survey = SurveyTag::jittered;
  std::optional<Point> observed;  // jittered records
  std::optional<int> region;      // geomasked records
  double weight = 1.0;            // design weight
  IntegrationScheme scheme;

  void validate() const;
};

/// BYM2 area effect u = (sqrt(phi) w + sqrt(1 - phi) v) / sqrt(tau).
Eigen::VectorXd bym2_effect(const ModelParams& params, const LatentField& latent);

/// eta(cell) = [1, d(cell)] beta + u[A[cell]].
double linear_predictor(const ModelParams& params, const LatentField& latent, const FineGrid& grid,
                        std::size_t cell);

double log_binomial_coefficient(int n, int y);

/// log of  E_eps[ sum_k omega_k Bin(y | n, logistic(eta_k + sigma eps)) ]
/// with eps ~ N(0, 1) integrated by the given Gauss-Hermite rule.
double marginal_binomial_log_lik(int y, int n, std::span<const double> eta,
                                 std::span<const double> log_omega, double sigma,
                                 const GaussHermiteRule& rule);

double cluster_log_lik(const ClusterRecord& record, const ModelParams& params, const LatentField& latent,
                       const FineGrid& grid, int gh_order = 25);

/// Log prior density of (beta, w, v, tau, phi, sigma_eps^2). The phi term is
/// the continuous PC density on [0, 1) and the log boundary mass at phi = 1;
/// the nugget prior is the precision PC prior transformed to sigma_eps^2.
double log_prior(const ModelParams& params, const LatentField& latent, const PriorSet& priors);

double joint_log_posterior(const ModelParams& params, const LatentField& latent,
                           std::span<const ClusterRecord> data, const PriorSet& priors, const FineGrid& grid,
                           int gh_order = 25);

/// Pairwise (tree) summation; order-deterministic.
double pairwise_sum(std::span<const double> values);

}  // namespace posfuse
