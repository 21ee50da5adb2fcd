#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace posfuse {

using Adjacency = std::vector<std::vector<int>>;

Adjacency adjacency_from_json_text(const std::string& text);
std::string adjacency_to_json_text(const Adjacency& adjacency);

/// ICAR precision scaled so that the constrained Gaussian has marginal
/// variances with geometric mean one, plus its spectrum on the non-null space.
struct StructuredPrecision {
  Adjacency adjacency;
  Eigen::MatrixXd q_star;
  /// Eigenvalues of the generalized inverse of q_star (non-null space only).
  Eigen::VectorXd gamma_tilde;
  /// Non-null eigenpairs of q_star: q_star = V diag(lambda) V^T.
  Eigen::VectorXd eigenvalues;
  Eigen::MatrixXd eigenvectors;
  /// Connected component label per region.
  std::vector<int> component;
  int n_components = 0;
  /// Multiplier applied to the raw ICAR precision.
  double scale = 1.0;

  int n_regions() const { return static_cast<int>(q_star.rows()); }
  int rank() const { return static_cast<int>(gamma_tilde.size()); }
  /// log density of w under the scaled structured model, restricted to the
  /// non-null space: -(r/2) log(2 pi) + (1/2) sum log lambda - (1/2) w' Q w.
  double log_density(const Eigen::VectorXd& w) const;
};

StructuredPrecision scaled_structured_precision(const Adjacency& adjacency);

/// PC prior on the BYM2 mixing proportion. The continuous part has mass
/// F(1) = 1 - exp(-lambda d(1)) on (0, 1); the remainder sits at phi = 1.
struct PCPhiPrior {
  double lambda_pc = 1.0;
  Eigen::VectorXd gamma_tilde;

  int n() const { return static_cast<int>(gamma_tilde.size()); }
  double boundary_mass() const;
};

double pc_phi_kld(double phi, const PCPhiPrior& prior);
/// d(phi) = sqrt(2 KLD(phi)).
double pc_phi_distance(double phi, const Eigen::VectorXd& gamma_tilde);
double pc_phi_log_density(double phi, const PCPhiPrior& prior);
double pc_phi_cdf(double phi, const PCPhiPrior& prior);
/// Inverse of the continuous part: phi with F(phi) = u for u in [0, F(1)).
double pc_phi_quantile(double u, const PCPhiPrior& prior);
double solve_lambda_phi(double target_phi, double target_prob, const Eigen::VectorXd& gamma_tilde);

/// Type-2 Gumbel PC prior on a precision: sigma = tau^{-1/2} ~ Exp(theta)
/// with theta = -log(alpha_tail) / u_threshold, so P(sigma > U) = alpha.
struct PCPrecisionPrior {
  double u_threshold = 1.0;
  double alpha_tail = 0.1;

  double rate() const;
  /// Prior stated as P(sigma < U) = p, the form used for the BYM2 and nugget
  /// hyperparameters.
  static PCPrecisionPrior from_lower_probability(double u, double p_below);
};

double pc_precision_log_density(double tau, const PCPrecisionPrior& prior);

struct PriorSet {
  PCPrecisionPrior tau;
  PCPrecisionPrior sigma_eps;  // applied to the nugget precision 1 / sigma_eps^2
  PCPhiPrior phi;
  std::shared_ptr<const StructuredPrecision> structured;
  /// Gaussian N(0, beta_sd^2) on every fixed effect; flat when absent.
  std::optional<double> beta_sd;

  /// Standard setup: P(1/sqrt(tau) < 1) = P(sigma_eps < 1) = 0.1 and
  /// P(phi < 0.5) = 2/3.
  static PriorSet defaults(const Adjacency& adjacency);
};

}  // namespace posfuse
