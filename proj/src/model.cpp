#include "posfuse/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "posfuse/errors.hpp"

namespace posfuse {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

bool sums_to_zero(const Eigen::VectorXd& w, const StructuredPrecision& sp) {
  std::vector<double> sums(static_cast<std::size_t>(sp.n_components), 0.0);
  for (Eigen::Index i = 0; i < w.size(); ++i) sums[static_cast<std::size_t>(sp.component[static_cast<std::size_t>(i)])] += w(i);
  const double tol = 1e-8 * (1.0 + w.cwiseAbs().sum());
  return std::all_of(sums.begin(), sums.end(), [&](double s) { return std::abs(s) <= tol; });
}

}  // namespace

bool ModelParams::in_support() const {
  return beta.allFinite() && tau > 0 && std::isfinite(tau) && sigma_eps_sq > 0 && std::isfinite(sigma_eps_sq) &&
         phi >= 0 && phi <= 1;
}

void ClusterRecord::validate() const {
  if (n < 1) throw DataError("cluster has n < 1");
  if (y < 0 || y > n) throw DataError("cluster has y outside [0, n]");
  if (!(weight > 0) || !std::isfinite(weight)) throw DataError("cluster design weight must be positive");
  if (survey == SurveyTag::jittered && !observed) throw DataError("jittered cluster without coordinates");
  if (survey == SurveyTag::geomasked && !region) throw DataError("geomasked cluster without region");
}

Eigen::VectorXd bym2_effect(const ModelParams& params, const LatentField& latent) {
  return (std::sqrt(params.phi) * latent.w + std::sqrt(1.0 - params.phi) * latent.v) / std::sqrt(params.tau);
}

double linear_predictor(const ModelParams& params, const LatentField& latent, const FineGrid& grid,
                        std::size_t cell) {
  const auto p = static_cast<Eigen::Index>(grid.n_covariates());
  const auto row = static_cast<Eigen::Index>(cell);
  double eta = params.beta(0) + grid.covariates().row(row).dot(params.beta.segment(1, p));
  const int a = grid.cell(cell).region;
  eta += (std::sqrt(params.phi) * latent.w(a) + std::sqrt(1.0 - params.phi) * latent.v(a)) / std::sqrt(params.tau);
  return eta;
}

double log_binomial_coefficient(int n, int y) {
  return std::lgamma(n + 1.0) - std::lgamma(y + 1.0) - std::lgamma(n - y + 1.0);
}

double marginal_binomial_log_lik(int y, int n, std::span<const double> eta, std::span<const double> log_omega,
                                 double sigma, const GaussHermiteRule& rule) {
  thread_local std::vector<double> terms;
  terms.clear();
  double top = kNegInf;
  const double yd = y, nd = n;
  for (std::size_t j = 0; j < rule.nodes.size(); ++j) {
    const double shift = sigma * rule.nodes[j];
    const double lw = rule.log_weights[j];
    for (std::size_t k = 0; k < eta.size(); ++k) {
      if (log_omega[k] == kNegInf) continue;
      const double x = eta[k] + shift;
      const double t = lw + log_omega[k] + yd * x - nd * softplus(x);
      terms.push_back(t);
      top = std::max(top, t);
    }
  }
  if (top == kNegInf) return kNegInf;
  double s = 0.0;
  for (double t : terms) s += std::exp(t - top);
  return log_binomial_coefficient(n, y) + top + std::log(s);
}

double cluster_log_lik(const ClusterRecord& record, const ModelParams& params, const LatentField& latent,
                       const FineGrid& grid, int gh_order) {
  const auto& scheme = record.scheme;
  if (scheme.empty()) throw DataError("cluster record has no integration scheme");
  std::vector<double> eta(scheme.size()), log_omega(scheme.size());
  for (std::size_t k = 0; k < scheme.size(); ++k) {
    eta[k] = linear_predictor(params, latent, grid, scheme.points[k]);
    if (!std::isfinite(eta[k])) throw NumericError("non-finite linear predictor");
    log_omega[k] = std::log(scheme.omega[k]);
  }
  return marginal_binomial_log_lik(record.y, record.n, eta, log_omega, std::sqrt(params.sigma_eps_sq),
                                   gauss_hermite(gh_order));
}

double log_prior(const ModelParams& params, const LatentField& latent, const PriorSet& priors) {
  if (!params.in_support()) return kNegInf;
  const auto& sp = *priors.structured;
  if (latent.w.size() != sp.n_regions() || latent.v.size() != sp.n_regions()) return kNegInf;
  if (!latent.w.allFinite() || !latent.v.allFinite() || !sums_to_zero(latent.w, sp)) return kNegInf;

  double lp = sp.log_density(latent.w);
  lp += -0.5 * latent.v.squaredNorm() - 0.5 * static_cast<double>(latent.v.size()) * std::log(2.0 * M_PI);
  lp += pc_precision_log_density(params.tau, priors.tau);
  lp += params.phi >= 1.0 ? std::log(priors.phi.boundary_mass()) : pc_phi_log_density(params.phi, priors.phi);
  // Density of sigma^2 from the density of its precision: |d(1/s)/ds| = 1/s^2.
  lp += pc_precision_log_density(1.0 / params.sigma_eps_sq, priors.sigma_eps) - 2.0 * std::log(params.sigma_eps_sq);
  if (priors.beta_sd) {
    const double sd = *priors.beta_sd;
    lp += -0.5 * params.beta.squaredNorm() / (sd * sd) -
          static_cast<double>(params.beta.size()) * (std::log(sd) + 0.5 * std::log(2.0 * M_PI));
  }
  return lp;
}

double joint_log_posterior(const ModelParams& params, const LatentField& latent,
                           std::span<const ClusterRecord> data, const PriorSet& priors, const FineGrid& grid,
                           int gh_order) {
  const double lp = log_prior(params, latent, priors);
  if (lp == kNegInf) return kNegInf;
  std::vector<double> terms(data.size());
  for (std::size_t c = 0; c < data.size(); ++c) terms[c] = cluster_log_lik(data[c], params, latent, grid, gh_order);
  return lp + pairwise_sum(terms);
}

double pairwise_sum(std::span<const double> values) {
  if (values.size() <= 8) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

}  // namespace posfuse
