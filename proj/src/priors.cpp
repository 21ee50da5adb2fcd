#include "posfuse/priors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <queue>
#include <set>

#include <json.hpp>

#include "posfuse/errors.hpp"

namespace posfuse {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
// Below this phi the density uses the Taylor expansion of the KLD.
constexpr double kSmallPhi = 1e-6;

// x - log(1 + x) without cancellation near 0.
double x_minus_log1p(double x) {
  if (std::abs(x) < 1e-3) {
    const double x2 = x * x;
    return x2 * (0.5 - x / 3.0 + x2 / 4.0 - x2 * x / 5.0 + x2 * x2 / 6.0);
  }
  return x - std::log1p(x);
}

double kld_unchecked(double phi, const Eigen::VectorXd& gt) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < gt.size(); ++i) sum += x_minus_log1p((gt(i) - 1.0) * phi);
  return 0.5 * sum;
}

}  // namespace

Adjacency adjacency_from_json_text(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    return j.get<Adjacency>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed adjacency JSON: ") + e.what());
  }
}

std::string adjacency_to_json_text(const Adjacency& adjacency) { return nlohmann::json(adjacency).dump(); }

double StructuredPrecision::log_density(const Eigen::VectorXd& w) const {
  const double quad = w.dot(q_star * w);
  return -0.5 * rank() * std::log(2.0 * std::numbers::pi) + 0.5 * eigenvalues.array().log().sum() - 0.5 * quad;
}

StructuredPrecision scaled_structured_precision(const Adjacency& adjacency) {
  const auto n = static_cast<int>(adjacency.size());
  if (n == 0) throw DataError("adjacency graph is empty");
  std::vector<std::set<int>> nb(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int j : adjacency[static_cast<std::size_t>(i)]) {
      if (j < 0 || j >= n) throw DataError("adjacency index out of range");
      if (j == i) throw DataError("adjacency contains a self loop");
      nb[static_cast<std::size_t>(i)].insert(j);
    }
  }
  for (int i = 0; i < n; ++i) {
    if (nb[static_cast<std::size_t>(i)].empty())
      throw DataError("adjacency graph has isolated region " + std::to_string(i));
    for (int j : nb[static_cast<std::size_t>(i)])
      if (!nb[static_cast<std::size_t>(j)].count(i)) throw DataError("adjacency is not symmetric");
  }

  StructuredPrecision sp;
  sp.adjacency.resize(static_cast<std::size_t>(n));
  Eigen::MatrixXd q = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    sp.adjacency[static_cast<std::size_t>(i)].assign(nb[static_cast<std::size_t>(i)].begin(), nb[static_cast<std::size_t>(i)].end());
    q(i, i) = static_cast<double>(nb[static_cast<std::size_t>(i)].size());
    for (int j : nb[static_cast<std::size_t>(i)]) q(i, j) = -1.0;
  }

  sp.component.assign(static_cast<std::size_t>(n), -1);
  for (int s = 0; s < n; ++s) {
    if (sp.component[static_cast<std::size_t>(s)] >= 0) continue;
    std::queue<int> todo;
    todo.push(s);
    sp.component[static_cast<std::size_t>(s)] = sp.n_components;
    while (!todo.empty()) {
      const int v = todo.front();
      todo.pop();
      for (int u : nb[static_cast<std::size_t>(v)]) {
        if (sp.component[static_cast<std::size_t>(u)] < 0) {
          sp.component[static_cast<std::size_t>(u)] = sp.n_components;
          todo.push(u);
        }
      }
    }
    ++sp.n_components;
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(q);
  const Eigen::VectorXd& vals = eig.eigenvalues();
  const double tol = 1e-10 * std::max(1.0, vals.maxCoeff());
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < vals.size(); ++i)
    if (vals(i) > tol) keep.push_back(i);
  if (static_cast<int>(keep.size()) != n - sp.n_components)
    throw NumericError("ICAR null space dimension does not match the number of components");

  Eigen::MatrixXd v(n, static_cast<Eigen::Index>(keep.size()));
  Eigen::VectorXd lam(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    v.col(static_cast<Eigen::Index>(k)) = eig.eigenvectors().col(keep[k]);
    lam(static_cast<Eigen::Index>(k)) = vals(keep[k]);
  }
  // Marginal variances of the constrained field: diag of the generalized inverse.
  const Eigen::VectorXd marg = (v.array().square().rowwise() / lam.transpose().array()).rowwise().sum();
  const double log_gm = marg.array().log().mean();
  sp.scale = std::exp(log_gm);
  sp.q_star = q * sp.scale;
  sp.eigenvalues = lam * sp.scale;
  sp.eigenvectors = v;
  sp.gamma_tilde = sp.eigenvalues.cwiseInverse();
  return sp;
}

double PCPhiPrior::boundary_mass() const { return std::exp(-lambda_pc * pc_phi_distance(1.0, gamma_tilde)); }

double pc_phi_kld(double phi, const PCPhiPrior& prior) {
  if (!(phi >= 0.0 && phi < 1.0)) throw DataError("pc_phi_kld: phi must lie in [0, 1)");
  return kld_unchecked(phi, prior.gamma_tilde);
}

double pc_phi_distance(double phi, const Eigen::VectorXd& gamma_tilde) {
  if (!(phi >= 0.0 && phi <= 1.0)) throw DataError("pc_phi_distance: phi must lie in [0, 1]");
  return std::sqrt(2.0 * std::max(0.0, kld_unchecked(phi, gamma_tilde)));
}

double pc_phi_log_density(double phi, const PCPhiPrior& prior) {
  if (!(phi >= 0.0 && phi < 1.0)) throw DataError("pc_phi_log_density: phi must lie in [0, 1)");
  const Eigen::VectorXd& gt = prior.gamma_tilde;
  const double lambda = prior.lambda_pc;
  double d = 0.0, dprime = 0.0;
  if (phi < kSmallPhi) {
    const Eigen::ArrayXd g1 = gt.array() - 1.0;
    const double c2 = 0.25 * g1.square().sum();
    const double c3 = g1.cube().sum() / 6.0;
    const double inner = std::max(0.0, 2.0 * (c2 - c3 * phi));
    d = phi * std::sqrt(inner);
    dprime = inner > 0 ? (2.0 * c2 - 3.0 * c3 * phi) / std::sqrt(inner) : 0.0;
  } else {
    d = std::sqrt(2.0 * kld_unchecked(phi, gt));
    double s = 0.0;
    for (Eigen::Index i = 0; i < gt.size(); ++i) {
      const double g1 = gt(i) - 1.0;
      s += g1 * g1 * phi / (1.0 + g1 * phi);
    }
    dprime = d > 0 ? std::abs(s) / (2.0 * d) : 0.0;
  }
  if (!(dprime > 0)) return kNegInf;
  return std::log(lambda) - lambda * d + std::log(dprime);
}

double pc_phi_cdf(double phi, const PCPhiPrior& prior) {
  if (!(phi >= 0.0 && phi <= 1.0)) throw DataError("pc_phi_cdf: phi must lie in [0, 1]");
  return -std::expm1(-prior.lambda_pc * pc_phi_distance(phi, prior.gamma_tilde));
}

double pc_phi_quantile(double u, const PCPhiPrior& prior) {
  const double top = pc_phi_cdf(1.0, prior);
  if (!(u >= 0.0 && u < top)) throw DataError("pc_phi_quantile: level outside the continuous part");
  const double target = -std::log1p(-u) / prior.lambda_pc;
  double lo = 0.0, hi = 1.0;
  for (int it = 0; it < 200 && hi - lo > 1e-16; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (pc_phi_distance(mid, prior.gamma_tilde) < target) lo = mid;
    else hi = mid;
  }
  return 0.5 * (lo + hi);
}

double solve_lambda_phi(double target_phi, double target_prob, const Eigen::VectorXd& gamma_tilde) {
  if (!(target_phi > 0 && target_phi < 1) || !(target_prob > 0 && target_prob < 1))
    throw ConfigError("solve_lambda_phi: targets must lie in (0, 1)");
  const double d = pc_phi_distance(target_phi, gamma_tilde);
  if (!(d > 0)) throw ConfigError("solve_lambda_phi: target unreachable (zero distance at target phi)");
  // F(phi) = 1 - exp(-lambda d(phi)) inverts in closed form.
  const double lambda = -std::log1p(-target_prob) / d;
  if (!(lambda >= 1e-8 && lambda <= 1e8)) throw ConfigError("solve_lambda_phi: target unreachable");
  return lambda;
}

double PCPrecisionPrior::rate() const { return -std::log(alpha_tail) / u_threshold; }

PCPrecisionPrior PCPrecisionPrior::from_lower_probability(double u, double p_below) {
  if (!(u > 0) || !(p_below > 0 && p_below < 1))
    throw ConfigError("precision prior needs U > 0 and probability in (0, 1)");
  return {u, 1.0 - p_below};
}

double pc_precision_log_density(double tau, const PCPrecisionPrior& prior) {
  if (!(tau > 0) || !std::isfinite(tau)) return kNegInf;
  const double theta = prior.rate();
  return std::log(0.5 * theta) - 1.5 * std::log(tau) - theta / std::sqrt(tau);
}

PriorSet PriorSet::defaults(const Adjacency& adjacency) {
  PriorSet ps;
  auto sp = std::make_shared<StructuredPrecision>(scaled_structured_precision(adjacency));
  ps.tau = PCPrecisionPrior::from_lower_probability(1.0, 0.1);
  ps.sigma_eps = PCPrecisionPrior::from_lower_probability(1.0, 0.1);
  ps.phi.gamma_tilde = sp->gamma_tilde;
  ps.phi.lambda_pc = solve_lambda_phi(0.5, 2.0 / 3.0, sp->gamma_tilde);
  ps.structured = std::move(sp);
  return ps;
}

}  // namespace posfuse
