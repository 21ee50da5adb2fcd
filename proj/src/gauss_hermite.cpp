#include "posfuse/gauss_hermite.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <mutex>

#include <Eigen/Eigenvalues>

#include "posfuse/errors.hpp"

namespace posfuse {

namespace {

GaussHermiteRule compute_rule(int order) {
  // Probabilists' Hermite polynomials: Jacobi matrix with off-diagonal sqrt(k).
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(order, order);
  for (int k = 1; k < order; ++k) jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  GaussHermiteRule rule;
  for (int j = 0; j < order; ++j) {
    double node = eig.eigenvalues()(j);
    if (std::abs(node) < 1e-14) node = 0.0;
    const double v0 = eig.eigenvectors()(0, j);
    rule.nodes.push_back(node);
    rule.log_weights.push_back(std::log(v0 * v0));
  }
  return rule;
}

}  // namespace

const GaussHermiteRule& gauss_hermite(int order) {
  if (order < 1) throw ConfigError("Gauss-Hermite order must be at least 1");
  static std::mutex mu;
  static std::map<int, std::unique_ptr<GaussHermiteRule>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& slot = cache[order];
  if (!slot) slot = std::make_unique<GaussHermiteRule>(compute_rule(order));
  return *slot;
}

}  // namespace posfuse
