#pragma once

#include <vector>

namespace posfuse {

/// Rule for E[f(Z)], Z ~ N(0, 1): sum_j exp(log_weights[j]) f(nodes[j]).
struct GaussHermiteRule {
  std::vector<double> nodes;
  std::vector<double> log_weights;
};

/// Golub-Welsch rule of the given order (>= 1), cached per order.
const GaussHermiteRule& gauss_hermite(int order);

}  // namespace posfuse
