#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "posfuse/grid.hpp"
#include "posfuse/positional.hpp"
#include "posfuse/rng.hpp"

namespace posfuse {

/// Quadrature over a cluster's possible true locations.
struct IntegrationScheme {
  std::vector<std::size_t> points;  // fine-grid cells t~_k
  std::vector<double> alpha;        // integration weights alpha_k
  std::vector<double> omega;        // normalized weights, sum to 1
  // Geomask schemes only: the support cells and the zone of each.
  std::vector<std::size_t> support;
  std::vector<int> zone;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  void validate(const FineGrid& grid) const;

  static IntegrationScheme single(std::size_t cell);
};

nlohmann::json scheme_to_json(const IntegrationScheme& scheme);
IntegrationScheme scheme_from_json(const nlohmann::json& j);

/// Feature rows d*(g; lambda) = (lambda * x~, lambda * y~, d(g)) where the
/// coordinates are centered on the centroid of `cells` and divided by the
/// diameter of `cells`.
Eigen::MatrixXd transform_points(const FineGrid& grid, const TransformSpec& spec,
                                 const std::vector<std::size_t>& cells);

struct PamResult {
  std::vector<std::size_t> medoids;  // row indices, ascending
  std::vector<int> assignment;       // zone (index into medoids) per row
  double objective = 0.0;
  int swaps = 0;
};

/// Weighted k-medoids by BUILD + best-improvement SWAP (FastPAM1 deltas)
/// under squared Euclidean distance, followed by a few SWAP runs from
/// rng-drawn medoid sets; the lowest objective wins. Medoids are drawn from
/// rows with positive weight.
PamResult weighted_pam(const Eigen::MatrixXd& features, const std::vector<double>& weights, int k, Rng& rng);

/// Objective of a fixed medoid set with nearest-medoid assignment.
double pam_objective(const Eigen::MatrixXd& features, const std::vector<double>& weights,
                     const std::vector<std::size_t>& medoids);

/// Population-weighted medoid scheme for a (region, urbanicity) stratum.
IntegrationScheme build_geomask_scheme(const FineGrid& grid, int region, Urbanicity urbanicity, int k,
                                       const TransformSpec& spec, Rng& rng);

/// Concentric ring geometry for jittered clusters: a center point plus rings
/// of `points_per_ring` points. `band_mass[i]` is the prior mass of ring i
/// (index 0 is the center).
struct RingLayout {
  std::vector<double> radii;      // radius of each ring, radii[0] == 0
  std::vector<double> band_mass;  // mass per ring, sums to 1
  int points_per_ring = 5;

  int count() const { return 1 + points_per_ring * (static_cast<int>(radii.size()) - 1); }

  /// Default layouts: 11 points for urban, 16 for rural jitter. Other counts
  /// of the form 1 + 5m use equal-width radial bands.
  static RingLayout for_model(const AnonymizationModel& model, int k);
};

/// Ring quadrature around an observed jittered location. Points outside the
/// populated grid or across the observed point's Admin2 boundary get alpha 0;
/// duplicate cells are merged.
IntegrationScheme build_jitter_scheme(Point observed, Urbanicity urbanicity, const FineGrid& grid,
                                      const Raster& admin2, int k = 0);

}  // namespace posfuse
