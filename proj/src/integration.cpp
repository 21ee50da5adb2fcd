#include "posfuse/integration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "posfuse/errors.hpp"

namespace posfuse {

void IntegrationScheme::validate(const FineGrid& grid) const {
  if (points.empty()) throw DataError("integration scheme has no points");
  if (alpha.size() != points.size() || omega.size() != points.size())
    throw DataError("integration scheme arrays differ in length");
  double total = 0.0;
  for (std::size_t k = 0; k < points.size(); ++k) {
    if (points[k] >= grid.size()) throw DataError("integration point outside the fine grid");
    if (!(omega[k] >= 0) || !(alpha[k] >= 0)) throw DataError("negative integration weight");
    total += omega[k];
  }
  if (std::abs(total - 1.0) > 1e-12) throw DataError("integration weights do not sum to one");
}

IntegrationScheme IntegrationScheme::single(std::size_t cell) {
  IntegrationScheme s;
  s.points = {cell};
  s.alpha = {1.0};
  s.omega = {1.0};
  return s;
}

nlohmann::json scheme_to_json(const IntegrationScheme& scheme) {
  nlohmann::json j;
  j["points"] = scheme.points;
  j["alpha"] = scheme.alpha;
  j["omega"] = scheme.omega;
  if (!scheme.support.empty()) {
    j["support"] = scheme.support;
    j["zone"] = scheme.zone;
  }
  return j;
}

IntegrationScheme scheme_from_json(const nlohmann::json& j) {
  IntegrationScheme s;
  try {
    s.points = j.at("points").get<std::vector<std::size_t>>();
    s.alpha = j.at("alpha").get<std::vector<double>>();
    s.omega = j.at("omega").get<std::vector<double>>();
    if (j.contains("support")) {
      s.support = j.at("support").get<std::vector<std::size_t>>();
      s.zone = j.at("zone").get<std::vector<int>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed scheme JSON: ") + e.what());
  }
  return s;
}

Eigen::MatrixXd transform_points(const FineGrid& grid, const TransformSpec& spec,
                                 const std::vector<std::size_t>& cells) {
  const auto p = static_cast<Eigen::Index>(grid.n_covariates());
  const auto n = static_cast<Eigen::Index>(cells.size());
  Eigen::MatrixXd out(n, 2 + p);
  if (n == 0) return out;

  double cx = 0.0, cy = 0.0;
  for (std::size_t c : cells) {
    cx += grid.cell(c).center.x;
    cy += grid.cell(c).center.y;
  }
  cx /= static_cast<double>(n);
  cy /= static_cast<double>(n);
  double diameter = 0.0;
  for (std::size_t a = 0; a < cells.size(); ++a)
    for (std::size_t b = a + 1; b < cells.size(); ++b)
      diameter = std::max(diameter, distance(grid.cell(cells[a]).center, grid.cell(cells[b]).center));
  const double scale = diameter > 0 ? spec.lambda_mix / diameter : 0.0;

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& cell = grid.cell(cells[static_cast<std::size_t>(i)]);
    out(i, 0) = scale * (cell.center.x - cx);
    out(i, 1) = scale * (cell.center.y - cy);
    out.row(i).tail(p) = grid.covariates().row(static_cast<Eigen::Index>(cells[static_cast<std::size_t>(i)]));
  }
  return out;
}

namespace {

constexpr int kRandomStarts = 8;

class DistanceOracle {
 public:
  explicit DistanceOracle(const Eigen::MatrixXd& x) : x_(x), n_(x.rows()) {
    if (n_ <= kCacheLimit) {
      cache_.resize(n_, n_);
      for (Eigen::Index i = 0; i < n_; ++i) {
        cache_(i, i) = 0.0;
        for (Eigen::Index j = i + 1; j < n_; ++j) cache_(i, j) = cache_(j, i) = (x_.row(i) - x_.row(j)).squaredNorm();
      }
    }
  }
  double operator()(std::size_t i, std::size_t j) const {
    const auto a = static_cast<Eigen::Index>(i), b = static_cast<Eigen::Index>(j);
    if (cache_.size() > 0) return cache_(a, b);
    return (x_.row(a) - x_.row(b)).squaredNorm();
  }

 private:
  static constexpr Eigen::Index kCacheLimit = 1500;
  const Eigen::MatrixXd& x_;
  Eigen::Index n_;
  Eigen::MatrixXd cache_;
};

struct NearestState {
  std::vector<int> nearest;  // index into medoid list
  std::vector<double> d_nearest;
  std::vector<double> d_second;
};

NearestState nearest_two(const DistanceOracle& dist, std::size_t n, const std::vector<std::size_t>& medoids) {
  NearestState st;
  st.nearest.assign(n, -1);
  st.d_nearest.assign(n, std::numeric_limits<double>::infinity());
  st.d_second.assign(n, std::numeric_limits<double>::infinity());
  for (std::size_t o = 0; o < n; ++o) {
    for (std::size_t m = 0; m < medoids.size(); ++m) {
      const double d = dist(o, medoids[m]);
      if (d < st.d_nearest[o]) {
        st.d_second[o] = st.d_nearest[o];
        st.d_nearest[o] = d;
        st.nearest[o] = static_cast<int>(m);
      } else if (d < st.d_second[o]) {
        st.d_second[o] = d;
      }
    }
  }
  return st;
}

}  // namespace

double pam_objective(const Eigen::MatrixXd& features, const std::vector<double>& weights,
                     const std::vector<std::size_t>& medoids) {
  double total = 0.0;
  for (Eigen::Index o = 0; o < features.rows(); ++o) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t m : medoids) best = std::min(best, (features.row(o) - features.row(static_cast<Eigen::Index>(m))).squaredNorm());
    total += weights[static_cast<std::size_t>(o)] * best;
  }
  return total;
}

PamResult weighted_pam(const Eigen::MatrixXd& features, const std::vector<double>& weights, int k, Rng& rng) {
  const auto n = static_cast<std::size_t>(features.rows());
  if (weights.size() != n) throw DataError("weighted_pam: weight count does not match feature rows");
  if (k <= 0) throw DataError("weighted_pam: K must be positive");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(weights[i] >= 0) || !std::isfinite(weights[i])) throw DataError("weighted_pam: weights must be finite and non-negative");
    if (weights[i] > 0) candidates.push_back(i);
  }
  if (static_cast<std::size_t>(k) > candidates.size())
    throw DataError("weighted_pam: K exceeds the number of rows with positive weight");

  const DistanceOracle dist(features);
  std::vector<char> is_medoid(n, 0);
  std::vector<std::size_t> medoids;
  std::vector<double> dn(n, std::numeric_limits<double>::infinity());

  // BUILD: greedy objective-minimizing seeding.
  for (int step = 0; step < k; ++step) {
    double best_gain = -std::numeric_limits<double>::infinity();
    std::vector<std::size_t> tied;
    for (std::size_t h : candidates) {
      if (is_medoid[h]) continue;
      double gain = 0.0;
      for (std::size_t o = 0; o < n; ++o) {
        const double d = dist(o, h);
        if (step == 0) gain -= weights[o] * d;
        else if (d < dn[o]) gain += weights[o] * (dn[o] - d);
      }
      if (gain > best_gain) {
        best_gain = gain;
        tied.assign(1, h);
      } else if (gain == best_gain) {
        tied.push_back(h);
      }
    }
    const std::size_t pick =
        tied.size() == 1 ? tied[0] : tied[std::uniform_int_distribution<std::size_t>(0, tied.size() - 1)(rng)];
    medoids.push_back(pick);
    is_medoid[pick] = 1;
    for (std::size_t o = 0; o < n; ++o) dn[o] = std::min(dn[o], dist(o, pick));
  }

  // SWAP: apply the best improving (medoid, non-medoid) exchange until none improves.
  std::vector<double> delta(static_cast<std::size_t>(k));
  auto swap_phase = [&](std::vector<std::size_t>& meds, std::vector<char>& in_set, int& swaps) {
    while (true) {
      const NearestState st = nearest_two(dist, n, meds);
      double current = 0.0;
      for (std::size_t o = 0; o < n; ++o) current += weights[o] * st.d_nearest[o];

      double best_delta = 0.0;
      int best_m = -1;
      std::size_t best_h = 0;
      for (std::size_t h : candidates) {
        if (in_set[h]) continue;
        std::fill(delta.begin(), delta.end(), 0.0);
        double shared = 0.0;
        for (std::size_t o = 0; o < n; ++o) {
          if (weights[o] == 0.0) continue;
          const double doh = dist(o, h);
          const double keep = weights[o] * (std::min(doh, st.d_nearest[o]) - st.d_nearest[o]);
          const double lose = weights[o] * (std::min(doh, st.d_second[o]) - st.d_nearest[o]);
          shared += keep;
          delta[static_cast<std::size_t>(st.nearest[o])] += lose - keep;
        }
        for (int m = 0; m < k; ++m) {
          const double total = shared + delta[static_cast<std::size_t>(m)];
          if (total < best_delta) {
            best_delta = total;
            best_m = m;
            best_h = h;
          }
        }
      }
      const double tol = 1e-12 * std::max(1.0, current);
      if (best_m < 0 || best_delta >= -tol) return current;
      in_set[meds[static_cast<std::size_t>(best_m)]] = 0;
      meds[static_cast<std::size_t>(best_m)] = best_h;
      in_set[best_h] = 1;
      ++swaps;
    }
  };

  PamResult result;
  double best_objective = swap_phase(medoids, is_medoid, result.swaps);

  // Extra SWAP runs from random medoid sets; the best local optimum is kept.
  if (static_cast<std::size_t>(k) < candidates.size()) {
    for (int start = 0; start < kRandomStarts; ++start) {
      std::vector<std::size_t> pool = candidates;
      std::shuffle(pool.begin(), pool.end(), rng);
      std::vector<std::size_t> trial(pool.begin(), pool.begin() + k);
      std::vector<char> in_trial(n, 0);
      for (std::size_t m : trial) in_trial[m] = 1;
      int swaps = 0;
      const double obj = swap_phase(trial, in_trial, swaps);
      result.swaps += swaps;
      if (obj < best_objective * (1.0 - 1e-12)) {
        best_objective = obj;
        medoids = std::move(trial);
        is_medoid = std::move(in_trial);
      }
    }
  }

  std::sort(medoids.begin(), medoids.end());
  result.medoids = medoids;
  result.assignment.assign(n, 0);
  result.objective = 0.0;
  for (std::size_t o = 0; o < n; ++o) {
    double best = std::numeric_limits<double>::infinity();
    int zone = 0;
    for (std::size_t m = 0; m < medoids.size(); ++m) {
      const double d = dist(o, medoids[m]);
      if (d < best) {
        best = d;
        zone = static_cast<int>(m);
      }
    }
    if (is_medoid[o]) {
      // A medoid always represents its own zone, even when tied with another.
      zone = static_cast<int>(std::lower_bound(medoids.begin(), medoids.end(), o) - medoids.begin());
      best = 0.0;
    }
    result.assignment[o] = zone;
    result.objective += weights[o] * best;
  }
  return result;
}

IntegrationScheme build_geomask_scheme(const FineGrid& grid, int region, Urbanicity urbanicity, int k,
                                       const TransformSpec& spec, Rng& rng) {
  if (k <= 0) throw ConfigError("geomask K must be positive");
  IntegrationScheme scheme;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& c = grid.cell(i);
    if (c.region == region && c.urbanicity == urbanicity) scheme.support.push_back(i);
  }
  if (scheme.support.empty())
    throw DataError("no cells of requested urbanicity in region " + std::to_string(region));

  double total = 0.0;
  for (std::size_t c : scheme.support) total += grid.cell(c).population;

  if (scheme.support.size() <= static_cast<std::size_t>(k)) {
    scheme.points = scheme.support;
    scheme.zone.resize(scheme.support.size());
    std::iota(scheme.zone.begin(), scheme.zone.end(), 0);
    scheme.alpha.assign(scheme.support.size(), 1.0);
    for (std::size_t c : scheme.support) scheme.omega.push_back(grid.cell(c).population / total);
    return scheme;
  }

  const Eigen::MatrixXd features = transform_points(grid, spec, scheme.support);
  std::vector<double> q(scheme.support.size());
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = grid.cell(scheme.support[i]).population;
  const PamResult pam = weighted_pam(features, q, k, rng);

  std::vector<double> zone_mass(pam.medoids.size(), 0.0);
  for (std::size_t i = 0; i < q.size(); ++i) zone_mass[static_cast<std::size_t>(pam.assignment[i])] += q[i];
  scheme.zone = pam.assignment;
  for (std::size_t m = 0; m < pam.medoids.size(); ++m) {
    const std::size_t cell = scheme.support[pam.medoids[m]];
    scheme.points.push_back(cell);
    scheme.alpha.push_back(zone_mass[m] / grid.cell(cell).population);
    scheme.omega.push_back(zone_mass[m] / total);
  }
  return scheme;
}

RingLayout RingLayout::for_model(const AnonymizationModel& model, int k) {
  RingLayout layout;
  auto bands_to_layout = [&](const std::vector<double>& edges, double scale_mass, double radius_max) {
    // Ring i sits at the inner edge of band i; band mass is (b - a) / R.
    for (std::size_t i = 0; i + 1 < edges.size(); ++i) {
      layout.radii.push_back(edges[i]);
      layout.band_mass.push_back(scale_mass * (edges[i + 1] - edges[i]) / radius_max);
    }
  };
  if (const auto* u = std::get_if<JitterUrban>(&model.variant)) {
    const double r = u->max_radius;
    if (k == 0 || k == 11) {
      bands_to_layout({0.0, 0.6, 1.4, r}, 1.0, r);
      return layout;
    }
    if (k < 1 || (k - 1) % 5 != 0) throw ConfigError("urban jitter K must be of the form 1 + 5m");
    const int m = (k - 1) / 5;
    std::vector<double> edges;
    for (int i = 0; i <= m + 1; ++i) edges.push_back(r * i / (m + 1));
    bands_to_layout(edges, 1.0, r);
    return layout;
  }
  if (const auto* rural = std::get_if<JitterRural>(&model.variant)) {
    const double r1 = rural->inner_radius, r2 = rural->outer_radius, p = rural->p_far;
    std::vector<double> edges;
    if (k == 0 || k == 16) {
      edges = {0.0, 1.5, 3.5, r1};
    } else {
      if (k < 1 || (k - 1) % 5 != 0) throw ConfigError("rural jitter K must be of the form 1 + 5m");
      const int m = (k - 1) / 5;
      if (m == 0) {
        layout.radii = {0.0};
        layout.band_mass = {1.0};
        return layout;
      }
      for (int i = 0; i <= m; ++i) edges.push_back(r1 * i / m);
    }
    bands_to_layout(edges, 1.0 - p, r1);
    // The far component is represented by one ring in the middle of (R1, R2).
    layout.radii.push_back(0.5 * (r1 + r2));
    layout.band_mass.push_back(p);
    return layout;
  }
  throw ConfigError("ring layouts exist only for jitter models");
}

IntegrationScheme build_jitter_scheme(Point observed, Urbanicity urbanicity, const FineGrid& grid,
                                      const Raster& admin2, int k) {
  const RingLayout layout = RingLayout::for_model(AnonymizationModel::jitter_for(urbanicity), k);
  const auto home = admin2.value_at(observed);

  IntegrationScheme scheme;
  auto add = [&](Point p, double mass) {
    const auto cell = grid.cell_at(p);
    if (!cell) return;
    if (home) {
      const auto a2 = admin2.value_at(p);
      if (!a2 || *a2 != *home) return;
    }
    const auto it = std::find(scheme.points.begin(), scheme.points.end(), *cell);
    if (it == scheme.points.end()) {
      scheme.points.push_back(*cell);
      scheme.alpha.push_back(mass);
    } else {
      scheme.alpha[static_cast<std::size_t>(it - scheme.points.begin())] += mass;
    }
  };

  add(observed, layout.band_mass[0]);
  for (std::size_t ring = 1; ring < layout.radii.size(); ++ring) {
    const double offset = static_cast<double>(ring - 1) * std::numbers::pi / layout.points_per_ring;
    const double mass = layout.band_mass[ring] / layout.points_per_ring;
    for (int j = 0; j < layout.points_per_ring; ++j) {
      const double angle = 2.0 * std::numbers::pi * j / layout.points_per_ring + offset;
      add({observed.x + layout.radii[ring] * std::cos(angle), observed.y + layout.radii[ring] * std::sin(angle)}, mass);
    }
  }

  double total = 0.0;
  for (std::size_t i = 0; i < scheme.points.size(); ++i) total += scheme.alpha[i] * grid.cell(scheme.points[i]).population;
  if (!(total > 0)) {
    const auto own = grid.cell_at(observed);
    return IntegrationScheme::single(own ? *own : grid.nearest_cell(observed));
  }
  for (std::size_t i = 0; i < scheme.points.size(); ++i)
    scheme.omega.push_back(scheme.alpha[i] * grid.cell(scheme.points[i]).population / total);
  return scheme;
}

}  // namespace posfuse
