#include "posfuse/positional.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "posfuse/errors.hpp"

namespace posfuse {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr int kMaxRejections = 10000;
}  // namespace

double AnonymizationModel::max_radius() const {
  if (const auto* u = std::get_if<JitterUrban>(&variant)) return u->max_radius;
  if (const auto* r = std::get_if<JitterRural>(&variant)) return r->outer_radius;
  return 0.0;
}

void AnonymizationModel::validate() const {
  if (const auto* u = std::get_if<JitterUrban>(&variant)) {
    if (!(u->max_radius > 0)) throw ConfigError("urban jitter radius must be positive");
  } else if (const auto* r = std::get_if<JitterRural>(&variant)) {
    if (!(r->inner_radius > 0 && r->inner_radius < r->outer_radius))
      throw ConfigError("rural jitter requires 0 < R1 < R2");
    if (!(r->p_far >= 0 && r->p_far <= 1)) throw ConfigError("rural jitter p_far must lie in [0, 1]");
  }
}

double jitter_log_density(const AnonymizationModel& model, Point s, Point t, const Raster& admin2) {
  if (!model.is_jitter()) throw ConfigError("jitter_log_density called with a geomask model");
  if (model.admin2_contained) {
    const auto as = admin2.value_at(s);
    const auto at = admin2.value_at(t);
    if (!as || !at || *as != *at) return kNegInf;
  }
  double r = distance(s, t);
  if (r == 0.0) r = 0.5 * admin2.geometry.cell_size;

  double kernel = 0.0;
  if (const auto* u = std::get_if<JitterUrban>(&model.variant)) {
    kernel = r < u->max_radius ? 1.0 : 0.0;
  } else {
    const auto& rural = std::get<JitterRural>(model.variant);
    if (r < rural.inner_radius) kernel += 1.0 - rural.p_far;
    if (r < rural.outer_radius) kernel += rural.p_far;
  }
  if (kernel <= 0.0) return kNegInf;
  return std::log(kernel) - std::log(r);
}

double geomask_log_density(int region_of_s, Point t, const FineGrid& grid) {
  const auto cell = grid.cell_at(t);
  if (!cell) return kNegInf;
  return grid.cell(*cell).region == region_of_s ? 0.0 : kNegInf;
}

AnonymizedPosition sample_anonymized(const AnonymizationModel& model, Point t, const FineGrid& grid,
                                     const Raster& admin2, Rng& rng) {
  if (std::holds_alternative<Geomask>(model.variant)) {
    const auto cell = grid.cell_at(t);
    if (!cell) throw DataError("true location lies outside the populated fine grid");
    return grid.cell(*cell).region;
  }
  const auto home = admin2.value_at(t);
  if (!home) throw DataError("true location lies outside the admin2 raster");

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int attempt = 0; attempt < kMaxRejections; ++attempt) {
    const double angle = 2.0 * std::numbers::pi * unit(rng);
    double radius = 0.0;
    if (const auto* u = std::get_if<JitterUrban>(&model.variant)) {
      radius = u->max_radius * unit(rng);
    } else {
      const auto& rural = std::get<JitterRural>(model.variant);
      const bool far = unit(rng) < rural.p_far;
      radius = (far ? rural.outer_radius : rural.inner_radius) * unit(rng);
    }
    const Point s{t.x + radius * std::cos(angle), t.y + radius * std::sin(angle)};
    const auto dest = admin2.value_at(s);
    if (!dest) continue;
    if (model.admin2_contained && *dest != *home) continue;
    return s;
  }
  throw DataError("jitter sampler exceeded 10000 consecutive rejections (degenerate Admin2 geometry)");
}

}  // namespace posfuse
