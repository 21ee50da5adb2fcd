#pragma once

#include <variant>

#include "posfuse/grid.hpp"
#include "posfuse/rng.hpp"

namespace posfuse {

/// Urban jitter: uniform angle, uniform radius on [0, max_radius).
struct JitterUrban {
  double max_radius = 2.0;
};

/// Rural jitter: radius U(0, inner_radius) with probability 1 - p_far,
/// otherwise U(0, outer_radius).
struct JitterRural {
  double inner_radius = 5.0;
  double outer_radius = 10.0;
  double p_far = 0.01;
};

/// Only the region (and urbanicity) containing the true location is released.
struct Geomask {};

struct AnonymizationModel {
  std::variant<JitterUrban, JitterRural, Geomask> variant = JitterUrban{};
  /// Jitter never leaves the Admin2 area of the true location.
  bool admin2_contained = true;

  static AnonymizationModel urban_jitter() { return {JitterUrban{}, true}; }
  static AnonymizationModel rural_jitter() { return {JitterRural{}, true}; }
  static AnonymizationModel geomask() { return {Geomask{}, false}; }
  static AnonymizationModel jitter_for(Urbanicity u) {
    return u == Urbanicity::urban ? urban_jitter() : rural_jitter();
  }

  bool is_jitter() const { return !std::holds_alternative<Geomask>(variant); }
  /// Largest displacement with positive density.
  double max_radius() const;
  void validate() const;
};

/// log pi(s | t) for a jitter model, with the proportionality constant fixed
/// at 1: log[ I{same Admin2} * kernel(|s - t|) / |s - t| ] where the kernel
/// is I{r < R} (urban) or 0.99 I{r < R1} + 0.01 I{r < R2} (rural). At s == t
/// the distance is clamped to cell_size / 2 of the admin2 raster.
double jitter_log_density(const AnonymizationModel& model, Point s, Point t, const Raster& admin2);

/// log pi(region | t): 0 when the populated cell containing t lies in the
/// observed region, -inf otherwise (including unpopulated or outside cells).
double geomask_log_density(int region_of_s, Point t, const FineGrid& grid);

using AnonymizedPosition = std::variant<Point, int>;

/// Forward anonymization of a true location t. Jitter variants redraw until
/// the displaced point stays inside the raster and t's Admin2 area; geomask
/// returns the region label of t's cell.
AnonymizedPosition sample_anonymized(const AnonymizationModel& model, Point t, const FineGrid& grid,
                                     const Raster& admin2, Rng& rng);

}  // namespace posfuse
