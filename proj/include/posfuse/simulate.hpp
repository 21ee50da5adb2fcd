#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "posfuse/grid.hpp"
#include "posfuse/model.hpp"
#include "posfuse/priors.hpp"
#include "posfuse/rng.hpp"

namespace posfuse {

struct SimulationConfig {
  int n_rows = 60;
  int n_cols = 60;
  double cell_size = 1.0;
  int region_rows = 3;
  int region_cols = 3;
  /// Each region is split into admin2_split x admin2_split Admin2 blocks.
  int admin2_split = 2;

  int n_smooth_covariates = 2;
  double correlation_length = 3.0;
  int n_waves = 40;
  double population_length = 8.0;
  int n_towns = 12;
  double urban_fraction = 0.1;

  /// Intercept, log1p(population), urban, then one per smooth covariate.
  std::vector<double> beta = {-0.3, 0.4, 0.6, 0.9, -0.7};
  double tau = 4.0;
  double phi = 0.5;
  double sigma_eps_sq = 0.1;

  int households = 25;
  int dhs_urban = 10;
  int dhs_rural = 12;
  int mics_urban = 10;
  int mics_rural = 12;

  std::uint64_t seed = 1;

  void validate() const;
  static SimulationConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct World {
  Raster population;
  Raster urbanicity;
  Raster regions;
  Raster admin2;
  std::vector<Raster> covariates;  // raw (untransformed) covariate rasters
  TransformSpec transforms;
  FineGrid grid;
  Adjacency adjacency;
  ModelParams params;
  LatentField latent;
  std::vector<double> risk;  // logistic(eta) per fine cell
};

World simulate_world(const SimulationConfig& config, Rng& rng);

struct SurveyDesign {
  SurveyTag survey = SurveyTag::jittered;
  int urban_per_region = 10;
  int rural_per_region = 12;
  int households = 25;
  /// Test hook: release the true location unaltered.
  bool anonymize = true;
};

struct SimulatedSurvey {
  std::vector<ClusterRecord> records;  // schemes not yet attached
  std::vector<Point> true_location;
  std::vector<std::size_t> true_cell;
  std::vector<double> true_risk;
};

/// Stratified PPS-without-replacement cluster sample drawn from the true
/// risk surface, with the nugget variance of world.params.
SimulatedSurvey simulate_survey(const World& world, const SurveyDesign& design, Rng& rng);

}  // namespace posfuse
