#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "posfuse/grid.hpp"
#include "posfuse/inference.hpp"
#include "posfuse/integration.hpp"
#include "posfuse/model.hpp"
#include "posfuse/priors.hpp"
#include "posfuse/scoring.hpp"
#include "posfuse/simulate.hpp"

namespace posfuse {

struct SchemeSettings {
  int k_geomask = 100;
  int k_urban = 11;
  int k_rural = 16;
  double lambda_mix = 0.0;
};

/// Precision priors are stated as P(sigma < u) = p.
struct PriorTargets {
  double tau_u = 1.0;
  double tau_p = 0.1;
  double sigma_u = 1.0;
  double sigma_p = 0.1;
  double phi = 0.5;
  double phi_prob = 2.0 / 3.0;
  std::optional<double> beta_sd;

  PriorSet resolve(const Adjacency& adjacency) const;
};

/// Everything the model needs about the study area.
struct Inputs {
  Raster population;
  Raster urbanicity;
  Raster regions;
  Raster admin2;
  std::vector<Raster> covariates;
  TransformSpec transforms;
  FineGrid grid;
  Adjacency adjacency;
};

Inputs inputs_from_world(const World& world);

enum class JitterHandling { ignore, correct };
enum class GeomaskHandling { exclude, naive_draw, full };

/// Geomask schemes keyed by 2 * region + (urban ? 0 : 1).
using GeomaskSchemes = std::map<int, IntegrationScheme>;

inline int stratum_key(int region, Urbanicity u) { return 2 * region + (u == Urbanicity::urban ? 0 : 1); }

/// One scheme per (region, urbanicity) pair present in the grid. Strata are
/// built on up to `threads` workers; each has its own seeded stream.
GeomaskSchemes build_geomask_schemes(const Inputs& inputs, const SchemeSettings& settings, std::uint64_t seed,
                                     int threads = 1);

/// Copies `records`, dropping or placing geomasked rows and attaching an
/// integration scheme to every record. `rng` drives naive geomask draws.
std::vector<ClusterRecord> prepare_records(std::span<const ClusterRecord> records, const Inputs& inputs,
                                           const SchemeSettings& settings, JitterHandling jitter,
                                           GeomaskHandling geomask, const GeomaskSchemes& schemes, Rng& rng);

enum class Approach { ignore_jitter, correct_jitter, naive_geomask_draw, full };

Approach parse_approach(const std::string& name);
std::string approach_name(Approach a);
/// Model label: M_d, M_D, M_dm, M_DM.
std::string approach_model(Approach a);

struct ValidationConfig {
  std::vector<Approach> approaches = {Approach::ignore_jitter, Approach::correct_jitter,
                                      Approach::naive_geomask_draw, Approach::full};
  int n_folds = 10;
  int folds_left_out = 5;
  /// Areas (regions) to validate; all regions when empty.
  std::vector<int> areas;
  int n_pred_draws = 200;
  int diff_draws = 1000;
  double alpha = 0.05;
  McmcConfig mcmc;
  SchemeSettings schemes;
  std::uint64_t seed = 1;
};

enum class ValidationDataset { combined, dhs, mics };
std::string dataset_name(ValidationDataset d);

struct AreaScore {
  Approach approach;
  ValidationDataset dataset;
  int area = 0;
  MetricSet metrics;
};

struct ValidationRow {
  Approach approach;
  ValidationDataset dataset;
  int n_areas = 0;
  MetricSet mean;  // unweighted mean over areas
};

struct ValidationResult {
  std::vector<ValidationRow> rows;
  std::vector<AreaScore> areas;
  std::map<Approach, double> fit_seconds;
};

/// Areal validation: for each area, half of the folds of the clusters inside
/// it are left out, every approach is refit on the rest, and the model's
/// areal prevalence is compared with direct estimates from the left-out
/// clusters through the difference distribution.
ValidationResult run_areal_validation(const Inputs& inputs, std::span<const ClusterRecord> records,
                                      const PriorTargets& priors, const ValidationConfig& config, int threads = 1,
                                      const GeomaskSchemes* prebuilt = nullptr);

std::string validation_table_csv(const ValidationResult& result);
std::string validation_areas_csv(const ValidationResult& result);

/// Population-weighted areal draws of cluster-level prevalence (nugget
/// integrated out) for the populated cells with `labels[g] == area`.
std::vector<double> areal_prevalence_draws(const PosteriorSamples& samples, const FineGrid& grid,
                                           const std::vector<int>& labels, int area, std::size_t n_draws,
                                           int gh_order = 25);

/// Runs fn(0..n-1) on up to `threads` workers. The first exception by index
/// is rethrown after all jobs finish.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

struct DataPaths {
  std::filesystem::path population, urbanicity, regions, admin2, adjacency;
  struct Covariate {
    std::string name;
    std::filesystem::path path;
    CovariateTransform transform = CovariateTransform::identity;
    bool binary = false;
  };
  std::vector<Covariate> covariates;
  std::vector<std::filesystem::path> clusters;
};

struct RunConfig {
  std::filesystem::path config_path;
  std::string config_hash;
  std::uint64_t seed = 1;
  std::filesystem::path output_dir;
  SimulationConfig simulation;
  std::optional<DataPaths> data;
  JitterHandling jitter = JitterHandling::correct;
  GeomaskHandling geomask = GeomaskHandling::full;
  SchemeSettings schemes;
  PriorTargets priors;
  McmcConfig mcmc;
  int predict_draws = 200;
  ValidationConfig validation;
};

RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir);

Inputs load_inputs(const DataPaths& paths);
std::vector<ClusterRecord> load_records(const DataPaths& paths, const Inputs& inputs);
/// Data section for a run: explicit, else the world written by cmd_simulate.
DataPaths resolve_data(const RunConfig& config);

void cmd_simulate(const RunConfig& config);
void cmd_build_schemes(const RunConfig& config, int threads = 1);
void cmd_fit(const RunConfig& config, int threads = 1);
void cmd_predict(const RunConfig& config);
void cmd_validate(const RunConfig& config, int threads = 1);
void cmd_score(const RunConfig& config);

/// 64-bit FNV-1a, hex encoded.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace posfuse
