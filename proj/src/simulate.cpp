#include "posfuse/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "posfuse/errors.hpp"
#include "posfuse/positional.hpp"

namespace posfuse {

namespace {

inline double logistic(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// Random cosine mixture approximating a unit-variance Gaussian field with a
// squared-exponential kernel of the given length.
std::vector<double> spectral_field(const GridGeometry& g, double length, int n_waves, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0 / length);
  std::vector<double> wx(static_cast<std::size_t>(n_waves)), wy(wx.size()), phase(wx.size());
  for (std::size_t j = 0; j < wx.size(); ++j) {
    wx[j] = normal(rng);
    wy[j] = normal(rng);
    phase[j] = 2.0 * M_PI * uniform01(rng);
  }
  const double amp = std::sqrt(2.0 / n_waves);
  std::vector<double> out(g.size());
  for (std::size_t idx = 0; idx < g.size(); ++idx) {
    const Point c = g.center(idx);
    double s = 0.0;
    for (std::size_t j = 0; j < wx.size(); ++j) s += std::cos(wx[j] * c.x + wy[j] * c.y + phase[j]);
    out[idx] = amp * s;
  }
  return out;
}

}  // namespace

void SimulationConfig::validate() const {
  if (n_rows < 1 || n_cols < 1 || !(cell_size > 0)) throw ConfigError("simulation: raster dimensions must be positive");
  if (region_rows < 1 || region_cols < 1 || region_rows > n_rows || region_cols > n_cols)
    throw ConfigError("simulation: invalid region tiling");
  if (admin2_split < 1 || region_rows * admin2_split > n_rows || region_cols * admin2_split > n_cols)
    throw ConfigError("simulation: invalid Admin2 split");
  if (n_smooth_covariates < 0 || !(correlation_length > 0) || n_waves < 1 || !(population_length > 0) || n_towns < 0)
    throw ConfigError("simulation: invalid covariate generator settings");
  if (!(urban_fraction > 0 && urban_fraction < 1)) throw ConfigError("simulation: urban_fraction must lie in (0, 1)");
  if (beta.size() != static_cast<std::size_t>(3 + n_smooth_covariates))
    throw ConfigError("simulation: beta needs intercept, population, urban and one entry per smooth covariate");
  if (!(tau > 0) || !(phi >= 0 && phi <= 1) || !(sigma_eps_sq >= 0))
    throw ConfigError("simulation: parameters outside their support");
  if (households < 1 || dhs_urban < 0 || dhs_rural < 0 || mics_urban < 0 || mics_rural < 0)
    throw ConfigError("simulation: invalid survey sizes");
}

SimulationConfig SimulationConfig::from_json(const nlohmann::json& j) {
  SimulationConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("n_rows", c.n_rows);
    get("n_cols", c.n_cols);
    get("cell_size", c.cell_size);
    get("region_rows", c.region_rows);
    get("region_cols", c.region_cols);
    get("admin2_split", c.admin2_split);
    get("n_smooth_covariates", c.n_smooth_covariates);
    get("correlation_length", c.correlation_length);
    get("n_waves", c.n_waves);
    get("population_length", c.population_length);
    get("n_towns", c.n_towns);
    get("urban_fraction", c.urban_fraction);
    get("beta", c.beta);
    get("tau", c.tau);
    get("phi", c.phi);
    get("sigma_eps_sq", c.sigma_eps_sq);
    get("households", c.households);
    get("dhs_urban", c.dhs_urban);
    get("dhs_rural", c.dhs_rural);
    get("mics_urban", c.mics_urban);
    get("mics_rural", c.mics_rural);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("simulation config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json SimulationConfig::to_json() const {
  return {{"n_rows", n_rows},
          {"n_cols", n_cols},
          {"cell_size", cell_size},
          {"region_rows", region_rows},
          {"region_cols", region_cols},
          {"admin2_split", admin2_split},
          {"n_smooth_covariates", n_smooth_covariates},
          {"correlation_length", correlation_length},
          {"n_waves", n_waves},
          {"population_length", population_length},
          {"n_towns", n_towns},
          {"urban_fraction", urban_fraction},
          {"beta", beta},
          {"tau", tau},
          {"phi", phi},
          {"sigma_eps_sq", sigma_eps_sq},
          {"households", households},
          {"dhs_urban", dhs_urban},
          {"dhs_rural", dhs_rural},
          {"mics_urban", mics_urban},
          {"mics_rural", mics_rural},
          {"seed", seed}};
}

World simulate_world(const SimulationConfig& config, Rng& rng) {
  config.validate();
  GridGeometry g{config.n_rows, config.n_cols, 0.0, 0.0, config.cell_size};
  World world;

  // Population: smooth log-intensity plus town bumps; positive everywhere.
  const auto base = spectral_field(g, config.population_length, config.n_waves, rng);
  std::vector<Point> towns(static_cast<std::size_t>(config.n_towns));
  std::vector<double> town_size(towns.size()), town_amp(towns.size());
  const double width = g.n_cols * g.cell_size, height = g.n_rows * g.cell_size;
  for (std::size_t t = 0; t < towns.size(); ++t) {
    towns[t] = {uniform01(rng) * width, uniform01(rng) * height};
    town_size[t] = 1.0 + 2.0 * uniform01(rng);
    town_amp[t] = 2.0 + 2.0 * uniform01(rng);
  }
  world.population = Raster(g, 0.0);
  for (std::size_t idx = 0; idx < g.size(); ++idx) {
    const Point c = g.center(idx);
    double log_q = 3.0 + 0.8 * base[idx];
    double bump = 0.0;
    for (std::size_t t = 0; t < towns.size(); ++t) {
      const double d = distance(c, towns[t]) / town_size[t];
      bump = std::max(bump, town_amp[t] * std::exp(-0.5 * d * d));
    }
    world.population.values[idx] = std::exp(log_q + bump);
  }

  // Rectangular region tiling with nested Admin2 blocks.
  world.regions = Raster(g, 0.0);
  world.admin2 = Raster(g, 0.0);
  const int a2_rows = config.region_rows * config.admin2_split, a2_cols = config.region_cols * config.admin2_split;
  for (int r = 0; r < g.n_rows; ++r) {
    for (int c = 0; c < g.n_cols; ++c) {
      const int rr = r * config.region_rows / g.n_rows, rc = c * config.region_cols / g.n_cols;
      const int ar = r * a2_rows / g.n_rows, ac = c * a2_cols / g.n_cols;
      world.regions.at(r, c) = rr * config.region_cols + rc;
      world.admin2.at(r, c) = ar * a2_cols + ac;
    }
  }
  // Urban: the top urban_fraction of cells by population within each region.
  const int n_regions = config.region_rows * config.region_cols;
  world.urbanicity = Raster(g, 0.0);
  for (int region = 0; region < n_regions; ++region) {
    std::vector<double> pops;
    for (std::size_t idx = 0; idx < g.size(); ++idx)
      if (static_cast<int>(world.regions.values[idx]) == region) pops.push_back(world.population.values[idx]);
    std::sort(pops.begin(), pops.end(), std::greater<>());
    const auto n_urban =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::round(config.urban_fraction * pops.size())));
    const double threshold = pops[n_urban - 1];
    for (std::size_t idx = 0; idx < g.size(); ++idx)
      if (static_cast<int>(world.regions.values[idx]) == region && world.population.values[idx] >= threshold)
        world.urbanicity.values[idx] = 1.0;
  }

  // Covariates: population (log1p), urban indicator, smooth fields.
  world.covariates.push_back(world.population);
  world.covariates.push_back(world.urbanicity);
  world.transforms.covariates.push_back({"population", CovariateTransform::log1p, false});
  world.transforms.covariates.push_back({"urban", CovariateTransform::identity, true});
  for (int k = 0; k < config.n_smooth_covariates; ++k) {
    Raster r(g, 0.0);
    r.values = spectral_field(g, config.correlation_length, config.n_waves, rng);
    world.covariates.push_back(std::move(r));
    world.transforms.covariates.push_back({"x" + std::to_string(k + 1), CovariateTransform::identity, false});
  }
  world.grid = build_fine_grid(world.covariates, world.population, world.urbanicity, world.regions, world.admin2,
                               world.transforms);
  world.adjacency = adjacency_from_labels(world.regions, n_regions);

  // BYM2 effects: w from the scaled structured precision, v standard normal.
  const auto sp = scaled_structured_precision(world.adjacency);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(sp.rank());
  for (int i = 0; i < sp.rank(); ++i) z(i) = normal(rng);
  world.latent.w = sp.eigenvectors * (z.array() / sp.eigenvalues.array().sqrt()).matrix();
  world.latent.v.resize(n_regions);
  for (int i = 0; i < n_regions; ++i) world.latent.v(i) = normal(rng);

  world.params.beta = Eigen::Map<const Eigen::VectorXd>(config.beta.data(), static_cast<Eigen::Index>(config.beta.size()));
  world.params.tau = config.tau;
  world.params.phi = config.phi;
  world.params.sigma_eps_sq = config.sigma_eps_sq;
  world.risk.resize(world.grid.size());
  for (std::size_t i = 0; i < world.grid.size(); ++i)
    world.risk[i] = logistic(linear_predictor(world.params, world.latent, world.grid, i));
  return world;
}

SimulatedSurvey simulate_survey(const World& world, const SurveyDesign& design, Rng& rng) {
  const auto& grid = world.grid;
  const int n_regions = grid.n_regions();
  std::vector<std::vector<std::size_t>> strata(static_cast<std::size_t>(2 * n_regions));
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& c = grid.cell(i);
    strata[static_cast<std::size_t>(2 * c.region + (c.urbanicity == Urbanicity::urban ? 0 : 1))].push_back(i);
  }
  const double sigma = std::sqrt(world.params.sigma_eps_sq);
  std::normal_distribution<double> normal(0.0, 1.0);
  SimulatedSurvey out;

  for (int region = 0; region < n_regions; ++region) {
    for (int u = 0; u < 2; ++u) {
      const auto urb = u == 0 ? Urbanicity::urban : Urbanicity::rural;
      const int want = u == 0 ? design.urban_per_region : design.rural_per_region;
      if (want == 0) continue;
      const auto& eligible = strata[static_cast<std::size_t>(2 * region + u)];
      if (eligible.size() < static_cast<std::size_t>(want))
        throw DataError("stratum (region " + std::to_string(region) + ", " + (u == 0 ? "urban" : "rural") +
                        ") has fewer eligible cells than requested clusters");

      // Randomized systematic PPS. Cells whose target probability reaches one
      // are taken with certainty and the rest share the remaining draws.
      std::vector<double> q(eligible.size());
      for (std::size_t j = 0; j < eligible.size(); ++j) q[j] = grid.cell(eligible[j]).population;
      std::vector<double> incl(eligible.size(), 0.0);
      std::vector<bool> certain(eligible.size(), false);
      int open = want;
      for (bool changed = true; changed;) {
        changed = false;
        double rest = 0.0;
        for (std::size_t j = 0; j < q.size(); ++j)
          if (!certain[j]) rest += q[j];
        for (std::size_t j = 0; j < q.size(); ++j) {
          if (certain[j]) continue;
          incl[j] = rest > 0.0 ? open * q[j] / rest : 0.0;
          if (incl[j] >= 1.0 - 1e-12) {
            certain[j] = true;
            incl[j] = 1.0;
            --open;
            changed = true;
          }
        }
      }
      std::vector<std::size_t> chosen;
      std::vector<std::size_t> order;
      for (std::size_t j = 0; j < q.size(); ++j) {
        if (certain[j])
          chosen.push_back(j);
        else if (incl[j] > 0.0)
          order.push_back(j);
      }
      std::shuffle(order.begin(), order.end(), rng);
      double next = uniform01(rng), cum = 0.0;
      for (std::size_t j : order) {
        cum += incl[j];
        if (static_cast<int>(chosen.size()) < want && cum > next) {
          chosen.push_back(j);
          next += 1.0;
        }
      }
      // Rounding can leave the final point just past the cumulative total.
      for (auto it = order.rbegin(); static_cast<int>(chosen.size()) < want && it != order.rend(); ++it)
        if (std::find(chosen.begin(), chosen.end(), *it) == chosen.end()) chosen.push_back(*it);
      for (std::size_t pick : chosen) {
        const std::size_t cell = eligible[pick];
        const Point center = grid.cell(cell).center;
        const double half = 0.5 * grid.geometry().cell_size;
        Point t{center.x + (2.0 * uniform01(rng) - 1.0) * half, center.y + (2.0 * uniform01(rng) - 1.0) * half};
        if (!grid.geometry().locate(t) || *grid.geometry().locate(t) != grid.cell(cell).raster_index) t = center;

        const double eta = linear_predictor(world.params, world.latent, grid, cell);
        const double p = logistic(eta + sigma * normal(rng));
        ClusterRecord rec;
        rec.n = design.households;
        rec.y = std::binomial_distribution<int>(design.households, p)(rng);
        rec.urbanicity = urb;
        rec.survey = design.survey;
        // Household weight: the cell is drawn with probability pi, then n of
        // its q households are interviewed.
        rec.weight = grid.cell(cell).population / (design.households * incl[pick]);
        rec.region = region;
        if (design.survey == SurveyTag::jittered) {
          if (design.anonymize) {
            const auto model = AnonymizationModel::jitter_for(urb);
            rec.observed = std::get<Point>(sample_anonymized(model, t, grid, world.admin2, rng));
          } else {
            rec.observed = t;
          }
        }
        out.records.push_back(std::move(rec));
        out.true_location.push_back(t);
        out.true_cell.push_back(cell);
        out.true_risk.push_back(world.risk[cell]);
      }
    }
  }
  return out;
}

}  // namespace posfuse
