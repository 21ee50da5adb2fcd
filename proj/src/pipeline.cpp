#include "posfuse/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "posfuse/errors.hpp"
#include "posfuse/gauss_hermite.hpp"
#include "posfuse/records_io.hpp"

namespace fs = std::filesystem;

namespace posfuse {

namespace {

inline double logistic(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

std::string fmt(const char* spec, double x) {
  if (std::isnan(x)) return "NA";
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, x);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Files written by one command; removed again unless the command commits.
class OutputGuard {
 public:
  explicit OutputGuard(fs::path dir) : dir_(std::move(dir)) {}
  OutputGuard(const OutputGuard&) = delete;
  OutputGuard& operator=(const OutputGuard&) = delete;
  ~OutputGuard() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& p : written_) fs::remove(p, ec);
  }

  fs::path path(const std::string& rel) {
    fs::path p = dir_ / rel;
    fs::create_directories(p.parent_path());
    written_.push_back(p);
    return p;
  }
  void text(const std::string& rel, const std::string& content) {
    const fs::path p = path(rel);
    std::ofstream out(p, std::ios::binary);
    out << content;
    if (!out) throw DataError("failed writing " + p.string());
  }
  std::vector<std::string> relative() const {
    std::vector<std::string> out;
    for (const auto& p : written_) out.push_back(fs::relative(p, dir_).generic_string());
    return out;
  }
  void commit() { committed_ = true; }

 private:
  fs::path dir_;
  std::vector<fs::path> written_;
  bool committed_ = false;
};

void write_manifest(const RunConfig& config, const std::string& command, OutputGuard& guard) {
  const fs::path p = config.output_dir / "manifest.json";
  nlohmann::json m = nlohmann::json::object();
  if (fs::exists(p)) {
    try {
      m = nlohmann::json::parse(read_file(p));
    } catch (const nlohmann::json::exception&) {
      m = nlohmann::json::object();
    }
  }
  m["config_hash"] = config.config_hash;
  m["seed"] = config.seed;
  m["commands"][command] = {{"config_hash", config.config_hash}, {"seed", config.seed}, {"outputs", guard.relative()}};
  fs::create_directories(config.output_dir);
  std::ofstream out(p, std::ios::binary);
  out << m.dump(2) << '\n';
  if (!out) throw DataError("failed writing " + p.string());
}

std::vector<int> region_labels(const FineGrid& grid) {
  std::vector<int> labels(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) labels[g] = grid.cell(g).region;
  return labels;
}

std::size_t cell_for_point(const FineGrid& grid, Point p) {
  const auto c = grid.cell_at(p);
  return c ? *c : grid.nearest_cell(p);
}

JitterHandling jitter_of(Approach a) {
  return (a == Approach::correct_jitter || a == Approach::full) ? JitterHandling::correct : JitterHandling::ignore;
}

GeomaskHandling geomask_of(Approach a) {
  switch (a) {
    case Approach::naive_geomask_draw: return GeomaskHandling::naive_draw;
    case Approach::full: return GeomaskHandling::full;
    default: return GeomaskHandling::exclude;
  }
}

std::optional<DirectEstimate> usable(std::span<const ClusterRecord> clusters) {
  if (clusters.size() < 2) return std::nullopt;
  auto est = direct_estimate(clusters);
  if (!est.variance) return std::nullopt;
  return est;
}

nlohmann::json params_json(const ModelParams& p) {
  return {{"beta", std::vector<double>(p.beta.data(), p.beta.data() + p.beta.size())},
          {"tau", p.tau},
          {"phi", p.phi},
          {"sigma_eps_sq", p.sigma_eps_sq}};
}

struct Summary {
  double mean, sd, q025, q975;
};

Summary summarize(std::vector<double> x) {
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  const auto pred = PredictiveSample::unbounded(std::move(x));
  const double sd = pred.size() > 1 ? std::sqrt(ss / static_cast<double>(pred.size() - 1)) : 0.0;
  return {m, sd, pred.quantile(0.025), pred.quantile(0.975)};
}

template <typename T>
void get_opt(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

McmcConfig parse_mcmc(const nlohmann::json& j, McmcConfig m) {
  check_keys(j, {"n_iterations", "n_burnin", "thin", "seed", "adapt_window", "target_scalar", "target_vector", "gh_order"},
             "mcmc");
  get_opt(j, "n_iterations", m.n_iterations);
  get_opt(j, "n_burnin", m.n_burnin);
  get_opt(j, "thin", m.thin);
  get_opt(j, "seed", m.seed);
  get_opt(j, "adapt_window", m.adapt_window);
  get_opt(j, "target_scalar", m.target_scalar);
  get_opt(j, "target_vector", m.target_vector);
  get_opt(j, "gh_order", m.gh_order);
  m.validate();
  return m;
}

}  // namespace

PriorSet PriorTargets::resolve(const Adjacency& adjacency) const {
  PriorSet ps;
  auto sp = std::make_shared<StructuredPrecision>(scaled_structured_precision(adjacency));
  ps.tau = PCPrecisionPrior::from_lower_probability(tau_u, tau_p);
  ps.sigma_eps = PCPrecisionPrior::from_lower_probability(sigma_u, sigma_p);
  ps.phi.gamma_tilde = sp->gamma_tilde;
  ps.phi.lambda_pc = solve_lambda_phi(phi, phi_prob, sp->gamma_tilde);
  ps.structured = std::move(sp);
  ps.beta_sd = beta_sd;
  return ps;
}

Inputs inputs_from_world(const World& world) {
  Inputs in;
  in.population = world.population;
  in.urbanicity = world.urbanicity;
  in.regions = world.regions;
  in.admin2 = world.admin2;
  in.covariates = world.covariates;
  in.transforms = world.transforms;
  in.grid = world.grid;
  in.adjacency = world.adjacency;
  return in;
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

GeomaskSchemes build_geomask_schemes(const Inputs& inputs, const SchemeSettings& settings, std::uint64_t seed,
                                     int threads) {
  std::set<int> keys;
  for (const auto& c : inputs.grid.cells()) keys.insert(stratum_key(c.region, c.urbanicity));
  const std::vector<int> key_list(keys.begin(), keys.end());
  std::vector<IntegrationScheme> built(key_list.size());
  TransformSpec spec = inputs.transforms;
  spec.lambda_mix = settings.lambda_mix;
  parallel_for(key_list.size(), threads, [&](std::size_t i) {
    const int key = key_list[i];
    Rng rng = make_rng(seed, 5000 + static_cast<std::uint64_t>(key));
    built[i] = build_geomask_scheme(inputs.grid, key / 2, key % 2 == 0 ? Urbanicity::urban : Urbanicity::rural,
                                    settings.k_geomask, spec, rng);
  });
  GeomaskSchemes out;
  for (std::size_t i = 0; i < key_list.size(); ++i) out.emplace(key_list[i], std::move(built[i]));
  return out;
}

std::vector<ClusterRecord> prepare_records(std::span<const ClusterRecord> records, const Inputs& inputs,
                                           const SchemeSettings& settings, JitterHandling jitter,
                                           GeomaskHandling geomask, const GeomaskSchemes& schemes, Rng& rng) {
  const auto& grid = inputs.grid;
  std::vector<ClusterRecord> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    ClusterRecord r = rec;
    if (r.survey == SurveyTag::jittered) {
      if (!r.observed) throw DataError("jittered cluster without coordinates");
      if (jitter == JitterHandling::ignore) {
        r.scheme = IntegrationScheme::single(cell_for_point(grid, *r.observed));
      } else {
        const int k = r.urbanicity == Urbanicity::urban ? settings.k_urban : settings.k_rural;
        r.scheme = build_jitter_scheme(*r.observed, r.urbanicity, grid, inputs.admin2, k);
      }
    } else {
      if (geomask == GeomaskHandling::exclude) continue;
      const int key = stratum_key(*r.region, r.urbanicity);
      if (geomask == GeomaskHandling::full) {
        const auto it = schemes.find(key);
        if (it == schemes.end())
          throw DataError("no populated cells for geomasked cluster in region " + std::to_string(*r.region));
        r.scheme = it->second;
      } else {
        // One location drawn with probability proportional to population.
        double total = 0.0;
        std::vector<std::size_t> cells;
        for (std::size_t g = 0; g < grid.size(); ++g) {
          const auto& c = grid.cell(g);
          if (c.region == *r.region && c.urbanicity == r.urbanicity) {
            cells.push_back(g);
            total += c.population;
          }
        }
        if (cells.empty())
          throw DataError("no populated cells for geomasked cluster in region " + std::to_string(*r.region));
        double target = uniform01(rng) * total;
        std::size_t pick = cells.back();
        for (std::size_t g : cells) {
          target -= grid.cell(g).population;
          if (target < 0.0) {
            pick = g;
            break;
          }
        }
        r.scheme = IntegrationScheme::single(pick);
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

Approach parse_approach(const std::string& name) {
  if (name == "ignore-jitter") return Approach::ignore_jitter;
  if (name == "correct-jitter") return Approach::correct_jitter;
  if (name == "naive-geomask-draw") return Approach::naive_geomask_draw;
  if (name == "full") return Approach::full;
  throw ConfigError("unknown approach '" + name + "'");
}

std::string approach_name(Approach a) {
  switch (a) {
    case Approach::ignore_jitter: return "ignore-jitter";
    case Approach::correct_jitter: return "correct-jitter";
    case Approach::naive_geomask_draw: return "naive-geomask-draw";
    case Approach::full: return "full";
  }
  return "";
}

std::string approach_model(Approach a) {
  switch (a) {
    case Approach::ignore_jitter: return "M_d";
    case Approach::correct_jitter: return "M_D";
    case Approach::naive_geomask_draw: return "M_dm";
    case Approach::full: return "M_DM";
  }
  return "";
}

std::string dataset_name(ValidationDataset d) {
  switch (d) {
    case ValidationDataset::combined: return "DHS+MICS";
    case ValidationDataset::dhs: return "DHS";
    case ValidationDataset::mics: return "MICS";
  }
  return "";
}

std::vector<double> areal_prevalence_draws(const PosteriorSamples& samples, const FineGrid& grid,
                                           const std::vector<int>& labels, int area, std::size_t n_draws,
                                           int gh_order) {
  const std::size_t stored = samples.size();
  if (n_draws == 0 || n_draws > stored) n_draws = stored;
  std::vector<std::size_t> cells;
  double total = 0.0;
  for (std::size_t g = 0; g < grid.size(); ++g)
    if (labels[g] == area) {
      cells.push_back(g);
      total += grid.cell(g).population;
    }
  if (!(total > 0)) throw DataError("area " + std::to_string(area) + " has no population");
  const auto& rule = gauss_hermite(gh_order);
  std::vector<double> weights(rule.nodes.size());
  for (std::size_t j = 0; j < weights.size(); ++j) weights[j] = std::exp(rule.log_weights[j]);
  const auto& X = grid.covariates();
  const auto p = static_cast<Eigen::Index>(grid.n_covariates());
  std::vector<double> out(n_draws);
  for (std::size_t d = 0; d < n_draws; ++d) {
    const std::size_t idx = d * stored / n_draws;
    const auto& par = samples.params[idx];
    const Eigen::VectorXd u = bym2_effect(par, samples.latent[idx]);
    const double sigma = std::sqrt(par.sigma_eps_sq);
    double acc = 0.0;
    for (std::size_t g : cells) {
      const double eta = par.beta(0) + X.row(static_cast<Eigen::Index>(g)).dot(par.beta.segment(1, p)) +
                         u(grid.cell(g).region);
      double r = 0.0;
      for (std::size_t j = 0; j < weights.size(); ++j) r += weights[j] * logistic(eta + sigma * rule.nodes[j]);
      acc += grid.cell(g).population * r;
    }
    out[d] = std::clamp(acc / total, 0.0, 1.0);
  }
  return out;
}

ValidationResult run_areal_validation(const Inputs& inputs, std::span<const ClusterRecord> records,
                                      const PriorTargets& priors, const ValidationConfig& config, int threads,
                                      const GeomaskSchemes* prebuilt) {
  if (config.n_folds < 2 || config.folds_left_out < 1 || config.folds_left_out >= config.n_folds)
    throw ConfigError("validation: need 1 <= folds_left_out < n_folds");
  if (config.approaches.empty()) throw ConfigError("validation: no approaches");
  const auto& grid = inputs.grid;
  const PriorSet prior_set = priors.resolve(inputs.adjacency);

  std::vector<int> areas = config.areas;
  if (areas.empty())
    for (int a = 0; a < grid.n_regions(); ++a) areas.push_back(a);

  Rng fold_rng = make_rng(config.seed, 1);
  const FoldPlan plan = make_folds(records, fold_rng, config.n_folds);

  // Left-out clusters per area: the same folds for every approach.
  std::vector<std::vector<bool>> left_out(areas.size(), std::vector<bool>(records.size(), false));
  for (std::size_t ai = 0; ai < areas.size(); ++ai) {
    std::vector<int> folds(static_cast<std::size_t>(config.n_folds));
    std::iota(folds.begin(), folds.end(), 1);
    Rng rng = make_rng(config.seed, 100 + static_cast<std::uint64_t>(areas[ai]));
    std::shuffle(folds.begin(), folds.end(), rng);
    const std::set<int> chosen(folds.begin(), folds.begin() + config.folds_left_out);
    for (std::size_t c = 0; c < records.size(); ++c)
      left_out[ai][c] = *records[c].region == areas[ai] && chosen.count(plan.fold[c]) > 0;
  }

  GeomaskSchemes own;
  const bool need_geomask = std::any_of(config.approaches.begin(), config.approaches.end(),
                                        [](Approach a) { return a == Approach::full; });
  if (need_geomask && !prebuilt) own = build_geomask_schemes(inputs, config.schemes, config.seed, threads);
  const GeomaskSchemes& schemes = prebuilt ? *prebuilt : own;

  const std::vector<int> labels = region_labels(grid);
  const std::size_t n_jobs = config.approaches.size() * areas.size();
  std::vector<std::vector<double>> draws(n_jobs);
  std::vector<double> seconds(n_jobs, 0.0);
  parallel_for(n_jobs, threads, [&](std::size_t job) {
    const auto t0 = std::chrono::steady_clock::now();
    const Approach approach = config.approaches[job / areas.size()];
    const std::size_t ai = job % areas.size();
    std::vector<ClusterRecord> train;
    for (std::size_t c = 0; c < records.size(); ++c)
      if (!left_out[ai][c]) train.push_back(records[c]);
    Rng place_rng = make_rng(config.seed, 7000 + static_cast<std::uint64_t>(areas[ai]));
    const auto prepared =
        prepare_records(train, inputs, config.schemes, jitter_of(approach), geomask_of(approach), schemes, place_rng);
    McmcConfig mc = config.mcmc;
    mc.seed = mix_seed(config.seed, 20000 + static_cast<std::uint64_t>(areas[ai]));
    const auto samples = fit(prepared, grid, prior_set, mc);
    draws[job] = areal_prevalence_draws(samples, grid, labels, areas[ai], static_cast<std::size_t>(config.n_pred_draws));
    seconds[job] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  });

  ValidationResult result;
  const ValidationDataset datasets[] = {ValidationDataset::combined, ValidationDataset::dhs, ValidationDataset::mics};
  for (std::size_t job = 0; job < n_jobs; ++job) {
    const Approach approach = config.approaches[job / areas.size()];
    const std::size_t ai = job % areas.size();
    result.fit_seconds[approach] += seconds[job];
    std::vector<ClusterRecord> dhs, mics;
    for (std::size_t c = 0; c < records.size(); ++c) {
      if (!left_out[ai][c]) continue;
      (records[c].survey == SurveyTag::jittered ? dhs : mics).push_back(records[c]);
    }
    const auto d_dhs = usable(dhs), d_mics = usable(mics);
    const auto model = PredictiveSample::probability(draws[job]);
    for (std::size_t di = 0; di < 3; ++di) {
      std::optional<DirectEstimate> target;
      switch (datasets[di]) {
        case ValidationDataset::dhs: target = d_dhs; break;
        case ValidationDataset::mics: target = d_mics; break;
        case ValidationDataset::combined:
          if (d_dhs && d_mics) target = precision_weighted_combine(*d_dhs, *d_mics);
          else target = d_dhs ? d_dhs : d_mics;
          break;
      }
      if (!target) continue;
      // Common random numbers across approaches for the same area and dataset.
      Rng rng = make_rng(config.seed, 900000 + 3 * static_cast<std::uint64_t>(areas[ai]) + di);
      const auto diff = diff_distribution(model, *target, rng, static_cast<std::size_t>(config.diff_draws));
      result.areas.push_back({approach, datasets[di], areas[ai], score_all(0.0, diff, config.alpha)});
    }
  }

  for (Approach a : config.approaches) {
    for (ValidationDataset d : datasets) {
      ValidationRow row{a, d, 0, {}};
      for (const auto& s : result.areas) {
        if (s.approach != a || s.dataset != d) continue;
        ++row.n_areas;
        row.mean.bias += s.metrics.bias;
        row.mean.mse += s.metrics.mse;
        row.mean.crps += s.metrics.crps;
        row.mean.interval_score += s.metrics.interval_score;
        row.mean.coverage += s.metrics.coverage;
        row.mean.width += s.metrics.width;
      }
      const double n = row.n_areas > 0 ? row.n_areas : std::numeric_limits<double>::quiet_NaN();
      row.mean.bias /= n;
      row.mean.mse /= n;
      row.mean.crps /= n;
      row.mean.interval_score /= n;
      row.mean.coverage /= n;
      row.mean.width /= n;
      result.rows.push_back(row);
    }
  }
  return result;
}

std::string validation_table_csv(const ValidationResult& result) {
  std::string out = "approach,model,dataset,n_areas,bias,mse,crps,interval_score,coverage,width\n";
  for (const auto& r : result.rows) {
    out += approach_name(r.approach) + "," + approach_model(r.approach) + "," + dataset_name(r.dataset) + "," +
           std::to_string(r.n_areas) + "," + fmt("%.10g", r.mean.bias) + "," + fmt("%.10g", r.mean.mse) + "," +
           fmt("%.10g", r.mean.crps) + "," + fmt("%.10g", r.mean.interval_score) + "," +
           fmt("%.10g", r.mean.coverage) + "," + fmt("%.10g", r.mean.width) + "\n";
  }
  return out;
}

std::string validation_areas_csv(const ValidationResult& result) {
  std::string out = "approach,model,dataset,area,bias,mse,crps,interval_score,coverage,width\n";
  for (const auto& s : result.areas) {
    out += approach_name(s.approach) + "," + approach_model(s.approach) + "," + dataset_name(s.dataset) + "," +
           std::to_string(s.area) + "," + fmt("%.10g", s.metrics.bias) + "," + fmt("%.10g", s.metrics.mse) + "," +
           fmt("%.10g", s.metrics.crps) + "," + fmt("%.10g", s.metrics.interval_score) + "," +
           fmt("%.10g", s.metrics.coverage) + "," + fmt("%.10g", s.metrics.width) + "\n";
  }
  return out;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RunConfig parse_run_config(const nlohmann::json& j, const fs::path& base_dir) {
  RunConfig c;
  try {
    check_keys(j, {"seed", "output_dir", "simulation", "data", "anonymization", "schemes", "priors", "mcmc", "predict",
                   "validate"},
               "config");
    get_opt(j, "seed", c.seed);
    c.output_dir = base_dir / j.value("output_dir", std::string("run"));
    if (j.contains("simulation")) c.simulation = SimulationConfig::from_json(j.at("simulation"));
    c.simulation.seed = c.seed;

    if (j.contains("data")) {
      const auto& d = j.at("data");
      check_keys(d, {"population", "urbanicity", "regions", "admin2", "adjacency", "covariates", "clusters"}, "data");
      DataPaths p;
      auto path_of = [&](const char* key) -> fs::path {
        if (!d.contains(key)) throw ConfigError(std::string("data: missing '") + key + "'");
        return base_dir / d.at(key).get<std::string>();
      };
      p.population = path_of("population");
      p.urbanicity = path_of("urbanicity");
      p.regions = path_of("regions");
      p.admin2 = path_of("admin2");
      if (d.contains("adjacency")) p.adjacency = base_dir / d.at("adjacency").get<std::string>();
      for (const auto& cv : d.value("covariates", nlohmann::json::array())) {
        check_keys(cv, {"name", "path", "transform", "binary"}, "data.covariates");
        DataPaths::Covariate cov;
        cov.name = cv.at("name").get<std::string>();
        cov.path = base_dir / cv.at("path").get<std::string>();
        cov.transform = parse_transform(cv.value("transform", std::string("identity")));
        cov.binary = cv.value("binary", false);
        p.covariates.push_back(std::move(cov));
      }
      for (const auto& f : d.value("clusters", nlohmann::json::array())) p.clusters.push_back(base_dir / f.get<std::string>());
      c.data = std::move(p);
    }

    if (j.contains("anonymization")) {
      const auto& a = j.at("anonymization");
      check_keys(a, {"jitter", "geomask"}, "anonymization");
      const auto jit = a.value("jitter", std::string("correct"));
      if (jit == "correct") c.jitter = JitterHandling::correct;
      else if (jit == "ignore") c.jitter = JitterHandling::ignore;
      else throw ConfigError("anonymization.jitter must be 'correct' or 'ignore'");
      const auto geo = a.value("geomask", std::string("full"));
      if (geo == "full") c.geomask = GeomaskHandling::full;
      else if (geo == "naive-draw") c.geomask = GeomaskHandling::naive_draw;
      else if (geo == "exclude") c.geomask = GeomaskHandling::exclude;
      else throw ConfigError("anonymization.geomask must be 'full', 'naive-draw' or 'exclude'");
    }

    if (j.contains("schemes")) {
      const auto& s = j.at("schemes");
      check_keys(s, {"k_geomask", "k_urban", "k_rural", "lambda_mix"}, "schemes");
      get_opt(s, "k_geomask", c.schemes.k_geomask);
      get_opt(s, "k_urban", c.schemes.k_urban);
      get_opt(s, "k_rural", c.schemes.k_rural);
      get_opt(s, "lambda_mix", c.schemes.lambda_mix);
      if (c.schemes.k_geomask < 1) throw ConfigError("schemes.k_geomask must be positive");
      if (c.schemes.k_urban < 1 || (c.schemes.k_urban - 1) % 5 != 0 || c.schemes.k_rural < 1 ||
          (c.schemes.k_rural - 1) % 5 != 0)
        throw ConfigError("schemes: jitter K must have the form 1 + 5m");
      if (!(c.schemes.lambda_mix >= 0)) throw ConfigError("schemes.lambda_mix must be non-negative");
    }

    if (j.contains("priors")) {
      const auto& p = j.at("priors");
      check_keys(p, {"tau", "sigma_eps", "phi", "beta_sd"}, "priors");
      auto precision = [&](const char* key, double& u, double& prob) {
        if (!p.contains(key)) return;
        const auto& q = p.at(key);
        check_keys(q, {"u", "alpha"}, std::string("priors.") + key);
        get_opt(q, "u", u);
        get_opt(q, "alpha", prob);
        if (!(u > 0) || !(prob > 0 && prob < 1)) throw ConfigError(std::string("priors.") + key + ": need u > 0, 0 < alpha < 1");
      };
      precision("tau", c.priors.tau_u, c.priors.tau_p);
      precision("sigma_eps", c.priors.sigma_u, c.priors.sigma_p);
      if (p.contains("phi")) {
        const auto& q = p.at("phi");
        check_keys(q, {"phi", "prob"}, "priors.phi");
        get_opt(q, "phi", c.priors.phi);
        get_opt(q, "prob", c.priors.phi_prob);
        if (!(c.priors.phi > 0 && c.priors.phi < 1) || !(c.priors.phi_prob > 0 && c.priors.phi_prob < 1))
          throw ConfigError("priors.phi: need phi and prob in (0, 1)");
      }
      if (p.contains("beta_sd")) c.priors.beta_sd = p.at("beta_sd").get<double>();
    }

    c.mcmc.seed = c.seed;
    if (j.contains("mcmc")) c.mcmc = parse_mcmc(j.at("mcmc"), c.mcmc);

    if (j.contains("predict")) {
      check_keys(j.at("predict"), {"n_draws"}, "predict");
      get_opt(j.at("predict"), "n_draws", c.predict_draws);
      if (c.predict_draws < 1) throw ConfigError("predict.n_draws must be positive");
    }

    c.validation.mcmc = c.mcmc;
    c.validation.seed = c.seed;
    c.validation.schemes = c.schemes;
    if (j.contains("validate")) {
      const auto& v = j.at("validate");
      check_keys(v, {"approaches", "n_folds", "folds_left_out", "areas", "n_pred_draws", "diff_draws", "alpha", "mcmc"},
                 "validate");
      if (v.contains("approaches")) {
        c.validation.approaches.clear();
        for (const auto& a : v.at("approaches")) c.validation.approaches.push_back(parse_approach(a.get<std::string>()));
      }
      get_opt(v, "n_folds", c.validation.n_folds);
      get_opt(v, "folds_left_out", c.validation.folds_left_out);
      get_opt(v, "areas", c.validation.areas);
      get_opt(v, "n_pred_draws", c.validation.n_pred_draws);
      get_opt(v, "diff_draws", c.validation.diff_draws);
      get_opt(v, "alpha", c.validation.alpha);
      if (v.contains("mcmc")) c.validation.mcmc = parse_mcmc(v.at("mcmc"), c.validation.mcmc);
      if (c.validation.n_pred_draws < 1 || c.validation.diff_draws < 1 || !(c.validation.alpha > 0 && c.validation.alpha < 1))
        throw ConfigError("validate: invalid draw counts or alpha");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  const std::string text = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  RunConfig c = parse_run_config(j, path.parent_path());
  c.config_path = path;
  c.config_hash = fnv1a_hex(text);
  return c;
}

DataPaths resolve_data(const RunConfig& config) {
  if (config.data) return *config.data;
  const fs::path world = config.output_dir / "world" / "data.json";
  if (!fs::exists(world)) throw ConfigError("no data section and no simulated world at " + world.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(world));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(world.string() + ": " + e.what());
  }
  nlohmann::json wrapped = {{"data", j}};
  return *parse_run_config(wrapped, world.parent_path()).data;
}

Inputs load_inputs(const DataPaths& paths) {
  auto require = [](const fs::path& p) {
    if (!fs::exists(p)) throw DataError("missing input: " + p.string());
  };
  Inputs in;
  require(paths.population);
  require(paths.urbanicity);
  require(paths.regions);
  require(paths.admin2);
  in.population = load_ascii_grid(paths.population.string());
  in.urbanicity = load_ascii_grid(paths.urbanicity.string());
  in.regions = load_ascii_grid(paths.regions.string());
  in.admin2 = load_ascii_grid(paths.admin2.string());
  for (const auto& c : paths.covariates) {
    require(c.path);
    in.covariates.push_back(load_ascii_grid(c.path.string()));
    in.transforms.covariates.push_back({c.name, c.transform, c.binary});
  }
  in.grid = build_fine_grid(in.covariates, in.population, in.urbanicity, in.regions, in.admin2, in.transforms);
  if (!paths.adjacency.empty()) {
    require(paths.adjacency);
    in.adjacency = adjacency_from_json_text(read_file(paths.adjacency));
    if (static_cast<int>(in.adjacency.size()) < in.grid.n_regions())
      throw DataError("adjacency lists fewer regions than the region raster");
  } else {
    in.adjacency = adjacency_from_labels(in.regions, in.grid.n_regions());
  }
  return in;
}

std::vector<ClusterRecord> load_records(const DataPaths& paths, const Inputs& inputs) {
  std::vector<ClusterRecord> out;
  for (const auto& p : paths.clusters) {
    if (!fs::exists(p)) throw DataError("missing input: " + p.string());
    auto part = read_clusters_csv(p.string(), &inputs.regions);
    for (auto& r : part) {
      if (*r.region < 0 || *r.region >= inputs.grid.n_regions())
        throw DataError(p.string() + ": region label out of range");
      out.push_back(std::move(r));
    }
  }
  if (out.empty()) throw DataError("no cluster records");
  return out;
}

void cmd_simulate(const RunConfig& config) {
  OutputGuard guard(config.output_dir);
  Rng world_rng = make_rng(config.seed, 0);
  const World world = simulate_world(config.simulation, world_rng);
  const auto& sim = config.simulation;
  Rng dhs_rng = make_rng(config.seed, 1), mics_rng = make_rng(config.seed, 2);
  const auto dhs = simulate_survey(world, {SurveyTag::jittered, sim.dhs_urban, sim.dhs_rural, sim.households, true}, dhs_rng);
  const auto mics =
      simulate_survey(world, {SurveyTag::geomasked, sim.mics_urban, sim.mics_rural, sim.households, true}, mics_rng);

  write_ascii_grid(world.population, guard.path("world/population.asc").string());
  write_ascii_grid(world.urbanicity, guard.path("world/urbanicity.asc").string());
  write_ascii_grid(world.regions, guard.path("world/regions.asc").string());
  write_ascii_grid(world.admin2, guard.path("world/admin2.asc").string());
  nlohmann::json covs = nlohmann::json::array();
  for (std::size_t k = 0; k < world.covariates.size(); ++k) {
    const auto& spec = world.transforms.covariates[k];
    const std::string rel = "world/covariate_" + spec.name + ".asc";
    write_ascii_grid(world.covariates[k], guard.path(rel).string());
    covs.push_back({{"name", spec.name},
                    {"path", "covariate_" + spec.name + ".asc"},
                    {"transform", transform_name(spec.transform)},
                    {"binary", spec.binary}});
  }
  guard.text("world/adjacency.json", adjacency_to_json_text(world.adjacency));
  write_clusters_csv(dhs.records, guard.path("world/dhs.csv").string());
  write_clusters_csv(mics.records, guard.path("world/mics.csv").string());
  const nlohmann::json data = {{"population", "population.asc"},
                               {"urbanicity", "urbanicity.asc"},
                               {"regions", "regions.asc"},
                               {"admin2", "admin2.asc"},
                               {"adjacency", "adjacency.json"},
                               {"covariates", covs},
                               {"clusters", {"dhs.csv", "mics.csv"}}};
  guard.text("world/data.json", data.dump(2) + "\n");

  nlohmann::json truth = params_json(world.params);
  truth["w"] = std::vector<double>(world.latent.w.data(), world.latent.w.data() + world.latent.w.size());
  truth["v"] = std::vector<double>(world.latent.v.data(), world.latent.v.data() + world.latent.v.size());
  truth["simulation"] = sim.to_json();
  nlohmann::json norm = nlohmann::json::array();
  for (const auto& s : world.transforms.covariates) norm.push_back({{"name", s.name}, {"mean", s.mean}, {"sd", s.sd}});
  truth["covariates"] = norm;
  auto locations = [](const SimulatedSurvey& s) {
    nlohmann::json a = nlohmann::json::array();
    for (std::size_t i = 0; i < s.records.size(); ++i)
      a.push_back({{"x", s.true_location[i].x}, {"y", s.true_location[i].y}, {"risk", s.true_risk[i]}});
    return a;
  };
  truth["dhs"] = locations(dhs);
  truth["mics"] = locations(mics);
  guard.text("world/truth.json", truth.dump(2) + "\n");
  write_manifest(config, "simulate", guard);
  guard.commit();
}

void cmd_build_schemes(const RunConfig& config, int threads) {
  const DataPaths paths = resolve_data(config);
  const Inputs inputs = load_inputs(paths);
  const auto records = load_records(paths, inputs);
  OutputGuard guard(config.output_dir);
  const auto schemes = build_geomask_schemes(inputs, config.schemes, config.seed, threads);
  for (const auto& [key, scheme] : schemes) {
    const std::string name =
        "schemes/geomask_" + std::to_string(key / 2) + "_" + (key % 2 == 0 ? "U" : "R") + ".json";
    guard.text(name, scheme_to_json(scheme).dump() + "\n");
  }
  nlohmann::json jitter = nlohmann::json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.survey != SurveyTag::jittered) continue;
    const int k = r.urbanicity == Urbanicity::urban ? config.schemes.k_urban : config.schemes.k_rural;
    jitter.push_back({{"record", i}, {"scheme", scheme_to_json(build_jitter_scheme(*r.observed, r.urbanicity, inputs.grid, inputs.admin2, k))}});
  }
  guard.text("schemes/jitter.json", jitter.dump() + "\n");
  write_manifest(config, "build-schemes", guard);
  guard.commit();
}

void cmd_fit(const RunConfig& config, int threads) {
  const DataPaths paths = resolve_data(config);
  const Inputs inputs = load_inputs(paths);
  const auto records = load_records(paths, inputs);
  GeomaskSchemes schemes;
  if (config.geomask == GeomaskHandling::full)
    schemes = build_geomask_schemes(inputs, config.schemes, config.seed, threads);
  Rng rng = make_rng(config.seed, 3);
  const auto prepared = prepare_records(records, inputs, config.schemes, config.jitter, config.geomask, schemes, rng);
  const PriorSet priors = config.priors.resolve(inputs.adjacency);
  const auto samples = fit(prepared, inputs.grid, priors, config.mcmc);

  OutputGuard guard(config.output_dir);
  write_samples_csv(samples, guard.path("samples.csv").string());
  nlohmann::json summary;
  summary["n_draws"] = samples.size();
  summary["n_clusters"] = prepared.size();
  summary["acceptance"] = samples.acceptance;
  auto add = [&](const std::string& name, std::vector<double> x) {
    const auto s = summarize(std::move(x));
    summary["parameters"][name] = {{"mean", s.mean}, {"sd", s.sd}, {"q025", s.q025}, {"q975", s.q975}};
  };
  const auto nb = samples.params.front().beta.size();
  for (Eigen::Index j = 0; j < nb; ++j) {
    std::vector<double> x;
    for (const auto& p : samples.params) x.push_back(p.beta(j));
    add(j == 0 ? "beta_intercept" : "beta_" + inputs.grid.covariate_names()[static_cast<std::size_t>(j - 1)], x);
  }
  std::vector<double> tau, phi, sig;
  for (const auto& p : samples.params) {
    tau.push_back(p.tau);
    phi.push_back(p.phi);
    sig.push_back(p.sigma_eps_sq);
  }
  add("tau", tau);
  add("phi", phi);
  add("sigma_eps_sq", sig);
  guard.text("fit_summary.json", summary.dump(2) + "\n");
  write_manifest(config, "fit", guard);
  guard.commit();
}

void cmd_predict(const RunConfig& config) {
  const DataPaths paths = resolve_data(config);
  const Inputs inputs = load_inputs(paths);
  const fs::path samples_path = config.output_dir / "samples.csv";
  if (!fs::exists(samples_path)) throw DataError("missing input: " + samples_path.string() + " (run fit first)");
  const auto samples = read_samples_csv(samples_path.string());
  const auto& grid = inputs.grid;
  const std::size_t n_draws = std::min<std::size_t>(static_cast<std::size_t>(config.predict_draws), samples.size());
  const auto risk = predict_risk(samples, grid, n_draws);

  OutputGuard guard(config.output_dir);
  Raster mean(grid.geometry(), -9999.0), width(grid.geometry(), -9999.0);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const Eigen::VectorXd col = risk.values.col(static_cast<Eigen::Index>(g));
    const auto s = summarize(std::vector<double>(col.data(), col.data() + col.size()));
    mean.values[grid.cell(g).raster_index] = s.mean;
    width.values[grid.cell(g).raster_index] = s.q975 - s.q025;
  }
  write_ascii_grid(mean, guard.path("risk_mean.asc").string());
  write_ascii_grid(width, guard.path("risk_ci_width.asc").string());
  auto areal = [&](AggregationLevel level, const std::string& name) {
    const Eigen::MatrixXd a = aggregate(risk, grid, level);
    std::string out = "area,mean,sd,q025,q975\n";
    for (Eigen::Index k = 0; k < a.cols(); ++k) {
      const Eigen::VectorXd col = a.col(k);
      if (!col.allFinite()) {
        out += std::to_string(k) + ",NA,NA,NA,NA\n";
        continue;
      }
      const auto s = summarize(std::vector<double>(col.data(), col.data() + col.size()));
      out += std::to_string(k) + "," + fmt("%.10g", s.mean) + "," + fmt("%.10g", s.sd) + "," + fmt("%.10g", s.q025) +
             "," + fmt("%.10g", s.q975) + "\n";
    }
    guard.text(name, out);
  };
  areal(AggregationLevel::region, "areal_region.csv");
  areal(AggregationLevel::admin2, "areal_admin2.csv");
  write_manifest(config, "predict", guard);
  guard.commit();
}

void cmd_validate(const RunConfig& config, int threads) {
  const DataPaths paths = resolve_data(config);
  const Inputs inputs = load_inputs(paths);
  const auto records = load_records(paths, inputs);
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = run_areal_validation(inputs, records, config.priors, config.validation, threads);
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  OutputGuard guard(config.output_dir);
  guard.text("validation_scores.csv", validation_table_csv(result));
  guard.text("validation_areas.csv", validation_areas_csv(result));
  nlohmann::json timing;
  timing["total_seconds"] = total;
  for (const auto& [a, s] : result.fit_seconds) timing["fit_seconds"][approach_name(a)] = s;
  guard.text("validation_timing.json", timing.dump(2) + "\n");
  write_manifest(config, "validate", guard);
  guard.commit();
}

void cmd_score(const RunConfig& config) {
  const DataPaths paths = resolve_data(config);
  const Inputs inputs = load_inputs(paths);
  const auto records = load_records(paths, inputs);
  const fs::path samples_path = config.output_dir / "samples.csv";
  if (!fs::exists(samples_path)) throw DataError("missing input: " + samples_path.string() + " (run fit first)");
  const auto samples = read_samples_csv(samples_path.string());
  const auto labels = region_labels(inputs.grid);

  std::string out = "area,dataset,n_clusters,direct_mean,model_mean,bias,mse,crps,interval_score,coverage,width\n";
  for (int a = 0; a < inputs.grid.n_regions(); ++a) {
    std::vector<ClusterRecord> dhs, mics;
    for (const auto& r : records)
      if (*r.region == a) (r.survey == SurveyTag::jittered ? dhs : mics).push_back(r);
    const auto draws = areal_prevalence_draws(samples, inputs.grid, labels, a,
                                              std::min<std::size_t>(static_cast<std::size_t>(config.predict_draws), samples.size()));
    const auto model = PredictiveSample::probability(draws);
    const auto d_dhs = usable(dhs), d_mics = usable(mics);
    const std::pair<std::string, std::optional<DirectEstimate>> targets[] = {
        {"DHS+MICS", d_dhs && d_mics ? std::optional(precision_weighted_combine(*d_dhs, *d_mics)) : (d_dhs ? d_dhs : d_mics)},
        {"DHS", d_dhs},
        {"MICS", d_mics}};
    const std::size_t counts[] = {dhs.size() + mics.size(), dhs.size(), mics.size()};
    for (std::size_t di = 0; di < 3; ++di) {
      const auto& [name, target] = targets[di];
      if (!target) continue;
      Rng rng = make_rng(config.seed, 900000 + 3 * static_cast<std::uint64_t>(a) + di);
      const auto diff = diff_distribution(model, *target, rng, static_cast<std::size_t>(config.validation.diff_draws));
      const auto m = score_all(0.0, diff, config.validation.alpha);
      out += std::to_string(a) + "," + name + "," + std::to_string(counts[di]) + "," + fmt("%.10g", target->mean) + "," +
             fmt("%.10g", model.mean()) + "," + fmt("%.10g", m.bias) + "," + fmt("%.10g", m.mse) + "," +
             fmt("%.10g", m.crps) + "," + fmt("%.10g", m.interval_score) + "," + fmt("%.10g", m.coverage) + "," +
             fmt("%.10g", m.width) + "\n";
    }
  }
  OutputGuard guard(config.output_dir);
  guard.text("scores_by_area.csv", out);
  write_manifest(config, "score", guard);
  guard.commit();
}

}  // namespace posfuse
