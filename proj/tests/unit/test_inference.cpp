#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "posfuse/errors.hpp"
#include "posfuse/inference.hpp"

using namespace posfuse;
using posfuse::testing::AreaSpec;
using posfuse::testing::make_area;
using posfuse::testing::scratch_dir;

namespace {

posfuse::testing::TestArea two_region_area() {
  AreaSpec spec;
  spec.rows = 6;
  spec.cols = 6;
  spec.population = [](int i, int j) { return 1.0 + (i + j) % 3; };
  spec.region = [](int, int j) { return j < 3 ? 0.0 : 1.0; };
  spec.covariates = {[](int i, int j) { return 0.3 * i - 0.2 * j + std::sin(double(i * j)); }};
  return make_area(spec);
}

std::vector<ClusterRecord> small_data(const FineGrid& grid) {
  const int ys[6] = {1, 4, 6, 2, 7, 5};
  const std::size_t cells[6] = {0, 7, 14, 21, 28, 35};
  std::vector<ClusterRecord> out;
  for (int c = 0; c < 6; ++c) {
    ClusterRecord r;
    r.y = ys[c];
    r.n = 8;
    r.survey = SurveyTag::geomasked;
    r.region = grid.cell(cells[c]).region;
    r.scheme = IntegrationScheme::single(cells[c]);
    out.push_back(r);
  }
  return out;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Posterior mean and batch-means standard error.
std::pair<double, double> mean_and_se(const std::vector<double>& x, int batches = 50) {
  const std::size_t b = x.size() / std::size_t(batches);
  std::vector<double> means(std::size_t(batches), 0.0);
  for (int k = 0; k < batches; ++k) {
    for (std::size_t i = 0; i < b; ++i) means[std::size_t(k)] += x[std::size_t(k) * b + i];
    means[std::size_t(k)] /= double(b);
  }
  double m = 0.0, v = 0.0;
  for (double bm : means) m += bm / batches;
  for (double bm : means) v += (bm - m) * (bm - m) / (batches - 1);
  return {m, std::sqrt(v / batches)};
}

PosteriorSamples constant_samples(const FineGrid& grid, int n, double intercept) {
  PosteriorSamples s;
  for (int d = 0; d < n; ++d) {
    ModelParams p;
    p.beta = Eigen::VectorXd::Zero(Eigen::Index(grid.n_covariates() + 1));
    p.beta(0) = intercept;
    s.params.push_back(p);
    s.latent.push_back({Eigen::VectorXd::Zero(grid.n_regions()), Eigen::VectorXd::Zero(grid.n_regions())});
  }
  s.covariate_names = grid.covariate_names();
  return s;
}

}  // namespace

TEST_CASE("config validation") {
  McmcConfig c;
  c.n_burnin = c.n_iterations;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = McmcConfig{};
  c.thin = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("conjugate Gaussian hook reproduces the analytic posterior") {
  auto area = two_region_area();
  PriorSet priors = PriorSet::defaults({{1}, {0}});
  priors.beta_sd = 2.0;
  const Eigen::Vector2d b(0.7, -1.1);
  Eigen::Matrix2d a;
  a << 4.0, 1.0, 1.0, 2.0;
  FitHooks hooks;
  hooks.beta_log_lik = [&](const Eigen::VectorXd& beta) { return -0.5 * (beta - b).dot(a * (beta - b)); };

  McmcConfig cfg;
  cfg.n_iterations = 30000;
  cfg.n_burnin = 5000;
  cfg.seed = 5;
  PosteriorSamples s = fit({}, area.grid, priors, cfg, hooks);

  const Eigen::Matrix2d prec = a + Eigen::Matrix2d::Identity() / 4.0;
  const Eigen::Vector2d mean = prec.ldlt().solve(a * b);
  const Eigen::Matrix2d cov = prec.inverse();
  for (int j = 0; j < 2; ++j) {
    std::vector<double> x;
    for (const auto& p : s.params) x.push_back(p.beta(j));
    const auto [m, se] = mean_and_se(x);
    CHECK(std::abs(m - mean(j)) < 4.0 * se + 1e-3);
    double var = 0.0;
    for (double v : x) var += (v - m) * (v - m) / double(x.size() - 1);
    CHECK(var == doctest::Approx(cov(j, j)).epsilon(0.15));
  }
}

TEST_CASE("fit is deterministic and keeps draws in support") {
  auto area = two_region_area();
  PriorSet priors = PriorSet::defaults({{1}, {0}});
  auto data = small_data(area.grid);
  McmcConfig cfg;
  cfg.n_iterations = 600;
  cfg.n_burnin = 200;
  cfg.thin = 2;
  cfg.seed = 11;
  PosteriorSamples a = fit(data, area.grid, priors, cfg), b = fit(data, area.grid, priors, cfg);
  REQUIRE(a.size() == 200);
  auto dir = scratch_dir("inference_det");
  write_samples_csv(a, (dir / "a.csv").string());
  write_samples_csv(b, (dir / "b.csv").string());
  CHECK(slurp((dir / "a.csv").string()) == slurp((dir / "b.csv").string()));

  for (std::size_t d = 0; d < a.size(); ++d) {
    CHECK(a.params[d].in_support());
    CHECK(std::abs(a.latent[d].w.sum()) < 1e-10);
  }
  for (const char* block : {"beta", "w", "v", "tau", "phi", "sigma_eps_sq"}) CHECK(a.acceptance.count(block) == 1);

  cfg.seed = 12;
  PosteriorSamples c = fit(data, area.grid, priors, cfg);
  CHECK(c.params[0].beta(0) != a.params[0].beta(0));
}

TEST_CASE("samples csv round trip") {
  auto area = two_region_area();
  PriorSet priors = PriorSet::defaults({{1}, {0}});
  McmcConfig cfg;
  cfg.n_iterations = 120;
  cfg.n_burnin = 20;
  PosteriorSamples s = fit(small_data(area.grid), area.grid, priors, cfg);
  auto dir = scratch_dir("inference_csv");
  const auto path = (dir / "s.csv").string();
  write_samples_csv(s, path);
  PosteriorSamples back = read_samples_csv(path);
  REQUIRE(back.size() == s.size());
  CHECK(back.covariate_names == s.covariate_names);
  for (std::size_t d = 0; d < s.size(); ++d) {
    CHECK(back.params[d].beta == s.params[d].beta);
    CHECK(back.params[d].tau == s.params[d].tau);
    CHECK(back.params[d].phi == s.params[d].phi);
    CHECK(back.params[d].sigma_eps_sq == s.params[d].sigma_eps_sq);
    CHECK(back.latent[d].w == s.latent[d].w);
    CHECK(back.latent[d].v == s.latent[d].v);
  }
  std::ofstream(dir / "bad.csv") << "beta_intercept,tau\n0.1,oops\n";
  CHECK_THROWS_AS(read_samples_csv((dir / "bad.csv").string()), ParseError);
}

TEST_CASE("two-region posterior matches importance sampling") {
  auto area = two_region_area();
  PriorSet priors = PriorSet::defaults({{1}, {0}});
  priors.beta_sd = 1.0;
  auto data = small_data(area.grid);
  const int gh = 9;

  // Oracle: draw from the (proper) prior, weight by the likelihood.
  const auto& sp = *priors.structured;
  Rng rng = make_rng(31);
  std::normal_distribution<double> z(0.0, 1.0);
  std::exponential_distribution<double> tau_sd(priors.tau.rate()), eps_sd(priors.sigma_eps.rate());
  const double f1 = 1.0 - priors.phi.boundary_mass();
  const std::size_t n_is = 1000000;
  std::vector<double> logw(n_is), q0(n_is), q1(n_is), q2(n_is);
  for (std::size_t i = 0; i < n_is; ++i) {
    ModelParams p;
    p.beta = Eigen::Vector2d(z(rng), z(rng));
    const double s_tau = tau_sd(rng), s_eps = eps_sd(rng);
    p.tau = 1.0 / (s_tau * s_tau);
    p.sigma_eps_sq = s_eps * s_eps;
    const double u = uniform01(rng);
    p.phi = u < f1 ? pc_phi_quantile(u, priors.phi) : 1.0;
    LatentField l;
    l.w = sp.eigenvectors.col(0) * (z(rng) / std::sqrt(sp.eigenvalues(0)));
    l.v = Eigen::Vector2d(z(rng), z(rng));
    double ll = 0.0;
    for (const auto& r : data) ll += cluster_log_lik(r, p, l, area.grid, gh);
    logw[i] = ll;
    q0[i] = p.beta(0);
    q1[i] = p.beta(1);
    q2[i] = bym2_effect(p, l)(0);
  }
  const double top = *std::max_element(logw.begin(), logw.end());
  double sw = 0.0, sw2 = 0.0;
  for (double& lw : logw) {
    lw = std::exp(lw - top);
    sw += lw;
    sw2 += lw * lw;
  }
  const double ess = sw * sw / sw2;
  REQUIRE(ess > 2000.0);
  auto is_moment = [&](const std::vector<double>& q) {
    double m = 0.0;
    for (std::size_t i = 0; i < n_is; ++i) m += logw[i] * q[i] / sw;
    double v = 0.0;
    for (std::size_t i = 0; i < n_is; ++i) v += logw[i] * (q[i] - m) * (q[i] - m) / sw;
    return std::pair{m, std::sqrt(v / ess)};
  };

  McmcConfig cfg;
  cfg.n_iterations = 60000;
  cfg.n_burnin = 10000;
  cfg.seed = 3;
  cfg.gh_order = gh;
  PosteriorSamples s = fit(data, area.grid, priors, cfg);
  std::vector<double> m0, m1, m2;
  for (std::size_t d = 0; d < s.size(); ++d) {
    m0.push_back(s.params[d].beta(0));
    m1.push_back(s.params[d].beta(1));
    m2.push_back(bym2_effect(s.params[d], s.latent[d])(0));
  }
  const std::vector<std::pair<const std::vector<double>*, const std::vector<double>*>> pairs = {
      {&m0, &q0}, {&m1, &q1}, {&m2, &q2}};
  for (const auto& [mc, is] : pairs) {
    const auto [mm, mse] = mean_and_se(*mc);
    const auto [im, ise] = is_moment(*is);
    INFO("mcmc " << mm << " +- " << mse << ", importance " << im << " +- " << ise);
    CHECK(std::abs(mm - im) < 3.0 * std::sqrt(mse * mse + ise * ise));
  }
}

TEST_CASE("predict_risk") {
  auto area = two_region_area();
  PosteriorSamples zero = constant_samples(area.grid, 4, 0.0);
  RiskDraws r = predict_risk(zero, area.grid, 4);
  CHECK(r.values.rows() == 4);
  CHECK(r.values.cols() == Eigen::Index(area.grid.size()));
  CHECK((r.values.array() == 0.5).all());

  PosteriorSamples s = constant_samples(area.grid, 10, 0.0);
  Rng rng = make_rng(2);
  for (auto& p : s.params) p.beta(1) = 3.0 * (uniform01(rng) - 0.5);
  for (auto& l : s.latent) {
    l.w = Eigen::Vector2d(0.3, -0.3);
    l.v = Eigen::Vector2d(uniform01(rng), -uniform01(rng));
  }
  PosteriorSamples up = s;
  for (auto& p : up.params) p.beta(0) += 1.0;
  const Eigen::VectorXd before = predict_risk(s, area.grid, 10).values.colwise().mean();
  const Eigen::VectorXd after = predict_risk(up, area.grid, 10).values.colwise().mean();
  CHECK(((after - before).array() > 0).all());
  const Eigen::MatrixXd v = predict_risk(s, area.grid, 5).values;
  CHECK((v.array() > 0).all());
  CHECK((v.array() < 1).all());

  // Cluster scale: the nugget pulls risks toward one half.
  for (auto& p : s.params) p.sigma_eps_sq = 2.0;
  const Eigen::MatrixXd surf = predict_risk(s, area.grid, 10).values;
  const Eigen::MatrixXd clus = predict_risk(s, area.grid, 10, RiskScale::cluster).values;
  CHECK(((clus.array() - 0.5).abs() <= (surf.array() - 0.5).abs() + 1e-12).all());

  CHECK_THROWS_AS(predict_risk(s, area.grid, 11), ConfigError);
}

TEST_CASE("aggregate") {
  GridGeometry g{1, 2, 0, 0, 1};
  Raster pop(g, 1.0), urb(g, 0.0), reg(g, 0.0), adm(g, 0.0), cov(g, 0.0);
  pop.at(0, 1) = 3.0;
  cov.at(0, 1) = 1.0;
  TransformSpec ts;
  ts.covariates.push_back({"x", CovariateTransform::identity, false});
  FineGrid grid = build_fine_grid({cov}, pop, urb, reg, adm, ts);
  RiskDraws d;
  d.values.resize(1, 2);
  d.values << 0.0, 1.0;
  CHECK(aggregate(d, grid, {0, 0}, 1)(0, 0) == doctest::Approx(0.75));
  Eigen::MatrixXd two = aggregate(d, grid, {0, 0}, 2);
  CHECK(std::isnan(two(0, 1)));

  auto area = two_region_area();
  RiskDraws c;
  c.values = Eigen::MatrixXd::Constant(3, Eigen::Index(area.grid.size()), 0.37);
  Eigen::MatrixXd byr = aggregate(c, area.grid, AggregationLevel::region);
  CHECK(byr.cols() == 2);
  CHECK((byr.array() - 0.37).abs().maxCoeff() < 1e-15);

  Rng rng = make_rng(9);
  for (Eigen::Index i = 0; i < c.values.size(); ++i) c.values.data()[i] = uniform01(rng);
  byr = aggregate(c, area.grid, AggregationLevel::region);
  Eigen::MatrixXd nat = aggregate(c, area.grid, std::vector<int>(area.grid.size(), 0), 1);
  double q[2] = {0, 0};
  for (const auto& cell : area.grid.cells()) q[cell.region] += cell.population;
  for (Eigen::Index r = 0; r < 3; ++r)
    CHECK(nat(r, 0) == doctest::Approx((q[0] * byr(r, 0) + q[1] * byr(r, 1)) / (q[0] + q[1])).epsilon(1e-13));
}
