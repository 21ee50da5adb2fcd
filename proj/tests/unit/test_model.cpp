#include <doctest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/binomial.hpp>

#include "fixtures.hpp"
#include "posfuse/errors.hpp"
#include "posfuse/model.hpp"

using namespace posfuse;
using posfuse::testing::AreaSpec;
using posfuse::testing::make_area;

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double binom_pmf(int y, int n, double p) { return boost::math::pdf(boost::math::binomial(n, p), y); }

// Two regions split down the middle of a 12 x 12 grid with two covariates.
posfuse::testing::TestArea two_regions() {
  AreaSpec spec;
  spec.rows = 12;
  spec.cols = 12;
  spec.population = [](int i, int j) { return 1.0 + ((3 * i + j) % 7); };
  spec.region = [](int, int j) { return j < 6 ? 0.0 : 1.0; };
  spec.covariates = {[](int i, int j) { return std::sin(0.5 * i) + 0.1 * j; },
                     [](int i, int j) { return std::cos(0.3 * j + 0.2 * i); }};
  return make_area(spec);
}

ModelParams some_params() {
  ModelParams p;
  p.beta = Eigen::Vector3d(-0.4, 0.7, -0.3);
  p.tau = 2.0;
  p.phi = 0.6;
  p.sigma_eps_sq = 0.3;
  return p;
}

LatentField some_latent() {
  LatentField l;
  l.w = Eigen::Vector2d(0.4, -0.4);
  l.v = Eigen::Vector2d(-0.2, 0.5);
  return l;
}

ClusterRecord geomasked(int y, int n, IntegrationScheme scheme) {
  ClusterRecord r;
  r.y = y;
  r.n = n;
  r.survey = SurveyTag::geomasked;
  r.region = 0;
  r.scheme = std::move(scheme);
  return r;
}

IntegrationScheme full_support_scheme(const FineGrid& grid, int region) {
  IntegrationScheme s;
  double total = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i)
    if (grid.cell(i).region == region) {
      s.points.push_back(i);
      total += grid.cell(i).population;
    }
  for (std::size_t c : s.points) {
    s.alpha.push_back(1.0);
    s.omega.push_back(grid.cell(c).population / total);
  }
  return s;
}

}  // namespace

TEST_CASE("linear predictor") {
  auto area = two_regions();
  ModelParams p;
  p.beta = Eigen::Vector3d::Zero();
  LatentField l{Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()};
  CHECK(linear_predictor(p, l, area.grid, 5) == 0.0);
  CHECK(logistic(linear_predictor(p, l, area.grid, 5)) == 0.5);

  // phi = 1 drops the unstructured part.
  p.phi = 1.0;
  l.v = Eigen::Vector2d(3.0, -7.0);
  l.w = Eigen::Vector2d(0.5, -0.5);
  p.tau = 4.0;
  CHECK(linear_predictor(p, l, area.grid, 0) == doctest::Approx(0.25));

  p = some_params();
  l = some_latent();
  const std::size_t c = 30;
  const auto& d = area.grid.covariates();
  const int a = area.grid.cell(c).region;
  const double expected = p.beta(0) + p.beta(1) * d(30, 0) + p.beta(2) * d(30, 1) +
                          (std::sqrt(p.phi) * l.w(a) + std::sqrt(1 - p.phi) * l.v(a)) / std::sqrt(p.tau);
  CHECK(linear_predictor(p, l, area.grid, c) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("published coefficients at an urban cell with centered covariates") {
  // Three cells; the middle one is urban and every continuous covariate is at its mean.
  GridGeometry g{1, 3, 0, 0, 1};
  Raster pop(g, 1.0), urb(g, 0.0), reg(g, 0.0), adm(g, 0.0);
  Raster urban_cov(g, 0.0), cont(g, 0.0);
  urb.at(0, 1) = urban_cov.at(0, 1) = 1.0;
  for (int j = 0; j < 3; ++j) cont.at(0, j) = j - 1.0;
  TransformSpec ts;
  ts.covariates.push_back({"urban", CovariateTransform::identity, true});
  for (int k = 0; k < 4; ++k) ts.covariates.push_back({"x" + std::to_string(k), CovariateTransform::identity, false});
  FineGrid grid = build_fine_grid({urban_cov, cont, cont, cont, cont}, pop, urb, reg, adm, ts);
  ModelParams p;
  p.beta.resize(6);
  p.beta << -1.24, 1.03, -0.05, 0.05, 0.02, 0.44;
  LatentField l{Eigen::VectorXd::Zero(1), Eigen::VectorXd::Zero(1)};
  CHECK(linear_predictor(p, l, grid, 1) == doctest::Approx(-1.24 + 1.03).epsilon(1e-14));
}

TEST_CASE("single-node rule is the zero-nugget mixture") {
  auto area = two_regions();
  ModelParams p = some_params();
  LatentField l = some_latent();
  IntegrationScheme s = full_support_scheme(area.grid, 0);
  ClusterRecord r = geomasked(4, 9, s);
  double direct = 0.0;
  for (std::size_t k = 0; k < s.size(); ++k)
    direct += s.omega[k] * binom_pmf(4, 9, logistic(linear_predictor(p, l, area.grid, s.points[k])));
  CHECK(cluster_log_lik(r, p, l, area.grid, 1) == doctest::Approx(std::log(direct)).epsilon(1e-12));
}

TEST_CASE("nugget marginal matches Monte Carlo") {
  auto area = two_regions();
  ModelParams p = some_params();
  p.sigma_eps_sq = 1.0;
  LatentField l = some_latent();
  ClusterRecord r = geomasked(3, 10, IntegrationScheme::single(17));
  const double eta = linear_predictor(p, l, area.grid, 17);
  Rng rng = make_rng(21);
  std::normal_distribution<double> z(0.0, 1.0);
  double mc = 0.0;
  const int draws = 1000000;
  for (int i = 0; i < draws; ++i) mc += binom_pmf(3, 10, logistic(eta + z(rng)));
  mc /= draws;
  CHECK(std::exp(cluster_log_lik(r, p, l, area.grid, 25)) == doctest::Approx(mc).epsilon(0.005));
}

TEST_CASE("constant eta makes the position weights irrelevant") {
  auto area = two_regions();
  ModelParams p = some_params();
  p.beta = Eigen::Vector3d(0.3, 0.0, 0.0);
  LatentField l = some_latent();
  IntegrationScheme a = full_support_scheme(area.grid, 0), b = a;
  for (double& w : b.omega) w = 1.0 / double(b.size());
  CHECK(cluster_log_lik(geomasked(2, 5, a), p, l, area.grid) ==
        doctest::Approx(cluster_log_lik(geomasked(2, 5, b), p, l, area.grid)).epsilon(1e-13));
}

TEST_CASE("permutation invariance and monotonicity") {
  auto area = two_regions();
  ModelParams p = some_params();
  LatentField l = some_latent();
  IntegrationScheme s = full_support_scheme(area.grid, 1), rev = s;
  std::reverse(rev.points.begin(), rev.points.end());
  std::reverse(rev.omega.begin(), rev.omega.end());
  std::reverse(rev.alpha.begin(), rev.alpha.end());
  CHECK(cluster_log_lik(geomasked(6, 11, s), p, l, area.grid) ==
        doctest::Approx(cluster_log_lik(geomasked(6, 11, rev), p, l, area.grid)).epsilon(1e-13));

  ModelParams up = p;
  up.beta(0) += 0.5;
  CHECK(cluster_log_lik(geomasked(8, 8, s), up, l, area.grid) > cluster_log_lik(geomasked(8, 8, s), p, l, area.grid));
  CHECK(cluster_log_lik(geomasked(0, 8, s), up, l, area.grid) < cluster_log_lik(geomasked(0, 8, s), p, l, area.grid));
}

TEST_CASE("full-support scheme equals the exact population-weighted marginal") {
  auto area = two_regions();
  ModelParams p = some_params();
  LatentField l = some_latent();
  IntegrationScheme s = full_support_scheme(area.grid, 0);
  const auto& rule = gauss_hermite(25);
  const double sigma = std::sqrt(p.sigma_eps_sq);
  double exact = 0.0, total = 0.0;
  for (std::size_t i = 0; i < area.grid.size(); ++i) {
    if (area.grid.cell(i).region != 0) continue;
    const double eta = linear_predictor(p, l, area.grid, i);
    double e = 0.0;
    for (std::size_t j = 0; j < rule.nodes.size(); ++j)
      e += std::exp(rule.log_weights[j]) * binom_pmf(5, 12, logistic(eta + sigma * rule.nodes[j]));
    exact += area.grid.cell(i).population * e;
    total += area.grid.cell(i).population;
  }
  const double ll = cluster_log_lik(geomasked(5, 12, s), p, l, area.grid, 25);
  CHECK(std::abs(std::exp(ll) / (exact / total) - 1.0) < 1e-10);
}

TEST_CASE("gauss-hermite rule integrates polynomials") {
  const auto& rule = gauss_hermite(9);
  double m0 = 0, m2 = 0, m4 = 0, m8 = 0;
  for (std::size_t j = 0; j < rule.nodes.size(); ++j) {
    const double w = std::exp(rule.log_weights[j]), x = rule.nodes[j];
    m0 += w;
    m2 += w * x * x;
    m4 += w * std::pow(x, 4);
    m8 += w * std::pow(x, 8);
  }
  CHECK(m0 == doctest::Approx(1.0).epsilon(1e-13));
  CHECK(m2 == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m4 == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(m8 == doctest::Approx(105.0).epsilon(1e-10));
}

TEST_CASE("non-finite eta is an error") {
  auto area = two_regions();
  ModelParams p = some_params();
  p.beta(1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(cluster_log_lik(geomasked(1, 2, IntegrationScheme::single(0)), p, some_latent(), area.grid),
                  NumericError);
}

TEST_CASE("joint posterior support, composition and additivity") {
  auto area = two_regions();
  PriorSet priors = PriorSet::defaults({{1}, {0}});
  ModelParams p = some_params();
  LatentField l = some_latent();

  ModelParams bad = p;
  bad.phi = 1.2;
  CHECK(joint_log_posterior(bad, l, {}, priors, area.grid) == kNegInf);
  bad = p;
  bad.tau = -1.0;
  CHECK(joint_log_posterior(bad, l, {}, priors, area.grid) == kNegInf);
  LatentField off = l;
  off.w(0) += 0.1;
  CHECK(joint_log_posterior(p, off, {}, priors, area.grid) == kNegInf);

  const auto& sp = *priors.structured;
  const double parts = sp.log_density(l.w) - 0.5 * l.v.squaredNorm() - std::log(2 * M_PI) +
                       pc_precision_log_density(p.tau, priors.tau) + pc_phi_log_density(p.phi, priors.phi) +
                       pc_precision_log_density(1.0 / p.sigma_eps_sq, priors.sigma_eps) -
                       2.0 * std::log(p.sigma_eps_sq);
  const double prior_only = joint_log_posterior(p, l, {}, priors, area.grid);
  CHECK(prior_only == doctest::Approx(parts).epsilon(1e-13));

  std::vector<ClusterRecord> a, b;
  Rng rng = make_rng(8);
  for (int c = 0; c < 20; ++c) {
    const std::size_t cell = std::size_t(uniform01(rng) * double(area.grid.size()));
    auto rec = geomasked(c % 7, 10, IntegrationScheme::single(cell));
    (c < 9 ? a : b).push_back(rec);
  }
  std::vector<ClusterRecord> all = a;
  all.insert(all.end(), b.begin(), b.end());
  auto llh = [&](const std::vector<ClusterRecord>& d) {
    return joint_log_posterior(p, l, d, priors, area.grid) - prior_only;
  };
  CHECK(llh(all) == doctest::Approx(llh(a) + llh(b)).epsilon(1e-12));

  // phi = 1 carries the boundary atom.
  ModelParams one = p;
  one.phi = 1.0;
  const double at_one = joint_log_posterior(one, l, {}, priors, area.grid);
  CHECK(at_one - (prior_only - pc_phi_log_density(p.phi, priors.phi)) ==
        doctest::Approx(std::log(priors.phi.boundary_mass())));
}

TEST_CASE("optional Gaussian prior on beta") {
  auto area = two_regions();
  PriorSet priors = PriorSet::defaults({{1}, {0}});
  ModelParams p = some_params();
  LatentField l = some_latent();
  const double flat = log_prior(p, l, priors);
  priors.beta_sd = 2.0;
  const double expected = flat - 0.5 * p.beta.squaredNorm() / 4.0 - 3.0 * (std::log(2.0) + 0.5 * std::log(2 * M_PI));
  CHECK(log_prior(p, l, priors) == doctest::Approx(expected).epsilon(1e-13));
}

TEST_CASE("pairwise sum") {
  std::vector<double> v(1000);
  std::iota(v.begin(), v.end(), 1.0);
  CHECK(pairwise_sum(v) == 500500.0);
  CHECK(pairwise_sum({}) == 0.0);
}

TEST_CASE("record validation") {
  ClusterRecord r;
  r.y = 5;
  r.n = 3;
  r.observed = Point{1, 1};
  CHECK_THROWS_AS(r.validate(), DataError);
  r.y = 2;
  CHECK_NOTHROW(r.validate());
  r.survey = SurveyTag::geomasked;
  CHECK_THROWS_AS(r.validate(), DataError);
}
