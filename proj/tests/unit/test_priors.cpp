#include <doctest.h>

#include <cmath>
#include <numeric>

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/tanh_sinh.hpp>

#include "posfuse/errors.hpp"
#include "posfuse/priors.hpp"
#include "posfuse/rng.hpp"

using namespace posfuse;

namespace {

Adjacency cycle(int n, int offset = 0) {
  Adjacency a(static_cast<std::size_t>(n + offset));
  for (int i = 0; i < n; ++i) {
    const int j = (i + 1) % n;
    a[std::size_t(offset + i)].push_back(offset + j);
    a[std::size_t(offset + j)].push_back(offset + i);
  }
  return a;
}

Adjacency random_connected_graph(int n, Rng& rng) {
  std::vector<std::vector<bool>> e(std::size_t(n), std::vector<bool>(std::size_t(n), false));
  for (int i = 1; i < n; ++i) {
    const int j = int(uniform01(rng) * i);
    e[std::size_t(i)][std::size_t(j)] = e[std::size_t(j)][std::size_t(i)] = true;
  }
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (uniform01(rng) < 0.25) e[std::size_t(i)][std::size_t(j)] = e[std::size_t(j)][std::size_t(i)] = true;
  Adjacency a(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (e[std::size_t(i)][std::size_t(j)]) a[std::size_t(i)].push_back(j);
  return a;
}

// KLD between the BYM2 field at phi and the unstructured base model, by dense
// linear algebra on an orthonormal basis of the sum-to-zero subspace.
double matrix_form_kld(const StructuredPrecision& sp, double phi) {
  const Eigen::Index n = sp.q_star.rows();
  const Eigen::MatrixXd qplus = sp.q_star.completeOrthogonalDecomposition().pseudoInverse();
  const Eigen::MatrixXd proj = Eigen::MatrixXd::Identity(n, n) - Eigen::MatrixXd::Constant(n, n, 1.0 / double(n));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(proj);
  const Eigen::MatrixXd basis = eig.eigenvectors().rightCols(n - 1);
  const Eigen::MatrixXd a =
      basis.transpose() * ((1.0 - phi) * Eigen::MatrixXd::Identity(n, n) + phi * qplus) * basis;
  const double logdet = 2.0 * Eigen::MatrixXd(a.llt().matrixL()).diagonal().array().log().sum();
  return 0.5 * (a.trace() - double(n - 1) - logdet);
}

}  // namespace

TEST_CASE("3-cycle scaling") {
  StructuredPrecision sp = scaled_structured_precision(cycle(3));
  // Generalized inverse of the raw Laplacian is (I - J/3)/3: marginal variance 2/9.
  CHECK(sp.scale == doctest::Approx(2.0 / 9.0).epsilon(1e-12));
  CHECK(sp.q_star(0, 0) == doctest::Approx(4.0 / 9.0));
  CHECK(sp.q_star(0, 1) == doctest::Approx(-2.0 / 9.0));
  REQUIRE(sp.rank() == 2);
  for (int i = 0; i < 2; ++i) CHECK(sp.gamma_tilde(i) == doctest::Approx(1.5));
}

TEST_CASE("scaled precision invariants") {
  Rng rng = make_rng(12);
  for (int rep = 0; rep < 5; ++rep) {
    StructuredPrecision sp = scaled_structured_precision(random_connected_graph(4 + rep, rng));
    const Eigen::MatrixXd qplus = sp.q_star.completeOrthogonalDecomposition().pseudoInverse();
    CHECK(std::abs(qplus.diagonal().array().log().mean()) < 1e-8);
    CHECK(sp.q_star.rowwise().sum().cwiseAbs().maxCoeff() < 1e-12);
    CHECK((sp.q_star - sp.q_star.transpose()).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("disconnected graph has a two-dimensional null space") {
  Adjacency a = cycle(3);
  Adjacency b = cycle(4, 3);
  for (std::size_t i = 3; i < 7; ++i) a.push_back(b[i]);
  StructuredPrecision sp = scaled_structured_precision(a);
  CHECK(sp.n_components == 2);
  CHECK(sp.rank() == 5);
  CHECK(sp.component == std::vector<int>{0, 0, 0, 1, 1, 1, 1});
}

TEST_CASE("isolated region is rejected") {
  Adjacency a = cycle(3);
  a.emplace_back();
  CHECK_THROWS_AS(scaled_structured_precision(a), DataError);
}

TEST_CASE("KLD basics") {
  PCPhiPrior prior;
  prior.gamma_tilde = scaled_structured_precision(cycle(5)).gamma_tilde;
  CHECK(pc_phi_kld(0.0, prior) == 0.0);
  PCPhiPrior flat;
  flat.gamma_tilde = Eigen::VectorXd::Ones(4);
  for (double phi : {0.1, 0.5, 0.9}) CHECK(std::abs(pc_phi_kld(phi, flat)) < 1e-15);
  double prev = 0.0;
  for (int i = 1; i < 100; ++i) {
    const double d = pc_phi_distance(i / 100.0, prior.gamma_tilde);
    CHECK(d >= prev);
    CHECK(pc_phi_kld(i / 100.0, prior) > 0.0);
    prev = d;
  }
  CHECK_THROWS_AS(pc_phi_kld(1.0, prior), DataError);
}

TEST_CASE("eigen-form KLD matches the matrix form") {
  Rng rng = make_rng(13);
  for (int rep = 0; rep < 20; ++rep) {
    const int n = 3 + int(uniform01(rng) * 8);
    StructuredPrecision sp = scaled_structured_precision(random_connected_graph(n, rng));
    PCPhiPrior prior;
    prior.gamma_tilde = sp.gamma_tilde;
    for (double phi : {0.05, 0.5, 0.95}) {
      const double oracle = matrix_form_kld(sp, phi);
      CHECK(std::abs(pc_phi_kld(phi, prior) - oracle) <= 1e-8 * oracle);
    }
  }
}

TEST_CASE("phi density is the derivative of the CDF") {
  PCPhiPrior prior;
  prior.gamma_tilde = scaled_structured_precision(cycle(6)).gamma_tilde;
  prior.lambda_pc = solve_lambda_phi(0.5, 2.0 / 3.0, prior.gamma_tilde);
  CHECK(pc_phi_cdf(0.0, prior) == 0.0);
  for (int i = 1; i <= 9; ++i) {
    const double phi = i / 10.0, h = 1e-5;
    const double fd = (pc_phi_cdf(phi + h, prior) - pc_phi_cdf(phi - h, prior)) / (2 * h);
    CHECK(std::exp(pc_phi_log_density(phi, prior)) == doctest::Approx(fd).epsilon(1e-6));
  }
  double prev = 0.0;
  for (int i = 0; i <= 200; ++i) {
    const double f = pc_phi_cdf(i / 200.0, prior);
    CHECK(f >= prev);
    prev = f;
  }
  // Stable small-phi branch is continuous with the direct formula.
  CHECK(pc_phi_log_density(0.9e-6, prior) == doctest::Approx(pc_phi_log_density(1.1e-6, prior)).epsilon(1e-4));
}

TEST_CASE("phi density integrates to F(1)") {
  Rng rng = make_rng(14);
  boost::math::quadrature::tanh_sinh<double> integrator;
  for (int rep = 0; rep < 5; ++rep) {
    PCPhiPrior prior;
    prior.gamma_tilde = scaled_structured_precision(random_connected_graph(4 + 2 * rep, rng)).gamma_tilde;
    prior.lambda_pc = solve_lambda_phi(0.5, 2.0 / 3.0, prior.gamma_tilde);
    const double mass =
        integrator.integrate([&](double phi) { return std::exp(pc_phi_log_density(phi, prior)); }, 0.0, 1.0);
    CHECK(std::abs(mass - pc_phi_cdf(1.0, prior)) < 1e-8);
    CHECK(prior.boundary_mass() == doctest::Approx(1.0 - pc_phi_cdf(1.0, prior)).epsilon(1e-12));
  }
}

TEST_CASE("solve_lambda_phi") {
  const Eigen::VectorXd g1 = scaled_structured_precision(cycle(5)).gamma_tilde;
  Rng rng = make_rng(15);
  const Eigen::VectorXd g2 = scaled_structured_precision(random_connected_graph(9, rng)).gamma_tilde;
  PCPhiPrior prior;
  prior.gamma_tilde = g1;
  prior.lambda_pc = solve_lambda_phi(0.5, 2.0 / 3.0, g1);
  CHECK(std::abs(pc_phi_cdf(0.5, prior) - 2.0 / 3.0) < 1e-10);
  CHECK(solve_lambda_phi(0.5, 0.8, g1) > prior.lambda_pc);
  CHECK(solve_lambda_phi(0.5, 2.0 / 3.0, g2) != doctest::Approx(prior.lambda_pc));
  CHECK_THROWS_AS(solve_lambda_phi(0.5, 2.0 / 3.0, Eigen::VectorXd::Ones(3)), ConfigError);
}

TEST_CASE("phi quantile inverts the continuous part") {
  PCPhiPrior prior;
  prior.gamma_tilde = scaled_structured_precision(cycle(7)).gamma_tilde;
  prior.lambda_pc = solve_lambda_phi(0.5, 2.0 / 3.0, prior.gamma_tilde);
  for (double u : {0.01, 0.3, 2.0 / 3.0}) CHECK(pc_phi_cdf(pc_phi_quantile(u, prior), prior) == doctest::Approx(u));
}

TEST_CASE("precision PC prior") {
  const PCPrecisionPrior p{1.0, 0.1};
  boost::math::quadrature::exp_sinh<double> upper;
  boost::math::quadrature::tanh_sinh<double> finite;
  auto dens = [&](double t) { return std::exp(pc_precision_log_density(t, p)); };
  const double above = upper.integrate(dens, 1.0, std::numeric_limits<double>::infinity());
  const double below = finite.integrate(dens, 0.0, 1.0);
  CHECK(std::abs(above - 0.9) < 1e-6);
  CHECK(std::abs(above + below - 1.0) < 1e-6);

  CHECK(PCPrecisionPrior{1.0, 0.01}.rate() == doctest::Approx(2.0 * p.rate()));
  CHECK(pc_precision_log_density(0.0, p) == -std::numeric_limits<double>::infinity());
  CHECK(pc_precision_log_density(-1.0, p) == -std::numeric_limits<double>::infinity());

  // Stated as P(1/sqrt(tau) < 1) = 0.1: the mass above tau = 1 is 0.1.
  const auto stated = PCPrecisionPrior::from_lower_probability(1.0, 0.1);
  const double above_stated = upper.integrate(
      [&](double t) { return std::exp(pc_precision_log_density(t, stated)); }, 1.0,
      std::numeric_limits<double>::infinity());
  CHECK(std::abs(above_stated - 0.1) < 1e-6);
}

TEST_CASE("structured log density") {
  StructuredPrecision sp = scaled_structured_precision(cycle(4));
  Eigen::VectorXd w(4);
  w << 0.3, -0.1, 0.2, -0.4;
  const double expected = -0.5 * 3 * std::log(2 * M_PI) + 0.5 * sp.eigenvalues.array().log().sum() -
                          0.5 * w.dot(sp.q_star * w);
  CHECK(sp.log_density(w) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("adjacency json round trip") {
  Adjacency a = cycle(5);
  CHECK(adjacency_from_json_text(adjacency_to_json_text(a)) == a);
  CHECK_THROWS_AS(adjacency_from_json_text("{not json"), DataError);
}
