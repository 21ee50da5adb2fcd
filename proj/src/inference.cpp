#include "posfuse/inference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <sstream>

#include "posfuse/errors.hpp"
#include "posfuse/gauss_hermite.hpp"
#include "posfuse/rng.hpp"

namespace posfuse {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

inline double logistic(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
inline double logit(double p) { return std::log(p) - std::log1p(-p); }

struct Outcome {
  int y = 0;
  int n = 1;
  int count = 0;
};

// Clusters sharing an integration scheme (every geomasked cluster of a
// stratum, for instance) share their linear predictors.
struct ClusterCache {
  std::vector<std::size_t> cells;
  std::vector<double> xb;
  std::vector<int> region;
  std::vector<double> log_omega;
  std::vector<Outcome> outcomes;
};

/// Robbins-Monro adaptation of a log proposal scale toward a target rate.
struct ScaleAdapter {
  double log_scale = std::log(0.5);
  int accepted = 0;
  int proposed = 0;
  long total_accepted = 0;
  long total_proposed = 0;

  double scale() const { return std::exp(log_scale); }
  void record(bool ok, bool post_burnin) {
    accepted += ok;
    ++proposed;
    if (post_burnin) {
      total_accepted += ok;
      ++total_proposed;
    }
  }
  void adapt(double target, int batch) {
    if (proposed == 0) return;
    const double rate = static_cast<double>(accepted) / proposed;
    log_scale += 1.5 * (rate - target) / std::sqrt(1.0 + batch / 5.0);
    log_scale = std::clamp(log_scale, -12.0, 5.0);
    accepted = proposed = 0;
  }
};

class Sampler {
 public:
  Sampler(std::span<const ClusterRecord> data, const FineGrid& grid, const PriorSet& priors,
          const McmcConfig& config, const FitHooks& hooks)
      : grid_(grid), priors_(priors), config_(config), hooks_(hooks), rng_(make_rng(config.seed, 17)),
        rule_(gauss_hermite(config.gh_order)) {
    const auto& sp = *priors.structured;
    n_regions_ = sp.n_regions();
    if (grid.n_regions() > n_regions_) throw ConfigError("adjacency has fewer regions than the grid");
    p_ = static_cast<int>(grid.n_covariates());

    long ysum = 0, nsum = 0;
    if (!hooks.beta_log_lik) {
      std::map<std::pair<std::vector<std::size_t>, std::vector<double>>, std::size_t> groups;
      for (const auto& rec : data) {
        rec.validate();
        if (rec.scheme.empty()) throw DataError("cluster record has no integration scheme");
        auto [it, fresh] = groups.try_emplace({rec.scheme.points, rec.scheme.omega}, clusters_.size());
        if (fresh) {
          ClusterCache cc;
          for (std::size_t k = 0; k < rec.scheme.size(); ++k) {
            if (!(rec.scheme.omega[k] > 0)) continue;
            cc.cells.push_back(rec.scheme.points[k]);
            cc.region.push_back(grid.cell(rec.scheme.points[k]).region);
            cc.log_omega.push_back(std::log(rec.scheme.omega[k]));
          }
          if (cc.cells.empty()) throw DataError("integration scheme has no positive weight");
          cc.xb.assign(cc.cells.size(), 0.0);
          clusters_.push_back(std::move(cc));
        }
        auto& outcomes = clusters_[it->second].outcomes;
        auto o = std::find_if(outcomes.begin(), outcomes.end(), [&](const Outcome& x) { return x.y == rec.y && x.n == rec.n; });
        if (o == outcomes.end()) outcomes.push_back({rec.y, rec.n, 1});
        else ++o->count;
        ysum += rec.y;
        nsum += rec.n;
      }
    }

    touching_.assign(static_cast<std::size_t>(n_regions_), {});
    for (std::size_t c = 0; c < clusters_.size(); ++c) {
      std::vector<int> regs = clusters_[c].region;
      std::sort(regs.begin(), regs.end());
      regs.erase(std::unique(regs.begin(), regs.end()), regs.end());
      for (int r : regs) touching_[static_cast<std::size_t>(r)].push_back(c);
    }
    component_size_.assign(static_cast<std::size_t>(sp.n_components), 0);
    for (int i = 0; i < n_regions_; ++i) ++component_size_[static_cast<std::size_t>(sp.component[i])];
    if (sp.n_components > 1) {
      component_clusters_.assign(static_cast<std::size_t>(sp.n_components), {});
      for (std::size_t c = 0; c < clusters_.size(); ++c) {
        std::vector<int> comps;
        for (int r : clusters_[c].region) comps.push_back(sp.component[static_cast<std::size_t>(r)]);
        std::sort(comps.begin(), comps.end());
        comps.erase(std::unique(comps.begin(), comps.end()), comps.end());
        for (int k : comps) component_clusters_[static_cast<std::size_t>(k)].push_back(c);
      }
    }

    params_.beta = Eigen::VectorXd::Zero(p_ + 1);
    if (nsum > 0) params_.beta(0) = logit((ysum + 0.5) / (nsum + 1.0));
    params_.tau = 1.0;
    params_.phi = 0.5;
    params_.sigma_eps_sq = 1.0;
    latent_.w = Eigen::VectorXd::Zero(n_regions_);
    latent_.v = Eigen::VectorXd::Zero(n_regions_);

    beta_chol_ = Eigen::MatrixXd::Identity(p_ + 1, p_ + 1) * 0.1;
    beta_sum_ = Eigen::VectorXd::Zero(p_ + 1);
    beta_outer_ = Eigen::MatrixXd::Zero(p_ + 1, p_ + 1);
    w_scale_.assign(static_cast<std::size_t>(n_regions_), ScaleAdapter{});
    v_scale_.assign(static_cast<std::size_t>(n_regions_), ScaleAdapter{});
    beta_scale_.log_scale = 0.0;
  }

  PosteriorSamples run() {
    refresh_all();
    const double start = current_log_post();
    if (!std::isfinite(start)) throw NumericError("bad initialization");

    PosteriorSamples out;
    out.covariate_names = grid_.covariate_names();
    int batch = 0;
    for (int it = 0; it < config_.n_iterations; ++it) {
      const bool post = it >= config_.n_burnin;
      update_beta(post);
      for (int i = 0; i < n_regions_; ++i) update_w(i, post);
      for (int i = 0; i < n_regions_; ++i) update_v(i, post);
      update_tau(post);
      update_phi(post);
      update_sigma(post);

      if (!post) {
        // The proposal covariance ignores the first third of burn-in.
        if (it >= config_.n_burnin / 3) {
          beta_sum_ += params_.beta;
          beta_outer_ += params_.beta * params_.beta.transpose();
          ++beta_count_;
        }
        if ((it + 1) % config_.adapt_window == 0) {
          adapt(batch++);
        }
      } else if ((it - config_.n_burnin) % config_.thin == 0) {
        store(out);
      }
    }
    auto rate = [](const ScaleAdapter& s) {
      return s.total_proposed ? static_cast<double>(s.total_accepted) / s.total_proposed : 0.0;
    };
    auto mean_rate = [&](const std::vector<ScaleAdapter>& v) {
      long a = 0, p = 0;
      for (const auto& s : v) {
        a += s.total_accepted;
        p += s.total_proposed;
      }
      return p ? static_cast<double>(a) / p : 0.0;
    };
    out.acceptance["beta"] = rate(beta_scale_);
    out.acceptance["w"] = mean_rate(w_scale_);
    out.acceptance["v"] = mean_rate(v_scale_);
    out.acceptance["tau"] = rate(tau_scale_);
    out.acceptance["phi"] = rate(phi_scale_);
    out.acceptance["phi_switch"] = rate(phi_switch_);
    out.acceptance["sigma_eps_sq"] = rate(sigma_scale_);
    return out;
  }

 private:
  Eigen::VectorXd effects(const ModelParams& p, const LatentField& l) const { return bym2_effect(p, l); }

  void compute_xb(const Eigen::VectorXd& beta, std::vector<std::vector<double>>& xb) const {
    const auto& X = grid_.covariates();
    xb.resize(clusters_.size());
    for (std::size_t c = 0; c < clusters_.size(); ++c) {
      const auto& cc = clusters_[c];
      xb[c].resize(cc.cells.size());
      for (std::size_t k = 0; k < cc.cells.size(); ++k) {
        double s = 0.0;
        const auto row = static_cast<Eigen::Index>(cc.cells[k]);
        for (int j = 0; j < p_; ++j) s += X(row, j) * beta(j + 1);
        xb[c][k] = s;
      }
    }
  }

  double cluster_ll(std::size_t c, double beta0, const Eigen::VectorXd& u, const std::vector<double>& xb,
                    double sigma) {
    const auto& cc = clusters_[c];
    const std::size_t nk = cc.cells.size(), nj = rule_.nodes.size();
    x_buf_.resize(nk * nj);
    sp_buf_.resize(nk * nj);
    base_buf_.resize(nk * nj);
    for (std::size_t k = 0; k < nk; ++k) {
      const double eta = beta0 + xb[k] + u(cc.region[k]);
      if (!std::isfinite(eta)) throw NumericError("non-finite linear predictor");
      for (std::size_t j = 0; j < nj; ++j) {
        const double x = eta + sigma * rule_.nodes[j];
        const std::size_t t = k * nj + j;
        x_buf_[t] = x;
        sp_buf_[t] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
        base_buf_[t] = rule_.log_weights[j] + cc.log_omega[k];
      }
    }
    double total = 0.0;
    for (const auto& o : cc.outcomes) {
      double top = -std::numeric_limits<double>::infinity();
      term_buf_.resize(nk * nj);
      for (std::size_t t = 0; t < nk * nj; ++t) {
        term_buf_[t] = base_buf_[t] + o.y * x_buf_[t] - o.n * sp_buf_[t];
        top = std::max(top, term_buf_[t]);
      }
      double acc = 0.0;
      for (std::size_t t = 0; t < nk * nj; ++t) acc += std::exp(term_buf_[t] - top);
      total += o.count * (log_binomial_coefficient(o.n, o.y) + top + std::log(acc));
    }
    return total;
  }

  void refresh_all() {
    std::vector<std::vector<double>> xb;
    compute_xb(params_.beta, xb);
    for (std::size_t c = 0; c < clusters_.size(); ++c) clusters_[c].xb = std::move(xb[c]);
    u_ = effects(params_, latent_);
    ll_.resize(clusters_.size());
    const double sigma = std::sqrt(params_.sigma_eps_sq);
    for (std::size_t c = 0; c < clusters_.size(); ++c)
      ll_[c] = cluster_ll(c, params_.beta(0), u_, clusters_[c].xb, sigma);
    lp_ = log_prior(params_, latent_, priors_);
    hook_ll_ = hooks_.beta_log_lik ? hooks_.beta_log_lik(params_.beta) : 0.0;
  }

  double current_log_post() const { return lp_ + pairwise_sum(ll_) + hook_ll_; }

  bool accept(double log_ratio) {
    if (std::isnan(log_ratio)) return false;
    if (log_ratio >= 0) return true;
    return std::log(uniform01(rng_)) < log_ratio;
  }

  /// Full re-evaluation of every cluster for a proposal that changes u or sigma.
  bool full_update(const ModelParams& prop_p, const LatentField& prop_l, double log_jacobian) {
    const double prop_lp = log_prior(prop_p, prop_l, priors_);
    if (prop_lp == kNegInf) return false;
    const Eigen::VectorXd u = effects(prop_p, prop_l);
    const double sigma = std::sqrt(prop_p.sigma_eps_sq);
    prop_ll_.resize(clusters_.size());
    for (std::size_t c = 0; c < clusters_.size(); ++c)
      prop_ll_[c] = cluster_ll(c, prop_p.beta(0), u, clusters_[c].xb, sigma);
    const double ratio = prop_lp + pairwise_sum(prop_ll_) - lp_ - pairwise_sum(ll_) + log_jacobian;
    if (!accept(ratio)) return false;
    params_ = prop_p;
    latent_ = prop_l;
    u_ = u;
    ll_.swap(prop_ll_);
    lp_ = prop_lp;
    return true;
  }

  /// Re-evaluates only the listed clusters.
  bool partial_update(const ModelParams& prop_p, const LatentField& prop_l, const std::vector<std::size_t>& affected) {
    const double prop_lp = log_prior(prop_p, prop_l, priors_);
    if (prop_lp == kNegInf) return false;
    const Eigen::VectorXd u = effects(prop_p, prop_l);
    const double sigma = std::sqrt(prop_p.sigma_eps_sq);
    part_new_.resize(affected.size());
    part_old_.resize(affected.size());
    for (std::size_t a = 0; a < affected.size(); ++a) {
      const std::size_t c = affected[a];
      part_new_[a] = cluster_ll(c, prop_p.beta(0), u, clusters_[c].xb, sigma);
      part_old_[a] = ll_[c];
    }
    // The intercept-compensated w move changes beta, so a beta hook is re-evaluated.
    const double prop_hook = hooks_.beta_log_lik ? hooks_.beta_log_lik(prop_p.beta) : 0.0;
    const double ratio = prop_lp - lp_ + pairwise_sum(part_new_) - pairwise_sum(part_old_) + prop_hook - hook_ll_;
    if (!accept(ratio)) return false;
    params_ = prop_p;
    latent_ = prop_l;
    u_ = u;
    for (std::size_t a = 0; a < affected.size(); ++a) ll_[affected[a]] = part_new_[a];
    lp_ = prop_lp;
    hook_ll_ = prop_hook;
    return true;
  }

  void update_beta(bool post) {
    Eigen::VectorXd z(p_ + 1);
    for (int j = 0; j <= p_; ++j) z(j) = normal_(rng_);
    ModelParams prop = params_;
    prop.beta += beta_scale_.scale() * (beta_chol_ * z);
    const double prop_lp = log_prior(prop, latent_, priors_);
    bool ok = false;
    if (prop_lp != kNegInf) {
      std::vector<std::vector<double>> xb;
      compute_xb(prop.beta, xb);
      const double sigma = std::sqrt(params_.sigma_eps_sq);
      prop_ll_.resize(clusters_.size());
      for (std::size_t c = 0; c < clusters_.size(); ++c) prop_ll_[c] = cluster_ll(c, prop.beta(0), u_, xb[c], sigma);
      const double prop_hook = hooks_.beta_log_lik ? hooks_.beta_log_lik(prop.beta) : 0.0;
      const double ratio = prop_lp + pairwise_sum(prop_ll_) + prop_hook - current_log_post();
      if (accept(ratio)) {
        ok = true;
        params_ = prop;
        ll_.swap(prop_ll_);
        lp_ = prop_lp;
        hook_ll_ = prop_hook;
        for (std::size_t c = 0; c < clusters_.size(); ++c) clusters_[c].xb = std::move(xb[c]);
      }
    }
    beta_scale_.record(ok, post);
  }

  // w += delta (e_i - 1/n_c) keeps each component's sum at zero. With a
  // single component the intercept absorbs the shift of every other region,
  // so only clusters touching region i change.
  void update_w(int i, bool post) {
    const auto& sp = *priors_.structured;
    auto& sc = w_scale_[static_cast<std::size_t>(i)];
    const double delta = sc.scale() * normal_(rng_);
    ModelParams prop_p = params_;
    LatentField prop_l = latent_;
    const int comp = sp.component[static_cast<std::size_t>(i)];
    const double nc = component_size_[static_cast<std::size_t>(comp)];
    for (int j = 0; j < n_regions_; ++j)
      if (sp.component[static_cast<std::size_t>(j)] == comp) prop_l.w(j) -= delta / nc;
    prop_l.w(i) += delta;
    bool ok;
    if (sp.n_components == 1) {
      prop_p.beta(0) += std::sqrt(params_.phi / params_.tau) * delta / nc;
      ok = partial_update(prop_p, prop_l, touching_[static_cast<std::size_t>(i)]);
    } else {
      ok = partial_update(prop_p, prop_l, component_clusters_[static_cast<std::size_t>(comp)]);
    }
    sc.record(ok, post);
  }

  void update_v(int i, bool post) {
    auto& sc = v_scale_[static_cast<std::size_t>(i)];
    LatentField prop_l = latent_;
    prop_l.v(i) += sc.scale() * normal_(rng_);
    sc.record(partial_update(params_, prop_l, touching_[static_cast<std::size_t>(i)]), post);
  }

  void update_tau(bool post) {
    ModelParams prop = params_;
    const double step = tau_scale_.scale() * normal_(rng_);
    prop.tau = params_.tau * std::exp(step);
    tau_scale_.record(full_update(prop, latent_, step), post);
  }

  void update_sigma(bool post) {
    ModelParams prop = params_;
    const double step = sigma_scale_.scale() * normal_(rng_);
    prop.sigma_eps_sq = params_.sigma_eps_sq * std::exp(step);
    sigma_scale_.record(full_update(prop, latent_, step), post);
  }

  void update_phi(bool post) {
    if (params_.phi < 1.0) {
      ModelParams prop = params_;
      const double x = logit(params_.phi) + phi_scale_.scale() * normal_(rng_);
      prop.phi = logistic(x);
      bool ok = false;
      if (prop.phi > 0.0 && prop.phi < 1.0) {
        const double jac = std::log(prop.phi) + std::log1p(-prop.phi) - std::log(params_.phi) - std::log1p(-params_.phi);
        ok = full_update(prop, latent_, jac);
      }
      phi_scale_.record(ok, post);
    }
    switch_phi(post);
  }

  // Jump between the continuous part of the phi prior and its atom at 1. The
  // move into the continuous part proposes from the normalized continuous prior.
  void switch_phi(bool post) {
    const auto& prior = priors_.phi;
    const double mass = prior.boundary_mass();
    if (!(mass > 0.0)) return;
    const double f1 = 1.0 - mass;
    ModelParams prop = params_;
    double correction;
    if (params_.phi < 1.0) {
      prop.phi = 1.0;
      correction = pc_phi_log_density(params_.phi, prior) - std::log(f1);
    } else {
      const double u = uniform01(rng_) * f1;
      prop.phi = pc_phi_quantile(std::min(u, std::nextafter(f1, 0.0)), prior);
      if (!(prop.phi > 0.0 && prop.phi < 1.0)) {
        phi_switch_.record(false, post);
        return;
      }
      correction = std::log(f1) - pc_phi_log_density(prop.phi, prior);
    }
    phi_switch_.record(full_update(prop, latent_, correction), post);
  }

  void adapt(int batch) {
    beta_scale_.adapt(config_.target_vector, beta_batch_++);
    const int d = p_ + 1;
    if (beta_count_ >= 2 * d + 20) {
      const Eigen::VectorXd mean = beta_sum_ / beta_count_;
      Eigen::MatrixXd cov = beta_outer_ / beta_count_ - mean * mean.transpose();
      cov *= 2.38 * 2.38 / d;
      cov.diagonal().array() += 1e-10;
      Eigen::LLT<Eigen::MatrixXd> llt(cov);
      if (llt.info() == Eigen::Success && llt.matrixL().toDenseMatrix().allFinite()) {
        beta_chol_ = llt.matrixL();
        if (!cov_active_) {
          beta_scale_.log_scale = 0.0;
          beta_batch_ = 0;
          cov_active_ = true;
        }
      }
    }
    for (auto& s : w_scale_) s.adapt(config_.target_scalar, batch);
    for (auto& s : v_scale_) s.adapt(config_.target_scalar, batch);
    tau_scale_.adapt(config_.target_scalar, batch);
    phi_scale_.adapt(config_.target_scalar, batch);
    sigma_scale_.adapt(config_.target_scalar, batch);
    phi_switch_.accepted = phi_switch_.proposed = 0;
  }

  void store(PosteriorSamples& out) const {
    const auto& sp = *priors_.structured;
    LatentField l = latent_;
    std::vector<double> sums(static_cast<std::size_t>(sp.n_components), 0.0);
    for (int i = 0; i < n_regions_; ++i) sums[static_cast<std::size_t>(sp.component[i])] += l.w(i);
    for (int i = 0; i < n_regions_; ++i) {
      const auto k = static_cast<std::size_t>(sp.component[i]);
      l.w(i) -= sums[k] / component_size_[k];
    }
    out.params.push_back(params_);
    out.latent.push_back(std::move(l));
  }

  const FineGrid& grid_;
  const PriorSet& priors_;
  McmcConfig config_;
  const FitHooks& hooks_;
  Rng rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  const GaussHermiteRule& rule_;

  int n_regions_ = 0;
  int p_ = 0;
  std::vector<ClusterCache> clusters_;
  std::vector<std::vector<std::size_t>> touching_;
  std::vector<std::vector<std::size_t>> component_clusters_;
  std::vector<int> component_size_;

  ModelParams params_;
  LatentField latent_;
  Eigen::VectorXd u_;
  std::vector<double> ll_, prop_ll_, part_new_, part_old_, x_buf_, sp_buf_, base_buf_, term_buf_;
  double lp_ = 0.0;
  double hook_ll_ = 0.0;

  ScaleAdapter beta_scale_, tau_scale_, phi_scale_, sigma_scale_, phi_switch_;
  std::vector<ScaleAdapter> w_scale_, v_scale_;
  Eigen::MatrixXd beta_chol_;
  Eigen::VectorXd beta_sum_;
  Eigen::MatrixXd beta_outer_;
  long beta_count_ = 0;
  bool cov_active_ = false;
  int beta_batch_ = 0;
};

std::string fmt17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

}  // namespace

void McmcConfig::validate() const {
  if (n_iterations <= 0) throw ConfigError("mcmc: n_iterations must be positive");
  if (n_burnin < 0 || n_burnin >= n_iterations) throw ConfigError("mcmc: need 0 <= n_burnin < n_iterations");
  if (thin < 1) throw ConfigError("mcmc: thin must be >= 1");
  if (adapt_window < 1) throw ConfigError("mcmc: adapt_window must be >= 1");
  if (!(target_scalar > 0 && target_scalar < 1) || !(target_vector > 0 && target_vector < 1))
    throw ConfigError("mcmc: acceptance targets must lie in (0, 1)");
  if (gh_order < 1) throw ConfigError("mcmc: gh_order must be >= 1");
}

PosteriorSamples fit(std::span<const ClusterRecord> data, const FineGrid& grid, const PriorSet& priors,
                     const McmcConfig& config, const FitHooks& hooks) {
  config.validate();
  if (!priors.structured) throw ConfigError("priors carry no structured precision");
  Sampler sampler(data, grid, priors, config, hooks);
  return sampler.run();
}

void write_samples_csv(const PosteriorSamples& samples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  if (samples.size() == 0) throw DataError("no posterior draws to write");
  const auto nb = samples.params.front().beta.size();
  const auto nr = samples.latent.front().w.size();
  std::string header = "beta_intercept";
  for (Eigen::Index j = 1; j < nb; ++j) {
    const auto idx = static_cast<std::size_t>(j - 1);
    header += ",beta_" + (idx < samples.covariate_names.size() ? samples.covariate_names[idx] : std::to_string(j));
  }
  header += ",tau,phi,sigma_eps_sq";
  for (Eigen::Index i = 0; i < nr; ++i) header += ",w_" + std::to_string(i);
  for (Eigen::Index i = 0; i < nr; ++i) header += ",v_" + std::to_string(i);
  out << header << '\n';
  for (std::size_t d = 0; d < samples.size(); ++d) {
    const auto& p = samples.params[d];
    const auto& l = samples.latent[d];
    std::string line;
    for (Eigen::Index j = 0; j < nb; ++j) line += (j ? "," : "") + fmt17(p.beta(j));
    line += "," + fmt17(p.tau) + "," + fmt17(p.phi) + "," + fmt17(p.sigma_eps_sq);
    for (Eigen::Index i = 0; i < nr; ++i) line += "," + fmt17(l.w(i));
    for (Eigen::Index i = 0; i < nr; ++i) line += "," + fmt17(l.v(i));
    out << line << '\n';
  }
  if (!out) throw DataError("failed writing " + path);
}

PosteriorSamples read_samples_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path, 1, "empty samples file");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  PosteriorSamples out;
  int nb = 0, nw = 0, nv = 0;
  for (const auto& c : cols) {
    if (c.rfind("beta_", 0) == 0) {
      if (nb > 0) out.covariate_names.push_back(c.substr(5));
      ++nb;
    } else if (c.rfind("w_", 0) == 0) {
      ++nw;
    } else if (c.rfind("v_", 0) == 0) {
      ++nv;
    }
  }
  if (nb < 1 || nw != nv || cols.size() != static_cast<std::size_t>(nb + 3 + nw + nv) || cols[0] != "beta_intercept" ||
      cols[static_cast<std::size_t>(nb)] != "tau" || cols[static_cast<std::size_t>(nb) + 1] != "phi" ||
      cols[static_cast<std::size_t>(nb) + 2] != "sigma_eps_sq")
    throw ParseError(path, 1, "unexpected samples header");
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<double> vals;
    const char* s = line.c_str();
    while (*s) {
      char* end = nullptr;
      const double v = std::strtod(s, &end);
      if (end == s) throw ParseError(path, line_no, "malformed number");
      vals.push_back(v);
      s = end;
      if (*s == ',') ++s;
      else if (*s && *s != '\r') throw ParseError(path, line_no, "malformed row");
      else if (*s == '\r') break;
    }
    if (vals.size() != cols.size()) throw ParseError(path, line_no, "wrong number of fields");
    ModelParams p;
    p.beta = Eigen::Map<const Eigen::VectorXd>(vals.data(), nb);
    p.tau = vals[static_cast<std::size_t>(nb)];
    p.phi = vals[static_cast<std::size_t>(nb) + 1];
    p.sigma_eps_sq = vals[static_cast<std::size_t>(nb) + 2];
    if (!p.in_support()) throw ParseError(path, line_no, "parameters outside their support");
    LatentField l;
    l.w = Eigen::Map<const Eigen::VectorXd>(vals.data() + nb + 3, nw);
    l.v = Eigen::Map<const Eigen::VectorXd>(vals.data() + nb + 3 + nw, nv);
    out.params.push_back(std::move(p));
    out.latent.push_back(std::move(l));
  }
  if (out.size() == 0) throw ParseError(path, line_no, "no draws");
  return out;
}

RiskDraws predict_risk(const PosteriorSamples& samples, const FineGrid& grid, std::size_t n_draws, RiskScale scale,
                       int gh_order) {
  const std::size_t stored = samples.size();
  if (n_draws == 0) n_draws = stored;
  if (n_draws > stored) throw ConfigError("predict_risk: more draws requested than stored");
  const auto& X = grid.covariates();
  const auto p = static_cast<Eigen::Index>(grid.n_covariates());
  std::vector<int> region(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) region[g] = grid.cell(g).region;
  const auto& rule = gauss_hermite(gh_order);

  RiskDraws out;
  out.values.resize(static_cast<Eigen::Index>(n_draws), static_cast<Eigen::Index>(grid.size()));
  for (std::size_t d = 0; d < n_draws; ++d) {
    const std::size_t idx = d * stored / n_draws;
    const auto& par = samples.params[idx];
    if (par.beta.size() != p + 1) throw DataError("posterior draws do not match the grid covariates");
    const Eigen::VectorXd u = bym2_effect(par, samples.latent[idx]);
    const Eigen::VectorXd eta = (X * par.beta.segment(1, p)).array() + par.beta(0);
    const double sigma = std::sqrt(par.sigma_eps_sq);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      const double e = eta(static_cast<Eigen::Index>(g)) + u(region[g]);
      double r;
      if (scale == RiskScale::surface) {
        r = logistic(e);
      } else {
        r = 0.0;
        for (std::size_t j = 0; j < rule.nodes.size(); ++j) r += std::exp(rule.log_weights[j]) * logistic(e + sigma * rule.nodes[j]);
      }
      out.values(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(g)) = r;
    }
  }
  return out;
}

Eigen::MatrixXd aggregate(const RiskDraws& draws, const FineGrid& grid, const std::vector<int>& labels, int n_areas) {
  if (labels.size() != grid.size()) throw DataError("aggregate: one label per populated cell is required");
  Eigen::MatrixXd weights = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(grid.size()), n_areas);
  Eigen::VectorXd total = Eigen::VectorXd::Zero(n_areas);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const int a = labels[g];
    if (a < 0 || a >= n_areas) throw DataError("aggregate: area label out of range");
    weights(static_cast<Eigen::Index>(g), a) = grid.cell(g).population;
    total(a) += grid.cell(g).population;
  }
  Eigen::MatrixXd out = draws.values * weights;
  for (int a = 0; a < n_areas; ++a) {
    if (total(a) > 0) out.col(a) /= total(a);
    else out.col(a).setConstant(std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

Eigen::MatrixXd aggregate(const RiskDraws& draws, const FineGrid& grid, AggregationLevel level) {
  std::vector<int> labels(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g)
    labels[g] = level == AggregationLevel::region ? grid.cell(g).region : grid.cell(g).admin2;
  return aggregate(draws, grid, labels, level == AggregationLevel::region ? grid.n_regions() : grid.n_admin2());
}

}  // namespace posfuse
