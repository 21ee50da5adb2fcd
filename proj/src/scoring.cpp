#include "posfuse/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <tuple>

#include <boost/math/distributions/normal.hpp>

#include "posfuse/errors.hpp"

namespace posfuse {

PredictiveSample::PredictiveSample(std::vector<double> draws) : draws_(std::move(draws)) {
  if (draws_.empty()) throw DataError("predictive sample is empty");
  for (double d : draws_)
    if (!std::isfinite(d)) throw DataError("predictive sample has a non-finite draw");
  std::sort(draws_.begin(), draws_.end());
}

PredictiveSample PredictiveSample::probability(std::vector<double> draws) {
  for (double d : draws)
    if (!(d >= 0.0 && d <= 1.0)) throw DataError("probability draw outside [0, 1]");
  return PredictiveSample(std::move(draws));
}

PredictiveSample PredictiveSample::unbounded(std::vector<double> draws) { return PredictiveSample(std::move(draws)); }

double PredictiveSample::mean() const {
  return std::accumulate(draws_.begin(), draws_.end(), 0.0) / static_cast<double>(draws_.size());
}

double PredictiveSample::quantile(double p) const {
  const std::size_t m = draws_.size();
  if (m == 1) return draws_[0];
  const double h = (static_cast<double>(m) - 1.0) * std::clamp(p, 0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= m) return draws_[m - 1];
  return draws_[lo] + (h - static_cast<double>(lo)) * (draws_[lo + 1] - draws_[lo]);
}

double crps(double y, const PredictiveSample& pred) {
  const auto& x = pred.draws();
  const double m = static_cast<double>(x.size());
  double abs_dev = 0.0, spread = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    abs_dev += std::abs(x[i] - y);
    spread += (2.0 * static_cast<double>(i + 1) - m - 1.0) * x[i];
  }
  // mean |X - X'| over all ordered pairs equals 2/m^2 sum (2i - m - 1) x_(i).
  return std::max(0.0, abs_dev / m - spread / (m * m));
}

Interval empirical_interval(const PredictiveSample& pred, double alpha) {
  const auto& x = pred.draws();
  const double m = static_cast<double>(x.size());
  const double lo_pos = m * alpha / 2.0;
  const double hi_pos = m * (1.0 - alpha / 2.0);
  auto lo = static_cast<std::size_t>(std::floor(lo_pos + 1e-9));
  auto hi = static_cast<std::size_t>(std::ceil(hi_pos - 1e-9));
  lo = std::min(lo, x.size() - 1);
  hi = std::clamp<std::size_t>(hi, 1, x.size()) - 1;
  return {x[lo], x[hi]};
}

double interval_score(double y, const PredictiveSample& pred, double alpha) {
  const auto [l, u] = empirical_interval(pred, alpha);
  double s = u - l;
  if (y < l) s += 2.0 / alpha * (l - y);
  if (y > u) s += 2.0 / alpha * (y - u);
  return s;
}

double fuzzy_coverage(double y, const PredictiveSample& pred, double alpha) {
  const auto& x = pred.draws();
  const double lo_level = alpha / 2.0, hi_level = 1.0 - alpha / 2.0;
  const auto first = std::lower_bound(x.begin(), x.end(), y);
  const auto last = std::upper_bound(x.begin(), x.end(), y);
  const auto n_tied = static_cast<std::size_t>(last - first);
  const double denom = x.size() > 1 ? static_cast<double>(x.size()) - 1.0 : 1.0;
  if (n_tied >= 2 || x.size() == 1) {
    // Atom of the interpolated CDF: levels [G(y-), G(y)] are all realized at y.
    double g_lo = static_cast<double>(first - x.begin()) / denom;
    double g_hi = static_cast<double>(last - x.begin() - 1) / denom;
    if (x.size() == 1) g_lo = 0.0, g_hi = 1.0;
    const double overlap = std::max(0.0, std::min(g_hi, hi_level) - std::max(g_lo, lo_level));
    return overlap / (g_hi - g_lo);
  }
  if (y < x.front() || y > x.back()) return 0.0;
  // Continuous part: y is covered iff its interpolated CDF level is inside.
  double g;
  if (n_tied == 1) {
    g = static_cast<double>(first - x.begin()) / denom;
  } else {
    const auto i = static_cast<std::size_t>(first - x.begin());  // x[i-1] < y < x[i]
    g = (static_cast<double>(i) - 1.0 + (y - x[i - 1]) / (x[i] - x[i - 1])) / denom;
  }
  return (g >= lo_level && g <= hi_level) ? 1.0 : 0.0;
}

double fuzzy_width(const PredictiveSample& pred, double alpha) {
  return pred.quantile(1.0 - alpha / 2.0) - pred.quantile(alpha / 2.0);
}

double mse(double y, const PredictiveSample& pred) {
  const double d = pred.mean() - y;
  return d * d;
}

MetricSet score_all(double y, const PredictiveSample& pred, double alpha) {
  MetricSet s;
  s.bias = pred.mean() - y;
  s.mse = mse(y, pred);
  s.crps = crps(y, pred);
  s.interval_score = interval_score(y, pred, alpha);
  s.coverage = fuzzy_coverage(y, pred, alpha);
  s.width = fuzzy_width(pred, alpha);
  return s;
}

std::vector<std::size_t> FoldPlan::members(int f) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold.size(); ++i)
    if (fold[i] == f) out.push_back(i);
  return out;
}

FoldPlan make_folds(std::span<const ClusterRecord> data, Rng& rng, int n_folds) {
  if (n_folds < 1) throw ConfigError("n_folds must be positive");
  using Key = std::tuple<int, int, int>;
  std::map<Key, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& r = data[i];
    if (!r.region) throw DataError("cluster without a region label cannot be stratified");
    strata[{static_cast<int>(r.survey), *r.region, static_cast<int>(r.urbanicity)}].push_back(i);
  }
  FoldPlan plan;
  plan.n_folds = n_folds;
  plan.fold.assign(data.size(), 0);
  plan.stratum.assign(data.size(), 0);
  int offset = 0, s = 0;
  for (auto& [key, members] : strata) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t j = 0; j < members.size(); ++j) {
      plan.fold[members[j]] = 1 + static_cast<int>((static_cast<std::size_t>(offset) + j) % static_cast<std::size_t>(n_folds));
      plan.stratum[members[j]] = s;
    }
    offset = static_cast<int>((static_cast<std::size_t>(offset) + members.size()) % static_cast<std::size_t>(n_folds));
    ++s;
  }
  return plan;
}

DirectEstimate direct_estimate(std::span<const ClusterRecord> clusters) {
  double wy = 0.0, wn = 0.0;
  for (const auto& c : clusters) {
    wy += c.weight * c.y;
    wn += c.weight * c.n;
  }
  if (!(wn > 0)) throw DataError("direct estimate needs positive total weight");
  DirectEstimate est;
  est.mean = wy / wn;
  const std::size_t m = clusters.size();
  if (m < 2) return est;
  std::vector<double> z(m);
  for (std::size_t i = 0; i < m; ++i) z[i] = clusters[i].weight * (clusters[i].y - est.mean * clusters[i].n);
  const double zbar = std::accumulate(z.begin(), z.end(), 0.0) / static_cast<double>(m);
  double ss = 0.0;
  for (double zi : z) ss += (zi - zbar) * (zi - zbar);
  est.variance = static_cast<double>(m) / (static_cast<double>(m) - 1.0) * ss / (wn * wn);
  return est;
}

DirectEstimate precision_weighted_combine(const DirectEstimate& a, const DirectEstimate& b) {
  if (!a.variance || !b.variance) throw DataError("precision weighting needs both variances");
  if (*a.variance <= 0.0) return a;
  if (*b.variance <= 0.0) return b;
  if (std::isinf(*b.variance)) return a;
  if (std::isinf(*a.variance)) return b;
  const double pa = 1.0 / *a.variance, pb = 1.0 / *b.variance;
  return {(pa * a.mean + pb * b.mean) / (pa + pb), 1.0 / (pa + pb)};
}

namespace {

// Draw from N(mu, sd^2) truncated to [lo, hi] by inversion, working in the
// lower tail for accuracy.
double truncated_normal(double mu, double sd, double lo, double hi, Rng& rng) {
  const boost::math::normal_distribution<double> std_normal;
  double a = (lo - mu) / sd, b = (hi - mu) / sd;
  const bool flip = a + b > 0.0;
  if (flip) std::tie(a, b) = std::make_pair(-b, -a);
  const double pa = boost::math::cdf(std_normal, a), pb = boost::math::cdf(std_normal, b);
  double z;
  if (!(pb > pa)) {
    z = std::abs(a) < std::abs(b) ? a : b;
  } else {
    const double u = pa + uniform01(rng) * (pb - pa);
    z = u > 0.0 ? std::clamp(boost::math::quantile(std_normal, std::min(u, 1.0 - 1e-16)), a, b) : a;
  }
  if (flip) z = -z;
  return std::clamp(mu + sd * z, lo, hi);
}

}  // namespace

PredictiveSample diff_distribution(const PredictiveSample& model_draws, const DirectEstimate& direct, Rng& rng,
                                   std::size_t m) {
  if (m == 0) m = model_draws.size();
  const double var = direct.variance.value_or(0.0);
  if (var < 0.0) throw DataError("direct estimate variance is negative");
  const double sd = std::sqrt(var);
  const auto& x = model_draws.draws();
  std::vector<double> diffs(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double model = x[i * x.size() / m];
    const double obs = sd > 0.0 ? truncated_normal(direct.mean, sd, 0.0, 1.0, rng) : std::clamp(direct.mean, 0.0, 1.0);
    diffs[i] = model - obs;
  }
  return PredictiveSample::unbounded(std::move(diffs));
}

double aggregate_scores(std::span<const double> scores, std::span<const double> weights) {
  if (scores.size() != weights.size()) throw DataError("aggregate_scores: size mismatch");
  double sw = 0.0, s = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (weights[i] < 0.0) throw DataError("aggregate_scores: negative weight");
    if (weights[i] == 0.0) continue;
    sw += weights[i];
    s += weights[i] * scores[i];
  }
  if (!(sw > 0.0)) throw DataError("aggregate_scores: zero total weight");
  return s / sw;
}

double combine_survey_scores(double score_a, double n_a, double score_b, double n_b) {
  const double w[] = {n_a, n_b};
  const double s[] = {score_a, score_b};
  return aggregate_scores(s, w);
}

}  // namespace posfuse
