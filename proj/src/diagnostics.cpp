#include "submort/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <boost/math/distributions/normal.hpp>

#include "submort/nuts.hpp"

namespace submort {

namespace {

void require_shape(const ChainSeries& chains) {
  if (chains.empty()) throw std::invalid_argument("no chains supplied");
  const std::size_t n = chains.front().size();
  for (const auto& c : chains) {
    if (c.size() != n) throw std::invalid_argument("chains have different lengths");
  }
  if (n < 4) throw std::invalid_argument("need at least four draws per chain");
}

ChainSeries split(const ChainSeries& chains) {
  ChainSeries out;
  out.reserve(2 * chains.size());
  for (const auto& c : chains) {
    const std::size_t half = c.size() / 2;
    out.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(half));
    out.emplace_back(c.end() - static_cast<std::ptrdiff_t>(half), c.end());
  }
  return out;
}

double mean(const std::vector<double>& x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

double sample_variance(const std::vector<double>& x) {
  const double m = mean(x);
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return ss / static_cast<double>(x.size() - 1);
}

// Potential scale reduction of already-split chains.
double rhat_of(const ChainSeries& chains) {
  const double n = static_cast<double>(chains.front().size());
  std::vector<double> means, vars;
  for (const auto& c : chains) {
    means.push_back(mean(c));
    vars.push_back(sample_variance(c));
  }
  const double w = mean(vars);
  if (!(w > 0.0)) return std::numeric_limits<double>::infinity();
  const double b = chains.size() > 1 ? n * sample_variance(means) : 0.0;
  const double var_plus = (n - 1.0) / n * w + b / n;
  return std::sqrt(var_plus / w);
}

// Effective sample size of already-split chains.
double ess_of(const ChainSeries& chains) {
  const std::size_t m = chains.size();
  const std::size_t n = chains.front().size();
  std::vector<double> means(m), chain_var(m);
  for (std::size_t j = 0; j < m; ++j) {
    means[j] = mean(chains[j]);
    chain_var[j] = sample_variance(chains[j]);
  }
  const double mean_var = mean(chain_var);
  double var_plus = mean_var * (static_cast<double>(n) - 1.0) / static_cast<double>(n);
  if (m > 1) var_plus += sample_variance(means);
  if (!(var_plus > 0.0) || !std::isfinite(var_plus)) return 0.0;

  // Mean over chains of the biased autocovariance at `lag`.
  auto acov = [&](std::size_t lag) {
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const auto& c = chains[j];
      double s = 0.0;
      for (std::size_t i = 0; i + lag < n; ++i) s += (c[i] - means[j]) * (c[i + lag] - means[j]);
      total += s / static_cast<double>(n);
    }
    return total / static_cast<double>(m);
  };

  std::vector<double> rho(n + 1, 0.0);
  rho[0] = 1.0;
  double rho_even = 1.0;
  double rho_odd = 1.0 - (mean_var - acov(1)) / var_plus;
  rho[1] = rho_odd;
  std::size_t t = 1;
  while (t + 5 < n && rho_even + rho_odd > 0.0) {
    rho_even = 1.0 - (mean_var - acov(t + 1)) / var_plus;
    rho_odd = 1.0 - (mean_var - acov(t + 2)) / var_plus;
    if (rho_even + rho_odd >= 0.0) {
      rho[t + 1] = rho_even;
      rho[t + 2] = rho_odd;
    }
    t += 2;
  }
  const std::size_t max_t = t;
  if (rho_even > 0.0) rho[max_t + 1] = rho_even;

  // Enforce a monotone sequence of paired sums.
  for (std::size_t k = 1; k + 2 <= max_t; k += 2) {
    if (rho[k + 1] + rho[k + 2] > rho[k - 1] + rho[k]) {
      rho[k + 1] = 0.5 * (rho[k - 1] + rho[k]);
      rho[k + 2] = rho[k + 1];
    }
  }

  const double total = static_cast<double>(m * n);
  double tau = -1.0 + rho[max_t + 1];
  for (std::size_t k = 0; k <= max_t; ++k) tau += 2.0 * rho[k];
  tau = std::max(tau, 1.0 / std::log10(total));
  return std::min(total / tau, total);
}

ChainSeries folded(const ChainSeries& chains) {
  std::vector<double> pooled;
  for (const auto& c : chains) pooled.insert(pooled.end(), c.begin(), c.end());
  std::sort(pooled.begin(), pooled.end());
  const double med = quantile_sorted(pooled, 0.5);
  ChainSeries out = chains;
  for (auto& c : out) {
    for (double& v : c) v = std::abs(v - med);
  }
  return out;
}

}  // namespace

ChainSeries rank_normalize(const ChainSeries& chains) {
  std::size_t total = 0;
  for (const auto& c : chains) total += c.size();
  std::vector<std::pair<double, std::size_t>> pooled;
  pooled.reserve(total);
  std::size_t k = 0;
  for (const auto& c : chains) {
    for (double v : c) pooled.emplace_back(v, k++);
  }
  std::sort(pooled.begin(), pooled.end());

  std::vector<double> z(total);
  const boost::math::normal_distribution<double> std_normal;
  const double denom = static_cast<double>(total) + 0.25;
  for (std::size_t i = 0; i < total;) {
    std::size_t j = i;
    while (j + 1 < total && pooled[j + 1].first == pooled[i].first) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    const double score = boost::math::quantile(std_normal, (avg_rank - 0.375) / denom);
    for (std::size_t r = i; r <= j; ++r) z[pooled[r].second] = score;
    i = j + 1;
  }

  ChainSeries out;
  k = 0;
  for (const auto& c : chains) {
    out.emplace_back(z.begin() + static_cast<std::ptrdiff_t>(k),
                     z.begin() + static_cast<std::ptrdiff_t>(k + c.size()));
    k += c.size();
  }
  return out;
}

double split_rhat(const ChainSeries& chains) {
  require_shape(chains);
  return rhat_of(split(chains));
}

double rank_rhat(const ChainSeries& chains) {
  require_shape(chains);
  const ChainSeries halves = split(chains);
  const double bulk = rhat_of(rank_normalize(halves));
  const double tail = rhat_of(rank_normalize(folded(halves)));
  return std::max(bulk, tail);
}

double ess_basic(const ChainSeries& chains) {
  require_shape(chains);
  return ess_of(split(chains));
}

double ess_bulk(const ChainSeries& chains) {
  require_shape(chains);
  const ChainSeries halves = split(chains);
  // A constant series has no information; rank normalisation would hide that.
  const double first = halves.front().front();
  bool constant = true;
  for (const auto& c : halves) {
    for (double v : c) constant = constant && v == first;
  }
  if (constant) return 0.0;
  return ess_of(rank_normalize(halves));
}

double quantile_sorted(const std::vector<double>& sorted, double prob) {
  if (sorted.empty()) throw std::invalid_argument("quantile of an empty sample");
  if (!(prob >= 0.0 && prob <= 1.0)) throw std::invalid_argument("probability outside [0, 1]");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = h - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<double> quantiles(std::vector<double> values, const std::vector<double>& probs) {
  std::sort(values.begin(), values.end());
  std::vector<double> out;
  out.reserve(probs.size());
  for (double p : probs) out.push_back(quantile_sorted(values, p));
  return out;
}

double Diagnostics::max_rhat() const {
  double m = 0.0;
  for (double r : rhat) m = std::max(m, r);
  return m;
}

double Diagnostics::min_ess() const {
  double m = std::numeric_limits<double>::infinity();
  for (double e : ess) m = std::min(m, e);
  return m;
}

Diagnostics diagnose(const PosteriorSamples& samples, std::vector<std::string> names) {
  if (names.size() != samples.dim) {
    throw std::invalid_argument("one name per parameter is required");
  }
  Diagnostics d;
  d.names = std::move(names);
  d.rhat.reserve(samples.dim);
  d.ess.reserve(samples.dim);
  for (std::size_t k = 0; k < samples.dim; ++k) {
    const ChainSeries series = samples.coordinate(k);
    d.rhat.push_back(rank_rhat(series));
    d.ess.push_back(ess_bulk(series));
  }
  d.divergences = samples.divergences();
  for (const auto& c : samples.chains) {
    std::vector<double> e;
    e.reserve(c.stats.size());
    for (const auto& s : c.stats) e.push_back(s.energy);
    d.energy.push_back(std::move(e));
  }
  return d;
}

}  // namespace submort
