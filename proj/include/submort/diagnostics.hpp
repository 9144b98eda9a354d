#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace submort {

struct PosteriorSamples;

/// One scalar series per chain.
using ChainSeries = std::vector<std::vector<double>>;

/// Split-chain potential scale reduction. Each chain is halved (a middle draw
/// of an odd-length chain is dropped). Returns +infinity when the within-chain
/// variance is zero. Requires at least two chains or at least four draws.
double split_rhat(const ChainSeries& chains);

/// Rank-normalised split R-hat: the larger of the bulk and folded (tail) values.
double rank_rhat(const ChainSeries& chains);

/// Split-chain effective sample size of the raw values, with Geyer's initial
/// positive and monotone sequence truncation. 0 for a constant series.
double ess_basic(const ChainSeries& chains);

/// Effective sample size after rank normalisation (bulk ESS).
double ess_bulk(const ChainSeries& chains);

/// Normal scores of pooled fractional ranks, (r - 3/8) / (n + 1/4), ties averaged.
ChainSeries rank_normalize(const ChainSeries& chains);

/// Type-7 empirical quantile of sorted values.
double quantile_sorted(const std::vector<double>& sorted, double prob);

/// Type-7 quantiles of unsorted values at each probability.
std::vector<double> quantiles(std::vector<double> values, const std::vector<double>& probs);

struct Diagnostics {
  std::vector<std::string> names;
  std::vector<double> rhat;  // rank-normalised split R-hat
  std::vector<double> ess;   // bulk ESS
  std::size_t divergences = 0;
  std::vector<std::vector<double>> energy;  // per chain

  double max_rhat() const;
  double min_ess() const;
};

/// Per-coordinate diagnostics over all sampled parameters.
Diagnostics diagnose(const PosteriorSamples& samples, std::vector<std::string> names);

}  // namespace submort
