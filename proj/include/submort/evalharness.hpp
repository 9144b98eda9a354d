#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "submort/hiermodel.hpp"
#include "submort/mortdata.hpp"
#include "submort/nuts.hpp"
#include "submort/simgen.hpp"

namespace submort {

/// Nominal levels reported by default.
inline const std::vector<double> kDefaultLevels = {0.80, 0.90, 0.95};

/// Predictive quantile levels for holdout cells.
inline const std::vector<double> kPredictiveProbs = {0.025, 0.05, 0.1, 0.5, 0.9, 0.95, 0.975};

/// Fraction of i with lowers[i] <= truths[i] <= uppers[i].
double interval_coverage(std::span<const double> truths, std::span<const double> lowers,
                         std::span<const double> uppers);

/// Lower and upper probabilities of the central interval at `level`.
std::pair<double, double> central_probs(double level);

/// Entrywise coverage of the true coefficient correlations (baseline and hump,
/// every year, strict lower triangle) by central credible intervals. The model
/// must be the joint variant with the two standard curves as its basis.
double correlation_coverage(const PosteriorSamples& samples, const ModelSpec& spec,
                            const SimTruth& truth, double level);

/// Coverage of the true log-mortality rate of every cell.
double log_rate_coverage(const PosteriorSamples& samples, const ModelSpec& spec,
                         const SimTruth& truth, double level);

struct CoverageFamily {
  std::string name;
  std::size_t count = 0;
  std::vector<double> coverage;  // one per level
};

/// Correlation (joint only) and log-rate coverage at several levels, computing
/// each quantity's draws once.
std::vector<CoverageFamily> truth_coverage(const PosteriorSamples& samples, const ModelSpec& spec,
                                           const SimTruth& truth,
                                           const std::vector<double>& levels = kDefaultLevels);

struct CellPrediction {
  CellIndex cell;
  double population = 0.0;
  std::int64_t observed = 0;
  std::vector<double> quantiles;  // at kPredictiveProbs
  double median = 0.0;
  bool zero_population = false;
};

/// Posterior predictive deaths for held-out cells: one Poisson draw per
/// posterior draw, from a generator keyed by (seed, cell, chain, iteration),
/// so results do not depend on the order draws are visited.
std::vector<CellPrediction> holdout_predict(const PosteriorSamples& samples, const ModelSpec& spec,
                                            const std::vector<CellIndex>& test_cells,
                                            const MortalityDataset& data, std::uint64_t seed);

struct ErrorMetrics {
  double mad = 0.0;
  double mse = 0.0;
};

ErrorMetrics error_metrics(std::span<const double> observed, std::span<const double> predicted);

struct EvalReport {
  std::string variant;
  std::vector<double> levels;
  std::vector<CoverageFamily> coverage;
  bool has_errors = false;
  ErrorMetrics errors;
  std::size_t holdout_cells = 0;
  std::size_t zero_population_cells = 0;

  nlohmann::json to_json() const;
};

/// Coverage of observed deaths by central predictive intervals, and MAD/MSE
/// of predictive medians.
EvalReport holdout_report(const std::vector<CellPrediction>& predictions, std::string variant,
                          const std::vector<double>& levels = kDefaultLevels);

/// CSV rows `variant,metric,level,value,count` for several reports.
void write_reports_csv(std::ostream& out, const std::vector<EvalReport>& reports);

/// Samples the posterior of `spec` given `data`.
PosteriorSamples fit(const MortalityDataset& data, const ModelSpec& spec, const SamplerConfig& cfg);

struct VariantComparison {
  EvalReport joint;
  EvalReport independent;
  std::vector<CellIndex> test_cells;
};

/// Fits both variants on the training part of `split` with identical sampler
/// settings and evaluates them on the same held-out cells.
VariantComparison compare_variants(const MortalityDataset& data, const ModelSpec& spec_joint,
                                   const ModelSpec& spec_independent, const SamplerConfig& cfg,
                                   const HoldoutSplit& split, std::uint64_t predict_seed);

}  // namespace submort
