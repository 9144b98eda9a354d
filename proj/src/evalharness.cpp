#include "submort/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "submort/csv.hpp"
#include "submort/diagnostics.hpp"
#include "submort/posterior.hpp"

namespace submort {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Small counter-seeded generator for per-draw predictive simulation.
class KeyedEngine {
 public:
  using result_type = std::uint64_t;
  KeyedEngine(std::uint64_t seed, std::uint64_t cell, std::uint64_t chain, std::uint64_t iter)
      : state_(seed) {
    for (std::uint64_t k : {cell, chain, iter}) {
      state_ ^= k + 0x9e3779b97f4a7c15ULL;
      splitmix64(state_);
    }
  }
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return ~result_type{0}; }
  result_type operator()() { return splitmix64(state_); }

 private:
  std::uint64_t state_;
};

void check_level(double level) {
  if (!(level >= 0.0 && level <= 1.0)) {
    throw std::invalid_argument("level must lie in [0, 1]");
  }
}

// Coverage of `truth` values by central intervals of pooled `draws` at each level.
std::vector<double> coverage_at_levels(std::vector<std::vector<double>>& draws,
                                       const std::vector<double>& truth,
                                       const std::vector<double>& levels) {
  const std::size_t n = truth.size();
  std::vector<std::vector<double>> lo(levels.size(), std::vector<double>(n)),
      hi(levels.size(), std::vector<double>(n));
  for (std::size_t q = 0; q < n; ++q) {
    std::sort(draws[q].begin(), draws[q].end());
    for (std::size_t l = 0; l < levels.size(); ++l) {
      const auto [pl, pu] = central_probs(levels[l]);
      lo[l][q] = quantile_sorted(draws[q], pl);
      hi[l][q] = quantile_sorted(draws[q], pu);
    }
  }
  std::vector<double> out;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    out.push_back(interval_coverage(truth, lo[l], hi[l]));
  }
  return out;
}

void require_truth_match(const ModelSpec& spec, const SimTruth& truth) {
  if (!(spec.dims == truth.dims)) {
    throw std::invalid_argument("fitted model and simulation truth have different dimensions");
  }
}

void require_correlation_fit(const ModelSpec& spec) {
  if (!spec.has_correlations()) {
    throw std::invalid_argument("correlation coverage needs a joint-variant fit with several "
                                "subpopulations");
  }
  if (spec.components() != 2) {
    throw std::invalid_argument("correlation coverage needs the two standard curves as basis");
  }
}

std::pair<std::vector<Quantity>, std::vector<double>> correlation_targets(const ModelSpec& spec,
                                                                          const SimTruth& truth) {
  std::vector<Quantity> qs;
  std::vector<double> values;
  const std::size_t S = spec.dims.subpops;
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& truth_corr = i == 0 ? truth.baseline_corr : truth.hump_corr;
    for (std::size_t t = 0; t < spec.dims.years; ++t) {
      for (std::size_t r = 1; r < S; ++r) {
        for (std::size_t k = 0; k < r; ++k) {
          Quantity q;
          q.kind = Quantity::Kind::corr_beta;
          q.index = {i, spec.period(t), r, k};
          q.name = "corr_beta";
          qs.push_back(q);
          values.push_back(truth_corr[t](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)));
        }
      }
    }
  }
  return {std::move(qs), std::move(values)};
}

std::vector<Quantity> cell_quantities(std::span<const CellIndex> cells) {
  std::vector<Quantity> qs;
  qs.reserve(cells.size());
  for (const auto& c : cells) {
    Quantity q;
    q.kind = Quantity::Kind::log_rate;
    q.index = {c.age, c.subpop, c.area, c.year};
    q.name = "log_rate";
    qs.push_back(q);
  }
  return qs;
}

// Log rates are processed in chunks to bound memory.
CoverageFamily log_rate_family(const PosteriorSamples& samples, const ModelSpec& spec,
                               const SimTruth& truth, const std::vector<double>& levels) {
  const auto all = log_rate_quantities(spec);
  const std::size_t chunk = 2048;
  std::vector<double> hits(levels.size(), 0.0);
  for (std::size_t start = 0; start < all.size(); start += chunk) {
    const std::size_t end = std::min(all.size(), start + chunk);
    const std::vector<Quantity> part(all.begin() + static_cast<std::ptrdiff_t>(start),
                                     all.begin() + static_cast<std::ptrdiff_t>(end));
    const std::vector<double> values(truth.log_rates.begin() + static_cast<std::ptrdiff_t>(start),
                                     truth.log_rates.begin() + static_cast<std::ptrdiff_t>(end));
    auto draws = quantity_draws(samples, spec, part);
    const auto cov = coverage_at_levels(draws, values, levels);
    for (std::size_t l = 0; l < levels.size(); ++l) {
      hits[l] += cov[l] * static_cast<double>(part.size());
    }
  }
  CoverageFamily rates{"log_rate", all.size(), {}};
  for (double h : hits) rates.coverage.push_back(h / static_cast<double>(all.size()));
  return rates;
}

}  // namespace

double interval_coverage(std::span<const double> truths, std::span<const double> lowers,
                         std::span<const double> uppers) {
  if (truths.size() != lowers.size() || truths.size() != uppers.size()) {
    throw std::invalid_argument("truths, lowers and uppers must have equal lengths");
  }
  if (truths.empty()) throw std::invalid_argument("coverage of an empty set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    if (lowers[i] > uppers[i]) throw std::invalid_argument("interval lower bound exceeds upper");
    if (lowers[i] <= truths[i] && truths[i] <= uppers[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(truths.size());
}

std::pair<double, double> central_probs(double level) {
  check_level(level);
  const double tail = 0.5 * (1.0 - level);
  return {tail, 1.0 - tail};
}

double correlation_coverage(const PosteriorSamples& samples, const ModelSpec& spec,
                            const SimTruth& truth, double level) {
  require_truth_match(spec, truth);
  require_correlation_fit(spec);
  auto [qs, values] = correlation_targets(spec, truth);
  auto draws = quantity_draws(samples, spec, qs);
  return coverage_at_levels(draws, values, {level}).front();
}

double log_rate_coverage(const PosteriorSamples& samples, const ModelSpec& spec,
                         const SimTruth& truth, double level) {
  require_truth_match(spec, truth);
  return log_rate_family(samples, spec, truth, {level}).coverage.front();
}

std::vector<CoverageFamily> truth_coverage(const PosteriorSamples& samples, const ModelSpec& spec,
                                           const SimTruth& truth,
                                           const std::vector<double>& levels) {
  require_truth_match(spec, truth);
  for (double l : levels) check_level(l);
  std::vector<CoverageFamily> out;
  if (spec.has_correlations() && spec.components() == 2) {
    auto [qs, values] = correlation_targets(spec, truth);
    auto draws = quantity_draws(samples, spec, qs);
    out.push_back(CoverageFamily{"correlation", values.size(),
                                 coverage_at_levels(draws, values, levels)});
  }
  out.push_back(log_rate_family(samples, spec, truth, levels));
  return out;
}

std::vector<CellPrediction> holdout_predict(const PosteriorSamples& samples, const ModelSpec& spec,
                                            const std::vector<CellIndex>& test_cells,
                                            const MortalityDataset& data, std::uint64_t seed) {
  if (!(spec.dims == data.dims())) {
    throw std::invalid_argument("model and dataset dimensions differ");
  }
  for (const auto& c : test_cells) {
    if (!data.dims().contains(c)) throw std::invalid_argument("test cell outside the dataset");
  }
  const auto draws = quantity_draws(samples, spec, cell_quantities(test_cells));
  const std::size_t per_chain = samples.draws_per_chain();

  std::vector<CellPrediction> out;
  out.reserve(test_cells.size());
  std::vector<double> sim;
  for (std::size_t j = 0; j < test_cells.size(); ++j) {
    CellPrediction p;
    p.cell = test_cells[j];
    p.population = data.population(p.cell);
    p.observed = data.deaths(p.cell);
    p.zero_population = !(p.population > 0.0);
    const std::uint64_t flat = data.dims().index(p.cell);
    sim.assign(draws[j].size(), 0.0);
    if (!p.zero_population) {
      for (std::size_t d = 0; d < draws[j].size(); ++d) {
        const double mean = p.population * std::exp(draws[j][d]);
        if (!(mean > 0.0)) continue;
        if (!std::isfinite(mean)) {
          sim[d] = mean;
          continue;
        }
        KeyedEngine engine(seed, flat, d / per_chain, d % per_chain);
        std::poisson_distribution<std::int64_t> poisson(mean);
        sim[d] = static_cast<double>(poisson(engine));
      }
    }
    std::sort(sim.begin(), sim.end());
    for (double prob : kPredictiveProbs) p.quantiles.push_back(quantile_sorted(sim, prob));
    p.median = quantile_sorted(sim, 0.5);
    out.push_back(std::move(p));
  }
  return out;
}

ErrorMetrics error_metrics(std::span<const double> observed, std::span<const double> predicted) {
  if (observed.size() != predicted.size()) {
    throw std::invalid_argument("observed and predicted must have equal lengths");
  }
  if (observed.empty()) throw std::invalid_argument("error metrics of an empty set");
  ErrorMetrics m;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double e = observed[i] - predicted[i];
    m.mad += std::abs(e);
    m.mse += e * e;
  }
  m.mad /= static_cast<double>(observed.size());
  m.mse /= static_cast<double>(observed.size());
  return m;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json cov = nlohmann::json::object();
  for (const auto& f : coverage) {
    nlohmann::json by_level = nlohmann::json::object();
    for (std::size_t l = 0; l < levels.size(); ++l) {
      by_level[csv::format_double(levels[l])] = f.coverage[l];
    }
    cov[f.name] = {{"count", f.count}, {"coverage", by_level}};
  }
  nlohmann::json j = {{"variant", variant}, {"levels", levels}, {"coverage", cov}};
  if (has_errors) {
    j["mad"] = errors.mad;
    j["mse"] = errors.mse;
    j["holdout_cells"] = holdout_cells;
    j["zero_population_cells"] = zero_population_cells;
  }
  return j;
}

EvalReport holdout_report(const std::vector<CellPrediction>& predictions, std::string variant,
                          const std::vector<double>& levels) {
  if (predictions.empty()) throw std::invalid_argument("no holdout predictions");
  EvalReport r;
  r.variant = std::move(variant);
  r.levels = levels;
  r.holdout_cells = predictions.size();
  std::vector<double> observed, medians;
  for (const auto& p : predictions) {
    observed.push_back(static_cast<double>(p.observed));
    medians.push_back(p.median);
    if (p.zero_population) ++r.zero_population_cells;
  }
  CoverageFamily fam{"holdout_deaths", predictions.size(), {}};
  for (double level : levels) {
    const auto [pl, pu] = central_probs(level);
    std::vector<double> lo, hi;
    for (const auto& p : predictions) {
      const auto at = [&](double prob) {
        const auto it = std::find_if(kPredictiveProbs.begin(), kPredictiveProbs.end(),
                                     [&](double x) { return std::abs(x - prob) < 1e-12; });
        if (it == kPredictiveProbs.end()) {
          throw std::invalid_argument("level " + csv::format_double(level) +
                                      " has no matching predictive quantiles");
        }
        return p.quantiles[static_cast<std::size_t>(it - kPredictiveProbs.begin())];
      };
      lo.push_back(at(pl));
      hi.push_back(at(pu));
    }
    fam.coverage.push_back(interval_coverage(observed, lo, hi));
  }
  r.coverage.push_back(std::move(fam));
  r.has_errors = true;
  r.errors = error_metrics(observed, medians);
  return r;
}

void write_reports_csv(std::ostream& out, const std::vector<EvalReport>& reports) {
  out << "variant,metric,level,value,count\n";
  for (const auto& r : reports) {
    for (const auto& f : r.coverage) {
      for (std::size_t l = 0; l < r.levels.size(); ++l) {
        out << csv::escape(r.variant) << ",coverage_" << f.name << ','
            << csv::format_double(r.levels[l]) << ',' << csv::format_double(f.coverage[l]) << ','
            << f.count << '\n';
      }
    }
    if (r.has_errors) {
      out << csv::escape(r.variant) << ",mad,NA," << csv::format_double(r.errors.mad) << ','
          << r.holdout_cells << '\n';
      out << csv::escape(r.variant) << ",mse,NA," << csv::format_double(r.errors.mse) << ','
          << r.holdout_cells << '\n';
    }
  }
}

PosteriorSamples fit(const MortalityDataset& data, const ModelSpec& spec, const SamplerConfig& cfg) {
  const PosteriorDensity density(spec, data);
  return sample(density, cfg);
}

VariantComparison compare_variants(const MortalityDataset& data, const ModelSpec& spec_joint,
                                   const ModelSpec& spec_independent, const SamplerConfig& cfg,
                                   const HoldoutSplit& split, std::uint64_t predict_seed) {
  if (spec_joint.variant != Variant::joint || spec_independent.variant != Variant::independent) {
    throw std::invalid_argument("compare_variants expects a joint and an independent spec");
  }
  VariantComparison out;
  out.test_cells = split.test_cells;
  const auto run = [&](const ModelSpec& spec) {
    const auto samples = fit(split.train, spec, cfg);
    const auto preds = holdout_predict(samples, spec, split.test_cells, data, predict_seed);
    return holdout_report(preds, to_string(spec.variant));
  };
  out.joint = run(spec_joint);
  out.independent = run(spec_independent);
  return out;
}

}  // namespace submort
