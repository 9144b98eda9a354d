#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "submort/mortdata.hpp"

namespace submort {

/// Fixed curves used to generate synthetic log-mortality schedules, evaluated
/// at age-group midpoints x (the open group is taken as 10 years wide):
///   baseline(x) = ln(5e-5 * exp(0.085 x) + 0.002 * exp(-x / 2))
///   hump(x)     = 0.6 * exp(-((x - 22) / 6)^2)
struct StandardCurves {
  static constexpr double kGompertzLevel = 5e-5;
  static constexpr double kGompertzSlope = 0.085;
  static constexpr double kInfantLevel = 0.002;
  static constexpr double kInfantDecay = 0.5;
  static constexpr double kHumpHeight = 0.6;
  static constexpr double kHumpCentre = 22.0;
  static constexpr double kHumpWidth = 6.0;

  AgeGrid age_grid;
  Eigen::VectorXd baseline;
  Eigen::VectorXd hump;

  static StandardCurves make(const AgeGrid& grid);

  /// 2 x A matrix: baseline row, then hump row.
  Eigen::MatrixXd basis() const;
  CurveCollection as_curves() const;
  static StandardCurves from_curves(const CurveCollection& curves);
};

/// Cross-subgroup correlation structure for one simulated year.
struct Regime {
  enum class Kind { independent, exchangeable, unstructured };
  Kind kind = Kind::independent;
  double rho = 0.0;          // exchangeable off-diagonal
  std::string name;          // unstructured matrix name ("default")

  Eigen::MatrixXd matrix(std::size_t dim) const;
  std::string label() const;
};

/// Parses "independent", "exchangeable", "exchangeable(0.8)", "unstructured",
/// "unstructured(default)". Throws std::invalid_argument otherwise.
Regime parse_regime(std::string_view text);

/// Built-in unstructured 5 x 5 correlation matrix; smaller dimensions use its
/// leading block.
Eigen::MatrixXd default_unstructured(std::size_t dim);

/// Independent for the first 30% of years, exchangeable(0.5) up to 60%,
/// unstructured afterwards (rounded half up). T = 10 gives 3/3/4 years.
std::vector<Regime> default_schedule(std::size_t years);

/// Fraction of an area's population in each of the 19 standard age groups
/// before jitter.
const std::vector<double>& builtin_age_shares();

struct SimConfig {
  std::size_t areas = 25;
  std::size_t years = 10;
  std::size_t subgroups = 5;
  double base_pop_unit = 100000.0;
  double growth = 0.01;
  std::vector<double> shares;  // empty: 0.5, 0.2, 0.1, ... renormalised to `subgroups`
  double baseline_coef_mean = 1.0;
  double baseline_coef_sd = 0.1;
  double hump_coef_mean = 0.0;
  double hump_coef_sd = 0.5;
  double age_jitter_sd = 0.05;
  std::vector<Regime> regime_schedule;  // empty: default_schedule(years)
  std::uint64_t seed = 0;

  void validate() const;
  std::vector<double> resolved_shares() const;
  std::vector<Regime> resolved_schedule() const;
};

nlohmann::json to_json(const SimConfig& cfg);

struct SimTruth {
  Dims dims;
  std::vector<double> log_rates;       // A*S*C*T
  std::vector<double> baseline_coefs;  // S*C*T, index (s*C + c)*T + t
  std::vector<double> hump_coefs;      // S*C*T
  std::vector<Eigen::MatrixXd> baseline_corr;  // per year
  std::vector<Eigen::MatrixXd> hump_corr;      // per year
  std::vector<Regime> regimes;                 // per year

  /// Coefficients in the model's beta layout (component, subgroup, area, year).
  std::vector<double> beta() const;
};

/// Population tensor A*S*C*T on the standard age grid.
std::vector<double> make_population(const SimConfig& cfg);

/// Correlated curve coefficients and the resulting log-mortality rates.
SimTruth make_truth(const SimConfig& cfg, const StandardCurves& curves);

/// Poisson deaths for every cell; all cells observed.
MortalityDataset draw_deaths(const SimTruth& truth, const std::vector<double>& population,
                             std::uint64_t seed);

struct Simulation {
  SimConfig config;
  StandardCurves curves;
  std::vector<double> population;
  SimTruth truth;
  MortalityDataset dataset;
};

/// Full generator: population, truth and deaths from independent streams of cfg.seed.
Simulation simulate(const SimConfig& cfg);

std::vector<std::string> subgroup_names(std::size_t n);
std::vector<std::string> area_names(std::size_t n);
std::vector<std::string> year_labels(std::size_t n);

}  // namespace submort
