#include "submort/simgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <stdexcept>

#include "submort/csv.hpp"

namespace submort {

namespace {

enum Stream : std::uint32_t { kPopulation = 1, kTruth = 2, kDeaths = 3 };

std::mt19937_64 stream_rng(std::uint64_t seed, Stream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                    static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

std::string zero_padded(std::size_t value, std::size_t width) {
  std::string s = std::to_string(value);
  if (s.size() < width) s.insert(0, width - s.size(), '0');
  return s;
}

bool is_positive_definite(const Eigen::MatrixXd& m) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  return llt.info() == Eigen::Success;
}

}  // namespace

StandardCurves StandardCurves::make(const AgeGrid& grid) {
  const auto x = grid.midpoints(10.0);
  StandardCurves c{grid, Eigen::VectorXd(static_cast<Eigen::Index>(x.size())),
                   Eigen::VectorXd(static_cast<Eigen::Index>(x.size()))};
  for (std::size_t a = 0; a < x.size(); ++a) {
    const auto k = static_cast<Eigen::Index>(a);
    c.baseline[k] = std::log(kGompertzLevel * std::exp(kGompertzSlope * x[a]) +
                             kInfantLevel * std::exp(-kInfantDecay * x[a]));
    const double u = (x[a] - kHumpCentre) / kHumpWidth;
    c.hump[k] = kHumpHeight * std::exp(-u * u);
  }
  return c;
}

Eigen::MatrixXd StandardCurves::basis() const {
  Eigen::MatrixXd b(2, baseline.size());
  b.row(0) = baseline.transpose();
  b.row(1) = hump.transpose();
  return b;
}

CurveCollection StandardCurves::as_curves() const {
  CurveCollection c{age_grid, basis(), {CurveMeta{"baseline", "", ""}, CurveMeta{"hump", "", ""}}};
  c.validate();
  return c;
}

StandardCurves StandardCurves::from_curves(const CurveCollection& curves) {
  if (curves.rows.rows() != 2 || curves.row_meta[0].subpop != "baseline" ||
      curves.row_meta[1].subpop != "hump") {
    throw std::invalid_argument("standard curves file must hold a baseline row and a hump row");
  }
  return StandardCurves{curves.age_grid, curves.rows.row(0).transpose(),
                        curves.rows.row(1).transpose()};
}

Eigen::MatrixXd default_unstructured(std::size_t dim) {
  static const double kMatrix[5][5] = {
      {1.00, 0.80, 0.60, 0.40, 0.20},
      {0.80, 1.00, 0.50, 0.30, 0.10},
      {0.60, 0.50, 1.00, 0.45, 0.25},
      {0.40, 0.30, 0.45, 1.00, 0.70},
      {0.20, 0.10, 0.25, 0.70, 1.00},
  };
  if (dim < 1 || dim > 5) {
    throw std::invalid_argument("the default unstructured matrix covers 1 to 5 subgroups");
  }
  Eigen::MatrixXd m(dim, dim);
  for (std::size_t r = 0; r < dim; ++r) {
    for (std::size_t c = 0; c < dim; ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = kMatrix[r][c];
    }
  }
  return m;
}

Eigen::MatrixXd Regime::matrix(std::size_t dim) const {
  switch (kind) {
    case Kind::independent: return Eigen::MatrixXd::Identity(dim, dim);
    case Kind::exchangeable: {
      Eigen::MatrixXd m = Eigen::MatrixXd::Constant(dim, dim, rho);
      m.diagonal().setOnes();
      if (!is_positive_definite(m)) {
        throw std::invalid_argument("exchangeable correlation " + csv::format_double(rho) +
                                    " is not positive definite in dimension " +
                                    std::to_string(dim));
      }
      return m;
    }
    case Kind::unstructured:
      if (name != "default") {
        throw std::invalid_argument("unknown unstructured matrix '" + name + "'");
      }
      return default_unstructured(dim);
  }
  return {};
}

std::string Regime::label() const {
  switch (kind) {
    case Kind::independent: return "independent";
    case Kind::exchangeable: return "exchangeable(" + csv::format_double(rho) + ")";
    case Kind::unstructured: return "unstructured(" + name + ")";
  }
  return {};
}

Regime parse_regime(std::string_view text) {
  std::string_view head = text;
  std::string_view arg;
  if (const auto open = text.find('('); open != std::string_view::npos) {
    if (text.back() != ')') throw std::invalid_argument("malformed regime '" + std::string(text) + "'");
    head = text.substr(0, open);
    arg = text.substr(open + 1, text.size() - open - 2);
  }
  Regime r;
  if (head == "independent" && arg.empty()) {
    r.kind = Regime::Kind::independent;
  } else if (head == "exchangeable") {
    r.kind = Regime::Kind::exchangeable;
    r.rho = arg.empty() ? 0.5 : csv::parse_double(arg);
    if (!(r.rho > -1.0 && r.rho < 1.0)) {
      throw std::invalid_argument("exchangeable correlation must lie in (-1, 1)");
    }
  } else if (head == "unstructured") {
    r.kind = Regime::Kind::unstructured;
    r.name = arg.empty() ? "default" : std::string(arg);
    if (r.name != "default") {
      throw std::invalid_argument("unknown unstructured matrix '" + r.name + "'");
    }
  } else {
    throw std::invalid_argument("unknown regime '" + std::string(text) +
                                "' (expected independent, exchangeable(rho) or unstructured)");
  }
  return r;
}

std::vector<Regime> default_schedule(std::size_t years) {
  const auto round_half_up = [](double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); };
  const std::size_t indep_end = round_half_up(0.3 * static_cast<double>(years));
  const std::size_t exch_end = round_half_up(0.6 * static_cast<double>(years));
  std::vector<Regime> out(years);
  for (std::size_t t = 0; t < years; ++t) {
    if (t < indep_end) {
      out[t] = Regime{Regime::Kind::independent, 0.0, ""};
    } else if (t < exch_end) {
      out[t] = Regime{Regime::Kind::exchangeable, 0.5, ""};
    } else {
      out[t] = Regime{Regime::Kind::unstructured, 0.0, "default"};
    }
  }
  return out;
}

const std::vector<double>& builtin_age_shares() {
  // Urban-county style profile: small infant group, broad working-age bulge,
  // thinning above 65.
  static const std::vector<double> kShares = [] {
    std::vector<double> raw = {1.2, 5.0, 6.3, 6.5, 6.9, 7.6, 8.2, 7.9, 7.3, 7.0,
                               6.8, 6.5, 5.9, 5.0, 3.9, 2.9, 2.1, 1.5, 1.5};
    const double total = std::accumulate(raw.begin(), raw.end(), 0.0);
    for (double& v : raw) v /= total;
    return raw;
  }();
  return kShares;
}

void SimConfig::validate() const {
  if (areas < 1 || years < 1 || subgroups < 1) {
    throw std::invalid_argument("areas, years and subgroups must be positive");
  }
  if (subgroups > 26) throw std::invalid_argument("at most 26 subgroups are supported");
  if (!(base_pop_unit > 0.0) || !std::isfinite(base_pop_unit)) {
    throw std::invalid_argument("base_pop_unit must be positive");
  }
  if (!(growth > -1.0) || !std::isfinite(growth)) throw std::invalid_argument("growth must exceed -1");
  if (!shares.empty()) {
    if (shares.size() != subgroups) {
      throw std::invalid_argument("need one share per subgroup");
    }
    double total = 0.0;
    for (double s : shares) {
      if (!(s > 0.0)) throw std::invalid_argument("subgroup shares must be positive");
      total += s;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("subgroup shares must sum to 1");
  }
  if (!(baseline_coef_sd >= 0.0) || !(hump_coef_sd >= 0.0) || !(age_jitter_sd >= 0.0)) {
    throw std::invalid_argument("standard deviations must be nonnegative");
  }
  if (!regime_schedule.empty() && regime_schedule.size() != years) {
    throw std::invalid_argument("regime schedule must list one regime per year");
  }
  for (const auto& r : resolved_schedule()) r.matrix(subgroups);
}

std::vector<double> SimConfig::resolved_shares() const {
  if (!shares.empty()) return shares;
  std::vector<double> out = {0.5, 0.2, 0.1, 0.1, 0.1};
  out.resize(subgroups, 0.1);
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  for (double& v : out) v /= total;
  return out;
}

std::vector<Regime> SimConfig::resolved_schedule() const {
  return regime_schedule.empty() ? default_schedule(years) : regime_schedule;
}

nlohmann::json to_json(const SimConfig& cfg) {
  nlohmann::json schedule = nlohmann::json::array();
  for (const auto& r : cfg.resolved_schedule()) schedule.push_back(r.label());
  return {
      {"areas", cfg.areas},
      {"years", cfg.years},
      {"subgroups", cfg.subgroups},
      {"base_pop_unit", cfg.base_pop_unit},
      {"growth", cfg.growth},
      {"shares", cfg.resolved_shares()},
      {"baseline_coef_mean", cfg.baseline_coef_mean},
      {"baseline_coef_sd", cfg.baseline_coef_sd},
      {"hump_coef_mean", cfg.hump_coef_mean},
      {"hump_coef_sd", cfg.hump_coef_sd},
      {"age_jitter_sd", cfg.age_jitter_sd},
      {"regime_schedule", schedule},
      {"seed", cfg.seed},
  };
}

std::vector<double> SimTruth::beta() const {
  std::vector<double> out(baseline_coefs);
  out.insert(out.end(), hump_coefs.begin(), hump_coefs.end());
  return out;
}

std::vector<std::string> subgroup_names(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t s = 0; s < n; ++s) out.emplace_back(1, static_cast<char>('A' + s));
  return out;
}

std::vector<std::string> area_names(std::size_t n) {
  const std::size_t width = std::to_string(n).size();
  std::vector<std::string> out;
  for (std::size_t c = 1; c <= n; ++c) out.push_back("area" + zero_padded(c, width));
  return out;
}

std::vector<std::string> year_labels(std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t t = 1; t <= n; ++t) out.push_back(std::to_string(t));
  return out;
}

std::vector<double> make_population(const SimConfig& cfg) {
  cfg.validate();
  const auto& age_shares = builtin_age_shares();
  const std::size_t A = age_shares.size(), S = cfg.subgroups, C = cfg.areas, T = cfg.years;
  const auto shares = cfg.resolved_shares();
  const Dims dims{A, S, C, T};
  auto rng = stream_rng(cfg.seed, kPopulation);
  std::normal_distribution<double> jitter(0.0, cfg.age_jitter_sd > 0 ? cfg.age_jitter_sd : 1.0);

  std::vector<double> pop(dims.cells(), 0.0);
  std::vector<double> w(A);
  for (std::size_t c = 0; c < C; ++c) {
    const double first_year = cfg.base_pop_unit * static_cast<double>(c + 1);
    for (std::size_t t = 0; t < T; ++t) {
      const double total = first_year * std::pow(1.0 + cfg.growth, static_cast<double>(t));
      double wsum = 0.0;
      for (std::size_t a = 0; a < A; ++a) {
        const double e = cfg.age_jitter_sd > 0 ? std::exp(jitter(rng)) : 1.0;
        w[a] = age_shares[a] * e;
        wsum += w[a];
      }
      for (std::size_t a = 0; a < A; ++a) {
        const double age_total = total * (w[a] / wsum);
        double assigned = 0.0;
        for (std::size_t s = 0; s + 1 < S; ++s) {
          const double v = age_total * shares[s];
          pop[dims.index(a, s, c, t)] = v;
          assigned += v;
        }
        pop[dims.index(a, S - 1, c, t)] = S == 1 ? age_total : age_total - assigned;
      }
    }
  }
  return pop;
}

SimTruth make_truth(const SimConfig& cfg, const StandardCurves& curves) {
  cfg.validate();
  const std::size_t A = static_cast<std::size_t>(curves.baseline.size());
  if (static_cast<std::size_t>(curves.hump.size()) != A) {
    throw std::invalid_argument("standard curves have different lengths");
  }
  const std::size_t S = cfg.subgroups, C = cfg.areas, T = cfg.years;
  SimTruth truth;
  truth.dims = Dims{A, S, C, T};
  truth.regimes = cfg.resolved_schedule();
  truth.baseline_coefs.resize(S * C * T);
  truth.hump_coefs.resize(S * C * T);

  auto rng = stream_rng(cfg.seed, kTruth);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(static_cast<Eigen::Index>(S));
  for (std::size_t t = 0; t < T; ++t) {
    const Eigen::MatrixXd r = truth.regimes[t].matrix(S);
    Eigen::LLT<Eigen::MatrixXd> llt(r);
    if (llt.info() != Eigen::Success) {
      throw std::invalid_argument("regime matrix for year " + std::to_string(t + 1) +
                                  " is not positive definite");
    }
    const Eigen::MatrixXd l = llt.matrixL();
    truth.baseline_corr.push_back(r);
    truth.hump_corr.push_back(r);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t s = 0; s < S; ++s) z[static_cast<Eigen::Index>(s)] = normal(rng);
      const Eigen::VectorXd b = l * z;
      for (std::size_t s = 0; s < S; ++s) z[static_cast<Eigen::Index>(s)] = normal(rng);
      const Eigen::VectorXd h = l * z;
      for (std::size_t s = 0; s < S; ++s) {
        const auto k = static_cast<Eigen::Index>(s);
        truth.baseline_coefs[(s * C + c) * T + t] = cfg.baseline_coef_mean + cfg.baseline_coef_sd * b[k];
        truth.hump_coefs[(s * C + c) * T + t] = cfg.hump_coef_mean + cfg.hump_coef_sd * h[k];
      }
    }
  }

  // Same operation order as the model's log_rates with gamma = 0.
  truth.log_rates.resize(truth.dims.cells());
  for (std::size_t a = 0; a < A; ++a) {
    const auto ka = static_cast<Eigen::Index>(a);
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t t = 0; t < T; ++t) {
          const std::size_t k = (s * C + c) * T + t;
          double acc = 0.0;
          acc += truth.baseline_coefs[k] * curves.baseline[ka];
          acc += truth.hump_coefs[k] * curves.hump[ka];
          truth.log_rates[truth.dims.index(a, s, c, t)] = acc + 0.0;
        }
      }
    }
  }
  return truth;
}

MortalityDataset draw_deaths(const SimTruth& truth, const std::vector<double>& population,
                             std::uint64_t seed) {
  const Dims& d = truth.dims;
  if (population.size() != d.cells() || truth.log_rates.size() != d.cells()) {
    throw std::invalid_argument("population and truth dimensions differ");
  }
  if (d.ages != AgeGrid::standard().size()) {
    throw std::invalid_argument("simulated data use the 19-group standard age grid");
  }
  auto rng = stream_rng(seed, kDeaths);
  std::vector<std::int64_t> deaths(d.cells(), 0);
  for (std::size_t k = 0; k < d.cells(); ++k) {
    const double lr = truth.log_rates[k];
    if (!(lr <= 20.0)) {
      throw std::invalid_argument("log rate " + csv::format_double(lr) +
                                  " exceeds 20; the simulated curves are implausible");
    }
    const double mean = population[k] * std::exp(lr);
    if (mean > 0.0) {
      std::poisson_distribution<std::int64_t> poisson(mean);
      deaths[k] = poisson(rng);
    }
  }
  return MortalityDataset(AgeGrid::standard(), subgroup_names(d.subpops), area_names(d.areas),
                          year_labels(d.years), std::move(deaths), population,
                          std::vector<std::uint8_t>(d.cells(), 1));
}

Simulation simulate(const SimConfig& cfg) {
  cfg.validate();
  auto curves = StandardCurves::make(AgeGrid::standard());
  auto population = make_population(cfg);
  auto truth = make_truth(cfg, curves);
  auto dataset = draw_deaths(truth, population, cfg.seed);
  return Simulation{cfg, std::move(curves), std::move(population), std::move(truth),
                    std::move(dataset)};
}

}  // namespace submort
