#include "submort/cli.hpp"

#include <algorithm>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "json.hpp"
#include "submort/checkpoint.hpp"
#include "submort/csv.hpp"
#include "submort/diagnostics.hpp"
#include "submort/evalharness.hpp"
#include "submort/hiermodel.hpp"
#include "submort/mortdata.hpp"
#include "submort/nuts.hpp"
#include "submort/pcbasis.hpp"
#include "submort/posterior.hpp"
#include "submort/simgen.hpp"

namespace submort::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kRunSchemaVersion = 1;

// Thrown for input that is well formed but inconsistent (exit code 1).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GlobalOptions {
  fs::path out = ".";
  std::uint64_t seed = 1;
  std::size_t threads = 0;
  bool quiet = false;
};

struct ModelOptions {
  std::string basis;
  std::size_t p = 0;  // 0: every row of the basis file
  std::string variant = "joint";
  bool share_correlations_over_time = false;
  Hyperparameters hyper;
  std::string zero_population = "skip";
};

struct DecomposeOptions {
  fs::path curves;
  std::size_t p_max = 10;
  double alpha = 0.05;
  std::size_t min_p = 1;
  double share_floor = 0.005;
  bool unscaled = false;
};

struct SimulateOptions {
  SimConfig sim;
  std::vector<double> shares;
  std::vector<std::string> regimes;
};

struct FitOptions {
  fs::path data;
  ModelOptions model;
  SamplerConfig sampler;
  double holdout = 0.0;
  bool emit_draws = false;
  std::vector<double> probs = kPredictiveProbs;
};

struct SummarizeOptions {
  fs::path run;
  std::vector<std::string> quantities;
  std::vector<double> probs = {0.025, 0.5, 0.975};
};

struct ValidateOptions {
  fs::path against_truth;
  fs::path run;
  fs::path data;
  fs::path test_cells;
  double holdout = 0.0;
  bool compare = false;
  std::size_t replicates = 1;
  std::vector<double> levels = kDefaultLevels;
  ModelOptions model;
  SamplerConfig sampler;
};

std::string iso_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

void write_json(const fs::path& path, const json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  auto in = open_in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string quantile_header(double p) { return "q" + csv::format_double(p); }

json to_json(const SamplerConfig& c) {
  return {{"chains", c.chains},
          {"warmup", c.warmup},
          {"samples", c.samples},
          {"seed", c.seed},
          {"target_accept", c.target_accept},
          {"max_treedepth", c.max_treedepth},
          {"init_jitter", c.init_jitter}};
}

json to_json(const ModelOptions& m) {
  return {{"basis", m.basis},
          {"p", m.p},
          {"variant", m.variant},
          {"share_correlations_over_time", m.share_correlations_over_time},
          {"zero_population", m.zero_population},
          {"sigma_beta_scale", m.hyper.sigma_beta_scale},
          {"sigma_mu_meanlog", m.hyper.sigma_mu_meanlog},
          {"sigma_mu_sdlog", m.hyper.sigma_mu_sdlog},
          {"sigma_gamma_scale", m.hyper.sigma_gamma_scale},
          {"lkj_eta", m.hyper.lkj_eta},
          {"rw2_init_sd", m.hyper.rw2_init_sd}};
}

json to_json(const GlobalOptions& g) {
  return {{"out", g.out.string()}, {"seed", g.seed}, {"threads", g.threads}};
}

// Writes run.json. `created_at` is the only field that changes between
// otherwise identical runs.
void write_run_json(const GlobalOptions& g, const std::string& command, const json& config,
                    const std::vector<std::string>& warnings,
                    json extra = json::object()) {
  json j = {{"schema_version", kRunSchemaVersion},
            {"command", command},
            {"created_at", iso_timestamp()},
            {"global", to_json(g)},
            {"config", config},
            {"warning_count", warnings.size()},
            {"warnings", warnings}};
  for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
  write_json(g.out / "run.json", j);
}

void add_model_options(CLI::App* app, ModelOptions& m) {
  app->add_option("--basis", m.basis,
                  "components.csv from decompose, a curve collection, or 'from-truth' for "
                  "standard_curves.csv next to the dataset")
      ->required();
  app->add_option("--components,-p", m.p, "Number of basis rows to use (default: all)");
  app->add_option("--variant", m.variant, "joint or independent")
      ->check(CLI::IsMember({"joint", "independent"}));
  app->add_flag("--share-correlations-over-time", m.share_correlations_over_time,
                "Use one correlation matrix per component or age for all years");
  app->add_option("--sigma-beta-scale", m.hyper.sigma_beta_scale);
  app->add_option("--sigma-mu-meanlog", m.hyper.sigma_mu_meanlog);
  app->add_option("--sigma-mu-sdlog", m.hyper.sigma_mu_sdlog);
  app->add_option("--sigma-gamma-scale", m.hyper.sigma_gamma_scale);
  app->add_option("--lkj-eta", m.hyper.lkj_eta);
  app->add_option("--rw2-init-sd", m.hyper.rw2_init_sd);
  app->add_option("--zero-population", m.zero_population,
                  "In-sample cells with zero population: skip or error")
      ->check(CLI::IsMember({"skip", "error"}));
}

void add_sampler_options(CLI::App* app, SamplerConfig& s) {
  app->add_option("--chains", s.chains, "Number of chains");
  app->add_option("--warmup", s.warmup, "Warm-up iterations per chain");
  app->add_option("--samples", s.samples, "Retained draws per chain");
  app->add_option("--target-accept", s.target_accept);
  app->add_option("--max-treedepth", s.max_treedepth);
  app->add_option("--init-jitter", s.init_jitter);
}

// Reads a component table with header `age,PC1,...,PCk` (one row per age
// group) into a curve collection with one row per component.
CurveCollection read_component_table(const fs::path& path) {
  auto in = open_in(path);
  std::string line;
  if (!csv::read_line(in, line)) throw ParseError("empty component table", 1);
  const auto header = csv::split_record(line);
  if (header.size() < 2 || header[0] != "age") {
    throw ParseError("expected header 'age,PC1,...'", 1);
  }
  const std::size_t P = header.size() - 1;
  std::vector<std::string> ages;
  std::vector<std::vector<double>> values;
  for (std::size_t n = 2; csv::read_line(in, line); ++n) {
    if (line.empty()) continue;
    const auto f = csv::split_record(line);
    if (f.size() != P + 1) throw ParseError("expected " + std::to_string(P + 1) + " fields", n);
    ages.push_back(f[0]);
    std::vector<double> row;
    for (std::size_t i = 1; i <= P; ++i) row.push_back(csv::parse_double(f[i]));
    values.push_back(std::move(row));
  }
  CurveCollection c{AgeGrid::from_labels(ages),
                    Eigen::MatrixXd(static_cast<Eigen::Index>(P),
                                    static_cast<Eigen::Index>(ages.size())),
                    {}};
  for (std::size_t a = 0; a < ages.size(); ++a) {
    const auto col = static_cast<Eigen::Index>(*c.age_grid.find(ages[a]));
    for (std::size_t i = 0; i < P; ++i) c.rows(static_cast<Eigen::Index>(i), col) = values[a][i];
  }
  for (std::size_t i = 1; i <= P; ++i) c.row_meta.push_back(CurveMeta{header[i], "", ""});
  return c;
}

void write_component_table(const fs::path& path, const PCBasis& basis) {
  auto out = open_out(path);
  std::vector<std::string> header = {"age"};
  for (std::size_t i = 0; i < basis.size(); ++i) header.push_back("PC" + std::to_string(i + 1));
  out << csv::join(header) << '\n';
  const auto& labels = basis.age_grid().labels();
  for (std::size_t a = 0; a < labels.size(); ++a) {
    std::vector<std::string> f = {labels[a]};
    for (std::size_t i = 0; i < basis.size(); ++i) {
      f.push_back(csv::format_double(
          basis.components()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a))));
    }
    out << csv::join(f) << '\n';
  }
}

bool is_component_table(const fs::path& path) {
  auto in = open_in(path);
  std::string line;
  return csv::read_line(in, line) && line.rfind("age,", 0) == 0;
}

// Basis rows from a component table (decompose output), a curve collection,
// or the simulation's standard curves.
Eigen::MatrixXd load_basis(const ModelOptions& m, const fs::path& data_path,
                           const MortalityDataset& data) {
  CurveCollection curves = [&] {
    if (m.basis == "from-truth") {
      const fs::path p = data_path.parent_path() / "standard_curves.csv";
      if (!fs::exists(p)) throw DataError("--basis from-truth needs " + p.string());
      return load_curves(p);
    }
    if (is_component_table(m.basis)) return read_component_table(m.basis);
    return load_curves(m.basis);
  }();
  if (!(curves.age_grid == data.age_grid())) {
    throw DataError("basis age groups do not match the dataset age groups");
  }
  const auto rows = static_cast<std::size_t>(curves.rows.rows());
  const std::size_t p = m.p == 0 ? rows : m.p;
  if (p > rows) {
    throw std::invalid_argument("--components " + std::to_string(p) + " exceeds the " +
                                std::to_string(rows) + " rows of the basis file");
  }
  return curves.rows.topRows(static_cast<Eigen::Index>(p));
}

ModelSpec build_spec(const ModelOptions& m, const MortalityDataset& data,
                     const Eigen::MatrixXd& basis) {
  ModelSpec spec;
  spec.dims = data.dims();
  spec.basis = basis;
  spec.variant = parse_variant(m.variant);
  spec.share_correlations_over_time = m.share_correlations_over_time;
  spec.hyper = m.hyper;
  spec.zero_population =
      m.zero_population == "error" ? ZeroPopulationPolicy::error : ZeroPopulationPolicy::skip;
  spec.validate();
  return spec;
}

std::function<void(std::size_t, std::size_t)> progress_printer(const GlobalOptions& g,
                                                               const SamplerConfig& cfg,
                                                               std::ostream& err,
                                                               std::mutex& m) {
  if (g.quiet) return {};
  const std::size_t total = cfg.warmup + cfg.samples;
  const std::size_t step = std::max<std::size_t>(1, total / 10);
  return [&err, &m, total, step, warmup = cfg.warmup](std::size_t chain, std::size_t it) {
    if ((it + 1) % step != 0 && it + 1 != total) return;
    std::lock_guard lock(m);
    err << "chain " << chain << ": iteration " << (it + 1) << " / " << total
        << (it < warmup ? " (warm-up)" : " (sampling)") << '\n';
  };
}

// ---------------------------------------------------------------- summaries

void write_summary(const fs::path& path, const std::vector<std::string>& label_cols,
                   const std::vector<std::vector<std::string>>& labels,
                   const std::vector<QuantileRow>& rows, const std::vector<double>& probs) {
  auto out = open_out(path);
  std::vector<std::string> header = label_cols;
  header.insert(header.end(), {"mean", "median"});
  for (double p : probs) header.push_back(quantile_header(p));
  out << csv::join(header) << '\n';
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::vector<std::string> f = labels[r];
    f.push_back(csv::format_double(rows[r].mean));
    f.push_back(csv::format_double(rows[r].median));
    for (double q : rows[r].quantiles) f.push_back(csv::format_double(q));
    out << csv::join(f) << '\n';
  }
}

void write_fit_summaries(const fs::path& dir, const PosteriorSamples& samples,
                         const ModelSpec& spec, const MortalityDataset& data,
                         const std::vector<double>& probs) {
  const auto& ages = data.age_grid().labels();
  const auto& subs = data.subpop_names();
  const auto& areas = data.area_names();
  const auto& years = data.year_labels();

  {
    const auto qs = log_rate_quantities(spec);
    std::vector<std::vector<std::string>> labels;
    for (const auto& q : qs) {
      labels.push_back({ages[q.index[0]], subs[q.index[1]], areas[q.index[2]], years[q.index[3]]});
    }
    write_summary(dir / "summary_log_rates.csv", {"age", "subpop", "area", "year"}, labels,
                  summarize(samples, spec, qs, probs), probs);
  }
  {
    const auto qs = mu_beta_quantities(spec);
    std::vector<std::vector<std::string>> labels;
    for (const auto& q : qs) {
      labels.push_back({std::to_string(q.index[0] + 1), subs[q.index[1]], years[q.index[2]]});
    }
    write_summary(dir / "summary_mu_beta.csv", {"component", "subpop", "year"}, labels,
                  summarize(samples, spec, qs, probs), probs);
  }
  {
    const auto qs = sigma_quantities(spec);
    std::vector<std::vector<std::string>> labels;
    for (const auto& q : qs) labels.push_back({q.name});
    write_summary(dir / "summary_sigma.csv", {"parameter"}, labels,
                  summarize(samples, spec, qs, probs), probs);
  }
  if (spec.has_correlations()) {
    for (auto kind : {Quantity::Kind::corr_beta, Quantity::Kind::corr_gamma}) {
      const bool is_beta = kind == Quantity::Kind::corr_beta;
      const auto qs = corr_quantities(spec, kind);
      std::vector<std::vector<std::string>> labels;
      for (const auto& q : qs) {
        const std::string period =
            spec.share_correlations_over_time ? std::string("all") : years[q.index[1]];
        labels.push_back({is_beta ? std::to_string(q.index[0] + 1) : ages[q.index[0]], period,
                          subs[q.index[2]], subs[q.index[3]]});
      }
      write_summary(dir / (is_beta ? "summary_corr_beta.csv" : "summary_corr_gamma.csv"),
                    {is_beta ? "component" : "age", "year", "row", "col"}, labels,
                    summarize(samples, spec, qs, probs), probs);
    }
  }
}

void write_diagnostics(const fs::path& dir, const Diagnostics& d, const PosteriorSamples& samples,
                       const json& config) {
  {
    auto out = open_out(dir / "diagnostics.csv");
    out << "parameter,rhat,ess\n";
    for (std::size_t k = 0; k < d.names.size(); ++k) {
      out << csv::escape(d.names[k]) << ',' << csv::format_double(d.rhat[k]) << ','
          << csv::format_double(d.ess[k]) << '\n';
    }
  }
  json chains = json::array();
  for (const auto& c : samples.chains) {
    double accept = 0.0, depth = 0.0;
    std::size_t div = 0;
    for (const auto& s : c.stats) {
      accept += s.accept_stat;
      depth += s.tree_depth;
      div += s.divergent ? 1 : 0;
    }
    const double n = static_cast<double>(c.stats.size());
    chains.push_back({{"step_size", c.step_size},
                      {"mean_accept_stat", accept / n},
                      {"mean_tree_depth", depth / n},
                      {"divergences", div},
                      {"warmup_divergences", c.warmup_divergences}});
  }
  write_json(dir / "diagnostics.json",
             {{"divergences", d.divergences},
              {"divergence_rate",
               static_cast<double>(d.divergences) / static_cast<double>(samples.total_draws())},
              {"max_rhat", d.max_rhat()},
              {"min_ess", d.min_ess()},
              {"parameters", d.names.size()},
              {"chains", chains},
              {"config", config}});
}

std::vector<std::string> fit_warnings(const Diagnostics& d, const PosteriorSamples& samples) {
  std::vector<std::string> w;
  std::size_t high = 0;
  for (double r : d.rhat) high += (r > 1.01 || !std::isfinite(r)) ? 1 : 0;
  if (high > 0) {
    w.push_back(std::to_string(high) + " parameters have R-hat above 1.01 (max " +
                csv::format_double(d.max_rhat()) + ")");
  }
  const double rate = static_cast<double>(d.divergences) / static_cast<double>(samples.total_draws());
  if (rate > 0.005) {
    w.push_back(std::to_string(d.divergences) + " divergent transitions (" +
                csv::format_double(100.0 * rate) + "% of draws)");
  }
  return w;
}

PosteriorSamples load_run_samples(const fs::path& run, const ModelSpec& spec) {
  PosteriorSamples s;
  s.dim = ParameterLayout(spec).size();
  for (std::size_t k = 0;; ++k) {
    const fs::path p = run / ("chain_" + std::to_string(k) + ".draws");
    if (!fs::exists(p)) break;
    auto chain = load_chain(p);
    if (static_cast<std::size_t>(chain.draws.rows()) != s.dim) {
      throw DataError(p.string() + " does not match the model dimension");
    }
    if (!s.chains.empty() && chain.draws.cols() != s.chains.front().draws.cols()) {
      throw DataError("chains have different numbers of draws");
    }
    s.chains.push_back(std::move(chain));
  }
  if (s.chains.empty()) throw DataError("no chain_<k>.draws files in " + run.string());
  s.config.chains = s.chains.size();
  s.config.samples = s.draws_per_chain();
  return s;
}

// -------------------------------------------------------------- truth files

CellIndex lookup_cell(const MortalityDataset& d, const std::vector<std::string>& f,
                      std::size_t line) {
  const auto find_in = [&](const std::vector<std::string>& names, const std::string& v,
                           const char* what) {
    const auto it = std::find(names.begin(), names.end(), v);
    if (it == names.end()) {
      throw ParseError(std::string("unknown ") + what + " '" + v + "'", line);
    }
    return static_cast<std::size_t>(it - names.begin());
  };
  const auto age = d.age_grid().find(f[0]);
  if (!age) throw ParseError("unknown age '" + f[0] + "'", line);
  return CellIndex{*age, find_in(d.subpop_names(), f[1], "subpop"),
                   find_in(d.area_names(), f[2], "area"), find_in(d.year_labels(), f[3], "year")};
}

void write_truth_files(const fs::path& dir, const Simulation& sim) {
  const auto& d = sim.dataset;
  const Dims& dims = d.dims();
  const auto& ages = d.age_grid().labels();
  const auto& subs = d.subpop_names();
  const auto& areas = d.area_names();
  const auto& years = d.year_labels();
  {
    auto out = open_out(dir / "truth_log_rates.csv");
    out << "age,subpop,area,year,log_rate\n";
    for (std::size_t c = 0; c < dims.areas; ++c)
      for (std::size_t s = 0; s < dims.subpops; ++s)
        for (std::size_t t = 0; t < dims.years; ++t)
          for (std::size_t a = 0; a < dims.ages; ++a)
            out << csv::join({ages[a], subs[s], areas[c], years[t],
                              csv::format_double(sim.truth.log_rates[dims.index(a, s, c, t)])})
                << '\n';
  }
  {
    auto out = open_out(dir / "truth_coefficients.csv");
    out << "curve,subpop,area,year,value\n";
    for (int curve = 0; curve < 2; ++curve) {
      const auto& v = curve == 0 ? sim.truth.baseline_coefs : sim.truth.hump_coefs;
      for (std::size_t c = 0; c < dims.areas; ++c)
        for (std::size_t s = 0; s < dims.subpops; ++s)
          for (std::size_t t = 0; t < dims.years; ++t)
            out << csv::join({curve == 0 ? "baseline" : "hump", subs[s], areas[c], years[t],
                              csv::format_double(v[(s * dims.areas + c) * dims.years + t])})
                << '\n';
    }
  }
  {
    auto out = open_out(dir / "truth_correlations.csv");
    out << "curve,year,regime,row,col,value\n";
    for (int curve = 0; curve < 2; ++curve) {
      const auto& mats = curve == 0 ? sim.truth.baseline_corr : sim.truth.hump_corr;
      for (std::size_t t = 0; t < dims.years; ++t)
        for (std::size_t r = 0; r < dims.subpops; ++r)
          for (std::size_t k = 0; k < dims.subpops; ++k)
            out << csv::join({curve == 0 ? "baseline" : "hump", years[t],
                              sim.truth.regimes[t].label(), subs[r], subs[k],
                              csv::format_double(mats[t](static_cast<Eigen::Index>(r),
                                                         static_cast<Eigen::Index>(k)))})
                << '\n';
    }
  }
  {
    auto out = open_out(dir / "standard_curves.csv");
    write_curves(out, sim.curves.as_curves());
  }
  {
    CurveCollection curves{d.age_grid(), Eigen::MatrixXd(dims.subpops * dims.areas * dims.years,
                                                        dims.ages),
                           {}};
    Eigen::Index row = 0;
    for (std::size_t c = 0; c < dims.areas; ++c)
      for (std::size_t s = 0; s < dims.subpops; ++s)
        for (std::size_t t = 0; t < dims.years; ++t, ++row) {
          for (std::size_t a = 0; a < dims.ages; ++a) {
            curves.rows(row, static_cast<Eigen::Index>(a)) =
                sim.truth.log_rates[dims.index(a, s, c, t)];
          }
          curves.row_meta.push_back(CurveMeta{subs[s], areas[c], years[t]});
        }
    auto out = open_out(dir / "truth_curves.csv");
    write_curves(out, curves);
  }
}

SimTruth read_truth(const fs::path& dir, const MortalityDataset& d) {
  SimTruth truth;
  truth.dims = d.dims();
  const Dims& dims = truth.dims;
  truth.log_rates.assign(dims.cells(), std::numeric_limits<double>::quiet_NaN());
  {
    auto in = open_in(dir / "truth_log_rates.csv");
    std::string line;
    csv::read_line(in, line);
    if (line != "age,subpop,area,year,log_rate") {
      throw ParseError("expected header 'age,subpop,area,year,log_rate'", 1);
    }
    for (std::size_t n = 2; csv::read_line(in, line); ++n) {
      if (line.empty()) continue;
      const auto f = csv::split_record(line);
      if (f.size() != 5) throw ParseError("expected 5 fields", n);
      truth.log_rates[dims.index(lookup_cell(d, f, n))] = csv::parse_double(f[4]);
    }
  }
  for (double v : truth.log_rates) {
    if (std::isnan(v)) throw DataError("truth_log_rates.csv does not cover every cell");
  }
  truth.baseline_corr.assign(dims.years, Eigen::MatrixXd::Identity(dims.subpops, dims.subpops));
  truth.hump_corr = truth.baseline_corr;
  {
    auto in = open_in(dir / "truth_correlations.csv");
    std::string line;
    csv::read_line(in, line);
    if (line != "curve,year,regime,row,col,value") {
      throw ParseError("expected header 'curve,year,regime,row,col,value'", 1);
    }
    const auto index_of = [](const std::vector<std::string>& names, const std::string& v,
                             std::size_t n) {
      const auto it = std::find(names.begin(), names.end(), v);
      if (it == names.end()) throw ParseError("unknown label '" + v + "'", n);
      return static_cast<Eigen::Index>(it - names.begin());
    };
    for (std::size_t n = 2; csv::read_line(in, line); ++n) {
      if (line.empty()) continue;
      const auto f = csv::split_record(line);
      if (f.size() != 6) throw ParseError("expected 6 fields", n);
      auto& mats = f[0] == "baseline" ? truth.baseline_corr : truth.hump_corr;
      if (f[0] != "baseline" && f[0] != "hump") throw ParseError("unknown curve '" + f[0] + "'", n);
      const auto t = static_cast<std::size_t>(index_of(d.year_labels(), f[1], n));
      mats[t](index_of(d.subpop_names(), f[3], n), index_of(d.subpop_names(), f[4], n)) =
          csv::parse_double(f[5]);
    }
  }
  return truth;
}

void write_cells_file(const fs::path& path, const MortalityDataset& d,
                      const std::vector<CellIndex>& cells) {
  auto out = open_out(path);
  write_cells(out, d, cells);
}

// ------------------------------------------------------------- subcommands

int cmd_decompose(const GlobalOptions& g, const DecomposeOptions& o, std::ostream& out) {
  const CurveCollection curves = load_curves(o.curves);
  const std::size_t A = curves.age_grid.size();
  if (o.p_max < 1 || o.p_max > A) {
    throw std::invalid_argument("--p-max must lie in [1, " + std::to_string(A) +
                                "] (the number of age groups)");
  }
  if (static_cast<std::size_t>(curves.rows.rows()) < A) {
    throw DataError("need at least as many curves as age groups (" + std::to_string(A) + ")");
  }
  if (o.min_p < 1 || o.min_p > o.p_max) {
    throw std::invalid_argument("--min-p must lie in [1, p-max]");
  }
  fs::create_directories(g.out);
  const PCBasis basis = svd_basis(curves, o.p_max, !o.unscaled);

  write_component_table(g.out / "components.csv", basis);
  const Eigen::VectorXd shares = explained_variance(basis);
  {
    auto f = open_out(g.out / "singular_values.csv");
    f << "component,singular_value,explained_share,cumulative_share\n";
    double cum = 0.0;
    for (Eigen::Index i = 0; i < basis.singular_values().size(); ++i) {
      cum += shares[i];
      f << (i + 1) << ',' << csv::format_double(basis.singular_values()[i]) << ','
        << csv::format_double(shares[i]) << ',' << csv::format_double(cum) << '\n';
    }
  }
  std::vector<std::string> groups;
  for (const auto& m : curves.row_meta) groups.push_back(m.subpop);
  const SelectionReport report =
      selection_report(basis, groups, o.alpha, o.min_p, o.p_max, o.share_floor);
  {
    auto f = open_out(g.out / "selection_report.csv");
    f << "component,explained_share,group_a,group_b,t,df,p_value,available\n";
    for (const auto& c : report.components) {
      for (const auto& pr : c.pairs) {
        f << csv::join({std::to_string(c.component + 1), csv::format_double(c.explained_share),
                        c.groups[pr.group_a], c.groups[pr.group_b], csv::format_double(pr.test.t),
                        csv::format_double(pr.test.df), csv::format_double(pr.test.p_value),
                        pr.test.available ? "true" : "false"})
          << '\n';
      }
    }
  }
  write_run_json(g, "decompose",
                 {{"curves", o.curves.string()},
                  {"p_max", o.p_max},
                  {"alpha", o.alpha},
                  {"min_p", o.min_p},
                  {"share_floor", o.share_floor},
                  {"scaled_scores", !o.unscaled}},
                 {}, {{"recommended_p", report.recommended_p}});
  out << "recommended P: " << report.recommended_p << '\n';
  return kOk;
}

int cmd_simulate(const GlobalOptions& g, SimulateOptions o, std::ostream& out) {
  SimConfig cfg = o.sim;
  cfg.seed = g.seed;
  cfg.shares = o.shares;
  if (!o.regimes.empty()) {
    if (o.regimes.size() == 1) {
      cfg.regime_schedule.assign(cfg.years, parse_regime(o.regimes.front()));
    } else if (o.regimes.size() == cfg.years) {
      for (const auto& r : o.regimes) cfg.regime_schedule.push_back(parse_regime(r));
    } else {
      throw std::invalid_argument("--regime takes one value or one per year");
    }
  }
  cfg.validate();
  const Simulation sim = simulate(cfg);
  fs::create_directories(g.out);
  save_dataset(g.out / "dataset.csv", sim.dataset);
  write_truth_files(g.out, sim);
  write_json(g.out / "sim_config.json", to_json(cfg));
  write_run_json(g, "simulate", to_json(cfg), {});
  const Dims& d = sim.dataset.dims();
  out << "simulated " << d.ages << " ages x " << d.subpops << " subgroups x " << d.areas
      << " areas x " << d.years << " years into " << g.out.string() << '\n';
  return kOk;
}

int cmd_fit(const GlobalOptions& g, FitOptions o, std::ostream& out, std::ostream& err) {
  o.sampler.seed = g.seed;
  o.sampler.threads = g.threads;
  o.sampler.validate();
  if (o.holdout < 0.0 || o.holdout >= 1.0) {
    throw std::invalid_argument("--holdout must lie in [0, 1)");
  }
  const MortalityDataset full = load_dataset(o.data);
  const Eigen::MatrixXd basis = load_basis(o.model, o.data, full);
  const ModelSpec spec = build_spec(o.model, full, basis);
  fs::create_directories(g.out);

  MortalityDataset train = full;
  if (o.holdout > 0.0) {
    auto split = holdout_split(full, o.holdout, g.seed);
    write_cells_file(g.out / "test_cells.csv", full, split.test_cells);
    train = std::move(split.train);
  }

  const PosteriorDensity density(spec, train);
  std::mutex progress_mutex;
  const PosteriorSamples samples =
      sample(density, o.sampler, progress_printer(g, o.sampler, err, progress_mutex));

  for (std::size_t k = 0; k < samples.chains.size(); ++k) {
    save_chain(g.out / ("chain_" + std::to_string(k) + ".draws"), samples.chains[k], k);
  }
  write_json(g.out / "model_spec.json", to_json(spec));

  std::vector<std::string> names;
  names.reserve(density.dimension());
  for (std::size_t k = 0; k < density.dimension(); ++k) names.push_back(density.layout().name(k));
  if (o.emit_draws) {
    auto f = open_out(g.out / "draws.csv");
    write_draws_csv(f, samples, names);
  }
  const Diagnostics diag = diagnose(samples, names);

  json config = {{"data", o.data.string()},
                 {"model", to_json(o.model)},
                 {"sampler", to_json(o.sampler)},
                 {"holdout", o.holdout},
                 {"emit_draws", o.emit_draws},
                 {"probs", o.probs}};
  write_diagnostics(g.out, diag, samples, config);
  write_fit_summaries(g.out, samples, spec, full, o.probs);

  const auto warnings = fit_warnings(diag, samples);
  for (const auto& w : warnings) err << "warning: " << w << '\n';
  write_run_json(g, "fit", config, warnings);
  out << "fit complete: " << samples.total_draws() << " draws, " << diag.divergences
      << " divergences, max R-hat " << csv::format_double(diag.max_rhat()) << '\n';
  return kOk;
}

int cmd_summarize(const GlobalOptions& g, const SummarizeOptions& o, std::ostream& out) {
  const ModelSpec spec = model_spec_from_json(read_json(o.run / "model_spec.json"));
  const PosteriorSamples samples = load_run_samples(o.run, spec);
  std::vector<Quantity> qs;
  for (const auto& name : o.quantities) qs.push_back(parse_quantity(spec, name));
  const auto rows = summarize(samples, spec, qs, o.probs);
  std::vector<std::vector<std::string>> labels;
  for (const auto& r : rows) labels.push_back({r.name});
  fs::create_directories(g.out);
  write_summary(g.out / "summary.csv", {"quantity"}, labels, rows, o.probs);
  write_run_json(g, "summarize",
                 {{"run", o.run.string()}, {"quantities", o.quantities}, {"probs", o.probs}}, {});
  std::vector<std::string> header = {"quantity", "mean", "median"};
  for (double p : o.probs) header.push_back(quantile_header(p));
  out << csv::join(header) << '\n';
  for (const auto& r : rows) {
    std::vector<std::string> f = {r.name, csv::format_double(r.mean), csv::format_double(r.median)};
    for (double q : r.quantiles) f.push_back(csv::format_double(q));
    out << csv::join(f) << '\n';
  }
  return kOk;
}

void write_reports(const fs::path& dir, const std::vector<EvalReport>& reports,
                   const json& extra) {
  json j = extra;
  j["reports"] = json::array();
  for (const auto& r : reports) j["reports"].push_back(r.to_json());
  write_json(dir / "eval_report.json", j);
  auto f = open_out(dir / "eval_report.csv");
  write_reports_csv(f, reports);
}

int cmd_validate(const GlobalOptions& g, ValidateOptions o, std::ostream& out, std::ostream& err) {
  o.sampler.seed = g.seed;
  o.sampler.threads = g.threads;
  fs::create_directories(g.out);
  std::vector<EvalReport> reports;
  json config;
  json extra = json::object();

  if (!o.against_truth.empty()) {
    // Simulation-study coverage of a fitted run.
    if (o.run.empty()) throw std::invalid_argument("--against-truth needs --run");
    const MortalityDataset d = load_dataset(o.against_truth / "dataset.csv");
    const SimTruth truth = read_truth(o.against_truth, d);
    const ModelSpec spec = model_spec_from_json(read_json(o.run / "model_spec.json"));
    if (!(spec.dims == d.dims())) {
      throw DataError("run dimensions do not match the simulation truth");
    }
    const PosteriorSamples samples = load_run_samples(o.run, spec);
    EvalReport r;
    r.variant = to_string(spec.variant);
    r.levels = o.levels;
    r.coverage = truth_coverage(samples, spec, truth, o.levels);
    reports.push_back(std::move(r));
    config = {{"against_truth", o.against_truth.string()},
              {"run", o.run.string()},
              {"levels", o.levels}};
  } else if (!o.run.empty()) {
    // Predictive check of a run fitted with a holdout.
    if (o.data.empty()) throw std::invalid_argument("--run needs --data with the full dataset");
    const MortalityDataset d = load_dataset(o.data);
    const ModelSpec spec = model_spec_from_json(read_json(o.run / "model_spec.json"));
    if (!(spec.dims == d.dims())) throw DataError("run dimensions do not match the dataset");
    const fs::path cells_path = o.test_cells.empty() ? o.run / "test_cells.csv" : o.test_cells;
    auto in = open_in(cells_path);
    const auto cells = read_cells(in, d);
    const PosteriorSamples samples = load_run_samples(o.run, spec);
    reports.push_back(holdout_report(holdout_predict(samples, spec, cells, d, g.seed),
                                     to_string(spec.variant), o.levels));
    config = {{"run", o.run.string()},
              {"data", o.data.string()},
              {"test_cells", cells_path.string()},
              {"levels", o.levels}};
  } else {
    // Split, fit and evaluate.
    if (o.data.empty()) {
      throw std::invalid_argument("validate needs --against-truth, --run or --data");
    }
    if (!(o.holdout > 0.0 && o.holdout < 1.0)) {
      throw std::invalid_argument("--holdout must lie in (0, 1)");
    }
    if (o.model.basis.empty()) throw std::invalid_argument("--basis is required with --data");
    if (o.replicates < 1) throw std::invalid_argument("--replicates must be at least 1");
    o.sampler.validate();
    const MortalityDataset d = load_dataset(o.data);
    const Eigen::MatrixXd basis = load_basis(o.model, o.data, d);
    ModelOptions joint_opts = o.model, indep_opts = o.model;
    joint_opts.variant = "joint";
    indep_opts.variant = "independent";
    json reps = json::array();
    for (std::size_t r = 0; r < o.replicates; ++r) {
      const std::uint64_t split_seed = g.seed + r;
      const HoldoutSplit split = holdout_split(d, o.holdout, split_seed);
      const std::string suffix = o.replicates > 1 ? "_" + std::to_string(r) : "";
      write_cells_file(g.out / ("test_cells" + suffix + ".csv"), d, split.test_cells);
      SamplerConfig sc = o.sampler;
      sc.seed = split_seed;
      std::mutex progress_mutex;
      const auto progress = progress_printer(g, sc, err, progress_mutex);
      const auto evaluate = [&](const ModelOptions& m) {
        const ModelSpec spec = build_spec(m, d, basis);
        const PosteriorDensity density(spec, split.train);
        const PosteriorSamples samples = sample(density, sc, progress);
        EvalReport rep = holdout_report(
            holdout_predict(samples, spec, split.test_cells, d, split_seed), m.variant, o.levels);
        if (o.replicates > 1) rep.variant += "#" + std::to_string(r);
        return rep;
      };
      if (o.compare) {
        reports.push_back(evaluate(joint_opts));
        reports.push_back(evaluate(indep_opts));
      } else {
        reports.push_back(evaluate(o.model));
      }
      reps.push_back({{"replicate", r}, {"split_seed", split_seed},
                      {"test_cells", split.test_cells.size()}});
    }
    extra["replicates"] = reps;
    config = {{"data", o.data.string()},
              {"holdout", o.holdout},
              {"compare", o.compare},
              {"replicates", o.replicates},
              {"levels", o.levels},
              {"model", to_json(o.model)},
              {"sampler", to_json(o.sampler)}};
  }

  write_reports(g.out, reports, extra);
  write_run_json(g, "validate", config, {});
  auto csv_out = std::ostringstream();
  write_reports_csv(csv_out, reports);
  out << csv_out.str();
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Small-area mortality estimation for multiple subpopulations", "submort"};
  app.fallthrough();
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML or INI file with option defaults");

  GlobalOptions g;
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--seed", g.seed, "Random seed");
  app.add_option("--threads", g.threads, "Sampler threads (0: one per chain)");
  app.add_flag("--quiet", g.quiet, "Suppress progress lines");

  DecomposeOptions dec;
  auto* decompose = app.add_subcommand("decompose", "SVD basis and component-selection report");
  decompose->add_option("--curves", dec.curves, "Curve collection CSV")
      ->required()
      ->check(CLI::ExistingFile);
  decompose->add_option("--p-max", dec.p_max, "Number of components to keep");
  decompose->add_option("--alpha", dec.alpha, "Significance level for subgroup separation");
  decompose->add_option("--min-p", dec.min_p, "Smallest recommended number of components");
  decompose->add_option("--share-floor", dec.share_floor,
                        "Explained share that keeps a component without separation");
  decompose->add_flag("--unscaled", dec.unscaled, "Report U instead of U*Sigma loadings");

  SimulateOptions simo;
  auto* simulate_cmd = app.add_subcommand("simulate", "Generate a synthetic dataset with truth");
  simulate_cmd->add_option("--areas", simo.sim.areas);
  simulate_cmd->add_option("--years", simo.sim.years);
  simulate_cmd->add_option("--subgroups", simo.sim.subgroups);
  simulate_cmd->add_option("--base-pop-unit", simo.sim.base_pop_unit);
  simulate_cmd->add_option("--growth", simo.sim.growth);
  simulate_cmd->add_option("--shares", simo.shares, "Subgroup population shares");
  simulate_cmd->add_option("--baseline-mean", simo.sim.baseline_coef_mean);
  simulate_cmd->add_option("--baseline-sd", simo.sim.baseline_coef_sd);
  simulate_cmd->add_option("--hump-mean", simo.sim.hump_coef_mean);
  simulate_cmd->add_option("--hump-sd", simo.sim.hump_coef_sd);
  simulate_cmd->add_option("--age-jitter-sd", simo.sim.age_jitter_sd);
  simulate_cmd->add_option("--regime", simo.regimes,
                           "Correlation regime for all years, or one per year: independent, "
                           "exchangeable(rho), unstructured");

  FitOptions fo;
  auto* fit_cmd = app.add_subcommand("fit", "Sample the hierarchical model");
  fit_cmd->add_option("--data", fo.data, "Dataset CSV")->required()->check(CLI::ExistingFile);
  add_model_options(fit_cmd, fo.model);
  add_sampler_options(fit_cmd, fo.sampler);
  fit_cmd->add_option("--holdout", fo.holdout, "Fraction of cells per area to hold out");
  fit_cmd->add_flag("--emit-draws", fo.emit_draws, "Also write draws.csv");
  fit_cmd->add_option("--probs", fo.probs, "Quantile levels for summary tables");

  ValidateOptions vo;
  auto* validate_cmd = app.add_subcommand("validate", "Coverage and holdout error metrics");
  validate_cmd->add_option("--against-truth", vo.against_truth, "Simulation output directory");
  validate_cmd->add_option("--run", vo.run, "Fit output directory");
  validate_cmd->add_option("--data", vo.data, "Dataset CSV");
  validate_cmd->add_option("--test-cells", vo.test_cells, "Held-out cells CSV for --run");
  validate_cmd->add_option("--holdout", vo.holdout, "Fraction held out per area");
  validate_cmd->add_flag("--compare", vo.compare, "Fit and compare joint and independent");
  validate_cmd->add_option("--replicates", vo.replicates, "Number of holdout splits");
  validate_cmd->add_option("--levels", vo.levels, "Nominal interval levels");
  validate_cmd->add_option("--basis", vo.model.basis, "Basis curves file or 'from-truth'");
  validate_cmd->add_option("--components,-p", vo.model.p);
  validate_cmd->add_option("--variant", vo.model.variant)
      ->check(CLI::IsMember({"joint", "independent"}));
  validate_cmd->add_flag("--share-correlations-over-time", vo.model.share_correlations_over_time);
  add_sampler_options(validate_cmd, vo.sampler);

  SummarizeOptions so;
  auto* summarize_cmd = app.add_subcommand("summarize", "Quantiles of named quantities");
  summarize_cmd->add_option("--run", so.run, "Fit output directory")->required();
  summarize_cmd->add_option("--quantity,-q", so.quantities, "e.g. log_rate[0,1,2,3]")->required();
  summarize_cmd->add_option("--probs", so.probs);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  if (!rev.empty()) rev.pop_back();  // program name
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (*decompose) return cmd_decompose(g, dec, out);
    if (*simulate_cmd) return cmd_simulate(g, simo, out);
    if (*fit_cmd) return cmd_fit(g, fo, out, err);
    if (*validate_cmd) return cmd_validate(g, vo, out, err);
    if (*summarize_cmd) return cmd_summarize(g, so, out);
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace submort::cli
