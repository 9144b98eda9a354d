// Acceptance checks: one PASS/FAIL line per criterion.
//
//   acceptance                  criteria 2-10; criterion 1 reports SKIP
//   acceptance --full-scale    also runs the full-size coverage study
//   acceptance --only 3 --only 7

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "coverage_fixtures.hpp"
#include "oracles.hpp"
#include "submort/cli.hpp"
#include "submort/diagnostics.hpp"
#include "submort/evalharness.hpp"
#include "submort/nuts.hpp"
#include "submort/pcbasis.hpp"
#include "submort/simgen.hpp"

using namespace submort;
namespace fs = std::filesystem;

namespace {

enum class Status { pass, fail, skip };

struct Outcome {
  Status status;
  std::string detail;
};

Outcome verdict(bool ok, std::string detail) {
  return {ok ? Status::pass : Status::fail, std::move(detail)};
}

std::string fmt(double x, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << x;
  return s.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Coverage pooled over replicates, weighted by the number of quantities.
struct PooledCoverage {
  std::vector<double> levels;
  std::map<std::string, std::pair<std::vector<double>, std::size_t>> families;

  void add(const std::vector<CoverageFamily>& fams) {
    for (const auto& f : fams) {
      auto& [sum, count] = families[f.name];
      sum.resize(f.coverage.size(), 0.0);
      for (std::size_t l = 0; l < f.coverage.size(); ++l) {
        sum[l] += f.coverage[l] * static_cast<double>(f.count);
      }
      count += f.count;
    }
  }
  std::vector<double> coverage(const std::string& name) const {
    const auto& [sum, count] = families.at(name);
    std::vector<double> out;
    for (double s : sum) out.push_back(s / static_cast<double>(count));
    return out;
  }
};

// Checks every level of both families against targets within `tol`.
Outcome coverage_verdict(const PooledCoverage& pooled,
                         const std::map<std::string, std::vector<double>>& targets, double tol,
                         std::string extra) {
  bool ok = true;
  std::string detail;
  for (const auto& [name, target] : targets) {
    const auto cov = pooled.coverage(name);
    detail += name + " [";
    for (std::size_t l = 0; l < cov.size(); ++l) {
      ok = ok && std::abs(cov[l] - target[l]) <= tol;
      detail += (l ? " " : "") + fmt(cov[l], 3) + "/" + fmt(target[l], 3);
    }
    detail += "] ";
  }
  return verdict(ok, detail + extra);
}

// Simulate with the default generator and fit the joint model on the truth
// basis, accumulating coverage.
void coverage_replicate(SimConfig sim_cfg, SamplerConfig sampler, PooledCoverage& pooled) {
  const Simulation sim = simulate(sim_cfg);
  const ModelSpec spec = make_spec(sim.dataset, sim.curves.basis(), Variant::joint);
  const auto samples = fit(sim.dataset, spec, sampler);
  pooled.add(truth_coverage(samples, spec, sim.truth, pooled.levels));
}

Outcome criterion_full_scale() {
  PooledCoverage pooled{kDefaultLevels, {}};
  SimConfig sim;
  sim.seed = 1;
  SamplerConfig cfg;
  cfg.chains = 4;
  cfg.warmup = 500;
  cfg.samples = 2500;
  cfg.seed = 1;
  const auto t0 = std::chrono::steady_clock::now();
  coverage_replicate(sim, cfg, pooled);
  return coverage_verdict(pooled,
                          {{"correlation", {0.78, 0.90, 0.94}}, {"log_rate", {0.83, 0.92, 0.96}}},
                          0.07, "runtime " + fmt(seconds_since(t0), 5) + " s");
}

Outcome criterion_desk_scale() {
  PooledCoverage pooled{kDefaultLevels, {}};
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SimConfig sim;
    sim.areas = 8;
    sim.years = 5;
    sim.subgroups = 3;
    sim.seed = seed;
    SamplerConfig cfg;
    cfg.chains = 2;
    cfg.warmup = 300;
    cfg.samples = 600;
    cfg.seed = seed;
    coverage_replicate(sim, cfg, pooled);
  }
  const double runtime = seconds_since(t0);
  auto out = coverage_verdict(
      pooled, {{"correlation", kDefaultLevels}, {"log_rate", kDefaultLevels}}, 0.10,
      "runtime " + fmt(runtime, 5) + " s (limit 1200)");
  if (runtime >= 1200.0) out.status = Status::fail;
  return out;
}

Outcome criterion_gradient() {
  const auto data = testing::small_dataset(21);
  const auto spec = make_spec(data, testing::small_basis(), Variant::joint);
  const PosteriorDensity density(spec, data);
  // Points stay where |lp| is small enough for a double-precision central
  // difference to resolve the gradient.
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> n(0.0, 0.5);
  double worst = 0.0, largest_lp = 0.0;
  for (int point = 0; point < 50; ++point) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(density.dimension()));
    for (auto& x : v) x = n(rng);
    largest_lp = std::max(largest_lp, std::abs(density.log_density(v)));
    worst = std::max(worst, testing::max_gradient_error(density, v));
  }
  return verdict(worst < 1e-6, "max relative error " + fmt(worst, 3) + " over 50 points, dim " +
                                   std::to_string(density.dimension()) + ", max |lp| " +
                                   fmt(largest_lp, 3));
}

Outcome criterion_sigma_priors() {
  const auto masses = testing::sigma_prior_masses(Hyperparameters{});
  const char* names[] = {"half-normal(1)", "half-normal(0.25)", "log-normal(-1.5,0.5)"};
  bool ok = true;
  std::string detail;
  for (std::size_t k = 0; k < masses.size(); ++k) {
    ok = ok && std::abs(masses[k] - 1.0) <= 1e-3;
    detail += std::string(names[k]) + " " + fmt(masses[k], 8) + " ";
  }
  return verdict(ok, detail);
}

struct SampleMoments {
  Eigen::VectorXd mean, sd;
  Eigen::MatrixXd corr;
};

SampleMoments moments(const PosteriorSamples& s) {
  Eigen::MatrixXd all(static_cast<Eigen::Index>(s.dim),
                      static_cast<Eigen::Index>(s.total_draws()));
  Eigen::Index col = 0;
  for (const auto& c : s.chains) {
    all.middleCols(col, c.draws.cols()) = c.draws;
    col += c.draws.cols();
  }
  const Eigen::VectorXd mean = all.rowwise().mean();
  const Eigen::MatrixXd centred = all.colwise() - mean;
  const Eigen::MatrixXd cov = centred * centred.transpose() / static_cast<double>(all.cols() - 1);
  const Eigen::VectorXd sd = cov.diagonal().cwiseSqrt();
  return {mean, sd, cov.array() / (sd * sd.transpose()).array()};
}

Outcome criterion_sampler() {
  SamplerConfig cfg;
  cfg.chains = 4;
  cfg.warmup = 1000;
  cfg.samples = 2000;
  cfg.target_accept = 0.8;
  bool ok = true;
  double worst_mean = 0.0, worst_sd = 0.0, worst_rhat = 0.0, corr_err = 0.0, div_rate = 0.0;

  auto check = [&](const LogDensityFn& f, std::size_t dim, std::uint64_t seed) {
    cfg.seed = seed;
    const auto s = sample(f, dim, cfg);
    const auto m = moments(s);
    for (std::size_t k = 0; k < dim; ++k) {
      const auto i = static_cast<Eigen::Index>(k);
      worst_mean = std::max(worst_mean, std::abs(m.mean[i]));
      worst_sd = std::max(worst_sd, std::abs(m.sd[i] - 1.0));
      worst_rhat = std::max(worst_rhat, split_rhat(s.coordinate(k)));
    }
    div_rate = std::max(div_rate, static_cast<double>(s.divergences()) /
                                      static_cast<double>(s.total_draws()));
    return m;
  };

  check(
      [](const Eigen::VectorXd& q, Eigen::VectorXd& g) {
        g = -q;
        return -0.5 * q.squaredNorm();
      },
      10, 11);
  Eigen::Matrix2d cov;
  cov << 1.0, 0.9, 0.9, 1.0;
  const Eigen::Matrix2d prec = cov.inverse();
  const auto m = check(
      [prec](const Eigen::VectorXd& q, Eigen::VectorXd& g) {
        g = -prec * q;
        return -0.5 * q.dot(prec * q);
      },
      2, 5);
  corr_err = std::abs(m.corr(0, 1) - 0.9);
  ok = worst_mean <= 0.05 && worst_sd <= 0.05 && corr_err <= 0.03 && worst_rhat < 1.01 &&
       div_rate < 0.001;
  return verdict(ok, "max |mean| " + fmt(worst_mean, 3) + ", max |sd-1| " + fmt(worst_sd, 3) +
                         ", |corr-0.9| " + fmt(corr_err, 3) + ", max R-hat " +
                         fmt(worst_rhat, 5) + ", divergence rate " + fmt(div_rate, 3));
}

Outcome criterion_reconstruction() {
  SimConfig cfg;
  cfg.seed = 3;
  const Simulation sim = simulate(cfg);
  const ModelSpec spec = make_spec(sim.dataset, sim.curves.basis());
  ConstrainedParams p;
  p.beta = sim.truth.beta();
  p.gamma.assign(sim.dataset.dims().cells(), 0.0);
  const auto rates = log_rates(spec, p);
  if (rates.size() != sim.truth.log_rates.size()) return {Status::fail, "size mismatch"};
  double worst = 0.0;
  std::size_t inexact = 0;
  for (std::size_t k = 0; k < rates.size(); ++k) {
    const double t = sim.truth.log_rates[k];
    inexact += rates[k] != t;
    worst = std::max(worst, std::abs(rates[k] - t) / std::max(1e-300, std::abs(t)));
  }
  return verdict(worst <= 1e-12, std::to_string(rates.size()) + " cells, " +
                                     std::to_string(inexact) + " not bitwise equal, max rel " +
                                     fmt(worst, 3));
}

Outcome criterion_joint_vs_independent() {
  std::size_t wins = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SimConfig sim_cfg;
    sim_cfg.areas = 8;
    sim_cfg.years = 5;
    sim_cfg.subgroups = 3;
    sim_cfg.seed = 100 + seed;
    sim_cfg.regime_schedule.assign(sim_cfg.years, parse_regime("exchangeable(0.8)"));
    const Simulation sim = simulate(sim_cfg);
    const auto basis = sim.curves.basis();
    const auto joint = make_spec(sim.dataset, basis, Variant::joint);
    const auto indep = make_spec(sim.dataset, basis, Variant::independent);
    SamplerConfig cfg;
    cfg.chains = 2;
    cfg.warmup = 300;
    cfg.samples = 600;
    cfg.seed = seed;
    const auto split = holdout_split(sim.dataset, 0.2, seed);
    const auto cmp = compare_variants(sim.dataset, joint, indep, cfg, split, seed);
    const double mj = cmp.joint.errors.mad, mi = cmp.independent.errors.mad;
    wins += mj <= mi;
    detail += fmt(mj, 4) + (mj <= mi ? "<=" : ">") + fmt(mi, 4) + " ";
  }
  return verdict(wins >= 4, std::to_string(wins) + "/5 seeds joint MAD <= independent: " + detail);
}

Outcome criterion_svd_rank4() {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> n01;
  const Eigen::Index N = 300, A = 19;
  Eigen::MatrixXd u(N, 4), v(4, A);
  for (auto& e : u.reshaped()) e = n01(rng);
  for (auto& e : v.reshaped()) e = n01(rng);
  const Eigen::MatrixXd signal = u * v;
  const double signal_sd = std::sqrt(signal.squaredNorm() / static_cast<double>(N * A));
  Eigen::MatrixXd x = signal;
  for (auto& e : x.reshaped()) e += 0.01 * signal_sd * n01(rng);
  std::vector<std::string> labels;
  for (Eigen::Index a = 0; a < A; ++a) labels.push_back(std::to_string(5 * a));
  CurveCollection curves{AgeGrid::from_labels(labels), x,
                         std::vector<CurveMeta>(static_cast<std::size_t>(N), CurveMeta{"s", "", ""})};
  const auto b = svd_basis(curves, static_cast<std::size_t>(A));
  const double share = explained_variance(b).head(4).sum();
  const double ortho =
      (b.components() * b.components().transpose() - Eigen::MatrixXd::Identity(A, A)).norm();
  const double recon = (b.reconstruct(static_cast<std::size_t>(A)) - x).norm() / x.norm();
  return verdict(share >= 0.99 && ortho < 1e-10 && recon <= 1e-8,
                 "4-component share " + fmt(share, 6) + ", orthonormality error " +
                     fmt(ortho, 3) + ", reconstruction error " + fmt(recon, 3));
}

Outcome criterion_coverage_fixtures() {
  const auto& fixtures = testing::coverage_fixtures();
  std::size_t matched = 0;
  for (const auto& f : fixtures) {
    matched += std::abs(interval_coverage(f.truths, f.lowers, f.uppers) - f.expect) < 1e-12;
  }
  return verdict(matched == fixtures.size() && matched >= 10,
                 std::to_string(matched) + "/" + std::to_string(fixtures.size()) +
                     " fixtures match");
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "submort");
  std::ostringstream out, err;
  return cli::run(args, out, err);
}

// Every file of a directory, with the timestamp removed from run.json.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  static const std::regex stamp("\"created_at\": \"[^\"]*\"");
  std::map<std::string, std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    auto text = testing::slurp(entry.path());
    if (entry.path().filename() == "run.json") text = std::regex_replace(text, stamp, "");
    files[fs::relative(entry.path(), dir).string()] = text;
  }
  return files;
}

Outcome criterion_determinism() {
  testing::TempDir dir("acceptance_determinism");
  const auto sim = dir / "sim", fitted = dir / "fit";
  auto pipeline = [&]() {
    fs::remove_all(sim);
    fs::remove_all(fitted);
    const int a = run_cli({"--out", sim.string(), "--seed", "17", "--quiet", "simulate",
                           "--areas", "4", "--years", "3", "--subgroups", "3"});
    const int b = run_cli({"--out", fitted.string(), "--seed", "17", "--quiet", "fit", "--data",
                           (sim / "dataset.csv").string(), "--basis", "from-truth", "--chains",
                           "2", "--warmup", "150", "--samples", "100", "--emit-draws"});
    auto files = snapshot(dir.path());
    return std::make_pair(a == 0 && b == 0, files);
  };
  const auto [ok1, first] = pipeline();
  const auto [ok2, second] = pipeline();
  if (!ok1 || !ok2) return {Status::fail, "pipeline exited with an error"};
  std::size_t differing = 0;
  for (const auto& [name, text] : first) {
    const auto it = second.find(name);
    differing += it == second.end() || it->second != text;
  }
  differing += second.size() != first.size();
  return verdict(differing == 0, std::to_string(first.size()) + " files compared, " +
                                     std::to_string(differing) + " differ");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  bool full_scale = false;
  std::vector<int> only;
  app.add_flag("--full-scale", full_scale, "Run the full-size coverage study (hours)");
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"full-scale coverage",
       [&]() -> Outcome {
         if (!full_scale) return {Status::skip, "hours on one core; run with --full-scale"};
         return criterion_full_scale();
       }},
      {"desk-scale coverage", criterion_desk_scale},
      {"gradient check", criterion_gradient},
      {"sigma prior normalisation", criterion_sigma_priors},
      {"sampler calibration", criterion_sampler},
      {"reconstruction identity", criterion_reconstruction},
      {"joint vs independent holdout MAD", criterion_joint_vs_independent},
      {"SVD rank-4 recovery", criterion_svd_rank4},
      {"coverage fixtures", criterion_coverage_fixtures},
      {"determinism", criterion_determinism},
  };

  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome r;
    try {
      r = criteria[k].second();
    } catch (const std::exception& e) {
      r = {Status::fail, std::string("exception: ") + e.what()};
    }
    const char* word = r.status == Status::pass ? "PASS" : r.status == Status::fail ? "FAIL" : "SKIP";
    failures += r.status == Status::fail;
    std::cout << "criterion " << id << " (" << criteria[k].first << "): " << word << " - "
              << r.detail << " [" << fmt(seconds_since(t0), 4) << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
