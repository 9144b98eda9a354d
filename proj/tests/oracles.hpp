#pragma once

// Fixtures and independent reference computations shared by the unit tests
// and the acceptance binary. Nothing here calls into the code it checks
// except to obtain inputs.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "submort/hiermodel.hpp"
#include "submort/mortdata.hpp"

namespace submort::testing {

namespace fs = std::filesystem;

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    path_ = fs::temp_directory_path() /
            ("submort_" + tag + "_" + std::to_string(stamp) + "_" + std::to_string(counter++));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const noexcept { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Five-age grid used by the small instances.
inline AgeGrid small_grid() { return AgeGrid::from_labels({"0", "5", "10", "15", "20+"}); }

/// Two smooth basis rows over the five-age grid.
inline Eigen::MatrixXd small_basis() {
  Eigen::MatrixXd b(2, 5);
  b << -1.0, -0.8, -0.9, -0.6, -0.4,  //
      0.1, 0.3, -0.2, 0.4, 0.2;
  return b;
}

/// Random (A=5, S=2, C=3, T=4) dataset with small exposures so that the log
/// posterior stays O(100). One cell is masked and one has zero population.
inline MortalityDataset small_dataset(std::uint64_t seed, double pop_lo = 0.5,
                                      double pop_hi = 5.0) {
  const std::size_t A = 5, S = 2, C = 3, T = 4, n = A * S * C * T;
  std::mt19937_64 rng(seed);
  std::poisson_distribution<int> deaths(1.0);
  std::uniform_real_distribution<double> pop(pop_lo, pop_hi);
  std::vector<std::int64_t> d(n);
  std::vector<double> p(n);
  std::vector<std::uint8_t> m(n, 1);
  for (std::size_t k = 0; k < n; ++k) {
    d[k] = deaths(rng);
    p[k] = pop(rng);
  }
  m[3] = 0;
  p[7] = 0.0;
  d[7] = 0;
  return MortalityDataset(small_grid(), {"a", "b"}, {"x", "y", "z"}, {"1", "2", "3", "4"},
                          std::move(d), std::move(p), std::move(m));
}

constexpr double kLog2Pi = 1.8378770664093454836;

inline double normal_lpdf(double x, double mean, double sd) {
  const double r = (x - mean) / sd;
  return -0.5 * r * r - std::log(sd) - 0.5 * kLog2Pi;
}

/// Straight-line log posterior for S <= 2, coded from the model definition:
/// positional reading of the parameter vector, exp-transformed scales with
/// their Jacobians, LKJ(eta) on the correlation matrix with the tanh
/// Jacobian, non-centred effects, RW2 means and the Poisson likelihood
/// without ln y!.
inline double density_oracle(const ModelSpec& spec, const MortalityDataset& data,
                             const Eigen::VectorXd& v) {
  const std::size_t P = spec.components();
  const auto& d = spec.dims;
  const std::size_t A = d.ages, S = d.subpops, C = d.areas, T = d.years;
  if (S > 2) throw std::invalid_argument("oracle handles at most two subpopulations");
  const bool joint = spec.variant == Variant::joint && S == 2;
  const std::size_t Tc = spec.share_correlations_over_time ? 1 : T;
  const auto& h = spec.hyper;

  std::size_t pos = 0;
  auto take = [&](std::size_t n) {
    const std::size_t start = pos;
    pos += n;
    return start;
  };
  const std::size_t zw = take(P * S * C * T), mu = take(P * S * T), lsb = take(P * T),
                    lsm = take(P), lb = take(joint ? P * Tc : 0), zg = take(A * S * C * T),
                    lsa = take(A), lg = take(joint ? A * Tc : 0);
  if (pos != static_cast<std::size_t>(v.size())) throw std::invalid_argument("length mismatch");

  double lp = 0.0;
  // Half-normal on sigma, pulled back to u = log sigma.
  auto half_normal = [](double u, double scale) {
    const double sigma = std::exp(u);
    return std::log(2.0) + normal_lpdf(sigma, 0.0, scale) + u;
  };
  auto lkj = [&](double y) {
    const double rho = std::tanh(y);
    return (h.lkj_eta - 1.0) * std::log(1.0 - rho * rho) + std::log(1.0 - rho * rho);
  };
  auto cholesky = [](double y) {
    Eigen::Matrix2d r;
    r << 1.0, std::tanh(y), std::tanh(y), 1.0;
    return Eigen::Matrix2d(r.llt().matrixL());
  };

  for (std::size_t k = 0; k < P * T; ++k) lp += half_normal(v[lsb + k], h.sigma_beta_scale);
  for (std::size_t k = 0; k < P; ++k) lp += normal_lpdf(v[lsm + k], h.sigma_mu_meanlog, h.sigma_mu_sdlog);
  for (std::size_t k = 0; k < A; ++k) lp += half_normal(v[lsa + k], h.sigma_gamma_scale);
  for (std::size_t k = 0; k < P * S * C * T; ++k) lp += normal_lpdf(v[zw + k], 0.0, 1.0);
  for (std::size_t k = 0; k < A * S * C * T; ++k) lp += normal_lpdf(v[zg + k], 0.0, 1.0);
  if (joint) {
    for (std::size_t k = 0; k < P * Tc; ++k) lp += lkj(v[lb + k]);
    for (std::size_t k = 0; k < A * Tc; ++k) lp += lkj(v[lg + k]);
  }
  for (std::size_t i = 0; i < P; ++i) {
    const double sigma_mu = std::exp(v[lsm + i]);
    for (std::size_t s = 0; s < S; ++s) {
      auto m = [&](std::size_t t) { return v[mu + (i * S + s) * T + t]; };
      for (std::size_t t = 0; t < T; ++t) {
        lp += t < 2 ? normal_lpdf(m(t), 0.0, h.rw2_init_sd)
                    : normal_lpdf(m(t), 2.0 * m(t - 1) - m(t - 2), sigma_mu);
      }
    }
  }

  std::vector<double> eta(A * S * C * T, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t per = spec.share_correlations_over_time ? 0 : t;
      for (std::size_t i = 0; i < P; ++i) {
        Eigen::VectorXd z(S);
        for (std::size_t s = 0; s < S; ++s) z[s] = v[zw + ((i * S + s) * C + c) * T + t];
        const Eigen::MatrixXd L =
            joint ? Eigen::MatrixXd(cholesky(v[lb + i * Tc + per])) : Eigen::MatrixXd::Identity(S, S);
        const Eigen::VectorXd omega = std::exp(v[lsb + i * T + t]) * (L * z);
        for (std::size_t s = 0; s < S; ++s) {
          const double beta = v[mu + (i * S + s) * T + t] + omega[s];
          for (std::size_t a = 0; a < A; ++a) {
            eta[((a * S + s) * C + c) * T + t] += beta * spec.basis(i, a);
          }
        }
      }
      for (std::size_t a = 0; a < A; ++a) {
        Eigen::VectorXd z(S);
        for (std::size_t s = 0; s < S; ++s) z[s] = v[zg + ((a * S + s) * C + c) * T + t];
        const Eigen::MatrixXd L =
            joint ? Eigen::MatrixXd(cholesky(v[lg + a * Tc + per])) : Eigen::MatrixXd::Identity(S, S);
        const Eigen::VectorXd gamma = std::exp(v[lsa + a]) * (L * z);
        for (std::size_t s = 0; s < S; ++s) eta[((a * S + s) * C + c) * T + t] += gamma[s];
      }
    }
  }
  for (std::size_t k = 0; k < eta.size(); ++k) {
    const double pop = data.population()[k];
    if (!data.mask()[k] || pop <= 0.0) continue;
    const double y = static_cast<double>(data.deaths()[k]);
    lp += y * (std::log(pop) + eta[k]) - pop * std::exp(eta[k]);
  }
  return lp;
}

/// Largest |fd - analytic| / max(1, |analytic|) over all coordinates, using
/// central differences with step h.
template <class Density>
double max_gradient_error(const Density& density, const Eigen::VectorXd& v, double h = 1e-5) {
  Eigen::VectorXd grad;
  density.log_density_gradient(v, grad);
  double worst = 0.0;
  for (Eigen::Index k = 0; k < v.size(); ++k) {
    Eigen::VectorXd up = v, down = v;
    up[k] += h;
    down[k] -= h;
    const double fd = (density.log_density(up) - density.log_density(down)) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - grad[k]) / std::max(1.0, std::abs(grad[k])));
  }
  return worst;
}

/// One-age, one-area, one-year, one-subpopulation, one-component model with
/// nothing observed: the posterior is the product of the priors.
inline std::pair<ModelSpec, MortalityDataset> prior_only_model(const Hyperparameters& hyper) {
  MortalityDataset data(AgeGrid::from_labels({"0+"}), {"a"}, {"x"}, {"1"}, {0}, {1.0}, {0});
  Eigen::MatrixXd basis(1, 1);
  basis << 1.0;
  ModelSpec spec = make_spec(data, basis, Variant::independent);
  spec.hyper = hyper;
  return {spec, data};
}

/// Trapezoid integral of exp(f(u) - f(0)) over [lo, hi].
template <class F>
double integrate_relative(F f, double lo, double hi, std::size_t n = 200000) {
  const double f0 = f(0.0);
  const double du = (hi - lo) / static_cast<double>(n);
  double sum = 0.0;
  for (std::size_t k = 0; k <= n; ++k) {
    const double w = (k == 0 || k == n) ? 0.5 : 1.0;
    sum += w * std::exp(f(lo + du * static_cast<double>(k)) - f0);
  }
  return sum * du;
}

/// Density of a half-normal(scale) sigma, expressed in u = log sigma, at u = 0.
inline double half_normal_in_log_at_zero(double scale) {
  return 2.0 / (scale * std::sqrt(2.0 * std::numbers::pi)) * std::exp(-0.5 / (scale * scale));
}

/// Density of log-normal(m, s) sigma expressed in u = log sigma, at u = 0.
inline double log_normal_in_log_at_zero(double m, double s) {
  return std::exp(-0.5 * (m / s) * (m / s)) / (s * std::sqrt(2.0 * std::numbers::pi));
}

/// Mass of each sigma prior through the model's own unconstrained density:
/// integrate the one-coordinate slice of the log posterior and rescale by the
/// closed-form density at u = 0. Returns {sigma_beta, sigma_age, sigma_mu}.
inline std::vector<double> sigma_prior_masses(const Hyperparameters& hyper) {
  auto [spec, data] = prior_only_model(hyper);
  const PosteriorDensity density(spec, data);
  const auto& layout = density.layout();
  auto slice = [&](std::size_t coord) {
    return [&density, coord](double u) {
      Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(density.dimension()));
      v[static_cast<Eigen::Index>(coord)] = u;
      return density.log_density(v);
    };
  };
  return {integrate_relative(slice(layout.log_sigma_beta.offset), -40.0, 6.0) *
              half_normal_in_log_at_zero(hyper.sigma_beta_scale),
          integrate_relative(slice(layout.log_sigma_age.offset), -40.0, 6.0) *
              half_normal_in_log_at_zero(hyper.sigma_gamma_scale),
          integrate_relative(slice(layout.log_sigma_mu.offset), -12.0, 9.0) *
              log_normal_in_log_at_zero(hyper.sigma_mu_meanlog, hyper.sigma_mu_sdlog)};
}

}  // namespace submort::testing
