#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace submort {

class PosteriorDensity;

/// Returns log p(q) and writes its gradient into `grad` (resized by the callee).
/// Must be safe to call concurrently from several chains.
using LogDensityFn = std::function<double(const Eigen::VectorXd& q, Eigen::VectorXd& grad)>;

struct SamplerConfig {
  std::size_t chains = 4;
  std::size_t warmup = 500;
  std::size_t samples = 2500;
  std::uint64_t seed = 0;
  double target_accept = 0.9;
  int max_treedepth = 10;
  double init_jitter = 1.0;
  std::size_t threads = 0;  // 0: one thread per chain

  void validate() const;
};

/// Initialisation failed or warm-up could not find a usable step size.
class SamplerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DrawStats {
  double accept_stat = 0.0;
  double step_size = 0.0;
  double energy = 0.0;
  double log_density = 0.0;
  int tree_depth = 0;
  int n_leapfrog = 0;
  bool divergent = false;
};

struct ChainResult {
  Eigen::MatrixXd draws;  // dim x samples, one draw per column
  std::vector<DrawStats> stats;
  double step_size = 0.0;
  Eigen::VectorXd inv_metric;
  std::size_t warmup_divergences = 0;
};

struct PosteriorSamples {
  std::size_t dim = 0;
  SamplerConfig config;
  std::vector<ChainResult> chains;

  std::size_t num_chains() const noexcept { return chains.size(); }
  std::size_t draws_per_chain() const noexcept {
    return chains.empty() ? 0 : static_cast<std::size_t>(chains.front().draws.cols());
  }
  std::size_t total_draws() const noexcept { return num_chains() * draws_per_chain(); }
  std::size_t divergences() const noexcept;
  /// Per-chain series of one coordinate.
  std::vector<std::vector<double>> coordinate(std::size_t k) const;
};

/// Adaptive diagonal-metric multinomial NUTS for one chain.
///
/// Warm-up follows the usual three-stage schedule: a fast step-size phase
/// (15% of warm-up), metric windows starting at 25 iterations and doubling,
/// and a final step-size phase (10%). Step size uses Nesterov dual averaging
/// towards `target_accept`.
class NutsChain {
 public:
  NutsChain(LogDensityFn log_density, std::size_t dim, const SamplerConfig& cfg,
            std::size_t chain_index);

  ChainResult run(const std::function<void(std::size_t iteration)>& progress = {});

 private:
  struct State {
    Eigen::VectorXd q, p, grad;
    double log_density = 0.0;
  };

  bool initialize();
  void leapfrog(State& z, double eps) const;
  double hamiltonian(const State& z) const;
  void sample_momentum(State& z);
  void init_step_size();
  DrawStats transition();
  bool build_tree(int depth, State& z, State& z_propose, Eigen::VectorXd& p_sharp_beg,
                  Eigen::VectorXd& p_sharp_end, Eigen::VectorXd& rho, Eigen::VectorXd& p_beg,
                  Eigen::VectorXd& p_end, double h0, double sign, int& n_leapfrog,
                  double& log_sum_weight, double& sum_metro_prob);

  LogDensityFn f_;
  std::size_t dim_;
  SamplerConfig cfg_;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};

  State z_;
  Eigen::VectorXd inv_metric_;
  double eps_ = 1.0;
  bool divergent_ = false;
  int depth_ = 0;
};

/// Runs `cfg.chains` independent chains, concurrently when allowed.
/// Chain k draws its randomness from seed_seq{seed, k}.
PosteriorSamples sample(const LogDensityFn& log_density, std::size_t dim, const SamplerConfig& cfg,
                        const std::function<void(std::size_t chain, std::size_t iteration)>&
                            progress = {});

PosteriorSamples sample(const PosteriorDensity& density, const SamplerConfig& cfg,
                        const std::function<void(std::size_t chain, std::size_t iteration)>&
                            progress = {});

}  // namespace submort
