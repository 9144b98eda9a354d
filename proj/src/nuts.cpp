#include "submort/nuts.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#include "submort/hiermodel.hpp"

namespace submort {

namespace {

constexpr double kMaxDeltaH = 1000.0;

double log_sum_exp(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// Nesterov dual averaging of log step size.
class DualAveraging {
 public:
  explicit DualAveraging(double delta) : delta_(delta) {}

  void restart(double step_size) {
    mu_ = std::log(10.0 * step_size);
    counter_ = 0;
    s_bar_ = 0.0;
    x_bar_ = 0.0;
  }

  double learn(double accept_stat) {
    ++counter_;
    accept_stat = std::min(1.0, accept_stat);
    const double n = static_cast<double>(counter_);
    const double eta = 1.0 / (n + kT0);
    s_bar_ = (1.0 - eta) * s_bar_ + eta * (delta_ - accept_stat);
    const double x = mu_ - s_bar_ * std::sqrt(n) / kGamma;
    const double x_eta = std::pow(n, -kKappa);
    x_bar_ = (1.0 - x_eta) * x_bar_ + x_eta * x;
    return std::exp(x);
  }

  double final_step_size() const { return std::exp(x_bar_); }

 private:
  static constexpr double kGamma = 0.05;
  static constexpr double kT0 = 10.0;
  static constexpr double kKappa = 0.75;
  double delta_;
  double mu_ = 0.0;
  std::size_t counter_ = 0;
  double s_bar_ = 0.0;
  double x_bar_ = 0.0;
};

// Welford accumulator for the diagonal metric.
class VarianceEstimator {
 public:
  explicit VarianceEstimator(std::size_t dim) : mean_(Eigen::VectorXd::Zero(dim)), m2_(mean_) {}

  void restart() {
    n_ = 0;
    mean_.setZero();
    m2_.setZero();
  }

  void add(const Eigen::VectorXd& q) {
    ++n_;
    const Eigen::VectorXd delta = q - mean_;
    mean_ += delta / static_cast<double>(n_);
    m2_ += delta.cwiseProduct(q - mean_);
  }

  std::size_t count() const { return n_; }
  Eigen::VectorXd variance() const { return m2_ / (static_cast<double>(n_) - 1.0); }

 private:
  std::size_t n_ = 0;
  Eigen::VectorXd mean_, m2_;
};

// Metric adaptation windows: init buffer, doubling windows, terminal buffer.
class WindowSchedule {
 public:
  explicit WindowSchedule(std::size_t warmup) : warmup_(warmup) {
    init_buffer_ = static_cast<std::size_t>(0.15 * static_cast<double>(warmup));
    term_buffer_ = static_cast<std::size_t>(0.1 * static_cast<double>(warmup));
    window_size_ = 25;
    if (init_buffer_ + window_size_ + term_buffer_ > warmup) {
      window_size_ = warmup - init_buffer_ - term_buffer_;
    }
    next_window_ = init_buffer_ + window_size_ - 1;
  }

  bool in_window() const {
    return counter_ >= init_buffer_ && counter_ < warmup_ - term_buffer_ && counter_ != warmup_;
  }
  bool window_end() const { return counter_ == next_window_ && counter_ != warmup_; }

  void advance_window() {
    const std::size_t last = warmup_ - term_buffer_ - 1;
    if (next_window_ == last) return;
    window_size_ *= 2;
    next_window_ = counter_ + window_size_;
    if (next_window_ != last && next_window_ + 2 * window_size_ >= warmup_ - term_buffer_) {
      next_window_ = last;
    }
  }

  void tick() { ++counter_; }

 private:
  std::size_t warmup_;
  std::size_t init_buffer_ = 0, term_buffer_ = 0, window_size_ = 0, next_window_ = 0;
  std::size_t counter_ = 0;
};

bool no_u_turn(const Eigen::VectorXd& p_sharp_minus, const Eigen::VectorXd& p_sharp_plus,
               const Eigen::VectorXd& rho) {
  return p_sharp_plus.dot(rho) > 0 && p_sharp_minus.dot(rho) > 0;
}

}  // namespace

void SamplerConfig::validate() const {
  if (chains < 1) throw std::invalid_argument("chains must be at least 1");
  if (warmup < 100) throw std::invalid_argument("warmup must be at least 100 iterations");
  if (samples < 1) throw std::invalid_argument("samples must be at least 1");
  if (!(target_accept > 0.0 && target_accept < 1.0)) {
    throw std::invalid_argument("target_accept must lie in (0, 1)");
  }
  if (max_treedepth < 1) throw std::invalid_argument("max_treedepth must be at least 1");
  if (!(init_jitter >= 0.0) || !std::isfinite(init_jitter)) {
    throw std::invalid_argument("init_jitter must be a nonnegative number");
  }
}

std::size_t PosteriorSamples::divergences() const noexcept {
  std::size_t n = 0;
  for (const auto& c : chains) {
    for (const auto& s : c.stats) n += s.divergent ? 1 : 0;
  }
  return n;
}

std::vector<std::vector<double>> PosteriorSamples::coordinate(std::size_t k) const {
  std::vector<std::vector<double>> out;
  out.reserve(chains.size());
  for (const auto& c : chains) {
    const auto row = c.draws.row(static_cast<Eigen::Index>(k));
    out.emplace_back(row.begin(), row.end());
  }
  return out;
}

NutsChain::NutsChain(LogDensityFn log_density, std::size_t dim, const SamplerConfig& cfg,
                     std::size_t chain_index)
    : f_(std::move(log_density)), dim_(dim), cfg_(cfg), inv_metric_(Eigen::VectorXd::Ones(dim)) {
  cfg_.validate();
  if (dim == 0) throw std::invalid_argument("sampler needs at least one dimension");
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed & 0xffffffffu),
                    static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(chain_index)};
  rng_.seed(seq);
}

bool NutsChain::initialize() {
  std::uniform_real_distribution<double> jitter(-cfg_.init_jitter, cfg_.init_jitter);
  for (int attempt = 0; attempt < 100; ++attempt) {
    z_.q.resize(static_cast<Eigen::Index>(dim_));
    for (Eigen::Index k = 0; k < z_.q.size(); ++k) {
      z_.q[k] = cfg_.init_jitter > 0 ? jitter(rng_) : 0.0;
    }
    z_.log_density = f_(z_.q, z_.grad);
    if (std::isfinite(z_.log_density) && z_.grad.allFinite()) {
      z_.p = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim_));
      return true;
    }
  }
  return false;
}

void NutsChain::leapfrog(State& z, double eps) const {
  z.p += 0.5 * eps * z.grad;
  z.q += eps * inv_metric_.cwiseProduct(z.p);
  z.log_density = f_(z.q, z.grad);
  if (!std::isfinite(z.log_density) || !z.grad.allFinite()) {
    z.log_density = -std::numeric_limits<double>::infinity();
    return;
  }
  z.p += 0.5 * eps * z.grad;
}

double NutsChain::hamiltonian(const State& z) const {
  const double h = -z.log_density + 0.5 * z.p.dot(inv_metric_.cwiseProduct(z.p));
  return std::isnan(h) ? std::numeric_limits<double>::infinity() : h;
}

void NutsChain::sample_momentum(State& z) {
  for (Eigen::Index k = 0; k < z.p.size(); ++k) {
    z.p[k] = normal_(rng_) / std::sqrt(inv_metric_[k]);
  }
}

void NutsChain::init_step_size() {
  const State start = z_;
  auto trial = [&] {
    z_ = start;
    sample_momentum(z_);
    const double h0 = hamiltonian(z_);
    leapfrog(z_, eps_);
    return h0 - hamiltonian(z_);
  };
  const double log_target = std::log(0.8);
  const int direction = trial() > log_target ? 1 : -1;
  while (true) {
    const double delta_h = trial();
    if (direction == 1 && !(delta_h > log_target)) break;
    if (direction == -1 && !(delta_h < log_target)) break;
    eps_ = direction == 1 ? 2.0 * eps_ : 0.5 * eps_;
    if (eps_ > 1e7) {
      z_ = start;
      throw SamplerError("step size diverged upwards; the posterior appears to be improper");
    }
    if (eps_ == 0.0) {
      z_ = start;
      throw SamplerError("step size collapsed to zero; the log density is not smooth at the "
                         "initial point");
    }
  }
  z_ = start;
}

bool NutsChain::build_tree(int depth, State& z, State& z_propose, Eigen::VectorXd& p_sharp_beg,
                           Eigen::VectorXd& p_sharp_end, Eigen::VectorXd& rho,
                           Eigen::VectorXd& p_beg, Eigen::VectorXd& p_end, double h0, double sign,
                           int& n_leapfrog, double& log_sum_weight, double& sum_metro_prob) {
  if (depth == 0) {
    leapfrog(z, sign * eps_);
    ++n_leapfrog;
    const double h = hamiltonian(z);
    if (h - h0 > kMaxDeltaH) divergent_ = true;
    log_sum_weight = log_sum_exp(log_sum_weight, h0 - h);
    sum_metro_prob += h0 - h > 0 ? 1.0 : std::exp(h0 - h);
    z_propose = z;
    p_sharp_beg = inv_metric_.cwiseProduct(z.p);
    p_sharp_end = p_sharp_beg;
    rho += z.p;
    p_beg = z.p;
    p_end = p_beg;
    return !divergent_;
  }

  const Eigen::Index n = static_cast<Eigen::Index>(dim_);

  // Left subtree.
  Eigen::VectorXd p_init_end(n), p_sharp_init_end(n), rho_init = Eigen::VectorXd::Zero(n);
  double log_sum_weight_init = -std::numeric_limits<double>::infinity();
  if (!build_tree(depth - 1, z, z_propose, p_sharp_beg, p_sharp_init_end, rho_init, p_beg,
                  p_init_end, h0, sign, n_leapfrog, log_sum_weight_init, sum_metro_prob)) {
    return false;
  }

  // Right subtree.
  State z_propose_final = z;
  Eigen::VectorXd p_final_beg(n), p_sharp_final_beg(n), rho_final = Eigen::VectorXd::Zero(n);
  double log_sum_weight_final = -std::numeric_limits<double>::infinity();
  if (!build_tree(depth - 1, z, z_propose_final, p_sharp_final_beg, p_sharp_end, rho_final,
                  p_final_beg, p_end, h0, sign, n_leapfrog, log_sum_weight_final,
                  sum_metro_prob)) {
    return false;
  }

  // Multinomial choice between the two halves.
  const double log_sum_weight_subtree = log_sum_exp(log_sum_weight_init, log_sum_weight_final);
  log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);
  if (log_sum_weight_final > log_sum_weight_subtree ||
      uniform_(rng_) < std::exp(log_sum_weight_final - log_sum_weight_subtree)) {
    z_propose = std::move(z_propose_final);
  }

  const Eigen::VectorXd rho_subtree = rho_init + rho_final;
  rho += rho_subtree;

  bool persist = no_u_turn(p_sharp_beg, p_sharp_end, rho_subtree);
  persist = persist && no_u_turn(p_sharp_beg, p_sharp_final_beg, rho_init + p_final_beg);
  persist = persist && no_u_turn(p_sharp_init_end, p_sharp_end, rho_final + p_init_end);
  return persist;
}

DrawStats NutsChain::transition() {
  sample_momentum(z_);
  const Eigen::Index n = static_cast<Eigen::Index>(dim_);

  State z_fwd = z_, z_bck = z_, z_sample = z_, z_propose = z_;
  Eigen::VectorXd p_fwd_fwd = z_.p, p_sharp_fwd_fwd = inv_metric_.cwiseProduct(z_.p);
  Eigen::VectorXd p_fwd_bck = p_fwd_fwd, p_sharp_fwd_bck = p_sharp_fwd_fwd;
  Eigen::VectorXd p_bck_fwd = p_fwd_fwd, p_sharp_bck_fwd = p_sharp_fwd_fwd;
  Eigen::VectorXd p_bck_bck = p_fwd_fwd, p_sharp_bck_bck = p_sharp_fwd_fwd;
  Eigen::VectorXd rho = z_.p;

  double log_sum_weight = 0.0;
  const double h0 = hamiltonian(z_);
  int n_leapfrog = 0;
  double sum_metro_prob = 0.0;
  depth_ = 0;
  divergent_ = false;

  while (depth_ < cfg_.max_treedepth) {
    Eigen::VectorXd rho_fwd = Eigen::VectorXd::Zero(n), rho_bck = Eigen::VectorXd::Zero(n);
    bool valid_subtree = false;
    double log_sum_weight_subtree = -std::numeric_limits<double>::infinity();

    if (uniform_(rng_) > 0.5) {
      rho_bck = rho;
      p_bck_fwd = p_fwd_bck;
      p_sharp_bck_fwd = p_sharp_fwd_bck;
      valid_subtree = build_tree(depth_, z_fwd, z_propose, p_sharp_fwd_bck, p_sharp_fwd_fwd,
                                 rho_fwd, p_fwd_bck, p_fwd_fwd, h0, 1.0, n_leapfrog,
                                 log_sum_weight_subtree, sum_metro_prob);
    } else {
      rho_fwd = rho;
      p_fwd_bck = p_bck_fwd;
      p_sharp_fwd_bck = p_sharp_bck_fwd;
      valid_subtree = build_tree(depth_, z_bck, z_propose, p_sharp_bck_fwd, p_sharp_bck_bck,
                                 rho_bck, p_bck_fwd, p_bck_bck, h0, -1.0, n_leapfrog,
                                 log_sum_weight_subtree, sum_metro_prob);
    }
    if (!valid_subtree) break;
    ++depth_;

    if (log_sum_weight_subtree > log_sum_weight ||
        uniform_(rng_) < std::exp(log_sum_weight_subtree - log_sum_weight)) {
      z_sample = z_propose;
    }
    log_sum_weight = log_sum_exp(log_sum_weight, log_sum_weight_subtree);

    rho = rho_bck + rho_fwd;
    bool persist = no_u_turn(p_sharp_bck_bck, p_sharp_fwd_fwd, rho);
    persist = persist && no_u_turn(p_sharp_bck_bck, p_sharp_fwd_bck, rho_bck + p_fwd_bck);
    persist = persist && no_u_turn(p_sharp_bck_fwd, p_sharp_fwd_fwd, rho_fwd + p_bck_fwd);
    if (!persist) break;
  }

  z_ = std::move(z_sample);
  DrawStats st;
  st.accept_stat = n_leapfrog > 0 ? sum_metro_prob / n_leapfrog : 0.0;
  st.step_size = eps_;
  st.energy = hamiltonian(z_);
  st.log_density = z_.log_density;
  st.tree_depth = depth_;
  st.n_leapfrog = n_leapfrog;
  st.divergent = divergent_;
  return st;
}

ChainResult NutsChain::run(const std::function<void(std::size_t)>& progress) {
  if (!initialize()) {
    throw SamplerError("could not find a finite log density and gradient after 100 random "
                       "initialisations; reduce init_jitter or check the data");
  }
  z_.p = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim_));
  eps_ = 1.0;
  init_step_size();

  DualAveraging step(cfg_.target_accept);
  step.restart(eps_);
  WindowSchedule windows(cfg_.warmup);
  VarianceEstimator estimator(dim_);

  ChainResult out;
  std::size_t iteration = 0;
  for (std::size_t w = 0; w < cfg_.warmup; ++w, ++iteration) {
    const DrawStats st = transition();
    if (st.divergent) ++out.warmup_divergences;
    eps_ = step.learn(st.accept_stat);
    if (windows.in_window()) estimator.add(z_.q);
    if (windows.window_end()) {
      windows.advance_window();
      const double n = static_cast<double>(estimator.count());
      inv_metric_ = (n / (n + 5.0)) * estimator.variance().array() + 1e-3 * (5.0 / (n + 5.0));
      estimator.restart();
      init_step_size();
      step.restart(eps_);
    }
    windows.tick();
    if (progress) progress(iteration);
  }
  if (out.warmup_divergences == cfg_.warmup) {
    throw SamplerError("every warm-up transition diverged; try a higher target_accept, a "
                       "smaller init_jitter, or check the model for extreme data");
  }
  eps_ = step.final_step_size();

  out.draws.resize(static_cast<Eigen::Index>(dim_), static_cast<Eigen::Index>(cfg_.samples));
  out.stats.reserve(cfg_.samples);
  for (std::size_t s = 0; s < cfg_.samples; ++s, ++iteration) {
    out.stats.push_back(transition());
    out.draws.col(static_cast<Eigen::Index>(s)) = z_.q;
    if (progress) progress(iteration);
  }
  out.step_size = eps_;
  out.inv_metric = inv_metric_;
  return out;
}

PosteriorSamples sample(const LogDensityFn& log_density, std::size_t dim, const SamplerConfig& cfg,
                        const std::function<void(std::size_t, std::size_t)>& progress) {
  cfg.validate();
  PosteriorSamples out;
  out.dim = dim;
  out.config = cfg;
  out.chains.resize(cfg.chains);
  std::vector<std::exception_ptr> errors(cfg.chains);

  auto run_one = [&](std::size_t k) {
    try {
      NutsChain chain(log_density, dim, cfg, k);
      std::function<void(std::size_t)> cb;
      if (progress) cb = [&progress, k](std::size_t it) { progress(k, it); };
      out.chains[k] = chain.run(cb);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };

  const std::size_t threads = cfg.threads == 0 ? cfg.chains : std::min(cfg.threads, cfg.chains);
  if (threads <= 1) {
    for (std::size_t k = 0; k < cfg.chains; ++k) run_one(k);
  } else {
    std::mutex m;
    std::size_t next = 0;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        while (true) {
          std::size_t k;
          {
            std::lock_guard lock(m);
            if (next >= cfg.chains) return;
            k = next++;
          }
          run_one(k);
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

PosteriorSamples sample(const PosteriorDensity& density, const SamplerConfig& cfg,
                        const std::function<void(std::size_t, std::size_t)>& progress) {
  LogDensityFn fn = [&density](const Eigen::VectorXd& q, Eigen::VectorXd& grad) {
    return density.log_density_gradient(q, grad);
  };
  return sample(fn, density.dimension(), cfg, progress);
}

}  // namespace submort
