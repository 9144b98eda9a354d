#include "submort/hiermodel.hpp"

#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>

#include "submort/corr_cholesky.hpp"

namespace submort {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2 pi)

std::string index_name(const char* base, std::initializer_list<std::size_t> idx) {
  std::string out = base;
  out.push_back('[');
  bool first = true;
  for (auto i : idx) {
    if (!first) out.push_back(',');
    out += std::to_string(i);
    first = false;
  }
  out.push_back(']');
  return out;
}

// log half-normal(sigma | scale) + log Jacobian of sigma = exp(u), and its u-derivative.
inline double half_normal_exp(double u, double scale, double& du) {
  const double sigma = std::exp(u);
  const double r = sigma / scale;
  du = 1.0 - r * r;
  return std::numbers::ln2 - std::log(scale) - kHalfLog2Pi - 0.5 * r * r + u;
}

// log log-normal(sigma | m, s) + log Jacobian of sigma = exp(u), and its u-derivative.
inline double log_normal_exp(double u, double m, double s, double& du) {
  const double r = (u - m) / s;
  du = -r / s;
  return -std::log(s) - kHalfLog2Pi - 0.5 * r * r;
}

void require_dims_match(const ModelSpec& spec, const MortalityDataset& data) {
  if (!(spec.dims == data.dims())) {
    throw std::invalid_argument("model dimensions do not match the dataset");
  }
}

}  // namespace

std::string to_string(Variant v) { return v == Variant::joint ? "joint" : "independent"; }

Variant parse_variant(std::string_view name) {
  if (name == "joint") return Variant::joint;
  if (name == "independent") return Variant::independent;
  throw std::invalid_argument("unknown variant '" + std::string(name) +
                              "' (expected joint or independent)");
}

void ModelSpec::validate() const {
  if (dims.cells() == 0) throw std::invalid_argument("model has an empty dimension");
  if (basis.rows() < 1) throw std::invalid_argument("model needs at least one basis curve");
  if (basis.cols() != static_cast<Eigen::Index>(dims.ages)) {
    throw std::invalid_argument("basis curves do not match the number of age groups");
  }
  if (!basis.allFinite()) throw std::invalid_argument("basis has non-finite entries");
  const auto& h = hyper;
  if (!(h.sigma_beta_scale > 0 && h.sigma_mu_sdlog > 0 && h.sigma_gamma_scale > 0 &&
        h.lkj_eta > 0 && h.rw2_init_sd > 0 && std::isfinite(h.sigma_mu_meanlog))) {
    throw std::invalid_argument("hyperparameter scales must be positive");
  }
}

ModelSpec make_spec(const MortalityDataset& data, const Eigen::MatrixXd& basis, Variant variant) {
  ModelSpec spec;
  spec.dims = data.dims();
  spec.basis = basis;
  spec.variant = variant;
  spec.validate();
  return spec;
}

ModelSpec make_spec(const MortalityDataset& data, const PCBasis& basis, std::size_t p,
                    Variant variant) {
  if (p < 1 || p > basis.size()) {
    throw std::invalid_argument("requested more components than the basis holds");
  }
  if (!(basis.age_grid() == data.age_grid())) {
    throw std::invalid_argument("basis age grid differs from the dataset age grid");
  }
  return make_spec(data, Eigen::MatrixXd(basis.components().topRows(static_cast<Eigen::Index>(p))),
                   variant);
}

nlohmann::json to_json(const ModelSpec& spec) {
  nlohmann::json basis = nlohmann::json::array();
  for (Eigen::Index i = 0; i < spec.basis.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(spec.basis.cols()));
    for (Eigen::Index a = 0; a < spec.basis.cols(); ++a) row[static_cast<std::size_t>(a)] = spec.basis(i, a);
    basis.push_back(row);
  }
  return {
      {"schema_version", ModelSpec::kSchemaVersion},
      {"dims",
       {{"ages", spec.dims.ages},
        {"subpops", spec.dims.subpops},
        {"areas", spec.dims.areas},
        {"years", spec.dims.years}}},
      {"components", spec.components()},
      {"variant", to_string(spec.variant)},
      {"share_correlations_over_time", spec.share_correlations_over_time},
      {"zero_population", spec.zero_population == ZeroPopulationPolicy::skip ? "skip" : "error"},
      {"hyper",
       {{"sigma_beta_scale", spec.hyper.sigma_beta_scale},
        {"sigma_mu_meanlog", spec.hyper.sigma_mu_meanlog},
        {"sigma_mu_sdlog", spec.hyper.sigma_mu_sdlog},
        {"sigma_gamma_scale", spec.hyper.sigma_gamma_scale},
        {"lkj_eta", spec.hyper.lkj_eta},
        {"rw2_init_sd", spec.hyper.rw2_init_sd}}},
      {"basis", basis},
  };
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != ModelSpec::kSchemaVersion) {
    throw std::runtime_error("unsupported model spec schema version");
  }
  ModelSpec spec;
  const auto& d = j.at("dims");
  spec.dims = Dims{d.at("ages").get<std::size_t>(), d.at("subpops").get<std::size_t>(),
                   d.at("areas").get<std::size_t>(), d.at("years").get<std::size_t>()};
  spec.variant = parse_variant(j.at("variant").get<std::string>());
  spec.share_correlations_over_time = j.at("share_correlations_over_time").get<bool>();
  const auto zp = j.at("zero_population").get<std::string>();
  if (zp == "skip") {
    spec.zero_population = ZeroPopulationPolicy::skip;
  } else if (zp == "error") {
    spec.zero_population = ZeroPopulationPolicy::error;
  } else {
    throw std::invalid_argument("unknown zero_population policy '" + zp + "'");
  }
  const auto& h = j.at("hyper");
  spec.hyper.sigma_beta_scale = h.at("sigma_beta_scale").get<double>();
  spec.hyper.sigma_mu_meanlog = h.at("sigma_mu_meanlog").get<double>();
  spec.hyper.sigma_mu_sdlog = h.at("sigma_mu_sdlog").get<double>();
  spec.hyper.sigma_gamma_scale = h.at("sigma_gamma_scale").get<double>();
  spec.hyper.lkj_eta = h.at("lkj_eta").get<double>();
  spec.hyper.rw2_init_sd = h.at("rw2_init_sd").get<double>();
  const auto& rows = j.at("basis");
  const auto p = rows.size();
  spec.basis.resize(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(spec.dims.ages));
  for (std::size_t i = 0; i < p; ++i) {
    auto row = rows[i].get<std::vector<double>>();
    if (row.size() != spec.dims.ages) throw std::invalid_argument("basis row has wrong length");
    for (std::size_t a = 0; a < row.size(); ++a) {
      spec.basis(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a)) = row[a];
    }
  }
  spec.validate();
  return spec;
}

ParameterLayout::ParameterLayout(const ModelSpec& spec)
    : P_(spec.components()),
      A_(spec.dims.ages),
      S_(spec.dims.subpops),
      C_(spec.dims.areas),
      T_(spec.dims.years),
      Tc_(spec.correlation_periods()),
      K_(spec.variant == Variant::joint ? corr::free_count(spec.dims.subpops) : 0) {
  std::size_t next = 0;
  auto take = [&](std::size_t n) {
    Block b{next, n};
    next += n;
    return b;
  };
  z_omega = take(P_ * S_ * C_ * T_);
  mu_beta = take(P_ * S_ * T_);
  log_sigma_beta = take(P_ * T_);
  log_sigma_mu = take(P_);
  chol_beta = take(P_ * Tc_ * K_);
  z_gamma = take(A_ * S_ * C_ * T_);
  log_sigma_age = take(A_);
  chol_gamma = take(A_ * Tc_ * K_);
  size_ = next;
}

std::string ParameterLayout::name(std::size_t k) const {
  auto in = [k](const Block& b) { return k >= b.offset && k < b.offset + b.size; };
  if (in(z_omega)) {
    std::size_t r = k - z_omega.offset;
    const std::size_t t = r % T_; r /= T_;
    const std::size_t c = r % C_; r /= C_;
    const std::size_t s = r % S_;
    return index_name("z_omega", {r / S_, s, c, t});
  }
  if (in(mu_beta)) {
    std::size_t r = k - mu_beta.offset;
    const std::size_t t = r % T_; r /= T_;
    return index_name("mu_beta", {r / S_, r % S_, t});
  }
  if (in(log_sigma_beta)) {
    const std::size_t r = k - log_sigma_beta.offset;
    return index_name("log_sigma_beta", {r / T_, r % T_});
  }
  if (in(log_sigma_mu)) return index_name("log_sigma_mu", {k - log_sigma_mu.offset});
  if (in(chol_beta)) {
    std::size_t r = k - chol_beta.offset;
    const std::size_t e = r % K_; r /= K_;
    return index_name("chol_beta", {r / Tc_, r % Tc_, e});
  }
  if (in(z_gamma)) {
    std::size_t r = k - z_gamma.offset;
    const std::size_t t = r % T_; r /= T_;
    const std::size_t c = r % C_; r /= C_;
    const std::size_t s = r % S_;
    return index_name("z_gamma", {r / S_, s, c, t});
  }
  if (in(log_sigma_age)) return index_name("log_sigma_age", {k - log_sigma_age.offset});
  if (in(chol_gamma)) {
    std::size_t r = k - chol_gamma.offset;
    const std::size_t e = r % K_; r /= K_;
    return index_name("chol_gamma", {r / Tc_, r % Tc_, e});
  }
  throw std::out_of_range("parameter index out of range");
}

std::pair<ConstrainedParams, double> constrain(const ModelSpec& spec, const Eigen::VectorXd& v) {
  const ParameterLayout lay(spec);
  if (static_cast<std::size_t>(v.size()) != lay.size()) {
    throw std::invalid_argument("parameter vector length does not match the model");
  }
  const std::size_t P = spec.components(), A = spec.dims.ages, S = spec.dims.subpops,
                    C = spec.dims.areas, T = spec.dims.years, Tc = spec.correlation_periods();
  const std::size_t K = corr::free_count(S);
  const double* x = v.data();
  const bool correlated = spec.variant == Variant::joint;

  ConstrainedParams out;
  double log_jac = 0.0;

  std::vector<Eigen::MatrixXd> lb(P * Tc, Eigen::MatrixXd::Identity(S, S));
  std::vector<Eigen::MatrixXd> lg(A * Tc, Eigen::MatrixXd::Identity(S, S));
  if (correlated) {
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t p = 0; p < Tc; ++p) {
        std::span<const double> y(x + lay.chol_beta_at(i, p), K);
        lb[i * Tc + p] = corr::constrain(y, S);
        log_jac += corr::log_jacobian(y, S);
      }
    }
    for (std::size_t a = 0; a < A; ++a) {
      for (std::size_t p = 0; p < Tc; ++p) {
        std::span<const double> y(x + lay.chol_gamma_at(a, p), K);
        lg[a * Tc + p] = corr::constrain(y, S);
        log_jac += corr::log_jacobian(y, S);
      }
    }
  }
  for (const auto& l : lb) out.corr_beta.push_back(corr::correlation(l));
  for (const auto& l : lg) out.corr_gamma.push_back(corr::correlation(l));

  out.sigma_beta.resize(P * T);
  for (std::size_t k = 0; k < P * T; ++k) {
    const double u = x[lay.log_sigma_beta.offset + k];
    out.sigma_beta[k] = std::exp(u);
    log_jac += u;
  }
  out.sigma_mu.resize(P);
  for (std::size_t i = 0; i < P; ++i) {
    const double u = x[lay.log_sigma_mu.offset + i];
    out.sigma_mu[i] = std::exp(u);
    log_jac += u;
  }
  out.sigma_age.resize(A);
  for (std::size_t a = 0; a < A; ++a) {
    const double u = x[lay.log_sigma_age.offset + a];
    out.sigma_age[a] = std::exp(u);
    log_jac += u;
  }
  out.mu_beta.assign(x + lay.mu_beta.offset, x + lay.mu_beta.offset + lay.mu_beta.size);

  out.beta.resize(P * S * C * T);
  for (std::size_t i = 0; i < P; ++i) {
    for (std::size_t t = 0; t < T; ++t) {
      const Eigen::MatrixXd& l = lb[i * Tc + spec.period(t)];
      const double sigma = out.sigma_beta[i * T + t];
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t s = 0; s < S; ++s) {
          double u = 0.0;
          for (std::size_t r = 0; r <= s; ++r) {
            u += l(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(r)) * x[lay.z_omega_at(i, r, c, t)];
          }
          out.beta[((i * S + s) * C + c) * T + t] = out.mu_beta[(i * S + s) * T + t] + sigma * u;
        }
      }
    }
  }
  out.gamma.resize(A * S * C * T);
  for (std::size_t a = 0; a < A; ++a) {
    const double sigma = out.sigma_age[a];
    for (std::size_t t = 0; t < T; ++t) {
      const Eigen::MatrixXd& l = lg[a * Tc + spec.period(t)];
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t s = 0; s < S; ++s) {
          double u = 0.0;
          for (std::size_t r = 0; r <= s; ++r) {
            u += l(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(r)) * x[lay.z_gamma_at(a, r, c, t)];
          }
          out.gamma[((a * S + s) * C + c) * T + t] = sigma * u;
        }
      }
    }
  }
  out.log_rates = log_rates(spec, out);
  return {std::move(out), log_jac};
}

std::vector<double> log_rates(const ModelSpec& spec, const ConstrainedParams& params) {
  const std::size_t P = spec.components(), A = spec.dims.ages, S = spec.dims.subpops,
                    C = spec.dims.areas, T = spec.dims.years;
  std::vector<double> out(A * S * C * T);
  for (std::size_t a = 0; a < A; ++a) {
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t t = 0; t < T; ++t) {
          double acc = 0.0;
          for (std::size_t i = 0; i < P; ++i) {
            acc += params.beta[((i * S + s) * C + c) * T + t] *
                   spec.basis(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a));
          }
          const std::size_t cell = ((a * S + s) * C + c) * T + t;
          out[cell] = acc + params.gamma[cell];
        }
      }
    }
  }
  return out;
}

PosteriorDensity::PosteriorDensity(ModelSpec spec, const MortalityDataset& data)
    : spec_(std::move(spec)), layout_(spec_) {
  spec_.validate();
  require_dims_match(spec_, data);
  auto deaths = data.deaths();
  auto pop = data.population();
  auto mask = data.mask();
  for (std::size_t k = 0; k < spec_.dims.cells(); ++k) {
    if (!mask[k]) continue;
    if (pop[k] <= 0.0) {
      if (spec_.zero_population == ZeroPopulationPolicy::error) {
        throw IntegrityError("in-sample cell with zero population at flat index " +
                             std::to_string(k));
      }
      continue;
    }
    const double y = static_cast<double>(deaths[k]);
    obs_.push_back(Observation{k, y, pop[k], y * std::log(pop[k])});
  }
}

double PosteriorDensity::log_density(const Eigen::VectorXd& v) const {
  return evaluate<false>(v, nullptr);
}

double PosteriorDensity::log_density_gradient(const Eigen::VectorXd& v,
                                              Eigen::VectorXd& grad) const {
  return evaluate<true>(v, &grad);
}

template <bool WithGradient>
double PosteriorDensity::evaluate(const Eigen::VectorXd& v, Eigen::VectorXd* grad_out) const {
  const ParameterLayout& lay = layout_;
  if (static_cast<std::size_t>(v.size()) != lay.size()) {
    throw std::invalid_argument("parameter vector length does not match the model");
  }
  const std::size_t P = spec_.components(), A = spec_.dims.ages, S = spec_.dims.subpops,
                    C = spec_.dims.areas, T = spec_.dims.years, Tc = spec_.correlation_periods();
  const std::size_t K = corr::free_count(S);
  const Hyperparameters& h = spec_.hyper;
  const bool correlated = spec_.variant == Variant::joint && K > 0;
  const double* x = v.data();
  double* g = nullptr;
  if constexpr (WithGradient) {
    grad_out->setZero(static_cast<Eigen::Index>(lay.size()));
    g = grad_out->data();
  }
  double lp = 0.0;
  double du = 0.0;

  // Correlation factors with their LKJ prior and transform Jacobian.
  std::vector<Eigen::MatrixXd> lb(P * Tc), lg(A * Tc);
  for (std::size_t i = 0; i < P; ++i) {
    for (std::size_t p = 0; p < Tc; ++p) {
      if (correlated) {
        std::span<const double> y(x + lay.chol_beta_at(i, p), K);
        lb[i * Tc + p] = corr::constrain(y, S);
        lp += corr::log_density(y, S, h.lkj_eta);
        if constexpr (WithGradient) {
          corr::log_density_gradient(y, S, h.lkj_eta, std::span<double>(g + lay.chol_beta_at(i, p), K));
        }
      } else {
        lb[i * Tc + p] = Eigen::MatrixXd::Identity(S, S);
      }
    }
  }
  for (std::size_t a = 0; a < A; ++a) {
    for (std::size_t p = 0; p < Tc; ++p) {
      if (correlated) {
        std::span<const double> y(x + lay.chol_gamma_at(a, p), K);
        lg[a * Tc + p] = corr::constrain(y, S);
        lp += corr::log_density(y, S, h.lkj_eta);
        if constexpr (WithGradient) {
          corr::log_density_gradient(y, S, h.lkj_eta, std::span<double>(g + lay.chol_gamma_at(a, p), K));
        }
      } else {
        lg[a * Tc + p] = Eigen::MatrixXd::Identity(S, S);
      }
    }
  }

  // Scales.
  std::vector<double> sigma_beta(P * T), sigma_mu(P), sigma_age(A);
  for (std::size_t k = 0; k < P * T; ++k) {
    const double u = x[lay.log_sigma_beta.offset + k];
    sigma_beta[k] = std::exp(u);
    lp += half_normal_exp(u, h.sigma_beta_scale, du);
    if constexpr (WithGradient) g[lay.log_sigma_beta.offset + k] += du;
  }
  for (std::size_t i = 0; i < P; ++i) {
    const double u = x[lay.log_sigma_mu.offset + i];
    sigma_mu[i] = std::exp(u);
    lp += log_normal_exp(u, h.sigma_mu_meanlog, h.sigma_mu_sdlog, du);
    if constexpr (WithGradient) g[lay.log_sigma_mu.offset + i] += du;
  }
  for (std::size_t a = 0; a < A; ++a) {
    const double u = x[lay.log_sigma_age.offset + a];
    sigma_age[a] = std::exp(u);
    lp += half_normal_exp(u, h.sigma_gamma_scale, du);
    if constexpr (WithGradient) g[lay.log_sigma_age.offset + a] += du;
  }

  // Standard-normal innovations.
  for (const Block* b : {&lay.z_omega, &lay.z_gamma}) {
    double ss = 0.0;
    for (std::size_t k = b->offset; k < b->offset + b->size; ++k) {
      ss += x[k] * x[k];
      if constexpr (WithGradient) g[k] -= x[k];
    }
    lp += -0.5 * ss - kHalfLog2Pi * static_cast<double>(b->size);
  }

  // Second-order random walk on the area means.
  const double init_var = h.rw2_init_sd * h.rw2_init_sd;
  for (std::size_t i = 0; i < P; ++i) {
    const double smu = sigma_mu[i];
    const double inv_var = 1.0 / (smu * smu);
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t base = lay.mu_beta_at(i, s, 0);
      for (std::size_t t = 0; t < T; ++t) {
        const double m = x[base + t];
        if (t < 2) {
          lp += -0.5 * m * m / init_var - std::log(h.rw2_init_sd) - kHalfLog2Pi;
          if constexpr (WithGradient) g[base + t] -= m / init_var;
        } else {
          const double r = m - 2.0 * x[base + t - 1] + x[base + t - 2];
          lp += -0.5 * r * r * inv_var - std::log(smu) - kHalfLog2Pi;
          if constexpr (WithGradient) {
            const double dr = -r * inv_var;
            g[base + t] += dr;
            g[base + t - 1] -= 2.0 * dr;
            g[base + t - 2] += dr;
            g[lay.log_sigma_mu.offset + i] += r * r * inv_var - 1.0;
          }
        }
      }
    }
  }

  // Coefficients and overdispersion.
  std::vector<double> beta(P * S * C * T);
  for (std::size_t i = 0; i < P; ++i) {
    for (std::size_t t = 0; t < T; ++t) {
      const Eigen::MatrixXd& l = lb[i * Tc + spec_.period(t)];
      const double sigma = sigma_beta[i * T + t];
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t s = 0; s < S; ++s) {
          double u = 0.0;
          for (std::size_t r = 0; r <= s; ++r) {
            u += l(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(r)) * x[lay.z_omega_at(i, r, c, t)];
          }
          beta[((i * S + s) * C + c) * T + t] = x[lay.mu_beta_at(i, s, t)] + sigma * u;
        }
      }
    }
  }
  const std::size_t n_cells = A * S * C * T;
  std::vector<double> eta(n_cells);
  for (std::size_t a = 0; a < A; ++a) {
    const double sigma = sigma_age[a];
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t t = 0; t < T; ++t) {
          const Eigen::MatrixXd& l = lg[a * Tc + spec_.period(t)];
          double u = 0.0;
          for (std::size_t r = 0; r <= s; ++r) {
            u += l(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(r)) * x[lay.z_gamma_at(a, r, c, t)];
          }
          double acc = 0.0;
          for (std::size_t i = 0; i < P; ++i) {
            acc += beta[((i * S + s) * C + c) * T + t] *
                   spec_.basis(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a));
          }
          eta[((a * S + s) * C + c) * T + t] = acc + sigma * u;
        }
      }
    }
  }

  // Poisson likelihood without ln(y!).
  std::vector<double> g_eta;
  if constexpr (WithGradient) g_eta.assign(n_cells, 0.0);
  for (const auto& o : obs_) {
    const double e = eta[o.cell];
    const double mean = o.population * std::exp(e);
    lp += o.deaths * e + o.deaths_log_pop - mean;
    if constexpr (WithGradient) g_eta[o.cell] = o.deaths - mean;
  }

  if constexpr (!WithGradient) {
    return lp;
  } else {
    // gamma = sigma_age[a] * L_gamma * z_gamma
    std::vector<Eigen::MatrixXd> adj_lg(correlated ? A * Tc : 0, Eigen::MatrixXd::Zero(S, S));
    for (std::size_t a = 0; a < A; ++a) {
      const double sigma = sigma_age[a];
      double g_sigma = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t p = spec_.period(t);
        const Eigen::MatrixXd& l = lg[a * Tc + p];
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t s = 0; s < S; ++s) {
            const double ge = g_eta[((a * S + s) * C + c) * T + t];
            if (ge == 0.0) continue;
            for (std::size_t r = 0; r <= s; ++r) {
              const double lsr = l(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(r));
              const double z = x[lay.z_gamma_at(a, r, c, t)];
              g_sigma += ge * lsr * z;
              g[lay.z_gamma_at(a, r, c, t)] += sigma * lsr * ge;
              if (correlated) {
                adj_lg[a * Tc + p](static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(r)) += sigma * ge * z;
              }
            }
          }
        }
      }
      g[lay.log_sigma_age.offset + a] += g_sigma * sigma;
    }

    // beta = mu_beta + sigma_beta * L_beta * z_omega
    std::vector<double> g_beta(P * S * C * T, 0.0);
    for (std::size_t a = 0; a < A; ++a) {
      for (std::size_t s = 0; s < S; ++s) {
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t t = 0; t < T; ++t) {
            const double ge = g_eta[((a * S + s) * C + c) * T + t];
            if (ge == 0.0) continue;
            for (std::size_t i = 0; i < P; ++i) {
              g_beta[((i * S + s) * C + c) * T + t] +=
                  ge * spec_.basis(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a));
            }
          }
        }
      }
    }
    std::vector<Eigen::MatrixXd> adj_lb(correlated ? P * Tc : 0, Eigen::MatrixXd::Zero(S, S));
    for (std::size_t i = 0; i < P; ++i) {
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t p = spec_.period(t);
        const Eigen::MatrixXd& l = lb[i * Tc + p];
        const double sigma = sigma_beta[i * T + t];
        double g_sigma = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t s = 0; s < S; ++s) {
            const double gb = g_beta[((i * S + s) * C + c) * T + t];
            if (gb == 0.0) continue;
            g[lay.mu_beta_at(i, s, t)] += gb;
            for (std::size_t r = 0; r <= s; ++r) {
              const double lsr = l(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(r));
              const double z = x[lay.z_omega_at(i, r, c, t)];
              g_sigma += gb * lsr * z;
              g[lay.z_omega_at(i, r, c, t)] += sigma * lsr * gb;
              if (correlated) {
                adj_lb[i * Tc + p](static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(r)) += sigma * gb * z;
              }
            }
          }
        }
        g[lay.log_sigma_beta_at(i, t)] += g_sigma * sigma;
      }
    }

    if (correlated) {
      for (std::size_t i = 0; i < P; ++i) {
        for (std::size_t p = 0; p < Tc; ++p) {
          const std::size_t off = lay.chol_beta_at(i, p);
          corr::backprop(std::span<const double>(x + off, K), lb[i * Tc + p], adj_lb[i * Tc + p],
                         std::span<double>(g + off, K));
        }
      }
      for (std::size_t a = 0; a < A; ++a) {
        for (std::size_t p = 0; p < Tc; ++p) {
          const std::size_t off = lay.chol_gamma_at(a, p);
          corr::backprop(std::span<const double>(x + off, K), lg[a * Tc + p], adj_lg[a * Tc + p],
                         std::span<double>(g + off, K));
        }
      }
    }
    return lp;
  }
}

template double PosteriorDensity::evaluate<false>(const Eigen::VectorXd&, Eigen::VectorXd*) const;
template double PosteriorDensity::evaluate<true>(const Eigen::VectorXd&, Eigen::VectorXd*) const;

double log_posterior(const ModelSpec& spec, const MortalityDataset& data, const Eigen::VectorXd& v) {
  return PosteriorDensity(spec, data).log_density(v);
}

ValueAndGradient log_posterior_grad(const ModelSpec& spec, const MortalityDataset& data,
                                    const Eigen::VectorXd& v) {
  PosteriorDensity density(spec, data);
  ValueAndGradient out{0.0, Eigen::VectorXd()};
  out.value = density.log_density_gradient(v, out.gradient);
  return out;
}

}  // namespace submort
