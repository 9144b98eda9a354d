#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "submort/mortdata.hpp"
#include "submort/pcbasis.hpp"

namespace submort {

/// `joint` estimates cross-subpopulation correlation matrices; `independent`
/// fixes them to the identity and carries no correlation parameters.
enum class Variant { joint, independent };

std::string to_string(Variant v);
Variant parse_variant(std::string_view name);

/// What to do with an in-sample cell whose population is zero. Such cells
/// carry no likelihood information; `error` rejects them at model construction.
enum class ZeroPopulationPolicy { skip, error };

struct Hyperparameters {
  double sigma_beta_scale = 1.0;    // half-normal scale of the coefficient spread
  double sigma_mu_meanlog = -1.5;   // log-normal prior of the RW2 innovation scale
  double sigma_mu_sdlog = 0.5;
  double sigma_gamma_scale = 0.25;  // half-normal scale of per-age overdispersion
  double lkj_eta = 1.0;
  double rw2_init_sd = 5.0;         // normal prior sd for the first two years of mu_beta
};

/// Structure of the hierarchical model.
///
/// The log-mortality surface is
///   log lambda[a,s,c,t] = sum_i beta[i,s,c,t] * basis(i, a) + gamma[a,s,c,t]
/// with deaths ~ Poisson(population * lambda). County coefficients are the
/// area mean plus a correlated deviation:
///   beta[i,.,c,t] = mu_beta[i,.,t] + sigma_beta[i,t] * L_beta[i,t] * z_omega[i,.,c,t]
///   gamma[a,.,c,t] = sigma_age[a] * L_gamma[a,t] * z_gamma[a,.,c,t]
/// and mu_beta follows a second-order random walk over years.
struct ModelSpec {
  static constexpr int kSchemaVersion = 1;

  Dims dims;
  Eigen::MatrixXd basis;  // P x A, one basis curve per row
  Variant variant = Variant::joint;
  bool share_correlations_over_time = false;
  Hyperparameters hyper;
  ZeroPopulationPolicy zero_population = ZeroPopulationPolicy::skip;

  std::size_t components() const noexcept { return static_cast<std::size_t>(basis.rows()); }
  /// Number of distinct correlation matrices per component or age.
  std::size_t correlation_periods() const noexcept {
    return share_correlations_over_time ? 1 : dims.years;
  }
  std::size_t period(std::size_t year) const noexcept {
    return share_correlations_over_time ? 0 : year;
  }
  bool has_correlations() const noexcept {
    return variant == Variant::joint && dims.subpops > 1;
  }
  void validate() const;
};

/// Model over the dimensions of `data` using the first `p` rows of `basis`.
ModelSpec make_spec(const MortalityDataset& data, const Eigen::MatrixXd& basis,
                    Variant variant = Variant::joint);
ModelSpec make_spec(const MortalityDataset& data, const PCBasis& basis, std::size_t p,
                    Variant variant = Variant::joint);

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct Block {
  std::size_t offset = 0;
  std::size_t size = 0;
};

/// Placement of every parameter in the flat unconstrained vector.
///
/// Blocks appear in this order, each stored row-major over the listed indices:
///   z_omega[i,s,c,t]       P*S*C*T   standard-normal coefficient innovations
///   mu_beta[i,s,t]         P*S*T
///   log_sigma_beta[i,t]    P*T
///   log_sigma_mu[i]        P
///   chol_beta[i,p,k]       P*Tc*K    (joint only; Tc = 1 when shared over time)
///   z_gamma[a,s,c,t]       A*S*C*T
///   log_sigma_age[a]       A
///   chol_gamma[a,p,k]      A*Tc*K    (joint only)
/// with K = S(S-1)/2 canonical partial correlations per matrix.
class ParameterLayout {
 public:
  explicit ParameterLayout(const ModelSpec& spec);

  std::size_t size() const noexcept { return size_; }

  Block z_omega, mu_beta, log_sigma_beta, log_sigma_mu, chol_beta;
  Block z_gamma, log_sigma_age, chol_gamma;

  std::size_t z_omega_at(std::size_t i, std::size_t s, std::size_t c, std::size_t t) const noexcept {
    return z_omega.offset + ((i * S_ + s) * C_ + c) * T_ + t;
  }
  std::size_t mu_beta_at(std::size_t i, std::size_t s, std::size_t t) const noexcept {
    return mu_beta.offset + (i * S_ + s) * T_ + t;
  }
  std::size_t log_sigma_beta_at(std::size_t i, std::size_t t) const noexcept {
    return log_sigma_beta.offset + i * T_ + t;
  }
  std::size_t chol_beta_at(std::size_t i, std::size_t p) const noexcept {
    return chol_beta.offset + (i * Tc_ + p) * K_;
  }
  std::size_t z_gamma_at(std::size_t a, std::size_t s, std::size_t c, std::size_t t) const noexcept {
    return z_gamma.offset + ((a * S_ + s) * C_ + c) * T_ + t;
  }
  std::size_t chol_gamma_at(std::size_t a, std::size_t p) const noexcept {
    return chol_gamma.offset + (a * Tc_ + p) * K_;
  }

  /// Human-readable name, e.g. "z_omega[0,1,2,3]".
  std::string name(std::size_t k) const;

 private:
  std::size_t P_, A_, S_, C_, T_, Tc_, K_;
  std::size_t size_ = 0;
};

/// Parameters on their natural scale.
struct ConstrainedParams {
  std::vector<double> beta;        // P*S*C*T
  std::vector<double> mu_beta;     // P*S*T
  std::vector<double> sigma_beta;  // P*T
  std::vector<double> sigma_mu;    // P
  std::vector<Eigen::MatrixXd> corr_beta;   // P*Tc correlation matrices, [i*Tc + p]
  std::vector<double> gamma;       // A*S*C*T
  std::vector<double> sigma_age;   // A
  std::vector<Eigen::MatrixXd> corr_gamma;  // A*Tc, [a*Tc + p]
  std::vector<double> log_rates;   // A*S*C*T
};

/// Transforms an unconstrained vector; also returns the log Jacobian of the
/// scale and correlation transforms (LKJ density excluded).
std::pair<ConstrainedParams, double> constrain(const ModelSpec& spec, const Eigen::VectorXd& v);

/// Log-mortality rates from beta and gamma.
std::vector<double> log_rates(const ModelSpec& spec, const ConstrainedParams& params);

/// Unnormalised log posterior in unconstrained space and its gradient.
///
/// The Poisson term drops ln(y!); all other prior densities are normalised
/// except the LKJ constant. Cells that are masked out or have zero population
/// contribute nothing. Evaluation is reentrant.
class PosteriorDensity {
 public:
  PosteriorDensity(ModelSpec spec, const MortalityDataset& data);

  const ModelSpec& spec() const noexcept { return spec_; }
  const ParameterLayout& layout() const noexcept { return layout_; }
  std::size_t dimension() const noexcept { return layout_.size(); }

  double log_density(const Eigen::VectorXd& v) const;
  double log_density_gradient(const Eigen::VectorXd& v, Eigen::VectorXd& grad) const;

 private:
  struct Observation {
    std::size_t cell;
    double deaths;
    double population;
    double deaths_log_pop;  // y * ln P
  };

  template <bool WithGradient>
  double evaluate(const Eigen::VectorXd& v, Eigen::VectorXd* grad) const;

  ModelSpec spec_;
  ParameterLayout layout_;
  std::vector<Observation> obs_;
};

double log_posterior(const ModelSpec& spec, const MortalityDataset& data, const Eigen::VectorXd& v);

struct ValueAndGradient {
  double value;
  Eigen::VectorXd gradient;
};

ValueAndGradient log_posterior_grad(const ModelSpec& spec, const MortalityDataset& data,
                                    const Eigen::VectorXd& v);

}  // namespace submort
