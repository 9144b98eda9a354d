#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "submort/hiermodel.hpp"
#include "submort/nuts.hpp"

namespace submort {

/// A named derived quantity of the posterior. Names use 0-based indices:
///   log_rate[a,s,c,t]  mu_beta[i,s,t]  beta[i,s,c,t]  gamma[a,s,c,t]
///   sigma_beta[i,t]    sigma_mu[i]     sigma_age[a]
///   corr_beta[i,t,r,k] corr_gamma[a,t,r,k]  (t is the correlation period)
/// Any raw parameter name from ParameterLayout::name is accepted as well.
struct Quantity {
  enum class Kind {
    log_rate, mu_beta, beta, gamma, sigma_beta, sigma_mu, sigma_age, corr_beta, corr_gamma, raw
  };
  Kind kind = Kind::raw;
  std::array<std::size_t, 4> index{};
  std::string name;
};

/// Throws std::invalid_argument for unknown names or out-of-range indices.
Quantity parse_quantity(const ModelSpec& spec, std::string_view name);

/// Value of `q` in one constrained draw (raw quantities read `unconstrained`).
double extract(const Quantity& q, const ModelSpec& spec, const ConstrainedParams& params,
               const Eigen::VectorXd& unconstrained);

/// Quantities in the order written by the summary tables.
std::vector<Quantity> log_rate_quantities(const ModelSpec& spec);
std::vector<Quantity> mu_beta_quantities(const ModelSpec& spec);
std::vector<Quantity> sigma_quantities(const ModelSpec& spec);
/// Strict lower-triangle entries for every correlation matrix of the family.
std::vector<Quantity> corr_quantities(const ModelSpec& spec, Quantity::Kind family);

/// Pooled draws of several quantities: values[q][draw], draws ordered chain by chain.
std::vector<std::vector<double>> quantity_draws(const PosteriorSamples& samples,
                                                const ModelSpec& spec,
                                                const std::vector<Quantity>& quantities);

struct QuantileRow {
  std::string name;
  double mean = 0.0;
  double median = 0.0;
  std::vector<double> quantiles;  // at the requested probabilities
};

/// Empirical quantiles of pooled draws. Quantities are processed in chunks of
/// `chunk` so memory stays bounded for large models.
std::vector<QuantileRow> summarize(const PosteriorSamples& samples, const ModelSpec& spec,
                                   const std::vector<Quantity>& quantities,
                                   const std::vector<double>& probs, std::size_t chunk = 2048);

std::vector<QuantileRow> summarize(const PosteriorSamples& samples, const ModelSpec& spec,
                                   std::string_view quantity, const std::vector<double>& probs);

}  // namespace submort
