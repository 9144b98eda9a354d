#include "submort/posterior.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <stdexcept>

#include "submort/diagnostics.hpp"

namespace submort {

namespace {

struct KindInfo {
  std::string_view base;
  Quantity::Kind kind;
  std::size_t arity;
};

constexpr KindInfo kKinds[] = {
    {"log_rate", Quantity::Kind::log_rate, 4},     {"mu_beta", Quantity::Kind::mu_beta, 3},
    {"beta", Quantity::Kind::beta, 4},             {"gamma", Quantity::Kind::gamma, 4},
    {"sigma_beta", Quantity::Kind::sigma_beta, 2}, {"sigma_mu", Quantity::Kind::sigma_mu, 1},
    {"sigma_age", Quantity::Kind::sigma_age, 1},   {"corr_beta", Quantity::Kind::corr_beta, 4},
    {"corr_gamma", Quantity::Kind::corr_gamma, 4},
};

std::string format_name(std::string_view base, const std::size_t* idx, std::size_t n) {
  std::string out(base);
  out.push_back('[');
  for (std::size_t k = 0; k < n; ++k) {
    if (k) out.push_back(',');
    out += std::to_string(idx[k]);
  }
  out.push_back(']');
  return out;
}

Quantity make(Quantity::Kind kind, std::string_view base, std::initializer_list<std::size_t> idx) {
  Quantity q;
  q.kind = kind;
  std::copy(idx.begin(), idx.end(), q.index.begin());
  q.name = format_name(base, q.index.data(), idx.size());
  return q;
}

void check_bounds(std::string_view name, const std::array<std::size_t, 4>& idx,
                  std::initializer_list<std::size_t> extents) {
  std::size_t k = 0;
  for (std::size_t e : extents) {
    if (idx[k++] >= e) {
      throw std::invalid_argument("index out of range in quantity '" + std::string(name) + "'");
    }
  }
}

}  // namespace

Quantity parse_quantity(const ModelSpec& spec, std::string_view name) {
  const auto open = name.find('[');
  if (open == std::string_view::npos || name.back() != ']') {
    throw std::invalid_argument("malformed quantity '" + std::string(name) +
                                "' (expected name[i,j,...])");
  }
  const std::string_view base = name.substr(0, open);
  std::vector<std::size_t> idx;
  std::string_view rest = name.substr(open + 1, name.size() - open - 2);
  while (true) {
    const auto comma = rest.find(',');
    const std::string_view tok = rest.substr(0, comma);
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
    if (ec != std::errc() || ptr != tok.data() + tok.size() || tok.empty()) {
      throw std::invalid_argument("malformed index in quantity '" + std::string(name) + "'");
    }
    idx.push_back(v);
    if (comma == std::string_view::npos) break;
    rest.remove_prefix(comma + 1);
  }

  const std::size_t P = spec.components(), A = spec.dims.ages, S = spec.dims.subpops,
                    C = spec.dims.areas, T = spec.dims.years, Tc = spec.correlation_periods();
  for (const auto& info : kKinds) {
    if (info.base != base) continue;
    if (idx.size() != info.arity) {
      throw std::invalid_argument("quantity '" + std::string(name) + "' needs " +
                                  std::to_string(info.arity) + " indices");
    }
    Quantity q;
    q.kind = info.kind;
    std::copy(idx.begin(), idx.end(), q.index.begin());
    q.name = format_name(base, q.index.data(), idx.size());
    switch (info.kind) {
      case Quantity::Kind::log_rate:
      case Quantity::Kind::gamma: check_bounds(name, q.index, {A, S, C, T}); break;
      case Quantity::Kind::beta: check_bounds(name, q.index, {P, S, C, T}); break;
      case Quantity::Kind::mu_beta: check_bounds(name, q.index, {P, S, T}); break;
      case Quantity::Kind::sigma_beta: check_bounds(name, q.index, {P, T}); break;
      case Quantity::Kind::sigma_mu: check_bounds(name, q.index, {P}); break;
      case Quantity::Kind::sigma_age: check_bounds(name, q.index, {A}); break;
      case Quantity::Kind::corr_beta:
      case Quantity::Kind::corr_gamma:
        if (!spec.has_correlations()) {
          throw std::invalid_argument("model has no correlation parameters");
        }
        check_bounds(name, q.index,
                     {info.kind == Quantity::Kind::corr_beta ? P : A, Tc, S, S});
        break;
      case Quantity::Kind::raw: break;
    }
    return q;
  }

  const ParameterLayout layout(spec);
  for (std::size_t k = 0; k < layout.size(); ++k) {
    if (layout.name(k) == name) {
      Quantity q;
      q.kind = Quantity::Kind::raw;
      q.index[0] = k;
      q.name = std::string(name);
      return q;
    }
  }
  throw std::invalid_argument("unknown quantity '" + std::string(name) + "'");
}

double extract(const Quantity& q, const ModelSpec& spec, const ConstrainedParams& params,
               const Eigen::VectorXd& unconstrained) {
  const std::size_t S = spec.dims.subpops, C = spec.dims.areas, T = spec.dims.years,
                    Tc = spec.correlation_periods();
  const auto& i = q.index;
  switch (q.kind) {
    case Quantity::Kind::log_rate: return params.log_rates[spec.dims.index(i[0], i[1], i[2], i[3])];
    case Quantity::Kind::gamma: return params.gamma[spec.dims.index(i[0], i[1], i[2], i[3])];
    case Quantity::Kind::beta: return params.beta[((i[0] * S + i[1]) * C + i[2]) * T + i[3]];
    case Quantity::Kind::mu_beta: return params.mu_beta[(i[0] * S + i[1]) * T + i[2]];
    case Quantity::Kind::sigma_beta: return params.sigma_beta[i[0] * T + i[1]];
    case Quantity::Kind::sigma_mu: return params.sigma_mu[i[0]];
    case Quantity::Kind::sigma_age: return params.sigma_age[i[0]];
    case Quantity::Kind::corr_beta:
      return params.corr_beta[i[0] * Tc + i[1]](static_cast<Eigen::Index>(i[2]),
                                                static_cast<Eigen::Index>(i[3]));
    case Quantity::Kind::corr_gamma:
      return params.corr_gamma[i[0] * Tc + i[1]](static_cast<Eigen::Index>(i[2]),
                                                 static_cast<Eigen::Index>(i[3]));
    case Quantity::Kind::raw: return unconstrained[static_cast<Eigen::Index>(i[0])];
  }
  return 0.0;
}

std::vector<Quantity> log_rate_quantities(const ModelSpec& spec) {
  std::vector<Quantity> out;
  const Dims& d = spec.dims;
  out.reserve(d.cells());
  for (std::size_t a = 0; a < d.ages; ++a)
    for (std::size_t s = 0; s < d.subpops; ++s)
      for (std::size_t c = 0; c < d.areas; ++c)
        for (std::size_t t = 0; t < d.years; ++t)
          out.push_back(make(Quantity::Kind::log_rate, "log_rate", {a, s, c, t}));
  return out;
}

std::vector<Quantity> mu_beta_quantities(const ModelSpec& spec) {
  std::vector<Quantity> out;
  for (std::size_t i = 0; i < spec.components(); ++i)
    for (std::size_t s = 0; s < spec.dims.subpops; ++s)
      for (std::size_t t = 0; t < spec.dims.years; ++t)
        out.push_back(make(Quantity::Kind::mu_beta, "mu_beta", {i, s, t}));
  return out;
}

std::vector<Quantity> sigma_quantities(const ModelSpec& spec) {
  std::vector<Quantity> out;
  for (std::size_t i = 0; i < spec.components(); ++i)
    for (std::size_t t = 0; t < spec.dims.years; ++t)
      out.push_back(make(Quantity::Kind::sigma_beta, "sigma_beta", {i, t}));
  for (std::size_t i = 0; i < spec.components(); ++i)
    out.push_back(make(Quantity::Kind::sigma_mu, "sigma_mu", {i}));
  for (std::size_t a = 0; a < spec.dims.ages; ++a)
    out.push_back(make(Quantity::Kind::sigma_age, "sigma_age", {a}));
  return out;
}

std::vector<Quantity> corr_quantities(const ModelSpec& spec, Quantity::Kind family) {
  if (family != Quantity::Kind::corr_beta && family != Quantity::Kind::corr_gamma) {
    throw std::invalid_argument("not a correlation family");
  }
  std::vector<Quantity> out;
  if (!spec.has_correlations()) return out;
  const bool is_beta = family == Quantity::Kind::corr_beta;
  const std::size_t outer = is_beta ? spec.components() : spec.dims.ages;
  const std::string_view base = is_beta ? "corr_beta" : "corr_gamma";
  for (std::size_t i = 0; i < outer; ++i)
    for (std::size_t p = 0; p < spec.correlation_periods(); ++p)
      for (std::size_t r = 1; r < spec.dims.subpops; ++r)
        for (std::size_t k = 0; k < r; ++k) out.push_back(make(family, base, {i, p, r, k}));
  return out;
}

std::vector<std::vector<double>> quantity_draws(const PosteriorSamples& samples,
                                                const ModelSpec& spec,
                                                const std::vector<Quantity>& quantities) {
  if (samples.dim != ParameterLayout(spec).size()) {
    throw std::invalid_argument("samples do not match the model dimension");
  }
  std::vector<std::vector<double>> out(quantities.size());
  for (auto& v : out) v.reserve(samples.total_draws());
  for (const auto& chain : samples.chains) {
    for (Eigen::Index d = 0; d < chain.draws.cols(); ++d) {
      const Eigen::VectorXd v = chain.draws.col(d);
      const auto params = constrain(spec, v).first;
      for (std::size_t q = 0; q < quantities.size(); ++q) {
        out[q].push_back(extract(quantities[q], spec, params, v));
      }
    }
  }
  return out;
}

std::vector<QuantileRow> summarize(const PosteriorSamples& samples, const ModelSpec& spec,
                                   const std::vector<Quantity>& quantities,
                                   const std::vector<double>& probs, std::size_t chunk) {
  if (samples.total_draws() == 0) throw std::invalid_argument("no posterior draws");
  if (chunk == 0) chunk = 1;
  std::vector<QuantileRow> rows;
  rows.reserve(quantities.size());
  for (std::size_t start = 0; start < quantities.size(); start += chunk) {
    const std::size_t end = std::min(quantities.size(), start + chunk);
    const std::vector<Quantity> part(quantities.begin() + static_cast<std::ptrdiff_t>(start),
                                     quantities.begin() + static_cast<std::ptrdiff_t>(end));
    auto draws = quantity_draws(samples, spec, part);
    for (std::size_t q = 0; q < part.size(); ++q) {
      auto& v = draws[q];
      QuantileRow row;
      row.name = part[q].name;
      row.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      std::sort(v.begin(), v.end());
      row.median = quantile_sorted(v, 0.5);
      for (double p : probs) row.quantiles.push_back(quantile_sorted(v, p));
      rows.push_back(std::move(row));
      std::vector<double>().swap(v);
    }
  }
  return rows;
}

std::vector<QuantileRow> summarize(const PosteriorSamples& samples, const ModelSpec& spec,
                                   std::string_view quantity, const std::vector<double>& probs) {
  return summarize(samples, spec, std::vector<Quantity>{parse_quantity(spec, quantity)}, probs);
}

}  // namespace submort
