#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "submort/corr_cholesky.hpp"
#include "submort/hiermodel.hpp"

using namespace submort;
using namespace submort::testing;

namespace {

Eigen::VectorXd random_point(std::size_t dim, std::mt19937_64& rng, double sd = 0.5) {
  std::normal_distribution<double> n(0.0, sd);
  Eigen::VectorXd v(static_cast<Eigen::Index>(dim));
  for (auto& x : v) x = n(rng);
  return v;
}

}  // namespace

TEST_CASE("layout length matches the closed-form count") {
  const auto data = small_dataset(1);
  const std::size_t P = 2, A = 5, S = 2, C = 3, T = 4, K = 1;
  auto joint = make_spec(data, small_basis(), Variant::joint);
  CHECK(ParameterLayout(joint).size() ==
        P * S * C * T + P * S * T + P * T + P + P * T * K + A * S * C * T + A + A * T * K);
  joint.share_correlations_over_time = true;
  CHECK(ParameterLayout(joint).size() ==
        P * S * C * T + P * S * T + P * T + P + P * K + A * S * C * T + A + A * K);
  const auto indep = make_spec(data, small_basis(), Variant::independent);
  CHECK(ParameterLayout(indep).size() == P * S * C * T + P * S * T + P * T + P + A * S * C * T + A);
  CHECK(ParameterLayout(indep).chol_beta.size == 0);
  CHECK(ParameterLayout(joint).name(0) == "z_omega[0,0,0,0]");
}

TEST_CASE("zero vector constrains to unit scales and identity correlations") {
  const auto data = small_dataset(1);
  const auto spec = make_spec(data, small_basis());
  const Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ParameterLayout(spec).size()));
  const auto [p, log_jac] = constrain(spec, v);
  for (double s : p.sigma_beta) CHECK(s == 1.0);
  for (double s : p.sigma_mu) CHECK(s == 1.0);
  for (double s : p.sigma_age) CHECK(s == 1.0);
  for (const auto& r : p.corr_beta) CHECK(r == Eigen::MatrixXd::Identity(2, 2));
  for (const auto& r : p.corr_gamma) CHECK(r == Eigen::MatrixXd::Identity(2, 2));
  for (double b : p.beta) CHECK(b == 0.0);
  for (double g : p.gamma) CHECK(g == 0.0);
  for (double l : p.log_rates) CHECK(l == 0.0);
  CHECK(log_jac == 0.0);
}

TEST_CASE("one correlation entry maps through tanh") {
  const auto data = small_dataset(1);
  const auto spec = make_spec(data, small_basis());
  const ParameterLayout layout(spec);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout.size()));
  v[static_cast<Eigen::Index>(layout.chol_beta_at(1, 2))] = 0.5;
  const auto p = constrain(spec, v).first;
  CHECK(p.corr_beta[1 * 4 + 2](1, 0) == doctest::Approx(0.46211715726000974).epsilon(1e-14));
  CHECK(p.corr_beta[0](1, 0) == 0.0);
}

TEST_CASE("log rates equal the basis combination plus overdispersion") {
  const auto data = small_dataset(1);
  const auto spec = make_spec(data, small_basis());
  const Dims& d = spec.dims;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n01;
  ConstrainedParams p;
  p.beta.resize(2 * d.subpops * d.areas * d.years);
  p.gamma.resize(d.cells());
  for (auto& b : p.beta) b = n01(rng);
  for (auto& g : p.gamma) g = n01(rng);
  const auto rates = log_rates(spec, p);
  for (std::size_t a = 0; a < d.ages; ++a)
    for (std::size_t s = 0; s < d.subpops; ++s)
      for (std::size_t c = 0; c < d.areas; ++c)
        for (std::size_t t = 0; t < d.years; ++t) {
          Eigen::Vector2d beta;
          for (std::size_t i = 0; i < 2; ++i) {
            beta[static_cast<Eigen::Index>(i)] =
                p.beta[((i * d.subpops + s) * d.areas + c) * d.years + t];
          }
          const double expect = spec.basis.col(static_cast<Eigen::Index>(a)).dot(beta) +
                                p.gamma[d.index(a, s, c, t)];
          CHECK(rates[d.index(a, s, c, t)] == doctest::Approx(expect).epsilon(1e-12));
        }

  // beta = e1, gamma = 0 reproduces the first basis curve.
  std::fill(p.beta.begin(), p.beta.end(), 0.0);
  std::fill(p.gamma.begin(), p.gamma.end(), 0.0);
  for (std::size_t k = 0; k < d.subpops * d.areas * d.years; ++k) p.beta[k] = 1.0;
  const auto pc1 = log_rates(spec, p);
  for (std::size_t a = 0; a < d.ages; ++a) {
    CHECK(pc1[d.index(a, 1, 2, 3)] == spec.basis(0, static_cast<Eigen::Index>(a)));
  }
}

TEST_CASE("log posterior matches the straight-line oracle") {
  const auto data = small_dataset(21);
  std::mt19937_64 rng(4);
  for (auto variant : {Variant::joint, Variant::independent}) {
    for (bool shared : {false, true}) {
      auto spec = make_spec(data, small_basis(), variant);
      spec.share_correlations_over_time = shared;
      spec.hyper.lkj_eta = 2.0;
      const PosteriorDensity density(spec, data);
      for (int rep = 0; rep < 5; ++rep) {
        const Eigen::VectorXd v = random_point(density.dimension(), rng);
        const double expect = density_oracle(spec, data, v);
        CHECK(density.log_density(v) == doctest::Approx(expect).epsilon(1e-10));
        CHECK(log_posterior(spec, data, v) == density.log_density(v));
      }
    }
  }
}

TEST_CASE("single-cell Poisson term at unit rate") {
  MortalityDataset seen(AgeGrid::from_labels({"0", "5"}), {"a"}, {"x"}, {"1"}, {0, 0},
                        {100.0, 100.0}, {1, 0});
  const auto unseen = seen.with_mask({0, 0});
  Eigen::MatrixXd basis(1, 2);
  basis << 1.0, 1.0;
  const auto spec = make_spec(seen, basis);
  const Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(ParameterLayout(spec).size()));
  CHECK(log_posterior(spec, seen, v) - log_posterior(spec, unseen, v) == doctest::Approx(-100.0));
}

TEST_CASE("analytic gradient matches central differences") {
  const auto data = small_dataset(5);
  std::mt19937_64 rng(17);
  for (auto variant : {Variant::joint, Variant::independent}) {
    const auto spec = make_spec(data, small_basis(), variant);
    const PosteriorDensity density(spec, data);
    double worst = 0.0;
    for (int rep = 0; rep < 10; ++rep) {
      worst = std::max(worst, max_gradient_error(density, random_point(density.dimension(), rng)));
    }
    CHECK(worst < 1e-6);
    const Eigen::VectorXd v = random_point(density.dimension(), rng);
    const auto vg = log_posterior_grad(spec, data, v);
    CHECK(vg.value == density.log_density(v));
  }
}

TEST_CASE("sigma prior gradient at zero follows the exp chain rule") {
  Hyperparameters h;
  auto [spec, data] = prior_only_model(h);
  const PosteriorDensity density(spec, data);
  const auto& layout = density.layout();
  Eigen::VectorXd grad;
  density.log_density_gradient(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(layout.size())), grad);
  // d/du [log half-normal(e^u | s) + u] = 1 - e^{2u} / s^2.
  CHECK(grad[static_cast<Eigen::Index>(layout.log_sigma_beta.offset)] ==
        doctest::Approx(1.0 - 1.0 / (h.sigma_beta_scale * h.sigma_beta_scale)));
  CHECK(grad[static_cast<Eigen::Index>(layout.log_sigma_age.offset)] ==
        doctest::Approx(1.0 - 1.0 / (h.sigma_gamma_scale * h.sigma_gamma_scale)));
  // d/du log normal(u | m, s) = -(u - m) / s^2.
  CHECK(grad[static_cast<Eigen::Index>(layout.log_sigma_mu.offset)] ==
        doctest::Approx(h.sigma_mu_meanlog / (h.sigma_mu_sdlog * h.sigma_mu_sdlog)));
}

TEST_CASE("sigma priors integrate to one through the log transform") {
  for (double m : sigma_prior_masses(Hyperparameters{})) CHECK(std::abs(m - 1.0) < 1e-3);
  Hyperparameters other;
  other.sigma_beta_scale = 0.25;
  other.sigma_gamma_scale = 2.0;
  other.sigma_mu_meanlog = 0.3;
  other.sigma_mu_sdlog = 1.2;
  for (double m : sigma_prior_masses(other)) CHECK(std::abs(m - 1.0) < 1e-3);
}

TEST_CASE("masked and zero-population cells contribute nothing") {
  auto data = small_dataset(8);
  const auto spec = make_spec(data, small_basis());
  const PosteriorDensity density(spec, data);
  const ParameterLayout& layout = density.layout();
  std::mt19937_64 rng(2);
  const Eigen::VectorXd v = random_point(density.dimension(), rng);
  // Cell 3 is masked, cell 7 has zero population: their gamma innovations
  // see only the standard-normal prior when the correlation is identity.
  Eigen::VectorXd w = v;
  for (std::size_t k = layout.chol_gamma.offset; k < layout.chol_gamma.offset + layout.chol_gamma.size; ++k) {
    w[static_cast<Eigen::Index>(k)] = 0.0;
  }
  Eigen::VectorXd grad;
  density.log_density_gradient(w, grad);
  for (std::size_t flat : {3u, 7u}) {
    const CellIndex c = spec.dims.cell(flat);
    const auto k = static_cast<Eigen::Index>(layout.z_gamma_at(c.age, c.subpop, c.area, c.year));
    CHECK(grad[k] == doctest::Approx(-w[k]).epsilon(1e-12));
  }
  // Changing the deaths of a masked cell leaves the density unchanged.
  std::vector<std::int64_t> deaths(data.deaths().begin(), data.deaths().end());
  deaths[3] += 5;
  const MortalityDataset changed(data.age_grid(), data.subpop_names(), data.area_names(),
                                 data.year_labels(), deaths,
                                 {data.population().begin(), data.population().end()},
                                 {data.mask().begin(), data.mask().end()});
  CHECK(log_posterior(spec, changed, v) == log_posterior(spec, data, v));
}

TEST_CASE("zero-population policy error rejects observed empty cells") {
  auto data = small_dataset(8);
  auto spec = make_spec(data, small_basis());
  spec.zero_population = ZeroPopulationPolicy::error;
  CHECK_THROWS_AS(PosteriorDensity(spec, data), IntegrityError);
}

TEST_CASE("independent variant equals joint at identity correlations") {
  const auto data = small_dataset(12);
  const auto joint = make_spec(data, small_basis(), Variant::joint);
  const auto indep = make_spec(data, small_basis(), Variant::independent);
  const ParameterLayout lj(joint), li(indep);
  std::mt19937_64 rng(5);
  const Eigen::VectorXd vi = random_point(li.size(), rng);
  Eigen::VectorXd vj = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(lj.size()));
  auto copy = [&](const Block& from, const Block& to) {
    vj.segment(static_cast<Eigen::Index>(to.offset), static_cast<Eigen::Index>(to.size)) =
        vi.segment(static_cast<Eigen::Index>(from.offset), static_cast<Eigen::Index>(from.size));
  };
  copy(li.z_omega, lj.z_omega);
  copy(li.mu_beta, lj.mu_beta);
  copy(li.log_sigma_beta, lj.log_sigma_beta);
  copy(li.log_sigma_mu, lj.log_sigma_mu);
  copy(li.z_gamma, lj.z_gamma);
  copy(li.log_sigma_age, lj.log_sigma_age);
  CHECK(log_posterior(joint, data, vj) == doctest::Approx(log_posterior(indep, data, vi)).epsilon(1e-13));
}

TEST_CASE("non-finite points do not throw") {
  const auto data = small_dataset(1);
  const auto spec = make_spec(data, small_basis());
  const PosteriorDensity density(spec, data);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(density.dimension()));
  v[static_cast<Eigen::Index>(density.layout().log_sigma_beta.offset)] = 800.0;
  Eigen::VectorXd grad;
  CHECK_NOTHROW(density.log_density_gradient(v, grad));
  CHECK(!std::isfinite(density.log_density(v)));
}

TEST_CASE("model spec json round-trip") {
  const auto data = small_dataset(1);
  auto spec = make_spec(data, small_basis(), Variant::independent);
  spec.share_correlations_over_time = true;
  spec.hyper.lkj_eta = 1.7;
  spec.zero_population = ZeroPopulationPolicy::error;
  const auto back = model_spec_from_json(nlohmann::json::parse(to_json(spec).dump()));
  CHECK(back.dims == spec.dims);
  CHECK(back.basis == spec.basis);
  CHECK(back.variant == spec.variant);
  CHECK(back.share_correlations_over_time);
  CHECK(back.hyper.lkj_eta == 1.7);
  CHECK(back.zero_population == ZeroPopulationPolicy::error);
}

TEST_CASE("spec validation") {
  const auto data = small_dataset(1);
  CHECK_THROWS_AS(make_spec(data, Eigen::MatrixXd::Ones(2, 4)), std::invalid_argument);
  auto spec = make_spec(data, small_basis());
  spec.hyper.sigma_beta_scale = 0.0;
  CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
  CHECK_THROWS_AS(parse_variant("shared"), std::invalid_argument);
}
