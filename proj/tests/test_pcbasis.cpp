#include <cmath>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "submort/pcbasis.hpp"

using namespace submort;

namespace {

CurveCollection collection(const Eigen::MatrixXd& x, std::vector<std::string> subpops = {}) {
  std::vector<std::string> labels;
  for (Eigen::Index a = 0; a < x.cols(); ++a) labels.push_back(std::to_string(5 * a));
  CurveCollection c{AgeGrid::from_labels(labels), x, {}};
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    c.row_meta.push_back(
        CurveMeta{subpops.empty() ? "s" : subpops[static_cast<std::size_t>(r)], "", ""});
  }
  return c;
}

double relative_frobenius(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).norm() / b.norm();
}

}  // namespace

TEST_CASE("identity input gives unit singular values and coordinate axes") {
  const auto b = svd_basis(collection(Eigen::MatrixXd::Identity(2, 2)), 2);
  CHECK(b.singular_values()[0] == doctest::Approx(1.0));
  CHECK(b.singular_values()[1] == doctest::Approx(1.0));
  const Eigen::MatrixXd absv = b.components().cwiseAbs();
  CHECK((absv - Eigen::MatrixXd::Identity(2, 2)).norm() < 1e-12);
  const auto share = explained_variance(b);
  CHECK(share[0] == doctest::Approx(0.5));
  CHECK(share[1] == doctest::Approx(0.5));
}

TEST_CASE("rank-one input") {
  Eigen::MatrixXd x(2, 2);
  x << 1, 2, 2, 4;
  const auto b = svd_basis(collection(x), 2);
  CHECK(b.singular_values()[0] == doctest::Approx(5.0));
  CHECK(std::abs(b.singular_values()[1]) < 1e-12);
  CHECK(b.components()(0, 0) == doctest::Approx(1.0 / std::sqrt(5.0)));
  CHECK(b.components()(0, 1) == doctest::Approx(2.0 / std::sqrt(5.0)));
  CHECK(explained_variance(b)[0] == doctest::Approx(1.0));
  CHECK(explained_variance(b)[1] == doctest::Approx(0.0));
}

TEST_CASE("basis invariants on a random collection") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd x(40, 8);
  for (auto& v : x.reshaped()) v = n01(rng);
  const auto b = svd_basis(collection(x), 8);
  CHECK((b.components() * b.components().transpose() - Eigen::MatrixXd::Identity(8, 8)).norm() <
        1e-10);
  for (Eigen::Index i = 0; i < 8; ++i) CHECK(b.components().row(i).sum() >= 0.0);
  for (Eigen::Index i = 1; i < 8; ++i) {
    CHECK(b.singular_values()[i] <= b.singular_values()[i - 1]);
  }
  CHECK(relative_frobenius(b.reconstruct(8), x) <= 1e-8);
  double previous = INFINITY;
  for (std::size_t k = 1; k <= 8; ++k) {
    const double err = relative_frobenius(b.reconstruct(k), x);
    CHECK(err <= previous + 1e-15);
    previous = err;
  }
  const auto again = svd_basis(collection(x), 8);
  CHECK(again.components() == b.components());
  const auto unscaled = svd_basis(collection(x), 8, false);
  CHECK(!unscaled.scores_are_scaled());
  CHECK(relative_frobenius(unscaled.reconstruct(8), x) <= 1e-8);
}

TEST_CASE("rank-four plus noise is captured by four components") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n01;
  const Eigen::Index N = 200, A = 19;
  Eigen::MatrixXd u(N, 4), v(4, A);
  for (auto& e : u.reshaped()) e = n01(rng);
  for (auto& e : v.reshaped()) e = n01(rng);
  const Eigen::MatrixXd signal = u * v;
  const double signal_sd = std::sqrt(signal.squaredNorm() / static_cast<double>(N * A));
  Eigen::MatrixXd x = signal;
  for (auto& e : x.reshaped()) e += 0.01 * signal_sd * n01(rng);
  const auto b = svd_basis(collection(x), 19);
  CHECK(explained_variance(b).head(4).sum() >= 0.99);
}

TEST_CASE("svd_basis argument errors") {
  const Eigen::MatrixXd x = Eigen::MatrixXd::Identity(3, 3);
  CHECK_THROWS_AS(svd_basis(collection(x), 4), std::invalid_argument);
  CHECK_THROWS_AS(svd_basis(collection(x), 0), std::invalid_argument);
  CHECK_THROWS_AS(svd_basis(collection(Eigen::MatrixXd::Ones(2, 3)), 2), std::invalid_argument);
}

TEST_CASE("basis construction rejects increasing singular values") {
  Eigen::VectorXd sv(2);
  sv << 3.0, 4.0;
  CHECK_THROWS_AS(PCBasis(AgeGrid::from_labels({"0", "5"}), Eigen::MatrixXd::Identity(2, 2), sv,
                          Eigen::MatrixXd::Identity(2, 2), true),
                  std::invalid_argument);
}

TEST_CASE("Welch test matches reference values") {
  const std::vector<double> a = {1, 2, 3, 4, 5}, b = {2, 4, 6, 8, 10};
  const auto w = welch_t_test(a, b);
  REQUIRE(w.available);
  CHECK(w.t == doctest::Approx(-1.8973665961010275).epsilon(1e-12));
  CHECK(w.df == doctest::Approx(5.882352941176471).epsilon(1e-12));
  CHECK(w.p_value == doctest::Approx(0.10753119493062718).epsilon(1e-9));

  const auto same = welch_t_test(a, a);
  CHECK(same.t == 0.0);
  CHECK(same.p_value == doctest::Approx(1.0));

  const std::vector<double> one = {1.0};
  CHECK(!welch_t_test(one, a).available);
}

TEST_CASE("Welch test detects a location shift") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  std::vector<double> a, b;
  for (int k = 0; k < 100; ++k) {
    a.push_back(0.1 * n01(rng));
    b.push_back(1.0 + 0.1 * n01(rng));
  }
  CHECK(welch_t_test(a, b).p_value < 1e-10);
}

TEST_CASE("subpopulation separation by component") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n01;
  // Group B is shifted along the first age direction only.
  Eigen::MatrixXd x(60, 4);
  std::vector<std::string> groups;
  for (Eigen::Index r = 0; r < 60; ++r) {
    const bool is_b = r % 2 == 1;
    groups.push_back(is_b ? "B" : "A");
    for (Eigen::Index a = 0; a < 4; ++a) x(r, a) = 0.3 * n01(rng) + (a == 0 ? 10.0 : 1.0);
    if (is_b) x(r, 0) += 3.0;
  }
  const auto b = svd_basis(collection(x, groups), 4);
  const auto sep = subpop_separation(b, groups, 0);
  CHECK(sep.groups == std::vector<std::string>{"A", "B"});
  CHECK(sep.group_sizes == std::vector<std::size_t>{30, 30});
  REQUIRE(sep.pairs.size() == 1);
  CHECK(sep.pairs[0].test.p_value < 1e-6);
}

TEST_CASE("recommend_p contiguity rule") {
  auto report_with = [](std::vector<int> significant, std::size_t count) {
    SelectionReport r;
    for (std::size_t i = 0; i < count; ++i) {
      ComponentSeparation c;
      c.component = i;
      c.explained_share = 0.0001;
      PairSeparation p;
      p.test.available = true;
      const bool sig =
          std::find(significant.begin(), significant.end(), static_cast<int>(i + 1)) !=
          significant.end();
      p.test.p_value = sig ? 0.001 : 0.5;
      c.pairs.push_back(p);
      r.components.push_back(c);
    }
    return r;
  };
  CHECK(recommend_p(report_with({1, 2, 3, 4}, 8), 0.05, 3, 8) == 4);
  CHECK(recommend_p(report_with({}, 8), 0.05, 3, 8) == 3);
  CHECK(recommend_p(report_with({1, 2, 3, 4, 6, 7, 8}, 8), 0.05, 1, 8) == 4);
  auto shares = report_with({}, 5);
  shares.components[0].explained_share = 0.9;
  shares.components[1].explained_share = 0.05;
  CHECK(recommend_p(shares, 0.05, 1, 5) == 2);
}
