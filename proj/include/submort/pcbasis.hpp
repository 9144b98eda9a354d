#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "submort/mortdata.hpp"

namespace submort {

/// Right singular vectors of a curve collection, ordered by singular value.
///
/// `components` holds one unit-norm component per row (P_max x A). Rows of
/// `left_values` are per-curve loadings: U * Sigma when `scores_are_scaled`,
/// U otherwise. `total_energy` is the sum of all squared singular values of
/// the decomposition, so explained shares stay correct after truncation.
class PCBasis {
 public:
  PCBasis(AgeGrid age_grid, Eigen::MatrixXd components, Eigen::VectorXd singular_values,
          Eigen::MatrixXd left_values, bool scores_are_scaled, double total_energy);

  /// Uses the sum of squares of `singular_values` as the total energy.
  PCBasis(AgeGrid age_grid, Eigen::MatrixXd components, Eigen::VectorXd singular_values,
          Eigen::MatrixXd left_values, bool scores_are_scaled);

  const AgeGrid& age_grid() const noexcept { return age_grid_; }
  const Eigen::MatrixXd& components() const noexcept { return components_; }
  const Eigen::VectorXd& singular_values() const noexcept { return singular_values_; }
  const Eigen::MatrixXd& left_values() const noexcept { return left_values_; }
  bool scores_are_scaled() const noexcept { return scores_are_scaled_; }
  double total_energy() const noexcept { return total_energy_; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(components_.rows()); }

  /// Rank-k reconstruction of the decomposed matrix.
  Eigen::MatrixXd reconstruct(std::size_t k) const;

 private:
  AgeGrid age_grid_;
  Eigen::MatrixXd components_;
  Eigen::VectorXd singular_values_;
  Eigen::MatrixXd left_values_;
  bool scores_are_scaled_;
  double total_energy_;
};

/// SVD of the uncentred curve matrix. Each component is oriented so its
/// entries sum to a nonnegative value; loadings flip with it.
PCBasis svd_basis(const CurveCollection& x, std::size_t p_max, bool scale_scores = true);

Eigen::VectorXd explained_variance(const PCBasis& b);

struct WelchTest {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;
  bool available = false;
};

/// Two-sided Welch two-sample t-test with Welch-Satterthwaite degrees of freedom.
WelchTest welch_t_test(std::span<const double> a, std::span<const double> b);

struct PairSeparation {
  std::size_t group_a = 0;
  std::size_t group_b = 0;
  WelchTest test;
};

struct ComponentSeparation {
  std::size_t component = 0;  // 0-based
  double explained_share = 0.0;
  std::vector<std::string> groups;
  std::vector<double> group_means;
  std::vector<std::size_t> group_sizes;
  std::vector<PairSeparation> pairs;
};

struct SelectionReport {
  std::vector<ComponentSeparation> components;
  std::size_t recommended_p = 0;
};

/// Compares the distribution of loadings on one component across subpopulations.
ComponentSeparation subpop_separation(const PCBasis& b, std::span<const std::string> row_subpops,
                                      std::size_t component);

/// Largest P in [min_p, max_p] such that every component 1..P either explains
/// at least `share_floor` of the variation or separates some subpopulation pair
/// at level `alpha`. Stops at the first component that does neither.
std::size_t recommend_p(const SelectionReport& report, double alpha, std::size_t min_p,
                        std::size_t max_p, double share_floor = 0.005);

SelectionReport selection_report(const PCBasis& b, std::span<const std::string> row_subpops,
                                 double alpha, std::size_t min_p, std::size_t max_p,
                                 double share_floor = 0.005);

}  // namespace submort
