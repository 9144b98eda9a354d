#pragma once

#include <cstddef>
#include <span>

#include <Eigen/Dense>

namespace submort::corr {

/// Number of free entries in an S x S correlation Cholesky factor.
constexpr std::size_t free_count(std::size_t dim) noexcept { return dim * (dim - 1) / 2; }

/// Maps unconstrained reals onto the Cholesky factor of a correlation matrix.
///
/// Entries are read row by row (row 1: column 0; row 2: columns 0, 1; ...).
/// Each becomes a canonical partial correlation tanh(y) in (-1, 1), and
/// row i of the factor is filled left to right so that it has unit norm:
///
///   L(i, j) = tanh(y_ij) * sqrt(prod_{k<j} (1 - tanh(y_ik)^2)),  j < i
///   L(i, i) = sqrt(prod_{k<i} (1 - tanh(y_ik)^2))
Eigen::MatrixXd constrain(std::span<const double> y, std::size_t dim);

/// Inverse of `constrain` for a valid factor.
Eigen::VectorXd unconstrain(const Eigen::MatrixXd& l);

/// log LKJ(eta) density of L L^T on the Cholesky factor plus the log Jacobian
/// of `constrain`. Drops the LKJ normalising constant.
double log_density(std::span<const double> y, std::size_t dim, double eta);

/// log Jacobian of `constrain` alone (no LKJ term).
double log_jacobian(std::span<const double> y, std::size_t dim);

/// Accumulates into `grad` the gradient of `log_density` with respect to y.
void log_density_gradient(std::span<const double> y, std::size_t dim, double eta,
                          std::span<double> grad);

/// Given adjoints dF/dL (lower triangle used), accumulates dF/dy into `grad`.
void backprop(std::span<const double> y, const Eigen::MatrixXd& l, const Eigen::MatrixXd& adj_l,
              std::span<double> grad);

/// L L^T with the diagonal set to exactly one.
Eigen::MatrixXd correlation(const Eigen::MatrixXd& l);

/// log(1 - tanh(y)^2), stable for large |y|.
double log_sech2(double y) noexcept;

}  // namespace submort::corr
