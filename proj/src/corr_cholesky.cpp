#include "submort/corr_cholesky.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace submort::corr {

double log_sech2(double y) noexcept {
  const double ay = std::fabs(y);
  return std::log(4.0) - 2.0 * ay - 2.0 * std::log1p(std::exp(-2.0 * ay));
}

Eigen::MatrixXd constrain(std::span<const double> y, std::size_t dim) {
  if (y.size() != free_count(dim)) throw std::invalid_argument("wrong number of CPC entries");
  const auto n = static_cast<Eigen::Index>(dim);
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
  l(0, 0) = 1.0;
  std::size_t k = 0;
  for (Eigen::Index i = 1; i < n; ++i) {
    double log_rem = 0.0;  // log of the squared norm still available in row i
    for (Eigen::Index j = 0; j < i; ++j, ++k) {
      l(i, j) = std::tanh(y[k]) * std::exp(0.5 * log_rem);
      log_rem += log_sech2(y[k]);
    }
    l(i, i) = std::exp(0.5 * log_rem);
  }
  return l;
}

Eigen::VectorXd unconstrain(const Eigen::MatrixXd& l) {
  const auto n = l.rows();
  Eigen::VectorXd y(static_cast<Eigen::Index>(free_count(static_cast<std::size_t>(n))));
  Eigen::Index k = 0;
  for (Eigen::Index i = 1; i < n; ++i) {
    double rem = 1.0;
    for (Eigen::Index j = 0; j < i; ++j, ++k) {
      double z = l(i, j) / std::sqrt(rem);
      y(k) = std::atanh(z);
      rem -= l(i, j) * l(i, j);
    }
  }
  return y;
}

namespace {

// Weight on log(1 - z_ik^2) in the combined LKJ + Jacobian term for row i,
// entry k. Sums the tanh Jacobian (1), the row-normalisation Jacobian
// ((i - 1 - k) / 2) and the LKJ diagonal power ((dim - i - 1 + 2(eta - 1)) / 2).
double entry_weight(std::size_t dim, std::size_t i, std::size_t k, double eta) {
  return 1.0 + 0.5 * static_cast<double>(i - 1 - k) +
         0.5 * (static_cast<double>(dim) - static_cast<double>(i) - 1.0 + 2.0 * (eta - 1.0));
}

}  // namespace

double log_density(std::span<const double> y, std::size_t dim, double eta) {
  double lp = 0.0;
  std::size_t k = 0;
  for (std::size_t i = 1; i < dim; ++i) {
    for (std::size_t j = 0; j < i; ++j, ++k) {
      lp += entry_weight(dim, i, j, eta) * log_sech2(y[k]);
    }
  }
  return lp;
}

double log_jacobian(std::span<const double> y, std::size_t dim) {
  double lp = 0.0;
  std::size_t k = 0;
  for (std::size_t i = 1; i < dim; ++i) {
    for (std::size_t j = 0; j < i; ++j, ++k) {
      lp += (1.0 + 0.5 * static_cast<double>(i - 1 - j)) * log_sech2(y[k]);
    }
  }
  return lp;
}

void log_density_gradient(std::span<const double> y, std::size_t dim, double eta,
                          std::span<double> grad) {
  std::size_t k = 0;
  for (std::size_t i = 1; i < dim; ++i) {
    for (std::size_t j = 0; j < i; ++j, ++k) {
      grad[k] += entry_weight(dim, i, j, eta) * (-2.0 * std::tanh(y[k]));
    }
  }
}

void backprop(std::span<const double> y, const Eigen::MatrixXd& l, const Eigen::MatrixXd& adj_l,
              std::span<double> grad) {
  const auto n = l.rows();
  std::vector<double> scale(static_cast<std::size_t>(n));
  std::size_t base = 0;
  for (Eigen::Index i = 1; i < n; ++i) {
    double log_rem = 0.0;
    for (Eigen::Index j = 0; j < i; ++j) {
      scale[static_cast<std::size_t>(j)] = std::exp(0.5 * log_rem);
      log_rem += log_sech2(y[base + static_cast<std::size_t>(j)]);
    }
    // Every later entry of row i, and the diagonal, carries a factor
    // sqrt(1 - z_ik^2), so its derivative in y_ik is -z_ik times itself.
    double tail = adj_l(i, i) * l(i, i);
    for (Eigen::Index j = i - 1; j >= 0; --j) {
      const std::size_t k = base + static_cast<std::size_t>(j);
      const double z = std::tanh(y[k]);
      grad[k] += adj_l(i, j) * std::exp(log_sech2(y[k])) * scale[static_cast<std::size_t>(j)] - z * tail;
      tail += adj_l(i, j) * l(i, j);
    }
    base += static_cast<std::size_t>(i);
  }
}

Eigen::MatrixXd correlation(const Eigen::MatrixXd& l) {
  Eigen::MatrixXd r = l * l.transpose();
  r.diagonal().setOnes();
  return r;
}

}  // namespace submort::corr
