#include "submort/pcbasis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

namespace submort {

PCBasis::PCBasis(AgeGrid age_grid, Eigen::MatrixXd components, Eigen::VectorXd singular_values,
                 Eigen::MatrixXd left_values, bool scores_are_scaled, double total_energy)
    : age_grid_(std::move(age_grid)),
      components_(std::move(components)),
      singular_values_(std::move(singular_values)),
      left_values_(std::move(left_values)),
      scores_are_scaled_(scores_are_scaled),
      total_energy_(total_energy) {
  const auto p = components_.rows();
  if (components_.cols() != static_cast<Eigen::Index>(age_grid_.size())) {
    throw std::invalid_argument("component length does not match the age grid");
  }
  if (singular_values_.size() != p || left_values_.cols() != p) {
    throw std::invalid_argument("basis parts disagree on the number of components");
  }
  for (Eigen::Index i = 0; i < p; ++i) {
    if (!(singular_values_(i) >= 0.0)) {
      throw std::invalid_argument("singular values must be nonnegative");
    }
    if (i > 0 && singular_values_(i) > singular_values_(i - 1)) {
      throw std::invalid_argument("singular values must be nonincreasing");
    }
  }
  if (!(total_energy_ >= singular_values_.squaredNorm() * (1.0 - 1e-12))) {
    throw std::invalid_argument("total energy is smaller than the retained energy");
  }
}

PCBasis::PCBasis(AgeGrid age_grid, Eigen::MatrixXd components, Eigen::VectorXd singular_values,
                 Eigen::MatrixXd left_values, bool scores_are_scaled)
    : PCBasis(std::move(age_grid), std::move(components), singular_values, std::move(left_values),
              scores_are_scaled, singular_values.squaredNorm()) {}

Eigen::MatrixXd PCBasis::reconstruct(std::size_t k) const {
  const auto kk = static_cast<Eigen::Index>(std::min(k, size()));
  Eigen::MatrixXd scores = left_values_.leftCols(kk);
  if (!scores_are_scaled_) scores *= singular_values_.head(kk).asDiagonal();
  return scores * components_.topRows(kk);
}

PCBasis svd_basis(const CurveCollection& x, std::size_t p_max, bool scale_scores) {
  x.validate();
  const auto n = static_cast<std::size_t>(x.rows.rows());
  const auto a = static_cast<std::size_t>(x.rows.cols());
  if (p_max < 1 || p_max > a) {
    throw std::invalid_argument("p_max must lie in [1, A] (A = " + std::to_string(a) + ")");
  }
  if (n < a) {
    throw std::invalid_argument("need at least as many curves (N = " + std::to_string(n) +
                                ") as age groups (A = " + std::to_string(a) + ")");
  }

  Eigen::BDCSVD<Eigen::MatrixXd> svd(x.rows, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.info() != Eigen::Success) throw std::runtime_error("SVD did not converge");

  const auto p = static_cast<Eigen::Index>(p_max);
  Eigen::MatrixXd v = svd.matrixV().leftCols(p);
  Eigen::MatrixXd u = svd.matrixU().leftCols(p);
  Eigen::VectorXd sv = svd.singularValues().head(p);
  for (Eigen::Index i = 0; i < p; ++i) {
    if (v.col(i).sum() < 0.0) {
      v.col(i) *= -1.0;
      u.col(i) *= -1.0;
    }
  }
  if (scale_scores) u *= sv.asDiagonal();
  return PCBasis(x.age_grid, v.transpose(), sv, std::move(u), scale_scores,
                 svd.singularValues().squaredNorm());
}

Eigen::VectorXd explained_variance(const PCBasis& b) {
  const auto& sv = b.singular_values();
  if (b.total_energy() <= 0.0) return Eigen::VectorXd::Zero(sv.size());
  return sv.array().square() / b.total_energy();
}

WelchTest welch_t_test(std::span<const double> a, std::span<const double> b) {
  WelchTest out;
  if (a.size() < 2 || b.size() < 2) return out;
  auto moments = [](std::span<const double> x) {
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / static_cast<double>(x.size() - 1)};
  };
  auto [ma, va] = moments(a);
  auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double se2 = va / na + vb / nb;
  out.available = true;
  if (se2 == 0.0) {
    out.t = ma == mb ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), ma - mb);
    out.df = na + nb - 2.0;
    out.p_value = ma == mb ? 1.0 : 0.0;
    return out;
  }
  out.t = (ma - mb) / std::sqrt(se2);
  out.df = se2 * se2 /
           ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
  boost::math::students_t dist(out.df);
  out.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(out.t)));
  return out;
}

ComponentSeparation subpop_separation(const PCBasis& b, std::span<const std::string> row_subpops,
                                      std::size_t component) {
  if (component >= b.size()) throw std::invalid_argument("component index out of range");
  if (row_subpops.size() != static_cast<std::size_t>(b.left_values().rows())) {
    throw std::invalid_argument("row labels do not match the number of curves");
  }
  ComponentSeparation out;
  out.component = component;
  out.explained_share = explained_variance(b)(static_cast<Eigen::Index>(component));

  std::vector<std::vector<double>> values;
  for (std::size_t r = 0; r < row_subpops.size(); ++r) {
    auto it = std::find(out.groups.begin(), out.groups.end(), row_subpops[r]);
    std::size_t g = static_cast<std::size_t>(it - out.groups.begin());
    if (it == out.groups.end()) {
      out.groups.push_back(row_subpops[r]);
      values.emplace_back();
    }
    values[g].push_back(b.left_values()(static_cast<Eigen::Index>(r),
                                        static_cast<Eigen::Index>(component)));
  }
  if (out.groups.size() < 2) {
    throw std::invalid_argument("separation needs at least two subpopulations");
  }
  for (const auto& v : values) {
    double m = 0.0;
    for (double x : v) m += x;
    out.group_means.push_back(m / static_cast<double>(v.size()));
    out.group_sizes.push_back(v.size());
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t j = i + 1; j < values.size(); ++j) {
      out.pairs.push_back(PairSeparation{i, j, welch_t_test(values[i], values[j])});
    }
  }
  return out;
}

std::size_t recommend_p(const SelectionReport& report, double alpha, std::size_t min_p,
                        std::size_t max_p, double share_floor) {
  std::size_t p = 0;
  for (const auto& comp : report.components) {
    if (p >= max_p || comp.component != p) break;
    bool significant = std::any_of(comp.pairs.begin(), comp.pairs.end(), [&](const auto& pr) {
      return pr.test.available && pr.test.p_value < alpha;
    });
    if (!(comp.explained_share >= share_floor || significant)) break;
    ++p;
  }
  return std::min(std::max(p, min_p), std::max(min_p, max_p));
}

SelectionReport selection_report(const PCBasis& b, std::span<const std::string> row_subpops,
                                 double alpha, std::size_t min_p, std::size_t max_p,
                                 double share_floor) {
  SelectionReport report;
  for (std::size_t i = 0; i < std::min(max_p, b.size()); ++i) {
    report.components.push_back(subpop_separation(b, row_subpops, i));
  }
  report.recommended_p = recommend_p(report, alpha, min_p, max_p, share_floor);
  return report;
}

}  // namespace submort
