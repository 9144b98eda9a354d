#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace submort {

/// Malformed input text (bad header, unparseable field). Carries the line.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

/// Well-formed input that violates a data invariant.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ordered age groups. Labels such as "<1", "1-4", "85+" carry their lower bound.
class AgeGrid {
 public:
  AgeGrid(std::vector<std::string> labels, std::vector<double> lower_bounds);

  /// The 19-group grid <1, 1-4, 5-9, ..., 80-84, 85+.
  static AgeGrid standard();

  /// Lower bound encoded in a label: "<1" -> 0, "1-4" -> 1, "85+" -> 85, "40" -> 40.
  static std::optional<double> parse_lower_bound(std::string_view label);

  /// Builds a grid from labels, ordering them by parsed lower bound.
  static AgeGrid from_labels(const std::vector<std::string>& labels);

  std::size_t size() const noexcept { return labels_.size(); }
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  const std::vector<double>& lower_bounds() const noexcept { return lower_bounds_; }
  std::optional<std::size_t> find(std::string_view label) const;

  /// Interval midpoints; the open last interval is treated as `open_width` years wide.
  std::vector<double> midpoints(double open_width = 10.0) const;

  bool operator==(const AgeGrid&) const = default;

 private:
  std::vector<std::string> labels_;
  std::vector<double> lower_bounds_;
};

struct CellIndex {
  std::size_t age = 0;
  std::size_t subpop = 0;
  std::size_t area = 0;
  std::size_t year = 0;

  auto operator<=>(const CellIndex&) const = default;
};

/// Extents of an A x S x C x T tensor stored row-major (year fastest).
struct Dims {
  std::size_t ages = 0;
  std::size_t subpops = 0;
  std::size_t areas = 0;
  std::size_t years = 0;

  std::size_t cells() const noexcept { return ages * subpops * areas * years; }
  std::size_t index(const CellIndex& c) const noexcept {
    return ((c.age * subpops + c.subpop) * areas + c.area) * years + c.year;
  }
  std::size_t index(std::size_t a, std::size_t s, std::size_t c, std::size_t t) const noexcept {
    return ((a * subpops + s) * areas + c) * years + t;
  }
  CellIndex cell(std::size_t flat) const noexcept;
  bool contains(const CellIndex& c) const noexcept {
    return c.age < ages && c.subpop < subpops && c.area < areas && c.year < years;
  }

  bool operator==(const Dims&) const = default;
};

/// Deaths and person-years by (age, subpopulation, area, year), with an
/// observation mask. Immutable after construction.
class MortalityDataset {
 public:
  MortalityDataset(AgeGrid age_grid, std::vector<std::string> subpops,
                   std::vector<std::string> areas, std::vector<std::string> years,
                   std::vector<std::int64_t> deaths, std::vector<double> population,
                   std::vector<std::uint8_t> mask);

  const AgeGrid& age_grid() const noexcept { return age_grid_; }
  const std::vector<std::string>& subpop_names() const noexcept { return subpops_; }
  const std::vector<std::string>& area_names() const noexcept { return areas_; }
  const std::vector<std::string>& year_labels() const noexcept { return years_; }
  const Dims& dims() const noexcept { return dims_; }

  std::span<const std::int64_t> deaths() const noexcept { return deaths_; }
  std::span<const double> population() const noexcept { return population_; }
  std::span<const std::uint8_t> mask() const noexcept { return mask_; }

  std::int64_t deaths(const CellIndex& c) const { return deaths_[dims_.index(c)]; }
  double population(const CellIndex& c) const { return population_[dims_.index(c)]; }
  bool observed(const CellIndex& c) const { return mask_[dims_.index(c)] != 0; }
  std::size_t observed_count() const noexcept;

  /// Same counts with a different mask.
  MortalityDataset with_mask(std::vector<std::uint8_t> mask) const;

 private:
  AgeGrid age_grid_;
  std::vector<std::string> subpops_;
  std::vector<std::string> areas_;
  std::vector<std::string> years_;
  Dims dims_;
  std::vector<std::int64_t> deaths_;
  std::vector<double> population_;
  std::vector<std::uint8_t> mask_;
};

MortalityDataset read_dataset(std::istream& in);
MortalityDataset load_dataset(const std::filesystem::path& path);

/// Writes mask-true cells sorted by (area, subpop, year, age).
void write_dataset(std::ostream& out, const MortalityDataset& d);
void save_dataset(const std::filesystem::path& path, const MortalityDataset& d);

/// ln(deaths / population); `zero_code` where deaths are zero; NaN where
/// population is zero.
std::vector<double> observed_log_rates(const MortalityDataset& d, double zero_code);

struct HoldoutSplit {
  MortalityDataset train;
  std::vector<CellIndex> test_cells;
};

/// Moves round-half-up(fraction * n) observed cells per area into the test set.
HoldoutSplit holdout_split(const MortalityDataset& d, double fraction, std::uint64_t seed);

void write_cells(std::ostream& out, const MortalityDataset& d, std::span<const CellIndex> cells);
std::vector<CellIndex> read_cells(std::istream& in, const MortalityDataset& d);

struct CurveMeta {
  std::string subpop;
  std::string area;
  std::string year;
};

/// N x A matrix of log-mortality curves with one metadata record per row.
struct CurveCollection {
  AgeGrid age_grid;
  Eigen::MatrixXd rows;
  std::vector<CurveMeta> row_meta;

  void validate() const;
};

CurveCollection read_curves(std::istream& in);
CurveCollection load_curves(const std::filesystem::path& path);
void write_curves(std::ostream& out, const CurveCollection& curves);

}  // namespace submort
