#include "submort/mortdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <tuple>
#include <unordered_map>

#include "submort/csv.hpp"

namespace submort {

namespace {

const std::vector<std::string> kDatasetHeader = {"age",  "subpop", "area",
                                                 "year", "deaths", "population"};

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  return in;
}

std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  return out;
}

// Label registry keeping first-appearance order.
struct LabelIndex {
  std::vector<std::string> labels;
  std::unordered_map<std::string, std::size_t> lookup;

  std::size_t intern(const std::string& label) {
    auto [it, inserted] = lookup.emplace(label, labels.size());
    if (inserted) labels.push_back(label);
    return it->second;
  }
};

// Chronological order when every label is an integer, otherwise first appearance.
std::vector<std::size_t> year_order(const std::vector<std::string>& labels) {
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::int64_t> values(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& s = labels[i];
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), values[i]);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return order;
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  return order;
}

std::string cell_name(const MortalityDataset& d, const CellIndex& c) {
  return "(age '" + d.age_grid().labels()[c.age] + "', subpop '" + d.subpop_names()[c.subpop] +
         "', area '" + d.area_names()[c.area] + "', year '" + d.year_labels()[c.year] + "')";
}

}  // namespace

AgeGrid::AgeGrid(std::vector<std::string> labels, std::vector<double> lower_bounds)
    : labels_(std::move(labels)), lower_bounds_(std::move(lower_bounds)) {
  if (labels_.empty()) throw std::invalid_argument("age grid needs at least one group");
  if (labels_.size() != lower_bounds_.size()) {
    throw std::invalid_argument("age grid labels and lower bounds differ in length");
  }
  for (std::size_t a = 0; a < lower_bounds_.size(); ++a) {
    if (!std::isfinite(lower_bounds_[a]) || lower_bounds_[a] < 0) {
      throw std::invalid_argument("age lower bounds must be finite and nonnegative");
    }
    if (a > 0 && !(lower_bounds_[a] > lower_bounds_[a - 1])) {
      throw std::invalid_argument("age lower bounds must be strictly increasing");
    }
  }
}

AgeGrid AgeGrid::standard() {
  std::vector<std::string> labels = {"<1", "1-4"};
  std::vector<double> bounds = {0.0, 1.0};
  for (int lo = 5; lo <= 80; lo += 5) {
    labels.push_back(std::to_string(lo) + "-" + std::to_string(lo + 4));
    bounds.push_back(lo);
  }
  labels.push_back("85+");
  bounds.push_back(85.0);
  return AgeGrid(std::move(labels), std::move(bounds));
}

std::optional<double> AgeGrid::parse_lower_bound(std::string_view label) {
  if (label.empty()) return std::nullopt;
  if (label.front() == '<') return 0.0;
  std::size_t end = 0;
  while (end < label.size() && (std::isdigit(static_cast<unsigned char>(label[end])) ||
                                label[end] == '.')) {
    ++end;
  }
  if (end == 0) return std::nullopt;
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(label.data(), label.data() + end, value);
  if (ec != std::errc() || ptr != label.data() + end) return std::nullopt;
  std::string_view rest = label.substr(end);
  if (rest.empty() || rest == "+" || rest.front() == '-') return value;
  return std::nullopt;
}

AgeGrid AgeGrid::from_labels(const std::vector<std::string>& labels) {
  std::vector<double> bounds;
  bounds.reserve(labels.size());
  for (const auto& label : labels) {
    auto lb = parse_lower_bound(label);
    if (!lb) {
      // Unrecognised labels keep their order with synthetic bounds.
      std::vector<double> seq(labels.size());
      std::iota(seq.begin(), seq.end(), 0.0);
      return AgeGrid(labels, std::move(seq));
    }
    bounds.push_back(*lb);
  }
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return bounds[a] < bounds[b]; });
  std::vector<std::string> sorted_labels;
  std::vector<double> sorted_bounds;
  for (auto i : order) {
    sorted_labels.push_back(labels[i]);
    sorted_bounds.push_back(bounds[i]);
  }
  return AgeGrid(std::move(sorted_labels), std::move(sorted_bounds));
}

std::optional<std::size_t> AgeGrid::find(std::string_view label) const {
  for (std::size_t a = 0; a < labels_.size(); ++a) {
    if (labels_[a] == label) return a;
  }
  return std::nullopt;
}

std::vector<double> AgeGrid::midpoints(double open_width) const {
  std::vector<double> mid(size());
  for (std::size_t a = 0; a < size(); ++a) {
    double upper = a + 1 < size() ? lower_bounds_[a + 1] : lower_bounds_[a] + open_width;
    mid[a] = 0.5 * (lower_bounds_[a] + upper);
  }
  return mid;
}

CellIndex Dims::cell(std::size_t flat) const noexcept {
  CellIndex c;
  c.year = flat % years;
  flat /= years;
  c.area = flat % areas;
  flat /= areas;
  c.subpop = flat % subpops;
  c.age = flat / subpops;
  return c;
}

MortalityDataset::MortalityDataset(AgeGrid age_grid, std::vector<std::string> subpops,
                                   std::vector<std::string> areas, std::vector<std::string> years,
                                   std::vector<std::int64_t> deaths, std::vector<double> population,
                                   std::vector<std::uint8_t> mask)
    : age_grid_(std::move(age_grid)),
      subpops_(std::move(subpops)),
      areas_(std::move(areas)),
      years_(std::move(years)),
      dims_{age_grid_.size(), subpops_.size(), areas_.size(), years_.size()},
      deaths_(std::move(deaths)),
      population_(std::move(population)),
      mask_(std::move(mask)) {
  const std::size_t n = dims_.cells();
  if (n == 0) throw std::invalid_argument("dataset has an empty dimension");
  if (deaths_.size() != n || population_.size() != n) {
    throw std::invalid_argument("deaths/population size does not match dimensions");
  }
  if (mask_.size() != n) throw std::invalid_argument("mask size does not match dimensions");
  for (std::size_t i = 0; i < n; ++i) {
    if (deaths_[i] < 0) {
      throw IntegrityError("negative deaths at " + cell_name(*this, dims_.cell(i)));
    }
    if (!std::isfinite(population_[i]) || population_[i] < 0) {
      throw IntegrityError("invalid population at " + cell_name(*this, dims_.cell(i)));
    }
    if (deaths_[i] > 0 && population_[i] == 0) {
      throw IntegrityError("deaths with zero population at " + cell_name(*this, dims_.cell(i)));
    }
  }
}

std::size_t MortalityDataset::observed_count() const noexcept {
  return static_cast<std::size_t>(std::count_if(mask_.begin(), mask_.end(),
                                                [](std::uint8_t m) { return m != 0; }));
}

MortalityDataset MortalityDataset::with_mask(std::vector<std::uint8_t> mask) const {
  return MortalityDataset(age_grid_, subpops_, areas_, years_, deaths_, population_,
                          std::move(mask));
}

MortalityDataset read_dataset(std::istream& in) {
  std::string line;
  if (!csv::read_line(in, line)) throw ParseError("missing header", 1);
  auto header = csv::split_record(line);
  if (header != kDatasetHeader) {
    throw ParseError("expected header 'age,subpop,area,year,deaths,population'", 1);
  }

  struct Row {
    std::size_t age, subpop, area, year;
    std::int64_t deaths;
    double population;
    std::size_t line;
  };
  LabelIndex ages, subpops, areas, years;
  std::vector<Row> rows;
  std::size_t line_no = 1;
  while (csv::read_line(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    try {
      f = csv::split_record(line);
    } catch (const std::exception& e) {
      throw ParseError(e.what(), line_no);
    }
    if (f.size() != kDatasetHeader.size()) {
      throw ParseError("expected 6 fields, found " + std::to_string(f.size()), line_no);
    }
    Row r{};
    try {
      r.deaths = csv::parse_int(f[4]);
      r.population = csv::parse_double(f[5]);
    } catch (const std::exception& e) {
      throw ParseError(e.what(), line_no);
    }
    if (r.deaths < 0) throw ParseError("deaths must be nonnegative", line_no);
    if (!std::isfinite(r.population) || r.population < 0) {
      throw ParseError("population must be finite and nonnegative", line_no);
    }
    r.age = ages.intern(f[0]);
    r.subpop = subpops.intern(f[1]);
    r.area = areas.intern(f[2]);
    r.year = years.intern(f[3]);
    r.line = line_no;
    rows.push_back(r);
  }
  if (rows.empty()) throw ParseError("no data rows", line_no);

  AgeGrid grid = AgeGrid::from_labels(ages.labels);
  std::vector<std::size_t> age_pos(ages.labels.size());
  for (std::size_t i = 0; i < ages.labels.size(); ++i) age_pos[i] = *grid.find(ages.labels[i]);

  auto order = year_order(years.labels);
  std::vector<std::size_t> year_pos(order.size());
  std::vector<std::string> year_labels;
  for (std::size_t k = 0; k < order.size(); ++k) {
    year_pos[order[k]] = k;
    year_labels.push_back(years.labels[order[k]]);
  }

  Dims dims{grid.size(), subpops.labels.size(), areas.labels.size(), year_labels.size()};
  std::vector<std::int64_t> deaths(dims.cells(), 0);
  std::vector<double> population(dims.cells(), 0.0);
  std::vector<std::uint8_t> mask(dims.cells(), 0);
  for (const auto& r : rows) {
    CellIndex c{age_pos[r.age], r.subpop, r.area, year_pos[r.year]};
    std::size_t k = dims.index(c);
    if (mask[k]) {
      throw IntegrityError("duplicate key (" + ages.labels[r.age] + "," +
                           subpops.labels[r.subpop] + "," + areas.labels[r.area] + "," +
                           years.labels[r.year] + ") at line " + std::to_string(r.line));
    }
    if (r.deaths > 0 && r.population == 0) {
      throw IntegrityError("deaths with zero population for (" + ages.labels[r.age] + "," +
                           subpops.labels[r.subpop] + "," + areas.labels[r.area] + "," +
                           years.labels[r.year] + ") at line " + std::to_string(r.line));
    }
    deaths[k] = r.deaths;
    population[k] = r.population;
    mask[k] = 1;
  }
  return MortalityDataset(std::move(grid), std::move(subpops.labels), std::move(areas.labels),
                          std::move(year_labels), std::move(deaths), std::move(population),
                          std::move(mask));
}

MortalityDataset load_dataset(const std::filesystem::path& path) {
  auto in = open_input(path);
  return read_dataset(in);
}

void write_dataset(std::ostream& out, const MortalityDataset& d) {
  out << csv::join(kDatasetHeader) << '\n';
  const Dims& n = d.dims();
  for (std::size_t c = 0; c < n.areas; ++c) {
    for (std::size_t s = 0; s < n.subpops; ++s) {
      for (std::size_t t = 0; t < n.years; ++t) {
        for (std::size_t a = 0; a < n.ages; ++a) {
          CellIndex cell{a, s, c, t};
          if (!d.observed(cell)) continue;
          out << csv::join({d.age_grid().labels()[a], d.subpop_names()[s], d.area_names()[c],
                            d.year_labels()[t], std::to_string(d.deaths(cell)),
                            csv::format_double(d.population(cell))})
              << '\n';
        }
      }
    }
  }
}

void save_dataset(const std::filesystem::path& path, const MortalityDataset& d) {
  auto out = open_output(path);
  write_dataset(out, d);
}

std::vector<double> observed_log_rates(const MortalityDataset& d, double zero_code) {
  std::vector<double> out(d.dims().cells());
  auto deaths = d.deaths();
  auto pop = d.population();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (pop[i] <= 0) {
      out[i] = std::nan("");
    } else if (deaths[i] == 0) {
      out[i] = zero_code;
    } else {
      out[i] = std::log(static_cast<double>(deaths[i]) / pop[i]);
    }
  }
  return out;
}

HoldoutSplit holdout_split(const MortalityDataset& d, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("holdout fraction must lie in (0, 1)");
  }
  const Dims& n = d.dims();
  std::vector<std::vector<std::size_t>> by_area(n.areas);
  auto mask = d.mask();
  for (std::size_t k = 0; k < n.cells(); ++k) {
    if (mask[k]) by_area[n.cell(k).area].push_back(k);
  }

  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> train_mask(mask.begin(), mask.end());
  std::vector<CellIndex> test;
  for (auto& cells : by_area) {
    const auto take = static_cast<std::size_t>(std::floor(fraction * cells.size() + 0.5));
    // Partial Fisher-Yates: the first `take` slots become a uniform subset.
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, cells.size() - 1);
      std::swap(cells[i], cells[pick(rng)]);
    }
    std::vector<std::size_t> chosen(cells.begin(), cells.begin() + take);
    std::sort(chosen.begin(), chosen.end());
    for (auto k : chosen) {
      train_mask[k] = 0;
      test.push_back(n.cell(k));
    }
  }
  std::sort(test.begin(), test.end(), [&](const CellIndex& a, const CellIndex& b) {
    return std::tie(a.area, a.subpop, a.year, a.age) < std::tie(b.area, b.subpop, b.year, b.age);
  });
  return HoldoutSplit{d.with_mask(std::move(train_mask)), std::move(test)};
}

void write_cells(std::ostream& out, const MortalityDataset& d, std::span<const CellIndex> cells) {
  out << "age,subpop,area,year\n";
  for (const auto& c : cells) {
    out << csv::join({d.age_grid().labels()[c.age], d.subpop_names()[c.subpop],
                      d.area_names()[c.area], d.year_labels()[c.year]})
        << '\n';
  }
}

std::vector<CellIndex> read_cells(std::istream& in, const MortalityDataset& d) {
  std::string line;
  if (!csv::read_line(in, line) || csv::split_record(line) !=
                                        std::vector<std::string>{"age", "subpop", "area", "year"}) {
    throw ParseError("expected header 'age,subpop,area,year'", 1);
  }
  auto position = [](const std::vector<std::string>& labels, const std::string& v,
                     std::size_t line_no) {
    auto it = std::find(labels.begin(), labels.end(), v);
    if (it == labels.end()) throw IntegrityError("unknown label '" + v + "' at line " +
                                                 std::to_string(line_no));
    return static_cast<std::size_t>(it - labels.begin());
  };
  std::vector<CellIndex> cells;
  std::size_t line_no = 1;
  while (csv::read_line(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = csv::split_record(line);
    if (f.size() != 4) throw ParseError("expected 4 fields", line_no);
    cells.push_back(CellIndex{position(d.age_grid().labels(), f[0], line_no),
                              position(d.subpop_names(), f[1], line_no),
                              position(d.area_names(), f[2], line_no),
                              position(d.year_labels(), f[3], line_no)});
  }
  return cells;
}

void CurveCollection::validate() const {
  if (rows.cols() != static_cast<Eigen::Index>(age_grid.size())) {
    throw std::invalid_argument("curve collection width does not match the age grid");
  }
  if (row_meta.size() != static_cast<std::size_t>(rows.rows())) {
    throw std::invalid_argument("curve collection metadata does not match row count");
  }
  if (!rows.allFinite()) throw IntegrityError("curve collection has non-finite entries");
}

CurveCollection read_curves(std::istream& in) {
  std::string line;
  if (!csv::read_line(in, line)) throw ParseError("missing header", 1);
  auto header = csv::split_record(line);
  if (header.size() < 4 || header[0] != "subpop" || header[1] != "area" || header[2] != "year") {
    throw ParseError("expected header 'subpop,area,year,<age labels...>'", 1);
  }
  std::vector<std::string> age_labels(header.begin() + 3, header.end());
  std::vector<double> bounds;
  for (const auto& label : age_labels) {
    auto lb = AgeGrid::parse_lower_bound(label);
    bounds.push_back(lb ? *lb : static_cast<double>(bounds.size()));
  }
  AgeGrid grid = [&] {
    try {
      return AgeGrid(age_labels, bounds);
    } catch (const std::invalid_argument&) {
      std::vector<double> seq(age_labels.size());
      std::iota(seq.begin(), seq.end(), 0.0);
      return AgeGrid(age_labels, std::move(seq));
    }
  }();

  std::vector<std::vector<double>> values;
  std::vector<CurveMeta> meta;
  std::size_t line_no = 1;
  while (csv::read_line(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = csv::split_record(line);
    if (f.size() != header.size()) {
      throw ParseError("expected " + std::to_string(header.size()) + " fields", line_no);
    }
    std::vector<double> row;
    try {
      for (std::size_t j = 3; j < f.size(); ++j) row.push_back(csv::parse_double(f[j]));
    } catch (const std::exception& e) {
      throw ParseError(e.what(), line_no);
    }
    values.push_back(std::move(row));
    meta.push_back(CurveMeta{f[0], f[1], f[2]});
  }
  Eigen::MatrixXd m(values.size(), age_labels.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t j = 0; j < age_labels.size(); ++j) m(i, j) = values[i][j];
  }
  CurveCollection out{std::move(grid), std::move(m), std::move(meta)};
  out.validate();
  return out;
}

CurveCollection load_curves(const std::filesystem::path& path) {
  auto in = open_input(path);
  return read_curves(in);
}

void write_curves(std::ostream& out, const CurveCollection& curves) {
  std::vector<std::string> header = {"subpop", "area", "year"};
  for (const auto& l : curves.age_grid.labels()) header.push_back(l);
  out << csv::join(header) << '\n';
  for (Eigen::Index i = 0; i < curves.rows.rows(); ++i) {
    const auto& m = curves.row_meta[static_cast<std::size_t>(i)];
    std::vector<std::string> f = {m.subpop, m.area, m.year};
    for (Eigen::Index j = 0; j < curves.rows.cols(); ++j) {
      f.push_back(csv::format_double(curves.rows(i, j)));
    }
    out << csv::join(f) << '\n';
  }
}

}  // namespace submort
