#include "submort/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "submort/csv.hpp"

namespace submort {

namespace {

constexpr char kMagic[8] = {'S', 'M', 'D', 'R', 'A', 'W', 'S', '1'};

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int k = 0; k < 8; ++k) r |= ((v >> (8 * k)) & 0xffu) << (8 * (7 - k));
    return r;
  }
}

void put_u64(std::ostream& out, std::uint64_t v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), 8);
}

void put_f64(std::ostream& out, double x) { put_u64(out, std::bit_cast<std::uint64_t>(x)); }

std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), 8)) {
    throw std::runtime_error("draw file is truncated");
  }
  return to_little(v);
}

double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

}  // namespace

void write_chain(std::ostream& out, const ChainResult& chain, std::size_t chain_index) {
  const auto dim = static_cast<std::uint64_t>(chain.draws.rows());
  const auto n = static_cast<std::uint64_t>(chain.draws.cols());
  if (chain.stats.size() != n || static_cast<std::uint64_t>(chain.inv_metric.size()) != dim) {
    throw std::invalid_argument("inconsistent chain result");
  }
  out.write(kMagic, sizeof kMagic);
  put_u64(out, chain_index);
  put_u64(out, dim);
  put_u64(out, n);
  put_f64(out, chain.step_size);
  for (Eigen::Index k = 0; k < chain.inv_metric.size(); ++k) put_f64(out, chain.inv_metric[k]);
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(chain.draws.data()),
              static_cast<std::streamsize>(8 * dim * n));
  } else {
    for (Eigen::Index d = 0; d < chain.draws.cols(); ++d) {
      for (Eigen::Index k = 0; k < chain.draws.rows(); ++k) put_f64(out, chain.draws(k, d));
    }
  }
  for (const auto& s : chain.stats) {
    put_f64(out, s.accept_stat);
    put_f64(out, s.step_size);
    put_f64(out, s.energy);
    put_f64(out, s.log_density);
    put_u64(out, static_cast<std::uint64_t>(static_cast<std::int64_t>(s.tree_depth)));
    put_u64(out, static_cast<std::uint64_t>(static_cast<std::int64_t>(s.n_leapfrog)));
    put_u64(out, s.divergent ? 1u : 0u);
  }
  if (!out) throw std::runtime_error("failed writing draw file");
}

ChainResult read_chain(std::istream& in, std::size_t* chain_index) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("not a draw file (bad magic)");
  }
  const std::uint64_t index = get_u64(in);
  const std::uint64_t dim = get_u64(in);
  const std::uint64_t n = get_u64(in);
  if (chain_index) *chain_index = static_cast<std::size_t>(index);
  ChainResult c;
  c.step_size = get_f64(in);
  c.inv_metric.resize(static_cast<Eigen::Index>(dim));
  for (Eigen::Index k = 0; k < c.inv_metric.size(); ++k) c.inv_metric[k] = get_f64(in);
  c.draws.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(n));
  if constexpr (std::endian::native == std::endian::little) {
    if (!in.read(reinterpret_cast<char*>(c.draws.data()), static_cast<std::streamsize>(8 * dim * n))) {
      throw std::runtime_error("draw file is truncated");
    }
  } else {
    for (Eigen::Index d = 0; d < c.draws.cols(); ++d) {
      for (Eigen::Index k = 0; k < c.draws.rows(); ++k) c.draws(k, d) = get_f64(in);
    }
  }
  c.stats.resize(n);
  for (auto& s : c.stats) {
    s.accept_stat = get_f64(in);
    s.step_size = get_f64(in);
    s.energy = get_f64(in);
    s.log_density = get_f64(in);
    s.tree_depth = static_cast<int>(static_cast<std::int64_t>(get_u64(in)));
    s.n_leapfrog = static_cast<int>(static_cast<std::int64_t>(get_u64(in)));
    s.divergent = get_u64(in) != 0;
  }
  return c;
}

void save_chain(const std::filesystem::path& path, const ChainResult& chain,
                std::size_t chain_index) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_chain(out, chain, chain_index);
}

ChainResult load_chain(const std::filesystem::path& path, std::size_t* chain_index) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_chain(in, chain_index);
}

void write_draws_csv(std::ostream& out, const PosteriorSamples& samples,
                     const std::vector<std::string>& names) {
  if (names.size() != samples.dim) throw std::invalid_argument("one name per parameter required");
  out << "chain,iter,parameter,value\n";
  for (std::size_t c = 0; c < samples.chains.size(); ++c) {
    const auto& draws = samples.chains[c].draws;
    for (Eigen::Index d = 0; d < draws.cols(); ++d) {
      for (Eigen::Index k = 0; k < draws.rows(); ++k) {
        out << c << ',' << d << ',' << csv::escape(names[static_cast<std::size_t>(k)]) << ','
            << csv::format_double(draws(k, d)) << '\n';
      }
    }
  }
}

}  // namespace submort
