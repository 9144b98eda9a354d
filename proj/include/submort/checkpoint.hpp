#pragma once

#include <cstddef>
#include <filesystem>
#include <istream>
#include <ostream>

#include "submort/nuts.hpp"

namespace submort {

/// Binary per-chain draw file. All numbers are little-endian.
///
///   offset  size       field
///   0       8          magic "SMDRAWS1"
///   8       8          uint64 chain index
///   16      8          uint64 dim
///   24      8          uint64 number of draws
///   32      8          float64 adapted step size
///   40      8*dim      float64 inverse metric diagonal
///   ...     8*dim*n    float64 draws, one unconstrained vector per draw in
///                      ParameterLayout order
///   ...     56*n       per draw: accept_stat, step_size, energy, log_density
///                      (float64), tree_depth, n_leapfrog, divergent (int64)
void write_chain(std::ostream& out, const ChainResult& chain, std::size_t chain_index);
ChainResult read_chain(std::istream& in, std::size_t* chain_index = nullptr);

void save_chain(const std::filesystem::path& path, const ChainResult& chain,
                std::size_t chain_index);
ChainResult load_chain(const std::filesystem::path& path, std::size_t* chain_index = nullptr);

/// Writes the long-format CSV `chain,iter,parameter,value` for every draw.
void write_draws_csv(std::ostream& out, const PosteriorSamples& samples,
                     const std::vector<std::string>& names);

}  // namespace submort
