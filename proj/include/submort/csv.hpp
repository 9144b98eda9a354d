#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace submort::csv {

/// Splits one CSV record. Double-quoted fields may contain commas and
/// doubled quotes; surrounding whitespace is kept as-is.
std::vector<std::string> split_record(std::string_view line);

/// Quotes a field only when it needs it.
std::string escape(std::string_view field);

/// Shortest decimal string that parses back to the same double.
std::string format_double(double x);

std::string join(const std::vector<std::string>& fields);

/// Reads a line, stripping a trailing '\r'. Returns false at end of input.
bool read_line(std::istream& in, std::string& line);

double parse_double(std::string_view text);
std::int64_t parse_int(std::string_view text);

}  // namespace submort::csv
