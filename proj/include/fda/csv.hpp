#pragma once

#include <fstream>
#include <initializer_list>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fda/error.hpp"
#include "fda/numkit/matrix.hpp"

namespace fda {

/// Comma-separated output; doubles are printed with 17 significant digits so
/// they read back bit-identically.
class CsvWriter {
 public:
  using Cell = std::variant<std::string, std::size_t, double>;

  CsvWriter(const std::string& path, std::initializer_list<std::string_view> header) : path_(path), out_(path) {
    if (!out_) fail(ErrorCode::Io, "cannot write '" + path + "'");
    out_ << std::setprecision(17);
    row_strings(header);
  }

  void row(std::initializer_list<Cell> cells) {
    bool first = true;
    for (const Cell& c : cells) {
      if (!first) out_ << ',';
      first = false;
      std::visit([this](const auto& v) { out_ << v; }, c);
    }
    out_ << '\n';
    if (!out_) fail(ErrorCode::Io, "write failed for '" + path_ + "'");
  }

 private:
  void row_strings(std::initializer_list<std::string_view> cells) {
    bool first = true;
    for (auto c : cells) {
      if (!first) out_ << ',';
      first = false;
      out_ << c;
    }
    out_ << '\n';
  }

  std::string path_;
  std::ofstream out_;
};

/// Headerless numeric CSV, one matrix row per line.
inline void write_matrix_csv(const std::string& path, const Matrix& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write '" + path + "'");
  out << std::setprecision(17);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out << (j ? "," : "") << m(i, j);
    out << '\n';
  }
  if (!out) fail(ErrorCode::Io, "write failed for '" + path + "'");
}

inline Matrix read_matrix_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot read '" + path + "'");
  std::vector<double> vals;
  std::size_t rows = 0, cols = 0;
  std::string line, cell;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::size_t c = 0;
    while (std::getline(ls, cell, ',')) {
      try {
        vals.push_back(std::stod(cell));
      } catch (const std::exception&) {
        fail(ErrorCode::FormatViolation, path + ": not a number '" + cell + "'");
      }
      ++c;
    }
    require(rows == 0 || c == cols, ErrorCode::FormatViolation, path + ": ragged row " + std::to_string(rows + 1));
    cols = c;
    ++rows;
  }
  require(rows > 0, ErrorCode::FormatViolation, path + ": empty matrix file");
  return Matrix(rows, cols, std::move(vals));
}

}  // namespace fda
