#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "shiftdiff/errors.hpp"
#include "shiftdiff/state.hpp"

namespace shiftdiff {

/// Plain CSV writer; doubles are printed with full round-trip precision and
/// infinities as "inf".
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
    out_.precision(std::numeric_limits<double>::max_digits10);
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << '\n';
    width_ = header.size();
  }

  void row(const std::vector<double>& values) {
    if (values.size() != width_) throw ArgumentError("CsvWriter: row width does not match header");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) out_ << ',';
      write(values[i]);
    }
    out_ << '\n';
    if (!out_) throw IoError("CSV write failed");
  }

 private:
  void write(double v) {
    if (std::isinf(v)) out_ << (v > 0 ? "inf" : "-inf");
    else if (std::isnan(v)) out_ << "nan";
    else out_ << v;
  }

  std::ofstream out_;
  std::size_t width_ = 0;
};

inline std::vector<std::string> dim_columns(const std::string& prefix, Eigen::Index d) {
  std::vector<std::string> cols;
  for (Eigen::Index j = 0; j < d; ++j) cols.push_back(prefix + std::to_string(j));
  return cols;
}

inline void write_batch_csv(const std::filesystem::path& path, const StateBatch& x) {
  CsvWriter w(path, dim_columns("x", x.cols()));
  std::vector<double> row(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) row[j] = x(i, j);
    w.row(row);
  }
}

/// Reads a numeric CSV with one header line.
inline StateBatch read_batch_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> r;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
    if (!rows.empty() && r.size() != rows.front().size()) throw IoError("ragged CSV " + path.string());
    rows.push_back(std::move(r));
  }
  if (rows.empty()) throw IoError("empty CSV " + path.string());
  StateBatch x(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) x(i, j) = rows[i][j];
  return x;
}

inline void ensure_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw IoError("cannot create output directory " + dir.string());
  }
  const auto probe = dir / ".write_probe";
  {
    std::ofstream p(probe);
    if (!p) throw IoError("output directory " + dir.string() + " is not writable");
  }
  std::filesystem::remove(probe, ec);
}

}  // namespace shiftdiff
