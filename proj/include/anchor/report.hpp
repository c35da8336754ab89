#ifndef ANCHOR_REPORT_HPP_
#define ANCHOR_REPORT_HPP_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <stdexcept>
#include <string>
#include <vector>

namespace anchor {

// Per-step training log with run metadata, exportable as CSV.
struct TrainReport {
  std::string label;
  uint64_t seed = 0;
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
  double wall_seconds = 0.0;

  double at(size_t row, const std::string& column) const {
    for (size_t c = 0; c < columns.size(); ++c)
      if (columns[c] == column) return rows[row][c];
    throw std::runtime_error("TrainReport: no column " + column);
  }

  void write_csv(const std::string& path) const {
    const std::filesystem::path target(path);
    if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("TrainReport: cannot open " + path);
    for (size_t c = 0; c < columns.size(); ++c) os << (c ? "," : "") << columns[c];
    os << '\n';
    os << std::setprecision(10);
    for (const auto& row : rows) {
      for (size_t c = 0; c < row.size(); ++c) os << (c ? "," : "") << row[c];
      os << '\n';
    }
    if (!os) throw std::runtime_error("TrainReport: write failed for " + path);
  }
};

}  // namespace anchor

#endif  // ANCHOR_REPORT_HPP_
