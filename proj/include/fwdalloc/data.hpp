#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fwdalloc/model.hpp"
#include "fwdalloc/rng.hpp"

namespace fwdalloc {

struct Dataset {
  std::vector<Datum> train;
  std::vector<Datum> test;
  std::size_t num_features = 0;
  std::size_t num_classes = 0;
  std::vector<std::string> warnings;

  [[nodiscard]] std::size_t size() const noexcept { return train.size() + test.size(); }
};

enum class DatasetKind { two_moons, blobs, xor_clusters, csv };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::two_moons;
  std::size_t n = 1000;
  double noise = 0.1;        // two_moons / xor jitter
  std::size_t classes = 3;   // blobs
  double spread = 1.0;       // blobs std around each center
  std::string path;          // csv
  std::string label_column = "label";
  double test_fraction = 0.2;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Per-class shuffle, then the first (1 - test_fraction) of each class trains.
inline void stratified_split(std::vector<Datum> points, std::size_t num_classes, double test_fraction,
                             RngStream rng, Dataset& out) {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < points.size(); ++i) by_class[static_cast<std::size_t>(points[i].label)].push_back(i);
  std::vector<bool> is_test(points.size(), false);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto stream = rng.at(c);
    shuffle(by_class[c], stream);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(by_class[c].size())));
    for (std::size_t k = 0; k < n_test; ++k) is_test[by_class[c][k]] = true;
  }
  for (std::size_t i = 0; i < points.size(); ++i) (is_test[i] ? out.test : out.train).push_back(std::move(points[i]));
}

}  // namespace detail

/// Toy classification sets in two dimensions; class sizes differ by at most one.
inline Dataset generate_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.kind == DatasetKind::csv) throw DatasetError("generate_dataset: csv data must be loaded, not generated");
  if (spec.n < 10) throw DatasetError("generate_dataset: need n >= 10, got " + std::to_string(spec.n));
  if (!(spec.noise >= 0.0)) throw DatasetError("generate_dataset: noise must be >= 0");
  if (!(spec.test_fraction >= 0.0 && spec.test_fraction < 1.0))
    throw DatasetError("generate_dataset: test fraction must be in [0, 1)");
  const RngStream root(seed, {static_cast<std::uint64_t>(Purpose::data)});
  auto noise = root.child(1);
  Dataset ds;
  ds.num_features = 2;
  std::vector<Datum> points;
  points.reserve(spec.n);

  switch (spec.kind) {
    case DatasetKind::two_moons: {
      ds.num_classes = 2;
      const std::size_t n_upper = (spec.n + 1) / 2;
      const std::size_t n_lower = spec.n - n_upper;
      auto arc = [](std::size_t k, std::size_t count) {
        return count > 1 ? std::numbers::pi * static_cast<double>(k) / static_cast<double>(count - 1) : 0.0;
      };
      for (std::size_t k = 0; k < n_upper; ++k) {
        const double t = arc(k, n_upper);
        points.push_back({{std::cos(t), std::sin(t)}, 0, {}});
      }
      for (std::size_t k = 0; k < n_lower; ++k) {
        const double t = arc(k, n_lower);
        points.push_back({{1.0 - std::cos(t), 0.5 - std::sin(t)}, 1, {}});
      }
      for (auto& p : points)
        for (auto& v : p.x) v += spec.noise * noise.normal();
      break;
    }
    case DatasetKind::blobs: {
      if (spec.classes < 2) throw DatasetError("generate_dataset: blobs needs at least 2 classes");
      if (!(spec.spread > 0.0)) throw DatasetError("generate_dataset: blobs spread must be positive");
      ds.num_classes = spec.classes;
      auto centers = root.child(2);
      std::vector<Vector> c(spec.classes);
      for (auto& ci : c) ci = {20.0 * centers.uniform() - 10.0, 20.0 * centers.uniform() - 10.0};
      for (std::size_t i = 0; i < spec.n; ++i) {
        const std::size_t k = i % spec.classes;
        points.push_back({{c[k][0] + spec.spread * noise.normal(), c[k][1] + spec.spread * noise.normal()},
                          static_cast<int>(k), {}});
      }
      break;
    }
    case DatasetKind::xor_clusters: {
      ds.num_classes = 2;
      // Clusters at (+-1, +-1); the label is the parity of the two signs.
      for (std::size_t i = 0; i < spec.n; ++i) {
        const std::size_t q = i % 4;
        const double sx = (q & 1) ? 1.0 : -1.0;
        const double sy = (q & 2) ? 1.0 : -1.0;
        const int label = (q == 1 || q == 2) ? 1 : 0;
        points.push_back({{sx + spec.noise * noise.normal(), sy + spec.noise * noise.normal()}, label, {}});
      }
      break;
    }
    case DatasetKind::csv: break;
  }
  detail::stratified_split(std::move(points), ds.num_classes, spec.test_fraction, root.child(3), ds);
  return ds;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_cell(const std::string& cell, std::size_t line_no, const std::string& column) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (cell.empty() || used != cell.size() || !std::isfinite(v))
    throw DatasetError("line " + std::to_string(line_no) + ": column '" + column + "': non-numeric cell '" + cell +
                       "'");
  return v;
}

}  // namespace detail

/// Reads a header-named CSV. Every column except `label_column` is a feature;
/// features are standardized with statistics from the training split only.
inline Dataset load_csv_dataset(const std::string& path, const std::string& label_column, std::uint64_t seed = 0,
                                double test_fraction = 0.2) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open dataset file '" + path + "'");
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw DatasetError("'" + path + "' is empty");
  ++line_no;
  const auto header = detail::split_csv_line(line);
  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end()) {
    std::string names;
    for (const auto& h : header) names += (names.empty() ? "" : ", ") + h;
    throw DatasetError("label column '" + label_column + "' not found; available columns: " + names);
  }
  const auto label_idx = static_cast<std::size_t>(label_it - header.begin());

  Dataset ds;
  ds.num_features = header.size() - 1;
  std::vector<Datum> points;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw DatasetError("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size()) +
                         " cells, found " + std::to_string(cells.size()));
    Datum d;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const double v = detail::parse_cell(cells[c], line_no, header[c]);
      if (c == label_idx) {
        if (v < 0.0 || v != std::floor(v))
          throw DatasetError("line " + std::to_string(line_no) + ": label '" + cells[c] +
                             "' is not a nonnegative integer");
        d.label = static_cast<int>(v);
      } else {
        d.x.push_back(v);
      }
    }
    max_label = std::max(max_label, d.label);
    points.push_back(std::move(d));
  }
  if (points.empty()) throw DatasetError("'" + path + "' has a header but no rows");
  ds.num_classes = static_cast<std::size_t>(max_label + 1);
  detail::stratified_split(std::move(points), ds.num_classes, test_fraction,
                           RngStream(seed, {static_cast<std::uint64_t>(Purpose::data), 3}), ds);

  const auto& stats_rows = ds.train.empty() ? ds.test : ds.train;
  for (std::size_t f = 0; f < ds.num_features; ++f) {
    double mean = 0.0;
    for (const auto& d : stats_rows) mean += d.x[f];
    mean /= static_cast<double>(stats_rows.size());
    double var = 0.0;
    for (const auto& d : stats_rows) var += (d.x[f] - mean) * (d.x[f] - mean);
    var /= static_cast<double>(stats_rows.size());
    const double sd = std::sqrt(var);
    const std::size_t col = f < label_idx ? f : f + 1;
    if (!(sd > 0.0)) ds.warnings.push_back("feature '" + header[col] + "' is constant; standardized to zero");
    for (auto* split : {&ds.train, &ds.test})
      for (auto& d : *split) d.x[f] = sd > 0.0 ? (d.x[f] - mean) / sd : 0.0;
  }
  return ds;
}

inline Dataset load_dataset(const DatasetSpec& spec, std::uint64_t seed) {
  if (spec.kind == DatasetKind::csv) return load_csv_dataset(spec.path, spec.label_column, seed, spec.test_fraction);
  return generate_dataset(spec, seed);
}

/// Writes every point (train then test) as x0,...,label.
inline void write_csv_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write '" + path + "'");
  for (std::size_t f = 0; f < ds.num_features; ++f) out << 'x' << f << ',';
  out << "label\n";
  char buf[32];
  for (const auto* split : {&ds.train, &ds.test})
    for (const auto& d : *split) {
      for (double v : d.x) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out << buf << ',';
      }
      out << d.label << '\n';
    }
}

}  // namespace fwdalloc
