// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dataset loading, synthesis and evaluation. CSV layout: header row
// "f0,...,f{D-1},label", one numeric row per example.

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "dpmc/accountant.hpp"
#include "dpmc/error.hpp"
#include "dpmc/model.hpp"
#include "dpmc/rng.hpp"
#include "dpmc/tensor.hpp"

namespace dpmc {

struct Dataset {
  std::string name = "dataset";
  std::size_t feature_dim = 0;
  std::size_t class_count = 0;
  std::vector<double> features;  // row-major [N x feature_dim]
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }

  std::span<const double> row(std::size_t i) const {
    return {features.data() + i * feature_dim, feature_dim};
  }

  double default_delta() const { return dpmc::default_delta(size()); }

  Tensor features_of(std::span<const std::size_t> indices) const {
    Tensor x({indices.size(), feature_dim});
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const auto r = row(indices[k]);
      std::copy(r.begin(), r.end(), x.data() + k * feature_dim);
    }
    return x;
  }

  std::vector<int> labels_of(std::span<const std::size_t> indices) const {
    std::vector<int> y(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) y[k] = labels[indices[k]];
    return y;
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return cells;
}

inline double parse_double_cell(const std::string& cell, std::size_t line_no) {
  double value = 0.0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || ptr != end) {
    throw DataError("csv line " + std::to_string(line_no) +
                    ": cell '" + cell + "' is not a number");
  }
  return value;
}

/// Shortest round-trip decimal form of a double.
inline std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Parses a CSV dataset. When `expected_classes` is nonzero, labels must lie
/// in [0, expected_classes); otherwise the class count is inferred as
/// max(label) + 1. Row order is preserved.
inline Dataset load_csv(const std::filesystem::path& path,
                        std::size_t expected_classes = 0) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  Dataset ds;
  ds.name = path.stem().string();
  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = detail::split_csv_line(line);
  if (header.size() < 2 || header.back() != "label") {
    throw DataError(path.string() + ": header must be f0,...,f{D-1},label");
  }
  ds.feature_dim = header.size() - 1;
  for (std::size_t i = 0; i < ds.feature_dim; ++i) {
    if (header[i] != "f" + std::to_string(i)) {
      throw DataError(path.string() + ": unexpected header column '" + header[i] + "'");
    }
  }
  std::size_t line_no = 1;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != ds.feature_dim + 1) {
      throw DataError("csv line " + std::to_string(line_no) + ": expected " +
                      std::to_string(ds.feature_dim + 1) + " cells, got " +
                      std::to_string(cells.size()));
    }
    for (std::size_t i = 0; i < ds.feature_dim; ++i) {
      ds.features.push_back(detail::parse_double_cell(cells[i], line_no));
    }
    const double raw = detail::parse_double_cell(cells.back(), line_no);
    const int label = static_cast<int>(raw);
    if (raw != static_cast<double>(label) || label < 0) {
      throw DataError("csv line " + std::to_string(line_no) +
                      ": label must be a non-negative integer");
    }
    if (expected_classes != 0 &&
        static_cast<std::size_t>(label) >= expected_classes) {
      throw DataError("csv line " + std::to_string(line_no) + ": label " +
                      std::to_string(label) + " out of range for " +
                      std::to_string(expected_classes) + " classes");
    }
    max_label = std::max(max_label, label);
    ds.labels.push_back(label);
  }
  if (ds.labels.empty()) throw DataError(path.string() + " has no data rows");
  ds.class_count = expected_classes != 0
                       ? expected_classes
                       : static_cast<std::size_t>(max_label + 1);
  return ds;
}

inline void save_csv(const Dataset& ds, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t i = 0; i < ds.feature_dim; ++i) out << 'f' << i << ',';
  out << "label\n";
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (std::size_t i = 0; i < ds.feature_dim; ++i) {
      out << detail::format_double(ds.features[r * ds.feature_dim + i]) << ',';
    }
    out << ds.labels[r] << '\n';
  }
}

/// Gaussian-cluster classification data. Class means sit at
/// separation * (random unit vector); features are mean + N(0, I).
/// separation = 0 makes every class-conditional identical. Labels cycle
/// round-robin so classes are balanced. Deterministic per seed.
inline Dataset make_synthetic(std::size_t classes, std::size_t n,
                              std::size_t dim, std::uint64_t seed,
                              double separation) {
  if (classes < 2) throw ConfigError("make_synthetic: need at least 2 classes");
  if (n == 0 || dim == 0) throw ConfigError("make_synthetic: empty dataset");
  Dataset ds;
  ds.name = "synthetic";
  ds.feature_dim = dim;
  ds.class_count = classes;
  GaussianSampler g(seed);
  std::vector<double> means(classes * dim);
  for (std::size_t c = 0; c < classes; ++c) {
    double norm = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      means[c * dim + j] = g.next();
      norm += means[c * dim + j] * means[c * dim + j];
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < dim; ++j) {
      means[c * dim + j] *= separation / norm;
    }
  }
  ds.features.resize(n * dim);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    ds.labels[i] = static_cast<int>(c);
    for (std::size_t j = 0; j < dim; ++j) {
      ds.features[i * dim + j] = means[c * dim + j] + g.next();
    }
  }
  return ds;
}

/// Fraction of rows whose argmax logit hits the label. Logit ties go to the
/// lowest class index.
inline double evaluate(const LayeredClassifier& model, const Dataset& ds) {
  if (ds.feature_dim != model.dims().input_dim) {
    throw ShapeError("evaluate: dataset feature_dim " +
                     std::to_string(ds.feature_dim) + " vs model input_dim " +
                     std::to_string(model.dims().input_dim));
  }
  if (ds.class_count > model.dims().classes) {
    throw ShapeError("evaluate: dataset has more classes than the model");
  }
  const std::size_t chunk = 256;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t end = std::min(ds.size(), start + chunk);
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    const Tensor logits = model.forward(ds.features_of(idx));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < logits.cols(); ++j) {
        if (logits.at(k, j) > logits.at(k, best)) best = j;
      }
      if (static_cast<int>(best) == ds.labels[idx[k]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace dpmc
