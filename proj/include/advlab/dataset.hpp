#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "advlab/errors.hpp"
#include "advlab/linalg.hpp"

namespace advlab {

/// Labeled feature rows; labels are class indices 0..num_classes-1.
struct Dataset {
  Matrix x;
  std::vector<int> y;
  std::size_t num_classes = 2;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return x.cols(); }
  bool empty() const { return y.empty(); }
  std::span<const double> row(std::size_t i) const { return x.row(i); }

  void validate() const {
    if (x.rows() != y.size()) throw ShapeError("dataset: feature rows and labels differ in count");
    for (int label : y)
      if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
        throw ValidationError("dataset: label " + std::to_string(label) + " out of class range");
    if (!all_finite(x.data())) throw ValidationError("dataset: non-finite feature");
  }

  /// Rows selected by `indices`, in that order.
  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out;
    out.num_classes = num_classes;
    out.x = Matrix(indices.size(), dim());
    out.y.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
      const auto r = row(indices[k]);
      std::copy(r.begin(), r.end(), out.x.row(k).begin());
      out.y.push_back(y[indices[k]]);
    }
    return out;
  }

  /// Labels as {-1, +1} for binary linear models (class 1 -> +1).
  Vector signed_labels() const {
    Vector s(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) s[i] = y[i] == 1 ? 1.0 : -1.0;
    return s;
  }

  bool operator==(const Dataset&) const = default;
};

/// Train/test split plus optional per-instance metadata from the generator.
struct DatasetBundle {
  Dataset train;
  Dataset test;
  std::vector<int> train_flipped;  ///< 1 where the generator flipped the label
  std::vector<int> train_mode;     ///< mixture component per train row (gmm only)

  bool operator==(const DatasetBundle&) const = default;
};

}  // namespace advlab
