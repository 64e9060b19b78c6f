#pragma once

// Synthetic dataset generators and CSV storage for datasets.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "advlab/csv.hpp"
#include "advlab/dataset.hpp"
#include "advlab/errors.hpp"
#include "advlab/rng.hpp"
#include "advlab/theory.hpp"

namespace advlab {

enum class DatasetKind { Gmm, Rings, Moons };

inline std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::Gmm: return "gmm";
    case DatasetKind::Rings: return "rings";
    case DatasetKind::Moons: return "moons";
  }
  return "?";
}

inline DatasetKind parse_dataset_kind(std::string_view s) {
  if (s == "gmm") return DatasetKind::Gmm;
  if (s == "rings") return DatasetKind::Rings;
  if (s == "moons" || s == "moons-like") return DatasetKind::Moons;
  throw ValidationError("unknown dataset kind '" + std::string(s) + "'");
}

struct DataParams {
  DatasetKind kind = DatasetKind::Rings;
  std::size_t n_train = 1000;
  std::size_t n_test = 1000;
  /// Probability that a training label is flipped (rings, moons). Test labels stay clean.
  double label_noise = 0.0;
  /// Gaussian jitter added to the clean geometry (rings, moons); 0 keeps classes apart.
  double overlap = 0.0;
  // gmm only
  std::size_t dim = 2;
  Vector radii{1.0};
  Vector probs{1.0};

  void validate() const {
    if (n_train < 1) throw ValidationError("data: n_train must be >= 1");
    if (!(label_noise >= 0.0 && label_noise < 0.5)) throw ValidationError("data: label_noise must be in [0, 0.5)");
    if (!(overlap >= 0.0) || !std::isfinite(overlap)) throw ValidationError("data: overlap must be >= 0");
    if (kind == DatasetKind::Gmm) {
      if (dim < 1) throw ValidationError("data: dim must be >= 1");
      GmmSpec::axis(dim, radii, probs).validate();
    }
  }
};

namespace detail {

/// Ring radius 1 for class 0 and 2 for class 1, each a band of width 0.5.
inline void ring_point(int label, double overlap, RngStream& r, std::span<double> out) {
  const double theta = 2.0 * std::numbers::pi * r.uniform();
  const double radius = (label == 0 ? 1.0 : 2.0) + 0.5 * (r.uniform() - 0.5) + overlap * r.normal();
  out[0] = radius * std::cos(theta);
  out[1] = radius * std::sin(theta);
}

inline void moon_point(int label, double overlap, RngStream& r, std::span<double> out) {
  const double theta = std::numbers::pi * r.uniform();
  if (label == 0) {
    out[0] = std::cos(theta);
    out[1] = std::sin(theta);
  } else {
    out[0] = 1.0 - std::cos(theta);
    out[1] = 0.5 - std::sin(theta);
  }
  out[0] += overlap * r.normal();
  out[1] += overlap * r.normal();
}

inline Dataset two_class_split(DatasetKind kind, std::size_t n, double overlap, double noise, const RngStream& rng,
                               std::vector<int>* flipped) {
  Dataset d;
  d.num_classes = 2;
  d.x = Matrix(n, 2);
  d.y.resize(n);
  if (flipped) flipped->assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    RngStream r = rng.derive(i);
    const int label = static_cast<int>(i % 2);
    if (kind == DatasetKind::Rings)
      ring_point(label, overlap, r, d.x.row(i));
    else
      moon_point(label, overlap, r, d.x.row(i));
    d.y[i] = label;
    if (noise > 0.0 && r.uniform() < noise) {
      d.y[i] = 1 - label;
      if (flipped) (*flipped)[i] = 1;
    }
  }
  return d;
}

inline Dataset gmm_split(const GmmSpec& spec, std::size_t n, const RngStream& rng, std::vector<int>* mode) {
  GmmSample s = gmm_sample(spec, n, rng);
  Dataset d;
  d.num_classes = 2;
  d.x = std::move(s.x);
  d.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.y[i] = s.y[i] > 0.0 ? 1 : 0;
  if (mode) *mode = std::move(s.mode);
  return d;
}

}  // namespace detail

/// Deterministic in (params, rng). Train rows come from rng.derive(kData, 0),
/// test rows from rng.derive(kData, 1). Rings and moons alternate class labels
/// so both splits are exactly balanced before noise.
inline DatasetBundle generate_dataset(const DataParams& p, const RngStream& rng) {
  p.validate();
  const RngStream tr = rng.derive(streams::kData, 0), te = rng.derive(streams::kData, 1);
  DatasetBundle b;
  if (p.kind == DatasetKind::Gmm) {
    const GmmSpec spec = GmmSpec::axis(p.dim, p.radii, p.probs);
    b.train = detail::gmm_split(spec, p.n_train, tr, &b.train_mode);
    b.test = detail::gmm_split(spec, p.n_test, te, nullptr);
    b.train_flipped.assign(p.n_train, 0);
  } else {
    b.train = detail::two_class_split(p.kind, p.n_train, p.overlap, p.label_noise, tr, &b.train_flipped);
    b.test = detail::two_class_split(p.kind, p.n_test, p.overlap, 0.0, te, nullptr);
  }
  return b;
}

// ---------------------------------------------------------------------------
// CSV storage: x0..x{d-1},label, with optional trailing metadata columns.

inline std::string dataset_csv(const Dataset& d, const OutputHeader& header, const std::vector<int>* flipped = nullptr,
                               const std::vector<int>* mode = nullptr) {
  std::string out = header.csv_lines();
  out += "# num_classes=" + std::to_string(d.num_classes) + "\n";
  for (std::size_t j = 0; j < d.dim(); ++j) out += "x" + std::to_string(j) + ",";
  out += "label";
  const bool has_flip = flipped && flipped->size() == d.size();
  const bool has_mode = mode && mode->size() == d.size();
  if (has_flip) out += ",flipped";
  if (has_mode) out += ",mode";
  out += "\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (double v : d.row(i)) out += format_double(v) + ",";
    out += std::to_string(d.y[i]);
    if (has_flip) out += "," + std::to_string((*flipped)[i]);
    if (has_mode) out += "," + std::to_string((*mode)[i]);
    out += "\n";
  }
  return out;
}

/// Reads columns x0.. and label; the class count comes from a
/// "# num_classes=" line when present, otherwise max label + 1 (at least 2).
inline Dataset parse_dataset_csv(const std::string& text, const std::string& origin) {
  const CsvTable t = parse_csv(text, origin);
  std::size_t dim = 0;
  while (std::find(t.header.begin(), t.header.end(), "x" + std::to_string(dim)) != t.header.end()) ++dim;
  if (dim == 0) throw ValidationError(origin + ": no feature columns x0..");
  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < dim; ++j) cols.push_back(t.column("x" + std::to_string(j)));
  const std::size_t lc = t.column("label");
  Dataset d;
  d.x = Matrix(t.rows.size(), dim);
  d.y.resize(t.rows.size());
  int max_label = 1;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const std::string where = origin + " row " + std::to_string(i + 1);
    for (std::size_t j = 0; j < dim; ++j) d.x(i, j) = parse_double(t.rows[i][cols[j]], where);
    d.y[i] = static_cast<int>(parse_int(t.rows[i][lc], where));
    max_label = std::max(max_label, d.y[i]);
  }
  d.num_classes = static_cast<std::size_t>(max_label) + 1;
  const std::string key = "# num_classes=";
  for (std::size_t pos = 0; (pos = text.find(key, pos)) != std::string::npos; pos += key.size())
    if (pos == 0 || text[pos - 1] == '\n') {
      const std::size_t end = text.find('\n', pos);
      d.num_classes = static_cast<std::size_t>(
          parse_int(trim(text.substr(pos + key.size(), end - pos - key.size())), origin + " num_classes"));
      break;
    }
  d.validate();
  return d;
}

inline Dataset read_dataset_csv(const std::string& path) { return parse_dataset_csv(read_file(path), path); }

}  // namespace advlab
