#pragma once

// Instance difficulty: per-epoch loss histories, the rank-based difficulty
// score, D-distance, decile groups, and per-group analytics.
//
// d(x_i) = (#{j : L_i < L_j} + 0.5 #{j : L_i == L_j}) / n with j over all n
// instances (self included). Profiles keep the integer numerator
// 2 #greater + #ties so the mean-0.5 identity can be checked exactly.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "advlab/attacks.hpp"
#include "advlab/csv.hpp"
#include "advlab/dataset.hpp"
#include "advlab/errors.hpp"
#include "advlab/models.hpp"
#include "advlab/parallel.hpp"

namespace advlab {

enum class PerturbationKind { Clean, Fgsm, Pgd, Custom };

inline std::string_view to_string(PerturbationKind k) {
  switch (k) {
    case PerturbationKind::Clean: return "clean";
    case PerturbationKind::Fgsm: return "fgsm";
    case PerturbationKind::Pgd: return "pgd";
    case PerturbationKind::Custom: return "custom";
  }
  return "custom";
}

inline PerturbationKind parse_perturbation_kind(std::string_view s) {
  if (s == "clean") return PerturbationKind::Clean;
  if (s == "fgsm") return PerturbationKind::Fgsm;
  if (s == "pgd") return PerturbationKind::Pgd;
  if (s == "custom") return PerturbationKind::Custom;
  throw ValidationError("unknown perturbation kind '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Histories

/// Per-epoch perturbed losses for a fixed instance set.
class LossHistory {
 public:
  LossHistory() = default;
  explicit LossHistory(std::size_t instances) : n_(instances) {}

  std::size_t instances() const { return n_; }
  std::size_t epochs() const { return epochs_.size(); }
  std::span<const double> epoch(std::size_t e) const { return epochs_.at(e); }
  double at(std::size_t epoch, std::size_t instance) const { return epochs_.at(epoch).at(instance); }

  void record_epoch(std::span<const double> losses) {
    if (losses.size() != n_) throw ShapeError("loss history: epoch length does not match instance count");
    for (double v : losses)
      if (!std::isfinite(v) || v < 0.0) throw ValidationError("loss history: losses must be finite and >= 0");
    epochs_.emplace_back(losses.begin(), losses.end());
  }

  /// Mean over epochs, summed in epoch order.
  Vector average_losses() const {
    if (n_ == 0 || epochs_.empty()) throw ValidationError("loss history is empty");
    Vector avg(n_, 0.0);
    for (const Vector& e : epochs_)
      for (std::size_t i = 0; i < n_; ++i) avg[i] += e[i];
    for (double& v : avg) v /= static_cast<double>(epochs_.size());
    return avg;
  }

  /// Binary form: "ADVLABH1", u64 instances, u64 epochs, f64 values epoch-major.
  std::string encode() const {
    std::string out(kMagic);
    detail::put_u64(out, n_);
    detail::put_u64(out, epochs_.size());
    for (const Vector& e : epochs_)
      for (double v : e) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
  }

  static LossHistory decode(std::string_view bytes) {
    if (bytes.substr(0, kMagic.size()) != kMagic) throw IoError("bad loss history magic");
    std::size_t pos = kMagic.size();
    const std::uint64_t n = detail::get_u64(bytes, pos);
    const std::uint64_t epochs = detail::get_u64(bytes, pos);
    if (bytes.size() != pos + 8 * n * epochs) throw IoError("loss history payload size mismatch");
    LossHistory h(static_cast<std::size_t>(n));
    Vector row(static_cast<std::size_t>(n));
    for (std::uint64_t e = 0; e < epochs; ++e) {
      for (auto& v : row) v = std::bit_cast<double>(detail::get_u64(bytes, pos));
      h.record_epoch(row);
    }
    return h;
  }

  bool operator==(const LossHistory&) const = default;

  static constexpr std::string_view kMagic = "ADVLABH1";

 private:
  std::size_t n_ = 0;
  std::vector<Vector> epochs_;
};

/// Per-epoch correctness flags (true = classified correctly under the perturbation).
class CorrectnessHistory {
 public:
  CorrectnessHistory() = default;
  explicit CorrectnessHistory(std::size_t instances) : n_(instances) {}

  std::size_t instances() const { return n_; }
  std::size_t epochs() const { return epochs_.size(); }

  void record_epoch(const std::vector<bool>& correct) {
    if (correct.size() != n_) throw ShapeError("correctness history: epoch length does not match instance count");
    epochs_.push_back(correct);
  }

  Vector average_errors() const {
    if (n_ == 0 || epochs_.empty()) throw ValidationError("correctness history is empty");
    Vector avg(n_, 0.0);
    for (const auto& e : epochs_)
      for (std::size_t i = 0; i < n_; ++i) avg[i] += e[i] ? 0.0 : 1.0;
    for (double& v : avg) v /= static_cast<double>(epochs_.size());
    return avg;
  }

 private:
  std::size_t n_ = 0;
  std::vector<std::vector<bool>> epochs_;
};

// ---------------------------------------------------------------------------
// Difficulty

struct DifficultyProfile {
  Vector avg_loss;
  Vector d;
  std::vector<std::uint64_t> numerators;  ///< 2 #greater + #ties; d = numerator / (2n)
  PerturbationKind kind = PerturbationKind::Custom;

  std::size_t size() const { return d.size(); }
};

/// Rank-based difficulty of arbitrary scores (higher score = harder).
/// Sorts once, so the cost is O(n log n).
inline DifficultyProfile difficulty_from_scores(std::span<const double> scores,
                                                PerturbationKind kind = PerturbationKind::Custom) {
  const std::size_t n = scores.size();
  if (n == 0) throw ValidationError("difficulty of an empty set");
  for (double s : scores)
    if (std::isnan(s)) throw ValidationError("difficulty: NaN score");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  DifficultyProfile p;
  p.kind = kind;
  p.avg_loss.assign(scores.begin(), scores.end());
  p.numerators.assign(n, 0);
  p.d.assign(n, 0.0);
  for (std::size_t start = 0; start < n;) {
    std::size_t end = start + 1;
    while (end < n && scores[order[end]] == scores[order[start]]) ++end;
    const std::uint64_t ties = end - start;
    const std::uint64_t greater = n - end;
    const std::uint64_t num = 2 * greater + ties;
    for (std::size_t k = start; k < end; ++k) p.numerators[order[k]] = num;
    start = end;
  }
  const double denom = 2.0 * static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) p.d[i] = static_cast<double>(p.numerators[i]) / denom;
  return p;
}

inline DifficultyProfile compute_difficulty(const LossHistory& history,
                                            PerturbationKind kind = PerturbationKind::Custom) {
  return difficulty_from_scores(history.average_losses(), kind);
}

/// Same rank construction on the average 0-1 error.
inline DifficultyProfile zero_one_difficulty(const CorrectnessHistory& history,
                                             PerturbationKind kind = PerturbationKind::Custom) {
  return difficulty_from_scores(history.average_errors(), kind);
}

/// True iff the numerators sum to n^2, i.e. the mean difficulty is exactly 1/2.
inline bool has_exact_half_mean(const DifficultyProfile& p) {
  std::uint64_t sum = 0;
  for (std::uint64_t v : p.numerators) sum += v;
  const std::uint64_t n = p.numerators.size();
  return sum == n * n;
}

inline double d_distance(std::span<const double> d1, std::span<const double> d2) {
  if (d1.size() != d2.size()) throw ValidationError("d_distance: profiles cover different instance counts");
  if (d1.empty()) throw ValidationError("d_distance: empty profiles");
  double s = 0.0;
  for (std::size_t i = 0; i < d1.size(); ++i) s += std::abs(d1[i] - d2[i]);
  return s / static_cast<double>(d1.size());
}

inline double d_distance(const DifficultyProfile& a, const DifficultyProfile& b) { return d_distance(a.d, b.d); }

// ---------------------------------------------------------------------------
// Decile groups

inline constexpr std::size_t kGroupCount = 10;

/// floor(10 d) with d = 1 folded into the last group.
inline int group_for_difficulty(double d) {
  if (!(d >= 0.0 && d <= 1.0)) throw DomainError("difficulty outside [0, 1]");
  return std::min(static_cast<int>(std::floor(10.0 * d)), 9);
}

struct GroupPartition {
  std::vector<int> group_of;

  std::size_t size() const { return group_of.size(); }

  std::vector<std::size_t> members(int g) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < group_of.size(); ++i)
      if (group_of[i] == g) out.push_back(i);
    return out;
  }

  std::array<std::size_t, kGroupCount> counts() const {
    std::array<std::size_t, kGroupCount> c{};
    for (int g : group_of) ++c[static_cast<std::size_t>(g)];
    return c;
  }
};

/// Groups from the exact numerators, so bucket edges never suffer rounding.
inline GroupPartition partition_groups(const DifficultyProfile& p) {
  GroupPartition part;
  part.group_of.resize(p.size());
  const std::uint64_t denom = 2 * static_cast<std::uint64_t>(p.size());
  for (std::size_t i = 0; i < p.size(); ++i)
    part.group_of[i] = static_cast<int>(std::min<std::uint64_t>(10 * p.numerators[i] / denom, 9));
  return part;
}

// ---------------------------------------------------------------------------
// Class-balanced subset selection

enum class Selection { Easiest, Random, Hardest };

inline std::string_view to_string(Selection s) {
  switch (s) {
    case Selection::Easiest: return "easiest";
    case Selection::Random: return "random";
    case Selection::Hardest: return "hardest";
  }
  return "random";
}

inline Selection parse_selection(std::string_view s) {
  for (Selection v : {Selection::Easiest, Selection::Random, Selection::Hardest})
    if (to_string(v) == s) return v;
  throw ValidationError("unknown selection '" + std::string(s) + "'");
}

/// k/C instances from each class: the highest-d (easiest), lowest-d (hardest)
/// or a uniform sample. Ties in d break by index. Returned in ascending index
/// order.
inline std::vector<std::size_t> select_subset(const DifficultyProfile& p, std::span<const int> labels,
                                              std::size_t num_classes, Selection sel, std::size_t k,
                                              const RngStream& rng = RngStream(0, streams::kSelect)) {
  if (labels.size() != p.size()) throw ValidationError("selection: labels do not match profile");
  if (num_classes == 0 || k == 0 || k % num_classes != 0)
    throw ValidationError("selection size must be a positive multiple of the class count");
  const std::size_t per_class = k / num_classes;
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == static_cast<int>(c)) members.push_back(i);
    if (members.size() < per_class)
      throw ValidationError("class " + std::to_string(c) + " has " + std::to_string(members.size()) +
                            " instances, selection needs " + std::to_string(per_class));
    if (sel == Selection::Random) {
      RngStream r = rng.derive(c);
      r.shuffle(std::span<std::size_t>(members));
    } else {
      std::stable_sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
        return sel == Selection::Easiest ? p.numerators[a] > p.numerators[b] : p.numerators[a] < p.numerators[b];
      });
    }
    chosen.insert(chosen.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(per_class));
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

// ---------------------------------------------------------------------------
// Group analytics

struct GroupStats {
  std::array<std::size_t, kGroupCount> count{};
  std::array<std::optional<double>, kGroupCount> mean_loss;
  std::array<std::optional<double>, kGroupCount> mean_feature_norm;
  /// cosine[a][b] between group-mean parameter gradients; absent if either group is empty.
  std::array<std::array<std::optional<double>, kGroupCount>, kGroupCount> cosine;
};

struct GroupStatsOptions {
  bool gradient_cosine = true;
  std::size_t threads = 1;
  std::size_t block = 256;
};

/// Attacks every instance (rng derived per index), then reports per-group mean
/// adversarial loss, mean penultimate norm on the adversarial input, and the
/// cosine matrix of group-mean gradients. Per-instance work runs in parallel;
/// reductions run in index order.
template <Classifier Model>
GroupStats group_stats(const Model& m, const Dataset& data, const GroupPartition& part,
                       const AdversarialBudget& budget, const AttackConfig& attack, const RngStream& rng,
                       const GroupStatsOptions& opt = {}) {
  if (part.size() != data.size()) throw ValidationError("group partition does not cover the dataset");
  const std::size_t n = data.size();
  const std::size_t np = m.num_params();
  GroupStats out;
  std::array<double, kGroupCount> loss_sum{}, norm_sum{};
  std::vector<Vector> grad_sum(opt.gradient_cosine ? kGroupCount : 0, Vector(np, 0.0));

  const std::size_t block = std::max<std::size_t>(1, opt.block);
  Vector losses(block), norms(block);
  std::vector<Vector> grads(opt.gradient_cosine ? block : 0);
  for (std::size_t lo = 0; lo < n; lo += block) {
    const std::size_t hi = std::min(n, lo + block);
    parallel_for(hi - lo, opt.threads, [&](std::size_t k) {
      const std::size_t i = lo + k;
      const LossTarget target = label_target(m.num_outputs(), data.y[i], data.num_classes);
      const Vector xadv = pgd(m, data.row(i), target, budget, attack, rng.derive(i));
      auto tr = forward_trace(m, xadv);
      const LogitLoss ll = loss_on_logits(trace_logits(tr), target);
      losses[k] = ll.loss;
      norms[k] = norm2(trace_penultimate(tr));
      if (opt.gradient_cosine) {
        grads[k].assign(np, 0.0);
        backward(m, tr, ll.dlogits, 1.0, grads[k], {});
      }
    });
    for (std::size_t i = lo; i < hi; ++i) {
      const auto g = static_cast<std::size_t>(part.group_of[i]);
      if (g >= kGroupCount) throw ValidationError("group index out of range");
      ++out.count[g];
      loss_sum[g] += losses[i - lo];
      norm_sum[g] += norms[i - lo];
      if (opt.gradient_cosine) axpy(1.0, grads[i - lo], grad_sum[g]);
    }
  }
  for (std::size_t g = 0; g < kGroupCount; ++g) {
    if (out.count[g] == 0) continue;
    const double c = static_cast<double>(out.count[g]);
    out.mean_loss[g] = loss_sum[g] / c;
    out.mean_feature_norm[g] = norm_sum[g] / c;
  }
  if (opt.gradient_cosine) {
    for (std::size_t a = 0; a < kGroupCount; ++a)
      for (std::size_t b = 0; b < kGroupCount; ++b)
        if (out.count[a] && out.count[b]) out.cosine[a][b] = cosine(grad_sum[a], grad_sum[b]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Profile CSV: instance_id, avg_loss, difficulty, group, perturbation_kind

inline std::string profile_csv(const DifficultyProfile& p, const OutputHeader& header) {
  const GroupPartition part = partition_groups(p);
  std::string out = header.csv_lines();
  out += "instance_id,avg_loss,difficulty,group,perturbation_kind\n";
  for (std::size_t i = 0; i < p.size(); ++i) {
    out += std::to_string(i) + "," + format_double(p.avg_loss[i]) + "," + format_double(p.d[i]) + "," +
           std::to_string(part.group_of[i]) + "," + std::string(to_string(p.kind)) + "\n";
  }
  return out;
}

/// Rebuilds a profile from its CSV; difficulties are recomputed from avg_loss
/// and must agree with the stored column.
inline DifficultyProfile parse_profile_csv(std::string_view text, const std::string& origin = "<memory>") {
  const CsvTable t = parse_csv(text, origin);
  const std::size_t c_id = t.column("instance_id"), c_loss = t.column("avg_loss"), c_d = t.column("difficulty"),
                    c_kind = t.column("perturbation_kind");
  if (t.rows.empty()) throw ValidationError(origin + ": profile has no rows");
  Vector loss(t.rows.size());
  Vector stored(t.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (parse_int(t.rows[r][c_id], "instance_id") != static_cast<long long>(r))
      throw ValidationError(origin + ": instance ids must be 0..n-1 in order");
    loss[r] = parse_double(t.rows[r][c_loss], "avg_loss");
    stored[r] = parse_double(t.rows[r][c_d], "difficulty");
  }
  DifficultyProfile p = difficulty_from_scores(loss, parse_perturbation_kind(t.rows[0][c_kind]));
  if (p.d != stored) throw ValidationError(origin + ": difficulty column disagrees with avg_loss ranks");
  return p;
}

}  // namespace advlab
