#pragma once

// Adversarial budgets and attacks: FGSM, PGD with random starts and restarts,
// the closed-form worst case for linear models, and the per-instance
// perturbation cache used by accelerated adversarial training.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "advlab/errors.hpp"
#include "advlab/models.hpp"
#include "advlab/numkit.hpp"

namespace advlab {

enum class Norm { Linf, L2 };

inline std::string_view to_string(Norm n) { return n == Norm::Linf ? "linf" : "l2"; }

/// The l_p ball of radius epsilon around an input.
struct AdversarialBudget {
  Norm norm = Norm::Linf;
  double epsilon = 0.0;

  AdversarialBudget() = default;
  AdversarialBudget(Norm n, double eps) : norm(n), epsilon(eps) {
    if (!(eps >= 0.0) || !std::isfinite(eps)) throw ValidationError("budget epsilon must be finite and >= 0");
  }
  AdversarialBudget with_epsilon(double eps) const { return {norm, eps}; }

  double measure(std::span<const double> delta) const { return norm == Norm::Linf ? norm_inf(delta) : norm2(delta); }
  bool contains(std::span<const double> delta, double slack = 1e-12) const { return measure(delta) <= epsilon + slack; }
};

struct AttackConfig {
  std::size_t steps = 10;
  double step_size = 0.0;
  bool random_init = true;
  std::size_t restarts = 1;

  /// 10 steps of size epsilon / 4, one random start.
  static AttackConfig defaults_for(const AdversarialBudget& b) { return {10, b.epsilon / 4.0, true, 1}; }

  void validate() const {
    if (steps < 1) throw ValidationError("attack steps must be >= 1");
    if (!(step_size > 0.0)) throw ValidationError("attack step size must be > 0");
    if (restarts < 1) throw ValidationError("attack restarts must be >= 1");
  }
};

/// Projects delta onto the budget in place: clamp for l-inf, radial rescale for l2.
inline void project(std::span<double> delta, const AdversarialBudget& b) {
  if (b.norm == Norm::Linf) {
    for (double& d : delta) d = std::clamp(d, -b.epsilon, b.epsilon);
  } else {
    const double n = norm2(delta);
    if (n > b.epsilon) {
      const double s = b.epsilon / n;
      for (double& d : delta) d *= s;
    }
  }
}

/// Uniform sample from the budget (per-coordinate for l-inf; uniform in the ball for l2).
inline Vector random_in_budget(const AdversarialBudget& b, std::size_t dim, RngStream& rng) {
  Vector d(dim);
  if (b.norm == Norm::Linf) {
    for (double& v : d) v = rng.uniform(-b.epsilon, b.epsilon);
    return d;
  }
  for (double& v : d) v = rng.normal();
  const double n = norm2(d);
  const double radius = b.epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(dim));
  for (double& v : d) v = n > 0.0 ? v * radius / n : 0.0;
  return d;
}

/// Unit ascent direction for a gradient under the budget's norm: sign(g) for
/// l-inf, g/||g|| for l2 (zero when g is zero).
inline Vector ascent_direction(std::span<const double> g, Norm norm) {
  Vector d(g.size(), 0.0);
  if (norm == Norm::Linf) {
    for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    return d;
  }
  const double n = norm2(g);
  if (n == 0.0) return d;
  for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] / n;
  return d;
}

/// One-step attack x + eps * sign(grad) (normalized gradient under l2).
template <Classifier Model>
Vector fgsm(const Model& m, std::span<const double> x, const LossTarget& target, const AdversarialBudget& b) {
  Vector out(x.begin(), x.end());
  if (b.epsilon == 0.0) return out;
  const auto lg = loss_and_input_grad(m, x, target);
  axpy(b.epsilon, ascent_direction(lg.input_grad, b.norm), out);
  return out;
}

/// Multi-step PGD with optional random starts; returns the highest-loss
/// iterate over all restarts (initial points included).
template <Classifier Model>
Vector pgd(const Model& m, std::span<const double> x, const LossTarget& target, const AdversarialBudget& b,
           const AttackConfig& cfg, RngStream rng) {
  Vector best(x.begin(), x.end());
  if (b.epsilon == 0.0) return best;
  cfg.validate();
  double best_loss = -std::numeric_limits<double>::infinity();
  Vector xadv(x.size());
  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    Vector delta = cfg.random_init ? random_in_budget(b, x.size(), rng) : Vector(x.size(), 0.0);
    for (std::size_t s = 0;; ++s) {
      for (std::size_t i = 0; i < x.size(); ++i) xadv[i] = x[i] + delta[i];
      const auto lg = loss_and_input_grad(m, xadv, target);
      if (lg.loss > best_loss) {
        best_loss = lg.loss;
        best = xadv;
      }
      if (s == cfg.steps) break;
      axpy(cfg.step_size, ascent_direction(lg.input_grad, b.norm), delta);
      project(delta, b);
    }
  }
  return best;
}

/// Exact maximizer of the logistic loss of a linear score over the budget:
/// x - y*eps*w/||w|| (l2) or x - y*eps*sign(w) (l-inf).
inline Vector linear_worst_case(const LinearModel& m, std::span<const double> x, double y, const AdversarialBudget& b) {
  if (x.size() != m.input_dim()) throw ShapeError("input length does not match model");
  Vector out(x.begin(), x.end());
  const Vector& w = m.weights();
  const double wn = norm2(w);
  if (wn == 0.0 || b.epsilon == 0.0) return out;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double dir = b.norm == Norm::L2 ? w[i] / wn : (w[i] > 0.0 ? 1.0 : (w[i] < 0.0 ? -1.0 : 0.0));
    out[i] -= y * b.epsilon * dir;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Perturbation cache

/// One cached perturbation per training instance, each kept inside the budget.
/// Distinct slots may be written concurrently.
class PerturbationCache {
 public:
  enum class Init { Zero, Random };

  PerturbationCache() = default;
  PerturbationCache(std::size_t count, std::size_t dim, const AdversarialBudget& b, Init init = Init::Zero,
                    const RngStream& rng = RngStream(0, streams::kCache))
      : count_(count), dim_(dim), deltas_(count * dim, 0.0) {
    if (init == Init::Random) {
      for (std::size_t i = 0; i < count; ++i) {
        RngStream r = rng.derive(i);
        const Vector d = random_in_budget(b, dim, r);
        std::copy(d.begin(), d.end(), deltas_.begin() + static_cast<std::ptrdiff_t>(i * dim));
      }
    }
  }

  std::size_t size() const { return count_; }
  std::size_t dim() const { return dim_; }

  std::span<double> delta(std::size_t i) {
    check(i);
    return std::span<double>(deltas_).subspan(i * dim_, dim_);
  }
  std::span<const double> delta(std::size_t i) const {
    check(i);
    return std::span<const double>(deltas_).subspan(i * dim_, dim_);
  }

 private:
  void check(std::size_t i) const {
    if (i >= count_) throw LookupError("perturbation cache index " + std::to_string(i) + " out of range");
  }

  std::size_t count_ = 0;
  std::size_t dim_ = 0;
  Vector deltas_;
};

/// One signed-gradient step from the cached perturbation, projected back into
/// the budget. Stores the new perturbation and returns x + delta.
template <Classifier Model>
Vector atta_update(PerturbationCache& cache, std::size_t index, const Model& m, std::span<const double> x,
                   const LossTarget& target, const AdversarialBudget& b, double step_size) {
  std::span<double> delta = cache.delta(index);
  if (delta.size() != x.size()) throw ShapeError("cached perturbation length does not match input");
  Vector xadv = add(x, delta);
  const auto lg = loss_and_input_grad(m, xadv, target);
  axpy(step_size, ascent_direction(lg.input_grad, b.norm), delta);
  project(delta, b);
  for (std::size_t i = 0; i < x.size(); ++i) xadv[i] = x[i] + delta[i];
  return xadv;
}

}  // namespace advlab
