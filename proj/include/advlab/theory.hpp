#pragma once

// Linear-model and Lipschitz theory made computable: Gaussian-mixture data,
// min-norm and max-margin solutions, gradient descent on the adversarial
// logistic loss, the exact robust error of the min-norm classifier with its
// closed-form constants, the difficulty-gap corollary, output bandwidths, and
// the Lipschitz lower bound.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advlab/attacks.hpp"
#include "advlab/csv.hpp"
#include "advlab/dataset.hpp"
#include "advlab/difficulty.hpp"
#include "advlab/errors.hpp"
#include "advlab/models.hpp"
#include "advlab/numkit.hpp"
#include "advlab/parallel.hpp"
#include "advlab/trainers.hpp"

namespace advlab {

// ---------------------------------------------------------------------------
// Gaussian mixture

/// Mode k has label-signed mean y r_k eta and identity covariance.
struct GmmSpec {
  Vector eta;
  Vector radii;
  Vector probs;

  std::size_t dim() const { return eta.size(); }
  std::size_t modes() const { return radii.size(); }

  void validate() const {
    if (eta.empty()) throw ValidationError("gmm: empty direction");
    if (std::abs(norm2(eta) - 1.0) > 1e-12) throw ValidationError("gmm: eta must have unit norm");
    if (radii.empty() || radii.size() != probs.size()) throw ValidationError("gmm: radii and probs must pair up");
    double total = 0.0;
    for (std::size_t k = 0; k < radii.size(); ++k) {
      if (!(radii[k] >= 0.0)) throw ValidationError("gmm: radii must be >= 0");
      if (k > 0 && !(radii[k] > radii[k - 1])) throw ValidationError("gmm: radii must be strictly increasing");
      if (!(probs[k] >= 0.0)) throw ValidationError("gmm: probs must be >= 0");
      total += probs[k];
    }
    if (std::abs(total - 1.0) > 1e-12) throw ValidationError("gmm: probs must sum to 1");
  }

  /// eta = e_1 in m dimensions.
  static GmmSpec axis(std::size_t m, Vector radii, Vector probs) {
    GmmSpec s{Vector(m, 0.0), std::move(radii), std::move(probs)};
    s.eta[0] = 1.0;
    return s;
  }
};

struct GmmSample {
  Matrix x;
  Vector y;                ///< +1 / -1
  std::vector<int> mode;   ///< component index per row
};

namespace detail {

inline std::size_t draw_mode(const Vector& probs, RngStream& r) {
  const double u = r.uniform();
  double acc = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    acc += probs[k];
    if (u < acc) return k;
  }
  return probs.size() - 1;
}

}  // namespace detail

/// Row i is drawn from rng.derive(i): label, then mode, then noise.
inline GmmSample gmm_sample(const GmmSpec& spec, std::size_t n, const RngStream& rng) {
  spec.validate();
  GmmSample s{Matrix(n, spec.dim()), Vector(n), std::vector<int>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    RngStream r = rng.derive(i);
    const double y = r.uniform() < 0.5 ? 1.0 : -1.0;
    const std::size_t k = detail::draw_mode(spec.probs, r);
    s.y[i] = y;
    s.mode[i] = static_cast<int>(k);
    auto row = s.x.row(i);
    for (std::size_t j = 0; j < spec.dim(); ++j) row[j] = y * spec.radii[k] * spec.eta[j] + r.normal();
  }
  return s;
}

/// Noise matrix Q with standard normal entries and balanced-by-chance labels.
inline std::pair<Matrix, Vector> gmm_noise(std::size_t n, std::size_t m, const RngStream& rng) {
  Matrix q(n, m);
  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    RngStream r = rng.derive(i);
    y[i] = r.uniform() < 0.5 ? 1.0 : -1.0;
    for (double& v : q.row(i)) v = r.normal();
  }
  return {std::move(q), std::move(y)};
}

/// X = r y etaᵀ + Q: n training points from the mode with radius r.
inline Matrix gmm_from_noise(const Matrix& q, std::span<const double> y, double r, std::span<const double> eta) {
  if (q.rows() != y.size() || q.cols() != eta.size()) throw ShapeError("gmm_from_noise: shape mismatch");
  Matrix x = q;
  for (std::size_t i = 0; i < q.rows(); ++i) axpy(r * y[i], eta, x.row(i));
  return x;
}

// ---------------------------------------------------------------------------
// Min-norm and max-margin solutions

/// w = Xᵀ (X Xᵀ)⁻¹ y.
inline LinearModel min_norm_interpolant(const Matrix& x, std::span<const double> y) {
  if (x.rows() != y.size()) throw ShapeError("min_norm_interpolant: label count does not match rows");
  if (x.rows() > x.cols()) throw ValidationError("min_norm_interpolant needs n <= m");
  const Vector alpha = solve_spd(gram_rows(x), y);
  return LinearModel(matvec_transposed(x, alpha));
}

/// Rows y_i x_i.
inline Matrix signed_rows(const Matrix& x, std::span<const double> y) {
  if (x.rows() != y.size()) throw ShapeError("label count does not match rows");
  Matrix z = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (double& v : z.row(i)) v *= y[i];
  return z;
}

struct MaxMarginResult {
  Vector w;           ///< argmin ||w|| s.t. y_i wᵀx_i >= 1
  Vector direction;   ///< w / ||w||
  Vector alpha;       ///< dual variables
  double kkt_residual = 0.0;
  std::size_t iterations = 0;
  std::optional<Vector> adversarial_w;  ///< solution with the -eps||w|| term, when requested
  std::optional<double> collinearity;   ///< cosine between the two directions
};

struct MaxMarginOptions {
  std::size_t max_iterations = 100000;
  double kkt_tolerance = 1e-8;
  std::size_t max_points = 200;
};

namespace detail {

inline double kkt_residual(const Matrix& z, std::span<const double> alpha, std::span<const double> w) {
  double r = 0.0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const double m = dot(z.row(i), w);
    r = std::max({r, 1.0 - m, alpha[i] * std::abs(m - 1.0), -alpha[i]});
  }
  return r;
}

/// Exact solve on the candidate support set: alpha_S = (Z_S Z_Sᵀ)⁻¹ 1.
inline std::optional<Vector> polish_support(const Matrix& z, std::span<const double> alpha) {
  const double amax = *std::max_element(alpha.begin(), alpha.end());
  if (!(amax > 0.0)) return std::nullopt;
  std::vector<std::size_t> s;
  for (std::size_t i = 0; i < alpha.size(); ++i)
    if (alpha[i] > 1e-7 * amax) s.push_back(i);
  if (s.size() > z.cols()) return std::nullopt;
  Matrix zs(s.size(), z.cols());
  for (std::size_t k = 0; k < s.size(); ++k) std::copy(z.row(s[k]).begin(), z.row(s[k]).end(), zs.row(k).begin());
  try {
    const Vector as = solve_spd(gram_rows(zs), Vector(s.size(), 1.0));
    Vector full(alpha.size(), 0.0);
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (as[k] < 0.0) return std::nullopt;
      full[s[k]] = as[k];
    }
    return full;
  } catch (const SingularityError&) {
    return std::nullopt;
  }
}

}  // namespace detail

/// Hard-margin direction through the origin via accelerated projected gradient
/// on the dual, polished by an exact solve on the detected support set.
inline MaxMarginResult max_margin_direction(const Matrix& x, std::span<const double> y,
                                            std::optional<double> epsilon = std::nullopt,
                                            const MaxMarginOptions& opt = {}) {
  if (x.rows() == 0) throw ValidationError("max_margin_direction: empty data");
  if (x.rows() > opt.max_points) throw ValidationError("max_margin_direction is limited to small instances");
  const Matrix z = signed_rows(x, y);
  const std::size_t n = z.rows();
  const Matrix k = gram_rows(z);
  const double sn = spectral_norm(z);
  if (!(sn > 0.0)) throw SeparabilityError("max_margin_direction: all-zero data");
  const double step = 1.0 / (sn * sn);

  MaxMarginResult res;
  Vector alpha(n, 0.0), prev(n, 0.0), yk(n, 0.0);
  double tk = 1.0;
  double best = std::numeric_limits<double>::infinity();
  auto objective = [&](std::span<const double> a) {
    const Vector ka = matvec(k, a);
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += 0.5 * a[i] * ka[i] - a[i];
    return s;
  };
  auto finish = [&](Vector a) {
    res.alpha = std::move(a);
    res.w = matvec_transposed(z, res.alpha);
    res.kkt_residual = detail::kkt_residual(z, res.alpha, res.w);
  };

  std::size_t it = 0;
  for (; it < opt.max_iterations; ++it) {
    const Vector grad = matvec(k, yk);
    for (std::size_t i = 0; i < n; ++i) alpha[i] = std::max(0.0, yk[i] - step * (grad[i] - 1.0));
    const double f = objective(alpha);
    if (f > best) {  // adaptive restart
      tk = 1.0;
      yk = alpha;
    } else {
      const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
      for (std::size_t i = 0; i < n; ++i) yk[i] = alpha[i] + ((tk - 1.0) / tn) * (alpha[i] - prev[i]);
      tk = tn;
    }
    best = std::min(best, f);
    prev = alpha;
    if ((it + 1) % 500 == 0) {
      if (auto p = detail::polish_support(z, alpha)) {
        const Vector w = matvec_transposed(z, *p);
        if (detail::kkt_residual(z, *p, w) <= opt.kkt_tolerance) {
          ++it;
          finish(std::move(*p));
          break;
        }
      }
    }
  }
  if (res.w.empty()) finish(alpha);
  res.iterations = it;

  const double wn = norm2(res.w);
  double min_margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) min_margin = std::min(min_margin, dot(z.row(i), res.w));
  if (!(wn > 0.0) || min_margin < 1.0 - 1e-6) throw SeparabilityError("data is not linearly separable through the origin");
  res.direction = scaled(res.w, 1.0 / wn);

  if (epsilon) {
    const double eps = *epsilon;
    if (!(1.0 / wn > eps)) throw SeparabilityError("data is not separable under the adversarial budget");
  }
  return res;
}

// ---------------------------------------------------------------------------
// Adversarial max-margin by a log-barrier Newton method (independent check)

/// argmin ||w|| s.t. y_i wᵀx_i - eps ||w|| >= 1, solved from a strictly
/// feasible start without using the collinearity result.
inline Vector adversarial_max_margin(const Matrix& x, std::span<const double> y, double eps, Vector w0) {
  const Matrix z = signed_rows(x, y);
  const std::size_t n = z.rows(), m = z.cols();
  auto constraint = [&](std::span<const double> w, std::size_t i) { return dot(z.row(i), w) - eps * norm2(w) - 1.0; };
  auto feasible = [&](std::span<const double> w) {
    for (std::size_t i = 0; i < n; ++i)
      if (!(constraint(w, i) > 0.0)) return false;
    return true;
  };
  if (!feasible(w0)) throw PreconditionError("adversarial_max_margin: start is not strictly feasible");

  Vector w = std::move(w0);
  auto barrier = [&](std::span<const double> v, double mu) {
    double f = 0.5 * dot(v, v);
    for (std::size_t i = 0; i < n; ++i) f -= mu * std::log(constraint(v, i));
    return f;
  };
  for (double mu = 1.0; mu >= 1e-13; mu *= 0.1) {
    for (int newton = 0; newton < 100; ++newton) {
      const double wn = norm2(w);
      Matrix h = Matrix::identity(m);
      Vector g = w;
      for (std::size_t i = 0; i < n; ++i) {
        const double c = constraint(w, i);
        Vector gi(z.row(i).begin(), z.row(i).end());
        axpy(-eps / wn, w, gi);
        axpy(-mu / c, gi, g);
        for (std::size_t a = 0; a < m; ++a)
          for (std::size_t b = 0; b < m; ++b) {
            // -log(c) has Hessian gi giᵀ / c² - Hc / c with Hc = -eps (I/|w| - w wᵀ/|w|³)
            const double hc = -eps * ((a == b ? 1.0 : 0.0) / wn - w[a] * w[b] / (wn * wn * wn));
            h(a, b) += mu * (gi[a] * gi[b] / (c * c) - hc / c);
          }
      }
      const Vector dir = solve_spd(h, scaled(g, -1.0));
      const double decrement = -dot(g, dir);
      if (decrement < 1e-20) break;
      double s = 1.0;
      const double f0 = barrier(w, mu);
      Vector cand(m);
      while (true) {
        for (std::size_t a = 0; a < m; ++a) cand[a] = w[a] + s * dir[a];
        if (feasible(cand) && barrier(cand, mu) <= f0 - 0.25 * s * decrement) break;
        s *= 0.5;
        if (s < 1e-16) break;
      }
      if (s < 1e-16) break;
      w = cand;
    }
  }
  return w;
}

/// Clean max-margin direction plus the independent adversarial solve and the
/// collinearity cosine between them.
inline MaxMarginResult max_margin_with_budget(const Matrix& x, std::span<const double> y, double eps,
                                              const RngStream& rng = RngStream(0, streams::kTheory),
                                              const MaxMarginOptions& opt = {}) {
  MaxMarginResult res = max_margin_direction(x, y, eps, opt);
  const Matrix z = signed_rows(x, y);
  // Strictly feasible start: a perturbed direction scaled until every constraint holds with room.
  RngStream r = rng.derive(0xAD);
  Vector u = res.direction;
  Vector noise(u.size());
  for (double& v : noise) v = r.normal();
  const double nn = norm2(noise);
  for (double scale = 0.2; scale > 1e-12; scale *= 0.5) {
    Vector cand = u;
    axpy(scale / nn, noise, cand);
    cand = scaled(cand, 1.0 / norm2(cand));
    double mn = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < z.rows(); ++i) mn = std::min(mn, dot(z.row(i), cand));
    if (mn - eps > 0.0) {
      u = scaled(cand, 2.0 / (mn - eps));
      break;
    }
  }
  if (norm2(u) <= 1.0 + 1e-15) {
    double mn = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < z.rows(); ++i) mn = std::min(mn, dot(z.row(i), u));
    u = scaled(u, 2.0 / (mn - eps));
  }
  res.adversarial_w = adversarial_max_margin(x, y, eps, u);
  res.collinearity = cosine(*res.adversarial_w, res.w);
  return res;
}

// ---------------------------------------------------------------------------
// Adversarial logistic regression

struct AdvLogisticLoss {
  double loss = 0.0;
  Vector grad;
};

/// sum_i log(1 + exp(-(y_i wᵀx_i - eps ||w||))); d||w|| is w/||w||, 0 at w = 0.
inline AdvLogisticLoss adv_logistic_loss(std::span<const double> w, const Matrix& x, std::span<const double> y,
                                         double eps) {
  if (x.cols() != w.size() || x.rows() != y.size()) throw ShapeError("adv_logistic_loss: shape mismatch");
  const double wn = norm2(w);
  AdvLogisticLoss out{0.0, Vector(w.size(), 0.0)};
  double shrink = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double margin = y[i] * dot(x.row(i), w) - eps * wn;
    out.loss += softplus(-margin);
    const double s = sigmoid(-margin);
    axpy(-s * y[i], x.row(i), out.grad);
    shrink += s;
  }
  if (wn > 0.0) axpy(eps * shrink / wn, w, out.grad);
  return out;
}

struct GdTrace {
  Vector w;
  std::vector<std::size_t> steps;
  std::vector<Vector> snapshots;
};

/// Full-batch gradient descent on the adversarial logistic loss. Snapshots are
/// kept every `record_every` steps (0 disables) plus the final iterate.
inline GdTrace adv_logreg_gd(const Matrix& x, std::span<const double> y, double eps, double step, std::size_t iters,
                             Vector w0, std::size_t record_every = 0) {
  const double sn = spectral_norm(x);
  if (!(step > 0.0) || step > 2.0 / (sn * sn) * (1.0 + 1e-12))
    throw ValidationError("adv_logreg_gd: step must be in (0, 2/||X||^2]");
  if (w0.size() != x.cols()) throw ShapeError("adv_logreg_gd: w0 length mismatch");
  GdTrace tr;
  tr.w = std::move(w0);
  for (std::size_t t = 1; t <= iters; ++t) {
    const AdvLogisticLoss l = adv_logistic_loss(tr.w, x, y, eps);
    axpy(-step, l.grad, tr.w);
    if ((record_every && t % record_every == 0) || t == iters) {
      tr.steps.push_back(t);
      tr.snapshots.push_back(tr.w);
    }
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Robust error of linear classifiers on the mixture

/// sum_k p_k Phi(r_k wᵀeta/||w|| - eps).
inline double robust_error_linear(const LinearModel& m, const GmmSpec& spec, double eps) {
  spec.validate();
  const double wn = norm2(m.weights());
  if (!(wn > 0.0)) throw ValidationError("robust_error_linear: zero weight vector");
  const double a = dot(m.weights(), spec.eta) / wn;
  double r = 0.0;
  for (std::size_t k = 0; k < spec.modes(); ++k) r += spec.probs[k] * normal_tail(spec.radii[k] * a - eps);
  return r;
}

struct MonteCarloEstimate {
  double mean = 0.0;
  double stderr_ = 0.0;
  std::size_t samples = 0;
};

namespace detail {

inline constexpr std::size_t kMonteCarloChunk = 1 << 15;

inline MonteCarloEstimate finish_estimate(std::span<const std::uint64_t> errors, std::size_t samples) {
  std::uint64_t total = 0;
  for (auto e : errors) total += e;
  const double p = static_cast<double>(total) / static_cast<double>(samples);
  return {p, std::sqrt(p * (1.0 - p) / static_cast<double>(samples)), samples};
}

}  // namespace detail

/// Adversarial 0-1 error under the closed-form l2 attack x - y eps w/||w||,
/// sampled in score space: y wᵀx' = r_k wᵀeta + ||w|| u - eps ||w|| with
/// u = y wᵀz/||w|| ~ N(0, 1). Chunked streams keep the result thread-count free.
inline MonteCarloEstimate monte_carlo_robust_error(const LinearModel& m, const GmmSpec& spec, double eps,
                                                   std::size_t samples, const RngStream& rng,
                                                   std::size_t threads = 1) {
  spec.validate();
  const double wn = norm2(m.weights());
  if (!(wn > 0.0)) throw ValidationError("monte_carlo_robust_error: zero weight vector");
  const double weta = dot(m.weights(), spec.eta);
  const std::size_t chunks = (samples + detail::kMonteCarloChunk - 1) / detail::kMonteCarloChunk;
  std::vector<std::uint64_t> errors(chunks, 0);
  parallel_for(chunks, threads, [&](std::size_t c) {
    RngStream r = rng.derive(c);
    const std::size_t lo = c * detail::kMonteCarloChunk, hi = std::min(samples, lo + detail::kMonteCarloChunk);
    std::uint64_t e = 0;
    for (std::size_t s = lo; s < hi; ++s) {
      const std::size_t k = detail::draw_mode(spec.probs, r);
      const double u = r.normal();
      e += spec.radii[k] * weta + wn * u - eps * wn < 0.0;
    }
    errors[c] = e;
  });
  return detail::finish_estimate(errors, samples);
}

/// Same estimate with full m-dimensional samples and the explicit attack.
inline MonteCarloEstimate monte_carlo_robust_error_full(const LinearModel& m, const GmmSpec& spec, double eps,
                                                        std::size_t samples, const RngStream& rng,
                                                        std::size_t threads = 1) {
  spec.validate();
  const AdversarialBudget b(Norm::L2, eps);
  const std::size_t chunks = (samples + detail::kMonteCarloChunk - 1) / detail::kMonteCarloChunk;
  std::vector<std::uint64_t> errors(chunks, 0);
  parallel_for(chunks, threads, [&](std::size_t c) {
    RngStream r = rng.derive(c);
    const std::size_t lo = c * detail::kMonteCarloChunk, hi = std::min(samples, lo + detail::kMonteCarloChunk);
    Vector xs(spec.dim());
    std::uint64_t e = 0;
    for (std::size_t s = lo; s < hi; ++s) {
      const double y = r.uniform() < 0.5 ? 1.0 : -1.0;
      const std::size_t k = detail::draw_mode(spec.probs, r);
      for (std::size_t j = 0; j < xs.size(); ++j) xs[j] = y * spec.radii[k] * spec.eta[j] + r.normal();
      const Vector xadv = linear_worst_case(m, xs, y, b);
      e += y * dot(m.weights(), xadv) < 0.0;
    }
    errors[c] = e;
  });
  return detail::finish_estimate(errors, samples);
}

// ---------------------------------------------------------------------------
// Exact robust error of the min-norm classifier

struct TheoremConstants {
  Matrix u;        ///< Q Qᵀ
  Vector d_vec;    ///< Q eta
  double s = 0.0;  ///< yᵀU⁻¹y
  double t = 0.0;  ///< dᵀU⁻¹d
  double v = 0.0;  ///< yᵀU⁻¹d
  double a = 0.0;  ///< ||eta||² - t
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 0.0;
  double g = 0.0;          ///< (C1 - 1/(C2 r² + C3))^½
  double alignment = 0.0;  ///< signed wᵀeta/||w|| of the min-norm interpolant
};

struct Theorem2Result {
  double error = 0.0;
  TheoremConstants constants;
};

struct Theorem2Options {
  double c2_scale = 1.0;  ///< fault injection: multiplies C2 before use
};

/// Constants for training data X from the mode with radius r_l:
/// Q = X - r_l y etaᵀ, U = QQᵀ, d = Q eta, s, t, v as quadratic forms in U⁻¹,
/// C1 = (s a + v²)/s, C2 = (s a + v²)/a, C3 = 2 v r_l / a + 1/a with a = ||eta||² - t.
inline TheoremConstants theorem2_constants(const Matrix& x, std::span<const double> y, std::span<const double> eta,
                                           double r_l, const Theorem2Options& opt = {}) {
  if (x.rows() != y.size() || x.cols() != eta.size()) throw ShapeError("theorem2: shape mismatch");
  Matrix q = x;
  for (std::size_t i = 0; i < q.rows(); ++i) axpy(-r_l * y[i], eta, q.row(i));
  TheoremConstants c;
  c.u = gram_rows(q);
  c.d_vec = matvec(q, eta);
  const Cholesky chol(c.u);
  const Vector uy = chol.solve(y), ud = chol.solve(c.d_vec);
  c.s = dot(y, uy);
  c.t = dot(c.d_vec, ud);
  c.v = dot(y, ud);
  const double eta2 = dot(eta, eta);
  c.a = eta2 - c.t;
  if (!(c.a > 1e-12 * eta2)) throw DomainError("theorem2: ||eta||^2 - t is not positive (numerical degeneracy)");
  if (!(c.s > 0.0)) throw DomainError("theorem2: s is not positive");
  const double num = c.s * c.a + c.v * c.v;
  c.c1 = num / c.s;
  c.c2 = opt.c2_scale * num / c.a;
  c.c3 = 2.0 * c.v * r_l / c.a + 1.0 / c.a;
  if (c.c1 < 0.0 || c.c2 < 0.0) throw DomainError("theorem2: C1 or C2 is negative");
  const double g2 = c.c1 - 1.0 / (c.c2 * r_l * r_l + c.c3);
  if (g2 < 0.0) throw DomainError("theorem2: negative g^2");
  c.g = std::sqrt(g2);
  const double denom = r_l * r_l * c.s * c.a + (r_l * c.v + 1.0) * (r_l * c.v + 1.0);
  c.alignment = (r_l * c.s * c.a + r_l * c.v * c.v + c.v) / std::sqrt(c.s * denom);
  return c;
}

inline double theorem2_error_from_g(const GmmSpec& spec, double g, double eps) {
  double r = 0.0;
  for (std::size_t k = 0; k < spec.modes(); ++k) r += spec.probs[k] * normal_tail(spec.radii[k] * g - eps);
  return r;
}

/// R(r_l, eps) = sum_k p_k Phi(r_k g(r_l) - eps).
inline Theorem2Result theorem2_error(const Matrix& x, std::span<const double> y, const GmmSpec& spec, double r_l,
                                     double eps, const Theorem2Options& opt = {}) {
  spec.validate();
  Theorem2Result res;
  res.constants = theorem2_constants(x, y, spec.eta, r_l, opt);
  res.error = theorem2_error_from_g(spec, res.constants.g, eps);
  return res;
}

/// Conditions under which the min-norm and max-margin solutions coincide with
/// high probability; returned as human-readable warnings, never enforced.
inline std::vector<std::string> theorem2_regime_warnings(std::size_t n, std::size_t m) {
  std::vector<std::string> w;
  const double nn = static_cast<double>(n);
  const double need = 10.0 * nn * std::log(nn) + nn - 1.0;
  if (!(static_cast<double>(m) > need))
    w.push_back("m = " + std::to_string(m) + " does not exceed 10 n log n + n - 1 = " + format_double(need));
  return w;
}

struct CorollaryResult {
  double gap1 = 0.0;  ///< R(r_i, eps1) - R(r_j, eps1)
  double gap2 = 0.0;  ///< R(r_i, eps2) - R(r_j, eps2)
  bool holds = false;  ///< gap1 < gap2
};

/// Evaluates both difficulty gaps with shared noise Q. Requires adversarial
/// separability under eps2 for both training sets (1/||w̄|| > eps2) and
/// r_k A(r_l) - eps2 > 0 for every mode, where A is the signed alignment.
inline CorollaryResult corollary_gap_check(const Matrix& q, std::span<const double> y, const GmmSpec& spec, double r_i,
                                           double r_j, double eps1, double eps2) {
  spec.validate();
  if (r_i > r_j) throw ValidationError("corollary: need r_i <= r_j");
  if (eps1 > eps2) throw ValidationError("corollary: need eps1 <= eps2");
  double g[2];
  const double radii[2] = {r_i, r_j};
  for (int s = 0; s < 2; ++s) {
    const Matrix x = gmm_from_noise(q, y, radii[s], spec.eta);
    const LinearModel w = min_norm_interpolant(x, y);
    if (!(1.0 / norm2(w.weights()) > eps2))
      throw PreconditionError("corollary: training set for r = " + format_double(radii[s]) +
                              " is not separable under eps2");
    const TheoremConstants c = theorem2_constants(x, y, spec.eta, radii[s]);
    for (double rk : spec.radii)
      if (!(rk * c.alignment - eps2 > 0.0))
        throw PreconditionError("corollary: r_k A - eps2 <= 0 for r = " + format_double(radii[s]));
    g[s] = c.g;
  }
  CorollaryResult out;
  out.gap1 = theorem2_error_from_g(spec, g[0], eps1) - theorem2_error_from_g(spec, g[1], eps1);
  out.gap2 = theorem2_error_from_g(spec, g[0], eps2) - theorem2_error_from_g(spec, g[1], eps2);
  out.holds = out.gap1 < out.gap2;
  return out;
}

// ---------------------------------------------------------------------------
// Bandwidth and the Lipschitz lower bound

/// Exact half-width of {wᵀ(x + delta)} over the budget: eps ||w||_2 or eps ||w||_1.
inline double bandwidth_linear(const LinearModel& m, const AdversarialBudget& b) {
  return b.epsilon * (b.norm == Norm::L2 ? norm2(m.weights()) : norm1(m.weights()));
}

/// Scalar output in [-1, 1]: tanh(z) for one logit, p_1 - p_0 for two.
inline double squashed_output(const MlpModel& m, std::span<const double> x) {
  const Vector z = logits(m, x);
  if (z.size() == 1) return std::tanh(z[0]);
  if (z.size() == 2) return std::tanh(0.5 * (z[1] - z[0]));
  throw ValidationError("squashed_output needs one or two outputs");
}

/// Sampled estimate (a lower estimate per instance) of the bandwidth of the
/// squashed output: min over instances of min(max f - f(x), f(x) - min f) across
/// `samples` random budget points.
inline double bandwidth_mlp_estimate(const MlpModel& m, const Dataset& data, const AdversarialBudget& b,
                                     std::size_t samples, const RngStream& rng, std::size_t threads = 1) {
  if (data.empty()) throw ValidationError("bandwidth estimate of an empty set");
  Vector h(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    RngStream r = rng.derive(i);
    const auto x = data.row(i);
    const double f0 = squashed_output(m, x);
    double lo = f0, hi = f0;
    for (std::size_t s = 0; s < samples; ++s) {
      const Vector xp = add(x, random_in_budget(b, x.size(), r));
      const double f = squashed_output(m, xp);
      lo = std::min(lo, f);
      hi = std::max(hi, f);
    }
    h[i] = std::min(hi - f0, f0 - lo);
  });
  return *std::min_element(h.begin(), h.end());
}

struct LowerBoundInputs {
  double gamma = 0.0;
  double n = 1.0;
  double m = 1.0;
  double c = 1.0;
  double b = 1.0;
  double W = 1.0;
  double J = 1.0;
  double delta = 0.1;
};

/// (gamma / 2^7) sqrt(n m / (c (b log(4WJ/gamma) - log(delta/2 - 2 exp(-2^-11 n gamma^2))))).
inline double lipschitz_lower_bound(const LowerBoundInputs& in) {
  if (!(in.gamma >= 0.0)) throw DomainError("lipschitz_lower_bound: gamma must be >= 0");
  if (!(in.delta > 0.0 && in.delta < 1.0)) throw DomainError("lipschitz_lower_bound: delta must be in (0, 1)");
  if (!(in.n >= 1.0 && in.m >= 1.0 && in.b >= 1.0)) throw DomainError("lipschitz_lower_bound: n, m, b must be >= 1");
  if (!(in.c > 0.0 && in.W > 0.0 && in.J > 0.0)) throw DomainError("lipschitz_lower_bound: c, W, J must be > 0");
  if (in.gamma == 0.0) return 0.0;
  const double tail = in.delta / 2.0 - 2.0 * std::exp(-std::ldexp(1.0, -11) * in.n * in.gamma * in.gamma);
  if (!(tail > 0.0))
    throw DomainError("lipschitz_lower_bound: delta/2 - 2 exp(-2^-11 n gamma^2) = " + format_double(tail) +
                      " is not positive");
  const double ratio = 4.0 * in.W * in.J / in.gamma;
  if (!(ratio > 1.0))
    throw DomainError("lipschitz_lower_bound: log argument 4WJ/gamma = " + format_double(ratio) + " is not > 1");
  const double denom = in.c * (in.b * std::log(ratio) - std::log(tail));
  return in.gamma / 128.0 * std::sqrt(in.n * in.m / denom);
}

/// E[Var(y | x)] for one mixture mode: E_{u ~ N(r, 1)} sech²(r u), by
/// composite Simpson quadrature over r ± 12.
inline double gmm_conditional_variance(double r) {
  if (!(r >= 0.0) || !std::isfinite(r)) throw DomainError("gmm_conditional_variance: r must be finite and >= 0");
  const int intervals = 4000;
  const double lo = r - 12.0, hi = r + 12.0, h = (hi - lo) / intervals;
  auto f = [&](double u) {
    const double c = std::cosh(r * u);
    return normal_pdf(u - r) / (c * c);
  };
  double s = f(lo) + f(hi);
  for (int i = 1; i < intervals; ++i) s += (i % 2 ? 4.0 : 2.0) * f(lo + i * h);
  return s * h / 3.0;
}

// ---------------------------------------------------------------------------
// Hard / easy Lipschitz experiment

struct SubsetRun {
  Selection selection = Selection::Random;
  std::vector<std::size_t> indices;
  Vector lipschitz;  ///< product upper bound; entry 0 is the untrained model, entry e+1 after epoch e
  std::vector<EpochRecord> records;
  MlpModel model;
};

struct HardEasyResult {
  std::vector<SubsetRun> runs;  ///< easiest, random, hardest
};

/// Trains one MLP per selection on k class-balanced instances, all from the
/// same initialization, and tracks the product-of-spectral-norms bound.
inline HardEasyResult hard_easy_lipschitz_experiment(const Dataset& train, const Dataset& test,
                                                     const DifficultyProfile& profile, const AdversarialBudget& b,
                                                     const TrainConfig& cfg, std::vector<std::size_t> dims,
                                                     std::size_t k, const RngStream& rng) {
  if (profile.size() != train.size()) throw ValidationError("profile does not match the training set");
  const MlpModel init = MlpModel::glorot(dims, rng.derive(streams::kInit));
  HardEasyResult out;
  for (Selection sel : {Selection::Easiest, Selection::Random, Selection::Hardest}) {
    SubsetRun run;
    run.selection = sel;
    run.indices = select_subset(profile, train.y, train.num_classes, sel, k, rng.derive(streams::kSelect));
    const Dataset sub = train.subset(run.indices);
    run.lipschitz.push_back(product_lipschitz_upper(init));
    TrainHooks<MlpModel> hooks;
    hooks.on_epoch = [&](std::size_t, const MlpModel& m) { run.lipschitz.push_back(product_lipschitz_upper(m)); };
    TrainOptions opt;
    opt.test = &test;
    auto res = run_training(init, sub, b, cfg, rng.derive(streams::kShuffle, static_cast<std::uint64_t>(sel)), opt, hooks);
    run.records = std::move(res.records);
    run.model = std::move(res.model);
    out.runs.push_back(std::move(run));
  }
  return out;
}

}  // namespace advlab
