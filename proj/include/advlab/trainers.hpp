#pragma once

// Training procedures: vanilla, FGSM and PGD adversarial training, the
// instance-adaptive budget variant (IAT), self-adaptive targets (SAT), fast
// adversarial training with cached perturbations, reweighting and adaptive
// targets, and the reweighted KL fine-tuning objective.
//
// Every method runs through one mini-batch loop: per-instance work (attacks,
// losses, gradients) fans out over worker threads into per-index slots, then
// the batch gradient is reduced in batch order and applied by SGD with
// momentum. Results are therefore independent of the worker count.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "advlab/attacks.hpp"
#include "advlab/csv.hpp"
#include "advlab/dataset.hpp"
#include "advlab/difficulty.hpp"
#include "advlab/errors.hpp"
#include "advlab/models.hpp"
#include "advlab/parallel.hpp"

namespace advlab {

enum class Method { Vanilla, FgsmAt, PgdAt, Iat, Sat, FastAt, Finetune };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::Vanilla: return "vanilla";
    case Method::FgsmAt: return "fgsm_at";
    case Method::PgdAt: return "pgd_at";
    case Method::Iat: return "iat";
    case Method::Sat: return "sat";
    case Method::FastAt: return "fast_at";
    case Method::Finetune: return "finetune";
  }
  return "vanilla";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::Vanilla, Method::FgsmAt, Method::PgdAt, Method::Iat, Method::Sat, Method::FastAt,
                   Method::Finetune})
    if (to_string(m) == s) return m;
  throw ValidationError("unknown training method '" + std::string(s) + "'");
}

/// Piecewise-constant learning rate: each point (e, r) applies r from epoch e on.
struct LrSchedule {
  std::vector<std::pair<std::size_t, double>> points{{0, 0.1}};

  /// base until epochs/2, base/10 until 3*epochs/4, base/100 after.
  static LrSchedule step_decay(double base, std::size_t epochs) {
    LrSchedule s;
    s.points = {{0, base}, {epochs / 2, base / 10.0}, {3 * epochs / 4, base / 100.0}};
    return s;
  }

  double rate(std::size_t epoch) const {
    double r = points.front().second;
    for (const auto& [e, v] : points)
      if (epoch >= e) r = v;
    return r;
  }

  void validate() const {
    if (points.empty() || points.front().first != 0) throw ValidationError("lr schedule must start at epoch 0");
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (!(points[i].second > 0.0)) throw ValidationError("learning rates must be > 0");
      if (i > 0 && points[i].first < points[i - 1].first)
        throw ValidationError("lr schedule epochs must be non-decreasing");
    }
  }
};

struct IatParams {
  double eps_delta = 0.0;  ///< 0 means epsilon / 4
};

struct SatParams {
  double rho = 0.9;
  double lambda = 6.0;
};

struct FastAtParams {
  double rho = 0.9;
  double beta = 0.1;
  bool reweight = true;
  bool adaptive_target = true;
  double step_size = 0.0;  ///< 0 means epsilon / 2
};

struct FinetuneParams {
  bool kl = true;
  double lambda = 6.0;  ///< used only when kl is set
  bool reweight = true;

  double effective_lambda() const { return kl ? lambda : 0.0; }
};

struct TrainConfig {
  Method method = Method::PgdAt;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  LrSchedule lr = LrSchedule::step_decay(0.1, 10);
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t warmup_epochs = 0;
  /// Training attack; steps/restarts used as given, step_size 0 means epsilon / 4.
  AttackConfig attack{10, 0.0, true, 1};
  IatParams iat;
  SatParams sat;
  FastAtParams fast;
  FinetuneParams finetune;
  std::size_t threads = 1;

  void validate() const {
    if (epochs < 1) throw ValidationError("epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (warmup_epochs > 0 && warmup_epochs >= epochs) throw ValidationError("warmup_epochs must be < epochs");
    if (momentum < 0.0 || momentum >= 1.0) throw ValidationError("momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ValidationError("weight_decay must be >= 0");
    lr.validate();
    if (attack.steps < 1 || attack.restarts < 1) throw ValidationError("attack steps and restarts must be >= 1");
    if (sat.rho < 0.0 || sat.rho > 1.0 || fast.rho < 0.0 || fast.rho > 1.0)
      throw ValidationError("rho must be in [0, 1]");
    if (fast.beta < 0.0 || fast.beta > 1.0) throw ValidationError("beta must be in [0, 1]");
  }

  /// Training attack for a given radius.
  AttackConfig attack_for(double epsilon) const {
    AttackConfig a = attack;
    if (a.step_size <= 0.0) a.step_size = epsilon / 4.0;
    return a;
  }
};

/// PyTorch-style SGD: buf = momentum * buf + (g + wd * p); p -= lr * buf.
class SgdMomentum {
 public:
  SgdMomentum(double momentum = 0.9, double weight_decay = 5e-4) : momentum_(momentum), wd_(weight_decay) {}

  void step(std::span<double> params, std::span<const double> grad, double lr) {
    if (params.size() != grad.size()) throw ShapeError("sgd: gradient length does not match parameters");
    const bool first = buf_.empty();
    if (first) buf_.assign(params.size(), 0.0);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = grad[i] + wd_ * params[i];
      buf_[i] = first ? g : momentum_ * buf_[i] + g;
      params[i] -= lr * buf_[i];
    }
  }

 private:
  double momentum_;
  double wd_;
  Vector buf_;
};

// ---------------------------------------------------------------------------
// Method state

struct IatState {
  Vector eps;
  double eps_delta = 0.0;
};

struct SatState {
  std::vector<Vector> t;
  double rho = 0.9;
  double lambda = 6.0;
};

struct FastAtState {
  PerturbationCache cache;
  std::vector<Vector> t_tilde;
  double rho = 0.9;
  double beta = 0.1;
  bool reweight = true;
  bool adaptive_target = true;
};

inline Vector one_hot(int label, std::size_t classes) {
  Vector v(classes, 0.0);
  v.at(static_cast<std::size_t>(label)) = 1.0;
  return v;
}

inline std::vector<Vector> one_hot_targets(const Dataset& data) {
  std::vector<Vector> t;
  t.reserve(data.size());
  for (int y : data.y) t.push_back(one_hot(y, data.num_classes));
  return t;
}

inline IatState make_iat_state(std::size_t n, const AdversarialBudget& b, const TrainConfig& cfg) {
  return {Vector(n, b.epsilon), cfg.iat.eps_delta > 0.0 ? cfg.iat.eps_delta : b.epsilon / 4.0};
}

inline SatState make_sat_state(const Dataset& data, const TrainConfig& cfg) {
  return {one_hot_targets(data), cfg.sat.rho, cfg.sat.lambda};
}

inline FastAtState make_fast_at_state(const Dataset& data, const AdversarialBudget& b, const TrainConfig& cfg) {
  return {PerturbationCache(data.size(), data.dim(), b), one_hot_targets(data), cfg.fast.rho, cfg.fast.beta,
          cfg.fast.reweight, cfg.fast.adaptive_target};
}

// ---------------------------------------------------------------------------
// Per-instance pieces

/// KL(o || o') with o = softmax(z_clean), o' = softmax(z_adv), and its
/// gradients with respect to both logit vectors.
struct KlTerm {
  double kl = 0.0;
  Vector d_clean;
  Vector d_adv;
};

inline KlTerm kl_clean_adv(std::span<const double> z_clean, std::span<const double> z_adv) {
  if (z_clean.size() != z_adv.size()) throw ShapeError("kl: logit lengths differ");
  const Vector lo = log_softmax(z_clean), la = log_softmax(z_adv);
  KlTerm out;
  Vector g(lo.size());
  for (std::size_t c = 0; c < lo.size(); ++c) {
    g[c] = lo[c] - la[c];
    out.kl += std::exp(lo[c]) * g[c];
  }
  out.d_clean.resize(lo.size());
  out.d_adv.resize(lo.size());
  for (std::size_t c = 0; c < lo.size(); ++c) {
    const double o = std::exp(lo[c]);
    out.d_clean[c] = o * (g[c] - out.kl);
    out.d_adv[c] = std::exp(la[c]) - o;
  }
  out.kl = std::max(out.kl, 0.0);
  return out;
}

/// One instance's contribution to a training objective.
struct InstanceStep {
  double objective = 0.0;
  Vector grad;
  double raw_weight = 1.0;
  double perturbed_loss = 0.0;  ///< loss of the perturbed input against the ground truth
  bool perturbed_correct = false;
  Vector input;                 ///< perturbed input that was trained on
  Vector target;                ///< probability target, empty for logistic models
};

template <Classifier Model>
void require_softmax(const Model& m, std::string_view method) {
  if (m.num_outputs() < 2) throw ValidationError(std::string(method) + " needs a multi-class softmax model");
}

/// Ground-truth loss, gradient and correctness at a perturbed input.
template <Classifier Model>
InstanceStep plain_step(const Model& m, Vector xadv, int label, std::size_t classes) {
  const LossTarget target = label_target(m.num_outputs(), label, classes);
  auto tr = forward_trace(m, xadv);
  const LogitLoss ll = loss_on_logits(trace_logits(tr), target);
  InstanceStep s;
  s.objective = ll.loss;
  s.perturbed_loss = ll.loss;
  s.perturbed_correct = predict_class(trace_logits(tr)) == label;
  s.grad.assign(m.num_params(), 0.0);
  backward(m, tr, ll.dlogits, 1.0, s.grad, {});
  s.input = std::move(xadv);
  if (target.kind != LossKind::BinaryLogistic) s.target = target.values;
  return s;
}

/// Fine-tuning term CE(x', y) + lambda KL(o || o'); the raw weight is max_c o_c.
template <Classifier Model>
InstanceStep finetune_instance(const Model& m, std::span<const double> x, Vector xadv, int label,
                               std::size_t classes, double lambda) {
  require_softmax(m, "finetune");
  auto tc = forward_trace(m, x);
  auto ta = forward_trace(m, xadv);
  const LossTarget target = LossTarget::class_index(label, classes);
  const LogitLoss ce = loss_on_logits(trace_logits(ta), target);
  InstanceStep s;
  s.grad.assign(m.num_params(), 0.0);
  s.objective = ce.loss;
  s.perturbed_loss = ce.loss;
  s.perturbed_correct = predict_class(trace_logits(ta)) == label;
  Vector d_adv = ce.dlogits;
  if (lambda != 0.0) {
    const KlTerm kl = kl_clean_adv(trace_logits(tc), trace_logits(ta));
    s.objective += lambda * kl.kl;
    axpy(lambda, kl.d_adv, d_adv);
    backward(m, tc, kl.d_clean, lambda, s.grad, {});
  }
  backward(m, ta, d_adv, 1.0, s.grad, {});
  const Vector o = softmax(trace_logits(tc));
  s.raw_weight = *std::max_element(o.begin(), o.end());
  s.input = std::move(xadv);
  s.target = target.values;
  return s;
}

struct FinetuneLoss {
  double loss = 0.0;
  Vector grads;
  Vector weights;
};

/// Batch fine-tuning objective sum_i w_i [CE(x'_i, y_i) + lambda KL(o_i || o'_i)]
/// with w_i = max_c o_ic / sum_j max_c o_jc when reweighting, else 1/B.
template <Classifier Model>
FinetuneLoss finetune_loss(const Model& m, const Matrix& x, const Matrix& xadv, std::span<const int> y,
                           std::size_t classes, double lambda, bool reweight) {
  if (y.empty()) throw ValidationError("finetune_loss: empty batch");
  if (x.rows() != y.size() || xadv.rows() != y.size() || x.cols() != xadv.cols())
    throw ShapeError("finetune_loss: batch shapes disagree");
  std::vector<InstanceStep> steps;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const auto r = xadv.row(i);
    steps.push_back(finetune_instance(m, x.row(i), Vector(r.begin(), r.end()), y[i], classes, lambda));
  }
  FinetuneLoss out;
  out.weights.resize(y.size());
  double total = 0.0;
  for (const auto& s : steps) total += reweight ? s.raw_weight : 1.0;
  for (std::size_t i = 0; i < y.size(); ++i) out.weights[i] = (reweight ? steps[i].raw_weight : 1.0) / total;
  out.grads.assign(m.num_params(), 0.0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    out.loss += out.weights[i] * steps[i].objective;
    axpy(out.weights[i], steps[i].grad, out.grads);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch loop

template <class Model>
struct BatchView {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  std::span<const std::size_t> indices;
  std::span<const InstanceStep> steps;
  std::span<const double> weights;  ///< normalized, sum to 1
  double loss = 0.0;                ///< sum_i weights[i] * steps[i].objective
  const Model* model = nullptr;     ///< parameters before this batch's update
};

template <class Model>
struct TrainHooks {
  std::function<void(const BatchView<Model>&)> on_batch;
  std::function<void(std::size_t epoch, const Model&)> on_epoch;
};

/// Per-instance outputs of one training epoch.
struct EpochOutcome {
  Vector perturbed_loss;
  std::vector<bool> perturbed_correct;
  Vector raw_weight;
  Vector batch_loss;
};

/// Fresh permutation of 0..n-1 for an epoch.
inline std::vector<std::size_t> epoch_permutation(const RngStream& rng, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  RngStream r = rng.derive(streams::kShuffle, epoch);
  r.shuffle(std::span<std::size_t>(order));
  return order;
}

template <Classifier Model, class StepFn>
EpochOutcome run_batches(Model& m, SgdMomentum& sgd, const Dataset& data, const TrainConfig& cfg, std::size_t epoch,
                         const RngStream& rng, StepFn&& step_fn, const TrainHooks<Model>& hooks) {
  const std::size_t n = data.size();
  EpochOutcome out{Vector(n, 0.0), std::vector<bool>(n, false), Vector(n, 1.0), {}};
  const auto order = epoch_permutation(rng, epoch, n);
  const double lr = cfg.lr.rate(epoch);
  std::vector<InstanceStep> steps(cfg.batch_size);
  for (std::size_t lo = 0, b = 0; lo < n; lo += cfg.batch_size, ++b) {
    const std::size_t hi = std::min(n, lo + cfg.batch_size);
    const std::size_t count = hi - lo;
    const std::span<const std::size_t> idx(order.data() + lo, count);
    parallel_for(count, cfg.threads, [&](std::size_t k) { steps[k] = step_fn(idx[k]); });

    double total = 0.0;
    for (std::size_t k = 0; k < count; ++k) total += steps[k].raw_weight;
    if (!(total > 0.0)) throw ValidationError("batch weights sum to zero");
    Vector w(count);
    for (std::size_t k = 0; k < count; ++k) w[k] = steps[k].raw_weight / total;
    Vector grad(m.num_params(), 0.0);
    double loss = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
      loss += w[k] * steps[k].objective;
      axpy(w[k], steps[k].grad, grad);
      out.perturbed_loss[idx[k]] = steps[k].perturbed_loss;
      out.perturbed_correct[idx[k]] = steps[k].perturbed_correct;
      out.raw_weight[idx[k]] = steps[k].raw_weight;
    }
    out.batch_loss.push_back(loss);
    if (hooks.on_batch)
      hooks.on_batch(BatchView<Model>{epoch, b, idx, std::span<const InstanceStep>(steps.data(), count), w, loss, &m});
    sgd.step(m.params(), grad, lr);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Epochs

inline RngStream attack_stream(const RngStream& rng, std::size_t epoch, std::size_t i, std::uint64_t probe = 0) {
  return rng.derive(streams::kAttack, epoch, i, probe);
}

/// Vanilla, FGSM or PGD adversarial training for one epoch.
template <Classifier Model>
EpochOutcome standard_epoch(Model& m, SgdMomentum& sgd, const Dataset& data, const AdversarialBudget& b,
                            const TrainConfig& cfg, std::size_t epoch, const RngStream& rng,
                            const TrainHooks<Model>& hooks = {}) {
  const AttackConfig attack = cfg.attack_for(b.epsilon);
  return run_batches(m, sgd, data, cfg, epoch, rng, [&](std::size_t i) {
    const auto x = data.row(i);
    const LossTarget target = label_target(m.num_outputs(), data.y[i], data.num_classes);
    Vector xadv;
    switch (cfg.method) {
      case Method::Vanilla: xadv.assign(x.begin(), x.end()); break;
      case Method::FgsmAt: xadv = fgsm(m, x, target, b); break;
      default: xadv = pgd(m, x, target, b, attack, attack_stream(rng, epoch, i)); break;
    }
    return plain_step(m, std::move(xadv), data.y[i], data.num_classes);
  }, hooks);
}

template <Classifier Model>
bool robust_at(const Model& m, std::span<const double> x, int label, std::size_t classes, double eps, Norm norm,
               const TrainConfig& cfg, RngStream rng) {
  const AdversarialBudget b(norm, eps);
  const LossTarget target = label_target(m.num_outputs(), label, classes);
  const Vector xadv = eps > 0.0 ? pgd(m, x, target, b, cfg.attack_for(eps), rng) : Vector(x.begin(), x.end());
  return predict_class(logits(m, xadv)) == label;
}

/// IAT: during warmup every instance trains at the nominal radius. Afterwards
/// each instance first probes eps_i + delta (grow if still robust), then eps_i
/// (shrink, floored at 0, if not robust), and trains on PGD at its eps_i.
template <Classifier Model>
EpochOutcome iat_epoch(Model& m, SgdMomentum& sgd, const Dataset& data, IatState& state,
                       const AdversarialBudget& b, const TrainConfig& cfg, std::size_t epoch, const RngStream& rng,
                       const TrainHooks<Model>& hooks = {}) {
  if (state.eps.size() != data.size()) throw ShapeError("iat state does not match dataset");
  const bool warm = epoch < cfg.warmup_epochs;
  return run_batches(m, sgd, data, cfg, epoch, rng, [&](std::size_t i) {
    const auto x = data.row(i);
    const int y = data.y[i];
    double& eps = state.eps[i];
    if (warm) {
      eps = b.epsilon;
    } else if (robust_at(m, x, y, data.num_classes, eps + state.eps_delta, b.norm, cfg, attack_stream(rng, epoch, i, 1))) {
      eps += state.eps_delta;
    } else if (!robust_at(m, x, y, data.num_classes, eps, b.norm, cfg, attack_stream(rng, epoch, i, 2))) {
      eps = std::max(eps - state.eps_delta, 0.0);
    }
    const AdversarialBudget bi = b.with_epsilon(eps);
    const LossTarget target = label_target(m.num_outputs(), y, data.num_classes);
    Vector xadv = eps > 0.0 ? pgd(m, x, target, bi, cfg.attack_for(eps), attack_stream(rng, epoch, i))
                            : Vector(x.begin(), x.end());
    return plain_step(m, std::move(xadv), y, data.num_classes);
  }, hooks);
}

/// SAT: past warmup, t_i <- rho t_i + (1 - rho) o_i from the clean output;
/// objective CE(x_i, t_i) + lambda KL(o_i || o'_i) with o'_i from PGD on the KL
/// term; batch weights proportional to max_c t_ic.
template <Classifier Model>
EpochOutcome sat_epoch(Model& m, SgdMomentum& sgd, const Dataset& data, SatState& state, const AdversarialBudget& b,
                       const TrainConfig& cfg, std::size_t epoch, const RngStream& rng,
                       const TrainHooks<Model>& hooks = {}) {
  require_softmax(m, "sat");
  if (state.t.size() != data.size()) throw ShapeError("sat state does not match dataset");
  const bool warm = epoch < cfg.warmup_epochs;
  const AttackConfig attack = cfg.attack_for(b.epsilon);
  return run_batches(m, sgd, data, cfg, epoch, rng, [&](std::size_t i) {
    const auto x = data.row(i);
    const int y = data.y[i];
    auto tc = forward_trace(m, x);
    const Vector o = softmax(trace_logits(tc));
    Vector& t = state.t[i];
    if (!warm)
      for (std::size_t c = 0; c < t.size(); ++c) t[c] = state.rho * t[c] + (1.0 - state.rho) * o[c];
    Vector xadv = pgd(m, x, LossTarget::kl(o), b, attack, attack_stream(rng, epoch, i));
    auto ta = forward_trace(m, xadv);

    InstanceStep s;
    s.grad.assign(m.num_params(), 0.0);
    const LogitLoss ce = loss_on_logits(trace_logits(tc), LossTarget::soft(t));
    const KlTerm kl = kl_clean_adv(trace_logits(tc), trace_logits(ta));
    s.objective = ce.loss + state.lambda * kl.kl;
    Vector d_clean = ce.dlogits;
    axpy(state.lambda, kl.d_clean, d_clean);
    backward(m, tc, d_clean, 1.0, s.grad, {});
    backward(m, ta, kl.d_adv, state.lambda, s.grad, {});
    s.raw_weight = warm ? 1.0 : *std::max_element(t.begin(), t.end());
    s.perturbed_loss = loss_on_logits(trace_logits(ta), LossTarget::class_index(y, data.num_classes)).loss;
    s.perturbed_correct = predict_class(trace_logits(ta)) == y;
    s.input = std::move(xadv);
    s.target = t;
    return s;
  }, hooks);
}

/// One epoch of accelerated adversarial training: one signed step from the
/// cached perturbation, weight w_i = p(y_i | x_i + delta_i) when reweighting,
/// moving-average target t~_i over adversarial outputs, training target
/// beta 1_y + (1 - beta) t~_i, and batch loss sum w_i CE / sum w_i. During
/// warmup the weights are 1 and the targets one-hot.
template <Classifier Model>
EpochOutcome fast_at_epoch(Model& m, SgdMomentum& sgd, const Dataset& data, FastAtState& state,
                           const AdversarialBudget& b, const TrainConfig& cfg, std::size_t epoch,
                           const RngStream& rng, const TrainHooks<Model>& hooks = {}) {
  require_softmax(m, "fast_at");
  if (state.t_tilde.size() != data.size() || state.cache.size() != data.size())
    throw ShapeError("fast-at state does not match dataset");
  const bool warm = epoch < cfg.warmup_epochs;
  const double alpha = cfg.fast.step_size > 0.0 ? cfg.fast.step_size : b.epsilon / 2.0;
  return run_batches(m, sgd, data, cfg, epoch, rng, [&](std::size_t i) {
    const int y = data.y[i];
    const LossTarget truth = LossTarget::class_index(y, data.num_classes);
    Vector xadv = b.epsilon > 0.0 ? atta_update(state.cache, i, m, data.row(i), truth, b, alpha)
                                  : Vector(data.row(i).begin(), data.row(i).end());
    auto ta = forward_trace(m, xadv);
    const Vector p = softmax(trace_logits(ta));
    Vector t = truth.values;
    double w = 1.0;
    if (!warm) {
      if (state.reweight) w = p[static_cast<std::size_t>(y)];
      if (state.adaptive_target) {
        Vector& tt = state.t_tilde[i];
        for (std::size_t c = 0; c < tt.size(); ++c) tt[c] = state.rho * tt[c] + (1.0 - state.rho) * p[c];
        for (std::size_t c = 0; c < t.size(); ++c) t[c] = state.beta * t[c] + (1.0 - state.beta) * tt[c];
      }
    }
    const LogitLoss ll = loss_on_logits(trace_logits(ta), LossTarget::soft(t));
    InstanceStep s;
    s.objective = ll.loss;
    s.grad.assign(m.num_params(), 0.0);
    backward(m, ta, ll.dlogits, 1.0, s.grad, {});
    s.raw_weight = w;
    s.perturbed_loss = loss_on_logits(trace_logits(ta), truth).loss;
    s.perturbed_correct = predict_class(trace_logits(ta)) == y;
    s.input = std::move(xadv);
    s.target = std::move(t);
    return s;
  }, hooks);
}

/// Fine-tuning epoch on standard PGD examples with the reweighted KL objective.
template <Classifier Model>
EpochOutcome finetune_epoch(Model& m, SgdMomentum& sgd, const Dataset& data, const AdversarialBudget& b,
                            const TrainConfig& cfg, std::size_t epoch, const RngStream& rng,
                            const TrainHooks<Model>& hooks = {}) {
  const AttackConfig attack = cfg.attack_for(b.epsilon);
  const double lambda = cfg.finetune.effective_lambda();
  return run_batches(m, sgd, data, cfg, epoch, rng, [&](std::size_t i) {
    const auto x = data.row(i);
    const LossTarget truth = LossTarget::class_index(data.y[i], data.num_classes);
    Vector xadv = pgd(m, x, truth, b, attack, attack_stream(rng, epoch, i));
    InstanceStep s = finetune_instance(m, x, std::move(xadv), data.y[i], data.num_classes, lambda);
    if (!cfg.finetune.reweight) s.raw_weight = 1.0;
    return s;
  }, hooks);
}

// ---------------------------------------------------------------------------
// Evaluation and records

struct SplitEvaluation {
  Vector adv_loss;
  Vector feature_norm;  ///< penultimate l2 norm at the adversarial input
  std::vector<bool> clean_correct;
  std::vector<bool> adv_correct;
  double robust_error = 0.0;
  double clean_error = 0.0;
};

/// PGD-10 (step epsilon/4, random start) at the nominal budget.
template <Classifier Model>
SplitEvaluation evaluate_split(const Model& m, const Dataset& data, const AdversarialBudget& b, const RngStream& rng,
                               std::size_t threads = 1) {
  const std::size_t n = data.size();
  SplitEvaluation ev{Vector(n), Vector(n), std::vector<bool>(n), std::vector<bool>(n), 0.0, 0.0};
  std::vector<char> clean(n), adv(n);
  const AttackConfig attack = AttackConfig::defaults_for(b);
  parallel_for(n, threads, [&](std::size_t i) {
    const auto x = data.row(i);
    const LossTarget target = label_target(m.num_outputs(), data.y[i], data.num_classes);
    clean[i] = predict_class(logits(m, x)) == data.y[i];
    const Vector xadv = pgd(m, x, target, b, attack, rng.derive(i));
    auto tr = forward_trace(m, xadv);
    ev.adv_loss[i] = loss_on_logits(trace_logits(tr), target).loss;
    ev.feature_norm[i] = norm2(trace_penultimate(tr));
    adv[i] = predict_class(trace_logits(tr)) == data.y[i];
  });
  std::size_t clean_wrong = 0, adv_wrong = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ev.clean_correct[i] = clean[i];
    ev.adv_correct[i] = adv[i];
    clean_wrong += !clean[i];
    adv_wrong += !adv[i];
  }
  if (n > 0) {
    ev.clean_error = static_cast<double>(clean_wrong) / static_cast<double>(n);
    ev.robust_error = static_cast<double>(adv_wrong) / static_cast<double>(n);
  }
  return ev;
}

using GroupRow = std::array<double, kGroupCount>;

inline GroupRow nan_row() {
  GroupRow r;
  r.fill(std::numeric_limits<double>::quiet_NaN());
  return r;
}

/// Per-group means of `values`; NaN for empty groups.
inline GroupRow group_means(const GroupPartition& part, std::span<const double> values) {
  GroupRow sum{}, out = nan_row();
  std::array<std::size_t, kGroupCount> count{};
  for (std::size_t i = 0; i < part.size(); ++i) {
    const auto g = static_cast<std::size_t>(part.group_of[i]);
    sum[g] += values[i];
    ++count[g];
  }
  for (std::size_t g = 0; g < kGroupCount; ++g)
    if (count[g]) out[g] = sum[g] / static_cast<double>(count[g]);
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_robust_err = 0.0;
  double test_robust_err = std::numeric_limits<double>::quiet_NaN();
  double train_clean_err = 0.0;
  GroupRow group_loss = nan_row();
  GroupRow group_featnorm = nan_row();
  GroupRow group_weight = nan_row();
  GroupRow group_eps = nan_row();
};

inline bool reports_weights(Method m) { return m == Method::Sat || m == Method::FastAt || m == Method::Finetune; }

inline std::string epoch_records_csv(std::span<const EpochRecord> records, Method method, const OutputHeader& header) {
  std::string out = header.csv_lines();
  out += "epoch,train_robust_err,test_robust_err,train_clean_err";
  auto group_header = [&](std::string_view suffix) {
    for (std::size_t g = 0; g < kGroupCount; ++g) out += ",g" + std::to_string(g) + "_" + std::string(suffix);
  };
  group_header("loss");
  group_header("featnorm");
  if (reports_weights(method)) group_header("weight");
  if (method == Method::Iat) group_header("eps");
  out += "\n";
  for (const EpochRecord& r : records) {
    out += std::to_string(r.epoch) + "," + format_double(r.train_robust_err) + "," + format_double(r.test_robust_err) +
           "," + format_double(r.train_clean_err);
    auto row = [&](const GroupRow& v) {
      for (double x : v) out += "," + format_double(x);
    };
    row(r.group_loss);
    row(r.group_featnorm);
    if (reports_weights(method)) row(r.group_weight);
    if (method == Method::Iat) row(r.group_eps);
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Driver

struct TrainOptions {
  const Dataset* test = nullptr;
  std::optional<GroupPartition> partition;  ///< groups of the training set for per-group columns
  bool evaluate = true;
};

template <class Model>
struct TrainResult {
  Model model;
  std::vector<EpochRecord> records;
  LossHistory history;
  CorrectnessHistory correctness;
  std::optional<IatState> iat;
  std::optional<SatState> sat;
  std::optional<FastAtState> fast;
};

/// Runs cfg.epochs epochs of cfg.method from `model` and evaluates after each.
template <Classifier Model>
TrainResult<Model> run_training(Model model, const Dataset& data, const AdversarialBudget& b, const TrainConfig& cfg,
                                const RngStream& rng, const TrainOptions& opt = {},
                                const TrainHooks<Model>& hooks = {}) {
  cfg.validate();
  data.validate();
  if (data.empty()) throw ValidationError("training set is empty");
  if (data.dim() != model.input_dim()) throw ShapeError("dataset dimension does not match model input");
  if (opt.partition && opt.partition->size() != data.size())
    throw ValidationError("group partition does not cover the training set");

  TrainResult<Model> res{std::move(model), {}, LossHistory(data.size()), CorrectnessHistory(data.size()), {}, {}, {}};
  if (cfg.method == Method::Iat) res.iat = make_iat_state(data.size(), b, cfg);
  if (cfg.method == Method::Sat) res.sat = make_sat_state(data, cfg);
  if (cfg.method == Method::FastAt) res.fast = make_fast_at_state(data, b, cfg);
  SgdMomentum sgd(cfg.momentum, cfg.weight_decay);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochOutcome eo;
    switch (cfg.method) {
      case Method::Iat: eo = iat_epoch(res.model, sgd, data, *res.iat, b, cfg, epoch, rng, hooks); break;
      case Method::Sat: eo = sat_epoch(res.model, sgd, data, *res.sat, b, cfg, epoch, rng, hooks); break;
      case Method::FastAt: eo = fast_at_epoch(res.model, sgd, data, *res.fast, b, cfg, epoch, rng, hooks); break;
      case Method::Finetune: eo = finetune_epoch(res.model, sgd, data, b, cfg, epoch, rng, hooks); break;
      default: eo = standard_epoch(res.model, sgd, data, b, cfg, epoch, rng, hooks); break;
    }
    res.history.record_epoch(eo.perturbed_loss);
    res.correctness.record_epoch(eo.perturbed_correct);

    EpochRecord rec;
    rec.epoch = epoch;
    if (opt.evaluate) {
      const RngStream eval = rng.derive(streams::kEval, epoch);
      const SplitEvaluation tr = evaluate_split(res.model, data, b, eval.derive(0), cfg.threads);
      rec.train_robust_err = tr.robust_error;
      rec.train_clean_err = tr.clean_error;
      if (opt.test) rec.test_robust_err = evaluate_split(res.model, *opt.test, b, eval.derive(1), cfg.threads).robust_error;
      if (opt.partition) {
        rec.group_loss = group_means(*opt.partition, tr.adv_loss);
        rec.group_featnorm = group_means(*opt.partition, tr.feature_norm);
      }
    }
    if (opt.partition) {
      if (reports_weights(cfg.method)) rec.group_weight = group_means(*opt.partition, eo.raw_weight);
      if (res.iat) rec.group_eps = group_means(*opt.partition, res.iat->eps);
    }
    res.records.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(epoch, res.model);
  }
  return res;
}

/// Vanilla, FGSM or PGD adversarial training.
template <Classifier Model>
TrainResult<Model> train(Model model, const Dataset& data, const AdversarialBudget& b, const TrainConfig& cfg,
                         const RngStream& rng, const TrainOptions& opt = {}, const TrainHooks<Model>& hooks = {}) {
  if (cfg.method != Method::Vanilla && cfg.method != Method::FgsmAt && cfg.method != Method::PgdAt)
    throw ValidationError("train handles vanilla, fgsm_at and pgd_at; use run_training for adaptive methods");
  return run_training(std::move(model), data, b, cfg, rng, opt, hooks);
}

}  // namespace advlab
