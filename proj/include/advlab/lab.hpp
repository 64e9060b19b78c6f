#pragma once

// Experiment harness: configuration files, the profile -> study protocol,
// the theory verification battery, and output writers.

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "advlab/csv.hpp"
#include "advlab/data.hpp"
#include "advlab/difficulty.hpp"
#include "advlab/errors.hpp"
#include "advlab/models.hpp"
#include "advlab/theory.hpp"
#include "advlab/trainers.hpp"

namespace advlab {

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config files: "key = value" lines grouped under "[section]" headers.
// '#' and ';' start comments. Keys are addressed as "section.key".

class ConfigFile {
 public:
  static ConfigFile parse(std::string_view text, const std::string& origin = "<memory>") {
    ConfigFile c;
    c.origin_ = origin;
    std::string section;
    std::size_t lineno = 0;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
      ++lineno;
      const std::size_t hash = line.find_first_of("#;");
      if (hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const std::string where = origin + ":" + std::to_string(lineno);
      if (t.front() == '[') {
        if (t.back() != ']' || t.size() < 3) throw ValidationError(where + ": malformed section header");
        section = trim(std::string_view(t).substr(1, t.size() - 2));
        continue;
      }
      const std::size_t eq = t.find('=');
      if (eq == std::string::npos) throw ValidationError(where + ": expected key = value");
      const std::string key = trim(std::string_view(t).substr(0, eq));
      if (key.empty()) throw ValidationError(where + ": empty key");
      const std::string full = section.empty() ? key : section + "." + key;
      if (!c.values_.emplace(full, trim(std::string_view(t).substr(eq + 1))).second)
        throw ValidationError(where + ": duplicate key '" + full + "'");
    }
    return c;
  }

  static ConfigFile load(const std::string& path) { return parse(read_file(path), path); }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::optional<std::string> find(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    used_.insert(key);
    return it->second;
  }

  std::string get(const std::string& key, const std::string& fallback) const { return find(key).value_or(fallback); }

  double get_double(const std::string& key, double fallback) const {
    const auto v = find(key);
    return v ? parse_double(*v, origin_ + " " + key) : fallback;
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) const {
    const auto v = find(key);
    if (!v) return fallback;
    // accept 1e6 style counts as long as they are exact integers
    const double d = parse_double(*v, origin_ + " " + key);
    if (!(d >= 0.0) || d != std::floor(d) || d > 9.0e15)
      throw ValidationError(origin_ + ": " + key + " must be a non-negative integer");
    return static_cast<std::size_t>(d);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    const auto v = find(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw ValidationError(origin_ + ": " + key + " must be true or false");
  }

  Vector get_list(const std::string& key, Vector fallback) const {
    const auto v = find(key);
    if (!v) return fallback;
    Vector out;
    for (const std::string& part : split(*v, ',')) out.push_back(parse_double(trim(part), origin_ + " " + key));
    return out;
  }

  std::vector<std::size_t> get_size_list(const std::string& key, std::vector<std::size_t> fallback) const {
    const auto v = find(key);
    if (!v) return fallback;
    std::vector<std::size_t> out;
    for (const std::string& part : split(*v, ',')) {
      const long long x = parse_int(trim(part), origin_ + " " + key);
      if (x < 1) throw ValidationError(origin_ + ": " + key + " entries must be >= 1");
      out.push_back(static_cast<std::size_t>(x));
    }
    return out;
  }

  /// Rejects keys that no reader asked for, which catches typos.
  void check_all_used() const {
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) throw ValidationError(origin_ + ": unknown key '" + k + "'");
  }

  /// Sorted "key=value" lines; the basis of the config hash.
  std::string canonical() const {
    std::string s;
    for (const auto& [k, v] : values_) s += k + "=" + v + "\n";
    return s;
  }

  std::string hash() const { return fnv1a_hex(canonical()); }
  const std::string& origin() const { return origin_; }

 private:
  std::string origin_;
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Theory battery

struct TheoryBatteryConfig {
  std::size_t t2_instances = 50;
  std::size_t t2_m = 400;
  std::size_t t2_n = 30;
  std::size_t t2_modes = 3;
  std::size_t mc_samples = 1000000;
  double exact_tol = 1e-9;
  double mc_tol = 0.003;
  std::size_t t1_sets = 10;
  std::size_t t1_iters = 100000;
  double t1_cos = 0.999;
  double t1_eps_fraction = 0.9;  ///< epsilon as a fraction of the clean max margin
  double collinear_tol = 1e-9;
  std::size_t corollary_trials = 100;
  std::size_t corollary_m = 200;
  std::size_t corollary_n = 20;
  double c2_scale = 1.0;  ///< 1.1 when injecting a fault
};

struct CheckResult {
  std::string name;
  bool pass = false;
  Json detail;
};

/// One Gaussian-mixture instance for the exactness checks.
struct Theorem2Instance {
  GmmSpec spec;
  std::size_t mode = 0;
  double epsilon = 0.0;
  Matrix x;
  Vector y;
};

inline Vector random_unit_vector(std::size_t m, RngStream& r) {
  Vector v(m);
  for (double& x : v) x = r.normal();
  return scaled(v, 1.0 / norm2(v));
}

/// Radii are sorted uniforms on [1, 4]; probabilities are normalized
/// uniforms on [0.1, 1.1].
inline GmmSpec random_gmm_spec(std::size_t m, std::size_t modes, RngStream& r) {
  GmmSpec s;
  s.eta = random_unit_vector(m, r);
  for (std::size_t k = 0; k < modes; ++k) s.radii.push_back(1.0 + 3.0 * r.uniform());
  std::sort(s.radii.begin(), s.radii.end());
  double total = 0.0;
  for (std::size_t k = 0; k < modes; ++k) {
    s.probs.push_back(0.1 + r.uniform());
    total += s.probs.back();
  }
  for (double& p : s.probs) p /= total;
  return s;
}

inline Theorem2Instance random_theorem2_instance(std::size_t m, std::size_t n, std::size_t modes, const RngStream& rng) {
  RngStream r = rng.derive(0);
  Theorem2Instance inst;
  inst.spec = random_gmm_spec(m, modes, r);
  inst.mode = static_cast<std::size_t>(r.uniform() * static_cast<double>(modes)) % modes;
  inst.epsilon = r.uniform();
  auto [q, y] = gmm_noise(n, m, rng.derive(1));
  inst.x = gmm_from_noise(q, y, inst.spec.radii[inst.mode], inst.spec.eta);
  inst.y = std::move(y);
  return inst;
}

/// Exact identity with the min-norm classifier and Monte Carlo agreement.
inline std::pair<CheckResult, CheckResult> theorem2_checks(const TheoryBatteryConfig& cfg, const RngStream& rng,
                                                           std::size_t threads) {
  Json cases = Json::array();
  double worst_exact = 0.0, worst_mc = 0.0;
  bool exact_ok = true, mc_ok = true;
  for (std::size_t j = 0; j < cfg.t2_instances; ++j) {
    const Theorem2Instance inst = random_theorem2_instance(cfg.t2_m, cfg.t2_n, cfg.t2_modes, rng.derive(j));
    const double r_l = inst.spec.radii[inst.mode];
    const Theorem2Result t2 = theorem2_error(inst.x, inst.y, inst.spec, r_l, inst.epsilon, {cfg.c2_scale});
    const LinearModel w = min_norm_interpolant(inst.x, inst.y);
    const double lin = robust_error_linear(w, inst.spec, inst.epsilon);
    const MonteCarloEstimate mc =
        monte_carlo_robust_error(w, inst.spec, inst.epsilon, cfg.mc_samples, rng.derive(j, 0x4D43), threads);
    const double de = std::abs(t2.error - lin), dm = std::abs(t2.error - mc.mean);
    worst_exact = std::max(worst_exact, de);
    worst_mc = std::max(worst_mc, dm);
    exact_ok = exact_ok && de <= cfg.exact_tol;
    mc_ok = mc_ok && dm <= cfg.mc_tol;
    const TheoremConstants& c = t2.constants;
    cases.push_back(Json{{"r_l", r_l},       {"epsilon", inst.epsilon}, {"s", c.s},         {"t", c.t},
                         {"v", c.v},         {"C1", c.c1},              {"C2", c.c2},       {"C3", c.c3},
                         {"g", c.g},         {"exact", t2.error},       {"min_norm", lin},  {"monte_carlo", mc.mean},
                         {"mc_stderr", mc.stderr_}, {"exact_pass", de <= cfg.exact_tol}, {"mc_pass", dm <= cfg.mc_tol}});
  }
  CheckResult exact{"theorem2_exact", exact_ok,
                    Json{{"tolerance", cfg.exact_tol}, {"max_abs_diff", worst_exact}, {"cases", cases}}};
  CheckResult mc{"theorem2_monte_carlo", mc_ok,
                 Json{{"tolerance", cfg.mc_tol}, {"samples", cfg.mc_samples}, {"max_abs_diff", worst_mc}}};
  return {exact, mc};
}

struct SeparableSet {
  Matrix x;
  Vector y;
};

/// Points with |w*ᵀx| >= 0.5 for a random unit w*, labelled by the sign.
inline SeparableSet random_separable_set(std::size_t m, std::size_t n, const RngStream& rng) {
  RngStream r = rng.derive(0);
  const Vector ws = random_unit_vector(m, r);
  SeparableSet s{Matrix(n, m), Vector(n)};
  Vector p(m);
  for (std::size_t i = 0; i < n; ++i) {
    double proj = 0.0;
    do {
      for (double& v : p) v = 2.0 * r.normal();
      proj = dot(p, ws);
    } while (std::abs(proj) < 0.5);
    std::copy(p.begin(), p.end(), s.x.row(i).begin());
    s.y[i] = proj > 0.0 ? 1.0 : -1.0;
  }
  return s;
}

struct Theorem1Case {
  std::size_t m = 0, n = 0;
  double epsilon = 0.0;
  double cosine = 0.0;
  double collinearity = 0.0;
  double kkt_residual = 0.0;
};

/// Toy set j: m alternates 2 and 5, n runs over 6..20, epsilon is a fixed
/// fraction of the clean max margin, and gradient descent starts at 0 with
/// the largest allowed step 2/||X||².
inline Theorem1Case theorem1_case(std::size_t j, std::size_t iters, double eps_fraction, const RngStream& rng) {
  Theorem1Case c;
  c.m = j % 2 == 0 ? 2 : 5;
  c.n = 6 + (j * 7) % 15;
  const SeparableSet s = random_separable_set(c.m, c.n, rng.derive(j));
  const MaxMarginResult clean = max_margin_direction(s.x, s.y);
  c.epsilon = eps_fraction / norm2(clean.w);
  c.kkt_residual = clean.kkt_residual;
  const MaxMarginResult adv = max_margin_with_budget(s.x, s.y, c.epsilon, rng.derive(j, 1));
  c.collinearity = *adv.collinearity;
  const double sn = spectral_norm(s.x);
  const GdTrace tr = adv_logreg_gd(s.x, s.y, c.epsilon, 2.0 / (sn * sn), iters, Vector(c.m, 0.0));
  c.cosine = cosine(tr.w, clean.direction);
  return c;
}

inline std::pair<CheckResult, CheckResult> theorem1_checks(const TheoryBatteryConfig& cfg, const RngStream& rng,
                                                           std::size_t threads) {
  std::vector<Theorem1Case> cases(cfg.t1_sets);
  parallel_for(cfg.t1_sets, threads, [&](std::size_t j) { cases[j] = theorem1_case(j, cfg.t1_iters, cfg.t1_eps_fraction, rng); });
  Json rows = Json::array();
  bool conv = true, col = true;
  double worst_cos = 1.0, worst_col = 1.0;
  for (const Theorem1Case& c : cases) {
    conv = conv && c.cosine >= cfg.t1_cos;
    col = col && c.collinearity >= 1.0 - cfg.collinear_tol;
    worst_cos = std::min(worst_cos, c.cosine);
    worst_col = std::min(worst_col, c.collinearity);
    rows.push_back(Json{{"m", c.m},
                        {"n", c.n},
                        {"epsilon", c.epsilon},
                        {"cosine", c.cosine},
                        {"collinearity", c.collinearity},
                        {"kkt_residual", c.kkt_residual}});
  }
  return {CheckResult{"theorem1_convergence", conv,
                      Json{{"iterations", cfg.t1_iters}, {"threshold", cfg.t1_cos}, {"min_cosine", worst_cos},
                           {"cases", rows}}},
          CheckResult{"max_margin_collinearity", col, Json{{"tolerance", cfg.collinear_tol}, {"min_cosine", worst_col}}}};
}

struct CorollaryTrial {
  double r_i = 0.0, r_j = 0.0, eps1 = 0.0, eps2 = 0.0;
  CorollaryResult result;
  std::size_t attempts = 0;
};

/// Largest eps2 allowed by the precondition for a training set of radius r.
inline double corollary_epsilon_cap(const Matrix& q, std::span<const double> y, const GmmSpec& spec, double r) {
  const Matrix x = gmm_from_noise(q, y, r, spec.eta);
  const double sep = 1.0 / norm2(min_norm_interpolant(x, y).weights());
  const double a = theorem2_constants(x, y, spec.eta, r).alignment;
  return std::min(sep, spec.radii.front() * a);
}

/// Two distinct modes i < j of a random mixture, shared noise, and
/// eps1 < eps2 drawn inside the precondition region.
inline CorollaryTrial corollary_trial(std::size_t trial, const TheoryBatteryConfig& cfg, const RngStream& rng) {
  for (std::size_t attempt = 0; attempt < 100; ++attempt) {
    const RngStream base = rng.derive(trial, attempt);
    RngStream r = base.derive(0);
    const GmmSpec spec = random_gmm_spec(cfg.corollary_m, 3, r);
    const std::size_t i = static_cast<std::size_t>(r.uniform() * 3.0) % 3;
    const std::size_t j = (i + 1 + static_cast<std::size_t>(r.uniform() * 2.0) % 2) % 3;
    const double r_i = spec.radii[std::min(i, j)], r_j = spec.radii[std::max(i, j)];
    auto [q, y] = gmm_noise(cfg.corollary_n, cfg.corollary_m, base.derive(1));
    const double cap = std::min(corollary_epsilon_cap(q, y, spec, r_i), corollary_epsilon_cap(q, y, spec, r_j));
    if (!(cap > 0.0)) continue;
    CorollaryTrial t;
    t.r_i = r_i;
    t.r_j = r_j;
    t.eps2 = (0.05 + 0.9 * r.uniform()) * cap;
    t.eps1 = 0.95 * r.uniform() * t.eps2;
    t.result = corollary_gap_check(q, y, spec, r_i, r_j, t.eps1, t.eps2);
    t.attempts = attempt + 1;
    return t;
  }
  throw PreconditionError("corollary: no valid configuration found for trial " + std::to_string(trial));
}

inline CheckResult corollary_check(const TheoryBatteryConfig& cfg, const RngStream& rng, std::size_t threads) {
  std::vector<CorollaryTrial> trials(cfg.corollary_trials);
  parallel_for(trials.size(), threads, [&](std::size_t t) { trials[t] = corollary_trial(t, cfg, rng); });
  std::size_t held = 0;
  Json rows = Json::array();
  for (const CorollaryTrial& t : trials) {
    held += t.result.holds;
    rows.push_back(Json{{"r_i", t.r_i},
                        {"r_j", t.r_j},
                        {"eps1", t.eps1},
                        {"eps2", t.eps2},
                        {"gap1", t.result.gap1},
                        {"gap2", t.result.gap2},
                        {"holds", t.result.holds}});
  }
  return CheckResult{"corollary_sweep", held == trials.size(),
                     Json{{"trials", trials.size()}, {"held", held}, {"cases", rows}}};
}

/// Regression value of the lower bound at gamma = 0.5, n = 1e6, m = 100,
/// c = 1, b = 1e6, W = J = 1, delta = 0.1 (40-digit reference evaluation).
inline constexpr double kLowerBoundReference = 0.027088587754806001;

inline LowerBoundInputs reference_lower_bound_inputs() {
  LowerBoundInputs in;
  in.gamma = 0.5;
  in.n = 1e6;
  in.m = 100;
  in.c = 1;
  in.b = 1e6;
  in.W = 1;
  in.J = 1;
  in.delta = 0.1;
  return in;
}

inline CheckResult lower_bound_check() {
  LowerBoundInputs in = reference_lower_bound_inputs();
  Json grid = Json::array();
  bool monotone = true;
  double prev = -1.0;
  for (int k = 1; k <= 10; ++k) {
    in.gamma = 0.1 * k;
    const double v = lipschitz_lower_bound(in);
    grid.push_back(Json{{"gamma", in.gamma}, {"bound", v}});
    monotone = monotone && v > prev;
    prev = v;
  }
  in = reference_lower_bound_inputs();
  const double ref = lipschitz_lower_bound(in);
  LowerBoundInputs twice = in;
  twice.m *= 2;
  const double ratio = lipschitz_lower_bound(twice) / ref;
  LowerBoundInputs small = in;
  small.n = 1000;
  std::string small_error;
  try {
    lipschitz_lower_bound(small);
  } catch (const DomainError& e) {
    small_error = e.what();
  }
  in.gamma = 0.0;
  const double at_zero = lipschitz_lower_bound(in);
  const bool ref_ok = std::abs(ref - kLowerBoundReference) <= 1e-12 * kLowerBoundReference;
  const bool ratio_ok = std::abs(ratio - std::sqrt(2.0)) <= 1e-12;
  return CheckResult{"lower_bound_grid", monotone && ref_ok && ratio_ok && at_zero == 0.0 && !small_error.empty(),
                     Json{{"gamma_grid", grid},
                          {"monotone_in_gamma", monotone},
                          {"reference", ref},
                          {"reference_expected", kLowerBoundReference},
                          {"doubling_m_ratio", ratio},
                          {"gamma_zero", at_zero},
                          {"n1000_domain_error", small_error}}};
}

struct TheoryReport {
  std::vector<CheckResult> checks;
  bool pass() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
  }
};

inline TheoryReport run_theory_battery(const TheoryBatteryConfig& cfg, const RngStream& rng, std::size_t threads) {
  TheoryReport rep;
  auto [t1, col] = theorem1_checks(cfg, rng.derive(1), threads);
  rep.checks.push_back(std::move(t1));
  rep.checks.push_back(std::move(col));
  auto [ex, mc] = theorem2_checks(cfg, rng.derive(2), threads);
  rep.checks.push_back(std::move(ex));
  rep.checks.push_back(std::move(mc));
  rep.checks.push_back(corollary_check(cfg, rng.derive(3), threads));
  rep.checks.push_back(lower_bound_check());
  return rep;
}

// ---------------------------------------------------------------------------
// Experiment configuration

enum class Phase { Profile, Study, Theory, Train, Lipschitz, Finetune, Gen };

struct ExperimentConfig {
  ConfigFile file;
  std::uint64_t seed = 0;
  std::string config_hash;

  DataParams data;
  std::string train_path, test_path;
  std::vector<std::size_t> hidden{64, 64};
  AdversarialBudget budget{Norm::L2, 0.3};
  TrainConfig train;
  TrainConfig subset_train;  ///< train with the [subset] overrides; used by study and lipschitz

  std::string profile_path;
  Selection selection = Selection::Random;
  std::size_t k = 0;

  std::size_t bandwidth_samples = 1000;

  std::string checkpoint;
  std::size_t finetune_epochs = 5;
  double finetune_lr = 0.01;

  TheoryBatteryConfig theory;
  bool inject_bug = false;

  OutputHeader header(std::string kind) const { return OutputHeader{config_hash, seed, std::move(kind)}; }
};

inline Norm parse_norm(std::string_view s) {
  if (s == "l2") return Norm::L2;
  if (s == "linf") return Norm::Linf;
  throw ValidationError("unknown norm '" + std::string(s) + "'");
}

inline ExperimentConfig parse_experiment_config(ConfigFile f) {
  ExperimentConfig c;
  const double seed = f.get_double("seed", 0.0);
  if (!(seed >= 0.0) || seed != std::floor(seed)) throw ValidationError("seed must be a non-negative integer");
  c.seed = static_cast<std::uint64_t>(seed);

  c.data.kind = parse_dataset_kind(f.get("data.kind", "rings"));
  c.data.n_train = f.get_size("data.n_train", c.data.n_train);
  c.data.n_test = f.get_size("data.n_test", c.data.n_test);
  c.data.label_noise = f.get_double("data.label_noise", c.data.label_noise);
  c.data.overlap = f.get_double("data.overlap", c.data.overlap);
  c.data.dim = f.get_size("data.dim", c.data.dim);
  c.data.radii = f.get_list("data.radii", c.data.radii);
  c.data.probs = f.get_list("data.probs", c.data.probs);
  c.train_path = f.get("data.train_path", "");
  c.test_path = f.get("data.test_path", "");

  c.hidden = f.get_size_list("model.hidden", c.hidden);
  c.budget = AdversarialBudget(parse_norm(f.get("budget.norm", "l2")), f.get_double("budget.epsilon", 0.3));

  TrainConfig& t = c.train;
  t.method = parse_method(f.get("train.method", "pgd_at"));
  t.epochs = f.get_size("train.epochs", t.epochs);
  t.batch_size = f.get_size("train.batch_size", t.batch_size);
  const double lr = f.get_double("train.lr", 0.1);
  const std::string schedule = f.get("train.schedule", "step");
  if (schedule != "step" && schedule != "constant") throw ValidationError("train.schedule must be step or constant");
  auto make_schedule = [&](double base, std::size_t epochs) {
    return schedule == "step" ? LrSchedule::step_decay(base, epochs) : LrSchedule{{{0, base}}};
  };
  t.lr = make_schedule(lr, t.epochs);
  t.momentum = f.get_double("train.momentum", t.momentum);
  t.weight_decay = f.get_double("train.weight_decay", t.weight_decay);
  t.warmup_epochs = f.get_size("train.warmup_epochs", t.warmup_epochs);
  t.attack.steps = f.get_size("train.attack_steps", t.attack.steps);
  t.attack.step_size = f.get_double("train.attack_step_size", t.attack.step_size);
  t.attack.random_init = f.get_bool("train.attack_random_init", t.attack.random_init);
  t.attack.restarts = f.get_size("train.attack_restarts", t.attack.restarts);
  t.iat.eps_delta = f.get_double("iat.eps_delta", t.iat.eps_delta);
  t.sat.rho = f.get_double("sat.rho", t.sat.rho);
  t.sat.lambda = f.get_double("sat.lambda", t.sat.lambda);
  t.fast.rho = f.get_double("fast_at.rho", t.fast.rho);
  t.fast.beta = f.get_double("fast_at.beta", t.fast.beta);
  t.fast.reweight = f.get_bool("fast_at.reweight", t.fast.reweight);
  t.fast.adaptive_target = f.get_bool("fast_at.adaptive_target", t.fast.adaptive_target);
  t.fast.step_size = f.get_double("fast_at.step_size", t.fast.step_size);
  t.finetune.kl = f.get_bool("finetune.kl", t.finetune.kl);
  t.finetune.lambda = f.get_double("finetune.lambda", t.finetune.lambda);
  t.finetune.reweight = f.get_bool("finetune.reweight", t.finetune.reweight);
  c.finetune_epochs = f.get_size("finetune.epochs", c.finetune_epochs);
  c.finetune_lr = f.get_double("finetune.lr", c.finetune_lr);
  c.checkpoint = f.get("finetune.checkpoint", "");

  c.subset_train = t;
  c.subset_train.epochs = f.get_size("subset.epochs", t.epochs);
  c.subset_train.batch_size = f.get_size("subset.batch_size", t.batch_size);
  c.subset_train.lr = make_schedule(f.get_double("subset.lr", lr), c.subset_train.epochs);
  c.subset_train.weight_decay = f.get_double("subset.weight_decay", t.weight_decay);

  c.profile_path = f.get("study.profile", "");
  c.selection = parse_selection(f.get("study.selection", "random"));
  c.k = f.get_size("study.k", 0);
  if (f.has("lipschitz.profile")) c.profile_path = f.get("lipschitz.profile", "");
  if (f.has("lipschitz.k")) c.k = f.get_size("lipschitz.k", 0);
  c.bandwidth_samples = f.get_size("lipschitz.bandwidth_samples", c.bandwidth_samples);

  TheoryBatteryConfig& th = c.theory;
  th.t2_instances = f.get_size("theory.t2_instances", th.t2_instances);
  th.t2_m = f.get_size("theory.t2_m", th.t2_m);
  th.t2_n = f.get_size("theory.t2_n", th.t2_n);
  th.t2_modes = f.get_size("theory.t2_modes", th.t2_modes);
  th.mc_samples = f.get_size("theory.mc_samples", th.mc_samples);
  th.mc_tol = f.get_double("theory.mc_tol", th.mc_tol);
  th.exact_tol = f.get_double("theory.exact_tol", th.exact_tol);
  th.t1_sets = f.get_size("theory.t1_sets", th.t1_sets);
  th.t1_iters = f.get_size("theory.t1_iters", th.t1_iters);
  th.t1_cos = f.get_double("theory.t1_cos", th.t1_cos);
  th.t1_eps_fraction = f.get_double("theory.t1_eps_fraction", th.t1_eps_fraction);
  if (!(th.t1_eps_fraction >= 0.0 && th.t1_eps_fraction < 1.0))
    throw ValidationError("theory.t1_eps_fraction must be in [0, 1)");
  th.corollary_trials = f.get_size("theory.corollary_trials", th.corollary_trials);
  th.corollary_m = f.get_size("theory.corollary_m", th.corollary_m);
  th.corollary_n = f.get_size("theory.corollary_n", th.corollary_n);
  c.inject_bug = f.get_bool("theory.inject_bug", false);

  f.check_all_used();
  c.data.validate();
  t.validate();
  c.subset_train.validate();
  if (c.hidden.empty()) throw ValidationError("model.hidden must list at least one layer");
  c.config_hash = f.hash();
  c.file = std::move(f);
  return c;
}

// ---------------------------------------------------------------------------
// Runs

struct RunContext {
  std::filesystem::path out;
  std::size_t threads = 1;
  bool force = false;
};

/// Creates the output directory; an existing non-empty one needs `force`.
inline void prepare_output_dir(const RunContext& ctx) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (fs::exists(ctx.out, ec) && !fs::is_empty(ctx.out, ec) && !ctx.force)
    throw IoError("output directory " + ctx.out.string() + " is not empty (use --force)");
  fs::create_directories(ctx.out, ec);
  if (ec) throw IoError("cannot create output directory " + ctx.out.string() + ": " + ec.message());
}

inline void write_output(const RunContext& ctx, const std::string& name, std::string_view bytes) {
  write_file((ctx.out / name).string(), bytes);
}

inline DatasetBundle load_data(const ExperimentConfig& c) {
  if (!c.train_path.empty()) {
    DatasetBundle b;
    b.train = read_dataset_csv(c.train_path);
    if (!c.test_path.empty()) b.test = read_dataset_csv(c.test_path);
    return b;
  }
  return generate_dataset(c.data, RngStream(c.seed, 0));
}

inline const Dataset* test_split(const DatasetBundle& b) { return b.test.empty() ? nullptr : &b.test; }

inline std::vector<std::size_t> mlp_dims(const ExperimentConfig& c, const Dataset& d) {
  std::vector<std::size_t> dims{d.dim()};
  dims.insert(dims.end(), c.hidden.begin(), c.hidden.end());
  dims.push_back(d.num_classes);
  return dims;
}

inline RngStream root_stream(const ExperimentConfig& c) { return RngStream(c.seed, 0); }
inline constexpr std::uint64_t kTrainTag = 0x5452414E;

inline TrainConfig with_threads(TrainConfig t, std::size_t threads) {
  t.threads = threads;
  return t;
}

inline PerturbationKind profile_kind(Method m) {
  switch (m) {
    case Method::Vanilla: return PerturbationKind::Clean;
    case Method::FgsmAt: return PerturbationKind::Fgsm;
    case Method::PgdAt: return PerturbationKind::Pgd;
    default: throw ValidationError("profile runs use vanilla, fgsm_at or pgd_at, not " + std::string(to_string(m)));
  }
}

struct ProfileOutcome {
  DifficultyProfile profile;
  TrainResult<MlpModel> run;
};

/// Trains on the full training set and ranks instances by average perturbed loss.
inline ProfileOutcome profile_run(const ExperimentConfig& c, const DatasetBundle& data, std::size_t threads) {
  const PerturbationKind kind = profile_kind(c.train.method);
  const RngStream root = root_stream(c);
  const MlpModel init = MlpModel::glorot(mlp_dims(c, data.train), root.derive(streams::kInit));
  TrainOptions opt;
  opt.test = test_split(data);
  auto run = train(init, data.train, c.budget, with_threads(c.train, threads), root.derive(kTrainTag), opt);
  DifficultyProfile p = compute_difficulty(run.history, kind);
  return {std::move(p), std::move(run)};
}

inline DifficultyProfile load_profile(const std::string& path, const Dataset& train) {
  if (path.empty()) throw ValidationError("no profile given (study.profile / lipschitz.profile)");
  const DifficultyProfile p = parse_profile_csv(read_file(path), path);
  if (p.size() != train.size())
    throw ValidationError(path + ": profile has " + std::to_string(p.size()) + " instances, training set has " +
                          std::to_string(train.size()));
  return p;
}

inline GroupPartition restrict_partition(const GroupPartition& full, std::span<const std::size_t> indices) {
  GroupPartition out;
  for (std::size_t i : indices) out.group_of.push_back(full.group_of.at(i));
  return out;
}

inline std::string indices_csv(std::span<const std::size_t> idx, const OutputHeader& h) {
  std::string s = h.csv_lines() + "instance_id\n";
  for (std::size_t i : idx) s += std::to_string(i) + "\n";
  return s;
}

// Commands. Each returns the process exit status.

inline int cmd_gen(const ExperimentConfig& c, const RunContext& ctx) {
  prepare_output_dir(ctx);
  const DatasetBundle b = generate_dataset(c.data, RngStream(c.seed, 0));
  write_output(ctx, "train.csv",
               dataset_csv(b.train, c.header("dataset train"), &b.train_flipped,
                           c.data.kind == DatasetKind::Gmm ? &b.train_mode : nullptr));
  write_output(ctx, "test.csv", dataset_csv(b.test, c.header("dataset test")));
  return 0;
}

inline int cmd_profile(const ExperimentConfig& c, const RunContext& ctx) {
  prepare_output_dir(ctx);
  const DatasetBundle data = load_data(c);
  const ProfileOutcome po = profile_run(c, data, ctx.threads);
  write_output(ctx, "profile.csv", profile_csv(po.profile, c.header("profile")));
  write_output(ctx, "history.bin", po.run.history.encode());
  write_output(ctx, "curves.csv", epoch_records_csv(po.run.records, c.train.method, c.header("curves")));
  write_output(ctx, "model.ckpt", encode_checkpoint(po.run.model));
  return 0;
}

/// Trains on k class-balanced instances picked by difficulty rank.
inline int cmd_study(const ExperimentConfig& c, const RunContext& ctx) {
  prepare_output_dir(ctx);
  const DatasetBundle data = load_data(c);
  const DifficultyProfile prof = load_profile(c.profile_path, data.train);
  const RngStream root = root_stream(c);
  const std::size_t k = c.k == 0 ? data.train.size() : c.k;
  const auto idx = select_subset(prof, data.train.y, data.train.num_classes, c.selection, k, root.derive(streams::kSelect));
  const Dataset sub = data.train.subset(idx);
  const MlpModel init = MlpModel::glorot(mlp_dims(c, sub), root.derive(streams::kInit));
  TrainOptions opt;
  opt.test = test_split(data);
  opt.partition = restrict_partition(partition_groups(prof), idx);
  auto run = run_training(init, sub, c.budget, with_threads(c.subset_train, ctx.threads), root.derive(kTrainTag), opt);
  write_output(ctx, "subset.csv", indices_csv(idx, c.header("subset " + std::string(to_string(c.selection)))));
  write_output(ctx, "curves.csv", epoch_records_csv(run.records, c.train.method, c.header("curves")));
  write_output(ctx, "model.ckpt", encode_checkpoint(run.model));
  return 0;
}

/// Full-set training with any method; per-group columns when a profile is given.
inline int cmd_train(const ExperimentConfig& c, const RunContext& ctx) {
  prepare_output_dir(ctx);
  const DatasetBundle data = load_data(c);
  const RngStream root = root_stream(c);
  const MlpModel init = MlpModel::glorot(mlp_dims(c, data.train), root.derive(streams::kInit));
  TrainOptions opt;
  opt.test = test_split(data);
  if (!c.profile_path.empty()) opt.partition = partition_groups(load_profile(c.profile_path, data.train));
  auto run = run_training(init, data.train, c.budget, with_threads(c.train, ctx.threads), root.derive(kTrainTag), opt);
  write_output(ctx, "curves.csv", epoch_records_csv(run.records, c.train.method, c.header("curves")));
  write_output(ctx, "history.bin", run.history.encode());
  write_output(ctx, "model.ckpt", encode_checkpoint(run.model));
  return 0;
}

inline Json check_json(const CheckResult& c) {
  Json j{{"name", c.name}, {"pass", c.pass}};
  for (auto it = c.detail.begin(); it != c.detail.end(); ++it) j[it.key()] = it.value();
  return j;
}

inline Json theory_json(const ExperimentConfig& c, const TheoryReport& rep) {
  const TheoryBatteryConfig& t = c.theory;
  Json checks = Json::array();
  Json failed = Json::array();
  for (const CheckResult& r : rep.checks) {
    checks.push_back(check_json(r));
    if (!r.pass) failed.push_back(r.name);
  }
  return Json{{"kind", "theory"},
              {"config_hash", c.config_hash},
              {"seed", c.seed},
              {"inputs",
               Json{{"t2_instances", t.t2_instances},
                    {"t2_m", t.t2_m},
                    {"t2_n", t.t2_n},
                    {"t2_modes", t.t2_modes},
                    {"mc_samples", t.mc_samples},
                    {"t1_sets", t.t1_sets},
                    {"t1_iters", t.t1_iters},
                    {"t1_eps_fraction", t.t1_eps_fraction},
                    {"corollary_trials", t.corollary_trials},
                    {"corollary_m", t.corollary_m},
                    {"corollary_n", t.corollary_n},
                    {"c2_scale", t.c2_scale},
                    {"regime_warnings", theorem2_regime_warnings(t.t2_n, t.t2_m)}}},
              {"checks", checks},
              {"failed", failed},
              {"pass", rep.pass()}};
}

inline int cmd_theory(const ExperimentConfig& c, const RunContext& ctx, std::ostream& log) {
  prepare_output_dir(ctx);
  TheoryBatteryConfig cfg = c.theory;
  if (c.inject_bug) cfg.c2_scale = 1.1;
  const TheoryReport rep = run_theory_battery(cfg, RngStream(c.seed, streams::kTheory), ctx.threads);
  ExperimentConfig shown = c;
  shown.theory = cfg;
  write_output(ctx, "theory.json", theory_json(shown, rep).dump(2) + "\n");
  for (const CheckResult& r : rep.checks) log << (r.pass ? "PASS " : "FAIL ") << r.name << "\n";
  return rep.pass() ? 0 : 1;
}

/// Easiest / random / hardest subsets from a shared initialization; the
/// profile comes from the config or from a fresh profile run.
inline int cmd_lipschitz(const ExperimentConfig& c, const RunContext& ctx) {
  prepare_output_dir(ctx);
  const DatasetBundle data = load_data(c);
  if (data.test.empty()) throw ValidationError("lipschitz needs a test split");
  DifficultyProfile prof;
  if (c.profile_path.empty()) {
    prof = profile_run(c, data, ctx.threads).profile;
    write_output(ctx, "profile.csv", profile_csv(prof, c.header("profile")));
  } else {
    prof = load_profile(c.profile_path, data.train);
  }
  const std::size_t k = c.k == 0 ? data.train.size() / 5 : c.k;
  const RngStream root = root_stream(c);
  const HardEasyResult res = hard_easy_lipschitz_experiment(data.train, data.test, prof, c.budget,
                                                            with_threads(c.subset_train, ctx.threads), mlp_dims(c, data.train),
                                                            k, root.derive(kTrainTag));
  std::string curve = c.header("lipschitz upper bound per epoch").csv_lines() + "epoch,easiest,random,hardest\n";
  for (std::size_t e = 0; e < res.runs[0].lipschitz.size(); ++e) {
    // row 0 is the untrained model
    curve += std::to_string(e);
    for (const SubsetRun& r : res.runs) curve += "," + format_double(r.lipschitz[e]);
    curve += "\n";
  }
  write_output(ctx, "lipschitz_curve.csv", curve);

  std::string summary = c.header("lipschitz summary").csv_lines() +
                        "selection,final_lipschitz_upper,final_test_robust_err,final_train_robust_err,"
                        "bandwidth_estimate\n";
  for (const SubsetRun& r : res.runs) {
    const Dataset sub = data.train.subset(r.indices);
    const double h = bandwidth_mlp_estimate(r.model, sub, c.budget, c.bandwidth_samples,
                                            root.derive(streams::kTheory, static_cast<std::uint64_t>(r.selection)),
                                            ctx.threads);
    summary += std::string(to_string(r.selection)) + "," + format_double(r.lipschitz.back()) + "," +
               format_double(r.records.back().test_robust_err) + "," +
               format_double(r.records.back().train_robust_err) + "," + format_double(h) + "\n";
  }
  write_output(ctx, "lipschitz_summary.csv", summary);
  return 0;
}

/// Fine-tunes a pretrained model (checkpoint, or a fresh run of [train]) on
/// the training set with CE on perturbed inputs, optional KL term and reweighting.
inline int cmd_finetune(const ExperimentConfig& c, const RunContext& ctx) {
  prepare_output_dir(ctx);
  const DatasetBundle data = load_data(c);
  const RngStream root = root_stream(c);
  MlpModel base;
  if (!c.checkpoint.empty()) {
    base = decode_mlp_checkpoint(read_file(c.checkpoint));
  } else {
    const MlpModel init = MlpModel::glorot(mlp_dims(c, data.train), root.derive(streams::kInit));
    TrainOptions o;
    o.evaluate = false;
    base = train(init, data.train, c.budget, with_threads(c.train, ctx.threads), root.derive(kTrainTag), o).model;
  }
  TrainConfig ft = with_threads(c.train, ctx.threads);
  ft.method = Method::Finetune;
  ft.epochs = c.finetune_epochs;
  ft.warmup_epochs = 0;
  ft.lr = LrSchedule{{{0, c.finetune_lr}}};
  TrainOptions opt;
  opt.test = test_split(data);
  if (!c.profile_path.empty()) opt.partition = partition_groups(load_profile(c.profile_path, data.train));
  auto run = run_training(base, data.train, c.budget, ft, root.derive(kTrainTag, 1), opt);
  write_output(ctx, "curves.csv", epoch_records_csv(run.records, Method::Finetune, c.header("finetune curves")));
  write_output(ctx, "model.ckpt", encode_checkpoint(run.model));
  return 0;
}

}  // namespace advlab
