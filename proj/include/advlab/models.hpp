#pragma once

// Differentiable classifiers: logistic-regression linear model and a ReLU MLP.
//
// Both models store their parameters in one flat buffer. Gradients with
// respect to parameters use exactly the same layout, so optimizers, finite
// difference checks, and gradient-similarity analyses can treat any model as
// a plain vector.

#include <algorithm>
#include <bit>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "advlab/errors.hpp"
#include "advlab/numkit.hpp"

namespace advlab {

// ---------------------------------------------------------------------------
// Losses on logits

enum class LossKind { BinaryLogistic, SoftmaxCrossEntropy, SquaredError, KlToTarget };

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::BinaryLogistic: return "binary-logistic";
    case LossKind::SoftmaxCrossEntropy: return "softmax-cross-entropy";
    case LossKind::SquaredError: return "squared-error";
    case LossKind::KlToTarget: return "kl-to-target";
  }
  return "?";
}

/// A loss kind together with its target. Labels for the binary logistic loss
/// are {-1, +1}; class indices are expanded into one-hot distributions.
struct LossTarget {
  LossKind kind = LossKind::SoftmaxCrossEntropy;
  Vector values;

  static LossTarget logistic(double y) { return {LossKind::BinaryLogistic, {y}}; }
  static LossTarget class_index(int label, std::size_t classes) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes)
      throw ValidationError("class label out of range");
    Vector t(classes, 0.0);
    t[static_cast<std::size_t>(label)] = 1.0;
    return {LossKind::SoftmaxCrossEntropy, std::move(t)};
  }
  static LossTarget soft(Vector probs) { return {LossKind::SoftmaxCrossEntropy, std::move(probs)}; }
  static LossTarget kl(Vector probs) { return {LossKind::KlToTarget, std::move(probs)}; }
  static LossTarget squared(Vector target) { return {LossKind::SquaredError, std::move(target)}; }
};

inline constexpr double kProbabilityTolerance = 1e-9;

inline void validate_probability(std::span<const double> p, std::string_view what = "target") {
  double s = 0.0;
  for (double v : p) {
    if (!std::isfinite(v) || v < -kProbabilityTolerance)
      throw ValidationError(std::string(what) + ": negative or non-finite probability");
    s += v;
  }
  if (std::abs(s - 1.0) > kProbabilityTolerance)
    throw ValidationError(std::string(what) + ": probabilities do not sum to 1");
}

inline Vector log_softmax(std::span<const double> z) {
  const double zmax = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - zmax);
  const double lse = zmax + std::log(s);
  Vector out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
  return out;
}

inline Vector softmax(std::span<const double> z) {
  Vector out = log_softmax(z);
  for (double& v : out) v = std::exp(v);
  return out;
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// KL(p || q) for probability vectors with 0 log 0 = 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * (std::log(p[i]) - std::log(q[i]));
  return s;
}

struct LogitLoss {
  double loss = 0.0;
  Vector dlogits;
};

inline LogitLoss loss_on_logits(std::span<const double> z, const LossTarget& target) {
  LogitLoss out;
  switch (target.kind) {
    case LossKind::BinaryLogistic: {
      if (z.size() != 1 || target.values.size() != 1) throw ShapeError("binary-logistic needs one logit");
      const double y = target.values[0];
      if (y != 1.0 && y != -1.0) throw ValidationError("binary-logistic label must be -1 or +1");
      const double margin = y * z[0];
      out.loss = softplus(-margin);
      out.dlogits = {-y * sigmoid(-margin)};
      break;
    }
    case LossKind::SoftmaxCrossEntropy:
    case LossKind::KlToTarget: {
      if (z.size() != target.values.size()) throw ShapeError("target length does not match logits");
      validate_probability(target.values);
      const Vector lp = log_softmax(z);
      double loss = 0.0;
      for (std::size_t c = 0; c < z.size(); ++c) {
        const double t = target.values[c];
        if (t <= 0.0) continue;
        loss += target.kind == LossKind::KlToTarget ? t * (std::log(t) - lp[c]) : -t * lp[c];
      }
      out.loss = target.kind == LossKind::KlToTarget ? std::max(loss, 0.0) : loss;
      out.dlogits.resize(z.size());
      for (std::size_t c = 0; c < z.size(); ++c) out.dlogits[c] = std::exp(lp[c]) - target.values[c];
      break;
    }
    case LossKind::SquaredError: {
      if (z.size() != target.values.size()) throw ShapeError("target length does not match outputs");
      out.dlogits.resize(z.size());
      for (std::size_t c = 0; c < z.size(); ++c) {
        const double r = z[c] - target.values[c];
        out.loss += r * r;
        out.dlogits[c] = 2.0 * r;
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Models

struct GradientBundle {
  Vector params;  ///< same layout as the owning model's flat parameters
  Vector input;
};

struct ForwardResult {
  Vector logits;
  Vector penultimate;
};

/// Logistic-regression score w·x (no bias).
class LinearModel {
 public:
  LinearModel() = default;
  explicit LinearModel(Vector w) : w_(std::move(w)) {
    if (!all_finite(w_)) throw ValidationError("linear model weights must be finite");
  }

  const Vector& weights() const { return w_; }
  std::size_t input_dim() const { return w_.size(); }
  std::size_t num_outputs() const { return 1; }
  std::size_t num_params() const { return w_.size(); }
  std::span<double> params() { return w_; }
  std::span<const double> params() const { return w_; }

  bool operator==(const LinearModel&) const = default;

 private:
  Vector w_;
};

/// Fully connected network, ReLU on hidden layers, identity output.
class MlpModel {
 public:
  MlpModel() = default;

  /// All-zero parameters; dims = {input, hidden..., outputs}.
  explicit MlpModel(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    if (dims_.size() < 2) throw ShapeError("mlp needs at least input and output dims");
    for (std::size_t d : dims_)
      if (d == 0) throw ShapeError("mlp layer dims must be positive");
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      weight_offset_.push_back(off);
      off += dims_[l + 1] * dims_[l];
      bias_offset_.push_back(off);
      off += dims_[l + 1];
    }
    params_.assign(off, 0.0);
  }

  MlpModel(std::vector<std::size_t> dims, Vector params) : MlpModel(std::move(dims)) {
    if (params.size() != params_.size()) throw ShapeError("mlp parameter payload size mismatch");
    params_ = std::move(params);
  }

  /// Uniform Glorot init, one derived stream per layer; biases start at zero.
  static MlpModel glorot(std::vector<std::size_t> dims, const RngStream& rng) {
    MlpModel m(std::move(dims));
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
      RngStream layer_rng = rng.derive(l);
      const double fan_in = static_cast<double>(m.dims_[l]);
      const double fan_out = static_cast<double>(m.dims_[l + 1]);
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& w : m.weight(l).data) w = layer_rng.uniform(-limit, limit);
    }
    return m;
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t num_layers() const { return dims_.size() - 1; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t num_outputs() const { return dims_.back(); }
  std::size_t penultimate_dim() const { return dims_[dims_.size() - 2]; }
  std::size_t num_params() const { return params_.size(); }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  MatrixView weight(std::size_t l) {
    return {dims_[l + 1], dims_[l], std::span<double>(params_).subspan(weight_offset_[l], dims_[l + 1] * dims_[l])};
  }
  ConstMatrixView weight(std::size_t l) const {
    return {dims_[l + 1], dims_[l],
            std::span<const double>(params_).subspan(weight_offset_[l], dims_[l + 1] * dims_[l])};
  }
  std::span<double> bias(std::size_t l) { return std::span<double>(params_).subspan(bias_offset_[l], dims_[l + 1]); }
  std::span<const double> bias(std::size_t l) const {
    return std::span<const double>(params_).subspan(bias_offset_[l], dims_[l + 1]);
  }

  std::size_t weight_offset(std::size_t l) const { return weight_offset_[l]; }
  std::size_t bias_offset(std::size_t l) const { return bias_offset_[l]; }

  bool operator==(const MlpModel& o) const { return dims_ == o.dims_ && params_ == o.params_; }

 private:
  std::vector<std::size_t> dims_;
  std::vector<std::size_t> weight_offset_;
  std::vector<std::size_t> bias_offset_;
  Vector params_;
};

template <class M>
concept Classifier = requires(const M& m) {
  { m.input_dim() } -> std::convertible_to<std::size_t>;
  { m.num_outputs() } -> std::convertible_to<std::size_t>;
  { m.num_params() } -> std::convertible_to<std::size_t>;
  { m.params() } -> std::convertible_to<std::span<const double>>;
};

// ---------------------------------------------------------------------------
// Forward / backward

struct LinearTrace {
  Vector input;
  Vector logits;
};

struct MlpTrace {
  std::vector<Vector> activations;  ///< a_0 = x, then post-ReLU hidden activations
  std::vector<Vector> preactivations;  ///< hidden pre-activations
  Vector logits;
};

inline LinearTrace forward_trace(const LinearModel& m, std::span<const double> x) {
  if (x.size() != m.input_dim()) throw ShapeError("input length does not match model");
  return {Vector(x.begin(), x.end()), {dot(m.weights(), x)}};
}

inline MlpTrace forward_trace(const MlpModel& m, std::span<const double> x) {
  if (x.size() != m.input_dim()) throw ShapeError("input length does not match model");
  MlpTrace tr;
  tr.activations.emplace_back(x.begin(), x.end());
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    Vector z = matvec(m.weight(l), tr.activations.back());
    axpy(1.0, m.bias(l), z);
    if (l + 1 == m.num_layers()) {
      tr.logits = std::move(z);
    } else {
      Vector a(z.size());
      for (std::size_t i = 0; i < z.size(); ++i) a[i] = z[i] > 0.0 ? z[i] : 0.0;
      tr.preactivations.push_back(std::move(z));
      tr.activations.push_back(std::move(a));
    }
  }
  return tr;
}

/// Accumulates scale * d(loss)/d(params) and scale * d(loss)/d(x) given
/// dlogits. Either output span may be empty to skip that part.
inline void backward(const LinearModel& m, const LinearTrace& tr, std::span<const double> dlogits, double scale,
                     std::span<double> param_grad, std::span<double> input_grad) {
  const double g = scale * dlogits[0];
  if (!param_grad.empty()) axpy(g, tr.input, param_grad);
  if (!input_grad.empty()) axpy(g, m.weights(), input_grad);
}

inline void backward(const MlpModel& m, const MlpTrace& tr, std::span<const double> dlogits, double scale,
                     std::span<double> param_grad, std::span<double> input_grad) {
  Vector delta(dlogits.begin(), dlogits.end());
  for (double& d : delta) d *= scale;
  for (std::size_t l = m.num_layers(); l-- > 0;) {
    const Vector& a_in = tr.activations[l];
    const ConstMatrixView w = m.weight(l);
    if (!param_grad.empty()) {
      double* gw = param_grad.data() + m.weight_offset(l);
      double* gb = param_grad.data() + m.bias_offset(l);
      for (std::size_t i = 0; i < w.rows; ++i) {
        const double di = delta[i];
        gb[i] += di;
        if (di == 0.0) continue;
        double* row = gw + i * w.cols;
        for (std::size_t j = 0; j < w.cols; ++j) row[j] += di * a_in[j];
      }
    }
    if (l == 0 && input_grad.empty()) break;
    Vector prev = matvec_transposed(w, delta);
    if (l == 0) {
      axpy(1.0, prev, input_grad);
      break;
    }
    const Vector& z = tr.preactivations[l - 1];
    for (std::size_t j = 0; j < prev.size(); ++j)
      if (!(z[j] > 0.0)) prev[j] = 0.0;  // ReLU'(0) := 0
    delta = std::move(prev);
  }
}

inline const Vector& trace_logits(const LinearTrace& t) { return t.logits; }
inline const Vector& trace_logits(const MlpTrace& t) { return t.logits; }
inline const Vector& trace_penultimate(const LinearTrace& t) { return t.input; }
inline const Vector& trace_penultimate(const MlpTrace& t) { return t.activations.back(); }

template <Classifier Model>
ForwardResult forward(const Model& m, std::span<const double> x) {
  auto tr = forward_trace(m, x);
  return {trace_logits(tr), trace_penultimate(tr)};
}

template <Classifier Model>
Vector logits(const Model& m, std::span<const double> x) {
  return trace_logits(forward_trace(m, x));
}

template <Classifier Model>
double loss_value(const Model& m, std::span<const double> x, const LossTarget& target) {
  return loss_on_logits(logits(m, x), target).loss;
}

struct LossAndGrads {
  double loss = 0.0;
  GradientBundle grads;
};

template <Classifier Model>
LossAndGrads loss_and_grads(const Model& m, std::span<const double> x, const LossTarget& target) {
  auto tr = forward_trace(m, x);
  LogitLoss ll = loss_on_logits(trace_logits(tr), target);
  LossAndGrads out;
  out.loss = ll.loss;
  out.grads.params.assign(m.num_params(), 0.0);
  out.grads.input.assign(m.input_dim(), 0.0);
  backward(m, tr, ll.dlogits, 1.0, out.grads.params, out.grads.input);
  return out;
}

struct LossAndInputGrad {
  double loss = 0.0;
  Vector input_grad;
};

template <Classifier Model>
LossAndInputGrad loss_and_input_grad(const Model& m, std::span<const double> x, const LossTarget& target) {
  auto tr = forward_trace(m, x);
  LogitLoss ll = loss_on_logits(trace_logits(tr), target);
  LossAndInputGrad out{ll.loss, Vector(m.input_dim(), 0.0)};
  backward(m, tr, ll.dlogits, 1.0, {}, out.input_grad);
  return out;
}

/// Training target for a class label: logistic {-1,+1} for single-output
/// models, one-hot cross-entropy otherwise.
inline LossTarget label_target(std::size_t num_outputs, int label, std::size_t classes) {
  if (num_outputs == 1) return LossTarget::logistic(label == 1 ? 1.0 : -1.0);
  return LossTarget::class_index(label, classes);
}

/// Index of the largest logit; for a single-logit model, 1 if positive else 0.
inline int predict_class(std::span<const double> z) {
  if (z.size() == 1) return z[0] > 0.0 ? 1 : 0;
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

// ---------------------------------------------------------------------------
// Lipschitz upper bound

/// Product of the layers' spectral norms; bounds Lip(f) in l2 because ReLU is
/// 1-Lipschitz and the output layer has no squashing.
inline double product_lipschitz_upper(const MlpModel& m, const RngStream& rng = RngStream(0, streams::kSpectral)) {
  double prod = 1.0;
  for (std::size_t l = 0; l < m.num_layers(); ++l) prod *= spectral_norm(m.weight(l), rng.derive(l));
  return prod;
}

// ---------------------------------------------------------------------------
// Checkpoints: "ADVLAB01", u64 dim count, u64 dims, f64 payload; little endian.

inline constexpr std::string_view kCheckpointMagic = "ADVLAB01";

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(std::string_view in, std::size_t& pos) {
  if (pos + 8 > in.size()) throw IoError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += 8;
  return v;
}

inline std::string encode(std::span<const std::size_t> dims, std::span<const double> params) {
  std::string out(kCheckpointMagic);
  put_u64(out, dims.size());
  for (std::size_t d : dims) put_u64(out, d);
  for (double p : params) put_u64(out, std::bit_cast<std::uint64_t>(p));
  return out;
}

inline std::pair<std::vector<std::size_t>, Vector> decode(std::string_view in) {
  if (in.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) throw IoError("bad checkpoint magic");
  std::size_t pos = kCheckpointMagic.size();
  const std::uint64_t count = get_u64(in, pos);
  if (count == 0 || count > 1024) throw IoError("bad checkpoint dimension count");
  std::vector<std::size_t> dims(count);
  for (auto& d : dims) d = static_cast<std::size_t>(get_u64(in, pos));
  Vector params;
  while (pos < in.size()) params.push_back(std::bit_cast<double>(get_u64(in, pos)));
  return {std::move(dims), std::move(params)};
}

}  // namespace detail

inline std::string encode_checkpoint(const MlpModel& m) { return detail::encode(m.dims(), m.params()); }

/// Linear models use a one-entry dimension header {m}.
inline std::string encode_checkpoint(const LinearModel& m) {
  const std::size_t dims[] = {m.input_dim()};
  return detail::encode(dims, m.params());
}

inline MlpModel decode_mlp_checkpoint(std::string_view bytes) {
  auto [dims, params] = detail::decode(bytes);
  if (dims.size() < 2) throw IoError("checkpoint does not hold an mlp");
  return MlpModel(std::move(dims), std::move(params));
}

inline LinearModel decode_linear_checkpoint(std::string_view bytes) {
  auto [dims, params] = detail::decode(bytes);
  if (dims.size() != 1 || params.size() != dims[0]) throw IoError("checkpoint does not hold a linear model");
  return LinearModel(std::move(params));
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace advlab
