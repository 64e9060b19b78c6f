#include <gtest/gtest.h>

#include <cmath>

#include "advlab/trainers.hpp"

using namespace advlab;

namespace {

Dataset blobs(std::size_t n, std::size_t classes, RngStream r) {
  Dataset d;
  d.num_classes = classes;
  d.x = Matrix(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % classes);
    const double a = 2.0 * M_PI * y / static_cast<double>(classes);
    d.y.push_back(y);
    d.x(i, 0) = std::cos(a) + 0.6 * r.normal();
    d.x(i, 1) = std::sin(a) + 0.6 * r.normal();
  }
  return d;
}

TrainConfig small_config(Method m, std::size_t epochs = 3) {
  TrainConfig c;
  c.method = m;
  c.epochs = epochs;
  c.batch_size = 8;
  c.lr = LrSchedule::step_decay(0.05, epochs);
  c.attack = AttackConfig{3, 0.0, true, 1};
  return c;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class F>
Vector numeric_gradient(F f, Vector x, double h = 1e-6) {
  Vector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

}  // namespace

TEST(Sgd, MatchesHandComputedMomentumSteps) {
  SgdMomentum s(0.9, 0.1);
  Vector p{1.0};
  s.step(p, Vector{0.5}, 0.1);
  // buf = 0.5 + 0.1 = 0.6, p = 1 - 0.06
  EXPECT_NEAR(p[0], 0.94, 1e-15);
  s.step(p, Vector{0.5}, 0.1);
  // buf = 0.9 * 0.6 + 0.5 + 0.094 = 1.134
  EXPECT_NEAR(p[0], 0.94 - 0.1134, 1e-15);
  EXPECT_THROW(s.step(p, Vector{1.0, 2.0}, 0.1), ShapeError);
}

TEST(Schedule, StepDecayBoundaries) {
  const LrSchedule s = LrSchedule::step_decay(0.1, 10);
  EXPECT_DOUBLE_EQ(s.rate(0), 0.1);
  EXPECT_DOUBLE_EQ(s.rate(4), 0.1);
  EXPECT_DOUBLE_EQ(s.rate(5), 0.01);
  EXPECT_DOUBLE_EQ(s.rate(6), 0.01);
  EXPECT_DOUBLE_EQ(s.rate(7), 0.001);
  EXPECT_DOUBLE_EQ(s.rate(100), 0.001);
  LrSchedule bad;
  bad.points = {{1, 0.1}};
  EXPECT_THROW(bad.validate(), ValidationError);
}

TEST(Config, Validation) {
  TrainConfig c = small_config(Method::PgdAt);
  c.warmup_epochs = 3;
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_config(Method::PgdAt);
  c.fast.beta = 1.5;
  EXPECT_THROW(c.validate(), ValidationError);
  c = small_config(Method::PgdAt);
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_EQ(parse_method(to_string(Method::FastAt)), Method::FastAt);
  EXPECT_THROW(parse_method("trades"), ValidationError);
}

TEST(Kl, GradientsThroughBothBranches) {
  for (int trial = 0; trial < 20; ++trial) {
    RngStream r(trial, 1);
    Vector zc(3), za(3);
    for (double& v : zc) v = 2.0 * r.normal();
    for (double& v : za) v = 2.0 * r.normal();
    const KlTerm k = kl_clean_adv(zc, za);
    EXPECT_NEAR(k.kl, kl_divergence(softmax(zc), softmax(za)), 1e-13);
    const Vector gc = numeric_gradient([&](const Vector& z) { return kl_clean_adv(z, za).kl; }, zc);
    const Vector ga = numeric_gradient([&](const Vector& z) { return kl_clean_adv(zc, z).kl; }, za);
    EXPECT_LT(max_abs_diff(k.d_clean, gc), 1e-7);
    EXPECT_LT(max_abs_diff(k.d_adv, ga), 1e-7);
  }
}

TEST(Finetune, ZeroLambdaWithoutReweightIsMeanCrossEntropy) {
  const MlpModel m = MlpModel::glorot({2, 6, 3}, RngStream(2, 2));
  const Dataset d = blobs(9, 3, RngStream(2, 3));
  Matrix adv = d.x;
  for (double& v : adv.data()) v += 0.05;
  const FinetuneLoss f = finetune_loss(m, d.x, adv, d.y, 3, 0.0, false);
  double mean = 0.0;
  for (std::size_t i = 0; i < 9; ++i) mean += loss_value(m, adv.row(i), LossTarget::class_index(d.y[i], 3)) / 9.0;
  EXPECT_NEAR(f.loss, mean, 1e-14);
  for (double w : f.weights) EXPECT_DOUBLE_EQ(w, 1.0 / 9.0);
}

TEST(Finetune, WeightsAreNormalizedConfidences) {
  const MlpModel m = MlpModel::glorot({2, 6, 3}, RngStream(3, 2));
  const Dataset d = blobs(12, 3, RngStream(3, 3));
  const FinetuneLoss f = finetune_loss(m, d.x, d.x, d.y, 3, 6.0, true);
  double sum = 0.0, conf_sum = 0.0;
  Vector conf;
  for (std::size_t i = 0; i < 12; ++i) {
    const Vector o = softmax(logits(m, d.x.row(i)));
    conf.push_back(*std::max_element(o.begin(), o.end()));
    conf_sum += conf.back();
  }
  for (std::size_t i = 0; i < 12; ++i) {
    sum += f.weights[i];
    EXPECT_NEAR(f.weights[i], conf[i] / conf_sum, 1e-15);
  }
  EXPECT_NEAR(sum, 1.0, 1e-14);
}

TEST(Finetune, ParameterGradientFiniteDifference) {
  const MlpModel m = MlpModel::glorot({2, 5, 3}, RngStream(4, 2));
  const Dataset d = blobs(6, 3, RngStream(4, 3));
  Matrix adv = d.x;
  RngStream r(4, 4);
  for (double& v : adv.data()) v += 0.2 * r.normal();
  const FinetuneLoss f = finetune_loss(m, d.x, adv, d.y, 3, 2.5, false);
  Vector p(m.params().begin(), m.params().end());
  const Vector g = numeric_gradient(
      [&](const Vector& pp) { return finetune_loss(MlpModel(m.dims(), pp), d.x, adv, d.y, 3, 2.5, false).loss; }, p);
  EXPECT_LT(max_abs_diff(f.grads, g), 1e-7);
}

TEST(Finetune, RejectsBadBatches) {
  const MlpModel m = MlpModel::glorot({2, 4, 2}, RngStream(5, 2));
  EXPECT_THROW(finetune_loss(m, Matrix(0, 2), Matrix(0, 2), std::vector<int>{}, 2, 1.0, true), ValidationError);
  EXPECT_THROW(finetune_loss(m, Matrix(2, 2), Matrix(1, 2), std::vector<int>{0, 1}, 2, 1.0, true), ShapeError);
  const MlpModel logistic = MlpModel::glorot({2, 4, 1}, RngStream(5, 3));
  EXPECT_THROW(finetune_loss(logistic, Matrix(1, 2), Matrix(1, 2), std::vector<int>{0}, 2, 1.0, true),
               ValidationError);
}

TEST(Reductions, PgdAtAtZeroRadiusIsVanilla) {
  const Dataset d = blobs(40, 2, RngStream(6, 1));
  const MlpModel init = MlpModel::glorot({2, 8, 2}, RngStream(6, 2));
  const AdversarialBudget zero(Norm::Linf, 0.0);
  const auto a = run_training(init, d, zero, small_config(Method::Vanilla), RngStream(6, 3));
  const auto b = run_training(init, d, zero, small_config(Method::PgdAt), RngStream(6, 3));
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.history, b.history);
}

TEST(Reductions, FastAtWithFullLabelWeightAndNoReweightIsCrossEntropy) {
  const Dataset d = blobs(40, 3, RngStream(7, 1));
  const MlpModel init = MlpModel::glorot({2, 8, 3}, RngStream(7, 2));
  const AdversarialBudget zero(Norm::L2, 0.0);
  TrainConfig fast = small_config(Method::FastAt);
  fast.fast.beta = 1.0;
  fast.fast.reweight = false;
  const auto a = run_training(init, d, zero, small_config(Method::Vanilla), RngStream(7, 3));
  const auto b = run_training(init, d, zero, fast, RngStream(7, 3));
  EXPECT_LT(max_abs_diff(a.model.params(), b.model.params()), 1e-12);
}

TEST(Reductions, SatWithFrozenTargetsAndNoKlIsCleanCrossEntropy) {
  const Dataset d = blobs(40, 2, RngStream(8, 1));
  const MlpModel init = MlpModel::glorot({2, 8, 2}, RngStream(8, 2));
  TrainConfig sat = small_config(Method::Sat);
  sat.sat.rho = 1.0;
  sat.sat.lambda = 0.0;
  const AdversarialBudget b(Norm::Linf, 0.2);
  const auto a = run_training(init, d, b, small_config(Method::Vanilla), RngStream(8, 3));
  const auto s = run_training(init, d, b, sat, RngStream(8, 3));
  EXPECT_LT(max_abs_diff(a.model.params(), s.model.params()), 1e-12);
}

TEST(Reductions, FinetuneWithoutKlOrReweightIsPgdAt) {
  const Dataset d = blobs(40, 2, RngStream(9, 1));
  const MlpModel init = MlpModel::glorot({2, 8, 2}, RngStream(9, 2));
  TrainConfig ft = small_config(Method::Finetune);
  ft.finetune.kl = false;
  ft.finetune.reweight = false;
  const AdversarialBudget b(Norm::L2, 0.3);
  const auto a = run_training(init, d, b, small_config(Method::PgdAt), RngStream(9, 3));
  const auto f = run_training(init, d, b, ft, RngStream(9, 3));
  EXPECT_LT(max_abs_diff(a.model.params(), f.model.params()), 1e-12);
}

TEST(Invariants, TargetsWeightsAndRadiiStayValid) {
  const Dataset d = blobs(48, 3, RngStream(10, 1));
  const MlpModel init = MlpModel::glorot({2, 8, 3}, RngStream(10, 2));
  const AdversarialBudget b(Norm::Linf, 0.3);
  for (Method m : {Method::Sat, Method::FastAt, Method::Finetune, Method::Iat}) {
    TrainConfig c = small_config(m, 4);
    c.warmup_epochs = 1;
    int batches = 0;
    TrainHooks<MlpModel> hooks;
    hooks.on_batch = [&](const BatchView<MlpModel>& v) {
      ++batches;
      double ws = 0.0;
      for (double w : v.weights) {
        EXPECT_GE(w, 0.0);
        ws += w;
      }
      EXPECT_NEAR(ws, 1.0, 1e-12);
      for (const InstanceStep& s : v.steps) {
        double ts = 0.0;
        for (double t : s.target) {
          EXPECT_GE(t, 0.0);
          ts += t;
        }
        EXPECT_NEAR(ts, 1.0, 1e-12) << to_string(m);
      }
    };
    const auto res = run_training(init, d, b, c, RngStream(10, 3), {}, hooks);
    EXPECT_EQ(batches, 4 * 6);
    if (res.iat)
      for (double e : res.iat->eps) {
        EXPECT_GE(e, 0.0);
        // every radius is epsilon plus a whole number of delta steps, or 0
        const double k = (e - b.epsilon) / res.iat->eps_delta;
        EXPECT_TRUE(e == 0.0 || std::abs(k - std::round(k)) < 1e-9);
      }
  }
}

TEST(Invariants, IatRadiiMoveByAtMostOneStepPerEpoch) {
  const Dataset d = blobs(30, 2, RngStream(11, 1));
  TrainConfig c = small_config(Method::Iat, 4);
  c.iat.eps_delta = 0.05;
  const AdversarialBudget b(Norm::L2, 0.2);
  IatState st = make_iat_state(d.size(), b, c);
  MlpModel m = MlpModel::glorot({2, 8, 2}, RngStream(11, 2));
  SgdMomentum sgd;
  for (std::size_t e = 0; e < 4; ++e) {
    const Vector before = st.eps;
    iat_epoch(m, sgd, d, st, b, c, e, RngStream(11, 3));
    for (std::size_t i = 0; i < d.size(); ++i) {
      EXPECT_LE(std::abs(st.eps[i] - before[i]), 0.05 + 1e-15);
      EXPECT_GE(st.eps[i], 0.0);
    }
  }
}

TEST(Determinism, ThreadCountDoesNotChangeResults) {
  const Dataset d = blobs(50, 2, RngStream(12, 1));
  const Dataset t = blobs(20, 2, RngStream(12, 4));
  const MlpModel init = MlpModel::glorot({2, 8, 2}, RngStream(12, 2));
  const AdversarialBudget b(Norm::Linf, 0.2);
  for (Method m : {Method::PgdAt, Method::Iat, Method::Sat, Method::FastAt}) {
    TrainConfig c1 = small_config(m), c4 = small_config(m);
    c4.threads = 4;
    TrainOptions opt;
    opt.test = &t;
    const auto a = run_training(init, d, b, c1, RngStream(12, 3), opt);
    const auto z = run_training(init, d, b, c4, RngStream(12, 3), opt);
    EXPECT_EQ(a.model, z.model) << to_string(m);
    EXPECT_EQ(a.history, z.history);
    for (std::size_t e = 0; e < a.records.size(); ++e)
      EXPECT_EQ(a.records[e].test_robust_err, z.records[e].test_robust_err);
  }
}

TEST(Driver, RecordsAndCsv) {
  const Dataset d = blobs(30, 2, RngStream(13, 1));
  const MlpModel init = MlpModel::glorot({2, 8, 2}, RngStream(13, 2));
  GroupPartition part;
  for (std::size_t i = 0; i < 30; ++i) part.group_of.push_back(static_cast<int>(i % 10));
  TrainOptions opt;
  opt.partition = part;
  const auto res = run_training(init, d, AdversarialBudget(Norm::L2, 0.1), small_config(Method::Iat), RngStream(1, 1), opt);
  ASSERT_EQ(res.records.size(), 3u);
  EXPECT_EQ(res.history.epochs(), 3u);
  const std::string csv = epoch_records_csv(res.records, Method::Iat, OutputHeader{"h", 1, "train"});
  EXPECT_NE(csv.find(",g9_eps\n"), std::string::npos);
  EXPECT_EQ(csv.find("_weight"), std::string::npos);
  EXPECT_THROW(train(init, d, AdversarialBudget(Norm::L2, 0.1), small_config(Method::Sat), RngStream(1, 1)),
               ValidationError);
}

TEST(Schedule, EightEpochExample) {
  const LrSchedule s = LrSchedule::step_decay(0.2, 8);
  const double expect[] = {0.2, 0.2, 0.2, 0.2, 0.02, 0.02, 0.002, 0.002};
  for (std::size_t e = 0; e < 8; ++e) EXPECT_DOUBLE_EQ(s.rate(e), expect[e]);
}

TEST(Vanilla, SeparableDataReachesZeroCleanError) {
  Dataset d;
  d.num_classes = 2;
  d.x = Matrix(60, 2);
  RngStream r(20, 1);
  for (std::size_t i = 0; i < 60; ++i) {
    d.y.push_back(static_cast<int>(i % 2));
    d.x(i, 0) = (i % 2 ? 1.0 : -1.0) * (0.5 + r.uniform());
    d.x(i, 1) = r.normal();
  }
  TrainConfig c = small_config(Method::Vanilla, 30);
  const auto res = train(MlpModel::glorot({2, 8, 2}, RngStream(20, 2)), d, AdversarialBudget(Norm::L2, 0.0), c,
                         RngStream(20, 3));
  EXPECT_EQ(res.records.back().train_clean_err, 0.0);
}

TEST(Iat, RadiusRules) {
  // logits (0, 10 x0): class 1 iff x0 > 0
  MlpModel m({2, 2});
  m.weight(0)(1, 0) = 10.0;
  Dataset d;
  d.num_classes = 2;
  d.x = Matrix(3, 2);
  d.x(0, 0) = 1.0;   // robust well past eps + delta
  d.x(1, 0) = 1.0;   // wrong label: not robust even cleanly
  d.x(2, 0) = 0.22;  // robust at 0.2, not at 0.25
  d.y = {1, 0, 1};
  TrainConfig c = small_config(Method::Iat, 1);
  c.batch_size = 3;
  c.iat.eps_delta = 0.05;
  c.attack = AttackConfig{20, 0.0, false, 1};
  const AdversarialBudget b(Norm::L2, 0.2);
  IatState st = make_iat_state(3, b, c);
  SgdMomentum sgd;
  iat_epoch(m, sgd, d, st, b, c, 0, RngStream(21, 1));
  EXPECT_NEAR(st.eps[0], 0.25, 1e-15);
  EXPECT_NEAR(st.eps[1], 0.15, 1e-15);
  EXPECT_NEAR(st.eps[2], 0.2, 1e-15);
  st.eps[1] = 0.01;
  MlpModel m2({2, 2});
  m2.weight(0)(1, 0) = 10.0;
  iat_epoch(m2, sgd, d, st, b, c, 1, RngStream(21, 1));
  EXPECT_EQ(st.eps[1], 0.0);
}

TEST(Sat, TargetMovesTowardCleanOutput) {
  MlpModel m({2, 2});  // all-zero weights: clean output [0.5, 0.5]
  Dataset d;
  d.num_classes = 2;
  d.x = Matrix(1, 2);
  d.y = {0};
  TrainConfig c = small_config(Method::Sat, 1);
  SatState st = make_sat_state(d, c);
  SgdMomentum sgd;
  sat_epoch(m, sgd, d, st, AdversarialBudget(Norm::L2, 0.1), c, 0, RngStream(22, 1));
  EXPECT_NEAR(st.t[0][0], 0.95, 1e-15);
  EXPECT_NEAR(st.t[0][1], 0.05, 1e-15);
}

TEST(FastAt, MovingAverageTarget) {
  MlpModel m({2, 2});  // constant adversarial output [0.2, 0.8]
  m.bias(0)[0] = std::log(0.2);
  m.bias(0)[1] = std::log(0.8);
  Dataset d;
  d.num_classes = 2;
  d.x = Matrix(1, 2);
  d.y = {0};
  TrainConfig c = small_config(Method::FastAt, 1);
  c.lr = LrSchedule{{{0, 1e-300}}};
  c.momentum = 0.0;
  c.weight_decay = 0.0;
  const AdversarialBudget b(Norm::Linf, 0.1);
  FastAtState st = make_fast_at_state(d, b, c);
  st.t_tilde[0] = {0.6, 0.4};
  SgdMomentum sgd(0.0, 0.0);
  TrainHooks<MlpModel> hooks;
  double weight = 0.0;
  hooks.on_batch = [&](const BatchView<MlpModel>& v) { weight = v.steps[0].raw_weight; };
  fast_at_epoch(m, sgd, d, st, b, c, 0, RngStream(23, 1), hooks);
  EXPECT_NEAR(st.t_tilde[0][0], 0.56, 1e-15);
  EXPECT_NEAR(st.t_tilde[0][1], 0.44, 1e-15);
  EXPECT_NEAR(weight, 0.2, 1e-15);
}
