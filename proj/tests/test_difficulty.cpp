#include <gtest/gtest.h>

#include <cmath>

#include "advlab/difficulty.hpp"

using namespace advlab;

namespace {

// Direct O(n^2) definition: (#{j: s_j > s_i} + #{j: s_j == s_i} / 2) / n.
Vector pairwise_difficulty(std::span<const double> s) {
  Vector d(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    double c = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j) c += s[j] > s[i] ? 1.0 : (s[j] == s[i] ? 0.5 : 0.0);
    d[i] = c / static_cast<double>(s.size());
  }
  return d;
}

// Scores with many ties when `levels` is small.
Vector random_scores(std::size_t n, RngStream& r, int levels = 0) {
  Vector s(n);
  for (double& v : s) v = levels > 0 ? static_cast<double>(r.below(levels)) : r.normal();
  return s;
}

Dataset blob_data(std::size_t n, RngStream r) {
  Dataset d;
  d.num_classes = 2;
  d.x = Matrix(n, 2);
  for (std::size_t i = 0; i < n; ++i) {
    d.y.push_back(static_cast<int>(i % 2));
    d.x(i, 0) = (i % 2 ? 1.0 : -1.0) + 0.5 * r.normal();
    d.x(i, 1) = r.normal();
  }
  return d;
}

}  // namespace

TEST(Difficulty, MatchesPairwiseDefinition) {
  for (int trial = 0; trial < 200; ++trial) {
    RngStream r(trial, 1);
    const Vector s = random_scores(1 + r.below(60), r, trial % 2 ? 4 : 0);
    const DifficultyProfile p = difficulty_from_scores(s);
    const Vector oracle = pairwise_difficulty(s);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_DOUBLE_EQ(p.d[i], oracle[i]);
  }
}

TEST(Difficulty, HardestNearZeroEasiestNearOne) {
  const DifficultyProfile p = difficulty_from_scores(Vector{0.1, 5.0, 2.0, 0.5});
  EXPECT_DOUBLE_EQ(p.d[1], 1.0 / 8.0);
  EXPECT_DOUBLE_EQ(p.d[0], 7.0 / 8.0);
  const DifficultyProfile single = difficulty_from_scores(Vector{3.0});
  EXPECT_DOUBLE_EQ(single.d[0], 0.5);
  const DifficultyProfile flat = difficulty_from_scores(Vector(7, 1.0));
  for (double d : flat.d) EXPECT_DOUBLE_EQ(d, 0.5);
}

TEST(Difficulty, MeanIsExactlyHalfWithAndWithoutTies) {
  for (int trial = 0; trial < 1000; ++trial) {
    RngStream r(trial, 2);
    const Vector s = random_scores(1 + r.below(300), r, trial % 2 ? 1 + static_cast<int>(r.below(6)) : 0);
    const DifficultyProfile p = difficulty_from_scores(s);
    ASSERT_TRUE(has_exact_half_mean(p)) << "trial " << trial;
  }
}

TEST(Difficulty, MonotoneInScore) {
  RngStream r(3, 3);
  const Vector s = random_scores(500, r, 20);
  const DifficultyProfile p = difficulty_from_scores(s);
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); j += 7) {
      if (s[i] > s[j]) EXPECT_LT(p.d[i], p.d[j]);
      if (s[i] == s[j]) EXPECT_EQ(p.d[i], p.d[j]);
    }
}

TEST(Difficulty, InvariantUnderStrictlyIncreasingTransform) {
  for (int trial = 0; trial < 50; ++trial) {
    RngStream r(trial, 4);
    const Vector s = random_scores(200, r, trial % 2 ? 10 : 0);
    Vector t(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) t[i] = std::exp(0.3 * s[i]) + std::pow(s[i], 3) + 2.0;
    EXPECT_EQ(difficulty_from_scores(s).numerators, difficulty_from_scores(t).numerators);
  }
}

TEST(Difficulty, RejectsEmptyAndNan) {
  EXPECT_THROW(difficulty_from_scores(Vector{}), ValidationError);
  EXPECT_THROW(difficulty_from_scores(Vector{1.0, NAN}), ValidationError);
}

TEST(Difficulty, DDistanceBasics) {
  const Vector a{0.1, 0.9}, b{0.9, 0.1};
  EXPECT_DOUBLE_EQ(d_distance(a, a), 0.0);
  EXPECT_DOUBLE_EQ(d_distance(a, b), 0.8);
  EXPECT_THROW(d_distance(a, Vector{0.5}), ValidationError);
}

TEST(Difficulty, DDistanceOfIndependentPermutationsMatchesAnalyticMean) {
  // Two random rankings of n distinct values: E|U - V| = (n^2 - 1) / (3 n^2).
  const std::size_t n = 50;
  double total = 0.0;
  const int pairs = 4000;
  for (int t = 0; t < pairs; ++t) {
    RngStream r(t, 5);
    total += d_distance(difficulty_from_scores(random_scores(n, r)), difficulty_from_scores(random_scores(n, r)));
  }
  const double analytic = (static_cast<double>(n * n) - 1.0) / (3.0 * n * n);
  EXPECT_NEAR(total / pairs, analytic, 0.004);
}

TEST(Groups, DecileEdges) {
  EXPECT_EQ(group_for_difficulty(0.0), 0);
  EXPECT_EQ(group_for_difficulty(0.0999), 0);
  EXPECT_EQ(group_for_difficulty(0.1), 1);
  EXPECT_EQ(group_for_difficulty(1.0), 9);
  EXPECT_THROW(group_for_difficulty(1.01), DomainError);
  EXPECT_THROW(group_for_difficulty(-0.01), DomainError);
}

TEST(Groups, PartitionAgreesWithDoubleRuleAndIsBalanced) {
  RngStream r(6, 6);
  const DifficultyProfile p = difficulty_from_scores(random_scores(1000, r));
  const GroupPartition part = partition_groups(p);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(part.group_of[i], group_for_difficulty(p.d[i]));
  for (std::size_t c : part.counts()) EXPECT_EQ(c, 100u);
  std::size_t total = 0;
  for (int g = 0; g < 10; ++g) total += part.members(g).size();
  EXPECT_EQ(total, 1000u);
}

TEST(Selection, ClassBalancedEasiestAndHardest) {
  // class = i % 2, loss = i: low index = easy
  Vector s(20);
  std::vector<int> labels(20);
  for (std::size_t i = 0; i < 20; ++i) {
    s[i] = static_cast<double>(i);
    labels[i] = static_cast<int>(i % 2);
  }
  const DifficultyProfile p = difficulty_from_scores(s);
  EXPECT_EQ(select_subset(p, labels, 2, Selection::Easiest, 4), (std::vector<std::size_t>{0, 1, 2, 3}));
  EXPECT_EQ(select_subset(p, labels, 2, Selection::Hardest, 4), (std::vector<std::size_t>{16, 17, 18, 19}));
  const auto rnd = select_subset(p, labels, 2, Selection::Random, 6, RngStream(1, 1));
  EXPECT_EQ(rnd, select_subset(p, labels, 2, Selection::Random, 6, RngStream(1, 1)));
  int odd = 0;
  for (std::size_t i : rnd) odd += static_cast<int>(i % 2);
  EXPECT_EQ(odd, 3);
}

TEST(Selection, AllInstancesIsIdentity) {
  RngStream r(7, 7);
  const DifficultyProfile p = difficulty_from_scores(random_scores(30, r));
  std::vector<int> labels(30);
  for (std::size_t i = 0; i < 30; ++i) labels[i] = static_cast<int>(i % 3);
  const auto all = select_subset(p, labels, 3, Selection::Easiest, 30);
  for (std::size_t i = 0; i < 30; ++i) EXPECT_EQ(all[i], i);
}

TEST(Selection, Errors) {
  const DifficultyProfile p = difficulty_from_scores(Vector{1, 2, 3, 4});
  const std::vector<int> labels{0, 0, 0, 1};
  EXPECT_THROW(select_subset(p, labels, 2, Selection::Easiest, 3), ValidationError);
  EXPECT_THROW(select_subset(p, labels, 2, Selection::Easiest, 4), ValidationError);
  EXPECT_THROW(parse_selection("medium"), ValidationError);
}

TEST(History, AveragesAndRoundTrip) {
  LossHistory h(3);
  h.record_epoch(Vector{1.0, 2.0, 3.0});
  h.record_epoch(Vector{3.0, 2.0, 0.0});
  EXPECT_EQ(h.average_losses(), (Vector{2.0, 2.0, 1.5}));
  EXPECT_EQ(LossHistory::decode(h.encode()), h);
  EXPECT_THROW(h.record_epoch(Vector{1.0}), ShapeError);
  EXPECT_THROW(h.record_epoch(Vector{1.0, -1.0, 0.0}), ValidationError);
  EXPECT_THROW(LossHistory::decode("ADVLABH0"), IoError);
  std::string truncated = h.encode();
  truncated.pop_back();
  EXPECT_THROW(LossHistory::decode(truncated), IoError);
}

TEST(History, ZeroOneDifficulty) {
  CorrectnessHistory c(3);
  c.record_epoch({true, false, false});
  c.record_epoch({true, true, false});
  const DifficultyProfile p = zero_one_difficulty(c);
  EXPECT_GT(p.d[0], p.d[1]);
  EXPECT_GT(p.d[1], p.d[2]);
}

TEST(ProfileCsv, RoundTripAndSchema) {
  RngStream r(8, 8);
  DifficultyProfile p = difficulty_from_scores(random_scores(25, r, 5), PerturbationKind::Pgd);
  const std::string text = profile_csv(p, OutputHeader{"abc", 3, "profile"});
  EXPECT_NE(text.find("instance_id,avg_loss,difficulty,group,perturbation_kind\n"), std::string::npos);
  EXPECT_EQ(text.rfind("# config_hash=abc", 0), std::string::npos);
  const DifficultyProfile q = parse_profile_csv(text);
  EXPECT_EQ(q.numerators, p.numerators);
  EXPECT_EQ(q.kind, PerturbationKind::Pgd);
}

TEST(ProfileCsv, RejectsInconsistentDifficulty) {
  const std::string bad =
      "instance_id,avg_loss,difficulty,group,perturbation_kind\n0,1.0,0.25,2,pgd\n1,2.0,0.25,2,pgd\n";
  EXPECT_THROW(parse_profile_csv(bad), ValidationError);
}

TEST(GroupStats, SingleGroupEqualsWholeSet) {
  const Dataset d = blob_data(40, RngStream(9, 9));
  const MlpModel m = MlpModel::glorot({2, 6, 2}, RngStream(9, 10));
  const AdversarialBudget b(Norm::L2, 0.2);
  const AttackConfig a = AttackConfig::defaults_for(b);
  GroupPartition one;
  one.group_of.assign(40, 4);
  const GroupStats gs = group_stats(m, d, one, b, a, RngStream(1, 1));
  double loss = 0.0;
  for (std::size_t i = 0; i < 40; ++i) {
    const LossTarget t = label_target(2, d.y[i], 2);
    loss += loss_value(m, pgd(m, d.row(i), t, b, a, RngStream(1, 1).derive(i)), t);
  }
  EXPECT_EQ(gs.count[4], 40u);
  EXPECT_NEAR(*gs.mean_loss[4], loss / 40.0, 1e-12);
  EXPECT_NEAR(*gs.cosine[4][4], 1.0, 1e-12);
  for (std::size_t g = 0; g < 10; ++g)
    if (g != 4) {
      EXPECT_FALSE(gs.mean_loss[g].has_value());
      EXPECT_FALSE(gs.cosine[4][g].has_value());
    }
}

TEST(GroupStats, IndependentOfThreadsAndBlockSize) {
  const Dataset d = blob_data(90, RngStream(10, 10));
  const MlpModel m = MlpModel::glorot({2, 5, 2}, RngStream(10, 11));
  const AdversarialBudget b(Norm::Linf, 0.1);
  GroupPartition part;
  for (std::size_t i = 0; i < 90; ++i) part.group_of.push_back(static_cast<int>(i % 10));
  const GroupStats a = group_stats(m, d, part, b, AttackConfig::defaults_for(b), RngStream(2, 2), {true, 1, 256});
  const GroupStats c = group_stats(m, d, part, b, AttackConfig::defaults_for(b), RngStream(2, 2), {true, 4, 7});
  for (std::size_t g = 0; g < 10; ++g) {
    EXPECT_EQ(a.mean_loss[g], c.mean_loss[g]);
    EXPECT_EQ(a.mean_feature_norm[g], c.mean_feature_norm[g]);
    for (std::size_t h = 0; h < 10; ++h) EXPECT_EQ(a.cosine[g][h], c.cosine[g][h]);
  }
}
