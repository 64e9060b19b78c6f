#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>

#include "advlab/lab.hpp"

using namespace advlab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "advlab_test_lab" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ADVLAB_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string write_config(const fs::path& dir, const std::string& text) {
  const std::string path = (dir / "run.cfg").string();
  write_file(path, text);
  return path;
}

const char* kTinyRings =
    "seed = 3\n"
    "[data]\nkind = rings\nn_train = 60\nn_test = 30\nlabel_noise = 0.1\n"
    "[model]\nhidden = 8\n"
    "[budget]\nnorm = l2\nepsilon = 0.2\n"
    "[train]\nmethod = pgd_at\nepochs = 2\nbatch_size = 16\nattack_steps = 2\n";

const char* kTinyTheory =
    "seed = 1\n"
    "[theory]\nt2_instances = 3\nt2_m = 60\nt2_n = 8\nmc_samples = 200000\nt1_sets = 2\nt1_iters = 20000\n"
    "corollary_trials = 5\ncorollary_m = 80\ncorollary_n = 8\nmc_tol = 0.005\n";

}  // namespace

TEST(Config, SectionsCommentsAndTypes) {
  const ConfigFile f = ConfigFile::parse(
      "seed = 4  # trailing\n; full comment\n[data]\nkind = moons\nn_train = 1e3\n[model]\nhidden = 16, 8\n");
  EXPECT_EQ(f.get("data.kind", ""), "moons");
  EXPECT_EQ(f.get_size("data.n_train", 0), 1000u);
  EXPECT_EQ(f.get_size_list("model.hidden", {}), (std::vector<std::size_t>{16, 8}));
  EXPECT_EQ(f.get_double("missing", 2.5), 2.5);
}

TEST(Config, Errors) {
  EXPECT_THROW(ConfigFile::parse("[data\nkind = rings\n"), ValidationError);
  EXPECT_THROW(ConfigFile::parse("justakey\n"), ValidationError);
  EXPECT_THROW(ConfigFile::parse("a = 1\na = 2\n"), ValidationError);
  EXPECT_THROW(ConfigFile::parse("n = 1.5\n").get_size("n", 0), ValidationError);
  EXPECT_THROW(ConfigFile::parse("b = maybe\n").get_bool("b", false), ValidationError);
  EXPECT_THROW(parse_experiment_config(ConfigFile::parse("[train]\nepochz = 3\n")), ValidationError);
  EXPECT_THROW(parse_experiment_config(ConfigFile::parse("[budget]\nnorm = l3\n")), ValidationError);
  EXPECT_THROW(parse_experiment_config(ConfigFile::parse("[train]\nmethod = trades\n")), ValidationError);
  EXPECT_THROW(parse_experiment_config(ConfigFile::parse("[data]\nlabel_noise = 1.5\n")), ValidationError);
  EXPECT_THROW(parse_experiment_config(ConfigFile::parse("seed = -1\n")), ValidationError);
}

TEST(Config, HashIgnoresOrderAndLayout) {
  const ConfigFile a = ConfigFile::parse("[x]\na = 1\nb = 2\n");
  const ConfigFile b = ConfigFile::parse("# comment\n[x]\nb=2\n\na   =   1\n");
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), ConfigFile::parse("[x]\na = 1\nb = 3\n").hash());
}

TEST(Config, ExperimentDefaultsAndOverrides) {
  const ExperimentConfig c = parse_experiment_config(ConfigFile::parse(kTinyRings));
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.data.kind, DatasetKind::Rings);
  EXPECT_EQ(c.hidden, (std::vector<std::size_t>{8}));
  EXPECT_EQ(c.budget.norm, Norm::L2);
  EXPECT_EQ(c.train.method, Method::PgdAt);
  EXPECT_EQ(c.train.attack.steps, 2u);
  EXPECT_DOUBLE_EQ(c.train.lr.rate(1), 0.001);
  EXPECT_EQ(c.theory.t2_instances, 50u);
  // no [subset] section: subset training is the [train] setup
  EXPECT_EQ(c.subset_train.epochs, c.train.epochs);
  EXPECT_EQ(c.subset_train.weight_decay, c.train.weight_decay);
}

TEST(Config, SubsetSectionOverridesOnlySubsetTraining) {
  const ExperimentConfig c = parse_experiment_config(ConfigFile::parse(
      std::string(kTinyRings) + "lr = 0.2\n[subset]\nepochs = 8\nbatch_size = 4\nweight_decay = 0\n"));
  EXPECT_EQ(c.train.epochs, 2u);
  EXPECT_EQ(c.subset_train.epochs, 8u);
  EXPECT_EQ(c.subset_train.batch_size, 4u);
  EXPECT_EQ(c.subset_train.weight_decay, 0.0);
  EXPECT_EQ(c.train.weight_decay, 5e-4);
  EXPECT_EQ(c.subset_train.attack.steps, 2u);
  // the schedule is rebuilt for the subset epoch count
  EXPECT_DOUBLE_EQ(c.subset_train.lr.rate(3), 0.2);
  EXPECT_DOUBLE_EQ(c.subset_train.lr.rate(4), 0.02);
  EXPECT_DOUBLE_EQ(c.subset_train.lr.rate(7), 0.002);
  EXPECT_THROW(parse_experiment_config(ConfigFile::parse(std::string(kTinyRings) + "[subset]\nepochs = 0\n")),
               ValidationError);
}

TEST(Data, DeterministicAndNoiseRate) {
  DataParams p;
  p.n_train = 4000;
  p.label_noise = 0.15;
  const DatasetBundle a = generate_dataset(p, RngStream(1, 0));
  const DatasetBundle b = generate_dataset(p, RngStream(1, 0));
  EXPECT_EQ(a.train.x.values(), b.train.x.values());
  EXPECT_EQ(a.train.y, b.train.y);
  double flipped = 0.0;
  for (int f : a.train_flipped) flipped += f;
  const double rate = flipped / 4000.0;
  EXPECT_NEAR(rate, 0.15, 4.0 * std::sqrt(0.15 * 0.85 / 4000.0));
  for (std::size_t i = 0; i < a.test.size(); ++i) EXPECT_EQ(a.test.y[i], static_cast<int>(i % 2));
}

TEST(Data, CsvRoundTripIsExact) {
  for (DatasetKind k : {DatasetKind::Rings, DatasetKind::Moons, DatasetKind::Gmm}) {
    DataParams p;
    p.kind = k;
    p.n_train = 50;
    p.n_test = 10;
    if (k == DatasetKind::Gmm) {
      p.dim = 5;
      p.radii = {1.0, 2.0};
      p.probs = {0.5, 0.5};
    }
    const DatasetBundle b = generate_dataset(p, RngStream(2, 0));
    const Dataset back = parse_dataset_csv(dataset_csv(b.train, OutputHeader{"h", 2, "dataset"}, &b.train_flipped), "mem");
    EXPECT_EQ(back.x.values(), b.train.x.values()) << to_string(k);
    EXPECT_EQ(back.y, b.train.y);
    EXPECT_EQ(back.num_classes, b.train.num_classes);
  }
  EXPECT_THROW(parse_dataset_csv("x0,label\n0.5\n", "mem"), IoError);
  EXPECT_EQ(parse_dataset_kind("moons-like"), DatasetKind::Moons);
}

TEST(Cli, GenRespectsForce) {
  const fs::path dir = scratch("gen");
  const std::string cfg = write_config(dir, kTinyRings);
  const std::string out = (dir / "out").string();
  ASSERT_EQ(run_cli("gen --config " + cfg + " --out " + out), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "train.csv"));
  EXPECT_TRUE(fs::exists(dir / "out" / "test.csv"));
  const std::string first = read_file(out + "/train.csv");
  EXPECT_EQ(run_cli("gen --config " + cfg + " --out " + out), 2);
  EXPECT_EQ(run_cli("gen --config " + cfg + " --out " + out + " --force"), 0);
  EXPECT_EQ(read_file(out + "/train.csv"), first);
  EXPECT_NE(run_cli("gen --config " + (dir / "nope.cfg").string() + " --out " + out), 0);
  EXPECT_NE(run_cli("gen --config " + cfg + " --out " + out + " --force --threads 0"), 0);
}

TEST(Cli, SeedOverrideChangesData) {
  const fs::path dir = scratch("seed");
  const std::string cfg = write_config(dir, kTinyRings);
  ASSERT_EQ(run_cli("gen --config " + cfg + " --out " + (dir / "a").string()), 0);
  ASSERT_EQ(run_cli("gen --config " + cfg + " --seed 9 --out " + (dir / "b").string()), 0);
  EXPECT_NE(read_file((dir / "a" / "train.csv").string()), read_file((dir / "b" / "train.csv").string()));
}

TEST(Cli, ProfileStudyAndTrainProduceOutputs) {
  const fs::path dir = scratch("pipeline");
  const std::string cfg = write_config(dir, kTinyRings);
  ASSERT_EQ(run_cli("profile --config " + cfg + " --out " + (dir / "profile").string()), 0);
  const DifficultyProfile p = parse_profile_csv(read_file((dir / "profile" / "profile.csv").string()));
  EXPECT_EQ(p.size(), 60u);
  EXPECT_TRUE(has_exact_half_mean(p));

  const std::string study = std::string(kTinyRings) + "[study]\nprofile = " + (dir / "profile" / "profile.csv").string() +
                            "\nselection = hardest\nk = 20\n";
  write_file((dir / "study.cfg").string(), study);
  ASSERT_EQ(run_cli("study --config " + (dir / "study.cfg").string() + " --out " + (dir / "study").string()), 0);
  const std::string subset = read_file((dir / "study" / "subset.csv").string());
  EXPECT_NE(subset.find("# advlab subset hardest"), std::string::npos);
  EXPECT_NE(read_file((dir / "study" / "curves.csv").string()).find("g0_loss"), std::string::npos);

  std::string iat = kTinyRings;
  iat.replace(iat.find("pgd_at"), 6, "iat");
  write_file((dir / "iat.cfg").string(), iat);
  ASSERT_EQ(run_cli("train --config " + (dir / "iat.cfg").string() + " --out " + (dir / "iat").string()), 0);
  const MlpModel m = decode_mlp_checkpoint(read_file((dir / "iat" / "model.ckpt").string()));
  EXPECT_EQ(m.dims(), (std::vector<std::size_t>{2, 8, 2}));
}

TEST(Cli, StudyWithoutProfileFails) {
  const fs::path dir = scratch("noprofile");
  const std::string cfg = write_config(dir, kTinyRings);
  EXPECT_EQ(run_cli("study --config " + cfg + " --out " + (dir / "o").string()), 2);
}

TEST(Cli, TheoryPassesAndInjectedBugFails) {
  const fs::path dir = scratch("theory");
  const std::string cfg = write_config(dir, kTinyTheory);
  ASSERT_EQ(run_cli("theory --config " + cfg + " --out " + (dir / "ok").string()), 0);
  const Json j = Json::parse(read_file((dir / "ok" / "theory.json").string()));
  EXPECT_TRUE(j["pass"].get<bool>());
  EXPECT_EQ(j["seed"].get<int>(), 1);
  EXPECT_EQ(run_cli("theory --config " + cfg + " --out " + (dir / "bug").string() + " --inject-bug"), 1);
  const Json bad = Json::parse(read_file((dir / "bug" / "theory.json").string()));
  EXPECT_FALSE(bad["pass"].get<bool>());
  bool mc_failed = false;
  for (const auto& name : bad["failed"]) mc_failed |= name.get<std::string>() == "theorem2_monte_carlo";
  EXPECT_TRUE(mc_failed);
}

TEST(Cli, LipschitzAndFinetune) {
  const fs::path dir = scratch("lip");
  const std::string cfg = write_config(dir, std::string(kTinyRings) + "[lipschitz]\nk = 20\nbandwidth_samples = 50\n"
                                                                      "[finetune]\nepochs = 1\n");
  ASSERT_EQ(run_cli("lipschitz --config " + cfg + " --out " + (dir / "lip").string()), 0);
  const std::string curve = read_file((dir / "lip" / "lipschitz_curve.csv").string());
  EXPECT_NE(curve.find("epoch,easiest,random,hardest\n0,"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "lip" / "profile.csv"));
  ASSERT_EQ(run_cli("finetune --config " + cfg + " --out " + (dir / "ft").string()), 0);
  EXPECT_NE(read_file((dir / "ft" / "curves.csv").string()).find("g0_weight"), std::string::npos);
}

TEST(Cli, ThreadCountDoesNotChangeBytes) {
  const fs::path dir = scratch("threads");
  const std::string cfg = write_config(dir, kTinyRings);
  ASSERT_EQ(run_cli("profile --config " + cfg + " --out " + (dir / "t1").string() + " --threads 1"), 0);
  ASSERT_EQ(run_cli("profile --config " + cfg + " --out " + (dir / "t4").string() + " --threads 4"), 0);
  for (const char* f : {"profile.csv", "curves.csv", "history.bin", "model.ckpt"})
    EXPECT_EQ(read_file((dir / "t1" / f).string()), read_file((dir / "t4" / f).string())) << f;
}
