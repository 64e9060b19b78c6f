// advlab: command-line front end for the experiment harness.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "advlab/lab.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t threads = 1;
  bool force = false;
  bool inject_bug = false;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "experiment config file")->required()->check(CLI::ExistingFile);
  sub->add_option("--seed", f.seed, "override the config seed");
  sub->add_option("--out", f.out, "output directory")->required();
  sub->add_option("--threads", f.threads, "worker threads")->check(CLI::Range(1, 1024));
  sub->add_flag("--force", f.force, "allow a non-empty output directory");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"advlab: instance difficulty and adversarial overfitting lab"};
  app.require_subcommand(1);
  Flags flags;
  const char* names[] = {"gen", "profile", "study", "train", "theory", "lipschitz", "finetune"};
  const char* help[] = {"generate a synthetic dataset",
                        "train on the full set and write the difficulty profile",
                        "train on a difficulty-selected subset",
                        "train with any method on the full set",
                        "run the theory verification battery",
                        "Lipschitz bounds of easiest / random / hardest subset models",
                        "fine-tune a pretrained model with reweighting and KL"};
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < std::size(names); ++i) {
    CLI::App* s = app.add_subcommand(names[i], help[i]);
    add_common(s, flags);
    subs.push_back(s);
  }
  subs[4]->add_flag("--inject-bug", flags.inject_bug, "scale C2 by 1.1; the Monte Carlo check must then fail");

  CLI11_PARSE(app, argc, argv);

  try {
    advlab::ExperimentConfig cfg = advlab::parse_experiment_config(advlab::ConfigFile::load(flags.config));
    if (flags.seed) cfg.seed = *flags.seed;
    if (flags.inject_bug) cfg.inject_bug = true;
    const advlab::RunContext ctx{flags.out, flags.threads, flags.force};
    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "gen") return advlab::cmd_gen(cfg, ctx);
    if (cmd == "profile") return advlab::cmd_profile(cfg, ctx);
    if (cmd == "study") return advlab::cmd_study(cfg, ctx);
    if (cmd == "train") return advlab::cmd_train(cfg, ctx);
    if (cmd == "theory") return advlab::cmd_theory(cfg, ctx, std::cout);
    if (cmd == "lipschitz") return advlab::cmd_lipschitz(cfg, ctx);
    if (cmd == "finetune") return advlab::cmd_finetune(cfg, ctx);
  } catch (const advlab::Error& e) {
    std::cerr << "advlab: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
