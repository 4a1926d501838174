// dualfed: run experiments, compare summaries, dump representations.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dualfed/config.h"
#include "dualfed/errors.h"
#include "dualfed/experiment.h"

namespace {

constexpr int kConfigExit = 2;
constexpr int kRuntimeExit = 3;

struct RunFlags {
  std::string config;
  std::string method;
  std::string rounds;
  std::string seeds;
  std::string out;
  std::vector<std::string> sets;  // key=value overrides
};

dualfed::RunConfig load_config(const RunFlags& f) {
  dualfed::RunConfig cfg =
      f.config.empty() ? dualfed::RunConfig{} : dualfed::parse_config_file(f.config);
  for (const std::string& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw dualfed::ConfigError("--set", "expected key=value: " + kv);
    dualfed::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!f.method.empty()) dualfed::set_config_value(cfg, "method.name", f.method);
  if (!f.rounds.empty()) dualfed::set_config_value(cfg, "train.rounds", f.rounds);
  if (!f.seeds.empty()) dualfed::set_config_value(cfg, "run.seeds", f.seeds);
  if (!f.out.empty()) dualfed::set_config_value(cfg, "run.output_dir", f.out);
  dualfed::validate_config(cfg);
  return cfg;
}

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config, "config file (key = value lines)");
  cmd->add_option("--method", f.method, "override method.name");
  cmd->add_option("--rounds", f.rounds, "override train.rounds");
  cmd->add_option("--seeds", f.seeds, "override run.seeds, e.g. 0,1,2");
  cmd->add_option("--out", f.out, "override run.output_dir");
  cmd->add_option("--set", f.sets, "override any key, e.g. --set loss.tau=0.1");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Personalized federated learning simulator"};
  app.require_subcommand(1);

  RunFlags run_flags;
  CLI::App* run = app.add_subcommand("run", "train every configured seed and write artifacts");
  add_run_flags(run, run_flags);

  std::vector<std::string> summaries;
  std::string compare_csv;
  CLI::App* compare = app.add_subcommand("compare", "tabulate one or more summary.json files");
  compare->add_option("summaries", summaries, "summary files")->required();
  compare->add_option("--csv", compare_csv, "also write the table as CSV here");

  RunFlags dump_flags;
  std::size_t dump_round = 0;
  CLI::App* dump = app.add_subcommand("dump-reps", "write z and u of each client at a round");
  add_run_flags(dump, dump_flags);
  dump->add_option("--round", dump_round, "round to stop at")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  dualfed::RunConfig cfg;
  try {
    if (run->parsed()) cfg = load_config(run_flags);
    if (dump->parsed()) cfg = load_config(dump_flags);
  } catch (const dualfed::Error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigExit;
  }

  try {
    if (run->parsed()) {
      const dualfed::Summary s = dualfed::run_experiment(cfg);
      std::printf("%s: best mean ensemble %s over %zu seed(s); wrote %s\n", s.label.c_str(),
                  dualfed::format_mean_std(s.headline_mean, s.headline_std).c_str(),
                  s.seeds.size(), cfg.output_dir.string().c_str());
    } else if (compare->parsed()) {
      std::vector<std::filesystem::path> paths(summaries.begin(), summaries.end());
      const dualfed::ComparisonTable t = dualfed::compare_runs(paths);
      std::fputs(t.text.c_str(), stdout);
      if (!compare_csv.empty()) dualfed::write_file_atomic(compare_csv, t.csv);
    } else if (dump->parsed()) {
      for (const auto& p : dualfed::dump_reps_at(cfg, dump_round)) {
        std::printf("%s\n", p.string().c_str());
      }
    }
  } catch (const dualfed::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigExit;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeExit;
  }
  return 0;
}
