#include <CLI11.hpp>

#include "mflab/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"mean-field control laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  int replications = 0;
  int threads = 0;

  const std::vector<std::string> names = {
      "verify-derivatives", "solve", "minimize", "value", "dpp",
      "bellman", "master", "lq-compare", "constants"};
  for (const auto& name : names) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "experiment config file")->required();
    sub->add_option("--out", out_dir, "output directory override");
    sub->add_option("--replications", replications, "seed replication count");
    sub->add_option("--threads", threads, "worker count");
  }

  CLI11_PARSE(app, argc, argv);
  const std::string chosen = app.get_subcommands().front()->get_name();
  return mflab::run_subcommand(
      chosen, config_path,
      out_dir.empty() ? std::nullopt : std::optional<std::string>(out_dir),
      replications > 0 ? std::optional<int>(replications) : std::nullopt,
      threads > 0 ? std::optional<int>(threads) : std::nullopt);
}
