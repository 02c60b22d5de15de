#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "recx/experiment.hpp"

namespace {

enum ExitCode { ok = 0, config_error = 2, runtime_error = 3, backend_error = 4 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
  std::size_t workers = 0;

  recx::ExperimentConfig load() const {
    recx::ExperimentConfig c = recx::load_config(config_path, overrides);
    if (!output_dir.empty()) c.runtime.output_dir = output_dir;
    if (workers) c.runtime.workers = workers;
    return c;
  }
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON config file (defaults apply to missing fields)");
  cmd->add_option("--set", c.overrides, "Override a config field, e.g. --set generator.kind=random")->take_all();
  cmd->add_option("-o,--output", c.output_dir, "Output directory (runtime.output_dir)");
  cmd->add_option("-j,--workers", c.workers, "Generation worker threads (runtime.workers)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Black-box extraction of sequential recommenders"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(recx::kToolName) + " " + recx::kToolVersion);

  Common common;
  bool train_if_missing = false;
  std::vector<std::size_t> k_values{10, 50, 100};
  std::vector<double> p_values{0.1};
  std::string log_path, analyze_out = "analysis", model_a, model_b;
  std::size_t item_count = 0;

  auto* config = app.add_subcommand("config", "Print the resolved configuration");
  add_common(config, common);
  auto* prepare = app.add_subcommand("prepare", "Load or synthesize the secret dataset and write splits");
  add_common(prepare, common);
  auto* train = app.add_subcommand("train-target", "Train the target recommender");
  add_common(train, common);
  auto* attack = app.add_subcommand("attack", "Generate surrogate data, distill a surrogate and evaluate it");
  add_common(attack, common);
  attack->add_flag("--train-target", train_if_missing, "Train the target when its checkpoint is missing");
  auto* sweep = app.add_subcommand("sweep-k", "Attack once per list length k");
  add_common(sweep, common);
  sweep->add_flag("--train-target", train_if_missing, "Train the target when its checkpoint is missing");
  sweep->add_option("--k", k_values, "List lengths, ascending")->delimiter(',');
  auto* defense = app.add_subcommand("defense-compare", "Attack without and with the random-replacement defense");
  add_common(defense, common);
  defense->add_flag("--train-target", train_if_missing, "Train the target when its checkpoint is missing");
  defense->add_option("--p", p_values, "Replacement fractions")->delimiter(',');
  auto* analyze = app.add_subcommand("analyze", "Bias diagnostics from a query log");
  analyze->add_option("--log", log_path, "query_log.jsonl from an attack run")->required();
  analyze->add_option("--items", item_count, "Catalog size")->required();
  analyze->add_option("-o,--output", analyze_out, "Output directory");
  auto* evaluate = app.add_subcommand("evaluate", "Compare two checkpoints on the configured dataset");
  add_common(evaluate, common);
  evaluate->add_option("--a", model_a, "First checkpoint")->required();
  evaluate->add_option("--b", model_b, "Second checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    const recx::CommandOptions options{train_if_missing};
    if (*config) {
      std::cout << recx::config_to_json(common.load()).dump(2) << "\n";
    } else if (*prepare) {
      recx::cmd_prepare(common.load());
    } else if (*train) {
      recx::cmd_train_target(common.load());
    } else if (*attack) {
      recx::cmd_attack(common.load(), options);
    } else if (*sweep) {
      recx::cmd_sweep_k(common.load(), k_values, options);
    } else if (*defense) {
      recx::cmd_defense_compare(common.load(), p_values, options);
    } else if (*analyze) {
      recx::cmd_analyze(log_path, item_count, analyze_out);
    } else if (*evaluate) {
      recx::cmd_evaluate(common.load(), model_a, model_b);
    }
  } catch (const recx::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const recx::BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return backend_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return runtime_error;
  }
  return ok;
}
