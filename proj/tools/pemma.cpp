// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. One subcommand per pipeline stage; every stage
// reads a JSON run configuration and writes its artifacts into the run
// directory. Exit codes: 0 success, 2 configuration error, 3 data error,
// 4 numeric failure, 1 anything else.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pemma/config.hpp"
#include "pemma/driver.hpp"
#include "pemma/errors.hpp"

namespace pemma {
const char* version();
}

namespace {

struct CliOverrides {
  std::string config_path;
  std::string out;
  std::string method;
  std::string modes;
  std::string scope;
  uint64_t seed = 0;
  bool seed_set = false;
};

std::vector<pemma::Mode> parse_mode_list(const std::string& csv) {
  std::vector<pemma::Mode> out;
  std::string token;
  std::istringstream in(csv);
  while (std::getline(in, token, ',')) {
    if (token.empty()) continue;
    out.push_back(pemma::parse_mode(token));
  }
  if (out.empty()) throw pemma::ConfigError("--modes: expected a comma-separated mode list");
  return out;
}

pemma::RunConfig assemble(pemma::Stage stage, const CliOverrides& cli) {
  pemma::RunConfig cfg = pemma::parse_run_config(cli.config_path);
  cfg.stage = stage;
  if (cli.seed_set) cfg.seed = cli.seed;
  if (!cli.out.empty()) cfg.out_dir = cli.out;
  if (!cli.method.empty()) cfg.method = pemma::parse_method(cli.method);
  if (!cli.modes.empty()) {
    std::vector<pemma::Mode> modes = parse_mode_list(cli.modes);
    cfg.eval_modes = modes;
    if (stage == pemma::Stage::continual) cfg.continual_modes = modes;
  }
  if (!cli.scope.empty()) cfg.scope = pemma::parse_scope(cli.scope);
  return cfg;
}

void add_stage(CLI::App& app, const char* name, const char* help, pemma::Stage stage,
               CliOverrides& cli, int& exit_code) {
  CLI::App* sub = app.add_subcommand(name, help);
  sub->add_option("--config", cli.config_path, "run configuration file (JSON)")->required();
  sub->add_option("--seed", cli.seed, "override the configured seed")
      ->each([&cli](const std::string&) { cli.seed_set = true; });
  sub->add_option("--out", cli.out, "override the run directory");
  sub->add_option("--method", cli.method,
                  "override the method (pemma_lora|pemma_dora|early|late)");
  sub->add_option("--modes", cli.modes, "override the mode list, e.g. ct,pet,ctpet");
  sub->add_option("--scope", cli.scope, "continual trainable scope (peft_only|wide)");
  sub->callback([stage, &cli, &exit_code]() {
    pemma::RunConfig cfg = assemble(stage, cli);
    pemma::RunResult result = pemma::run_stage(cfg);
    std::cout << pemma::stage_name(result.stage) << ": done";
    if (result.steps_run > 0) std::cout << " (" << result.steps_run << " steps)";
    std::cout << "\n";
    for (const auto& [label, path] : result.artifacts)
      std::cout << "  " << label << ": " << path << "\n";
    exit_code = 0;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal segmentation and prognosis pipeline"};
  app.set_version_flag("--version", pemma::version());
  app.require_subcommand(1);

  CliOverrides cli;
  int exit_code = 0;
  add_stage(app, "pretrain", "train the single-modality backbone", pemma::Stage::pretrain, cli,
            exit_code);
  add_stage(app, "adapt", "upgrade the backbone to CT+PET", pemma::Stage::adapt, cli, exit_code);
  add_stage(app, "continual", "scoped fine-tuning on a new center", pemma::Stage::continual, cli,
            exit_code);
  add_stage(app, "eval", "score held-out cases per mode and center", pemma::Stage::eval, cli,
            exit_code);
  add_stage(app, "prognosis", "train and score the survival head", pemma::Stage::prognosis, cli,
            exit_code);
  add_stage(app, "report", "merge evaluation runs into one table", pemma::Stage::report, cli,
            exit_code);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const pemma::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const pemma::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const pemma::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_code;
}
