// Command-line front end for the experiment commands.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "shiftdiff/harness.hpp"

namespace {

int report(const std::string& kind, const std::string& message, int code) {
  nlohmann::json err{{"error", kind}, {"message", message}};
  std::cerr << err.dump() << std::endl;
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-shift diffusion sampler experiments"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  app.add_option("--config", config_path, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Base random seed (overrides the config)");
  app.add_option("--out", out_dir, "Output directory (overrides the config)");

  using Command = nlohmann::json (*)(const shiftdiff::ExperimentConfig&);
  const std::pair<const char*, Command> commands[] = {
      {"forward", shiftdiff::cmd_forward},         {"sample", shiftdiff::cmd_sample},
      {"sweep-t1", shiftdiff::cmd_sweep_t1},       {"sweep-order", shiftdiff::cmd_sweep_order},
      {"scorefield", shiftdiff::cmd_scorefield},   {"train", shiftdiff::cmd_train},
  };
  const char* help[] = {"forward process curves and marginals",
                        "sample with the configured solver",
                        "sample quality across pivots t1",
                        "solver orders 1-3 at a fixed step count",
                        "score field on a 2-D grid",
                        "train the small noise predictor"};
  for (std::size_t i = 0; i < std::size(commands); ++i) app.add_subcommand(commands[i].first, help[i])->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", e.what(), 2);
  }

  try {
    shiftdiff::ExperimentConfig cfg =
        config_path.empty() ? shiftdiff::parse_config(nlohmann::json::object()) : shiftdiff::load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!out_dir.empty()) cfg.out = out_dir;
    for (const auto& [name, run] : commands) {
      if (app.got_subcommand(name)) {
        std::cout << run(cfg).dump(2) << std::endl;
        return 0;
      }
    }
    return report("usage", "no subcommand", 2);
  } catch (const shiftdiff::Error& e) {
    return report(e.kind(), e.what(), 1);
  } catch (const nlohmann::json::exception& e) {
    return report("config", e.what(), 1);
  } catch (const std::exception& e) {
    return report("internal", e.what(), 1);
  }
}
