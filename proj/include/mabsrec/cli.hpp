#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mabsrec/pipeline.hpp"

namespace mabsrec::cli {

/// Single-line machine-readable failure record.
inline std::string error_line(const std::string& kind, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  return j.dump();
}

/// `mabsrec <prepare|train|eval|ablate> [--config FILE] [--key value ...]`.
/// Every config key is also a flag; flags override the config file, which
/// overrides the preset. Returns the process exit code; failures print one
/// JSON error line to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"MABSRec sequential recommender"};
  app.require_subcommand(1);
  const auto keys = pipeline::config_keys();

  struct Command {
    CLI::App* app = nullptr;
    std::string config;
    std::map<std::string, std::string> values;
  };
  std::map<std::string, Command> commands;
  const std::pair<const char*, const char*> specs[] = {
      {"prepare", "ingest a dataset and write vocabularies, splits, partitions and graphs"},
      {"train", "train one variant on prepared data"},
      {"eval", "evaluate a checkpoint on prepared data"},
      {"ablate", "train and compare full, wo_G, wo_A and wo_D"},
  };
  for (const auto& [name, help] : specs) {
    Command& c = commands[name];
    c.app = app.add_subcommand(name, help);
    c.app->add_option("--config", c.config, "key = value config file");
    for (const auto& key : keys)
      c.app->add_option("--" + key, c.values[key])->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << error_line("usage", e.what()) << '\n';
    return 2;
  }

  try {
    for (auto& [name, c] : commands) {
      if (!c.app->parsed()) continue;
      std::vector<std::pair<std::string, std::string>> overrides;
      for (const auto& key : keys)
        if (c.app->count("--" + key)) overrides.emplace_back(key, c.values[key]);
      const pipeline::RunConfig run =
          pipeline::resolve_run_config(c.config.empty() ? std::nullopt : std::optional<std::string>(c.config), overrides);
      if (name == "prepare") pipeline::cmd_prepare(run, out);
      else if (name == "train") pipeline::cmd_train(run, out);
      else if (name == "eval") pipeline::cmd_eval(run, out);
      else pipeline::cmd_ablate(run, out);
    }
  } catch (const Error& e) {
    err << error_line(e.kind(), e.what()) << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << error_line("internal", e.what()) << '\n';
    return 1;
  }
  return 0;
}

}  // namespace mabsrec::cli
