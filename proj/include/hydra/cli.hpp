#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hydra/hpnet.hpp"
#include "hydra/trainer.hpp"

namespace hydra::cli {

// Exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;
inline constexpr int kExitStageOrder = 5;

// Everything a run needs. Every field has a default; a JSON config file
// overrides defaults and command-line flags override the file.
struct RunConfig {
  std::string manifest = "data/synth/manifest.jsonl";
  std::string split;  // empty: split.json next to the manifest
  net::HPNetConfig model;  // model.task is the run's task
  train::TrainHyper hyper;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> ablation_seeds{1};
  std::string out = "runs/hydra";
  std::size_t threads = 1;  // 0: one per hardware thread
  double threshold = 0.5;      // attribute decision threshold
  std::size_t trials = 100;    // CMC repetitions
  std::string eval_split = "test";

  std::string split_path() const;
  std::string to_json() const;
  bool operator==(const RunConfig& other) const { return to_json() == other.to_json(); }
};

// Overlays the keys present in `text` onto `base`. Unknown keys and values of
// the wrong type raise ConfigError naming the key.
RunConfig apply_config_text(const RunConfig& base, std::string_view text, const std::string& origin = "<memory>");
RunConfig load_config_file(const RunConfig& base, const std::filesystem::path& path);

// Values given on the command line; unset fields leave the config untouched.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::string> out;
  std::optional<std::string> manifest;
  std::optional<std::string> split;
  std::optional<std::string> mask;
  std::optional<std::string> task;
};

RunConfig resolve_config(const std::optional<std::filesystem::path>& config_path, const Overrides& flags);

// Maps library exceptions to exit codes.
int exit_code_for(const std::exception& e);

// Full command-line entry point; writes reports to `out` and diagnostics to
// `err`. Returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hydra::cli
