#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "carotidseg/synth.hpp"
#include "carotidseg/trainer.hpp"

namespace carotidseg {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat dotted-key view of a TOML-style config file ("section.key" -> raw
// value text). Only the subset needed here is supported: [sections], scalar
// values (string, int, float, bool) and one-line arrays.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap parse_toml(const std::string& text);
ConfigMap parse_toml_file(const std::filesystem::path& path);

// "section.key=value" override, as given on the command line.
void apply_override(ConfigMap& map, const std::string& assignment);

// Everything a pipeline run needs; encodes the published defaults.
struct RunConfig {
  int schema_version = 1;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::string manifest;

  TrainRun run;
  PhantomSpec synth;
  int roi_size = 64;
  bool use_prior_filter = true;
};

RunConfig default_run_config(Task task);

// Parses, validates against the schema (unknown keys rejected, types checked,
// schema_version pinned) and applies overrides on top of task defaults.
RunConfig run_config_from_map(const ConfigMap& map, Task default_task);
RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::string>& overrides, Task default_task);

// Echoes the effective config as TOML text; parseable by load_run_config.
std::string run_config_to_toml(const RunConfig& cfg);

}  // namespace carotidseg
