#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kft/data.hpp"
#include "kft/eval.hpp"
#include "kft/model.hpp"
#include "kft/train.hpp"
#include "kft/variational.hpp"

namespace kft {

// JSON forms of every config block. Readers reject unknown keys and report
// bad values with the dotted path under `prefix`.

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& prefix = "train");

nlohmann::json to_json(const PriorHyper& c);
nlohmann::json to_json(const VariationalConfig& c);
VariationalConfig variational_config_from_json(const nlohmann::json& j, const std::string& prefix = "vi");

nlohmann::json to_json(const SynthSpec& c);
SynthSpec synth_spec_from_json(const nlohmann::json& j, const std::string& prefix = "synth");

nlohmann::json to_json(const SearchSpace& c);
SearchSpace search_space_from_json(const nlohmann::json& j, const std::string& prefix = "search.space");

nlohmann::json to_json(const AblationSpec& c);
AblationSpec ablation_spec_from_json(const nlohmann::json& j, const std::string& prefix = "ablate");

nlohmann::json to_json(const Metrics& m);
nlohmann::json to_json(const TrialSetup& s);

/// Everything a command reads. `seed` is the split seed and the default for
/// every other seed field that the file leaves unset.
struct RunConfig {
  std::uint64_t seed = 0;

  struct Paths {
    std::string data;
    std::map<std::size_t, std::string> side;  // mode -> side file
    std::string checkpoint;
    std::string output = "run";
  } paths;

  LoadOptions data;
  ModelConfig model;
  TrainConfig train;
  VariationalConfig vi;

  struct Predictive {
    std::size_t draws = 200;
    std::vector<std::size_t> heatmap_modes{0, 1};
  } predictive;

  SearchSpace search;
  std::size_t search_iterations = 8;
  AblationSpec ablate;
  SynthSpec synth;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Sets the leaf named by a dotted path from `key=value`. The value is parsed
/// as JSON when possible and kept as a string otherwise. Intermediate objects
/// are created as needed.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Reads the file (or `{}` when `file` is empty), applies the overrides in
/// order and parses the result.
RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                          nlohmann::json* resolved = nullptr);

}  // namespace kft
