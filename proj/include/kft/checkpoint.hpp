#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kft/data.hpp"
#include "kft/errors.hpp"
#include "kft/model.hpp"
#include "kft/variational.hpp"

namespace kft {

/// JSON manifest plus named float64 tensors. On disk: the 8-byte magic
/// "KFTCKPT1", a little-endian u64 manifest length, the manifest, then each
/// tensor's values as little-endian f64 in manifest order.
struct Archive {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<std::pair<std::string, DenseTensor>> tensors;

  const DenseTensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

void write_archive(const std::filesystem::path& file, const Archive& archive);
/// Throws DataError for a missing, truncated or foreign file.
Archive read_archive(const std::filesystem::path& file);

nlohmann::json to_json(const ModelConfig& config);
/// Reads a model block; unknown keys and bad values raise ConfigError with
/// the dotted path under `prefix`.
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& prefix = "model");

/// Model parameters, side features and target transform in one archive.
Archive model_archive(KftModel& model, const ZTransform& targets);
void save_model(const std::filesystem::path& file, KftModel& model, const ZTransform& targets);

struct LoadedModel {
  KftModel model;
  ZTransform targets;
};

LoadedModel model_from_archive(const Archive& archive);
LoadedModel load_model(const std::filesystem::path& file);

/// Mean parameters as in `model_archive` plus the variational config and
/// every variance tensor, under format "kft-vi-model".
Archive vi_model_archive(VariationalModel& model, const ZTransform& targets);
void save_vi_model(const std::filesystem::path& file, VariationalModel& model, const ZTransform& targets);

struct LoadedViModel {
  VariationalModel model;
  ZTransform targets;
};

LoadedViModel vi_model_from_archive(const Archive& archive);
LoadedViModel load_vi_model(const std::filesystem::path& file);

/// "kft-model" or "kft-vi-model"; DataError for anything else.
std::string checkpoint_format(const Archive& archive);

}  // namespace kft
