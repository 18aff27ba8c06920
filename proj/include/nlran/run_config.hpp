#pragma once

#include <array>
#include <string>

#include <json.hpp>

#include "nlran/data.hpp"
#include "nlran/model.hpp"
#include "nlran/phantom.hpp"
#include "nlran/trainer.hpp"

namespace nlran {

struct DataConfig {
  std::array<std::size_t, 3> split_ratios{8, 1, 1};
  std::uint64_t split_seed = 7;
  bool stratified = true;
  /// Desk defaults: 36x36 phantoms cropped to 32x32 and resampled to 16 slices.
  PreprocessConfig preprocess{16, 32, 32, true};
};

struct PathsConfig {
  std::string data_dir = "data";        // synth output / raw manifest location
  std::string processed_dir = "processed";
  std::string run_dir = "run";          // config.json, checkpoints/, logs/, reports/, heatmaps/
};

/// Everything a CLI subcommand needs. Loading overlays a JSON file on the
/// defaults; unknown keys at any level are rejected.
struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
  PhantomSpec phantom;
  DataConfig data;
  PathsConfig paths;

  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
};

nlohmann::json phantom_to_json(const PhantomSpec& spec);
PhantomSpec phantom_from_json(const nlohmann::json& j, PhantomSpec base = {});
nlohmann::json preprocess_to_json(const PreprocessConfig& cfg);
PreprocessConfig preprocess_from_json(const nlohmann::json& j, PreprocessConfig base = {});

}  // namespace nlran
