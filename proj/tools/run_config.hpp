#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "csnet/graph.hpp"
#include "csnet/model.hpp"
#include "csnet/phantom.hpp"
#include "csnet/pipeline.hpp"

namespace csnet::cli {

struct Paths {
  std::filesystem::path data_dir = "data";
  std::filesystem::path graph_dir = "graphs";
  std::filesystem::path run_dir = "run";
};

struct RunConfig {
  std::string profile = "full";  // "full" or "desk"
  std::uint64_t seed = 0;
  bool deterministic = true;
  DatasetOptions dataset;
  GraphBuildConfig graph;
  EdgeMask edges;
  ModelConfig model;
  TrainConfig train;
  double train_fraction = 0.70;
  double val_fraction = 0.15;
  Paths paths;

  // Pushes the master seed and determinism flag into every section and checks
  // each of them. Throws UsageError.
  void finalize();
};

RunConfig profile_defaults(const std::string& profile);

// Applies a JSON document on top of the profile it names (or `profile`).
// Unknown keys and ill-typed values throw UsageError.
RunConfig parse_run_config(const std::string& text, const std::string& profile = "");
RunConfig load_run_config(const std::filesystem::path& path, const std::string& profile = "");

std::string to_json(const RunConfig& c);

// Makes every path absolute against `base`.
void resolve_paths(RunConfig& c, const std::filesystem::path& base);

}  // namespace csnet::cli
