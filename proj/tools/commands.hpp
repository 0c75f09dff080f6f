#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "run_config.hpp"

namespace csnet::cli {

struct GenOptions {
  std::optional<int> n_subjects;
};

struct BuildGraphOptions {
  std::filesystem::path manifest;  // empty: <data_dir>/manifest.json
  bool no_surface = false, no_cross = false, no_adjacent = false;
};

struct StageOptions {
  std::filesystem::path graphs;      // empty: graph_dir
  std::filesystem::path model;       // checkpoint input where one is needed
  std::filesystem::path pretrained;  // optional pretrained cascade
  std::string split = "test";        // eval subset: train, val, test or all
  int folds = 0;                     // train: k-fold cross-validation when >= 2
};

struct ExportOptions {
  std::filesystem::path model;
  std::filesystem::path graph;
  std::optional<int> class_k;  // default: predicted subject grade
  bool edges = false;
};

// Each command writes into `out` (a directory, or the PLY path for
// export_attention) and refuses to overwrite its outputs unless `force`.
// Returns the process exit code.
int cmd_gen(const RunConfig& c, const std::filesystem::path& out, bool force, const GenOptions& o);
int cmd_build_graph(const RunConfig& c, const std::filesystem::path& out, bool force, const BuildGraphOptions& o);
int cmd_pretrain(const RunConfig& c, const std::filesystem::path& out, bool force, const StageOptions& o);
int cmd_train(const RunConfig& c, const std::filesystem::path& out, bool force, const StageOptions& o);
int cmd_fit_patch_head(const RunConfig& c, const std::filesystem::path& out, bool force, const StageOptions& o);
int cmd_eval(const RunConfig& c, const std::filesystem::path& out, bool force, const StageOptions& o);
int cmd_ablate(const RunConfig& c, const std::filesystem::path& out, bool force, const StageOptions& o);
int cmd_export_attention(const RunConfig& c, const std::filesystem::path& out, bool force, const ExportOptions& o);

// ASCII PLY point set with per-vertex grade_pred, attention and cartilage_id;
// Surface edges are written as PLY edges when `surface_edges` is set.
std::string attention_ply(const CartilageGraph& g, const std::vector<int>& grade_pred,
                          const std::vector<double>& attention, bool surface_edges);

}  // namespace csnet::cli
