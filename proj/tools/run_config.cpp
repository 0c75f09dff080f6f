#include "run_config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>

#include "json.hpp"

#include "csnet/error.hpp"

namespace csnet::cli {

using nlohmann::json;

namespace {

void check_object(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw UsageError("config: " + path + " must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw UsageError("config: unknown key " + path + "." + key);
  }
}

template <typename T>
void take(const json& j, const char* key, T& dst, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError("config: bad value for " + path + "." + key);
  }
}

template <typename T>
void take_optional(const json& j, const char* key, std::optional<T>& dst, const std::string& path) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    dst.reset();
    return;
  }
  T v{};
  take(j, key, v, path);
  dst = v;
}

void apply_dataset(const json& j, DatasetOptions& d) {
  const std::string p = "dataset";
  check_object(j, p, {"n_subjects", "grade_mix", "fixed_spacing_mm", "fixed_slices", "in_slice_dims",
                      "in_slice_spacing_mm", "noise_sigma", "defect_arc_mm", "slice_span", "right_knee_fraction"});
  take(j, "n_subjects", d.n_subjects, p);
  take(j, "grade_mix", d.grade_mix, p);
  take_optional(j, "fixed_spacing_mm", d.fixed_spacing_mm, p);
  take_optional(j, "fixed_slices", d.fixed_slices, p);
  take(j, "in_slice_dims", d.in_slice_dims, p);
  take(j, "in_slice_spacing_mm", d.in_slice_spacing_mm, p);
  take(j, "noise_sigma", d.noise_sigma, p);
  take(j, "defect_arc_mm", d.defect_arc_mm, p);
  take(j, "slice_span", d.slice_span, p);
  take(j, "right_knee_fraction", d.right_knee_fraction, p);
}

void apply_graph(const json& j, GraphBuildConfig& g, EdgeMask& edges) {
  const std::string p = "graph";
  check_object(j, p, {"patch_size_px", "patch_spacing_mm", "target_iou", "d_c_mm", "d_a_factor",
                      "opening_radius_vox", "fov_margins", "edges"});
  take(j, "patch_size_px", g.patch_size_px, p);
  take(j, "patch_spacing_mm", g.patch_spacing_mm, p);
  take(j, "target_iou", g.target_iou, p);
  take(j, "d_c_mm", g.d_c_mm, p);
  take(j, "d_a_factor", g.d_a_factor, p);
  take(j, "opening_radius_vox", g.opening_radius_vox, p);
  if (j.contains("fov_margins")) {
    const auto& f = j["fov_margins"];
    const std::string fp = p + ".fov_margins";
    check_object(f, fp, {"superior_mm", "extent_si_mm", "anterior_mm", "extent_ap_mm"});
    take(f, "superior_mm", g.fov_margins.superior_mm, fp);
    take(f, "extent_si_mm", g.fov_margins.extent_si_mm, fp);
    take(f, "anterior_mm", g.fov_margins.anterior_mm, fp);
    take(f, "extent_ap_mm", g.fov_margins.extent_ap_mm, fp);
  }
  if (j.contains("edges")) {
    const auto& e = j["edges"];
    const std::string ep = p + ".edges";
    check_object(e, ep, {"surface", "cross", "adjacent"});
    take(e, "surface", edges.surface, ep);
    take(e, "cross", edges.cross, ep);
    take(e, "adjacent", edges.adjacent, ep);
  }
}

void apply_model(const json& j, ModelConfig& m) {
  const std::string p = "model";
  check_object(j, p, {"patch_size_px", "channels", "hidden", "heads"});
  take(j, "patch_size_px", m.patch_size_px, p);
  take(j, "channels", m.channels, p);
  take(j, "hidden", m.hidden, p);
  take(j, "heads", m.heads, p);
}

void apply_train(const json& j, RunConfig& c) {
  const std::string p = "train";
  TrainConfig& t = c.train;
  check_object(j, p, {"lr", "weight_decay", "decoupled_weight_decay", "batch_size", "subject_epochs", "pretrain",
                      "pretrain_epochs", "pretrain_max_patches", "pretrain_batch", "pretrain_lr",
                      "patch_head_epochs", "patch_head_lr", "train_fraction", "val_fraction"});
  take(j, "lr", t.lr, p);
  take(j, "weight_decay", t.weight_decay, p);
  take(j, "decoupled_weight_decay", t.decoupled_weight_decay, p);
  take(j, "batch_size", t.batch_size, p);
  take(j, "subject_epochs", t.subject_epochs, p);
  take(j, "pretrain", t.pretrain, p);
  take(j, "pretrain_epochs", t.pretrain_epochs, p);
  take(j, "pretrain_max_patches", t.pretrain_max_patches, p);
  take(j, "pretrain_batch", t.pretrain_batch, p);
  take(j, "pretrain_lr", t.pretrain_lr, p);
  take(j, "patch_head_epochs", t.patch_head_epochs, p);
  take(j, "patch_head_lr", t.patch_head_lr, p);
  take(j, "train_fraction", c.train_fraction, p);
  take(j, "val_fraction", c.val_fraction, p);
}

void apply_paths(const json& j, Paths& paths) {
  const std::string p = "paths";
  check_object(j, p, {"data_dir", "graph_dir", "run_dir"});
  std::string s;
  if (j.contains("data_dir")) take(j, "data_dir", s, p), paths.data_dir = s;
  if (j.contains("graph_dir")) take(j, "graph_dir", s, p), paths.graph_dir = s;
  if (j.contains("run_dir")) take(j, "run_dir", s, p), paths.run_dir = s;
}

}  // namespace

RunConfig profile_defaults(const std::string& profile) {
  RunConfig c;
  c.profile = profile;
  if (profile == "full") return c;
  if (profile != "desk") throw UsageError("config: unknown profile '" + profile + "' (expected full or desk)");
  c.graph = desk_graph_config();
  c.model = desk_model_config();
  c.train.lr = 1e-3;
  return c;
}

void RunConfig::finalize() {
  dataset.seed = seed;
  model.seed = seed;
  train.seed = seed;
  train.deterministic = deterministic;
  train.edge_mask = edges;
  if (model.patch_size_px != graph.patch_size_px)
    throw UsageError("config: model.patch_size_px must equal graph.patch_size_px");
  if (dataset.n_subjects < 0) throw UsageError("config: dataset.n_subjects must be >= 0");
  if (train_fraction <= 0 || val_fraction < 0 || train_fraction + val_fraction >= 1)
    throw UsageError("config: split fractions must leave a non-empty test share");
  graph.validate();
  model.validate();
  train.validate();
}

RunConfig parse_run_config(const std::string& text, const std::string& profile) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: not valid JSON: ") + e.what());
  }
  check_object(j, "config", {"profile", "seed", "deterministic", "dataset", "graph", "model", "train", "paths"});
  std::string prof = "full";
  take(j, "profile", prof, "config");
  if (!profile.empty()) prof = profile;
  RunConfig c = profile_defaults(prof);
  take(j, "seed", c.seed, "config");
  take(j, "deterministic", c.deterministic, "config");
  if (j.contains("dataset")) apply_dataset(j["dataset"], c.dataset);
  if (j.contains("graph")) apply_graph(j["graph"], c.graph, c.edges);
  const bool model_patch_set = j.contains("model") && j["model"].is_object() && j["model"].contains("patch_size_px");
  if (j.contains("model")) apply_model(j["model"], c.model);
  if (!model_patch_set) c.model.patch_size_px = c.graph.patch_size_px;
  if (j.contains("train")) apply_train(j["train"], c);
  if (j.contains("paths")) apply_paths(j["paths"], c.paths);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::string& profile) {
  std::ifstream in(path);
  if (!in) throw UsageError("config: cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), profile);
}

std::string to_json(const RunConfig& c) {
  const auto& d = c.dataset;
  const auto& g = c.graph;
  const auto& t = c.train;
  json j;
  j["profile"] = c.profile;
  j["seed"] = c.seed;
  j["deterministic"] = c.deterministic;
  j["dataset"] = {{"n_subjects", d.n_subjects},
                  {"grade_mix", d.grade_mix},
                  {"fixed_spacing_mm", d.fixed_spacing_mm ? json(*d.fixed_spacing_mm) : json(nullptr)},
                  {"fixed_slices", d.fixed_slices ? json(*d.fixed_slices) : json(nullptr)},
                  {"in_slice_dims", d.in_slice_dims},
                  {"in_slice_spacing_mm", d.in_slice_spacing_mm},
                  {"noise_sigma", d.noise_sigma},
                  {"defect_arc_mm", d.defect_arc_mm},
                  {"slice_span", d.slice_span},
                  {"right_knee_fraction", d.right_knee_fraction}};
  j["graph"] = {{"patch_size_px", g.patch_size_px},
                {"patch_spacing_mm", g.patch_spacing_mm},
                {"target_iou", g.target_iou},
                {"d_c_mm", g.d_c_mm},
                {"d_a_factor", g.d_a_factor},
                {"opening_radius_vox", g.opening_radius_vox},
                {"fov_margins",
                 {{"superior_mm", g.fov_margins.superior_mm},
                  {"extent_si_mm", g.fov_margins.extent_si_mm},
                  {"anterior_mm", g.fov_margins.anterior_mm},
                  {"extent_ap_mm", g.fov_margins.extent_ap_mm}}},
                {"edges", {{"surface", c.edges.surface}, {"cross", c.edges.cross}, {"adjacent", c.edges.adjacent}}}};
  j["model"] = {{"patch_size_px", c.model.patch_size_px},
                {"channels", c.model.channels},
                {"hidden", c.model.hidden},
                {"heads", c.model.heads}};
  j["train"] = {{"lr", t.lr},
                {"weight_decay", t.weight_decay},
                {"decoupled_weight_decay", t.decoupled_weight_decay},
                {"batch_size", t.batch_size},
                {"subject_epochs", t.subject_epochs},
                {"pretrain", t.pretrain},
                {"pretrain_epochs", t.pretrain_epochs},
                {"pretrain_max_patches", t.pretrain_max_patches},
                {"pretrain_batch", t.pretrain_batch},
                {"pretrain_lr", t.pretrain_lr},
                {"patch_head_epochs", t.patch_head_epochs},
                {"patch_head_lr", t.patch_head_lr},
                {"train_fraction", c.train_fraction},
                {"val_fraction", c.val_fraction}};
  j["paths"] = {{"data_dir", c.paths.data_dir.string()},
                {"graph_dir", c.paths.graph_dir.string()},
                {"run_dir", c.paths.run_dir.string()}};
  return j.dump(2);
}

void resolve_paths(RunConfig& c, const std::filesystem::path& base) {
  for (auto* p : {&c.paths.data_dir, &c.paths.graph_dir, &c.paths.run_dir})
    *p = std::filesystem::weakly_canonical(p->is_absolute() ? *p : base / *p);
}

}  // namespace csnet::cli
