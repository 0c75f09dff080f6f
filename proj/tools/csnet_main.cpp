#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"

#include "commands.hpp"
#include "csnet/error.hpp"

namespace fs = std::filesystem;
using namespace csnet;
using namespace csnet::cli;

namespace {

struct Common {
  std::string config;
  std::string profile;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::string out;
  bool force = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "JSON run configuration");
  sub->add_option("--profile", c.profile, "base defaults: full or desk");
  sub->add_option("--seed", c.seed, "master seed (overrides the config)");
  sub->add_flag("--deterministic", c.deterministic, "force deterministic mode");
  sub->add_option("--out", c.out, "output location");
  sub->add_flag("--force", c.force, "overwrite existing outputs");
}

RunConfig resolve(const Common& c) {
  RunConfig rc = c.config.empty() ? profile_defaults(c.profile.empty() ? "full" : c.profile)
                                  : load_run_config(c.config, c.profile);
  if (c.seed) rc.seed = *c.seed;
  if (c.deterministic) rc.deterministic = true;
  rc.finalize();
  resolve_paths(rc, fs::current_path());
  return rc;
}

fs::path out_or(const Common& c, const fs::path& fallback) {
  return c.out.empty() ? fallback : fs::absolute(c.out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cartilage surface graphs and CSNet grading on phantom knee volumes"};
  app.require_subcommand(1);
  Common common;

  GenOptions gen;
  auto* s_gen = app.add_subcommand("gen", "generate a phantom cohort and its manifest");
  add_common(s_gen, common);
  s_gen->add_option("--n", gen.n_subjects, "number of subjects (overrides dataset.n_subjects)");

  BuildGraphOptions bg;
  std::string manifest;
  auto* s_bg = app.add_subcommand("build-graph", "build one cartilage graph per manifest subject");
  add_common(s_bg, common);
  s_bg->add_option("--manifest", manifest, "dataset manifest (default <data_dir>/manifest.json)");
  s_bg->add_flag("--no-surface", bg.no_surface, "drop surface edges");
  s_bg->add_flag("--no-cross", bg.no_cross, "drop cross-cartilage edges");
  s_bg->add_flag("--no-adjacent", bg.no_adjacent, "drop adjacent-slice edges");

  StageOptions st;
  std::string graphs, model, pretrained;
  auto stage = [&](const char* name, const char* help, bool with_model, bool with_pretrained) {
    auto* s = app.add_subcommand(name, help);
    add_common(s, common);
    s->add_option("--graphs", graphs, "graph directory (default graph_dir)");
    if (with_model) s->add_option("--model", model, "model checkpoint");
    if (with_pretrained) s->add_option("--pretrained", pretrained, "pretrained patch cascade checkpoint");
    return s;
  };
  auto* s_pre = stage("pretrain", "pretrain the patch cascade on training patches", false, false);
  auto* s_train = stage("train", "pretrain, train CSNet and fit the patch head, then evaluate the test split", false, true);
  s_train->add_option("--folds", st.folds, "k-fold cross-validation over all subjects (k >= 2)")
      ->check(CLI::Range(2, 100));
  auto* s_head = stage("fit-patch-head", "refit the patch head of a trained model", true, false);
  auto* s_eval = stage("eval", "evaluate a model at subject, slice and patch level", true, false);
  s_eval->add_option("--split", st.split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  auto* s_abl = stage("ablate", "train one model per edge mask and report test metrics", false, true);

  ExportOptions ex;
  std::string ex_model, ex_graph;
  auto* s_exp = app.add_subcommand("export-attention", "write per-vertex attention as a PLY point set");
  add_common(s_exp, common);
  s_exp->add_option("--model", ex_model, "model checkpoint")->required();
  s_exp->add_option("--graph", ex_graph, "graph file")->required();
  s_exp->add_option("--class", ex.class_k, "class for the attention map (default: predicted grade)")
      ->check(CLI::Range(0, 2));
  s_exp->add_flag("--edges", ex.edges, "include surface edges");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    const RunConfig rc = resolve(common);
    auto abs = [](const std::string& p) { return p.empty() ? fs::path() : fs::absolute(p); };
    st.graphs = abs(graphs);
    st.model = abs(model);
    st.pretrained = abs(pretrained);
    if (s_gen->parsed()) return cmd_gen(rc, out_or(common, rc.paths.data_dir), common.force, gen);
    if (s_bg->parsed()) {
      bg.manifest = abs(manifest);
      return cmd_build_graph(rc, out_or(common, rc.paths.graph_dir), common.force, bg);
    }
    const fs::path run = out_or(common, rc.paths.run_dir);
    if (s_pre->parsed()) return cmd_pretrain(rc, run, common.force, st);
    if (s_train->parsed()) return cmd_train(rc, run, common.force, st);
    if (s_head->parsed()) return cmd_fit_patch_head(rc, run, common.force, st);
    if (s_eval->parsed()) return cmd_eval(rc, run, common.force, st);
    if (s_abl->parsed()) return cmd_ablate(rc, run, common.force, st);
    if (s_exp->parsed()) {
      ex.model = abs(ex_model);
      ex.graph = abs(ex_graph);
      return cmd_export_attention(rc, out_or(common, run / "attention.ply"), common.force, ex);
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
