#include "commands.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <iostream>
#include <sstream>

#include "json.hpp"

#include "csnet/error.hpp"
#include "csnet/nd/checkpoint.hpp"

namespace csnet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void claim_outputs(const fs::path& dir, std::initializer_list<const char*> names, bool force) {
  for (const char* n : names)
    if (fs::exists(dir / n) && !force)
      throw UsageError("output " + (dir / n).string() + " already exists (use --force to overwrite)");
  fs::create_directories(dir);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string id_for(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%04d", i);
  return buf;
}

fs::path graph_dir(const RunConfig& c, const StageOptions& o) { return o.graphs.empty() ? c.paths.graph_dir : o.graphs; }

std::vector<CartilageGraph> load_graph_set(const fs::path& dir) {
  const json index = read_json(dir / "graphs.json");
  std::vector<CartilageGraph> out;
  for (const auto& e : index.at("graphs")) out.push_back(load_graph(dir / e.at("file").get<std::string>()));
  if (out.empty()) throw DataError("no graphs listed in " + (dir / "graphs.json").string());
  return out;
}

struct Cohort {
  std::vector<CartilageGraph> all;
  Split split;
  std::vector<CartilageGraph> part(const std::vector<std::size_t>& idx) const { return select(all, idx); }
};

Cohort load_cohort(const RunConfig& c, const StageOptions& o) {
  Cohort h;
  h.all = load_graph_set(graph_dir(c, o));
  for (const auto& g : h.all)
    if (g.patch_size_px != c.model.patch_size_px)
      throw DataError("graph " + g.subject_id + " has patch size " + std::to_string(g.patch_size_px) +
                      " but the model expects " + std::to_string(c.model.patch_size_px));
  h.all = apply_mask(h.all, c.edges);
  h.split = split_subjects(h.all.size(), c.seed, c.train_fraction, c.val_fraction);
  return h;
}

json split_json(const Cohort& h) {
  auto ids = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::string> out;
    for (auto i : idx) out.push_back(h.all[i].subject_id);
    return out;
  };
  return {{"train", ids(h.split.train)}, {"val", ids(h.split.val)}, {"test", ids(h.split.test)}};
}

class JsonlLog {
 public:
  explicit JsonlLog(const fs::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot write " + path.string());
  }
  EpochLogger logger() {
    return [this](const EpochRecord& r) {
      const std::string line = to_json_line(r);
      out_ << line << '\n';
      out_.flush();
      std::cout << line << '\n' << std::flush;
    };
  }

 private:
  std::ofstream out_;
};

PatchCascade load_cascade(const fs::path& path, const ModelConfig& mc) {
  auto [cascade, stored] = cascade_from_checkpoint(nd::load_checkpoint(path));
  if (stored.channels != mc.channels || stored.patch_size_px != mc.patch_size_px)
    throw UsageError("pretrained cascade " + path.string() + " does not match the model configuration");
  return std::move(cascade);
}

json metrics_json(CsnetModel<float>& model, const std::vector<CartilageGraph>& graphs) {
  json j;
  for (Level l : {Level::Subject, Level::Slice, Level::Patch}) {
    const auto r = evaluate(model, graphs, l);
    j[level_name(l)] = json::parse(to_json(r));
    std::printf("%-7s n=%zu ACC=%.4f REC=%.4f AUC=%.4f\n", level_name(l), r.n, r.acc, r.rec, r.auc);
  }
  return j;
}

}  // namespace

int cmd_gen(const RunConfig& c, const fs::path& out, bool force, const GenOptions& o) {
  DatasetOptions opt = c.dataset;
  if (o.n_subjects) opt.n_subjects = *o.n_subjects;
  if (opt.n_subjects < 0) throw UsageError("gen: subject count must be >= 0");
  claim_outputs(out, {"manifest.json", "subjects"}, force);
  write_text(out / "config.json", to_json(c));
  json subjects = json::array();
  std::array<int, 3> counts{};
  const auto specs = make_dataset_specs(opt);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const std::string id = id_for(static_cast<int>(i));
    const Phantom p = generate_phantom_with_retry(specs[i]);
    const fs::path dir = out / "subjects" / id;
    fs::create_directories(dir);
    save_volume(p.volume, dir / "volume.json");
    save_ground_truth(p.truth, dir / "truth.json");
    ++counts[static_cast<std::size_t>(p.truth.subject_grade)];
    subjects.push_back({{"id", id},
                        {"volume", "subjects/" + id + "/volume.json"},
                        {"truth", "subjects/" + id + "/truth.json"},
                        {"subject_grade", p.truth.subject_grade},
                        {"laterality", p.volume.laterality == Laterality::Right ? "right" : "left"},
                        {"slices", p.volume.slices()},
                        {"inter_slice_spacing_mm", p.volume.inter_slice_spacing_mm}});
  }
  write_text(out / "manifest.json", json{{"seed", c.seed}, {"subjects", subjects}}.dump(2));
  std::printf("generated %zu subjects (G0 %d, G1 %d, G2 %d) in %s\n", specs.size(), counts[0], counts[1], counts[2],
              out.string().c_str());
  return 0;
}

int cmd_build_graph(const RunConfig& c, const fs::path& out, bool force, const BuildGraphOptions& o) {
  const fs::path manifest = o.manifest.empty() ? c.paths.data_dir / "manifest.json" : o.manifest;
  const json m = read_json(manifest);
  const fs::path root = manifest.parent_path();
  EdgeMask mask = c.edges;
  mask.surface = mask.surface && !o.no_surface;
  mask.cross = mask.cross && !o.no_cross;
  mask.adjacent = mask.adjacent && !o.no_adjacent;
  claim_outputs(out, {"graphs.json"}, force);
  write_text(out / "config.json", to_json(c));

  json index = json::array();
  std::size_t failed = 0, total = 0;
  for (const auto& s : m.at("subjects")) {
    ++total;
    const std::string id = s.at("id").get<std::string>();
    try {
      const LabeledVolume vol = load_volume(root / s.at("volume").get<std::string>());
      CartilageGraph g = build_graph(vol, c.graph, id);
      if (s.contains("truth")) attach_ground_truth(g, vol, load_ground_truth(root / s.at("truth").get<std::string>()), c.graph);
      g = filter_edges(g, mask);
      save_graph(g, out / (id + ".graph"));
      index.push_back({{"id", id}, {"file", id + ".graph"}});
      std::printf("%s N=%zu surface=%zu cross=%zu adjacent=%zu\n", id.c_str(), g.size(),
                  g.adjacency.count(EdgeKind::Surface), g.adjacency.count(EdgeKind::Cross),
                  g.adjacency.count(EdgeKind::Adjacent));
    } catch (const DataError& e) {
      ++failed;
      std::fprintf(stderr, "warning: skipping %s: %s\n", id.c_str(), e.what());
    }
  }
  write_text(out / "graphs.json", json{{"graphs", index}}.dump(2));
  if (total > 0 && failed == total) throw DataError("build-graph: every subject failed");
  std::printf("built %zu graphs, skipped %zu\n", total - failed, failed);
  return 0;
}

int cmd_pretrain(const RunConfig& c, const fs::path& out, bool force, const StageOptions& o) {
  const Cohort h = load_cohort(c, o);
  claim_outputs(out, {"pretrain.ck", "pretrain_log.jsonl"}, force);
  write_text(out / "config.json", to_json(c));
  JsonlLog log(out / "pretrain_log.jsonl");
  const PatchCascade cascade = pretrain_patch_classifier(h.part(h.split.train), c.model, c.train, log.logger());
  nd::save_checkpoint(to_checkpoint(cascade, c.model), out / "pretrain.ck");
  std::printf("pretrained patch cascade: train accuracy %.4f\n", cascade.train_accuracy);
  return 0;
}

namespace {

json train_split(const RunConfig& c, Cohort h, const fs::path& out, bool force, const StageOptions& o) {
  claim_outputs(out, {"model.ck", "train_log.jsonl", "metrics.json", "split.json"}, force);
  write_text(out / "config.json", to_json(c));
  write_text(out / "split.json", split_json(h).dump(2));
  JsonlLog log(out / "train_log.jsonl");
  const auto train = h.part(h.split.train);
  CsnetModel<float> model(c.model);
  if (!o.pretrained.empty()) {
    transplant(load_cascade(o.pretrained, c.model), model);
  } else if (c.train.pretrain) {
    const PatchCascade cascade = pretrain_patch_classifier(train, c.model, c.train, log.logger());
    nd::save_checkpoint(to_checkpoint(cascade, c.model), out / "pretrain.ck");
    transplant(cascade, model);
  }
  const auto r = train_subject(model, train, h.part(h.split.val), c.train, log.logger());
  std::printf("best epoch %d, val score %.4f\n", r.best_epoch, r.best_val_score);
  fit_patch_head(model, train, c.train, log.logger());
  nd::save_checkpoint(model.to_checkpoint(), out / "model.ck");
  json levels = metrics_json(model, h.part(h.split.test));
  write_text(out / "metrics.json", json{{"split", "test"}, {"levels", levels}}.dump(2));
  return levels;
}

}  // namespace

int cmd_train(const RunConfig& c, const fs::path& out, bool force, const StageOptions& o) {
  Cohort h = load_cohort(c, o);
  if (o.folds == 0) {
    train_split(c, std::move(h), out, force, o);
    return 0;
  }
  claim_outputs(out, {"cv_metrics.json"}, force);
  write_text(out / "config.json", to_json(c));
  const auto splits = kfold_splits(h.all.size(), o.folds, c.seed, c.val_fraction);
  json folds = json::array();
  std::map<std::string, std::map<std::string, std::pair<double, int>>> acc;
  for (std::size_t f = 0; f < splits.size(); ++f) {
    std::printf("fold %zu of %zu\n", f + 1, splits.size());
    h.split = splits[f];
    const json levels = train_split(c, h, out / ("fold_" + std::to_string(f)), force, o);
    folds.push_back(levels);
    for (const auto& [level, r] : levels.items())
      for (const char* m : {"acc", "rec", "auc"})
        if (r.contains(m) && r[m].is_number()) {
          auto& [sum, n] = acc[level][m];
          sum += r[m].get<double>();
          ++n;
        }
  }
  json mean = json::object();
  for (const auto& [level, ms] : acc)
    for (const auto& [m, sn] : ms) mean[level][m] = sn.first / sn.second;
  write_text(out / "cv_metrics.json", json{{"folds", folds}, {"mean", mean}}.dump(2));
  return 0;
}

int cmd_fit_patch_head(const RunConfig& c, const fs::path& out, bool force, const StageOptions& o) {
  if (o.model.empty()) throw UsageError("fit-patch-head: --model is required");
  const Cohort h = load_cohort(c, o);
  auto model = model_from_checkpoint<float>(nd::load_checkpoint(o.model));
  if (!(model.config().channels == c.model.channels && model.config().hidden == c.model.hidden))
    std::fprintf(stderr, "warning: checkpoint model differs from the configured model; using the checkpoint\n");
  const bool same = fs::exists(out / "model.ck") && fs::equivalent(o.model, out / "model.ck");
  claim_outputs(out, {"model.ck", "patch_head_log.jsonl"}, force || same);
  write_text(out / "config.json", to_json(c));
  JsonlLog log(out / "patch_head_log.jsonl");
  fit_patch_head(model, h.part(h.split.train), c.train, log.logger());
  nd::save_checkpoint(model.to_checkpoint(), out / "model.ck");
  return 0;
}

int cmd_eval(const RunConfig& c, const fs::path& out, bool force, const StageOptions& o) {
  const Cohort h = load_cohort(c, o);
  std::vector<CartilageGraph> graphs;
  if (o.split == "train") graphs = h.part(h.split.train);
  else if (o.split == "val") graphs = h.part(h.split.val);
  else if (o.split == "test") graphs = h.part(h.split.test);
  else if (o.split == "all") graphs = h.all;
  else throw UsageError("eval: --split must be train, val, test or all");
  if (graphs.empty()) throw DataError("eval: the " + o.split + " split is empty");
  CsnetModel<float> model(c.model);
  if (o.model.empty()) std::fprintf(stderr, "warning: no --model given; evaluating an untrained model\n");
  else model = model_from_checkpoint<float>(nd::load_checkpoint(o.model));
  claim_outputs(out, {"eval_metrics.json"}, force);
  write_text(out / "config.json", to_json(c));
  write_text(out / "eval_metrics.json", json{{"split", o.split}, {"levels", metrics_json(model, graphs)}}.dump(2));
  return 0;
}

int cmd_ablate(const RunConfig& c, const fs::path& out, bool force, const StageOptions& o) {
  const Cohort h = load_cohort(c, o);
  claim_outputs(out, {"ablation.csv", "ablation_log.jsonl"}, force);
  write_text(out / "config.json", to_json(c));
  JsonlLog log(out / "ablation_log.jsonl");
  const auto train = h.part(h.split.train);
  std::optional<PatchCascade> cascade;
  if (!o.pretrained.empty()) cascade = load_cascade(o.pretrained, c.model);
  else if (c.train.pretrain) cascade = pretrain_patch_classifier(train, c.model, c.train, log.logger());
  const auto rows = ablate_edges(train, h.part(h.split.val), h.part(h.split.test), c.model, c.train,
                                 cascade ? &*cascade : nullptr, ablation_masks(), log.logger());
  const std::string csv = ablation_csv(rows);
  write_text(out / "ablation.csv", csv);
  std::cout << csv;
  return 0;
}

std::string attention_ply(const CartilageGraph& g, const std::vector<int>& grade_pred,
                          const std::vector<double>& attention, bool surface_edges) {
  if (grade_pred.size() != g.size() || attention.size() != g.size())
    throw UsageError("attention_ply: per-vertex arrays do not match the graph");
  std::vector<std::pair<std::uint32_t, std::uint32_t>> edges;
  if (surface_edges)
    for (std::uint32_t i = 0; i < g.size(); ++i)
      for (auto e = g.adjacency.row_ptr[i]; e < g.adjacency.row_ptr[i + 1]; ++e)
        if (g.adjacency.kinds[e] == EdgeKind::Surface && g.adjacency.cols[e] > i) edges.emplace_back(i, g.adjacency.cols[e]);
  std::ostringstream os;
  os << "ply\nformat ascii 1.0\ncomment subject " << (g.subject_id.empty() ? "unnamed" : g.subject_id) << '\n';
  os << "element vertex " << g.size() << '\n'
     << "property float x\nproperty float y\nproperty float z\n"
     << "property uchar grade_pred\nproperty float attention\nproperty uchar cartilage_id\n";
  if (surface_edges) os << "element edge " << edges.size() << "\nproperty int vertex1\nproperty int vertex2\n";
  os << "end_header\n";
  os.precision(7);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const auto& v = g.vertices[i];
    os << v.coord_mm[0] << ' ' << v.coord_mm[1] << ' ' << v.coord_mm[2] << ' ' << grade_pred[i] << ' '
       << static_cast<float>(attention[i]) << ' ' << static_cast<int>(v.cartilage_id) << '\n';
  }
  for (const auto& [a, b] : edges) os << a << ' ' << b << '\n';
  return os.str();
}

int cmd_export_attention(const RunConfig& c, const fs::path& out, bool force, const ExportOptions& o) {
  if (o.model.empty() || o.graph.empty()) throw UsageError("export-attention: --model and --graph are required");
  if (fs::exists(out) && !force) throw UsageError("output " + out.string() + " already exists (use --force to overwrite)");
  auto model = model_from_checkpoint<float>(nd::load_checkpoint(o.model));
  const CartilageGraph g = load_graph(o.graph);
  const auto in = make_graph_input<float>(g);
  const auto subject = forward_subject(model, in, whole_graph_group(g.size()));
  int k = 0;
  for (int j = 1; j < kNumClasses; ++j)
    if (subject.data[static_cast<std::size_t>(j)] > subject.data[static_cast<std::size_t>(k)]) k = j;
  const int cls = o.class_k.value_or(k);
  const auto attention = vertex_attention(model, g, cls);
  const auto patch = forward_patch(model, g);
  std::vector<int> pred(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const float* row = patch.data.data() + i * kNumClasses;
    pred[i] = static_cast<int>(std::max_element(row, row + kNumClasses) - row);
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_text(out, attention_ply(g, pred, attention, o.edges));
  write_text(fs::path(out.string() + ".config.json"), to_json(c));
  std::printf("%s: %zu vertices, subject prediction G%d, attention for class %d\n", out.string().c_str(), g.size(), k, cls);
  return 0;
}

}  // namespace csnet::cli
