#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "csnet/graph.hpp"
#include "csnet/model.hpp"
#include "csnet/nd/checkpoint.hpp"
#include "csnet/nd/optim.hpp"

namespace csnet {

struct SubgraphRange {
  std::uint32_t start = 0;
  std::uint32_t length = 0;
  bool operator==(const SubgraphRange&) const = default;
};

// Block-diagonal merge of per-subject graphs.
struct GraphBatch {
  std::vector<SurfaceVertex> vertices;
  std::vector<double> coords;  // per-subject normalized, N x 3
  Adjacency adjacency;
  std::vector<SubgraphRange> ranges;
  // Per-subject header and labels; vertices and adjacency left empty.
  std::vector<CartilageGraph> headers;

  std::size_t size() const { return vertices.size(); }
  std::size_t num_subjects() const { return ranges.size(); }
  Groups subject_groups() const;
  std::vector<int> subject_labels() const;  // throws DataError if unlabeled
};

// Throws UsageError for an empty list.
GraphBatch batch_merge(const std::vector<const CartilageGraph*>& graphs);
GraphBatch batch_merge(const std::vector<CartilageGraph>& graphs);
// Throws DataError on ranges that do not tile the batch or edges that cross them.
std::vector<CartilageGraph> batch_split(const GraphBatch& b);
void check_batch(const GraphBatch& b);

template <typename T>
GraphInput<T> make_batch_input(const GraphBatch& b);

struct TrainConfig {
  double lr = 3e-4;
  double weight_decay = 1e-4;
  bool decoupled_weight_decay = false;
  int batch_size = 4;
  int subject_epochs = 40;
  bool pretrain = true;
  int pretrain_epochs = 12;
  int pretrain_max_patches = 2000;
  int pretrain_batch = 64;
  double pretrain_lr = 1e-3;
  int patch_head_epochs = 200;
  double patch_head_lr = 1e-2;
  std::uint64_t seed = 0;
  EdgeMask edge_mask;
  bool deterministic = true;

  // Throws UsageError.
  void validate() const;
  nd::AdamConfig adam(double learning_rate) const;
};

struct EpochRecord {
  std::string stage;
  int epoch = 0;
  double loss = 0;
  double lr = 0;
  double train_acc = 0;
  std::optional<double> val_acc;
  std::optional<double> val_auc;
  std::optional<double> val_slice_auc;
};

std::string to_json_line(const EpochRecord& r);
using EpochLogger = std::function<void(const EpochRecord&)>;

// Cascade of all patch stages + global pooling + temporary FC.
struct PatchCascade {
  std::vector<PatchStage<float>> stages;
  nd::Parameter<float> fc_w, fc_b;
  double train_accuracy = 0;
  std::vector<nd::Parameter<float>*> parameters();
  nd::Var<float> forward(nd::Tape<float>& tape, nd::Var<float> patches, bool train);
};

PatchCascade make_patch_cascade(const ModelConfig& mc);

// Class-balanced patch sample (up to max_patches) from labeled graphs.
// Throws DataError when a class has no patches.
PatchCascade pretrain_patch_classifier(const std::vector<CartilageGraph>& train, const ModelConfig& mc,
                                       const TrainConfig& cfg, const EpochLogger& log = {});
// Copies conv/BN weights and running statistics into the model's CSCLs.
void transplant(const PatchCascade& cascade, CsnetModel<float>& model);

nd::Checkpoint to_checkpoint(const PatchCascade& cascade, const ModelConfig& mc);
// Throws DataError on missing or unexpected tensors.
std::pair<PatchCascade, ModelConfig> cascade_from_checkpoint(const nd::Checkpoint& ck);

struct MetricsReport {
  std::string level;
  std::size_t n = 0;
  double acc = 0;
  double rec = 0;
  double auc = 0;
  std::array<std::array<std::int64_t, 3>, 3> confusion{};  // [true][pred]
};

// probs is n x 3 row-major.
MetricsReport compute_metrics(const std::vector<int>& labels, const std::vector<double>& probs,
                              const std::string& level = "");
// One-vs-rest AUC of scores for the positive set; trapezoidal over at most
// 256 thresholds (every distinct score when there are no more than 256).
double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive);
// Rank-based (Mann-Whitney) AUC.
double rank_auc(const std::vector<double>& scores, const std::vector<bool>& positive);
std::string to_json(const MetricsReport& r);

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = -1;
  // Mean of validation subject and slice AUC; subject AUC alone when slices are unlabelled.
  double best_val_score = -1;
};

TrainResult train_subject(CsnetModel<float>& model, const std::vector<CartilageGraph>& train,
                          const std::vector<CartilageGraph>& val, const TrainConfig& cfg,
                          const EpochLogger& log = {});

// Backbone frozen; fits patch_w / patch_b on patch labels.
TrainResult fit_patch_head(CsnetModel<float>& model, const std::vector<CartilageGraph>& train,
                           const TrainConfig& cfg, const EpochLogger& log = {});

enum class Level { Subject, Slice, Patch };
const char* level_name(Level l);

MetricsReport evaluate(CsnetModel<float>& model, const std::vector<CartilageGraph>& graphs, Level level);

struct Split {
  std::vector<std::size_t> train, val, test;
};
// Seeded shuffle, then 70/15/15 (rounded; test takes the remainder).
Split split_subjects(std::size_t n, std::uint64_t seed, double train_fraction = 0.70,
                     double val_fraction = 0.15);
// Seeded k-fold partition: fold f is the test set of split f and val_fraction
// of all subjects is drawn from the remaining folds. Throws UsageError.
std::vector<Split> kfold_splits(std::size_t n, int k, std::uint64_t seed, double val_fraction = 0.15);
std::vector<CartilageGraph> select(const std::vector<CartilageGraph>& all, const std::vector<std::size_t>& idx);
std::vector<CartilageGraph> apply_mask(const std::vector<CartilageGraph>& graphs, const EdgeMask& mask);

struct NamedMask {
  std::string name;
  EdgeMask mask;
};
// all, no-A_a, no-A_c, no-A_s, s-only, c-only, a-only.
std::vector<NamedMask> ablation_masks();

struct AblationRow {
  std::string mask;
  MetricsReport report;
};

// One subject-level model per mask, all starting from the same pretrained
// cascade and seed; reports on `test`.
std::vector<AblationRow> ablate_edges(const std::vector<CartilageGraph>& train,
                                      const std::vector<CartilageGraph>& val,
                                      const std::vector<CartilageGraph>& test, const ModelConfig& mc,
                                      const TrainConfig& cfg, const PatchCascade* pretrained,
                                      const std::vector<NamedMask>& masks = ablation_masks(),
                                      const EpochLogger& log = {});
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace csnet
