#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

#include "csnet/error.hpp"
#include "csnet/pipeline.hpp"

namespace csnet {

using nd::Parameter;
using nd::Tape;
using nd::Tensor;
using nd::Var;

void TrainConfig::validate() const {
  if (!(lr > 0) || !(pretrain_lr > 0) || !(patch_head_lr > 0)) throw UsageError("train: learning rates must be positive");
  if (weight_decay < 0) throw UsageError("train: negative weight decay");
  if (batch_size < 1 || pretrain_batch < 1) throw UsageError("train: batch sizes must be >= 1");
  if (subject_epochs < 0 || pretrain_epochs < 0 || patch_head_epochs < 0) throw UsageError("train: negative epoch count");
  if (pretrain_max_patches < kNumClasses) throw UsageError("train: too few pretraining patches");
}

nd::AdamConfig TrainConfig::adam(double learning_rate) const {
  nd::AdamConfig a;
  a.lr = learning_rate;
  a.weight_decay = weight_decay;
  a.decoupled = decoupled_weight_decay;
  return a;
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::json metrics{{"train_acc", r.train_acc}};
  if (r.val_acc) metrics["val_acc"] = *r.val_acc;
  if (r.val_auc) metrics["val_auc"] = std::isnan(*r.val_auc) ? nlohmann::json(nullptr) : nlohmann::json(*r.val_auc);
  if (r.val_slice_auc)
    metrics["val_slice_auc"] = std::isnan(*r.val_slice_auc) ? nlohmann::json(nullptr) : nlohmann::json(*r.val_slice_auc);
  nlohmann::json j{{"stage", r.stage}, {"epoch", r.epoch}, {"loss", r.loss}, {"lr", r.lr}, {"metrics", metrics}};
  return j.dump();
}

const char* level_name(Level l) {
  switch (l) {
    case Level::Subject: return "subject";
    case Level::Slice: return "slice";
    case Level::Patch: return "patch";
  }
  return "?";
}

namespace {

bool finite(double v) { return std::isfinite(v); }

void check_gradients(const std::vector<Parameter<float>*>& ps) {
  for (auto* p : ps)
    for (float g : p->grad.data)
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in " + p->name);
}

int argmax3(const float* p) { return static_cast<int>(std::max_element(p, p + kNumClasses) - p); }

}  // namespace

std::vector<Parameter<float>*> PatchCascade::parameters() {
  std::vector<Parameter<float>*> out;
  for (auto& s : stages) {
    for (auto* c : {&s.c1, &s.c2, &s.c3, &s.c4}) {
      out.push_back(&c->w);
      out.push_back(&c->gamma);
      out.push_back(&c->beta);
    }
    out.push_back(&s.shortcut_w);
    out.push_back(&s.shortcut_b);
  }
  out.push_back(&fc_w);
  out.push_back(&fc_b);
  return out;
}

Var<float> PatchCascade::forward(Tape<float>& tape, Var<float> patches, bool train) {
  auto x = patches;
  for (auto& s : stages) x = patch_stage_forward(tape, s, x, train);
  return nd::linear(nd::global_avg_pool2d(x), tape.parameter(fc_w), tape.parameter(fc_b));
}

PatchCascade make_patch_cascade(const ModelConfig& mc) {
  // Same initial conv weights as a freshly built model with this config.
  CsnetModel<float> fresh(mc);
  PatchCascade c;
  for (auto& l : fresh.layers) c.stages.push_back(l.patch);
  std::mt19937_64 rng(mc.seed ^ 0x9e3779b97f4a7c15ull);
  const int cl = mc.channels.back();
  c.fc_w = Parameter<float>("pretrain.fc.w", nd::kaiming_uniform<float>({cl, kNumClasses}, cl, rng));
  c.fc_b = Parameter<float>("pretrain.fc.b", nd::uniform_bias<float>({kNumClasses}, cl, rng));
  return c;
}

PatchCascade pretrain_patch_classifier(const std::vector<CartilageGraph>& train, const ModelConfig& mc,
                                       const TrainConfig& cfg, const EpochLogger& log) {
  cfg.validate();
  std::array<std::vector<std::pair<std::size_t, std::size_t>>, kNumClasses> by_class;
  for (std::size_t gi = 0; gi < train.size(); ++gi) {
    const auto& g = train[gi];
    if (g.patch_grades.size() != g.size()) throw DataError("pretrain: graph " + g.subject_id + " lacks patch labels");
    if (g.patch_size_px != mc.patch_size_px) throw DataError("pretrain: patch size differs from model config");
    for (std::size_t v = 0; v < g.size(); ++v)
      by_class[static_cast<std::size_t>(g.patch_grades[v])].emplace_back(gi, v);
  }
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::pair<std::size_t, std::size_t>> sample;
  std::vector<int> labels;
  const std::size_t per_class = static_cast<std::size_t>(cfg.pretrain_max_patches / kNumClasses);
  for (int k = 0; k < kNumClasses; ++k) {
    auto& v = by_class[static_cast<std::size_t>(k)];
    if (v.empty()) throw DataError("pretrain: no training patches of grade " + std::to_string(k));
    std::shuffle(v.begin(), v.end(), rng);
    const std::size_t take = std::min(per_class, v.size());
    for (std::size_t i = 0; i < take; ++i) {
      sample.push_back(v[i]);
      labels.push_back(k);
    }
  }
  const int p = mc.patch_size_px;
  const std::size_t pp = static_cast<std::size_t>(p) * p;

  PatchCascade cascade = make_patch_cascade(mc);
  auto params = cascade.parameters();
  nd::Adam<float> opt(cfg.adam(cfg.pretrain_lr), params);
  std::vector<std::size_t> order(sample.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.pretrain_batch)) {
      const std::size_t nb = std::min(static_cast<std::size_t>(cfg.pretrain_batch), order.size() - b0);
      if (nb < 2) continue;
      Tensor<float> x({static_cast<int>(nb), p, p, 1});
      std::vector<int> y(nb);
      for (std::size_t i = 0; i < nb; ++i) {
        const auto [gi, vi] = sample[order[b0 + i]];
        const auto& patch = train[gi].vertices[vi].patch;
        std::copy(patch.begin(), patch.end(), x.data.begin() + static_cast<std::ptrdiff_t>(i * pp));
        y[i] = labels[order[b0 + i]];
      }
      Tape<float> tape;
      auto logits = cascade.forward(tape, tape.constant(std::move(x)), true);
      auto loss = nd::cross_entropy(logits, y);
      if (!finite(loss.value()[0])) throw NumericalError("pretrain: loss is not finite");
      tape.backward(loss);
      check_gradients(params);
      opt.step();
      opt.zero_grad();
      loss_sum += loss.value()[0] * static_cast<double>(nb);
      for (std::size_t i = 0; i < nb; ++i)
        if (argmax3(logits.value().data.data() + i * kNumClasses) == y[i]) ++correct;
    }
    EpochRecord r;
    r.stage = "pretrain";
    r.epoch = epoch;
    r.loss = loss_sum / static_cast<double>(order.size());
    r.lr = cfg.pretrain_lr;
    r.train_acc = static_cast<double>(correct) / static_cast<double>(order.size());
    cascade.train_accuracy = r.train_acc;
    if (log) log(r);
  }
  return cascade;
}

void transplant(const PatchCascade& cascade, CsnetModel<float>& model) {
  if (cascade.stages.size() != model.layers.size()) throw UsageError("transplant: layer count mismatch");
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& src = cascade.stages[l];
    auto& dst = model.layers[l].patch;
    if (src.in_channels != dst.in_channels || src.out_channels != dst.out_channels)
      throw UsageError("transplant: channel plan mismatch at layer " + std::to_string(l));
    dst = src;
  }
}

nd::Checkpoint to_checkpoint(const PatchCascade& cascade, const ModelConfig& mc) {
  CsnetModel<float> m(mc);
  transplant(cascade, m);
  nd::Checkpoint full = m.to_checkpoint();
  nd::Checkpoint ck;
  ck.meta = nlohmann::json{{"model", nlohmann::json::parse(to_json(mc))}, {"train_accuracy", cascade.train_accuracy}}.dump();
  for (auto& t : full.tensors)
    if (t.name.find(".patch.") != std::string::npos) ck.tensors.push_back(std::move(t));
  ck.tensors.push_back(nd::store(cascade.fc_w.name, cascade.fc_w.value));
  ck.tensors.push_back(nd::store(cascade.fc_b.name, cascade.fc_b.value));
  return ck;
}

std::pair<PatchCascade, ModelConfig> cascade_from_checkpoint(const nd::Checkpoint& ck) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(ck.meta);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("pretrained checkpoint: bad metadata: ") + e.what());
  }
  if (!meta.contains("model")) throw DataError("pretrained checkpoint: no model config");
  const ModelConfig mc = model_config_from_json(meta["model"].dump());
  CsnetModel<float> m(mc);
  nd::Checkpoint full = m.to_checkpoint();
  std::size_t used = 0;
  for (auto& t : full.tensors) {
    if (t.name.find(".patch.") == std::string::npos) continue;
    const auto* src = ck.find(t.name);
    if (!src) throw DataError("pretrained checkpoint: missing tensor " + t.name);
    t = *src;
    ++used;
  }
  m.load_checkpoint(full);
  PatchCascade c = make_patch_cascade(mc);
  for (std::size_t l = 0; l < m.layers.size(); ++l) c.stages[l] = m.layers[l].patch;
  const auto* w = ck.find(c.fc_w.name);
  const auto* b = ck.find(c.fc_b.name);
  if (!w || !b) throw DataError("pretrained checkpoint: missing classifier tensors");
  if (used + 2 != ck.tensors.size()) throw DataError("pretrained checkpoint: unexpected tensors");
  nd::restore(*w, c.fc_w.value);
  nd::restore(*b, c.fc_b.value);
  c.train_accuracy = meta.value("train_accuracy", 0.0);
  return {std::move(c), mc};
}

namespace {

struct Prediction {
  std::vector<double> subject;                   // 3
  std::vector<std::pair<int, std::vector<double>>> slices;  // slice index, 3
  std::vector<double> patches;                   // N x 3
};

std::vector<double> softmax_row(const float* l) {
  const float mx = *std::max_element(l, l + kNumClasses);
  std::vector<double> p(kNumClasses);
  double s = 0;
  for (int k = 0; k < kNumClasses; ++k) s += (p[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(l[k] - mx)));
  for (auto& v : p) v /= s;
  return p;
}

Prediction predict(CsnetModel<float>& model, const CartilageGraph& g, bool slices, bool patches) {
  const auto in = make_graph_input<float>(g);
  Tape<float> tape(false);
  auto h = model.backbone(tape, in, false);
  Prediction out;
  out.subject = softmax_row(model.pooled_logits(tape, h, whole_graph_group(g.size())).value().data.data());
  if (slices) {
    std::map<int, std::vector<std::uint32_t>> members;
    for (std::size_t i = 0; i < g.size(); ++i) members[g.vertices[i].slice_index].push_back(static_cast<std::uint32_t>(i));
    Groups groups;
    for (const auto& [s, idx] : members) groups.add(idx);
    const auto& lg = model.pooled_logits(tape, h, groups).value();
    std::size_t k = 0;
    for (const auto& [s, idx] : members) out.slices.emplace_back(s, softmax_row(lg.data.data() + kNumClasses * k++));
  }
  if (patches) {
    const auto& lg = model.patch_logits(tape, h).value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto p = softmax_row(lg.data.data() + kNumClasses * i);
      out.patches.insert(out.patches.end(), p.begin(), p.end());
    }
  }
  return out;
}

}  // namespace

MetricsReport evaluate(CsnetModel<float>& model, const std::vector<CartilageGraph>& graphs, Level level) {
  std::vector<int> labels;
  std::vector<double> probs;
  for (const auto& g : graphs) {
    const auto pr = predict(model, g, level == Level::Slice, level == Level::Patch);
    switch (level) {
      case Level::Subject:
        if (!g.subject_grade) throw DataError("evaluate: subject " + g.subject_id + " has no grade");
        labels.push_back(*g.subject_grade);
        probs.insert(probs.end(), pr.subject.begin(), pr.subject.end());
        break;
      case Level::Slice:
        if (static_cast<int>(g.slice_grades.size()) != g.num_slices)
          throw DataError("evaluate: subject " + g.subject_id + " has no slice grades");
        for (const auto& [s, p] : pr.slices) {
          labels.push_back(g.slice_grades[static_cast<std::size_t>(s)]);
          probs.insert(probs.end(), p.begin(), p.end());
        }
        break;
      case Level::Patch:
        if (g.patch_grades.size() != g.size()) throw DataError("evaluate: subject " + g.subject_id + " has no patch grades");
        labels.insert(labels.end(), g.patch_grades.begin(), g.patch_grades.end());
        probs.insert(probs.end(), pr.patches.begin(), pr.patches.end());
        break;
    }
  }
  return compute_metrics(labels, probs, level_name(level));
}

TrainResult train_subject(CsnetModel<float>& model, const std::vector<CartilageGraph>& train,
                          const std::vector<CartilageGraph>& val, const TrainConfig& cfg, const EpochLogger& log) {
  cfg.validate();
  if (train.empty()) throw DataError("train: empty training set");
  for (const auto& g : train)
    if (!g.subject_grade) throw DataError("train: subject " + g.subject_id + " has no grade");
  auto params = model.backbone_parameters();
  nd::Adam<float> opt(cfg.adam(cfg.lr), params);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  const bool slice_labelled = std::all_of(val.begin(), val.end(), [](const CartilageGraph& g) {
    return static_cast<int>(g.slice_grades.size()) == g.num_slices;
  });
  TrainResult result;
  nd::Checkpoint best;
  for (int epoch = 1; epoch <= cfg.subject_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    std::size_t correct = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t nb = std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - b0);
      std::vector<const CartilageGraph*> members;
      for (std::size_t i = 0; i < nb; ++i) members.push_back(&train[order[b0 + i]]);
      const GraphBatch batch = batch_merge(members);
      const auto in = make_batch_input<float>(batch);
      const auto labels = batch.subject_labels();
      Tape<float> tape;
      auto h = model.backbone(tape, in, true);
      auto logits = model.pooled_logits(tape, h, batch.subject_groups());
      auto loss = nd::cross_entropy(logits, labels);
      if (!finite(loss.value()[0]))
        throw NumericalError("train: loss is not finite at epoch " + std::to_string(epoch));
      tape.backward(loss);
      check_gradients(params);
      opt.step();
      opt.zero_grad();
      loss_sum += loss.value()[0] * static_cast<double>(nb);
      for (std::size_t i = 0; i < nb; ++i)
        if (argmax3(logits.value().data.data() + i * kNumClasses) == labels[i]) ++correct;
    }
    EpochRecord r;
    r.stage = "subject";
    r.epoch = epoch;
    r.loss = loss_sum / static_cast<double>(train.size());
    r.lr = cfg.lr;
    r.train_acc = static_cast<double>(correct) / static_cast<double>(train.size());
    if (!val.empty()) {
      const auto rep = evaluate(model, val, Level::Subject);
      r.val_acc = rep.acc;
      r.val_auc = rep.auc;
      double score = std::isnan(rep.auc) ? rep.acc : rep.auc;
      if (slice_labelled) {
        const double slice_auc = evaluate(model, val, Level::Slice).auc;
        r.val_slice_auc = slice_auc;
        if (!std::isnan(slice_auc)) score = 0.5 * (score + slice_auc);
      }
      if (score >= result.best_val_score) {
        result.best_val_score = score;
        result.best_epoch = epoch;
        best = model.to_checkpoint();
      }
    }
    result.history.push_back(r);
    if (log) log(r);
  }
  if (!val.empty() && result.best_epoch > 0) model.load_checkpoint(best);
  return result;
}

TrainResult fit_patch_head(CsnetModel<float>& model, const std::vector<CartilageGraph>& train,
                           const TrainConfig& cfg, const EpochLogger& log) {
  cfg.validate();
  const int dh = model.config().hidden;
  std::vector<float> feats;
  std::vector<int> labels;
  for (const auto& g : train) {
    if (g.patch_grades.size() != g.size()) throw DataError("fit_patch_head: subject " + g.subject_id + " has no patch labels");
    const auto in = make_graph_input<float>(g);
    Tape<float> tape(false);
    const auto& h = model.backbone(tape, in, false).value();
    feats.insert(feats.end(), h.data.begin(), h.data.end());
    labels.insert(labels.end(), g.patch_grades.begin(), g.patch_grades.end());
  }
  if (labels.empty()) throw DataError("fit_patch_head: no patches");
  const Tensor<float> x({static_cast<int>(labels.size()), dh}, std::move(feats));
  auto params = model.patch_head_parameters();
  nd::Adam<float> opt(cfg.adam(cfg.patch_head_lr), params);
  TrainResult result;
  for (int epoch = 1; epoch <= cfg.patch_head_epochs; ++epoch) {
    Tape<float> tape;
    auto logits = model.patch_logits(tape, tape.constant(x));
    auto loss = nd::cross_entropy(logits, labels);
    if (!finite(loss.value()[0])) throw NumericalError("fit_patch_head: loss is not finite");
    tape.backward(loss);
    check_gradients(params);
    opt.step();
    opt.zero_grad();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (argmax3(logits.value().data.data() + i * kNumClasses) == labels[i]) ++correct;
    EpochRecord r;
    r.stage = "patch_head";
    r.epoch = epoch;
    r.loss = loss.value()[0];
    r.lr = cfg.patch_head_lr;
    r.train_acc = static_cast<double>(correct) / static_cast<double>(labels.size());
    result.history.push_back(r);
    if (log) log(r);
  }
  return result;
}

Split split_subjects(std::size_t n, std::uint64_t seed, double train_fraction, double val_fraction) {
  if (train_fraction < 0 || val_fraction < 0 || train_fraction + val_fraction > 1)
    throw UsageError("split: fractions must be non-negative and sum to at most 1");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto ntr = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  const auto nva = std::min(n - ntr, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n))));
  Split s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(ntr));
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(ntr), idx.begin() + static_cast<std::ptrdiff_t>(ntr + nva));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(ntr + nva), idx.end());
  return s;
}

std::vector<Split> kfold_splits(std::size_t n, int k, std::uint64_t seed, double val_fraction) {
  if (k < 2 || static_cast<std::size_t>(k) > n) throw UsageError("kfold: need 2 <= k <= number of subjects");
  if (val_fraction < 0 || val_fraction >= 1) throw UsageError("kfold: val fraction must lie in [0, 1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<Split> out(static_cast<std::size_t>(k));
  for (int f = 0; f < k; ++f) {
    const std::size_t lo = n * static_cast<std::size_t>(f) / static_cast<std::size_t>(k);
    const std::size_t hi = n * static_cast<std::size_t>(f + 1) / static_cast<std::size_t>(k);
    std::vector<std::size_t> rest;
    for (std::size_t i = 0; i < n; ++i) (i >= lo && i < hi ? out[static_cast<std::size_t>(f)].test : rest).push_back(idx[i]);
    const auto nva = std::min(rest.size() - 1, static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n))));
    auto& s = out[static_cast<std::size_t>(f)];
    s.val.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(nva));
    s.train.assign(rest.begin() + static_cast<std::ptrdiff_t>(nva), rest.end());
  }
  return out;
}

std::vector<CartilageGraph> select(const std::vector<CartilageGraph>& all, const std::vector<std::size_t>& idx) {
  std::vector<CartilageGraph> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(all.at(i));
  return out;
}

std::vector<CartilageGraph> apply_mask(const std::vector<CartilageGraph>& graphs, const EdgeMask& mask) {
  std::vector<CartilageGraph> out;
  out.reserve(graphs.size());
  for (const auto& g : graphs) out.push_back(filter_edges(g, mask));
  return out;
}

std::vector<NamedMask> ablation_masks() {
  return {{"all", {true, true, true}},     {"no-A_a", {true, true, false}}, {"no-A_c", {true, false, true}},
          {"no-A_s", {false, true, true}}, {"s-only", {true, false, false}}, {"c-only", {false, true, false}},
          {"a-only", {false, false, true}}};
}

std::vector<AblationRow> ablate_edges(const std::vector<CartilageGraph>& train,
                                      const std::vector<CartilageGraph>& val,
                                      const std::vector<CartilageGraph>& test, const ModelConfig& mc,
                                      const TrainConfig& cfg, const PatchCascade* pretrained,
                                      const std::vector<NamedMask>& masks, const EpochLogger& log) {
  std::vector<AblationRow> rows;
  for (const auto& m : masks) {
    CsnetModel<float> model(mc);
    if (pretrained) transplant(*pretrained, model);
    const auto tr = apply_mask(train, m.mask);
    const auto va = apply_mask(val, m.mask);
    const auto te = apply_mask(test, m.mask);
    EpochLogger tagged;
    if (log)
      tagged = [&](const EpochRecord& r) {
        EpochRecord t = r;
        t.stage = "ablate:" + m.name;
        log(t);
      };
    train_subject(model, tr, va, cfg, tagged);
    rows.push_back({m.name, evaluate(model, te, Level::Subject)});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "mask,ACC,REC,AUC\n";
  os.precision(6);
  for (const auto& r : rows) os << r.mask << ',' << r.report.acc << ',' << r.report.rec << ',' << r.report.auc << '\n';
  return os.str();
}

}  // namespace csnet
