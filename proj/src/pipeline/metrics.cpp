#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"

#include "csnet/error.hpp"
#include "csnet/pipeline.hpp"

namespace csnet {

namespace {
constexpr std::size_t kMaxThresholds = 256;
}

double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw UsageError("roc_auc: score/label count mismatch");
  const auto npos = static_cast<double>(std::count(positive.begin(), positive.end(), true));
  const double nneg = static_cast<double>(scores.size()) - npos;
  if (npos == 0 || nneg == 0) return std::numeric_limits<double>::quiet_NaN();

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<double> uniq;
  for (std::size_t i : order)
    if (uniq.empty() || scores[i] != uniq.back()) uniq.push_back(scores[i]);
  std::vector<double> thresholds;
  if (uniq.size() <= kMaxThresholds) {
    thresholds = uniq;
  } else {
    for (std::size_t k = 0; k < kMaxThresholds; ++k) {
      const double v = uniq[k * (uniq.size() - 1) / (kMaxThresholds - 1)];
      if (thresholds.empty() || v != thresholds.back()) thresholds.push_back(v);
    }
  }

  double auc = 0, prev_tpr = 0, prev_fpr = 0, tp = 0, fp = 0;
  std::size_t cursor = 0;
  for (double t : thresholds) {
    while (cursor < order.size() && scores[order[cursor]] >= t) {
      (positive[order[cursor]] ? tp : fp) += 1;
      ++cursor;
    }
    const double tpr = tp / npos, fpr = fp / nneg;
    auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2;
    prev_tpr = tpr;
    prev_fpr = fpr;
  }
  auc += (1.0 - prev_fpr) * (1.0 + prev_tpr) / 2;
  return auc;
}

double rank_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positive[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positive[j]) continue;
      pairs += 1;
      wins += scores[i] > scores[j] ? 1.0 : scores[i] == scores[j] ? 0.5 : 0.0;
    }
  }
  return pairs > 0 ? wins / pairs : std::numeric_limits<double>::quiet_NaN();
}

MetricsReport compute_metrics(const std::vector<int>& labels, const std::vector<double>& probs,
                              const std::string& level) {
  if (probs.size() != labels.size() * kNumClasses) throw UsageError("metrics: probability table size mismatch");
  MetricsReport r;
  r.level = level;
  r.n = labels.size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= kNumClasses) throw DataError("metrics: label out of range");
    const double* p = probs.data() + i * kNumClasses;
    const int pred = static_cast<int>(std::max_element(p, p + kNumClasses) - p);
    ++r.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(pred)];
  }
  std::int64_t correct = 0;
  for (int k = 0; k < kNumClasses; ++k) correct += r.confusion[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)];
  r.acc = r.n ? static_cast<double>(correct) / static_cast<double>(r.n) : std::numeric_limits<double>::quiet_NaN();

  double rec_sum = 0, auc_sum = 0;
  int rec_n = 0, auc_n = 0;
  for (int k = 0; k < kNumClasses; ++k) {
    const auto& row = r.confusion[static_cast<std::size_t>(k)];
    const std::int64_t total = row[0] + row[1] + row[2];
    if (total == 0) continue;
    rec_sum += static_cast<double>(row[static_cast<std::size_t>(k)]) / static_cast<double>(total);
    ++rec_n;
    std::vector<double> s(labels.size());
    std::vector<bool> pos(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      s[i] = probs[i * kNumClasses + static_cast<std::size_t>(k)];
      pos[i] = labels[i] == k;
    }
    const double a = roc_auc(s, pos);
    if (!std::isnan(a)) {
      auc_sum += a;
      ++auc_n;
    }
  }
  r.rec = rec_n ? rec_sum / rec_n : std::numeric_limits<double>::quiet_NaN();
  r.auc = auc_n ? auc_sum / auc_n : std::numeric_limits<double>::quiet_NaN();
  return r;
}

std::string to_json(const MetricsReport& r) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  nlohmann::json j{{"level", r.level}, {"n", r.n}, {"acc", num(r.acc)}, {"rec", num(r.rec)}, {"auc", num(r.auc)}};
  j["confusion"] = r.confusion;
  return j.dump();
}

}  // namespace csnet
