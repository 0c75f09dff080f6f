#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "csnet/graph.hpp"
#include "csnet/nd/checkpoint.hpp"
#include "csnet/nd/ops.hpp"
#include "csnet/nd/tensor.hpp"

namespace csnet {

inline constexpr int kNumClasses = 3;

struct ModelConfig {
  int patch_size_px = 64;
  std::vector<int> channels{16, 32, 64, 128};  // one entry per CSCL
  int hidden = 128;                            // d_H
  int heads = 4;
  std::uint64_t seed = 0;

  int num_layers() const { return static_cast<int>(channels.size()); }
  int head_width() const { return hidden / heads; }
  // Throws UsageError (includes spatial underflow of the patch size).
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Narrower widths for single-core runs; pairs with desk_graph_config().
ModelConfig desk_model_config();

std::string to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const std::string& text);

template <typename T>
struct ConvBn {
  nd::Parameter<T> w;  // [3 * 3 * Cin, Cout]
  nd::Parameter<T> gamma, beta;
  nd::Tensor<T> running_mean, running_var;
};

template <typename T>
struct PatchStage {
  ConvBn<T> c1, c2, c3, c4;
  nd::Parameter<T> shortcut_w;  // [Cin, Cout], 1x1 stride 2
  nd::Parameter<T> shortcut_b;
  int in_channels = 1;
  int out_channels = 1;
};

template <typename T>
struct GraphConv {
  nd::Parameter<T> ln_gamma, ln_beta;
  nd::Parameter<T> w_a;           // [d_H, 3 d_H] -> Q | K | V
  nd::Parameter<T> ffn_w, ffn_b;  // [d_H, d_H]
  nd::Parameter<T> w_p, b_p;      // [C_l, d_H]
};

template <typename T>
struct Cscl {
  PatchStage<T> patch;
  GraphConv<T> graph;
};

template <typename T>
PatchStage<T> make_patch_stage(const std::string& prefix, int cin, int cout, std::mt19937_64& rng);

// NHWC [B, s, s, Cin] -> [B, ceil(s/2), ceil(s/2), Cout].
template <typename T>
nd::Var<T> patch_stage_forward(nd::Tape<T>& tape, PatchStage<T>& st, nd::Var<T> x, bool train);

// Vertex features fed to the model.
template <typename T>
struct GraphInput {
  nd::Tensor<T> patches;  // [N, p, p, 1]
  nd::Tensor<T> coords;   // [N, 3] in [-1, 1]
  std::vector<std::uint32_t> row_ptr{0};
  std::vector<std::uint32_t> cols;

  int size() const { return coords.empty() ? 0 : coords.dim(0); }
};

template <typename T>
GraphInput<T> make_graph_input(const CartilageGraph& g);

// Vertex groups for pooling: group k averages indices[offsets[k] .. offsets[k+1]).
struct Groups {
  std::vector<std::uint32_t> offsets{0};
  std::vector<std::uint32_t> indices;
  std::size_t size() const { return offsets.size() - 1; }
  void add(const std::vector<std::uint32_t>& members);
};

Groups whole_graph_group(std::size_t n);

template <typename T>
class CsnetModel {
 public:
  explicit CsnetModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }

  nd::Parameter<T> coord_w, coord_b;  // [3, d_H], [d_H]
  std::vector<Cscl<T>> layers;
  nd::Parameter<T> w_g;               // [d_H, 3], no bias
  nd::Parameter<T> patch_w, patch_b;  // [d_H, 3], [3]

  std::vector<nd::Parameter<T>*> parameters();
  std::vector<nd::Parameter<T>*> backbone_parameters();
  std::vector<nd::Parameter<T>*> patch_head_parameters();
  std::vector<std::pair<std::string, nd::Tensor<T>*>> buffers();

  // H^(L) [N, d_H].
  nd::Var<T> backbone(nd::Tape<T>& tape, const GraphInput<T>& in, bool train);
  // One H^(l) per layer, l = 0..L.
  std::vector<nd::Var<T>> backbone_trace(nd::Tape<T>& tape, const GraphInput<T>& in, bool train);
  // `attention`, when given, receives the per-edge weights [E, heads].
  nd::Var<T> graph_conv(nd::Tape<T>& tape, GraphConv<T>& gc, nd::Var<T> h_prev, nd::Var<T> x_l,
                        const GraphInput<T>& in, nd::Tensor<T>* attention = nullptr);
  // Pooled class logits [groups, 3] through w_g.
  nd::Var<T> pooled_logits(nd::Tape<T>& tape, nd::Var<T> h, const Groups& groups);
  // Per-vertex patch-head logits [N, 3].
  nd::Var<T> patch_logits(nd::Tape<T>& tape, nd::Var<T> h);

  nd::Checkpoint to_checkpoint() const;
  // Throws DataError when names or shapes disagree.
  void load_checkpoint(const nd::Checkpoint& ck);

 private:
  ModelConfig cfg_;
};

template <typename T>
CsnetModel<T> model_from_checkpoint(const nd::Checkpoint& ck);

// Inference helpers (eval-mode BN, no recording).
template <typename T>
nd::Tensor<T> forward_subject(CsnetModel<T>& m, const GraphInput<T>& in, const Groups& subjects);
template <typename T>
nd::Tensor<T> forward_slice(CsnetModel<T>& m, const CartilageGraph& g, int slice_index);
// Logits for every slice that holds vertices, keyed by slice index.
template <typename T>
std::map<int, std::vector<T>> forward_slices(CsnetModel<T>& m, const CartilageGraph& g);
template <typename T>
nd::Tensor<T> forward_patch(CsnetModel<T>& m, const CartilageGraph& g);

// a_i = <H^(L)[i], W_g[:, k]> min-max normalized; all 0.5 if degenerate.
template <typename T>
std::vector<double> vertex_attention(CsnetModel<T>& m, const CartilageGraph& g, int class_k,
                                     std::vector<double>* raw = nullptr);

}  // namespace csnet
