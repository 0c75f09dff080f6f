#include "csnet/model.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

#include "csnet/error.hpp"
#include "csnet/nd/optim.hpp"

namespace csnet {

using nd::Parameter;
using nd::Tape;
using nd::Tensor;
using nd::Var;

void ModelConfig::validate() const {
  if (channels.empty()) throw UsageError("model: at least one CSCL required");
  if (hidden < 1 || heads < 1 || hidden % heads != 0)
    throw UsageError("model: hidden width must be a positive multiple of the head count");
  for (int c : channels)
    if (c < 1) throw UsageError("model: channel widths must be positive");
  int s = patch_size_px;
  for (std::size_t l = 0; l < channels.size(); ++l) {
    if (s < 2)
      throw UsageError("model: patch size " + std::to_string(patch_size_px) + " underflows after " +
                       std::to_string(l) + " layers");
    s = (s + 1) / 2;
  }
}

ModelConfig desk_model_config() {
  ModelConfig c;
  c.patch_size_px = 16;
  c.channels = {8, 16, 32, 64};
  c.hidden = 64;
  c.heads = 4;
  return c;
}

std::string to_json(const ModelConfig& c) {
  nlohmann::json j{{"patch_size_px", c.patch_size_px},
                   {"channels", c.channels},
                   {"hidden", c.hidden},
                   {"heads", c.heads},
                   {"seed", c.seed}};
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.patch_size_px = j.at("patch_size_px").get<int>();
    c.channels = j.at("channels").get<std::vector<int>>();
    c.hidden = j.at("hidden").get<int>();
    c.heads = j.at("heads").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
}

void Groups::add(const std::vector<std::uint32_t>& members) {
  indices.insert(indices.end(), members.begin(), members.end());
  offsets.push_back(static_cast<std::uint32_t>(indices.size()));
}

Groups whole_graph_group(std::size_t n) {
  Groups g;
  std::vector<std::uint32_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = static_cast<std::uint32_t>(i);
  g.add(all);
  return g;
}

namespace {

template <typename T>
ConvBn<T> make_conv_bn(const std::string& name, int cin, int cout, std::mt19937_64& rng) {
  ConvBn<T> c;
  c.w = Parameter<T>(name + ".w", nd::kaiming_uniform<T>({9 * cin, cout}, 9 * cin, rng));
  c.gamma = Parameter<T>(name + ".gamma", Tensor<T>({cout}, T(1)));
  c.beta = Parameter<T>(name + ".beta", Tensor<T>({cout}, T(0)));
  c.running_mean = Tensor<T>({cout}, T(0));
  c.running_var = Tensor<T>({cout}, T(1));
  return c;
}

template <typename T>
Var<T> conv_bn(Tape<T>& tape, ConvBn<T>& c, Var<T> x, int stride, bool train) {
  auto y = nd::conv2d(x, tape.parameter(c.w), Var<T>{}, 3, stride, 1);
  nd::BatchNormOptions opt;
  opt.train = train;
  return nd::batchnorm(y, tape.parameter(c.gamma), tape.parameter(c.beta), c.running_mean, c.running_var, opt);
}

template <typename T>
void push_conv_bn(ConvBn<T>& c, std::vector<Parameter<T>*>& out) {
  out.push_back(&c.w);
  out.push_back(&c.gamma);
  out.push_back(&c.beta);
}

template <typename T>
void push_stage(PatchStage<T>& s, std::vector<Parameter<T>*>& out) {
  for (auto* c : {&s.c1, &s.c2, &s.c3, &s.c4}) push_conv_bn(*c, out);
  out.push_back(&s.shortcut_w);
  out.push_back(&s.shortcut_b);
}

}  // namespace

template <typename T>
PatchStage<T> make_patch_stage(const std::string& prefix, int cin, int cout, std::mt19937_64& rng) {
  PatchStage<T> s;
  s.in_channels = cin;
  s.out_channels = cout;
  s.c1 = make_conv_bn<T>(prefix + ".c1", cin, cout, rng);
  s.c2 = make_conv_bn<T>(prefix + ".c2", cout, cout, rng);
  s.c3 = make_conv_bn<T>(prefix + ".c3", cout, cout, rng);
  s.c4 = make_conv_bn<T>(prefix + ".c4", cout, cout, rng);
  s.shortcut_w = Parameter<T>(prefix + ".shortcut.w", nd::kaiming_uniform<T>({cin, cout}, cin, rng));
  s.shortcut_b = Parameter<T>(prefix + ".shortcut.b", nd::uniform_bias<T>({cout}, cin, rng));
  return s;
}

template <typename T>
Var<T> patch_stage_forward(Tape<T>& tape, PatchStage<T>& st, Var<T> x, bool train) {
  const auto& xs = x.shape();
  if (xs.size() != 4 || xs[3] != st.in_channels)
    throw ShapeError("patch stage: input " + nd::shape_str(xs) + " vs " + std::to_string(st.in_channels) + " channels");
  if (xs[1] < 2 || xs[2] < 2) throw ShapeError("patch stage: spatial underflow at " + nd::shape_str(xs));
  auto y = nd::relu(conv_bn(tape, st.c1, x, 2, train));
  y = nd::relu(conv_bn(tape, st.c2, y, 1, train));
  y = nd::relu(conv_bn(tape, st.c3, y, 1, train));
  y = conv_bn(tape, st.c4, y, 1, train);
  auto sc = nd::conv2d(x, tape.parameter(st.shortcut_w), tape.parameter(st.shortcut_b), 1, 2, 0);
  return nd::relu(nd::add(y, sc));
}

template <typename T>
GraphInput<T> make_graph_input(const CartilageGraph& g) {
  GraphInput<T> in;
  const int n = static_cast<int>(g.size());
  const int p = g.patch_size_px;
  in.patches = Tensor<T>({n, p, p, 1});
  const std::size_t pp = static_cast<std::size_t>(p) * p;
  for (int i = 0; i < n; ++i) {
    const auto& patch = g.vertices[static_cast<std::size_t>(i)].patch;
    if (patch.size() != pp) throw DataError("graph input: vertex patch size mismatch");
    std::copy(patch.begin(), patch.end(), in.patches.data.begin() + static_cast<std::ptrdiff_t>(i * pp));
  }
  const auto coords = normalized_coords(g);
  in.coords = Tensor<T>({n, 3});
  std::transform(coords.begin(), coords.end(), in.coords.data.begin(), [](double v) { return static_cast<T>(v); });
  in.row_ptr = g.adjacency.row_ptr;
  in.cols = g.adjacency.cols;
  return in;
}

template <typename T>
CsnetModel<T>::CsnetModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const int dh = cfg_.hidden;
  coord_w = Parameter<T>("coord.w", nd::kaiming_uniform<T>({3, dh}, 3, rng));
  coord_b = Parameter<T>("coord.b", nd::uniform_bias<T>({dh}, 3, rng));
  int cin = 1;
  for (int l = 0; l < cfg_.num_layers(); ++l) {
    const std::string pre = "layers." + std::to_string(l);
    const int cout = cfg_.channels[static_cast<std::size_t>(l)];
    Cscl<T> c;
    c.patch = make_patch_stage<T>(pre + ".patch", cin, cout, rng);
    auto& g = c.graph;
    g.ln_gamma = Parameter<T>(pre + ".ln.gamma", Tensor<T>({dh}, T(1)));
    g.ln_beta = Parameter<T>(pre + ".ln.beta", Tensor<T>({dh}, T(0)));
    g.w_a = Parameter<T>(pre + ".w_a", nd::kaiming_uniform<T>({dh, 3 * dh}, dh, rng));
    g.ffn_w = Parameter<T>(pre + ".ffn.w", nd::kaiming_uniform<T>({dh, dh}, dh, rng));
    g.ffn_b = Parameter<T>(pre + ".ffn.b", nd::uniform_bias<T>({dh}, dh, rng));
    g.w_p = Parameter<T>(pre + ".w_p", nd::kaiming_uniform<T>({cout, dh}, cout, rng));
    g.b_p = Parameter<T>(pre + ".b_p", nd::uniform_bias<T>({dh}, cout, rng));
    layers.push_back(std::move(c));
    cin = cout;
  }
  w_g = Parameter<T>("w_g", Tensor<T>({dh, kNumClasses}, T(0)));
  patch_w = Parameter<T>("patch_head.w", Tensor<T>({dh, kNumClasses}, T(0)));
  patch_b = Parameter<T>("patch_head.b", Tensor<T>({kNumClasses}, T(0)));
}

template <typename T>
std::vector<Parameter<T>*> CsnetModel<T>::backbone_parameters() {
  std::vector<Parameter<T>*> out{&coord_w, &coord_b};
  for (auto& c : layers) {
    push_stage(c.patch, out);
    auto& g = c.graph;
    for (auto* p : {&g.ln_gamma, &g.ln_beta, &g.w_a, &g.ffn_w, &g.ffn_b, &g.w_p, &g.b_p}) out.push_back(p);
  }
  out.push_back(&w_g);
  return out;
}

template <typename T>
std::vector<Parameter<T>*> CsnetModel<T>::patch_head_parameters() {
  return {&patch_w, &patch_b};
}

template <typename T>
std::vector<Parameter<T>*> CsnetModel<T>::parameters() {
  auto out = backbone_parameters();
  out.push_back(&patch_w);
  out.push_back(&patch_b);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> CsnetModel<T>::buffers() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& s = layers[l].patch;
    const std::string pre = "layers." + std::to_string(l) + ".patch.c";
    int k = 1;
    for (auto* c : {&s.c1, &s.c2, &s.c3, &s.c4}) {
      out.emplace_back(pre + std::to_string(k) + ".running_mean", &c->running_mean);
      out.emplace_back(pre + std::to_string(k) + ".running_var", &c->running_var);
      ++k;
    }
  }
  return out;
}

template <typename T>
Var<T> CsnetModel<T>::graph_conv(Tape<T>& tape, GraphConv<T>& gc, Var<T> h_prev, Var<T> x_l,
                                 const GraphInput<T>& in, Tensor<T>* attention) {
  const int dh = cfg_.hidden;
  auto hn = nd::layernorm(h_prev, tape.parameter(gc.ln_gamma), tape.parameter(gc.ln_beta));
  auto qkv = nd::linear(hn, tape.parameter(gc.w_a), Var<T>{});
  auto q = nd::slice_cols(qkv, 0, dh);
  auto k = nd::slice_cols(qkv, dh, dh);
  auto v = nd::slice_cols(qkv, 2 * dh, dh);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg_.head_width())));
  auto scores = nd::edge_dot(q, k, in.row_ptr, in.cols, cfg_.heads, scale);
  auto alpha = nd::softmax_over_segments(scores, in.row_ptr);
  if (attention) *attention = alpha.value();
  auto msg = nd::edge_aggregate(alpha, v, in.row_ptr, in.cols);
  auto f = nd::relu(nd::linear(msg, tape.parameter(gc.ffn_w), tape.parameter(gc.ffn_b)));
  auto pooled = nd::global_avg_pool2d(x_l);
  auto proj = nd::linear(pooled, tape.parameter(gc.w_p), tape.parameter(gc.b_p));
  return nd::add(nd::add(f, proj), h_prev);
}

template <typename T>
std::vector<Var<T>> CsnetModel<T>::backbone_trace(Tape<T>& tape, const GraphInput<T>& in, bool train) {
  const int n = in.size();
  if (n == 0) throw ShapeError("csnet: empty graph");
  if (in.patches.rank() != 4 || in.patches.dim(0) != n || in.patches.dim(1) != cfg_.patch_size_px ||
      in.patches.dim(2) != cfg_.patch_size_px)
    throw ShapeError("csnet: patches " + nd::shape_str(in.patches.shape) + " do not match the model patch size " +
                     std::to_string(cfg_.patch_size_px));
  if (in.row_ptr.size() != static_cast<std::size_t>(n) + 1) throw ShapeError("csnet: adjacency size mismatch");
  std::vector<Var<T>> hs;
  auto h = nd::linear(tape.constant(in.coords), tape.parameter(coord_w), tape.parameter(coord_b));
  hs.push_back(h);
  auto x = tape.constant(in.patches);
  for (auto& layer : layers) {
    x = patch_stage_forward(tape, layer.patch, x, train);
    h = graph_conv(tape, layer.graph, h, x, in);
    hs.push_back(h);
  }
  return hs;
}

template <typename T>
Var<T> CsnetModel<T>::backbone(Tape<T>& tape, const GraphInput<T>& in, bool train) {
  return backbone_trace(tape, in, train).back();
}

template <typename T>
Var<T> CsnetModel<T>::pooled_logits(Tape<T>& tape, Var<T> h, const Groups& groups) {
  auto hg = nd::segment_mean(h, groups.offsets, groups.indices);
  return nd::linear(hg, tape.parameter(w_g), Var<T>{});
}

template <typename T>
Var<T> CsnetModel<T>::patch_logits(Tape<T>& tape, Var<T> h) {
  return nd::linear(h, tape.parameter(patch_w), tape.parameter(patch_b));
}

template <typename T>
nd::Checkpoint CsnetModel<T>::to_checkpoint() const {
  auto& self = const_cast<CsnetModel<T>&>(*this);
  nd::Checkpoint ck;
  ck.meta = to_json(cfg_);
  for (auto* p : self.parameters()) ck.tensors.push_back(nd::store(p->name, p->value));
  for (auto& [name, t] : self.buffers()) ck.tensors.push_back(nd::store(name, *t));
  return ck;
}

template <typename T>
void CsnetModel<T>::load_checkpoint(const nd::Checkpoint& ck) {
  std::size_t used = 0;
  auto take = [&](const std::string& name, Tensor<T>& dst) {
    const auto* s = ck.find(name);
    if (!s) throw DataError("checkpoint lacks tensor " + name);
    nd::restore(*s, dst);
    ++used;
  };
  for (auto* p : parameters()) take(p->name, p->value);
  for (auto& [name, t] : buffers()) take(name, *t);
  if (used != ck.tensors.size()) throw DataError("checkpoint holds tensors unknown to this model");
}

template <typename T>
CsnetModel<T> model_from_checkpoint(const nd::Checkpoint& ck) {
  CsnetModel<T> m(model_config_from_json(ck.meta));
  m.load_checkpoint(ck);
  return m;
}

template <typename T>
Tensor<T> forward_subject(CsnetModel<T>& m, const GraphInput<T>& in, const Groups& subjects) {
  Tape<T> tape(false);
  auto h = m.backbone(tape, in, false);
  return m.pooled_logits(tape, h, subjects).value();
}

namespace {

std::map<int, std::vector<std::uint32_t>> slice_members(const CartilageGraph& g) {
  std::map<int, std::vector<std::uint32_t>> out;
  for (std::size_t i = 0; i < g.size(); ++i) out[g.vertices[i].slice_index].push_back(static_cast<std::uint32_t>(i));
  return out;
}

}  // namespace

template <typename T>
std::map<int, std::vector<T>> forward_slices(CsnetModel<T>& m, const CartilageGraph& g) {
  const auto members = slice_members(g);
  Groups groups;
  for (const auto& [s, idx] : members) groups.add(idx);
  const auto in = make_graph_input<T>(g);
  Tape<T> tape(false);
  auto h = m.backbone(tape, in, false);
  const auto& logits = m.pooled_logits(tape, h, groups).value();
  std::map<int, std::vector<T>> out;
  std::size_t k = 0;
  for (const auto& [s, idx] : members) {
    out[s] = std::vector<T>(logits.data.begin() + static_cast<std::ptrdiff_t>(k * kNumClasses),
                            logits.data.begin() + static_cast<std::ptrdiff_t>((k + 1) * kNumClasses));
    ++k;
  }
  return out;
}

template <typename T>
Tensor<T> forward_slice(CsnetModel<T>& m, const CartilageGraph& g, int slice_index) {
  std::vector<std::uint32_t> idx;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.vertices[i].slice_index == slice_index) idx.push_back(static_cast<std::uint32_t>(i));
  if (idx.empty()) throw DataError("forward_slice: slice " + std::to_string(slice_index) + " has no vertices");
  Groups groups;
  groups.add(idx);
  const auto in = make_graph_input<T>(g);
  Tape<T> tape(false);
  auto h = m.backbone(tape, in, false);
  return m.pooled_logits(tape, h, groups).value();
}

template <typename T>
Tensor<T> forward_patch(CsnetModel<T>& m, const CartilageGraph& g) {
  const auto in = make_graph_input<T>(g);
  Tape<T> tape(false);
  auto h = m.backbone(tape, in, false);
  return m.patch_logits(tape, h).value();
}

template <typename T>
std::vector<double> vertex_attention(CsnetModel<T>& m, const CartilageGraph& g, int class_k,
                                     std::vector<double>* raw) {
  if (class_k < 0 || class_k >= kNumClasses) throw UsageError("vertex_attention: class out of range");
  const auto in = make_graph_input<T>(g);
  Tape<T> tape(false);
  const auto& h = m.backbone(tape, in, false).value();
  const int n = h.dim(0), dh = h.dim(1);
  std::vector<double> a(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    double s = 0;
    for (int d = 0; d < dh; ++d)
      s += static_cast<double>(h.data[static_cast<std::size_t>(i) * dh + d]) *
           m.w_g.value.data[static_cast<std::size_t>(d) * kNumClasses + class_k];
    a[static_cast<std::size_t>(i)] = s;
  }
  if (raw) *raw = a;
  const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
  const double mn = *lo, mx = *hi;
  for (auto& v : a) v = mx > mn ? (v - mn) / (mx - mn) : 0.5;
  return a;
}

#define CSNET_MODEL_INSTANTIATE(T)                                                                  \
  template class CsnetModel<T>;                                                                     \
  template PatchStage<T> make_patch_stage<T>(const std::string&, int, int, std::mt19937_64&);       \
  template Var<T> patch_stage_forward(Tape<T>&, PatchStage<T>&, Var<T>, bool);                      \
  template GraphInput<T> make_graph_input<T>(const CartilageGraph&);                                \
  template CsnetModel<T> model_from_checkpoint<T>(const nd::Checkpoint&);                           \
  template Tensor<T> forward_subject(CsnetModel<T>&, const GraphInput<T>&, const Groups&);          \
  template Tensor<T> forward_slice(CsnetModel<T>&, const CartilageGraph&, int);                     \
  template std::map<int, std::vector<T>> forward_slices(CsnetModel<T>&, const CartilageGraph&);     \
  template Tensor<T> forward_patch(CsnetModel<T>&, const CartilageGraph&);                          \
  template std::vector<double> vertex_attention(CsnetModel<T>&, const CartilageGraph&, int,         \
                                                std::vector<double>*);

CSNET_MODEL_INSTANTIATE(float)
CSNET_MODEL_INSTANTIATE(double)

}  // namespace csnet
