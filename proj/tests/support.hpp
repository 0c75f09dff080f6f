#pragma once

#include <algorithm>
#include <random>
#include <set>
#include <vector>

#include "csnet/graph.hpp"
#include "csnet/model.hpp"
#include "csnet/phantom.hpp"

namespace testing {

inline csnet::CartilageGraph phantom_graph(std::uint64_t seed, int grade, int slices = 8,
                                           csnet::Laterality lat = csnet::Laterality::Left) {
  csnet::PhantomSpec s;
  s.seed = seed;
  s.dims = {slices, 150, 150};
  s.laterality = lat;
  s.n_defects = grade > 0 ? 1 : 0;
  s.defect_grade = grade == 2 ? csnet::DefectGrade::G2 : csnet::DefectGrade::G1;
  s.slice_span = std::min(3, slices - 2);
  const auto p = csnet::generate_phantom_with_retry(s);
  const auto cfg = csnet::desk_graph_config();
  auto g = csnet::build_graph(p.volume, cfg, "t" + std::to_string(seed));
  csnet::attach_ground_truth(g, p.volume, p.truth, cfg);
  return g;
}

// Symmetric random adjacency with self loops; kinds are arbitrary non-self.
inline csnet::Adjacency random_adjacency(std::mt19937_64& rng, int n, double density) {
  std::bernoulli_distribution edge(density);
  std::vector<std::set<std::uint32_t>> nb(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    nb[static_cast<std::size_t>(i)].insert(static_cast<std::uint32_t>(i));
    for (int j = i + 1; j < n; ++j)
      if (edge(rng)) {
        nb[static_cast<std::size_t>(i)].insert(static_cast<std::uint32_t>(j));
        nb[static_cast<std::size_t>(j)].insert(static_cast<std::uint32_t>(i));
      }
  }
  csnet::Adjacency a;
  for (int i = 0; i < n; ++i) {
    for (auto j : nb[static_cast<std::size_t>(i)]) {
      a.cols.push_back(j);
      a.kinds.push_back(j == static_cast<std::uint32_t>(i) ? csnet::EdgeKind::SelfLoop : csnet::EdgeKind::Surface);
    }
    a.row_ptr.push_back(static_cast<std::uint32_t>(a.cols.size()));
  }
  return a;
}

template <typename T>
csnet::GraphInput<T> random_input(std::mt19937_64& rng, int n, int patch, double density) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  csnet::GraphInput<T> in;
  in.patches = csnet::nd::Tensor<T>({n, patch, patch, 1});
  for (auto& v : in.patches.data) v = static_cast<T>(u(rng));
  in.coords = csnet::nd::Tensor<T>({n, 3});
  for (auto& v : in.coords.data) v = static_cast<T>(u(rng));
  const auto a = random_adjacency(rng, n, density);
  in.row_ptr = a.row_ptr;
  in.cols = a.cols;
  return in;
}

// Random labeled graph with valid block structure for batching tests.
inline csnet::CartilageGraph random_graph(std::mt19937_64& rng, int n, int patch, int grade) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  csnet::CartilageGraph g;
  g.subject_id = "r" + std::to_string(n);
  g.patch_size_px = patch;
  g.inter_slice_spacing_mm = 4.5;
  g.num_slices = 4;
  g.fov = {0, 3, 0, 100, 0, 100};
  for (int i = 0; i < n; ++i) {
    csnet::SurfaceVertex v;
    v.cartilage_id = static_cast<std::uint8_t>(i % 3);
    v.slice_index = i % 4;
    v.coord_mm = {static_cast<float>(v.slice_index * 4.5), 100 * u(rng), 100 * u(rng)};
    v.arc_pos_mm = static_cast<float>(i);
    v.patch.resize(static_cast<std::size_t>(patch * patch));
    for (auto& x : v.patch) x = u(rng);
    g.vertices.push_back(std::move(v));
  }
  g.adjacency = random_adjacency(rng, n, 0.3);
  g.subject_grade = grade;
  g.slice_grades.assign(4, 0);
  g.patch_grades.assign(static_cast<std::size_t>(n), 0);
  return g;
}

inline csnet::ModelConfig tiny_model_config(int hidden = 16) {
  csnet::ModelConfig c;
  c.patch_size_px = 16;
  c.channels = {2, 3, 4, 4};
  c.hidden = hidden;
  c.heads = 4;
  c.seed = 3;
  return c;
}

}  // namespace testing

namespace testing {

template <typename T>
void randomize(csnet::nd::Parameter<T>& p, std::mt19937_64& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& v : p.value.data) v = static_cast<T>(u(rng));
}

// Zero-initialized heads make many checks vacuous; give them values.
template <typename T>
void randomize_heads(csnet::CsnetModel<T>& m, std::mt19937_64& rng) {
  randomize(m.w_g, rng);
  randomize(m.patch_w, rng);
  randomize(m.patch_b, rng);
}

template <typename T>
csnet::GraphInput<T> permuted(const csnet::GraphInput<T>& in, const std::vector<std::uint32_t>& perm) {
  // perm[new] = old
  const int n = in.size();
  std::vector<std::uint32_t> inv(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inv[perm[k]] = static_cast<std::uint32_t>(k);
  csnet::GraphInput<T> out;
  out.patches = in.patches;
  out.coords = in.coords;
  const std::size_t pp = in.patches.numel() / static_cast<std::size_t>(n);
  for (int k = 0; k < n; ++k) {
    const auto o = perm[static_cast<std::size_t>(k)];
    std::copy_n(in.patches.data.begin() + static_cast<std::ptrdiff_t>(o * pp), pp,
                out.patches.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(k) * pp));
    std::copy_n(in.coords.data.begin() + 3 * o, 3, out.coords.data.begin() + 3 * k);
    std::vector<std::uint32_t> row;
    for (auto e = in.row_ptr[o]; e < in.row_ptr[o + 1]; ++e) row.push_back(inv[in.cols[e]]);
    std::sort(row.begin(), row.end());
    out.cols.insert(out.cols.end(), row.begin(), row.end());
    out.row_ptr.push_back(static_cast<std::uint32_t>(out.cols.size()));
  }
  return out;
}

}  // namespace testing
