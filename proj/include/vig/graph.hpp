#pragma once

#include <cstdint>
#include <vector>

#include "vig/tensor.hpp"

namespace vig {

// Directed neighbor lists over patch nodes: edge (j -> i) for every j in the
// list of node i. `neighbors` is row-major [num_nodes x k]. When the graph was
// built against a pooled key set, indices refer to key rows instead of node
// rows and self-exclusion does not apply.
struct Graph {
  int num_nodes = 0;
  int num_candidates = 0;  // == num_nodes for plain graphs, key count otherwise
  int k = 0;
  int dilation = 1;
  bool self_excluded = true;
  std::vector<int32_t> neighbors;

  int32_t neighbor(int node, int slot) const {
    return neighbors[static_cast<size_t>(node) * k + slot];
  }
  // Throws on any violated structural invariant.
  void validate() const;
};

// M[i][j] = ||x_i - x_j||_2^2 over the rows of X [N x D]. Symmetric, zero diag.
// Never traced: graph structure is treated as non-differentiable.
Tensor pairwise_sq_distances(const Tensor& x);

// Rectangular variant against a separate key set: out[i][j] = ||x_i - y_j||^2.
Tensor pairwise_sq_distances(const Tensor& x, const Tensor& keys);

// M + bias, elementwise; the relative-positional adjustment of the distance
// matrix used by pyramid models before neighbor selection.
Tensor adjust_with_relative_pe(const Tensor& m, const Tensor& bias);

// Select neighbors from a square distance matrix: sort candidates j != i by
// (M[i][j], j) ascending, keep the first k*dilation, then take every
// dilation-th starting at offset 0.
Graph knn_graph(const Tensor& m, int k, int dilation);

// Same selection over a rectangular [N x M_keys] matrix; no self-exclusion.
Graph knn_graph_keys(const Tensor& m, int k, int dilation);

// Dilated rate ceil(l/4) for the 1-based layer index l.
int dilation_for_layer(int layer);

// Fixed 2D sin/cos position codes for an gh x gw grid, one row per node in
// row-major grid order; dim must be divisible by 4. Used (not learned) for the
// relative positional bias.
Tensor sincos_position_codes(int gh, int gw, int dim, DType dt = DType::Float32);

// Codes at arbitrary (row, col) coordinates; pooled key grids sit at their
// cell centers in the query grid's coordinate system.
Tensor sincos_codes_at(const std::vector<std::pair<double, double>>& coords, int dim,
                       DType dt = DType::Float32);

// Smallest multiple of 4 that is >= dim (sin/cos packing needs dim % 4 == 0).
inline int pe_code_dim(int dim) { return ((dim + 3) / 4) * 4; }

// bias[i][j] = -2 * (e_i . e_j) / dim, so adding it to the feature distance
// pulls positionally similar nodes closer. Query codes may be on a finer grid
// than key codes (pooled keys).
Tensor relative_bias_from_codes(const Tensor& query_codes, const Tensor& key_codes);

// Edge-list export, one line "i j rank" per edge: node i's rank-th neighbor
// is j (the edge itself is directed j -> i).
std::string graph_to_edge_list(const Graph& g);
// GraphViz digraph of the same edges.
std::string graph_to_dot(const Graph& g);

}  // namespace vig
