#pragma once

#include <span>
#include <string>
#include <vector>

#include "vig/graph.hpp"
#include "vig/ops.hpp"
#include "vig/tape.hpp"

namespace vig {

enum class ConvVariant { MaxRelative, MaxRelativeConcat, Edge, Gin, Sage };

const char* variant_name(ConvVariant v);
ConvVariant variant_from_name(const std::string& s);

// Weights for one graph-convolution layer mapping in_dim -> out_dim through a
// variant-specific aggregation of width agg_dim(). All variants share the
// multi-head update; the extras (edge transform, sage neighbor transform, gin
// epsilon) belong to the aggregation side.
struct GraphConvParams {
  ConvVariant variant = ConvVariant::MaxRelativeConcat;
  int heads = 1;
  int in_dim = 0;
  int out_dim = 0;
  std::vector<Tensor> update_weights;  // heads x [agg_dim/h, out_dim/h]
  std::vector<Tensor> edge_weights;    // Edge only: heads x [2*in/h, agg/h]
  Tensor sage_neighbor_weight;         // Sage only: [in, in]
  Tensor gin_eps;                      // Gin only: [1], learnable

  int agg_dim() const;

  static GraphConvParams create(ConvVariant v, int in_dim, int out_dim, int heads, Rng& rng,
                                DType dt);

  // Copy whose tensors are watched on the tape under `prefix`; identity when
  // tape is null.
  GraphConvParams watched(GradTape* tape, const std::string& prefix) const;
  // Enumerate named parameters as "<prefix>.<leaf>".
  void visit(const std::string& prefix,
             const std::function<void(const std::string&, Tensor&)>& fn);
};

// Variant aggregation over per-sample graphs. x is [B*N, D] with
// graphs.size() == B; when `keys` is given (pooled key sets, [B*M, D]) the
// neighbor indices of each graph refer to key rows.
Tensor aggregate(const Tensor& x, std::span<const Graph> graphs, const GraphConvParams& p,
                 const Tensor* keys = nullptr);

// Split columns into h heads, update each with its own weight, concatenate.
Tensor multi_head_update(const Tensor& x_agg, const GraphConvParams& p);

// multi_head_update(aggregate(x)).
Tensor graph_conv(const Tensor& x, std::span<const Graph> graphs, const GraphConvParams& p,
                  const Tensor* keys = nullptr);

}  // namespace vig
