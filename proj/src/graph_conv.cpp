#include "vig/graph_conv.hpp"

#include <cmath>

namespace vig {

const char* variant_name(ConvVariant v) {
  switch (v) {
    case ConvVariant::MaxRelative: return "max_relative";
    case ConvVariant::MaxRelativeConcat: return "max_relative_concat";
    case ConvVariant::Edge: return "edge";
    case ConvVariant::Gin: return "gin";
    case ConvVariant::Sage: return "sage";
  }
  return "?";
}

ConvVariant variant_from_name(const std::string& s) {
  if (s == "max_relative") return ConvVariant::MaxRelative;
  if (s == "max_relative_concat") return ConvVariant::MaxRelativeConcat;
  if (s == "edge") return ConvVariant::Edge;
  if (s == "gin") return ConvVariant::Gin;
  if (s == "sage") return ConvVariant::Sage;
  throw ConfigError("unknown graph-conv variant '" + s + "'");
}

int GraphConvParams::agg_dim() const {
  switch (variant) {
    case ConvVariant::MaxRelative:
    case ConvVariant::Gin:
      return in_dim;
    case ConvVariant::MaxRelativeConcat:
    case ConvVariant::Edge:
    case ConvVariant::Sage:
      return 2 * in_dim;
  }
  return in_dim;
}

namespace {

Tensor xavier(int64_t fan_in, int64_t fan_out, Rng& rng, DType dt) {
  const double std = std::sqrt(2.0 / double(fan_in + fan_out));
  return Tensor::randn({fan_in, fan_out}, rng, std, dt);
}

}  // namespace

GraphConvParams GraphConvParams::create(ConvVariant v, int in_dim, int out_dim, int heads,
                                        Rng& rng, DType dt) {
  GraphConvParams p;
  p.variant = v;
  p.heads = heads;
  p.in_dim = in_dim;
  p.out_dim = out_dim;
  const int agg = p.agg_dim();
  if (heads < 1 || agg % heads != 0 || out_dim % heads != 0)
    throw ConfigError("graph conv: heads must divide aggregated width " + std::to_string(agg) +
                      " and output width " + std::to_string(out_dim));
  for (int t = 0; t < heads; ++t)
    p.update_weights.push_back(xavier(agg / heads, out_dim / heads, rng, dt));
  if (v == ConvVariant::Edge) {
    if ((2 * in_dim) % heads != 0)
      throw ConfigError("edge conv: heads must divide pairwise width");
    for (int t = 0; t < heads; ++t)
      p.edge_weights.push_back(xavier(2 * in_dim / heads, agg / heads, rng, dt));
  }
  if (v == ConvVariant::Sage) p.sage_neighbor_weight = xavier(in_dim, in_dim, rng, dt);
  if (v == ConvVariant::Gin) p.gin_eps = Tensor::zeros({1}, dt);
  return p;
}

GraphConvParams GraphConvParams::watched(GradTape* tape, const std::string& prefix) const {
  GraphConvParams p = *this;
  if (!tape) return p;
  for (size_t t = 0; t < p.update_weights.size(); ++t)
    p.update_weights[t] =
        tape->watch(prefix + ".head" + std::to_string(t) + ".weight", p.update_weights[t]);
  for (size_t t = 0; t < p.edge_weights.size(); ++t)
    p.edge_weights[t] =
        tape->watch(prefix + ".edge.head" + std::to_string(t) + ".weight", p.edge_weights[t]);
  if (p.sage_neighbor_weight.defined())
    p.sage_neighbor_weight = tape->watch(prefix + ".neighbor.weight", p.sage_neighbor_weight);
  if (p.gin_eps.defined()) p.gin_eps = tape->watch(prefix + ".eps", p.gin_eps);
  return p;
}

void GraphConvParams::visit(const std::string& prefix,
                            const std::function<void(const std::string&, Tensor&)>& fn) {
  for (size_t t = 0; t < update_weights.size(); ++t)
    fn(prefix + ".head" + std::to_string(t) + ".weight", update_weights[t]);
  for (size_t t = 0; t < edge_weights.size(); ++t)
    fn(prefix + ".edge.head" + std::to_string(t) + ".weight", edge_weights[t]);
  if (sage_neighbor_weight.defined()) fn(prefix + ".neighbor.weight", sage_neighbor_weight);
  if (gin_eps.defined()) fn(prefix + ".eps", gin_eps);
}

namespace {

// Flat row indices of the s-th neighbor of every (sample, node) pair; rows of
// the gather source are laid out sample-major.
std::vector<int64_t> slot_indices(std::span<const Graph> graphs, int slot) {
  std::vector<int64_t> idx;
  size_t total = 0;
  for (const Graph& g : graphs) total += static_cast<size_t>(g.num_nodes);
  idx.reserve(total);
  int64_t base = 0;
  for (const Graph& g : graphs) {
    for (int i = 0; i < g.num_nodes; ++i) idx.push_back(base + g.neighbor(i, slot));
    base += g.num_candidates;
  }
  return idx;
}

}  // namespace

Tensor aggregate(const Tensor& x, std::span<const Graph> graphs, const GraphConvParams& p,
                 const Tensor* keys) {
  if (graphs.empty()) throw ContractError("aggregate: no graphs supplied");
  int64_t rows = 0;
  int k = graphs.front().k;
  for (const Graph& g : graphs) {
    if (g.k < 1) throw ContractError("aggregate: empty neighborhood");
    if (g.k != k) throw ContractError("aggregate: graphs disagree on k");
    rows += g.num_nodes;
  }
  if (x.rows2d() != rows || x.cols2d() != p.in_dim)
    throw DimensionError("aggregate: features " + x.shape_str() + " do not match graphs/params");
  const Tensor& src = keys ? *keys : x;

  switch (p.variant) {
    case ConvVariant::MaxRelative:
    case ConvVariant::MaxRelativeConcat: {
      Tensor best;
      for (int s = 0; s < k; ++s) {
        Tensor diff = sub(x, gather_rows(src, slot_indices(graphs, s)));
        best = s == 0 ? diff : maximum_pref(best, diff);
      }
      return p.variant == ConvVariant::MaxRelative ? best : concat_cols(x, best);
    }
    case ConvVariant::Gin: {
      Tensor acc = add(x, mul_scalar_param(x, p.gin_eps));
      for (int s = 0; s < k; ++s)
        acc = add(acc, gather_rows(src, slot_indices(graphs, s)));
      return acc;
    }
    case ConvVariant::Sage: {
      Tensor transformed = matmul(src, p.sage_neighbor_weight);
      Tensor mean;
      for (int s = 0; s < k; ++s) {
        Tensor t = gather_rows(transformed, slot_indices(graphs, s));
        mean = s == 0 ? t : add(mean, t);
      }
      return concat_cols(x, scale(mean, 1.0 / k));
    }
    case ConvVariant::Edge: {
      Tensor best;
      for (int s = 0; s < k; ++s) {
        Tensor xj = gather_rows(src, slot_indices(graphs, s));
        Tensor u = concat_cols(x, sub(xj, x));
        Tensor v = gelu(multi_head_matmul(u, p.edge_weights));
        best = s == 0 ? v : maximum_pref(best, v);
      }
      return best;
    }
  }
  throw ContractError("aggregate: unreachable");
}

Tensor multi_head_update(const Tensor& x_agg, const GraphConvParams& p) {
  if (static_cast<int>(p.update_weights.size()) != p.heads)
    throw ContractError("multi_head_update: head count mismatch");
  return multi_head_matmul(x_agg, p.update_weights);
}

Tensor graph_conv(const Tensor& x, std::span<const Graph> graphs, const GraphConvParams& p,
                  const Tensor* keys) {
  return multi_head_update(aggregate(x, graphs, p, keys), p);
}

}  // namespace vig
