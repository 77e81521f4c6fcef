#include "vig/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace vig {

void Graph::validate() const {
  if (static_cast<int64_t>(neighbors.size()) != int64_t(num_nodes) * k)
    throw ContractError("graph: neighbor list length != num_nodes * k");
  for (int i = 0; i < num_nodes; ++i) {
    std::unordered_set<int32_t> seen;
    for (int s = 0; s < k; ++s) {
      const int32_t j = neighbor(i, s);
      if (j < 0 || j >= num_candidates) throw IndexError("graph: neighbor index out of range");
      if (self_excluded && j == i) throw ContractError("graph: self-loop in neighbor list");
      if (!seen.insert(j).second) throw ContractError("graph: duplicate neighbor");
    }
  }
}

Tensor pairwise_sq_distances(const Tensor& x) { return pairwise_sq_distances(x, x); }

Tensor pairwise_sq_distances(const Tensor& x, const Tensor& keys) {
  if (x.rank() != 2 || keys.rank() != 2 || x.dim(1) != keys.dim(1))
    throw DimensionError("pairwise_sq_distances: expect [N x D] and [M x D]");
  const int64_t n = x.dim(0), m = keys.dim(0), d = x.dim(1);
  Tensor out = Tensor::zeros({n, m}, x.dtype());
  with_dtype(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto py = keys.data<T>();
    auto po = out.data<T>();
    // ||x-y||^2 accumulated directly; the expansion trick loses precision on
    // near-duplicate rows, and exact zeros on identical rows matter for ties.
    for (int64_t i = 0; i < n; ++i) {
      const T* xi = px.data() + i * d;
      for (int64_t j = 0; j < m; ++j) {
        const T* yj = py.data() + j * d;
        double acc = 0.0;
        for (int64_t t = 0; t < d; ++t) {
          const double diff = double(xi[t]) - double(yj[t]);
          acc += diff * diff;
        }
        po[i * m + j] = static_cast<T>(acc);
      }
    }
  });
  return out;
}

Tensor adjust_with_relative_pe(const Tensor& m, const Tensor& bias) {
  require_same_shape(m, bias, "adjust_with_relative_pe");
  require_same_dtype(m, bias, "adjust_with_relative_pe");
  Tensor out = Tensor::zeros(m.shape(), m.dtype());
  with_dtype(m.dtype(), [&]<typename T>() {
    auto pm = m.data<T>();
    auto pb = bias.data<T>();
    auto po = out.data<T>();
    for (size_t i = 0; i < po.size(); ++i) po[i] = pm[i] + pb[i];
  });
  return out;
}

namespace {

Graph knn_impl(const Tensor& m, int k, int dilation, bool exclude_self) {
  if (m.rank() != 2) throw DimensionError("knn_graph: distance matrix must be rank 2");
  const int n = static_cast<int>(m.dim(0));
  const int cand_total = static_cast<int>(m.dim(1)) - (exclude_self ? 1 : 0);
  if (k < 1 || dilation < 1)
    throw ContractError("knn_graph: k and dilation must be positive");
  if (int64_t(k) * dilation > cand_total)
    throw ContractError("knn_graph: insufficient nodes, need k*dilation <= " +
                        std::to_string(cand_total) + " but got " +
                        std::to_string(int64_t(k) * dilation));

  Graph g;
  g.num_nodes = n;
  g.num_candidates = static_cast<int>(m.dim(1));
  g.k = k;
  g.dilation = dilation;
  g.self_excluded = exclude_self;
  g.neighbors.resize(static_cast<size_t>(n) * k);

  const int take = k * dilation;
  with_dtype(m.dtype(), [&]<typename T>() {
    auto pm = m.data<T>();
    const int64_t mc = m.dim(1);
    std::vector<int32_t> cand;
    cand.reserve(static_cast<size_t>(g.num_candidates));
    for (int i = 0; i < n; ++i) {
      cand.clear();
      for (int32_t j = 0; j < g.num_candidates; ++j)
        if (!exclude_self || j != i) cand.push_back(j);
      const T* row = pm.data() + int64_t(i) * mc;
      auto closer = [row](int32_t a, int32_t b) {
        if (row[a] != row[b]) return row[a] < row[b];
        return a < b;  // deterministic tie-break by ascending index
      };
      std::partial_sort(cand.begin(), cand.begin() + take, cand.end(), closer);
      for (int s = 0; s < k; ++s)
        g.neighbors[static_cast<size_t>(i) * k + s] = cand[static_cast<size_t>(s) * dilation];
    }
  });
  return g;
}

}  // namespace

Graph knn_graph(const Tensor& m, int k, int dilation) {
  if (m.dim(0) != m.dim(1)) throw DimensionError("knn_graph: expects a square matrix");
  return knn_impl(m, k, dilation, /*exclude_self=*/true);
}

Graph knn_graph_keys(const Tensor& m, int k, int dilation) {
  return knn_impl(m, k, dilation, /*exclude_self=*/false);
}

int dilation_for_layer(int layer) {
  if (layer < 1) throw ContractError("dilation_for_layer: layer index is 1-based");
  return (layer + 3) / 4;
}

Tensor sincos_codes_at(const std::vector<std::pair<double, double>>& coords, int dim, DType dt) {
  if (dim % 4 != 0) throw ConfigError("sincos codes need dim divisible by 4");
  const int quarter = dim / 4;
  const auto n = static_cast<int64_t>(coords.size());
  Tensor codes = Tensor::zeros({n, dim}, dt);
  // Half the channels encode the row coordinate, half the column, each as
  // interleaved sin/cos over geometric frequencies (ViT-style grid embedding).
  auto fill = [&](int64_t node, int offset, double coord) {
    for (int q = 0; q < quarter; ++q) {
      const double freq = std::pow(10000.0, -2.0 * q / (2.0 * quarter));
      codes.set(node * dim + offset + 2 * q, std::sin(coord * freq));
      codes.set(node * dim + offset + 2 * q + 1, std::cos(coord * freq));
    }
  };
  for (int64_t i = 0; i < n; ++i) {
    fill(i, 0, coords[static_cast<size_t>(i)].first);
    fill(i, 2 * quarter, coords[static_cast<size_t>(i)].second);
  }
  return codes;
}

Tensor sincos_position_codes(int gh, int gw, int dim, DType dt) {
  std::vector<std::pair<double, double>> coords;
  coords.reserve(static_cast<size_t>(gh) * gw);
  for (int r = 0; r < gh; ++r)
    for (int c = 0; c < gw; ++c) coords.emplace_back(double(r), double(c));
  return sincos_codes_at(coords, dim, dt);
}

Tensor relative_bias_from_codes(const Tensor& query_codes, const Tensor& key_codes) {
  if (query_codes.dim(1) != key_codes.dim(1))
    throw DimensionError("relative_bias_from_codes: code widths differ");
  const int64_t n = query_codes.dim(0), m = key_codes.dim(0), d = query_codes.dim(1);
  Tensor bias = Tensor::zeros({n, m}, query_codes.dtype());
  with_dtype(query_codes.dtype(), [&]<typename T>() {
    auto pq = query_codes.data<T>();
    auto pk = key_codes.data<T>();
    auto pb = bias.data<T>();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < m; ++j) {
        double dot = 0.0;
        for (int64_t t = 0; t < d; ++t) dot += double(pq[i * d + t]) * double(pk[j * d + t]);
        pb[i * m + j] = static_cast<T>(-2.0 * dot / double(d));
      }
  });
  return bias;
}

std::string graph_to_edge_list(const Graph& g) {
  std::ostringstream os;
  for (int i = 0; i < g.num_nodes; ++i)
    for (int s = 0; s < g.k; ++s) os << i << " " << g.neighbor(i, s) << " " << s << "\n";
  return os.str();
}

std::string graph_to_dot(const Graph& g) {
  std::ostringstream os;
  os << "digraph knn {\n";
  for (int i = 0; i < g.num_nodes; ++i)
    for (int s = 0; s < g.k; ++s) os << "  n" << g.neighbor(i, s) << " -> n" << i << ";\n";
  os << "}\n";
  return os.str();
}

}  // namespace vig
