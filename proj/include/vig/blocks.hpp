#pragma once

#include <functional>
#include <optional>
#include <string>

#include "vig/graph_conv.hpp"

namespace vig {

// Captured per-sample graphs from one grapher during a forward pass.
struct GraphCapture {
  int want_block = -1;  // global block index to capture
  int seen = 0;         // incremented by each grapher
  std::vector<Graph> graphs;
};

// Per-forward execution context. Train mode mutates BN running stats, so a
// model instance must not be shared across concurrent train forwards.
struct Ctx {
  GradTape* tape = nullptr;
  bool training = false;
  Rng* rng = nullptr;
  GraphCapture* capture = nullptr;
  // When set, every ViG block appends its (detached) output here.
  std::vector<Tensor>* record_block_outputs = nullptr;
};

struct Param {
  std::string name;
  Tensor value;
};

inline Tensor use(const Ctx& ctx, const Param& p) {
  return ctx.tape ? ctx.tape->watch(p.name, p.value) : p.value;
}

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

struct BatchNormLayer {
  Param gamma, beta;
  BnState state;

  static BatchNormLayer make(const std::string& prefix, int64_t channels, DType dt);
  Tensor forward(const Ctx& ctx, const Tensor& x);
  void visit_params(const ParamVisitor& fn);
  void visit_buffers(const ParamVisitor& fn);
};

struct LinearLayer {
  Param w;  // [in, out], no bias (BN follows every FC in ViG blocks)

  static LinearLayer make(const std::string& name, int64_t in, int64_t out, Rng& rng, DType dt);
  Tensor forward(const Ctx& ctx, const Tensor& x) { return matmul(x, use(ctx, w)); }
  void visit_params(const ParamVisitor& fn) { fn(w.name, w.value); }
};

// ---------------------------------------------------------------------------
// Grapher: fc -> BN -> dynamic graph conv -> BN -> GELU -> fc -> BN,
// stochastic-depth residual. The KNN graph is rebuilt from the post-fc_in
// features on every call; distances are never differentiated through.
// ---------------------------------------------------------------------------
struct GrapherConfig {
  int dim = 0;
  int k = 0;
  int dilation = 1;
  double drop_path_rate = 0.0;
  ConvVariant variant = ConvVariant::MaxRelativeConcat;
  int heads = 4;
  int grid_h = 0, grid_w = 0;  // node grid; grid_h*grid_w == N
  int reduce = 1;              // pooled-key ratio (1 = plain KNN over nodes)
  bool relative_pe = false;
};

struct Grapher {
  std::string name;
  GrapherConfig cfg;
  LinearLayer fc_in;
  BatchNormLayer bn_in;
  GraphConvParams conv;
  BatchNormLayer bn_conv;
  LinearLayer fc_out;
  BatchNormLayer bn_out;
  Tensor rel_bias;  // fixed [N, M]; defined iff cfg.relative_pe

  static Grapher make(const std::string& name, const GrapherConfig& cfg, Rng& rng, DType dt);
  // x: [B*N, dim]; returns same shape. Graphs are built per sample.
  Tensor forward(const Ctx& ctx, const Tensor& x, int batch);
  void visit_params(const ParamVisitor& fn);
  void visit_buffers(const ParamVisitor& fn);

  // Graph construction alone (also used by capture/export): returns one graph
  // per sample plus the traced pooled keys when cfg.reduce > 1.
  std::vector<Graph> build_graphs(const Tensor& x1, int batch, Tensor* keys_out) const;
};

// ---------------------------------------------------------------------------
// FFN: fc1 -> BN -> GELU -> fc2 -> BN, stochastic-depth residual.
// ---------------------------------------------------------------------------
struct Ffn {
  std::string name;
  int dim = 0;
  int hidden = 0;
  double drop_path_rate = 0.0;
  LinearLayer fc1;
  BatchNormLayer bn1;
  LinearLayer fc2;
  BatchNormLayer bn2;

  static Ffn make(const std::string& name, int dim, int hidden, double drop_path, Rng& rng,
                  DType dt);
  Tensor forward(const Ctx& ctx, const Tensor& x, int batch);
  void visit_params(const ParamVisitor& fn);
  void visit_buffers(const ParamVisitor& fn);
};

struct VigBlock {
  Grapher grapher;
  Ffn ffn;

  static VigBlock make(const std::string& name, const GrapherConfig& gcfg, int ffn_ratio,
                       Rng& rng, DType dt);
  Tensor forward(const Ctx& ctx, const Tensor& x, int batch);
  void visit_params(const ParamVisitor& fn);
  void visit_buffers(const ParamVisitor& fn);
};

// Residual branch wrapper shared by Grapher and Ffn: applies stochastic depth
// and the skip connection. rate == 1 in train mode drops the branch entirely.
Tensor residual_drop_path(const Ctx& ctx, const Tensor& branch, const Tensor& skip, int batch,
                          int64_t nodes, double rate);

}  // namespace vig
