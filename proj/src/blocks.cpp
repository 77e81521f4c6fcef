#include "vig/blocks.hpp"

#include <cmath>

namespace vig {

BatchNormLayer BatchNormLayer::make(const std::string& prefix, int64_t channels, DType dt) {
  BatchNormLayer bn;
  bn.gamma = {prefix + ".gamma", Tensor::ones({channels}, dt)};
  bn.beta = {prefix + ".beta", Tensor::zeros({channels}, dt)};
  bn.state = BnState::fresh(channels, dt);
  return bn;
}

Tensor BatchNormLayer::forward(const Ctx& ctx, const Tensor& x) {
  return batch_norm(x, use(ctx, gamma), use(ctx, beta), state, ctx.training);
}

void BatchNormLayer::visit_params(const ParamVisitor& fn) {
  fn(gamma.name, gamma.value);
  fn(beta.name, beta.value);
}

void BatchNormLayer::visit_buffers(const ParamVisitor& fn) {
  fn(gamma.name.substr(0, gamma.name.rfind('.')) + ".running_mean", state.running_mean);
  fn(gamma.name.substr(0, gamma.name.rfind('.')) + ".running_var", state.running_var);
}

LinearLayer LinearLayer::make(const std::string& name, int64_t in, int64_t out, Rng& rng,
                              DType dt) {
  const double std = std::sqrt(2.0 / double(in + out));
  return LinearLayer{{name + ".weight", Tensor::randn({in, out}, rng, std, dt)}};
}

Tensor residual_drop_path(const Ctx& ctx, const Tensor& branch, const Tensor& skip, int batch,
                          int64_t nodes, double rate) {
  Tensor b = branch;
  if (ctx.training && rate > 0.0) {
    if (rate >= 1.0) return skip;  // branch dropped with certainty
    if (!ctx.rng) throw ContractError("drop_path requires an rng in the context");
    const int64_t d = branch.cols2d();
    Tensor b3 = reshape_t(branch, {batch, nodes, d});
    b = reshape_t(drop_path(b3, rate, true, *ctx.rng), {batch * nodes, d});
  }
  return add(b, skip);
}

// ---------------------------------------------------------------------------

Grapher Grapher::make(const std::string& name, const GrapherConfig& cfg, Rng& rng, DType dt) {
  if (cfg.grid_h * cfg.grid_w <= 0) throw ConfigError("grapher: node grid not set");
  Grapher g;
  g.name = name;
  g.cfg = cfg;
  const int d = cfg.dim, hidden = 2 * cfg.dim;  // D_g = 2D
  g.fc_in = LinearLayer::make(name + ".fc_in", d, d, rng, dt);
  g.bn_in = BatchNormLayer::make(name + ".bn_in", d, dt);
  g.conv = GraphConvParams::create(cfg.variant, d, hidden, cfg.heads, rng, dt);
  g.bn_conv = BatchNormLayer::make(name + ".bn_conv", hidden, dt);
  g.fc_out = LinearLayer::make(name + ".fc_out", hidden, d, rng, dt);
  g.bn_out = BatchNormLayer::make(name + ".bn_out", d, dt);
  if (cfg.relative_pe) {
    const int cd = pe_code_dim(d);
    Tensor q = sincos_position_codes(cfg.grid_h, cfg.grid_w, cd, dt);
    if (cfg.reduce > 1) {
      // pooled keys sit at their cell centers in query-grid coordinates
      std::vector<std::pair<double, double>> centers;
      const double off = 0.5 * (cfg.reduce - 1);
      for (int r = 0; r < cfg.grid_h / cfg.reduce; ++r)
        for (int c = 0; c < cfg.grid_w / cfg.reduce; ++c)
          centers.emplace_back(r * cfg.reduce + off, c * cfg.reduce + off);
      g.rel_bias = relative_bias_from_codes(q, sincos_codes_at(centers, cd, dt));
    } else {
      g.rel_bias = relative_bias_from_codes(q, q);
    }
  }
  return g;
}

std::vector<Graph> Grapher::build_graphs(const Tensor& x1, int batch, Tensor* keys_out) const {
  const int n = cfg.grid_h * cfg.grid_w;
  const int d = cfg.dim;
  Tensor keys;
  if (cfg.reduce > 1) {
    Tensor x4 = reshape_t(x1, {batch, cfg.grid_h, cfg.grid_w, d});
    keys = reshape_t(avg_pool2d_nhwc(x4, cfg.reduce),
                     {int64_t(batch) * (n / (cfg.reduce * cfg.reduce)), d});
  }
  std::vector<Graph> graphs;
  graphs.reserve(static_cast<size_t>(batch));
  const Tensor xd = x1.detached();
  const Tensor kd = keys.defined() ? keys.detached() : Tensor();
  for (int b = 0; b < batch; ++b) {
    Tensor xb = Tensor::zeros({n, d}, x1.dtype());
    with_dtype(x1.dtype(), [&]<typename T>() {
      auto src = xd.data<T>();
      auto dst = xb.data<T>();
      std::copy_n(src.data() + int64_t(b) * n * d, int64_t(n) * d, dst.data());
    });
    Tensor dist;
    if (cfg.reduce > 1) {
      const int m = n / (cfg.reduce * cfg.reduce);
      Tensor kb = Tensor::zeros({m, d}, x1.dtype());
      with_dtype(x1.dtype(), [&]<typename T>() {
        auto src = kd.data<T>();
        auto dst = kb.data<T>();
        std::copy_n(src.data() + int64_t(b) * m * d, int64_t(m) * d, dst.data());
      });
      dist = pairwise_sq_distances(xb, kb);
    } else {
      dist = pairwise_sq_distances(xb);
    }
    if (rel_bias.defined()) dist = adjust_with_relative_pe(dist, rel_bias);
    graphs.push_back(cfg.reduce > 1 ? knn_graph_keys(dist, cfg.k, cfg.dilation)
                                    : knn_graph(dist, cfg.k, cfg.dilation));
  }
  if (keys_out) *keys_out = keys;
  return graphs;
}

Tensor Grapher::forward(const Ctx& ctx, const Tensor& x, int batch) {
  const int n = cfg.grid_h * cfg.grid_w;
  Tensor x1 = bn_in.forward(ctx, fc_in.forward(ctx, x));

  Tensor keys;
  std::vector<Graph> graphs = build_graphs(x1, batch, &keys);
  if (ctx.capture) {
    if (ctx.capture->seen == ctx.capture->want_block) ctx.capture->graphs = graphs;
    ctx.capture->seen++;
  }

  GraphConvParams traced_conv = conv.watched(ctx.tape, name + ".conv");
  Tensor g = aggregate(x1, graphs, traced_conv, keys.defined() ? &keys : nullptr);
  g = multi_head_update(g, traced_conv);
  g = gelu(bn_conv.forward(ctx, g));
  Tensor y = bn_out.forward(ctx, fc_out.forward(ctx, g));
  return residual_drop_path(ctx, y, x, batch, n, cfg.drop_path_rate);
}

void Grapher::visit_params(const ParamVisitor& fn) {
  fc_in.visit_params(fn);
  bn_in.visit_params(fn);
  conv.visit(name + ".conv", fn);
  bn_conv.visit_params(fn);
  fc_out.visit_params(fn);
  bn_out.visit_params(fn);
}

void Grapher::visit_buffers(const ParamVisitor& fn) {
  bn_in.visit_buffers(fn);
  bn_conv.visit_buffers(fn);
  bn_out.visit_buffers(fn);
}

// ---------------------------------------------------------------------------

Ffn Ffn::make(const std::string& name, int dim, int hidden, double drop_path, Rng& rng,
              DType dt) {
  Ffn f;
  f.name = name;
  f.dim = dim;
  f.hidden = hidden;
  f.drop_path_rate = drop_path;
  f.fc1 = LinearLayer::make(name + ".fc1", dim, hidden, rng, dt);
  f.bn1 = BatchNormLayer::make(name + ".bn1", hidden, dt);
  f.fc2 = LinearLayer::make(name + ".fc2", hidden, dim, rng, dt);
  f.bn2 = BatchNormLayer::make(name + ".bn2", dim, dt);
  return f;
}

Tensor Ffn::forward(const Ctx& ctx, const Tensor& x, int batch) {
  const int64_t nodes = x.rows2d() / batch;
  Tensor h = gelu(bn1.forward(ctx, fc1.forward(ctx, x)));
  Tensor y = bn2.forward(ctx, fc2.forward(ctx, h));
  return residual_drop_path(ctx, y, x, batch, nodes, drop_path_rate);
}

void Ffn::visit_params(const ParamVisitor& fn) {
  fc1.visit_params(fn);
  bn1.visit_params(fn);
  fc2.visit_params(fn);
  bn2.visit_params(fn);
}

void Ffn::visit_buffers(const ParamVisitor& fn) {
  bn1.visit_buffers(fn);
  bn2.visit_buffers(fn);
}

// ---------------------------------------------------------------------------

VigBlock VigBlock::make(const std::string& name, const GrapherConfig& gcfg, int ffn_ratio,
                        Rng& rng, DType dt) {
  VigBlock b;
  b.grapher = Grapher::make(name + ".grapher", gcfg, rng, dt);
  b.ffn = Ffn::make(name + ".ffn", gcfg.dim, ffn_ratio * gcfg.dim, gcfg.drop_path_rate, rng, dt);
  return b;
}

Tensor VigBlock::forward(const Ctx& ctx, const Tensor& x, int batch) {
  Tensor out = ffn.forward(ctx, grapher.forward(ctx, x, batch), batch);
  if (ctx.record_block_outputs) ctx.record_block_outputs->push_back(out.detached());
  return out;
}

void VigBlock::visit_params(const ParamVisitor& fn) {
  grapher.visit_params(fn);
  ffn.visit_params(fn);
}

void VigBlock::visit_buffers(const ParamVisitor& fn) {
  grapher.visit_buffers(fn);
  ffn.visit_buffers(fn);
}

}  // namespace vig
