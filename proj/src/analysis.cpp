#include "vig/analysis.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <sstream>

namespace vig {

namespace {

int64_t tensor_params(const Tensor& t) { return t.numel(); }

int64_t visit_param_count(const std::function<void(const ParamVisitor&)>& visit) {
  int64_t n = 0;
  visit([&](const std::string&, Tensor& t) { n += tensor_params(t); });
  return n;
}

// Grapher MACs at N nodes: fc_in + distance build + aggregation + update +
// fc_out. BN/GELU/additions are not multiply-accumulates and stay uncounted.
int64_t grapher_macs(const Grapher& g, int64_t n) {
  const int64_t d = g.cfg.dim;
  const int64_t agg = g.conv.agg_dim();
  const int64_t out = 2 * d;
  const int64_t h = g.cfg.heads;
  const int64_t keys = g.cfg.reduce > 1 ? n / (int64_t(g.cfg.reduce) * g.cfg.reduce) : n;
  int64_t macs = 0;
  macs += n * d * d;      // fc_in
  macs += n * keys * d;   // pairwise squared distances
  macs += n * g.cfg.k * d;  // aggregation sweep (max/sum/mean styles)
  switch (g.conv.variant) {
    case ConvVariant::Edge:
      macs += n * g.cfg.k * (2 * d) * agg / h;  // per-edge grouped transform
      break;
    case ConvVariant::Sage:
      macs += keys * d * d;  // neighbor transform applied once to the key set
      break;
    default:
      break;
  }
  macs += n * agg * out / h;  // multi-head update
  macs += n * out * d;        // fc_out
  return macs;
}

int64_t ffn_macs(const Ffn& f, int64_t n) {
  return n * int64_t(f.dim) * f.hidden + n * int64_t(f.hidden) * f.dim;
}

int64_t conv_macs(const ConvBnLayer& c, int64_t out_h, int64_t out_w) {
  return out_h * out_w * int64_t(c.out_c) * c.kh * c.kw * c.in_c;
}

}  // namespace

ModelStats compute_stats(const Model& m) {
  ModelStats st;
  auto push = [&](const std::string& name, int64_t params, int64_t macs) {
    st.layers.push_back({name, params, macs});
    st.param_count += params;
    st.mac_count += macs;
  };

  const ModelConfig& cfg = m.cfg;
  if (cfg.kind == ModelKind::Isotropic) {
    const int64_t n = int64_t(cfg.image_h / cfg.patch) * (cfg.image_w / cfg.patch);
    int64_t p = 0;
    // patch_proj + patch_bn params
    p += m.patch_proj->w.value.numel();
    p += m.patch_bn->gamma.value.numel() + m.patch_bn->beta.value.numel();
    push("stem", p, n * (int64_t(cfg.patch) * cfg.patch * 3) * cfg.dim);
  } else {
    int64_t gh = cfg.image_h, gw = cfg.image_w;
    for (size_t i = 0; i < m.stem_convs.size(); ++i) {
      const auto& c = m.stem_convs[i];
      gh = (gh + 2 * c.pad - c.kh) / c.stride + 1;
      gw = (gw + 2 * c.pad - c.kw) / c.stride + 1;
      int64_t p = c.w.value.numel() + c.bn.gamma.value.numel() + c.bn.beta.value.numel();
      push("stem.conv" + std::to_string(i + 1), p, conv_macs(c, gh, gw));
    }
  }
  push("pos_embed", m.pos_embed.value.numel(), 0);

  for (size_t s = 0; s < m.stages.size(); ++s) {
    const Stage& stage = m.stages[s];
    const int64_t n = int64_t(stage.grid_h) * stage.grid_w;
    if (stage.downsample) {
      const auto& c = *stage.downsample;
      int64_t p = c.w.value.numel() + c.bn.gamma.value.numel() + c.bn.beta.value.numel();
      push("stage" + std::to_string(s + 1) + ".downsample", p,
           conv_macs(c, stage.grid_h, stage.grid_w));
    }
    for (size_t b = 0; b < stage.blocks.size(); ++b) {
      auto& block = const_cast<VigBlock&>(stage.blocks[b]);
      int64_t p = visit_param_count([&](const ParamVisitor& fn) { block.visit_params(fn); });
      const int64_t macs = grapher_macs(block.grapher, n) + ffn_macs(block.ffn, n);
      push("stage" + std::to_string(s + 1) + ".block" + std::to_string(b), p, macs);
    }
  }

  int64_t hp = m.head_fc1.w.value.numel() + m.head_bn.gamma.value.numel() +
               m.head_bn.beta.value.numel() + m.head_w2.value.numel() + m.head_b2.value.numel();
  const int64_t hd = m.stages.back().dim;
  push("head", hp, hd * int64_t(cfg.head_hidden) + int64_t(cfg.head_hidden) * cfg.num_classes);
  return st;
}

int64_t count_params(const Model& m) {
  auto& mm = const_cast<Model&>(m);
  return visit_param_count([&](const ParamVisitor& fn) { mm.visit_params(fn); });
}

int64_t count_macs(const Model& m, int h, int w) {
  if (h != m.cfg.image_h || w != m.cfg.image_w)
    throw ConfigError("count_macs: model was built for " + std::to_string(m.cfg.image_h) + "x" +
                      std::to_string(m.cfg.image_w) + ", rebuild it for " + std::to_string(h) +
                      "x" + std::to_string(w));
  return compute_stats(m).mac_count;
}

std::string ModelStats::to_csv() const {
  std::ostringstream os;
  os << "name,params,macs\n";
  for (const auto& l : layers) os << l.name << "," << l.params << "," << l.macs << "\n";
  os << "total," << param_count << "," << mac_count << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------

double feature_diversity(const Tensor& x) {
  const int64_t n = x.rows2d(), d = x.cols2d();
  std::vector<double> mean(static_cast<size_t>(d), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += x.at(i * d + j) / double(n);
  std::vector<double> col_sum(static_cast<size_t>(d), 0.0);
  double max_row = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double r = std::abs(x.at(i * d + j) - mean[static_cast<size_t>(j)]);
      row += r;
      col_sum[static_cast<size_t>(j)] += r;
    }
    max_row = std::max(max_row, row);
  }
  double max_col = 0.0;
  for (double c : col_sum) max_col = std::max(max_col, c);
  return std::sqrt(max_col * max_row);
}

std::string DiversityProfile::to_csv() const {
  std::ostringstream os;
  os << "layer,gamma\n";
  for (const auto& [l, g] : entries) os << l << "," << g << "\n";
  return os.str();
}

DiversityProfile diversity_profile(Model& m, const Tensor& image) {
  Ctx ctx;  // eval, untraced
  std::vector<Tensor> outputs;
  ctx.record_block_outputs = &outputs;
  (void)m.forward(image, ctx);
  DiversityProfile p;
  for (size_t i = 0; i < outputs.size(); ++i)
    p.entries.emplace_back(static_cast<int>(i + 1), feature_diversity(outputs[i]));
  return p;
}

StackConfig stack_config_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("stack config: invalid JSON: ") + e.what());
  }
  StackConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "type")
      c.type = it.value().get<std::string>();
    else if (k == "dim")
      c.dim = it.value().get<int>();
    else if (k == "nodes")
      c.nodes = it.value().get<int>();
    else if (k == "k")
      c.k = it.value().get<int>();
    else
      throw ConfigError("stack config: unknown key '" + k + "'");
  }
  if (c.type != "vig" && c.type != "bare_conv")
    throw ConfigError("stack config: type must be 'vig' or 'bare_conv'");
  return c;
}

DiversityProfile probe_stack_diversity(const StackConfig& cfg, int depth, uint64_t seed) {
  if (depth < 1) throw ConfigError("probe: depth must be >= 1");
  Rng data_rng(seed);
  Tensor x = Tensor::randn({cfg.nodes, cfg.dim}, data_rng, 1.0, DType::Float32);

  DiversityProfile profile;
  Rng init_rng(seed + 1);
  if (cfg.type == "bare_conv") {
    std::vector<GraphConvParams> layers;
    for (int l = 0; l < depth; ++l)
      layers.push_back(GraphConvParams::create(ConvVariant::MaxRelative, cfg.dim, cfg.dim, 4,
                                               init_rng, DType::Float32));
    for (int l = 0; l < depth; ++l) {
      Graph g = knn_graph(pairwise_sq_distances(x), cfg.k, 1);
      x = graph_conv(x, std::span<const Graph>(&g, 1), layers[static_cast<size_t>(l)]);
      profile.entries.emplace_back(l + 1, feature_diversity(x));
    }
    return profile;
  }

  const int grid = static_cast<int>(std::lround(std::sqrt(double(cfg.nodes))));
  if (grid * grid != cfg.nodes)
    throw ConfigError("probe: vig stack needs a square node count");
  std::vector<VigBlock> blocks;
  for (int l = 0; l < depth; ++l) {
    GrapherConfig gc;
    gc.dim = cfg.dim;
    gc.k = cfg.k;
    gc.dilation = 1;
    gc.heads = 4;
    gc.grid_h = gc.grid_w = grid;
    blocks.push_back(
        VigBlock::make("probe.block" + std::to_string(l), gc, 4, init_rng, DType::Float32));
  }
  Ctx ctx;  // eval mode: fresh running stats, deterministic
  for (int l = 0; l < depth; ++l) {
    x = blocks[static_cast<size_t>(l)].forward(ctx, x, 1);
    profile.entries.emplace_back(l + 1, feature_diversity(x));
  }
  return profile;
}

// ---------------------------------------------------------------------------

namespace {

double norm_max_1_inf(const Tensor& w) {
  const int64_t r = w.rows2d(), c = w.cols2d();
  std::vector<double> col(static_cast<size_t>(c), 0.0);
  double row_max = 0.0;
  for (int64_t i = 0; i < r; ++i) {
    double row = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double a = std::abs(w.at(i * c + j));
      row += a;
      col[static_cast<size_t>(j)] += a;
    }
    row_max = std::max(row_max, row);
  }
  double col_max = 0.0;
  for (double v : col) col_max = std::max(col_max, v);
  return std::max(col_max, row_max);
}

Tensor scale_columns(const Tensor& w, const Tensor& gamma, const Tensor& var, double eps) {
  Tensor out = w.clone();
  const int64_t r = w.rows2d(), c = w.cols2d();
  for (int64_t j = 0; j < c; ++j) {
    const double a = gamma.at(j) / std::sqrt(var.at(j) + eps);
    for (int64_t i = 0; i < r; ++i) out.set(i * c + j, out.at(i * c + j) * a);
  }
  return out;
}

}  // namespace

FoldedFfn fold_ffn_bn(const Ffn& f) {
  FoldedFfn folded;
  folded.w1 = scale_columns(f.fc1.w.value, f.bn1.gamma.value, f.bn1.state.running_var, kBnEps);
  folded.w2 = scale_columns(f.fc2.w.value, f.bn2.gamma.value, f.bn2.state.running_var, kBnEps);
  return folded;
}

double ffn_lipschitz_bound(const FoldedFfn& folded) {
  static const double l_gelu = gelu_max_derivative();
  return 1.0 + l_gelu * norm_max_1_inf(folded.w1) * norm_max_1_inf(folded.w2);
}

double ffn_lipschitz_bound(const Ffn& f, bool training) {
  if (training)
    throw ContractError("ffn_lipschitz_bound: batch-norm stats must be frozen (eval mode) "
                        "and folded before bounding");
  return ffn_lipschitz_bound(fold_ffn_bn(f));
}

// ---------------------------------------------------------------------------

namespace {

struct NamedParam {
  std::string name;
  Tensor value;  // shares the model's buffer
};

template <class VisitFn>
std::vector<NamedParam> collect(VisitFn&& visit) {
  std::vector<NamedParam> ps;
  visit([&](const std::string& n, Tensor& t) { ps.push_back({n, t}); });
  return ps;
}

GradCheckReport fd_against(const std::vector<NamedParam>& params,
                           const std::unordered_map<std::string, Tensor>& analytic,
                           const std::function<double()>& eval_loss, double step) {
  GradCheckReport rep;
  for (const auto& p : params) {
    const auto it = analytic.find(p.name);
    const Tensor ga =
        it != analytic.end() ? it->second : Tensor::zeros(p.value.shape(), p.value.dtype());
    Tensor buf = p.value;  // shared buffer; perturb in place and restore
    for (int64_t i = 0; i < buf.numel(); ++i) {
      const double orig = buf.at(i);
      buf.set(i, orig + step);
      const double lp = eval_loss();
      buf.set(i, orig - step);
      const double lm = eval_loss();
      buf.set(i, orig);
      const double numeric = (lp - lm) / (2.0 * step);
      const double err = std::abs(ga.at(i) - numeric) / std::max(1.0, std::abs(numeric));
      ++rep.checked;
      if (err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_param = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

}  // namespace

GradCheckReport block_stack_grad_check(std::vector<VigBlock>& blocks, int batch,
                                       const Tensor& x0, double step) {
  Rng proj_rng(12345);
  Tensor proj = Tensor::randn(x0.shape(), proj_rng, 1.0, x0.dtype());

  auto run = [&](GradTape* tape, const Tensor& input) {
    Ctx ctx;
    ctx.tape = tape;
    ctx.training = true;  // batch-stat BN: loss is a pure function of leaves
    Tensor x = tape ? tape->watch("__input", input) : input;
    for (auto& b : blocks) x = b.forward(ctx, x, batch);
    return sum_all(mul(x, tape ? tape->watch("__proj", proj) : proj));
  };

  GradTape tape;
  Tensor loss = run(&tape, x0);
  auto analytic = tape.backward(loss);

  std::vector<NamedParam> params;
  for (auto& b : blocks)
    b.visit_params([&](const std::string& n, Tensor& t) { params.push_back({n, t}); });
  params.push_back({"__input", x0});

  auto eval_loss = [&]() { return run(nullptr, x0).at(0); };
  return fd_against(params, analytic, eval_loss, step);
}

GradCheckReport model_grad_check(Model& m, const Tensor& images, const std::vector<int>& labels,
                                 double step) {
  auto run = [&](GradTape* tape) {
    Ctx ctx;
    ctx.tape = tape;
    ctx.training = true;
    Tensor logits = m.forward(images, ctx);
    return softmax_cross_entropy(logits, labels, 0.0);
  };

  GradTape tape;
  Tensor loss = run(&tape);
  auto analytic = tape.backward(loss);

  auto params = collect([&](const ParamVisitor& fn) { m.visit_params(fn); });
  auto eval_loss = [&]() { return run(nullptr).at(0); };
  return fd_against(params, analytic, eval_loss, step);
}

}  // namespace vig
