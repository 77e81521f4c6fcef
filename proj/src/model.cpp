#include "vig/model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <set>
#include <sstream>

namespace vig {

using nlohmann::json;

void ModelConfig::validate() const {
  if (image_h < 1 || image_w < 1) throw ConfigError("config.image: extents must be positive");
  if (num_classes < 2) throw ConfigError("config.num_classes: need at least 2");
  if (heads < 1) throw ConfigError("config.heads: must be >= 1");
  if (drop_path_rate < 0.0 || drop_path_rate > 1.0)
    throw ConfigError("config.drop_path: must lie in [0, 1]");
  if (ffn_ratio < 1) throw ConfigError("config.ffn_ratio: must be >= 1");
  if (kind == ModelKind::Isotropic) {
    if (patch < 1) throw ConfigError("config.patch: must be positive");
    if (image_h % patch != 0 || image_w % patch != 0)
      throw ConfigError("config.image: " + std::to_string(image_h) + "x" +
                        std::to_string(image_w) + " not divisible by patch size " +
                        std::to_string(patch));
    if (depth < 2) throw ConfigError("config.depth: isotropic depth must be >= 2");
    if (dim < heads) throw ConfigError("config.dim: smaller than head count");
    if (k_min < 1 || k_max < k_min) throw ConfigError("config.k_min/k_max: invalid range");
  } else {
    if (stage_dims.empty() || stage_dims.size() != stage_depths.size())
      throw ConfigError("config.stage_dims/stage_depths: must be non-empty and equal length");
    const int div = 4 << (static_cast<int>(stage_dims.size()) - 1);
    if (image_h % div != 0 || image_w % div != 0)
      throw ConfigError("config.image: " + std::to_string(image_h) + "x" +
                        std::to_string(image_w) + " not divisible by " + std::to_string(div) +
                        " required by " + std::to_string(stage_dims.size()) + " stages");
    if (k < 1) throw ConfigError("config.k: must be positive");
    for (int d : stage_depths)
      if (d < 1) throw ConfigError("config.stage_depths: entries must be >= 1");
  }
}

int k_schedule(int layer, int depth, int k_min, int k_max) {
  if (depth < 2) throw ContractError("k_schedule: depth must be >= 2");
  if (layer < 1 || layer > depth) throw ContractError("k_schedule: layer out of range");
  const double v = k_min + double(k_max - k_min) * double(layer - 1) / double(depth - 1);
  return static_cast<int>(std::lround(v));
}

ModelConfig preset_config(const std::string& name) {
  ModelConfig c;
  c.preset = name;
  auto iso = [&](int depth, int dim) {
    c.kind = ModelKind::Isotropic;
    c.depth = depth;
    c.dim = dim;
  };
  auto pyr = [&](std::vector<int> dims, std::vector<int> depths) {
    c.kind = ModelKind::Pyramid;
    c.stage_dims = std::move(dims);
    c.stage_depths = std::move(depths);
  };
  if (name == "vig-ti")
    iso(12, 192);
  else if (name == "vig-s")
    iso(16, 320);
  else if (name == "vig-b")
    iso(16, 640);
  else if (name == "pvig-ti")
    pyr({48, 96, 240, 384}, {2, 2, 6, 2});
  else if (name == "pvig-s")
    pyr({80, 160, 400, 640}, {2, 2, 6, 2});
  else if (name == "pvig-m")
    pyr({96, 192, 384, 768}, {2, 2, 16, 2});
  else if (name == "pvig-b")
    pyr({128, 256, 512, 1024}, {2, 2, 18, 2});
  else if (name == "micro") {
    iso(2, 8);
    c.image_h = c.image_w = 12;
    c.patch = 4;  // 3x3 node grid
    c.k_min = c.k_max = 3;
    c.heads = 2;
    c.num_classes = 4;
    c.head_hidden = 16;
  } else
    throw ConfigError("unknown preset '" + name + "'");
  return c;
}

std::vector<std::string> preset_names() {
  return {"vig-ti", "vig-s", "vig-b", "pvig-ti", "pvig-s", "pvig-m", "pvig-b", "micro"};
}

std::optional<std::pair<double, double>> preset_reference_numbers(const std::string& name) {
  if (name == "vig-ti") return {{7.1, 1.3}};
  if (name == "vig-s") return {{22.7, 4.5}};
  if (name == "vig-b") return {{86.8, 17.7}};
  if (name == "pvig-ti") return {{10.7, 1.7}};
  if (name == "pvig-s") return {{27.3, 4.6}};
  if (name == "pvig-m") return {{51.7, 8.9}};
  if (name == "pvig-b") return {{92.6, 16.8}};
  return std::nullopt;
}

ModelConfig config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  static const std::set<std::string> known = {
      "kind",        "preset",      "image",       "num_classes", "dtype",
      "variant",     "heads",       "drop_path",   "seed",        "head_hidden",
      "ffn_ratio",   "depth",       "dim",         "patch",       "k_min",
      "k_max",       "stage_dims",  "stage_depths", "k",          "reduce_ratios",
      "relative_pe"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("config: unknown key '" + it.key() + "'");

  ModelConfig c;
  if (j.contains("preset")) c = preset_config(j.at("preset").get<std::string>());
  try {
    if (j.contains("kind")) {
      const auto k = j.at("kind").get<std::string>();
      if (k == "isotropic")
        c.kind = ModelKind::Isotropic;
      else if (k == "pyramid")
        c.kind = ModelKind::Pyramid;
      else
        throw ConfigError("config.kind: expected 'isotropic' or 'pyramid'");
    }
    if (j.contains("image")) {
      if (j.at("image").is_array()) {
        c.image_h = j.at("image").at(0).get<int>();
        c.image_w = j.at("image").at(1).get<int>();
      } else {
        c.image_h = c.image_w = j.at("image").get<int>();
      }
    }
    if (j.contains("num_classes")) c.num_classes = j.at("num_classes").get<int>();
    if (j.contains("dtype")) {
      const auto d = j.at("dtype").get<std::string>();
      if (d == "f32")
        c.dtype = DType::Float32;
      else if (d == "f64")
        c.dtype = DType::Float64;
      else
        throw ConfigError("config.dtype: expected 'f32' or 'f64'");
    }
    if (j.contains("variant")) c.variant = variant_from_name(j.at("variant").get<std::string>());
    if (j.contains("heads")) c.heads = j.at("heads").get<int>();
    if (j.contains("drop_path")) c.drop_path_rate = j.at("drop_path").get<double>();
    if (j.contains("seed")) c.init_seed = j.at("seed").get<uint64_t>();
    if (j.contains("head_hidden")) c.head_hidden = j.at("head_hidden").get<int>();
    if (j.contains("ffn_ratio")) c.ffn_ratio = j.at("ffn_ratio").get<int>();
    if (j.contains("depth")) c.depth = j.at("depth").get<int>();
    if (j.contains("dim")) c.dim = j.at("dim").get<int>();
    if (j.contains("patch")) c.patch = j.at("patch").get<int>();
    if (j.contains("k_min")) c.k_min = j.at("k_min").get<int>();
    if (j.contains("k_max")) c.k_max = j.at("k_max").get<int>();
    if (j.contains("stage_dims")) c.stage_dims = j.at("stage_dims").get<std::vector<int>>();
    if (j.contains("stage_depths")) c.stage_depths = j.at("stage_depths").get<std::vector<int>>();
    if (j.contains("k")) c.k = j.at("k").get<int>();
    if (j.contains("reduce_ratios"))
      c.reduce_ratios = j.at("reduce_ratios").get<std::vector<int>>();
    if (j.contains("relative_pe")) c.relative_pe = j.at("relative_pe").get<bool>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string config_to_json(const ModelConfig& c) {
  json j;
  j["kind"] = c.kind == ModelKind::Isotropic ? "isotropic" : "pyramid";
  if (!c.preset.empty()) j["preset"] = c.preset;
  j["image"] = {c.image_h, c.image_w};
  j["num_classes"] = c.num_classes;
  j["dtype"] = c.dtype == DType::Float32 ? "f32" : "f64";
  j["variant"] = variant_name(c.variant);
  j["heads"] = c.heads;
  j["drop_path"] = c.drop_path_rate;
  j["seed"] = c.init_seed;
  j["head_hidden"] = c.head_hidden;
  j["ffn_ratio"] = c.ffn_ratio;
  if (c.kind == ModelKind::Isotropic) {
    j["depth"] = c.depth;
    j["dim"] = c.dim;
    j["patch"] = c.patch;
    j["k_min"] = c.k_min;
    j["k_max"] = c.k_max;
  } else {
    j["stage_dims"] = c.stage_dims;
    j["stage_depths"] = c.stage_depths;
    j["k"] = c.k;
    j["reduce_ratios"] = c.reduce_ratios;
    j["relative_pe"] = c.relative_pe;
  }
  return j.dump(2);
}

// ---------------------------------------------------------------------------

Tensor ConvBnLayer::forward(const Ctx& ctx, const Tensor& x) {
  Tensor y = conv2d_nhwc(x, use(ctx, w), kh, kw, stride, pad);
  const auto out_shape = y.shape();
  y = bn.forward(ctx, reshape_t(y, {y.numel() / out_c, out_c}));
  Tensor out = reshape_t(y, out_shape);
  return gelu_after ? gelu(out) : out;
}

void ConvBnLayer::visit_params(const ParamVisitor& fn) {
  fn(w.name, w.value);
  bn.visit_params(fn);
}
void ConvBnLayer::visit_buffers(const ParamVisitor& fn) { bn.visit_buffers(fn); }

namespace {

ConvBnLayer make_conv_bn(const std::string& name, int in_c, int out_c, int stride, bool act,
                         Rng& rng, DType dt) {
  ConvBnLayer l;
  l.in_c = in_c;
  l.out_c = out_c;
  l.stride = stride;
  l.gelu_after = act;
  const int64_t fan_in = 9 * in_c;
  const double std = std::sqrt(2.0 / double(fan_in + out_c));
  l.w = {name + ".weight", Tensor::randn({fan_in, out_c}, rng, std, dt)};
  l.bn = BatchNormLayer::make(name + ".bn", out_c, dt);
  return l;
}

// Clamp the pooled-key ratio, then k, then dilation, so every graph build is
// feasible: k_eff * d_eff <= candidate count.
struct EffectiveGraphParams {
  int k, dilation, reduce, candidates;
};

EffectiveGraphParams clamp_graph_params(int gh, int gw, int k, int dilation, int reduce) {
  const int n = gh * gw;
  int r = std::max(1, reduce);
  while (r > 1 && (gh % r != 0 || gw % r != 0 || (gh / r) * (gw / r) < k + 1)) r /= 2;
  const int candidates = r > 1 ? (gh / r) * (gw / r) : n - 1;
  const int k_eff = std::min(k, candidates);
  const int d_eff = std::max(1, std::min(dilation, candidates / k_eff));
  return {k_eff, d_eff, r, candidates};
}

}  // namespace

Model build_model(const ModelConfig& cfg) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  Rng rng(cfg.init_seed + 0x9e3779b97f4a7c15ULL);
  const DType dt = cfg.dtype;

  std::vector<int> dims, depths, reduces;
  int grid_h = 0, grid_w = 0;
  if (cfg.kind == ModelKind::Isotropic) {
    dims = {cfg.dim};
    depths = {cfg.depth};
    reduces = {1};
    grid_h = cfg.image_h / cfg.patch;
    grid_w = cfg.image_w / cfg.patch;
    const int64_t in_dim = int64_t(cfg.patch) * cfg.patch * 3;
    m.patch_proj = LinearLayer::make("stem.proj", in_dim, cfg.dim, rng, dt);
    m.patch_bn = BatchNormLayer::make("stem.bn", cfg.dim, dt);
  } else {
    dims = cfg.stage_dims;
    depths = cfg.stage_depths;
    reduces = cfg.reduce_ratios;
    if (reduces.empty()) {
      // stage-wise defaults mirroring the 224x224 architecture: 4,2,1,1,...
      reduces.assign(dims.size(), 1);
      if (!reduces.empty()) reduces[0] = 4;
      if (reduces.size() > 1) reduces[1] = 2;
    }
    if (reduces.size() != dims.size())
      throw ConfigError("config.reduce_ratios: need one entry per stage");
    grid_h = cfg.image_h / 4;
    grid_w = cfg.image_w / 4;
    const int d1 = dims[0];
    m.stem_convs.push_back(make_conv_bn("stem.conv1", 3, d1 / 2, 2, true, rng, dt));
    m.stem_convs.push_back(make_conv_bn("stem.conv2", d1 / 2, d1, 2, true, rng, dt));
    m.stem_convs.push_back(make_conv_bn("stem.conv3", d1, d1, 1, true, rng, dt));
  }

  // absolute positional codes at the first stage resolution (trunc-normal-ish)
  m.pos_embed = {"pos_embed",
                 Tensor::randn({int64_t(grid_h) * grid_w, dims[0]}, rng, 0.02, dt)};

  int global_layer = 0;  // 1-based across all blocks, drives dilation
  for (size_t s = 0; s < dims.size(); ++s) {
    Stage stage;
    stage.dim = dims[s];
    if (s > 0) {
      grid_h /= 2;
      grid_w /= 2;
      stage.downsample = make_conv_bn("stage" + std::to_string(s + 1) + ".downsample",
                                      dims[s - 1], dims[s], 2, false, rng, dt);
    }
    stage.grid_h = grid_h;
    stage.grid_w = grid_w;
    for (int b = 0; b < depths[s]; ++b) {
      ++global_layer;
      const int want_k = cfg.kind == ModelKind::Isotropic
                             ? k_schedule(global_layer, cfg.depth, cfg.k_min, cfg.k_max)
                             : cfg.k;
      const auto eff = clamp_graph_params(grid_h, grid_w, want_k,
                                          dilation_for_layer(global_layer),
                                          reduces[s]);
      GrapherConfig gc;
      gc.dim = dims[s];
      gc.k = eff.k;
      gc.dilation = eff.dilation;
      gc.reduce = eff.reduce;
      gc.drop_path_rate = cfg.drop_path_rate;
      gc.variant = cfg.variant;
      gc.heads = cfg.heads;
      gc.grid_h = grid_h;
      gc.grid_w = grid_w;
      gc.relative_pe = cfg.kind == ModelKind::Pyramid && cfg.relative_pe;
      const std::string name =
          "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      stage.blocks.push_back(VigBlock::make(name, gc, cfg.ffn_ratio, rng, dt));
    }
    m.stages.push_back(std::move(stage));
  }

  m.head_fc1 = LinearLayer::make("head.fc1", dims.back(), cfg.head_hidden, rng, dt);
  m.head_bn = BatchNormLayer::make("head.bn", cfg.head_hidden, dt);
  const double std2 = std::sqrt(2.0 / double(cfg.head_hidden + cfg.num_classes));
  m.head_w2 = {"head.fc2.weight",
               Tensor::randn({cfg.head_hidden, cfg.num_classes}, rng, std2, dt)};
  m.head_b2 = {"head.fc2.bias", Tensor::zeros({cfg.num_classes}, dt)};
  return m;
}

Tensor Model::forward(const Tensor& images, const Ctx& ctx) {
  if (images.rank() != 4 || images.dim(3) != 3)
    throw DimensionError("forward: images must be [B, H, W, 3]");
  if (images.dim(1) != cfg.image_h || images.dim(2) != cfg.image_w)
    throw DimensionError("forward: image extents " + images.shape_str() +
                         " do not match config " + std::to_string(cfg.image_h) + "x" +
                         std::to_string(cfg.image_w));
  if (images.dtype() != cfg.dtype) throw ContractError("forward: image dtype != model dtype");
  const int batch = static_cast<int>(images.dim(0));

  Tensor x;
  if (cfg.kind == ModelKind::Isotropic) {
    // 16x16 patchify == conv with kernel=stride=patch and no padding
    Tensor patches = conv2d_nhwc(images, use(ctx, patch_proj->w), cfg.patch, cfg.patch,
                                 cfg.patch, 0);
    x = reshape_t(patches, {patches.numel() / cfg.dim, cfg.dim});
    x = patch_bn->forward(ctx, x);
  } else {
    Tensor t = images;
    for (auto& conv : stem_convs) t = conv.forward(ctx, t);
    x = reshape_t(t, {t.numel() / stages[0].dim, stages[0].dim});
  }

  x = add_tiled_rows(x, use(ctx, pos_embed));

  for (size_t s = 0; s < stages.size(); ++s) {
    Stage& stage = stages[s];
    if (stage.downsample) {
      const int prev_dim = stages[s - 1].dim;
      Tensor x4 = reshape_t(x, {batch, stage.grid_h * 2, stage.grid_w * 2, prev_dim});
      Tensor y = stage.downsample->forward(ctx, x4);
      x = reshape_t(y, {y.numel() / stage.dim, stage.dim});
    }
    for (auto& block : stage.blocks) x = block.forward(ctx, x, batch);
  }

  Tensor pooled = mean_rows_grouped(x, nodes_at_stage(stages.size() - 1));
  Tensor h = gelu(head_bn.forward(ctx, matmul(pooled, use(ctx, head_fc1.w))));
  return bias_add(matmul(h, use(ctx, head_w2)), use(ctx, head_b2));
}

void Model::visit_params(const ParamVisitor& fn) {
  if (patch_proj) patch_proj->visit_params(fn);
  if (patch_bn) patch_bn->visit_params(fn);
  for (auto& c : stem_convs) c.visit_params(fn);
  fn(pos_embed.name, pos_embed.value);
  for (auto& s : stages) {
    if (s.downsample) s.downsample->visit_params(fn);
    for (auto& b : s.blocks) b.visit_params(fn);
  }
  head_fc1.visit_params(fn);
  head_bn.visit_params(fn);
  fn(head_w2.name, head_w2.value);
  fn(head_b2.name, head_b2.value);
}

void Model::visit_buffers(const ParamVisitor& fn) {
  if (patch_bn) patch_bn->visit_buffers(fn);
  for (auto& c : stem_convs) c.visit_buffers(fn);
  for (auto& s : stages) {
    if (s.downsample) s.downsample->visit_buffers(fn);
    for (auto& b : s.blocks) b.visit_buffers(fn);
  }
  head_bn.visit_buffers(fn);
}

int Model::total_blocks() const {
  int n = 0;
  for (const auto& s : stages) n += static_cast<int>(s.blocks.size());
  return n;
}

int64_t Model::nodes_at_stage(size_t s) const {
  return int64_t(stages[s].grid_h) * stages[s].grid_w;
}

std::string Model::describe() const {
  std::ostringstream os;
  os << (cfg.kind == ModelKind::Isotropic ? "isotropic" : "pyramid") << " ViG";
  if (!cfg.preset.empty()) os << " [" << cfg.preset << "]";
  os << ", image " << cfg.image_h << "x" << cfg.image_w << ", classes " << cfg.num_classes
     << ", variant " << variant_name(cfg.variant) << ", heads " << cfg.heads << "\n";
  int l = 0;
  for (size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    os << "  stage " << s + 1 << ": " << st.grid_h << "x" << st.grid_w << " nodes, dim "
       << st.dim << (st.downsample ? ", downsample conv s2" : "") << "\n";
    for (const auto& b : st.blocks) {
      const auto& g = b.grapher.cfg;
      os << "    block " << ++l << ": k=" << g.k << " d=" << g.dilation
         << (g.reduce > 1 ? " pooled-keys r=" + std::to_string(g.reduce) : "")
         << (g.relative_pe ? " rel-pe" : "") << ", ffn " << b.ffn.dim << "->" << b.ffn.hidden
         << "\n";
    }
  }
  os << "  head: " << stages.back().dim << " -> " << cfg.head_hidden << " -> "
     << cfg.num_classes << "\n";
  return os.str();
}

}  // namespace vig
