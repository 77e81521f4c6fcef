#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vig/blocks.hpp"

namespace vig {

enum class ModelKind { Isotropic, Pyramid };

struct ModelConfig {
  ModelKind kind = ModelKind::Isotropic;
  std::string preset;  // echo of the preset name, if any
  int image_h = 224, image_w = 224;
  int num_classes = 1000;
  DType dtype = DType::Float32;
  ConvVariant variant = ConvVariant::MaxRelativeConcat;
  int heads = 4;
  double drop_path_rate = 0.0;
  uint64_t init_seed = 0;
  int head_hidden = 1024;
  int ffn_ratio = 4;

  // isotropic
  int depth = 12;
  int dim = 192;
  int patch = 16;
  int k_min = 9, k_max = 18;

  // pyramid
  std::vector<int> stage_dims;
  std::vector<int> stage_depths;
  int k = 9;
  std::vector<int> reduce_ratios;  // per stage; defaults to 4,2,1,1,...
  bool relative_pe = true;

  void validate() const;
};

// Named presets of the two model families plus the micro config used by
// gradient checks: vig-ti, vig-s, vig-b, pvig-ti, pvig-s, pvig-m, pvig-b,
// micro.
ModelConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();
// Published reference budgets (params in millions, flops in billions) for the
// presets that have them; `count` prints deviations against these.
std::optional<std::pair<double, double>> preset_reference_numbers(const std::string& name);

// JSON round-trip; unknown keys are rejected.
ModelConfig config_from_json(const std::string& json_text);
std::string config_to_json(const ModelConfig& cfg);

// round(k_min + (k_max-k_min)*(l-1)/(depth-1)) for 1-based layer l.
int k_schedule(int layer, int depth, int k_min = 9, int k_max = 18);

struct ConvBnLayer {
  Param w;  // [kh*kw*Cin, Cout]
  BatchNormLayer bn;
  int kh = 3, kw = 3, stride = 1, pad = 1;
  int in_c = 0, out_c = 0;
  bool gelu_after = false;

  Tensor forward(const Ctx& ctx, const Tensor& x);
  void visit_params(const ParamVisitor& fn);
  void visit_buffers(const ParamVisitor& fn);
};

struct Stage {
  int dim = 0;
  int grid_h = 0, grid_w = 0;
  std::optional<ConvBnLayer> downsample;  // absent on stage 1
  std::vector<VigBlock> blocks;
};

struct Model {
  ModelConfig cfg;

  // stem: single patchify projection (isotropic) or three 3x3 convs (pyramid)
  std::optional<LinearLayer> patch_proj;
  std::optional<BatchNormLayer> patch_bn;
  std::vector<ConvBnLayer> stem_convs;

  Param pos_embed;  // [N1, D1], learned
  std::vector<Stage> stages;

  LinearLayer head_fc1;
  BatchNormLayer head_bn;
  Param head_w2, head_b2;

  // images: [B, H, W, 3] normalized floats; returns [B, num_classes].
  Tensor forward(const Tensor& images, const Ctx& ctx);

  void visit_params(const ParamVisitor& fn);
  void visit_buffers(const ParamVisitor& fn);
  int total_blocks() const;
  int64_t nodes_at_stage(size_t s) const;

  // One-line-per-layer structural summary (grids, k/dilation after clamping).
  std::string describe() const;
};

Model build_model(const ModelConfig& cfg);

}  // namespace vig
