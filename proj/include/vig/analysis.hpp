#pragma once

#include <string>
#include <vector>

#include "vig/model.hpp"

namespace vig {

struct LayerStats {
  std::string name;
  int64_t params = 0;
  int64_t macs = 0;
};

// Parameter and analytic multiply-accumulate counts for one forward pass at
// the model's configured resolution (batch 1). 1 MAC == 1 reported "FLOP",
// the convention behind the reference budgets.
struct ModelStats {
  int64_t param_count = 0;
  int64_t mac_count = 0;
  std::vector<LayerStats> layers;

  std::string to_csv() const;
};

ModelStats compute_stats(const Model& m);
int64_t count_params(const Model& m);
// `h`/`w` must match the model's configured resolution (build the model at the
// resolution you want to count).
int64_t count_macs(const Model& m, int h, int w);

// ---------------------------------------------------------------------------
// Feature diversity: gamma(X) = ||X - 1*colmean(X)^T|| under the composite
// norm sqrt(||.||_1 * ||.||_inf) (max abs column sum / max abs row sum).
// ---------------------------------------------------------------------------
double feature_diversity(const Tensor& x);

struct DiversityProfile {
  std::vector<std::pair<int, double>> entries;  // (1-based layer, gamma)
  std::string to_csv() const;
};

// gamma of the node features after every block of a full model, eval mode,
// batch of one image.
DiversityProfile diversity_profile(Model& m, const Tensor& image);

// ---------------------------------------------------------------------------
// Probe stacks for the depth-vs-diversity comparison: a ViG block stack
// against a stack of raw max-relative graph convolutions, same input.
// ---------------------------------------------------------------------------
struct StackConfig {
  std::string type = "vig";  // "vig" | "bare_conv"
  int dim = 64;
  int nodes = 196;  // must be a perfect square for the vig stack
  int k = 9;
};
StackConfig stack_config_from_json(const std::string& json_text);

DiversityProfile probe_stack_diversity(const StackConfig& cfg, int depth, uint64_t seed);

// ---------------------------------------------------------------------------
// Upper bound on the Lipschitz constant of a residual FFN with frozen
// batch-norm stats folded into the weights; the diversity of the FFN output
// is at most this factor times the input diversity.
// lambda = 1 + L_gelu * ||W1'|| * ||W2'||, ||.|| = max(col-sum, row-sum).
// ---------------------------------------------------------------------------
struct FoldedFfn {
  Tensor w1, w2;
};
FoldedFfn fold_ffn_bn(const Ffn& f);
double ffn_lipschitz_bound(const FoldedFfn& folded);
// Convenience overload; raises ContractError when the stats are not frozen
// (train mode), since the bound is only valid for the folded eval map.
double ffn_lipschitz_bound(const Ffn& f, bool training);

// ---------------------------------------------------------------------------
// Finite-difference verification harnesses (central differences, high
// precision). Both run BN in train mode so the loss is a pure function of
// parameters and inputs.
// ---------------------------------------------------------------------------
struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t checked = 0;
};

// Stack of blocks on [batch*N, D] node features with a fixed random-projection
// loss; checks every parameter and the input.
GradCheckReport block_stack_grad_check(std::vector<VigBlock>& blocks, int batch,
                                       const Tensor& x0, double step = 1e-5);

// Full model with label-smoothing-free cross-entropy; checks every parameter.
GradCheckReport model_grad_check(Model& m, const Tensor& images, const std::vector<int>& labels,
                                 double step = 1e-5);

}  // namespace vig
