#pragma once

#include <functional>
#include <random>
#include <vector>

#include "vig/tape.hpp"
#include "vig/tensor.hpp"

namespace vig {

using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra ops. Every op allocates a fresh output and,
// when an operand is traced, appends a node with the matching backward rule.
// Tensors of rank > 2 are treated as [prod(leading), last] where sensible.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
// x * s with s a traced scalar (shape [1]); ds = sum(g * x).
Tensor mul_scalar_param(const Tensor& x, const Tensor& s);

// Exact-erf GELU: x * Phi(x). Derivative Phi(x) + x * phi(x).
Tensor gelu(const Tensor& x);

// C = op(A) * op(B) with optional transposes; dense GEMM underneath.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// Split the columns of x into heads.size() contiguous blocks, multiply block t
// by heads[t], concatenate. heads.size() == 1 degenerates to plain matmul.
Tensor multi_head_matmul(const Tensor& x, const std::vector<Tensor>& heads);

Tensor bias_add(const Tensor& x, const Tensor& b);

// x[r, :] + p[r % p_rows, :], tiled row-block addition (positional codes).
Tensor add_tiled_rows(const Tensor& x, const Tensor& p);

Tensor concat_cols(const Tensor& a, const Tensor& b);

// out[r, :] = x[idx[r], :]; backward scatter-adds.
Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx);

// Elementwise maximum; on ties the FIRST argument wins the gradient.
Tensor maximum_pref(const Tensor& a, const Tensor& b);

// Columnwise max over the rows of a [K x D] tensor -> [D]. Gradient is routed
// to the argmax row per column, lowest row index on ties.
Tensor reduce_max_rows(const Tensor& x);

Tensor sum_all(const Tensor& x);

// Mean over consecutive groups of `group` rows: [G*group, D] -> [G, D].
Tensor mean_rows_grouped(const Tensor& x, int64_t group);

Tensor reshape_t(const Tensor& x, std::vector<int64_t> shape);

// ---------------------------------------------------------------------------
// Batch normalization over the last axis (columns), rows = batch extent.
// ---------------------------------------------------------------------------

struct BnState {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
  static BnState fresh(int64_t channels, DType dt);
};

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnState& state,
                  bool training, double momentum = kBnMomentum, double eps = kBnEps);

// ---------------------------------------------------------------------------
// Stochastic depth: zero whole samples (leading-axis blocks) with probability
// `rate` in training, scale survivors by 1/(1-rate); identity in eval.
// ---------------------------------------------------------------------------
Tensor drop_path(const Tensor& x, double rate, bool training, Rng& rng);

// ---------------------------------------------------------------------------
// NHWC convolution / pooling. Weights are stored flat as [kh*kw*Cin, Cout].
// ---------------------------------------------------------------------------
Tensor conv2d_nhwc(const Tensor& x, const Tensor& w, int kh, int kw, int stride, int pad);
Tensor avg_pool2d_nhwc(const Tensor& x, int r);

// ---------------------------------------------------------------------------
// Softmax cross-entropy against an eps-smoothed one-hot target, batch mean.
// ---------------------------------------------------------------------------
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                             double smoothing);

// ---------------------------------------------------------------------------
// Central-difference gradient verification for a scalar-valued function.
// Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
// ---------------------------------------------------------------------------
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double step = 1e-5);

// sup |GELU'(x)|, evaluated numerically (needed by the FFN Lipschitz bound).
double gelu_max_derivative();

}  // namespace vig
