#include "doctest.h"

#include <cmath>

#include "vig/analysis.hpp"
#include "vig/blocks.hpp"

using namespace vig;

namespace {

GrapherConfig micro_grapher_cfg(double drop_path = 0.0) {
  GrapherConfig gc;
  gc.dim = 8;
  gc.k = 3;
  gc.dilation = 1;
  gc.heads = 2;
  gc.grid_h = gc.grid_w = 3;
  gc.drop_path_rate = drop_path;
  return gc;
}

void zero_branch_weights(VigBlock& b) {
  auto zero = [](Tensor& t) {
    with_dtype(t.dtype(), [&]<typename T>() {
      for (T& v : t.data<T>()) v = T(0);
    });
  };
  zero(b.grapher.fc_in.w.value);
  zero(b.grapher.fc_out.w.value);
  for (auto& w : b.grapher.conv.update_weights) zero(w);
  zero(b.ffn.fc1.w.value);
  zero(b.ffn.fc2.w.value);
}

// Plain-loop reference for the eval-mode Grapher at small scale. BN in eval
// is the affine map (v - mean)/sqrt(var+eps)*gamma + beta per channel.
std::vector<double> reference_grapher_eval(const Grapher& g, const Tensor& x) {
  const int n = g.cfg.grid_h * g.cfg.grid_w;
  const int d = g.cfg.dim;
  const int hidden = 2 * d;
  auto bn = [](const BatchNormLayer& l, std::vector<double>& v, int width) {
    const int rows = static_cast<int>(v.size()) / width;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < width; ++j) {
        const double mu = l.state.running_mean.at(j), var = l.state.running_var.at(j);
        v[static_cast<size_t>(i) * width + j] =
            (v[static_cast<size_t>(i) * width + j] - mu) / std::sqrt(var + kBnEps) *
                l.gamma.value.at(j) +
            l.beta.value.at(j);
      }
  };
  auto fc = [](const std::vector<double>& v, const Tensor& w, int in_w) {
    const int rows = static_cast<int>(v.size()) / in_w;
    const int out_w = static_cast<int>(w.dim(1));
    std::vector<double> out(static_cast<size_t>(rows) * out_w, 0.0);
    for (int i = 0; i < rows; ++i)
      for (int o = 0; o < out_w; ++o)
        for (int c = 0; c < in_w; ++c)
          out[static_cast<size_t>(i) * out_w + o] +=
              v[static_cast<size_t>(i) * in_w + c] * w.at2(c, o);
    return out;
  };
  auto gelu_v = [](std::vector<double>& v) {
    for (double& t : v) t = 0.5 * t * (1.0 + std::erf(t / std::sqrt(2.0)));
  };

  std::vector<double> x1(static_cast<size_t>(n) * d);
  for (int i = 0; i < n * d; ++i) x1[static_cast<size_t>(i)] = x.at(i);
  x1 = fc(x1, g.fc_in.w.value, d);
  bn(g.bn_in, x1, d);

  // dynamic knn over x1 (squared euclidean, tie by index)
  std::vector<std::vector<int>> nb(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    std::vector<std::pair<double, int>> cand;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      double dist = 0;
      for (int c = 0; c < d; ++c) {
        const double diff = x1[static_cast<size_t>(i) * d + c] - x1[static_cast<size_t>(j) * d + c];
        dist += diff * diff;
      }
      cand.emplace_back(dist, j);
    }
    std::sort(cand.begin(), cand.end());
    for (int s = 0; s < g.cfg.k; ++s) nb[static_cast<size_t>(i)].push_back(cand[static_cast<size_t>(s)].second);
  }

  // max-relative-concat aggregate + per-head update
  const int agg_w = 2 * d;
  std::vector<double> agg(static_cast<size_t>(n) * agg_w);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < d; ++c) {
      double best = -1e300;
      for (int j : nb[static_cast<size_t>(i)])
        best = std::max(best, x1[static_cast<size_t>(i) * d + c] - x1[static_cast<size_t>(j) * d + c]);
      agg[static_cast<size_t>(i) * agg_w + c] = x1[static_cast<size_t>(i) * d + c];
      agg[static_cast<size_t>(i) * agg_w + d + c] = best;
    }
  const int h = g.cfg.heads, cw = agg_w / h, ow = hidden / h;
  std::vector<double> upd(static_cast<size_t>(n) * hidden, 0.0);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < h; ++t)
      for (int o = 0; o < ow; ++o) {
        double acc = 0;
        for (int c = 0; c < cw; ++c)
          acc += agg[static_cast<size_t>(i) * agg_w + t * cw + c] *
                 g.conv.update_weights[static_cast<size_t>(t)].at2(c, o);
        upd[static_cast<size_t>(i) * hidden + t * ow + o] = acc;
      }
  bn(g.bn_conv, upd, hidden);
  gelu_v(upd);
  auto y = fc(upd, g.fc_out.w.value, hidden);
  bn(g.bn_out, y, d);
  for (int i = 0; i < n * d; ++i) y[static_cast<size_t>(i)] += x.at(i);
  return y;
}

}  // namespace

TEST_CASE("zero-weight blocks are exact identities") {
  Rng rng(1);
  VigBlock b = VigBlock::make("b", micro_grapher_cfg(), 4, rng, DType::Float64);
  zero_branch_weights(b);
  Tensor x = Tensor::randn({9, 8}, rng, 1.0, DType::Float64);
  Ctx train_ctx;
  train_ctx.training = true;
  Tensor y = b.forward(train_ctx, x, 1);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));

  Ctx eval_ctx;
  Tensor ye = b.forward(eval_ctx, x, 1);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(ye.at(i) == x.at(i));
}

TEST_CASE("grapher_forward matches the straight-line reference in eval mode") {
  Rng rng(3);
  Grapher g = Grapher::make("g", micro_grapher_cfg(), rng, DType::Float64);
  // randomize the frozen stats so BN is a nontrivial affine map
  g.bn_in.state.running_mean = Tensor::randn({8}, rng, 0.2, DType::Float64);
  g.bn_in.state.running_var = Tensor::rand_uniform({8}, rng, 0.5, 2.0, DType::Float64);
  g.bn_conv.state.running_var = Tensor::rand_uniform({16}, rng, 0.5, 2.0, DType::Float64);
  g.bn_out.state.running_mean = Tensor::randn({8}, rng, 0.2, DType::Float64);

  Tensor x = Tensor::randn({9, 8}, rng, 1.0, DType::Float64);
  Ctx ctx;  // eval
  Tensor y = g.forward(ctx, x, 1);
  auto want = reference_grapher_eval(g, x);
  for (int64_t i = 0; i < y.numel(); ++i)
    CHECK(y.at(i) == doctest::Approx(want[static_cast<size_t>(i)]).epsilon(1e-10));
}

TEST_CASE("ffn_forward") {
  Rng rng(5);

  SUBCASE("zero weights pass the input through") {
    Ffn f = Ffn::make("f", 4, 16, 0.0, rng, DType::Float64);
    with_dtype(DType::Float64, [&]<typename T>() {
      for (T& v : f.fc1.w.value.data<T>()) v = T(0);
      for (T& v : f.fc2.w.value.data<T>()) v = T(0);
    });
    Tensor x = Tensor::randn({6, 4}, rng, 1.0, DType::Float64);
    Ctx ctx;
    ctx.training = true;
    Tensor y = f.forward(ctx, x, 1);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
  }

  SUBCASE("random weights match a plain-loop reference (eval)") {
    Ffn f = Ffn::make("f", 4, 16, 0.0, rng, DType::Float64);
    Tensor x = Tensor::randn({5, 4}, rng, 1.0, DType::Float64);
    Ctx ctx;
    Tensor y = f.forward(ctx, x, 1);
    for (int i = 0; i < 5; ++i)
      for (int o = 0; o < 4; ++o) {
        // h = gelu(bn1(x W1)); z = bn2(h W2) + x with fresh (0,1) stats
        double want = x.at2(i, o);
        for (int c = 0; c < 16; ++c) {
          double pre = 0;
          for (int a = 0; a < 4; ++a) pre += x.at2(i, a) * f.fc1.w.value.at2(a, c);
          pre /= std::sqrt(1.0 + kBnEps);
          pre = 0.5 * pre * (1.0 + std::erf(pre / std::sqrt(2.0)));
          want += pre * f.fc2.w.value.at2(c, o) / std::sqrt(1.0 + kBnEps);
        }
        CHECK(y.at2(i, o) == doctest::Approx(want).epsilon(1e-10));
      }
  }

  SUBCASE("train mode equals eval mode once the frozen stats match the batch") {
    Ffn f = Ffn::make("f", 3, 12, 0.0, rng, DType::Float64);
    Tensor x = Tensor::randn({64, 3}, rng, 1.0, DType::Float64);
    // train pass first: it also perturbs the running stats via momentum
    Ctx train_ctx;
    train_ctx.training = true;
    Tensor yt = f.forward(train_ctx, x, 1);
    // now freeze the running stats at the exact batch statistics and re-run
    // in eval mode; the two normalizations coincide
    auto set_stats = [](BatchNormLayer& bn, const Tensor& v) {
      const int64_t rows = v.rows2d(), cols = v.cols2d();
      for (int64_t j = 0; j < cols; ++j) {
        double mu = 0, var = 0;
        for (int64_t i = 0; i < rows; ++i) mu += v.at2(i, j) / double(rows);
        for (int64_t i = 0; i < rows; ++i)
          var += (v.at2(i, j) - mu) * (v.at2(i, j) - mu) / double(rows);
        bn.state.running_mean.set(j, mu);
        bn.state.running_var.set(j, var);
      }
    };
    Tensor h_pre = matmul(x, f.fc1.w.value);
    set_stats(f.bn1, h_pre);
    Tensor h_mid = gelu(batch_norm(h_pre, f.bn1.gamma.value, f.bn1.beta.value,
                                   f.bn1.state, false));
    set_stats(f.bn2, matmul(h_mid, f.fc2.w.value));
    Ctx eval_ctx;
    Tensor ye = f.forward(eval_ctx, x, 1);
    for (int64_t i = 0; i < yt.numel(); ++i)
      CHECK(yt.at(i) == doctest::Approx(ye.at(i)).epsilon(1e-10));
  }
}

TEST_CASE("train equals eval bitwise when frozen stats equal batch stats") {
  // construct the matched-statistics case explicitly for one BN layer
  Rng rng(9);
  Tensor x = Tensor::randn({32, 4}, rng, 2.0, DType::Float64);
  Tensor gamma = Tensor::rand_uniform({4}, rng, 0.5, 1.5, DType::Float64);
  Tensor beta = Tensor::randn({4}, rng, 0.3, DType::Float64);
  // measure batch stats
  auto st_train = BnState::fresh(4, DType::Float64);
  Tensor y_train = batch_norm(x, gamma, beta, st_train, true);
  auto st_eval = BnState::fresh(4, DType::Float64);
  for (int j = 0; j < 4; ++j) {
    double mu = 0, var = 0;
    for (int i = 0; i < 32; ++i) mu += x.at2(i, j) / 32;
    for (int i = 0; i < 32; ++i) var += (x.at2(i, j) - mu) * (x.at2(i, j) - mu) / 32;
    st_eval.running_mean.set(j, mu);
    st_eval.running_var.set(j, var);
  }
  Tensor y_eval = batch_norm(x, gamma, beta, st_eval, false);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(y_train.at(i) == doctest::Approx(y_eval.at(i)).epsilon(1e-12));
}

TEST_CASE("drop_path rate 1 in train mode drops the branch entirely") {
  Rng rng(7);
  GrapherConfig gc = micro_grapher_cfg(1.0);
  Grapher g = Grapher::make("g", gc, rng, DType::Float64);
  Tensor x = Tensor::randn({9, 8}, rng, 1.0, DType::Float64);
  Ctx ctx;
  ctx.training = true;
  ctx.rng = &rng;
  Tensor y = g.forward(ctx, x, 1);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.at(i) == x.at(i));
}

TEST_CASE("eval-mode forward is bitwise deterministic") {
  Rng rng(11);
  VigBlock b = VigBlock::make("b", micro_grapher_cfg(), 4, rng, DType::Float32);
  Tensor x = Tensor::randn({9, 8}, rng);
  Ctx ctx;
  Tensor y1 = b.forward(ctx, x, 1);
  Tensor y2 = b.forward(ctx, x, 1);
  for (int64_t i = 0; i < y1.numel(); ++i) CHECK(y1.at(i) == y2.at(i));
}

TEST_CASE("blocks preserve the node-feature shape") {
  Rng rng(13);
  for (int dim : {8, 16}) {
    GrapherConfig gc;
    gc.dim = dim;
    gc.k = 3;
    gc.heads = 4;
    gc.grid_h = gc.grid_w = 4;
    VigBlock b = VigBlock::make("b", gc, 4, rng, DType::Float32);
    Tensor x = Tensor::randn({2 * 16, dim}, rng);
    Ctx ctx;
    Tensor y = b.forward(ctx, x, 2);
    CHECK(y.shape() == x.shape());
  }
}

TEST_CASE("grad_check drives a full micro block as a tensor function") {
  Rng rng(23);
  VigBlock b = VigBlock::make("b", micro_grapher_cfg(), 4, rng, DType::Float64);
  Tensor proj = Tensor::randn({9, 8}, rng, 1.0, DType::Float64);
  Tensor x0 = Tensor::randn({9, 8}, rng, 1.0, DType::Float64);
  auto f = [&](const Tensor& x) {
    Ctx ctx;  // eval mode: the map is a pure function of x
    return sum_all(mul(b.forward(ctx, x, 1), proj));
  };
  CHECK(grad_check(f, x0) <= 1e-4);
}

TEST_CASE("eval forward never needs an rng, whatever the drop-path rate") {
  Rng rng(29);
  VigBlock b = VigBlock::make("b", micro_grapher_cfg(0.3), 4, rng, DType::Float64);
  Tensor x = Tensor::randn({9, 8}, rng, 1.0, DType::Float64);
  Ctx ctx;  // eval, no rng attached
  Tensor y = b.forward(ctx, x, 1);
  CHECK(y.all_finite());
  // and the branch is fully kept: output differs from the input
  bool differs = false;
  for (int64_t i = 0; i < x.numel(); ++i) differs |= y.at(i) != x.at(i);
  CHECK(differs);
}

TEST_CASE("micro block stack gradient check stays under 1e-4") {
  Rng rng(17);
  std::vector<VigBlock> blocks;
  blocks.push_back(VigBlock::make("b0", micro_grapher_cfg(), 4, rng, DType::Float64));
  Tensor x0 = Tensor::randn({9, 8}, rng, 1.0, DType::Float64);
  auto rep = block_stack_grad_check(blocks, 1, x0);
  CHECK(rep.max_rel_err <= 1e-4);
}

TEST_CASE("block output keeps more diversity than a bare graph conv") {
  Rng rng(19);
  const int n = 9, d = 8;
  Tensor x = Tensor::randn({n, d}, rng, 1.0, DType::Float64);

  VigBlock b = VigBlock::make("b", micro_grapher_cfg(), 4, rng, DType::Float64);
  Ctx ctx;
  const double div_block = feature_diversity(b.forward(ctx, x, 1));

  auto p = GraphConvParams::create(ConvVariant::MaxRelative, d, d, 2, rng, DType::Float64);
  Graph g = knn_graph(pairwise_sq_distances(x), 3, 1);
  const double div_bare = feature_diversity(graph_conv(x, std::span<const Graph>(&g, 1), p));
  CHECK(div_block >= div_bare);
}
