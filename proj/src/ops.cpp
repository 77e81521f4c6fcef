#include "vig/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

namespace vig {

namespace {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

void sync_eigen_threads() { Eigen::setNbThreads(max_threads()); }

// Emit a tape node when any operand is traced; fn captures what it needs.
Tensor traced(Tensor out, GradTape* tape, std::vector<int> inputs, GradTape::BackwardFn fn) {
  if (tape) out.bind(tape, tape->emit(std::move(inputs), std::move(fn)));
  return out;
}

Tensor matmul_raw(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul expects rank-2 operands, got " + a.shape_str() + " and " +
                         b.shape_str());
  require_same_dtype(a, b, "matmul");
  const int64_t m = ta ? a.dim(1) : a.dim(0);
  const int64_t k = ta ? a.dim(0) : a.dim(1);
  const int64_t k2 = tb ? b.dim(1) : b.dim(0);
  const int64_t n = tb ? b.dim(0) : b.dim(1);
  if (k != k2)
    throw DimensionError("matmul inner extents disagree: " + a.shape_str() +
                         (ta ? "^T" : "") + " x " + b.shape_str() + (tb ? "^T" : ""));
  sync_eigen_threads();
  Tensor c = Tensor::zeros({m, n}, a.dtype());
  with_dtype(a.dtype(), [&]<typename T>() {
    ECMap<T> ma(a.data<T>().data(), a.dim(0), a.dim(1));
    ECMap<T> mb(b.data<T>().data(), b.dim(0), b.dim(1));
    EMap<T> mc(c.data<T>().data(), m, n);
    if (!ta && !tb)
      mc.noalias() = ma * mb;
    else if (ta && !tb)
      mc.noalias() = ma.transpose() * mb;
    else if (!ta && tb)
      mc.noalias() = ma * mb.transpose();
    else
      mc.noalias() = ma.transpose() * mb.transpose();
  });
  return c;
}

Tensor slice_cols_raw(const Tensor& x, int64_t begin, int64_t len) {
  const int64_t r = x.rows2d(), c = x.cols2d();
  Tensor out = Tensor::zeros({r, len}, x.dtype());
  with_dtype(x.dtype(), [&]<typename T>() {
    auto src = x.data<T>();
    auto dst = out.data<T>();
    for (int64_t i = 0; i < r; ++i)
      std::copy_n(src.data() + i * c + begin, len, dst.data() + i * len);
  });
  return out;
}

void add_into_cols(Tensor& dst, const Tensor& src, int64_t begin) {
  const int64_t r = dst.rows2d(), c = dst.cols2d(), len = src.cols2d();
  with_dtype(dst.dtype(), [&]<typename T>() {
    auto d = dst.data<T>();
    auto s = src.data<T>();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < len; ++j) d[i * c + begin + j] += s[i * len + j];
  });
}

template <typename T>
T gelu_scalar(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865476)));
}
template <typename T>
T gelu_grad_scalar(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865476)));
  const T pdf = T(0.3989422804014327) * std::exp(T(-0.5) * x * x);
  return cdf + x * pdf;
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  require_same_dtype(a, b, "add");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  with_dtype(a.dtype(), [&]<typename T>() {
    auto pa = a.data<T>(), pb = b.data<T>();
    auto po = out.data<T>();
    for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + pb[i];
  });
  check_finite(out, "add");
  GradTape* tape = tape_of({&a, &b});
  const int ia = a.tape() ? a.node() : -1, ib = b.tape() ? b.node() : -1;
  return traced(std::move(out), tape, {ia, ib}, [ia, ib](GradTape& t, const Tensor& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  require_same_dtype(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  with_dtype(a.dtype(), [&]<typename T>() {
    auto pa = a.data<T>(), pb = b.data<T>();
    auto po = out.data<T>();
    for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] - pb[i];
  });
  check_finite(out, "sub");
  GradTape* tape = tape_of({&a, &b});
  const int ia = a.tape() ? a.node() : -1, ib = b.tape() ? b.node() : -1;
  return traced(std::move(out), tape, {ia, ib}, [ia, ib](GradTape& t, const Tensor& g) {
    t.accumulate(ia, g);
    if (ib >= 0) {
      Tensor ng = Tensor::zeros(g.shape(), g.dtype());
      with_dtype(g.dtype(), [&]<typename T>() {
        auto pg = g.data<T>();
        auto pn = ng.data<T>();
        for (size_t i = 0; i < pn.size(); ++i) pn[i] = -pg[i];
      });
      t.accumulate(ib, ng);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  require_same_dtype(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  with_dtype(a.dtype(), [&]<typename T>() {
    auto pa = a.data<T>(), pb = b.data<T>();
    auto po = out.data<T>();
    for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] * pb[i];
  });
  check_finite(out, "mul");
  GradTape* tape = tape_of({&a, &b});
  const int ia = a.tape() ? a.node() : -1, ib = b.tape() ? b.node() : -1;
  Tensor av = a.detached(), bv = b.detached();
  return traced(std::move(out), tape, {ia, ib}, [ia, ib, av, bv](GradTape& t, const Tensor& g) {
    auto partial = [&](const Tensor& other) {
      Tensor d = Tensor::zeros(g.shape(), g.dtype());
      with_dtype(g.dtype(), [&]<typename T>() {
        auto pg = g.data<T>();
        auto po = other.data<T>();
        auto pd = d.data<T>();
        for (size_t i = 0; i < pd.size(); ++i) pd[i] = pg[i] * po[i];
      });
      return d;
    };
    if (ia >= 0) t.accumulate(ia, partial(bv));
    if (ib >= 0) t.accumulate(ib, partial(av));
  });
}

Tensor scale(const Tensor& x, double c) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  with_dtype(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.data<T>();
    const T tc = static_cast<T>(c);
    for (size_t i = 0; i < po.size(); ++i) po[i] = px[i] * tc;
  });
  check_finite(out, "scale");
  const int ix = x.tape() ? x.node() : -1;
  return traced(std::move(out), x.tape(), {ix}, [ix, c](GradTape& t, const Tensor& g) {
    t.accumulate(ix, scale(g.detached(), c));
  });
}

Tensor mul_scalar_param(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ContractError("mul_scalar_param: s must be scalar");
  require_same_dtype(x, s, "mul_scalar_param");
  const double sv = s.at(0);
  Tensor out = scale(x.detached(), sv);
  GradTape* tape = tape_of({&x, &s});
  const int ix = x.tape() ? x.node() : -1, is = s.tape() ? s.node() : -1;
  Tensor xv = x.detached();
  return traced(std::move(out), tape, {ix, is}, [ix, is, sv, xv](GradTape& t, const Tensor& g) {
    if (ix >= 0) t.accumulate(ix, scale(g.detached(), sv));
    if (is >= 0) {
      double acc = 0.0;
      with_dtype(g.dtype(), [&]<typename T>() {
        auto pg = g.data<T>();
        auto px = xv.data<T>();
        for (size_t i = 0; i < pg.size(); ++i) acc += double(pg[i]) * double(px[i]);
      });
      t.accumulate(is, Tensor::full({1}, acc, g.dtype()));
    }
  });
}

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  with_dtype(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.data<T>();
    for (size_t i = 0; i < po.size(); ++i) po[i] = gelu_scalar(px[i]);
  });
  check_finite(out, "gelu");
  const int ix = x.tape() ? x.node() : -1;
  Tensor xv = x.detached();
  return traced(std::move(out), x.tape(), {ix}, [ix, xv](GradTape& t, const Tensor& g) {
    Tensor d = Tensor::zeros(g.shape(), g.dtype());
    with_dtype(g.dtype(), [&]<typename T>() {
      auto pg = g.data<T>();
      auto px = xv.data<T>();
      auto pd = d.data<T>();
      for (size_t i = 0; i < pd.size(); ++i) pd[i] = pg[i] * gelu_grad_scalar(px[i]);
    });
    t.accumulate(ix, d);
  });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  Tensor out = matmul_raw(a, b, trans_a, trans_b);
  check_finite(out, "matmul");
  GradTape* tape = tape_of({&a, &b});
  if (!tape) return out;
  const int ia = a.tape() ? a.node() : -1, ib = b.tape() ? b.node() : -1;
  Tensor av = a.detached(), bv = b.detached();
  return traced(std::move(out), tape, {ia, ib},
                [ia, ib, av, bv, trans_a, trans_b](GradTape& t, const Tensor& g) {
                  if (ia >= 0)
                    t.accumulate(ia, trans_a ? matmul_raw(bv, g, trans_b, true)
                                             : matmul_raw(g, bv, false, !trans_b));
                  if (ib >= 0)
                    t.accumulate(ib, trans_b ? matmul_raw(g, av, true, trans_a)
                                             : matmul_raw(av, g, !trans_a, false));
                });
}

Tensor multi_head_matmul(const Tensor& x, const std::vector<Tensor>& heads) {
  const auto h = static_cast<int64_t>(heads.size());
  if (h < 1) throw ContractError("multi_head_matmul: needs at least one head");
  if (h == 1) return matmul(x, heads[0]);
  const int64_t din = x.cols2d();
  if (din % h != 0)
    throw DimensionError("head split: " + std::to_string(h) + " heads do not divide width " +
                         std::to_string(din));
  const int64_t cw = din / h;
  Tensor out;
  for (int64_t t = 0; t < h; ++t) {
    if (heads[static_cast<size_t>(t)].dim(0) != cw)
      throw DimensionError("head split: head weight rows != column block width");
    Tensor xt = [&] {
      Tensor s = slice_cols_raw(x.detached(), t * cw, cw);
      // Re-trace the slice so per-head grads flow back into x.
      GradTape* tape = x.tape();
      const int ix = tape ? x.node() : -1;
      const int64_t begin = t * cw, full = din;
      return traced(std::move(s), tape, {ix},
                    [ix, begin, full](GradTape& tp, const Tensor& g) {
                      Tensor dx = Tensor::zeros({g.rows2d(), full}, g.dtype());
                      add_into_cols(dx, g, begin);
                      tp.accumulate(ix, dx);
                    });
    }();
    Tensor yt = matmul(xt, heads[static_cast<size_t>(t)]);
    out = out.defined() ? concat_cols(out, yt) : yt;
  }
  return out;
}

Tensor bias_add(const Tensor& x, const Tensor& b) {
  const int64_t r = x.rows2d(), c = x.cols2d();
  if (b.numel() != c)
    throw DimensionError("bias_add: bias length " + std::to_string(b.numel()) +
                         " vs width " + std::to_string(c));
  require_same_dtype(x, b, "bias_add");
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  with_dtype(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto pb = b.data<T>();
    auto po = out.data<T>();
    for (int64_t i = 0; i < r; ++i)
      for (int64_t j = 0; j < c; ++j) po[i * c + j] = px[i * c + j] + pb[j];
  });
  check_finite(out, "bias_add");
  GradTape* tape = tape_of({&x, &b});
  const int ix = x.tape() ? x.node() : -1, ib = b.tape() ? b.node() : -1;
  return traced(std::move(out), tape, {ix, ib}, [ix, ib, r, c](GradTape& t, const Tensor& g) {
    t.accumulate(ix, g);
    if (ib >= 0) {
      Tensor db = Tensor::zeros({c}, g.dtype());
      with_dtype(g.dtype(), [&]<typename T>() {
        auto pg = g.data<T>();
        auto pd = db.data<T>();
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j) pd[j] += pg[i * c + j];
      });
      t.accumulate(ib, db);
    }
  });
}

Tensor add_tiled_rows(const Tensor& x, const Tensor& p) {
  const int64_t r = x.rows2d(), c = x.cols2d();
  const int64_t pr = p.rows2d(), pc = p.cols2d();
  if (pc != c || r % pr != 0)
    throw DimensionError("add_tiled_rows: " + x.shape_str() + " vs " + p.shape_str());
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  with_dtype(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto pp = p.data<T>();
    auto po = out.data<T>();
    for (int64_t i = 0; i < r; ++i) {
      const int64_t pi = i % pr;
      for (int64_t j = 0; j < c; ++j) po[i * c + j] = px[i * c + j] + pp[pi * c + j];
    }
  });
  check_finite(out, "add_tiled_rows");
  GradTape* tape = tape_of({&x, &p});
  const int ix = x.tape() ? x.node() : -1, ip = p.tape() ? p.node() : -1;
  std::vector<int64_t> pshape = p.shape();
  return traced(std::move(out), tape, {ix, ip},
                [ix, ip, r, c, pr, pshape](GradTape& t, const Tensor& g) {
                  t.accumulate(ix, g);
                  if (ip >= 0) {
                    Tensor dp = Tensor::zeros(pshape, g.dtype());
                    with_dtype(g.dtype(), [&]<typename T>() {
                      auto pg = g.data<T>();
                      auto pd = dp.data<T>();
                      for (int64_t i = 0; i < r; ++i) {
                        const int64_t pi = i % pr;
                        for (int64_t j = 0; j < c; ++j) pd[pi * c + j] += pg[i * c + j];
                      }
                    });
                    t.accumulate(ip, dp);
                  }
                });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  const int64_t r = a.rows2d(), ca = a.cols2d(), cb = b.cols2d();
  if (b.rows2d() != r)
    throw DimensionError("concat_cols: row mismatch " + a.shape_str() + " vs " + b.shape_str());
  require_same_dtype(a, b, "concat_cols");
  Tensor out = Tensor::zeros({r, ca + cb}, a.dtype());
  with_dtype(a.dtype(), [&]<typename T>() {
    auto pa = a.data<T>(), pb = b.data<T>();
    auto po = out.data<T>();
    for (int64_t i = 0; i < r; ++i) {
      std::copy_n(pa.data() + i * ca, ca, po.data() + i * (ca + cb));
      std::copy_n(pb.data() + i * cb, cb, po.data() + i * (ca + cb) + ca);
    }
  });
  GradTape* tape = tape_of({&a, &b});
  const int ia = a.tape() ? a.node() : -1, ib = b.tape() ? b.node() : -1;
  return traced(std::move(out), tape, {ia, ib}, [ia, ib, ca, cb](GradTape& t, const Tensor& g) {
    if (ia >= 0) t.accumulate(ia, slice_cols_raw(g, 0, ca));
    if (ib >= 0) t.accumulate(ib, slice_cols_raw(g, ca, cb));
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<int64_t>& idx) {
  const int64_t r = x.rows2d(), c = x.cols2d();
  const auto n = static_cast<int64_t>(idx.size());
  Tensor out = Tensor::zeros({n, c}, x.dtype());
  with_dtype(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.data<T>();
    for (int64_t i = 0; i < n; ++i) {
      const int64_t s = idx[static_cast<size_t>(i)];
      if (s < 0 || s >= r) throw IndexError("gather_rows: row index out of range");
      std::copy_n(px.data() + s * c, c, po.data() + i * c);
    }
  });
  const int ix = x.tape() ? x.node() : -1;
  return traced(std::move(out), x.tape(), {ix}, [ix, idx, r, c](GradTape& t, const Tensor& g) {
    Tensor dx = Tensor::zeros({r, c}, g.dtype());
    with_dtype(g.dtype(), [&]<typename T>() {
      auto pg = g.data<T>();
      auto pd = dx.data<T>();
      for (size_t i = 0; i < idx.size(); ++i) {
        T* dst = pd.data() + idx[i] * c;
        const T* src = pg.data() + static_cast<int64_t>(i) * c;
        for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
      }
    });
    t.accumulate(ix, dx);
  });
}

Tensor maximum_pref(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "maximum_pref");
  require_same_dtype(a, b, "maximum_pref");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  // 1 where b strictly wins; ties keep a so chained maxima prefer the earliest.
  std::vector<char> b_wins(static_cast<size_t>(a.numel()));
  with_dtype(a.dtype(), [&]<typename T>() {
    auto pa = a.data<T>(), pb = b.data<T>();
    auto po = out.data<T>();
    for (size_t i = 0; i < po.size(); ++i) {
      const bool w = pb[i] > pa[i];
      b_wins[i] = w;
      po[i] = w ? pb[i] : pa[i];
    }
  });
  GradTape* tape = tape_of({&a, &b});
  const int ia = a.tape() ? a.node() : -1, ib = b.tape() ? b.node() : -1;
  return traced(std::move(out), tape, {ia, ib},
                [ia, ib, b_wins = std::move(b_wins)](GradTape& t, const Tensor& g) {
                  auto masked = [&](bool want_b) {
                    Tensor d = Tensor::zeros(g.shape(), g.dtype());
                    with_dtype(g.dtype(), [&]<typename T>() {
                      auto pg = g.data<T>();
                      auto pd = d.data<T>();
                      for (size_t i = 0; i < pd.size(); ++i)
                        if (static_cast<bool>(b_wins[i]) == want_b) pd[i] = pg[i];
                    });
                    return d;
                  };
                  if (ia >= 0) t.accumulate(ia, masked(false));
                  if (ib >= 0) t.accumulate(ib, masked(true));
                });
}

Tensor reduce_max_rows(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("reduce_max_rows expects [K x D]");
  const int64_t k = x.dim(0), d = x.dim(1);
  if (k < 1) throw ContractError("reduce_max_rows: empty neighborhood");
  Tensor out = Tensor::zeros({d}, x.dtype());
  std::vector<int64_t> arg(static_cast<size_t>(d), 0);
  with_dtype(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.data<T>();
    for (int64_t j = 0; j < d; ++j) {
      T best = px[j];
      int64_t bi = 0;
      for (int64_t i = 1; i < k; ++i)
        if (px[i * d + j] > best) {
          best = px[i * d + j];
          bi = i;
        }
      po[j] = best;
      arg[static_cast<size_t>(j)] = bi;
    }
  });
  const int ix = x.tape() ? x.node() : -1;
  return traced(std::move(out), x.tape(), {ix},
                [ix, k, d, arg = std::move(arg)](GradTape& t, const Tensor& g) {
                  Tensor dx = Tensor::zeros({k, d}, g.dtype());
                  with_dtype(g.dtype(), [&]<typename T>() {
                    auto pg = g.data<T>();
                    auto pd = dx.data<T>();
                    for (int64_t j = 0; j < d; ++j) pd[arg[static_cast<size_t>(j)] * d + j] = pg[j];
                  });
                  t.accumulate(ix, dx);
                });
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  with_dtype(x.dtype(), [&]<typename T>() {
    for (T v : x.data<T>()) acc += static_cast<double>(v);
  });
  Tensor out = Tensor::full({1}, acc, x.dtype());
  check_finite(out, "sum_all");
  const int ix = x.tape() ? x.node() : -1;
  std::vector<int64_t> xshape = x.shape();
  return traced(std::move(out), x.tape(), {ix}, [ix, xshape](GradTape& t, const Tensor& g) {
    const double gv = g.at(0);
    t.accumulate(ix, Tensor::full(xshape, gv, g.dtype()));
  });
}

Tensor mean_rows_grouped(const Tensor& x, int64_t group) {
  const int64_t r = x.rows2d(), c = x.cols2d();
  if (group < 1 || r % group != 0)
    throw DimensionError("mean_rows_grouped: group " + std::to_string(group) +
                         " does not divide rows " + std::to_string(r));
  const int64_t gcount = r / group;
  Tensor out = Tensor::zeros({gcount, c}, x.dtype());
  with_dtype(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.data<T>();
    for (int64_t gi = 0; gi < gcount; ++gi)
      for (int64_t i = 0; i < group; ++i)
        for (int64_t j = 0; j < c; ++j)
          po[gi * c + j] += px[(gi * group + i) * c + j] / static_cast<T>(group);
  });
  check_finite(out, "mean_rows_grouped");
  const int ix = x.tape() ? x.node() : -1;
  std::vector<int64_t> xshape = x.shape();
  return traced(std::move(out), x.tape(), {ix},
                [ix, group, gcount, c, xshape](GradTape& t, const Tensor& g) {
                  Tensor dx = Tensor::zeros(xshape, g.dtype());
                  with_dtype(g.dtype(), [&]<typename T>() {
                    auto pg = g.data<T>();
                    auto pd = dx.data<T>();
                    for (int64_t gi = 0; gi < gcount; ++gi)
                      for (int64_t i = 0; i < group; ++i)
                        for (int64_t j = 0; j < c; ++j)
                          pd[(gi * group + i) * c + j] = pg[gi * c + j] / static_cast<T>(group);
                  });
                  t.accumulate(ix, dx);
                });
}

Tensor reshape_t(const Tensor& x, std::vector<int64_t> shape) {
  Tensor out = x.reshaped(shape);
  const int ix = x.tape() ? x.node() : -1;
  std::vector<int64_t> orig = x.shape();
  return traced(std::move(out), x.tape(), {ix}, [ix, orig](GradTape& t, const Tensor& g) {
    t.accumulate(ix, g.reshaped(orig));
  });
}

// ---------------------------------------------------------------------------

BnState BnState::fresh(int64_t channels, DType dt) {
  return BnState{Tensor::zeros({channels}, dt), Tensor::ones({channels}, dt)};
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BnState& state,
                  bool training, double momentum, double eps) {
  const int64_t r = x.rows2d(), c = x.cols2d();
  if (gamma.numel() != c || beta.numel() != c)
    throw DimensionError("batch_norm: scale/shift length != channel width");
  require_same_dtype(x, gamma, "batch_norm");
  if (training && r < 2)
    throw ContractError("batch_norm: degenerate batch (fewer than 2 rows in train mode)");

  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  Tensor xhat = Tensor::zeros({r, c}, x.dtype());
  Tensor inv_sigma = Tensor::zeros({c}, x.dtype());

  with_dtype(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto pg = gamma.data<T>();
    auto pb = beta.data<T>();
    auto po = out.data<T>();
    auto ph = xhat.data<T>();
    auto pis = inv_sigma.data<T>();
    auto prm = state.running_mean.data<T>();
    auto prv = state.running_var.data<T>();
    for (int64_t j = 0; j < c; ++j) {
      double mu, var;
      if (training) {
        double s = 0.0;
        for (int64_t i = 0; i < r; ++i) s += px[i * c + j];
        mu = s / double(r);
        double sq = 0.0;
        for (int64_t i = 0; i < r; ++i) {
          const double d = px[i * c + j] - mu;
          sq += d * d;
        }
        var = sq / double(r);  // biased, as used for normalization
        const double unbiased = r > 1 ? sq / double(r - 1) : 0.0;
        prm[j] = static_cast<T>((1.0 - momentum) * prm[j] + momentum * mu);
        prv[j] = static_cast<T>((1.0 - momentum) * prv[j] + momentum * unbiased);
      } else {
        mu = prm[j];
        var = prv[j];
      }
      const double is = 1.0 / std::sqrt(var + eps);
      pis[j] = static_cast<T>(is);
      for (int64_t i = 0; i < r; ++i) {
        const double h = (px[i * c + j] - mu) * is;
        ph[i * c + j] = static_cast<T>(h);
        po[i * c + j] = static_cast<T>(h * pg[j] + pb[j]);
      }
    }
  });
  check_finite(out, "batch_norm");

  GradTape* tape = tape_of({&x, &gamma, &beta});
  if (!tape) return out;
  const int ix = x.tape() ? x.node() : -1;
  const int ig = gamma.tape() ? gamma.node() : -1;
  const int ib = beta.tape() ? beta.node() : -1;
  Tensor gv = gamma.detached();
  std::vector<int64_t> xshape = x.shape();
  return traced(std::move(out), tape, {ix, ig, ib},
                [ix, ig, ib, r, c, training, xhat, inv_sigma, gv,
                 xshape](GradTape& t, const Tensor& g) {
                  with_dtype(g.dtype(), [&]<typename T>() {
                    auto pg = g.data<T>();
                    auto ph = xhat.data<T>();
                    auto pis = inv_sigma.data<T>();
                    auto pga = gv.data<T>();
                    if (ib >= 0) {
                      Tensor db = Tensor::zeros({c}, g.dtype());
                      auto pd = db.data<T>();
                      for (int64_t i = 0; i < r; ++i)
                        for (int64_t j = 0; j < c; ++j) pd[j] += pg[i * c + j];
                      t.accumulate(ib, db);
                    }
                    if (ig >= 0) {
                      Tensor dg = Tensor::zeros({c}, g.dtype());
                      auto pd = dg.data<T>();
                      for (int64_t i = 0; i < r; ++i)
                        for (int64_t j = 0; j < c; ++j) pd[j] += pg[i * c + j] * ph[i * c + j];
                      t.accumulate(ig, dg);
                    }
                    if (ix >= 0) {
                      Tensor dx = Tensor::zeros(xshape, g.dtype());
                      auto pd = dx.data<T>();
                      if (training) {
                        // dx = gamma/sigma * (g - mean(g) - xhat * mean(g*xhat))
                        for (int64_t j = 0; j < c; ++j) {
                          double mg = 0.0, mgh = 0.0;
                          for (int64_t i = 0; i < r; ++i) {
                            mg += pg[i * c + j];
                            mgh += double(pg[i * c + j]) * double(ph[i * c + j]);
                          }
                          mg /= double(r);
                          mgh /= double(r);
                          const double k = double(pga[j]) * double(pis[j]);
                          for (int64_t i = 0; i < r; ++i)
                            pd[i * c + j] = static_cast<T>(
                                k * (double(pg[i * c + j]) - mg - double(ph[i * c + j]) * mgh));
                        }
                      } else {
                        for (int64_t i = 0; i < r; ++i)
                          for (int64_t j = 0; j < c; ++j)
                            pd[i * c + j] = static_cast<T>(double(pg[i * c + j]) *
                                                           double(pga[j]) * double(pis[j]));
                      }
                      t.accumulate(ix, dx);
                    }
                  });
                });
}

// ---------------------------------------------------------------------------

Tensor drop_path(const Tensor& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("drop_path: rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x.tape() ? scale(x, 1.0) : x.clone();

  const int64_t batch = x.dim(0);
  const int64_t per = x.numel() / batch;
  const double keep = 1.0 - rate;
  std::bernoulli_distribution coin(keep);
  std::vector<double> mask(static_cast<size_t>(batch));
  for (auto& m : mask) m = coin(rng) ? 1.0 / keep : 0.0;

  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  with_dtype(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.data<T>();
    for (int64_t b = 0; b < batch; ++b) {
      const T m = static_cast<T>(mask[static_cast<size_t>(b)]);
      for (int64_t i = 0; i < per; ++i) po[b * per + i] = px[b * per + i] * m;
    }
  });
  const int ix = x.tape() ? x.node() : -1;
  return traced(std::move(out), x.tape(), {ix},
                [ix, batch, per, mask = std::move(mask)](GradTape& t, const Tensor& g) {
                  Tensor dx = Tensor::zeros(g.shape(), g.dtype());
                  with_dtype(g.dtype(), [&]<typename T>() {
                    auto pg = g.data<T>();
                    auto pd = dx.data<T>();
                    for (int64_t b = 0; b < batch; ++b) {
                      const T m = static_cast<T>(mask[static_cast<size_t>(b)]);
                      for (int64_t i = 0; i < per; ++i) pd[b * per + i] = pg[b * per + i] * m;
                    }
                  });
                  t.accumulate(ix, dx);
                });
}

// ---------------------------------------------------------------------------

namespace {

// Row index mapping for NHWC im2col; row r of the col matrix corresponds to
// output pixel (b, ho, wo), columns ordered (dh, dw, cin).
Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad, int64_t& ho_out,
              int64_t& wo_out) {
  const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const int64_t ho = (h + 2 * pad - kh) / stride + 1;
  const int64_t wo = (w + 2 * pad - kw) / stride + 1;
  if (ho < 1 || wo < 1) throw DimensionError("conv2d: kernel larger than padded input");
  ho_out = ho;
  wo_out = wo;
  Tensor col = Tensor::zeros({b * ho * wo, static_cast<int64_t>(kh) * kw * c}, x.dtype());
  with_dtype(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto pc = col.data<T>();
    const int64_t cw = static_cast<int64_t>(kh) * kw * c;
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t yo = 0; yo < ho; ++yo)
        for (int64_t xo = 0; xo < wo; ++xo) {
          T* dst = pc.data() + ((bi * ho + yo) * wo + xo) * cw;
          for (int dh = 0; dh < kh; ++dh) {
            const int64_t yi = yo * stride + dh - pad;
            for (int dw = 0; dw < kw; ++dw) {
              const int64_t xi = xo * stride + dw - pad;
              T* d = dst + (static_cast<int64_t>(dh) * kw + dw) * c;
              if (yi >= 0 && yi < h && xi >= 0 && xi < w) {
                const T* s = px.data() + ((bi * h + yi) * w + xi) * c;
                std::copy_n(s, c, d);
              }
            }
          }
        }
  });
  return col;
}

Tensor col2im(const Tensor& dcol, std::vector<int64_t> xshape, int kh, int kw, int stride,
              int pad, int64_t ho, int64_t wo) {
  Tensor dx = Tensor::zeros(xshape, dcol.dtype());
  const int64_t b = xshape[0], h = xshape[1], w = xshape[2], c = xshape[3];
  with_dtype(dcol.dtype(), [&]<typename T>() {
    auto pc = dcol.data<T>();
    auto pd = dx.data<T>();
    const int64_t cw = static_cast<int64_t>(kh) * kw * c;
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t yo = 0; yo < ho; ++yo)
        for (int64_t xo = 0; xo < wo; ++xo) {
          const T* src = pc.data() + ((bi * ho + yo) * wo + xo) * cw;
          for (int dh = 0; dh < kh; ++dh) {
            const int64_t yi = yo * stride + dh - pad;
            for (int dw = 0; dw < kw; ++dw) {
              const int64_t xi = xo * stride + dw - pad;
              if (yi < 0 || yi >= h || xi < 0 || xi >= w) continue;
              const T* s = src + (static_cast<int64_t>(dh) * kw + dw) * c;
              T* d = pd.data() + ((bi * h + yi) * w + xi) * c;
              for (int64_t ci = 0; ci < c; ++ci) d[ci] += s[ci];
            }
          }
        }
  });
  return dx;
}

}  // namespace

Tensor conv2d_nhwc(const Tensor& x, const Tensor& w, int kh, int kw, int stride, int pad) {
  if (x.rank() != 4) throw DimensionError("conv2d: input must be [B,H,W,C]");
  if (w.rank() != 2 || w.dim(0) != static_cast<int64_t>(kh) * kw * x.dim(3))
    throw DimensionError("conv2d: weight must be [kh*kw*Cin, Cout]");
  int64_t ho = 0, wo = 0;
  Tensor col = im2col(x.detached(), kh, kw, stride, pad, ho, wo);
  Tensor out2d = matmul_raw(col, w.detached(), false, false);
  Tensor out = out2d.reshaped({x.dim(0), ho, wo, w.dim(1)});
  check_finite(out, "conv2d");

  GradTape* tape = tape_of({&x, &w});
  if (!tape) return out;
  const int ix = x.tape() ? x.node() : -1, iw = w.tape() ? w.node() : -1;
  Tensor wv = w.detached();
  std::vector<int64_t> xshape = x.shape();
  const int64_t cout = w.dim(1);
  return traced(std::move(out), tape, {ix, iw},
                [ix, iw, col, wv, xshape, kh, kw, stride, pad, ho, wo,
                 cout](GradTape& t, const Tensor& g) {
                  Tensor g2d = g.reshaped({g.numel() / cout, cout});
                  if (iw >= 0) t.accumulate(iw, matmul_raw(col, g2d, true, false));
                  if (ix >= 0) {
                    Tensor dcol = matmul_raw(g2d, wv, false, true);
                    t.accumulate(ix, col2im(dcol, xshape, kh, kw, stride, pad, ho, wo));
                  }
                });
}

Tensor avg_pool2d_nhwc(const Tensor& x, int r) {
  if (x.rank() != 4) throw DimensionError("avg_pool2d: input must be [B,H,W,C]");
  const int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (r < 1 || h % r != 0 || w % r != 0)
    throw DimensionError("avg_pool2d: window must divide spatial extents");
  const int64_t ho = h / r, wo = w / r;
  Tensor out = Tensor::zeros({b, ho, wo, c}, x.dtype());
  const double inv = 1.0 / (double(r) * double(r));
  with_dtype(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.data<T>();
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t yo = 0; yo < ho; ++yo)
        for (int64_t xo = 0; xo < wo; ++xo)
          for (int dh = 0; dh < r; ++dh)
            for (int dw = 0; dw < r; ++dw) {
              const T* s = px.data() + ((bi * h + yo * r + dh) * w + xo * r + dw) * c;
              T* d = po.data() + ((bi * ho + yo) * wo + xo) * c;
              for (int64_t ci = 0; ci < c; ++ci) d[ci] += static_cast<T>(s[ci] * inv);
            }
  });
  const int ix = x.tape() ? x.node() : -1;
  std::vector<int64_t> xshape = x.shape();
  return traced(std::move(out), x.tape(), {ix},
                [ix, xshape, r, inv](GradTape& t, const Tensor& g) {
                  const int64_t b = xshape[0], h = xshape[1], w = xshape[2], c = xshape[3];
                  const int64_t ho = h / r, wo = w / r;
                  Tensor dx = Tensor::zeros(xshape, g.dtype());
                  with_dtype(g.dtype(), [&]<typename T>() {
                    auto pg = g.data<T>();
                    auto pd = dx.data<T>();
                    for (int64_t bi = 0; bi < b; ++bi)
                      for (int64_t yo = 0; yo < ho; ++yo)
                        for (int64_t xo = 0; xo < wo; ++xo) {
                          const T* s = pg.data() + ((bi * ho + yo) * wo + xo) * c;
                          for (int dh = 0; dh < r; ++dh)
                            for (int dw = 0; dw < r; ++dw) {
                              T* d = pd.data() + ((bi * h + yo * r + dh) * w + xo * r + dw) * c;
                              for (int64_t ci = 0; ci < c; ++ci)
                                d[ci] += static_cast<T>(s[ci] * inv);
                            }
                        }
                  });
                  t.accumulate(ix, dx);
                });
}

// ---------------------------------------------------------------------------

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                             double smoothing) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [B x C]");
  if (smoothing < 0.0 || smoothing >= 1.0)
    throw ConfigError("cross_entropy: smoothing must lie in [0, 1)");
  const int64_t b = logits.dim(0), c = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != b)
    throw DimensionError("cross_entropy: target count != batch size");
  for (int y : targets)
    if (y < 0 || y >= c) throw IndexError("cross_entropy: target class out of range");

  Tensor probs = Tensor::zeros({b, c}, logits.dtype());
  double loss = 0.0;
  with_dtype(logits.dtype(), [&]<typename T>() {
    auto pl = logits.data<T>();
    auto pp = probs.data<T>();
    for (int64_t i = 0; i < b; ++i) {
      double m = pl[i * c];
      for (int64_t j = 1; j < c; ++j) m = std::max(m, double(pl[i * c + j]));
      double z = 0.0;
      for (int64_t j = 0; j < c; ++j) z += std::exp(double(pl[i * c + j]) - m);
      const double lse = m + std::log(z);
      double row_loss = 0.0;
      for (int64_t j = 0; j < c; ++j) {
        const double logp = double(pl[i * c + j]) - lse;
        pp[i * c + j] = static_cast<T>(std::exp(logp));
        const double tgt =
            (j == targets[static_cast<size_t>(i)] ? 1.0 - smoothing : 0.0) + smoothing / double(c);
        row_loss -= tgt * logp;
      }
      loss += row_loss;
    }
  });
  Tensor out = Tensor::full({1}, loss / double(b), logits.dtype());
  check_finite(out, "softmax_cross_entropy");

  const int il = logits.tape() ? logits.node() : -1;
  return traced(std::move(out), logits.tape(), {il},
                [il, probs, targets, smoothing, b, c](GradTape& t, const Tensor& g) {
                  const double gv = g.at(0) / double(b);
                  Tensor dl = Tensor::zeros({b, c}, probs.dtype());
                  with_dtype(probs.dtype(), [&]<typename T>() {
                    auto pp = probs.data<T>();
                    auto pd = dl.data<T>();
                    for (int64_t i = 0; i < b; ++i)
                      for (int64_t j = 0; j < c; ++j) {
                        const double tgt =
                            (j == targets[static_cast<size_t>(i)] ? 1.0 - smoothing : 0.0) +
                            smoothing / double(c);
                        pd[i * c + j] = static_cast<T>((double(pp[i * c + j]) - tgt) * gv);
                      }
                  });
                  t.accumulate(il, dl);
                });
}

// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  GradTape tape;
  Tensor xt = tape.watch("x", x);
  Tensor loss = f(xt);
  if (loss.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
  Tensor analytic = tape.backward(loss).at("x");

  double worst = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    Tensor xp = x.clone();
    xp.set(i, x.at(i) + step);
    Tensor xm = x.clone();
    xm.set(i, x.at(i) - step);
    const double numeric = (f(xp).at(0) - f(xm).at(0)) / (2.0 * step);
    const double err = std::abs(analytic.at(i) - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

double gelu_max_derivative() {
  // GELU' peaks near sqrt(2); scan then refine by golden-section.
  auto d = [](double x) { return gelu_grad_scalar(x); };
  double lo = 0.5, hi = 2.5;
  const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = lo, bq = hi;
  for (int it = 0; it < 200; ++it) {
    const double x1 = bq - phi * (bq - a);
    const double x2 = a + phi * (bq - a);
    if (d(x1) > d(x2))
      bq = x2;
    else
      a = x1;
  }
  return d(0.5 * (a + bq));
}

}  // namespace vig
