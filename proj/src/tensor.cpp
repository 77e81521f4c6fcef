#include "vig/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

namespace vig {

namespace {

std::atomic<bool> g_finite_checks{true};

int resolve_default_threads() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  if (const char* env = std::getenv("VIG_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1 && v < hw) hw = v;
  }
  return hw;
}

std::atomic<int> g_max_threads{resolve_default_threads()};

}  // namespace

bool finite_checks_enabled() { return g_finite_checks.load(std::memory_order_relaxed); }
void set_finite_checks(bool on) { g_finite_checks.store(on, std::memory_order_relaxed); }

int max_threads() { return g_max_threads.load(std::memory_order_relaxed); }
void set_max_threads(int n) { g_max_threads.store(n < 1 ? 1 : n, std::memory_order_relaxed); }

void check_finite(const Tensor& t, const char* op_name) {
  if (!finite_checks_enabled()) return;
  if (!t.all_finite())
    throw NumericError(std::string("non-finite values in output of ") + op_name);
}

int64_t Tensor::numel() const {
  int64_t n = 1;
  for (int64_t e : shape_) n *= e;
  return n;
}

int64_t Tensor::rows2d() const {
  if (rank() == 0) return 1;
  int64_t r = 1;
  for (size_t i = 0; i + 1 < shape_.size(); ++i) r *= shape_[i];
  return r;
}

void Tensor::alloc() {
  for (int64_t e : shape_)
    if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str());
  size_t n = static_cast<size_t>(numel());
  if (dtype_ == DType::Float32)
    f32_ = std::make_shared<std::vector<float>>(n, 0.0f);
  else
    f64_ = std::make_shared<std::vector<double>>(n, 0.0);
}

Tensor Tensor::zeros(std::vector<int64_t> shape, DType dt) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = dt;
  t.alloc();
  return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  with_dtype(dt, [&]<typename T>() {
    for (T& x : t.data<T>()) x = static_cast<T>(value);
  });
  return t;
}

Tensor Tensor::identity(int64_t n, DType dt) {
  Tensor t = zeros({n, n}, dt);
  with_dtype(dt, [&]<typename T>() {
    auto d = t.data<T>();
    for (int64_t i = 0; i < n; ++i) d[static_cast<size_t>(i * n + i)] = T(1);
  });
  return t;
}

Tensor Tensor::from_values(std::vector<int64_t> shape, const std::vector<double>& values,
                           DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  if (static_cast<int64_t>(values.size()) != t.numel())
    throw DimensionError("from_values: " + std::to_string(values.size()) +
                         " values for shape " + t.shape_str());
  with_dtype(dt, [&]<typename T>() {
    auto d = t.data<T>();
    for (size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::randn(std::vector<int64_t> shape, std::mt19937_64& rng, double stddev, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  std::normal_distribution<double> dist(0.0, stddev);
  with_dtype(dt, [&]<typename T>() {
    for (T& x : t.data<T>()) x = static_cast<T>(dist(rng));
  });
  return t;
}

Tensor Tensor::rand_uniform(std::vector<int64_t> shape, std::mt19937_64& rng, double lo,
                            double hi, DType dt) {
  Tensor t = zeros(std::move(shape), dt);
  std::uniform_real_distribution<double> dist(lo, hi);
  with_dtype(dt, [&]<typename T>() {
    for (T& x : t.data<T>()) x = static_cast<T>(dist(rng));
  });
  return t;
}

double Tensor::at(int64_t flat) const {
  if (flat < 0 || flat >= numel()) throw IndexError("flat index out of range");
  return with_dtype(dtype_, [&]<typename T>() -> double {
    return static_cast<double>(data<T>()[static_cast<size_t>(flat)]);
  });
}

void Tensor::set(int64_t flat, double v) {
  if (flat < 0 || flat >= numel()) throw IndexError("flat index out of range");
  with_dtype(dtype_, [&]<typename T>() {
    data<T>()[static_cast<size_t>(flat)] = static_cast<T>(v);
  });
}

Tensor Tensor::reshaped(std::vector<int64_t> shape) const {
  Tensor t = *this;
  t.shape_ = std::move(shape);
  t.tape_ = nullptr;
  t.node_ = -1;
  if (t.numel() != numel())
    throw DimensionError("reshape " + shape_str() + " -> " + t.shape_str() +
                         " changes element count");
  return t;
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t = zeros(shape_, dtype_);
  with_dtype(dtype_, [&]<typename T>() {
    auto src = data<T>();
    auto dst = t.data<T>();
    std::copy(src.begin(), src.end(), dst.begin());
  });
  return t;
}

Tensor Tensor::to(DType dt) const {
  if (dt == dtype_) return clone();
  Tensor t = zeros(shape_, dt);
  for (int64_t i = 0; i < numel(); ++i) t.set(i, at(i));
  return t;
}

bool Tensor::all_finite() const {
  return with_dtype(dtype_, [&]<typename T>() {
    for (T x : data<T>())
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  });
}

double Tensor::max_abs() const {
  return with_dtype(dtype_, [&]<typename T>() {
    double m = 0.0;
    for (T x : data<T>()) m = std::max(m, std::abs(static_cast<double>(x)));
    return m;
  });
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << "]";
  return os.str();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* what) {
  if (a.dtype() != b.dtype())
    throw ContractError(std::string(what) + ": dtype mismatch " +
                        dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()));
}

}  // namespace vig
