#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vig/error.hpp"

namespace vig {

class GradTape;

enum class DType : uint8_t { Float32 = 1, Float64 = 2 };

inline const char* dtype_name(DType dt) {
  return dt == DType::Float32 ? "f32" : "f64";
}
inline size_t dtype_size(DType dt) {
  return dt == DType::Float32 ? 4 : 8;
}

// Dense row-major n-d array. Copies share the element buffer; ops never
// mutate an existing buffer, they allocate fresh outputs. A tensor that was
// produced under a GradTape carries a node handle back into that tape.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, DType dt = DType::Float32);
  static Tensor full(std::vector<int64_t> shape, double value, DType dt = DType::Float32);
  static Tensor ones(std::vector<int64_t> shape, DType dt = DType::Float32) {
    return full(std::move(shape), 1.0, dt);
  }
  static Tensor identity(int64_t n, DType dt = DType::Float32);
  static Tensor from_values(std::vector<int64_t> shape, const std::vector<double>& values,
                            DType dt = DType::Float32);
  // Gaussian / uniform fills for parameter init and test data.
  static Tensor randn(std::vector<int64_t> shape, std::mt19937_64& rng, double stddev = 1.0,
                      DType dt = DType::Float32);
  static Tensor rand_uniform(std::vector<int64_t> shape, std::mt19937_64& rng, double lo,
                             double hi, DType dt = DType::Float32);

  bool defined() const { return f32_ != nullptr || f64_ != nullptr; }
  DType dtype() const { return dtype_; }
  const std::vector<int64_t>& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t i) const { return shape_.at(static_cast<size_t>(i)); }
  int64_t numel() const;
  // Collapse to a [rows, cols] view: cols = last extent, rows = rest.
  int64_t rows2d() const;
  int64_t cols2d() const { return rank() == 0 ? 1 : shape_.back(); }

  template <typename T>
  std::span<T> data();
  template <typename T>
  std::span<const T> data() const;

  // Scalar element access (converting); row-major flat index.
  double at(int64_t flat) const;
  void set(int64_t flat, double v);
  double at2(int64_t r, int64_t c) const { return at(r * cols2d() + c); }

  // Same buffer, new shape (element count must match). Drops the tape handle;
  // taped reshape lives in ops.hpp.
  Tensor reshaped(std::vector<int64_t> shape) const;
  // Same value, no tape handle.
  Tensor detached() const;
  // Deep copy of the buffer.
  Tensor clone() const;
  Tensor to(DType dt) const;

  bool all_finite() const;
  double max_abs() const;

  // Tape plumbing (set by ops; -1 means untraced).
  GradTape* tape() const { return tape_; }
  int node() const { return node_; }
  void bind(GradTape* tape, int node) {
    tape_ = tape;
    node_ = node;
  }

  std::string shape_str() const;

 private:
  std::vector<int64_t> shape_;
  DType dtype_ = DType::Float32;
  std::shared_ptr<std::vector<float>> f32_;
  std::shared_ptr<std::vector<double>> f64_;
  GradTape* tape_ = nullptr;
  int node_ = -1;

  void alloc();
};

template <>
inline std::span<float> Tensor::data<float>() {
  if (dtype_ != DType::Float32 || !f32_) throw ContractError("tensor is not f32");
  return {f32_->data(), f32_->size()};
}
template <>
inline std::span<double> Tensor::data<double>() {
  if (dtype_ != DType::Float64 || !f64_) throw ContractError("tensor is not f64");
  return {f64_->data(), f64_->size()};
}
template <>
inline std::span<const float> Tensor::data<float>() const {
  if (dtype_ != DType::Float32 || !f32_) throw ContractError("tensor is not f32");
  return {f32_->data(), f32_->size()};
}
template <>
inline std::span<const double> Tensor::data<double>() const {
  if (dtype_ != DType::Float64 || !f64_) throw ContractError("tensor is not f64");
  return {f64_->data(), f64_->size()};
}

// Invoke fn with the scalar type matching dt: fn.template operator()<float|double>().
template <class Fn>
decltype(auto) with_dtype(DType dt, Fn&& fn) {
  if (dt == DType::Float32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);
void require_same_dtype(const Tensor& a, const Tensor& b, const char* what);

// Global toggle for post-op finiteness verification. On by default; the
// training loop turns it off for throughput and checks the loss instead.
bool finite_checks_enabled();
void set_finite_checks(bool on);
void check_finite(const Tensor& t, const char* op_name);

// Thread cap for internal parallelism (matmul, elementwise kernels).
// Resolved from VIG_THREADS at startup; --serial forces 1.
int max_threads();
void set_max_threads(int n);

}  // namespace vig
