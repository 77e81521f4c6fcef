#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "vig/tensor.hpp"

namespace vig {

// Reverse-mode gradient tape. Ops executed on watched tensors append nodes
// in execution order, so node ids are already a topological order and the
// backward sweep is a single descending walk. A tape is confined to one
// logical thread and is consumed by backward(); reuse raises LifecycleError.
class GradTape {
 public:
  using BackwardFn = std::function<void(GradTape&, const Tensor& grad_out)>;

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // Register a named leaf (parameter or input) and return a traced handle.
  // Watching the same name twice returns the same handle.
  Tensor watch(const std::string& name, const Tensor& value);

  // Gradients of the scalar loss w.r.t. every watched leaf, by name.
  // Leaves the loss never reached get exact zeros. Consumes the tape.
  std::unordered_map<std::string, Tensor> backward(const Tensor& loss);

  bool consumed() const { return consumed_; }
  size_t num_nodes() const { return nodes_.size(); }
  const std::vector<std::string>& watched_names() const { return watched_order_; }

  // --- op plumbing ---
  int emit(std::vector<int> inputs, BackwardFn fn);
  void accumulate(int node, const Tensor& grad);

 private:
  struct Node {
    std::vector<int> inputs;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<std::string> watched_order_;
  std::unordered_map<std::string, int> watched_node_;
  std::unordered_map<std::string, Tensor> watched_value_;
  bool consumed_ = false;

  void require_live(const char* what) const;
};

// Returns the tape shared by the traced operands (nullptr if none is traced).
// Mixing tensors from two different tapes is a contract violation.
GradTape* tape_of(std::initializer_list<const Tensor*> ts);

}  // namespace vig
