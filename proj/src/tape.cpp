#include "vig/tape.hpp"

namespace vig {

void GradTape::require_live(const char* what) const {
  if (consumed_)
    throw LifecycleError(std::string(what) + ": tape already consumed by backward(); "
                                             "run a fresh forward pass");
}

Tensor GradTape::watch(const std::string& name, const Tensor& value) {
  require_live("watch");
  auto it = watched_node_.find(name);
  if (it != watched_node_.end()) {
    Tensor t = watched_value_.at(name);
    return t;
  }
  Tensor t = value.detached();
  int id = emit({}, nullptr);
  t.bind(this, id);
  watched_order_.push_back(name);
  watched_node_.emplace(name, id);
  watched_value_.emplace(name, t);
  return t;
}

int GradTape::emit(std::vector<int> inputs, BackwardFn fn) {
  require_live("emit");
  nodes_.push_back(Node{std::move(inputs), std::move(fn)});
  return static_cast<int>(nodes_.size()) - 1;
}

void GradTape::accumulate(int node, const Tensor& grad) {
  if (node < 0) return;
  auto idx = static_cast<size_t>(node);
  if (idx >= grads_.size()) grads_.resize(nodes_.size());
  if (!grads_[idx].defined()) {
    grads_[idx] = grad.clone();
    return;
  }
  Tensor& acc = grads_[idx];
  require_same_shape(acc, grad, "grad accumulate");
  with_dtype(acc.dtype(), [&]<typename T>() {
    auto a = acc.data<T>();
    auto g = grad.data<T>();
    for (size_t i = 0; i < a.size(); ++i) a[i] += g[i];
  });
}

std::unordered_map<std::string, Tensor> GradTape::backward(const Tensor& loss) {
  require_live("backward");
  if (loss.numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + loss.shape_str());
  if (loss.tape() != this || loss.node() < 0)
    throw ContractError("backward: loss was not produced under this tape");

  consumed_ = true;
  grads_.resize(nodes_.size());
  grads_[static_cast<size_t>(loss.node())] = Tensor::ones(loss.shape(), loss.dtype());

  std::vector<char> is_leaf(nodes_.size(), 0);
  for (const auto& [name, wid] : watched_node_) is_leaf[static_cast<size_t>(wid)] = 1;

  for (int id = loss.node(); id >= 0; --id) {
    auto uid = static_cast<size_t>(id);
    if (!grads_[uid].defined()) continue;
    if (nodes_[uid].backward) nodes_[uid].backward(*this, grads_[uid]);
    // Free saved activations and this node's grad as soon as they are spent.
    nodes_[uid].backward = nullptr;
    if (!is_leaf[uid]) grads_[uid] = Tensor();
  }

  std::unordered_map<std::string, Tensor> out;
  for (const std::string& name : watched_order_) {
    int id = watched_node_.at(name);
    auto uid = static_cast<size_t>(id);
    if (uid < grads_.size() && grads_[uid].defined())
      out.emplace(name, grads_[uid]);
    else
      out.emplace(name, Tensor::zeros(watched_value_.at(name).shape(),
                                      watched_value_.at(name).dtype()));
  }
  grads_.clear();
  return out;
}

GradTape* tape_of(std::initializer_list<const Tensor*> ts) {
  GradTape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (!t || !t->tape()) continue;
    if (tape && t->tape() != tape)
      throw ContractError("operands belong to two different gradient tapes");
    tape = t->tape();
  }
  return tape;
}

}  // namespace vig
