#pragma once

#include <functional>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "charm/tensor.hpp"

namespace charm {

// Reverse-mode tape. One tape per forward pass; nodes are appended in
// execution order, so node index order is a topological order by
// construction (every parent id < child id, asserted at record time).
class Tape {
 public:
  // Backward closures get (tape, own node id) so they can read their own
  // output gradient without capturing an id that does not exist yet.
  using BackwardFn = std::function<void(Tape&, int)>;

  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched during backward
    bool requires_grad = false;
    BackwardFn backward;  // accumulates into parent grads
  };

  int leaf(Tensor value, bool requires_grad) {
    require_finite(value, "leaf");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return (int)nodes_.size() - 1;
  }

  int record(Tensor value, bool requires_grad, const std::vector<int>& parents,
             BackwardFn backward) {
    require_finite(value, "op output");
    int id = (int)nodes_.size();
    for (int p : parents)
      if (p < 0 || p >= id) throw std::logic_error("tape: parent id out of order (cycle?)");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return id;
  }

  const Tensor& val(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].requires_grad; }

  // Gradient accumulator, allocated (zeros) on first access.
  Tensor& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
  }

  bool grad_live(int id) const { return !nodes_[id].grad.data.empty(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(int loss_id) {
    if (loss_id < 0 || loss_id >= (int)nodes_.size()) throw std::invalid_argument("tape: bad id");
    if (nodes_[loss_id].value.numel() != 1)
      throw std::invalid_argument("tape: backward requires a scalar loss");
    if (!nodes_[loss_id].requires_grad)
      throw std::invalid_argument("tape: loss does not require grad");
    grad(loss_id).data[0] = 1.0;
    for (int i = loss_id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.requires_grad && !n.grad.data.empty() && n.backward) n.backward(*this, i);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

// Lightweight handle to a tape node.
struct Value {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& v() const { return tape->val(id); }
  const Shape& shape() const { return v().shape; }
  bool needs_grad() const { return tape->needs_grad(id); }
};

inline Value make_leaf(Tape& t, Tensor x, bool requires_grad = false) {
  return Value{&t, t.leaf(std::move(x), requires_grad)};
}

// Binds master parameter tensors onto a tape, once each, so that a parameter
// used from several places accumulates all its gradient on a single node.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, bool track_grad) : tape_(&tape), track_(track_grad) {}

  Value operator()(const Tensor& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return Value{tape_, it->second};
    int id = tape_->leaf(p, track_);
    bound_.emplace(&p, id);
    return Value{tape_, id};
  }

  // Gradient of a bound parameter after backward; nullptr when the parameter
  // never entered the graph or received no gradient.
  const Tensor* grad_of(const Tensor& p) const {
    auto it = bound_.find(&p);
    if (it == bound_.end()) return nullptr;
    if (!tape_->grad_live(it->second)) return nullptr;
    return &tape_->grad(it->second);
  }

  bool bound(const Tensor& p) const { return bound_.count(&p) > 0; }
  bool tracking() const { return track_; }

 private:
  Tape* tape_;
  bool track_;
  std::unordered_map<const Tensor*, int> bound_;
};

}  // namespace charm
