#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "poolnet/tensor.hpp"

namespace poolnet {

// Ordered record of differentiable operations.
//
// Each operation appends one node after its inputs exist, so the node list is
// already in topological order and backward() is a single reverse sweep.
// A tape constructed with recording=false ignores every record() call; that
// is the inference mode.
template <typename T>
class BasicTape {
 public:
  using TensorType = BasicTensor<T>;
  // Receives the gradient of the node's output and accumulates into the
  // node's inputs.
  using BackwardFn = std::function<void(std::span<const T> output_grad)>;

  explicit BasicTape(bool recording = true) : recording_(recording) {}

  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  bool any_requires_grad(std::initializer_list<TensorType> inputs) const {
    if (!recording_) {
      return false;
    }
    for (const auto& t : inputs) {
      if (t.defined() && t.requires_grad()) {
        return true;
      }
    }
    return false;
  }

  // Records `output` as produced from `inputs`. Returns false (and records
  // nothing) when no input needs a gradient.
  bool record(std::vector<TensorType> inputs, TensorType output,
              BackwardFn backward) {
    if (!recording_) {
      return false;
    }
    bool needed = false;
    for (const auto& t : inputs) {
      needed = needed || (t.defined() && t.requires_grad());
    }
    if (!needed) {
      return false;
    }
    output.set_requires_grad(true);
    producer_[output.identity()] = nodes_.size();
    nodes_.push_back(Node{std::move(inputs), std::move(output),
                          std::move(backward)});
    return true;
  }

  // Seeds d(loss)/d(loss) = 1 and propagates to every tensor that requires a
  // gradient. Gradients accumulate; callers zero parameter grads between
  // steps.
  void backward(TensorType loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " +
                          shape_to_string(loss.shape()));
    }
    auto it = producer_.find(loss.identity());
    if (it == producer_.end()) {
      if (loss.requires_grad()) {
        loss.mutable_grad()[0] += T(1);
        return;
      }
      throw ContractError("backward(): loss was not produced on this tape");
    }
    loss.mutable_grad()[0] += T(1);
    for (std::size_t i = it->second + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.output.has_grad()) {
        continue;
      }
      node.backward(node.output.grad());
    }
  }

  // Topological-order check used by tests: every input of every node is
  // either a leaf or the output of an earlier node.
  bool is_topologically_ordered() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      for (const auto& in : nodes_[i].inputs) {
        auto it = producer_.find(in.identity());
        if (it != producer_.end() && it->second >= i) {
          return false;
        }
      }
    }
    return true;
  }

  void clear() {
    nodes_.clear();
    producer_.clear();
  }

 private:
  struct Node {
    std::vector<TensorType> inputs;
    TensorType output;
    BackwardFn backward;
  };

  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_map<const void*, std::size_t> producer_;
};

using Tape = BasicTape<float>;
using Tape64 = BasicTape<double>;

}  // namespace poolnet
