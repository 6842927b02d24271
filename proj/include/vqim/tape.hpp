#pragma once

#include <functional>
#include <string>

#include "vqim/tensor.hpp"

namespace vqim {

// Reverse-mode tape. Ops append nodes in execution order, so reverse
// iteration is a valid topological replay. Backward rules accumulate with
// += : a tensor consumed twice receives the sum of both contributions.
// A tape is single-threaded; run parallel batches on disjoint tapes.
template <typename T>
class TapeT {
 public:
  struct Node {
    std::function<void()> backward;
  };

  void record(std::function<void()> backward_fn) {
    nodes_.push_back(Node{std::move(backward_fn)});
  }

  size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse.
  void backward(TensorT<T>& loss) {
    if (loss.size() != 1) throw ShapeError("backward() expects a scalar loss");
    if (loss.requires_grad()) loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
  }

 private:
  std::vector<Node> nodes_;
};

using Tape = TapeT<float>;
using Tape64 = TapeT<double>;

// True when the op must be recorded: a tape is present and some input wants
// gradients.
template <typename T>
inline bool track(const TapeT<T>* tape, std::initializer_list<const TensorT<T>*> inputs) {
  if (!tape) return false;
  for (const auto* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace vqim
