#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "dbp/tensor.hpp"

namespace dbp {

// Graph recording is per thread. Disabling it makes every op produce leaves.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// The loss must hold exactly one element.
void backward(const Tensor& loss);

// Returns d(loss)/d(w) for each requested tensor without touching any
// leaf's stored grad. Unreachable inputs get zero gradients.
std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt);

// Vector-Jacobian product: like grad() but seeded with `grad_output`
// instead of requiring a scalar output.
std::vector<Tensor> vjp(const Tensor& output, const Tensor& grad_output,
                        std::span<const Tensor> wrt);

using SegmentFn = std::function<Tensor(std::span<const Tensor>)>;

// Runs `fn` without recording its intermediates. On the backward pass the
// segment is re-executed from `inputs` and differentiated. The recomputed
// output must match the original bit-for-bit, otherwise DeterminismError.
// Tensors that need gradients must reach `fn` through `inputs`; tensors
// captured by the closure are treated as constants by grad(), while
// backward() still accumulates into captured parameters.
Tensor checkpoint_segment(const SegmentFn& fn, std::vector<Tensor> inputs);

// True while a checkpointed segment is executing (first pass or replay).
bool inside_checkpoint_segment();

// Instrumentation: live and peak counts of recorded (non-checkpoint) graph
// nodes. Checkpoint boundary nodes are not counted.
struct GraphCounters {
  static long live();
  static long peak();
  static void reset_peak();
};

}  // namespace dbp
