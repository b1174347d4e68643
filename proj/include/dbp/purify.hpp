#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dbp/diffusion.hpp"
#include "dbp/nets.hpp"
#include "dbp/tape.hpp"
#include "dbp/tensor.hpp"

namespace dbp {

struct PurifyOptions {
  // Wrap every reverse step in a checkpoint segment.
  bool checkpoint_steps = false;
};

// Draw accounting for one purification run.
struct PurifyStats {
  bool forward_used = false;
  std::size_t reverse_used = 0;
};

// Diffuse x to t_star with the tape's forward draw, run the reverse sampler
// along cfg.step_list, clamp to [0, 1]. x is [B, D]; the tape holds one row
// per sample. Differentiable in x.
Tensor purify(const Tensor& x, const PurifyConfig& cfg, const NoiseTape& tape,
              const Schedule& s, const DenoiserNet& net, const PurifyOptions& opts = {},
              PurifyStats* stats = nullptr);
// Unknown tape entries are drawn from `fresh_seed`.
Tensor purify(const Tensor& x, const PurifyConfig& cfg, const AttackerTape& tape,
              std::uint64_t fresh_seed, const Schedule& s, const DenoiserNet& net,
              const PurifyOptions& opts = {});

struct Classification {
  std::vector<int> labels;
  Tensor losses;  // per-row cross-entropy; undefined without ground truth
};

Classification classify_purified(const Tensor& x, std::span<const int> truth,
                                 const PurifyConfig& cfg, const NoiseTape& tape,
                                 const Schedule& s, const DenoiserNet& denoiser,
                                 const ClassifierNet& classifier);

// Per-sample tape seed for evaluation `draw` of sample `sample_id`.
std::uint64_t sample_tape_seed(std::uint64_t seed, std::uint64_t sample_id, std::uint64_t draw = 0);

// Batch tape stacking one tape per sample id (rows [1, dim] each).
NoiseTape make_batch_tape(std::uint64_t seed, std::span<const std::size_t> sample_ids,
                          std::size_t dim, const PurifyConfig& cfg, std::uint64_t draw = 0);

// Output of one pipeline evaluation on a batch.
struct Evaluation {
  Tensor losses;                 // [B]
  std::vector<int> predictions;  // [B]
  Tensor grad;                   // d(sum of losses)/dx, [B, D]; only when requested
};

// Anything attacks can be run against: maps (x, labels, tape) to losses,
// predictions and input gradients.
class Pipeline {
 public:
  virtual ~Pipeline() = default;
  virtual Evaluation evaluate(const Tensor& x, std::span<const int> labels,
                              const NoiseTape& tape, bool need_grad) const = 0;
  // Reverse draws per tape; tapes for this pipeline must have this many.
  virtual std::size_t reverse_draws() const = 0;
};

class PurifyPipeline : public Pipeline {
 public:
  PurifyPipeline(PurifyConfig cfg, const Schedule& schedule, const DenoiserNet& denoiser,
                 const ClassifierNet& classifier, PurifyOptions opts = {});

  Evaluation evaluate(const Tensor& x, std::span<const int> labels, const NoiseTape& tape,
                      bool need_grad) const override;
  std::size_t reverse_draws() const override { return cfg_.stochastic_draws(); }
  const PurifyConfig& config() const { return cfg_; }

 private:
  PurifyConfig cfg_;
  const Schedule& schedule_;
  const DenoiserNet& denoiser_;
  const ClassifierNet& classifier_;
  PurifyOptions opts_;
};

// Worst-of-k accuracy: a sample counts only if every one of k independent
// stochastic evaluations classifies it correctly. Evaluation j of sample i
// uses the tape seeded by sample_tape_seed(seed, i, j), so the draws for a
// smaller k are a prefix of those for a larger k.
double repeated_eval_accuracy(const Tensor& x, std::span<const int> labels,
                              const Pipeline& pipeline, int k, std::uint64_t seed,
                              std::size_t batch_size = 64);
// Same selection with caller-provided batch tapes, one per evaluation; a
// fixed tape repeated k times makes the result independent of k.
double repeated_eval_accuracy(const Tensor& x, std::span<const int> labels,
                              const Pipeline& pipeline, std::span<const NoiseTape> tapes);

}  // namespace dbp
