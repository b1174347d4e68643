#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dbp/purify.hpp"
#include "dbp/tape.hpp"
#include "dbp/tensor.hpp"

namespace dbp {

enum class Norm { Linf, L2 };

std::string norm_name(Norm n);
Norm parse_norm(const std::string& name);

struct AttackConfig {
  Norm norm = Norm::Linf;
  double radius = 8.0 / 255.0;
  double step_size = 2.0 / 255.0;
  int steps = 20;
  int eot_samples = 1;
  KnowledgeSetting knowledge = KnowledgeSetting::white_box();
  bool random_start = false;
  // Keys fresh draws (EoT tapes, random start, victim choice).
  std::uint64_t seed = 0;
  bool record_grads = false;

  void validate() const;
};

// One attacked batch. Rows are samples; `ids` key every per-sample random
// draw so a row's result does not depend on the rest of the batch.
struct AttackBatch {
  Tensor x;                          // clean inputs [B, D]
  std::vector<int> labels;           // [B]
  std::vector<std::size_t> ids;      // [B]
  std::vector<NoiseTape> victim;     // per-row victim tapes, rows [1, D]
};

struct AttackReport {
  Tensor adversarial;               // [B, D]
  std::vector<Tensor> trajectory;   // steps + 1 deltas from the clean input
  std::vector<double> losses;       // attacker objective (batch mean) at each iterate
  std::vector<Tensor> grad_records; // gradient estimate per step, when recorded
  Tensor clean_loss;                // victim loss on clean inputs [B]
  Tensor final_loss;                // victim loss on adversarial inputs [B]
  std::vector<int> clean_predictions;
  std::vector<int> predictions;
  std::vector<char> success;        // victim misclassifies the adversarial input
  std::vector<std::size_t> victim_choice;  // chosen tape per row (semi attacks)

  double robust_accuracy() const;
  double mean_loss_increase() const;
};

// Gradient estimate of the summed loss for a batch: mean of n per-tape
// gradients, with unknown entries of each row's view drawn fresh per sample.
// Fully known views are evaluated once.
Tensor eot_gradient(const Tensor& x, std::span<const int> labels,
                    std::span<const std::size_t> ids, std::span<const AttackerTape> views,
                    int n, const Pipeline& pipeline, std::uint64_t seed,
                    double* mean_loss = nullptr);

// One projected step: x <- Proj_{B(x0, r) and [0,1]}(x + step * dir(g)).
Tensor pgd_update(const Tensor& x, const Tensor& x0, const Tensor& g, const AttackConfig& cfg);

// Gradient oracle used by the attack loop; returns the gradient at x and
// writes the batch-mean objective.
using GradientOracle = std::function<Tensor(const Tensor& x, int step, double* loss)>;

// Generic loop shared by every attack; victim tapes are used only for the
// clean and final evaluations.
AttackReport run_attack(const AttackBatch& batch, const AttackConfig& cfg,
                        const Pipeline& pipeline, const GradientOracle& oracle,
                        const NoiseTape& victim_tape);

// White-box PGD with EoT over fresh tapes.
AttackReport pgd(const AttackBatch& batch, const AttackConfig& cfg, const Pipeline& pipeline);
// Known tape entries pinned to the victim's, unknown ones resampled per EoT
// sample at every step.
AttackReport dw_attack(const AttackBatch& batch, KnowledgeSetting setting,
                       const AttackConfig& cfg, const Pipeline& pipeline);
// Exact mean gradient over each row's finite tape set; the victim evaluates
// with one tape per row chosen uniformly from the set.
AttackReport dw_semi_attack(const AttackBatch& batch,
                            std::span<const std::vector<NoiseTape>> tape_sets,
                            const AttackConfig& cfg, const Pipeline& pipeline);

// Dispatch on cfg.knowledge (semi sets are drawn from cfg.seed).
AttackReport attack(const AttackBatch& batch, const AttackConfig& cfg, const Pipeline& pipeline);

double gradient_similarity(const Tensor& g1, const Tensor& g2);

struct LandscapeGrid {
  std::vector<double> coords;  // shared a and b axis values
  std::vector<double> loss;    // row-major [a][b]
  Tensor u1;                   // unit direction of dir1
  Tensor u2;                   // unit component of dir2 orthogonal to dir1
  int resolution = 0;

  double at(int ia, int ib) const { return loss[static_cast<std::size_t>(ia * resolution + ib)]; }
  // Plane coordinates (in L2 units) of a perturbation.
  std::pair<double, double> project(const Tensor& delta) const;
  std::string to_csv() const;
};

// Loss of a single sample at x + a u1 + b u2 over [-extent, extent]^2 on an
// odd-sized grid, evaluated under a fixed tape.
LandscapeGrid landscape_grid(const Tensor& x, int label, const Tensor& dir1, const Tensor& dir2,
                             double extent, int resolution, const Pipeline& pipeline,
                             const NoiseTape& tape);

void save_report(const std::filesystem::path& path, const AttackReport& report,
                 const AttackConfig& cfg);

}  // namespace dbp
