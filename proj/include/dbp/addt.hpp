#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dbp/diffusion.hpp"
#include "dbp/nets.hpp"
#include "dbp/tensor.hpp"

namespace dbp {

enum class PerturbationMode { RBGM, L2Normalized, LinfProjected, GaussianReordered };
enum class AddtObjective { ClassifierCE, ReconstructionMSE };

std::string mode_name(PerturbationMode m);
PerturbationMode parse_mode(const std::string& name);
std::string objective_name(AddtObjective o);
AddtObjective parse_objective(const std::string& name);

struct ADDTConfig {
  double lambda_unit = 0.03;
  double lambda_min = 0.0;
  double lambda_max = 0.3;
  int cgpo_steps = 5;
  PerturbationMode perturbation_mode = PerturbationMode::RBGM;
  AddtObjective objective = AddtObjective::ClassifierCE;
  double delta_init_std = 1e-2;
  // LinfProjected only: PGD ball and step in pixel units.
  double linf_radius = 8.0 / 255.0;
  double linf_step = 2.0 / 255.0;

  // The l_inf ablation settings: lambda_unit = 1, lambda_max = 10.
  static ADDTConfig linf_ablation();
  void validate() const;
};

struct Perturbation {
  Tensor delta;           // accumulated raw gradient signal
  Tensor mapped;          // eps_delta after the mode's mapping
  double objective = 0.0; // CGPO objective at the last refinement step
};

// Rank-based Gaussian mapping. Rows of a [B, D] tensor are mapped
// independently; a 1-D tensor is a single row. out[i] takes the value of
// sorted(eps_s) at the (stable, ascending) rank of delta[i].
Tensor rbgm(const Tensor& delta, const Tensor& eps_s);

Tensor map_perturbation(const Tensor& delta, const Tensor& eps_s, PerturbationMode mode,
                        double linf_radius = 8.0 / 255.0);

// gamma_t = sqrt(ab_t / (1 - ab_t))
double gamma_t(const Schedule& s, int t);
double lambda_t(const Schedule& s, int t, const ADDTConfig& cfg);

// sqrt(ab) x0 + sqrt(1 - lam^2) sqrt(1 - ab) eps + lam sqrt(1 - ab) eps_delta
Tensor mix_perturbed_input(const Tensor& x0, int t, const Tensor& eps, const Tensor& eps_delta,
                           double lam, const Schedule& s);
// Per-row timesteps and mixing weights for x0 [B, D].
Tensor mix_perturbed_input(const Tensor& x0, std::span<const int> t, const Tensor& eps,
                           const Tensor& eps_delta, std::span<const double> lam,
                           const Schedule& s);
// LinfProjected variant: the perturbation is added to the image,
// sqrt(ab) (x0 + lam delta) + sqrt(1 - ab) eps.
Tensor mix_linf_input(const Tensor& x0, std::span<const int> t, const Tensor& eps,
                      const Tensor& delta, std::span<const double> lam, const Schedule& s);

// Per-row one-step reconstruction (x_t - sqrt(1 - ab) eps_pred) / sqrt(ab).
Tensor recover_rows(const Tensor& xt, std::span<const int> t, const Tensor& eps_pred,
                    const Schedule& s);

// Classifier-guided perturbation optimization with the mapping treated as
// the identity in the backward pass. Draws come from `tape_seed`.
Perturbation cgpo(const Tensor& x0, std::span<const int> y, std::span<const int> t,
                  const DenoiserNet& denoiser, const ClassifierNet& classifier,
                  const ADDTConfig& cfg, const Schedule& s, std::uint64_t tape_seed);

// The training noise for the mixed input: the fresh eps drawn after CGPO.
Tensor addt_train_noise(const Shape& shape, const ADDTConfig& cfg, std::uint64_t tape_seed);

// Summed || gamma_t (x0 - P(x'_t, t)) ||^2 with the factor inside the norm.
Tensor addt_loss(const DenoiserNet& denoiser, const Tensor& x0, std::span<const int> t,
                 const Tensor& eps, const Tensor& mapped, std::span<const double> lam,
                 const Schedule& s, PerturbationMode mode = PerturbationMode::RBGM);

struct ADDTStep {
  double loss = 0.0;            // batch mean before the update
  double cgpo_objective = 0.0;  // batch mean
};

// CGPO followed by one optimizer step on the denoiser's parameters.
ADDTStep addt_train_step(DenoiserNet& denoiser, const Tensor& x0, std::span<const int> y,
                         std::span<const int> t, const ClassifierNet& classifier,
                         const ADDTConfig& cfg, Adam& optimizer, const Schedule& s,
                         std::uint64_t tape_seed);

}  // namespace dbp
