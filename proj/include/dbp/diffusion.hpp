#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dbp/tensor.hpp"

namespace dbp {

// Noise levels for t = 1..T. Index 0 of the public accessors means the
// clean image (alpha_bar = 1).
struct Schedule {
  int T = 0;
  std::vector<double> beta;       // beta[t-1]
  std::vector<double> alpha_bar;  // alpha_bar[t-1]

  static Schedule from_betas(std::vector<double> betas);

  double beta_at(int t) const;
  double alpha_bar_at(int t) const;

  std::string to_json() const;
  static Schedule from_json(const std::string& text);
};

Schedule make_linear_schedule(int T, double beta_start, double beta_end);
// Linear schedule with the usual 1e-4..0.02 endpoints rescaled by 1000/T,
// so a short chain covers the same noise range as a 1000-step one. The end
// value is capped at 0.999 for T < 21.
Schedule default_schedule(int T);

enum class Sampler { DDPM, DDIM };

std::string sampler_name(Sampler s);
Sampler parse_sampler(const std::string& name);

struct PurifyConfig {
  Sampler sampler = Sampler::DDPM;
  int t_star = 0;
  std::vector<int> step_list{0};

  // Evenly spaced reverse steps from t_star to 0 using `nfe` evaluations.
  static PurifyConfig make(Sampler sampler, int t_star, int nfe);
  void validate() const;
  int nfe() const { return static_cast<int>(step_list.size()) - 1; }
  // Reverse-step noise draws the sampler consumes from a tape.
  std::size_t stochastic_draws() const;
};

int default_t_star(int T);

std::vector<int> nfe_subsequence(int t_star, int nfe);

// x_t = sqrt(ab) x0 + sqrt(1 - ab) eps
Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const Schedule& s);
Tensor forward_diffuse_ab(const Tensor& x0, double alpha_bar, const Tensor& eps);

// x0_hat = (x_t - sqrt(1 - ab) eps_pred) / sqrt(ab)
Tensor recover_onestep(const Tensor& xt, int t, const Tensor& eps_pred, const Schedule& s);
Tensor recover_onestep_ab(const Tensor& xt, double alpha_bar, const Tensor& eps_pred);

// One ancestral step t -> t-1. The noise term is dropped at t = 1.
Tensor ddpm_reverse_step(const Tensor& xt, int t, const Tensor& eps_pred, const Tensor& eps,
                         const Schedule& s);
// Same update with explicit coefficients; `eps` may be undefined for no noise.
Tensor ddpm_step_coeffs(const Tensor& xt, double beta, double alpha_bar,
                        const Tensor& eps_pred, const Tensor& eps);
// Ancestral step across a gap t -> t_prev using the effective
// beta = 1 - ab_t / ab_prev (exactly beta_t when t_prev = t - 1).
// No noise is added when t_prev = 0.
Tensor ddpm_skip_step(const Tensor& xt, int t, int t_prev, const Tensor& eps_pred,
                      const Tensor& eps, const Schedule& s);

// Deterministic (eta = 0) step.
Tensor ddim_reverse_step(const Tensor& xt, int t, int t_prev, const Tensor& eps_pred,
                         const Schedule& s);
Tensor ddim_step_ab(const Tensor& xt, double ab_t, double ab_prev, const Tensor& eps_pred);

// Noise predictor with one timestep per batch row.
using EpsModel = std::function<Tensor(const Tensor& xt, std::span<const int> t)>;

// Squared error between eps and the prediction at the diffused point, summed
// over every element.
Tensor diffusion_loss(const EpsModel& model, const Tensor& x0, int t, const Tensor& eps,
                      const Schedule& s);
// Per-row timesteps; x0 is [B, D].
Tensor diffusion_loss(const EpsModel& model, const Tensor& x0, std::span<const int> t,
                      const Tensor& eps, const Schedule& s);

}  // namespace dbp
