#include "dbp/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "dbp/error.hpp"
#include "dbp/ops.hpp"

namespace dbp {

namespace {

constexpr double kMinAlphaBar = 1e-12;

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void check_t(const Schedule& s, int t) {
  if (t < 1 || t > s.T) {
    throw ConfigError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(s.T) +
                      "]");
  }
}

// Column of per-row coefficients, shape [B, 1], broadcast over features.
Tensor row_coefficients(std::span<const int> t, std::size_t rows,
                        const std::function<double(int)>& f) {
  if (t.size() != rows) {
    throw ShapeError("got " + std::to_string(t.size()) + " timesteps for " +
                     std::to_string(rows) + " rows");
  }
  Buffer v(rows);
  for (std::size_t i = 0; i < rows; ++i) v[i] = f(t[i]);
  return Tensor({rows, 1}, std::move(v));
}

}  // namespace

Schedule Schedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("schedule needs at least one step");
  Schedule s;
  s.T = static_cast<int>(betas.size());
  double prod = 1.0;
  for (std::size_t i = 0; i < betas.size(); ++i) {
    const double b = betas[i];
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta values must lie in (0, 1)");
    if (i > 0 && b < betas[i - 1]) throw ConfigError("beta values must be non-decreasing");
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  s.beta = std::move(betas);
  return s;
}

double Schedule::beta_at(int t) const {
  check_t(*this, t);
  return beta[static_cast<std::size_t>(t - 1)];
}

double Schedule::alpha_bar_at(int t) const {
  if (t == 0) return 1.0;
  check_t(*this, t);
  return alpha_bar[static_cast<std::size_t>(t - 1)];
}

std::string Schedule::to_json() const {
  nlohmann::json j = {{"T", T}, {"beta", beta}};
  return j.dump();
}

Schedule Schedule::from_json(const std::string& text) {
  try {
    auto j = nlohmann::json::parse(text);
    Schedule s = from_betas(j.at("beta").get<std::vector<double>>());
    if (j.at("T").get<int>() != s.T) throw ConfigError("schedule T does not match beta count");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad schedule JSON: ") + e.what());
  }
}

Schedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + frac * (beta_end - beta_start);
  }
  return Schedule::from_betas(std::move(betas));
}

Schedule default_schedule(int T) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  const double scale = 1000.0 / T;
  return make_linear_schedule(T, 1e-4 * scale, std::min(0.02 * scale, 0.999));
}

std::string sampler_name(Sampler s) { return s == Sampler::DDPM ? "ddpm" : "ddim"; }

Sampler parse_sampler(const std::string& name) {
  if (name == "ddpm") return Sampler::DDPM;
  if (name == "ddim") return Sampler::DDIM;
  throw ConfigError("unknown sampler '" + name + "'");
}

int default_t_star(int T) { return static_cast<int>(std::lround(0.1 * T)); }

std::vector<int> nfe_subsequence(int t_star, int nfe) {
  if (nfe < 1) throw ConfigError("nfe must be at least 1");
  if (nfe > t_star) {
    throw ConfigError("nfe " + std::to_string(nfe) + " exceeds t_star " + std::to_string(t_star));
  }
  std::vector<int> steps;
  for (int i = 0; i <= nfe; ++i) {
    const long num = static_cast<long>(t_star) * (nfe - i);
    steps.push_back(static_cast<int>((2 * num + nfe) / (2L * nfe)));
  }
  return steps;
}

PurifyConfig PurifyConfig::make(Sampler sampler, int t_star, int nfe) {
  PurifyConfig c;
  c.sampler = sampler;
  c.t_star = t_star;
  c.step_list = t_star == 0 ? std::vector<int>{0} : nfe_subsequence(t_star, nfe);
  return c;
}

void PurifyConfig::validate() const {
  if (t_star < 0) throw ConfigError("t_star must be non-negative");
  if (step_list.empty() || step_list.front() != t_star || step_list.back() != 0) {
    throw ConfigError("step list must run from t_star down to 0");
  }
  for (std::size_t i = 1; i < step_list.size(); ++i) {
    if (step_list[i] >= step_list[i - 1]) throw ConfigError("step list must strictly decrease");
  }
}

std::size_t PurifyConfig::stochastic_draws() const {
  if (sampler == Sampler::DDIM || step_list.size() < 2) return 0;
  return step_list.size() - 2;
}

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const Schedule& s) {
  if (t != 0) check_t(s, t);
  return forward_diffuse_ab(x0, s.alpha_bar_at(t), eps);
}

Tensor forward_diffuse_ab(const Tensor& x0, double alpha_bar, const Tensor& eps) {
  check_same_shape(x0, eps, "forward_diffuse");
  return add(scale(x0, std::sqrt(alpha_bar)), scale(eps, std::sqrt(1.0 - alpha_bar)));
}

Tensor recover_onestep(const Tensor& xt, int t, const Tensor& eps_pred, const Schedule& s) {
  check_t(s, t);
  return recover_onestep_ab(xt, s.alpha_bar_at(t), eps_pred);
}

Tensor recover_onestep_ab(const Tensor& xt, double alpha_bar, const Tensor& eps_pred) {
  check_same_shape(xt, eps_pred, "recover_onestep");
  if (alpha_bar < kMinAlphaBar) throw NumericError("alpha_bar too small for one-step recovery");
  return scale(sub(xt, scale(eps_pred, std::sqrt(1.0 - alpha_bar))), 1.0 / std::sqrt(alpha_bar));
}

Tensor ddpm_step_coeffs(const Tensor& xt, double beta, double alpha_bar,
                        const Tensor& eps_pred, const Tensor& eps) {
  check_same_shape(xt, eps_pred, "ddpm_reverse_step");
  if (1.0 - alpha_bar < kMinAlphaBar) throw NumericError("alpha_bar too close to 1");
  Tensor mean = scale(sub(xt, scale(eps_pred, beta / std::sqrt(1.0 - alpha_bar))),
                      1.0 / std::sqrt(1.0 - beta));
  if (!eps.defined()) return mean;
  check_same_shape(xt, eps, "ddpm_reverse_step");
  return add(mean, scale(eps, std::sqrt(beta)));
}

Tensor ddpm_reverse_step(const Tensor& xt, int t, const Tensor& eps_pred, const Tensor& eps,
                         const Schedule& s) {
  check_t(s, t);
  return ddpm_step_coeffs(xt, s.beta_at(t), s.alpha_bar_at(t), eps_pred,
                          t == 1 ? Tensor() : eps);
}

Tensor ddpm_skip_step(const Tensor& xt, int t, int t_prev, const Tensor& eps_pred,
                      const Tensor& eps, const Schedule& s) {
  check_t(s, t);
  if (t_prev < 0 || t_prev >= t) throw ConfigError("need 0 <= t_prev < t");
  const double beta =
      t_prev == t - 1 ? s.beta_at(t) : 1.0 - s.alpha_bar_at(t) / s.alpha_bar_at(t_prev);
  return ddpm_step_coeffs(xt, beta, s.alpha_bar_at(t), eps_pred, t_prev == 0 ? Tensor() : eps);
}

Tensor ddim_reverse_step(const Tensor& xt, int t, int t_prev, const Tensor& eps_pred,
                         const Schedule& s) {
  if (t_prev < 0 || t_prev >= t) throw ConfigError("need 0 <= t_prev < t");
  check_t(s, t);
  return ddim_step_ab(xt, s.alpha_bar_at(t), s.alpha_bar_at(t_prev), eps_pred);
}

Tensor ddim_step_ab(const Tensor& xt, double ab_t, double ab_prev, const Tensor& eps_pred) {
  Tensor x0_hat = recover_onestep_ab(xt, ab_t, eps_pred);
  return add(scale(x0_hat, std::sqrt(ab_prev)), scale(eps_pred, std::sqrt(1.0 - ab_prev)));
}

Tensor diffusion_loss(const EpsModel& model, const Tensor& x0, int t, const Tensor& eps,
                      const Schedule& s) {
  check_t(s, t);
  Tensor xt = forward_diffuse(x0, t, eps, s);
  std::vector<int> ts(x0.dim() >= 2 ? x0.shape()[0] : 1, t);
  return sum(square(sub(eps, model(xt, ts))));
}

Tensor diffusion_loss(const EpsModel& model, const Tensor& x0, std::span<const int> t,
                      const Tensor& eps, const Schedule& s) {
  check_same_shape(x0, eps, "diffusion_loss");
  if (x0.dim() != 2) throw ShapeError("batched diffusion_loss expects [B, D]");
  const std::size_t rows = x0.shape()[0];
  for (int ti : t) check_t(s, ti);
  Tensor a = row_coefficients(t, rows, [&](int ti) { return std::sqrt(s.alpha_bar_at(ti)); });
  Tensor b =
      row_coefficients(t, rows, [&](int ti) { return std::sqrt(1.0 - s.alpha_bar_at(ti)); });
  Tensor xt = add(mul(x0, a), mul(eps, b));
  return sum(square(sub(eps, model(xt, t))));
}

}  // namespace dbp
