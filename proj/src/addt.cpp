#include "dbp/addt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dbp/autograd.hpp"
#include "dbp/error.hpp"
#include "dbp/ops.hpp"
#include "dbp/rng.hpp"

namespace dbp {

namespace {

constexpr double kMinAlphaBar = 1e-12;

struct RowView {
  std::size_t rows;
  std::size_t width;
};

RowView rows_of(const Tensor& a) {
  const std::size_t rows = a.dim() >= 2 ? a.shape()[0] : 1;
  return {rows, a.numel() / rows};
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Constant tensor of x's shape holding values[r] across row r.
Tensor row_coeffs(const Tensor& x, std::span<const double> values) {
  const auto [rows, width] = rows_of(x);
  if (values.size() != rows) {
    throw ShapeError("expected " + std::to_string(rows) + " per-row values, got " +
                     std::to_string(values.size()));
  }
  Buffer v(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill_n(v.begin() + static_cast<std::ptrdiff_t>(r * width), width, values[r]);
  }
  return Tensor(x.shape(), std::move(v), x.dtype());
}

std::vector<double> alpha_bars(const Schedule& s, std::span<const int> t) {
  std::vector<double> ab;
  ab.reserve(t.size());
  for (int ti : t) {
    if (ti < 1 || ti > s.T) {
      throw ConfigError("timestep " + std::to_string(ti) + " outside [1, " +
                        std::to_string(s.T) + "]");
    }
    ab.push_back(s.alpha_bar_at(ti));
  }
  return ab;
}

void check_lambda(double lam) {
  if (!(lam >= 0.0 && lam <= 1.0)) {
    throw ConfigError("mixing weight lambda must lie in [0, 1], got " + std::to_string(lam));
  }
}

Tensor draw(const Shape& shape, Dtype dtype, std::uint64_t seed, std::uint32_t index) {
  return Tensor(shape, rng::normal({seed, rng::Stream::Perturbation, index}, shape_numel(shape)),
                dtype);
}

std::vector<double> row_lambdas(const Schedule& s, std::span<const int> t,
                                const ADDTConfig& cfg) {
  std::vector<double> lam;
  lam.reserve(t.size());
  for (int ti : t) lam.push_back(lambda_t(s, ti, cfg));
  return lam;
}

Tensor mix_for_mode(PerturbationMode mode, const Tensor& x0, std::span<const int> t,
                    const Tensor& eps, const Tensor& mapped, std::span<const double> lam,
                    const Schedule& s) {
  if (mode == PerturbationMode::LinfProjected) return mix_linf_input(x0, t, eps, mapped, lam, s);
  return mix_perturbed_input(x0, t, eps, mapped, lam, s);
}

}  // namespace

std::string mode_name(PerturbationMode m) {
  switch (m) {
    case PerturbationMode::RBGM: return "rbgm";
    case PerturbationMode::L2Normalized: return "l2_normalized";
    case PerturbationMode::LinfProjected: return "linf_projected";
    case PerturbationMode::GaussianReordered: return "gaussian_reordered";
  }
  return "unknown";
}

PerturbationMode parse_mode(const std::string& name) {
  for (auto m : {PerturbationMode::RBGM, PerturbationMode::L2Normalized,
                 PerturbationMode::LinfProjected, PerturbationMode::GaussianReordered}) {
    if (mode_name(m) == name) return m;
  }
  throw ConfigError("unknown perturbation mode '" + name + "'");
}

std::string objective_name(AddtObjective o) {
  return o == AddtObjective::ClassifierCE ? "classifier_ce" : "reconstruction_mse";
}

AddtObjective parse_objective(const std::string& name) {
  if (name == "classifier_ce") return AddtObjective::ClassifierCE;
  if (name == "reconstruction_mse") return AddtObjective::ReconstructionMSE;
  throw ConfigError("unknown ADDT objective '" + name + "'");
}

ADDTConfig ADDTConfig::linf_ablation() {
  ADDTConfig c;
  c.lambda_unit = 1.0;
  c.lambda_min = 0.0;
  c.lambda_max = 10.0;
  c.perturbation_mode = PerturbationMode::LinfProjected;
  return c;
}

void ADDTConfig::validate() const {
  if (!(lambda_min >= 0.0 && lambda_min <= lambda_max)) {
    throw ConfigError("ADDT needs 0 <= lambda_min <= lambda_max");
  }
  if (lambda_unit < 0.0) throw ConfigError("lambda_unit must be non-negative");
  if (cgpo_steps < 0) throw ConfigError("cgpo_steps must be non-negative");
  if (delta_init_std < 0.0) throw ConfigError("delta_init_std must be non-negative");
  if (perturbation_mode == PerturbationMode::LinfProjected) {
    if (linf_radius <= 0.0 || linf_step <= 0.0) {
      throw ConfigError("linf_radius and linf_step must be positive");
    }
  } else if (lambda_max > 1.0) {
    throw ConfigError("lambda_max above 1 is only meaningful for linf_projected");
  }
}

Tensor rbgm(const Tensor& delta, const Tensor& eps_s) {
  check_same_shape(delta, eps_s, "rbgm");
  const auto [rows, width] = rows_of(delta);
  auto d = delta.data();
  auto e = eps_s.data();
  Buffer out(delta.numel());
  std::vector<std::size_t> order(width);
  std::vector<double> sorted(width);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* dr = d.data() + r * width;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [dr](std::size_t a, std::size_t b) { return dr[a] < dr[b]; });
    std::copy_n(e.data() + r * width, width, sorted.begin());
    std::sort(sorted.begin(), sorted.end(),
              [](double a, double b) {
                return a < b || (a == b && std::signbit(a) && !std::signbit(b));
              });
    for (std::size_t k = 0; k < width; ++k) out[r * width + order[k]] = sorted[k];
  }
  return Tensor(delta.shape(), std::move(out), eps_s.dtype());
}

Tensor map_perturbation(const Tensor& delta, const Tensor& eps_s, PerturbationMode mode,
                        double linf_radius) {
  check_same_shape(delta, eps_s, "map_perturbation");
  const auto [rows, width] = rows_of(delta);
  auto d = delta.data();
  auto e = eps_s.data();
  switch (mode) {
    case PerturbationMode::RBGM:
      return rbgm(delta, eps_s);
    case PerturbationMode::L2Normalized: {
      Buffer out(delta.numel());
      for (std::size_t r = 0; r < rows; ++r) {
        double nd = 0.0, ne = 0.0;
        for (std::size_t i = 0; i < width; ++i) {
          nd += d[r * width + i] * d[r * width + i];
          ne += e[r * width + i] * e[r * width + i];
        }
        if (nd == 0.0) throw NumericError("cannot L2-normalize a zero perturbation");
        const double k = std::sqrt(ne) / std::sqrt(nd);
        for (std::size_t i = 0; i < width; ++i) out[r * width + i] = d[r * width + i] * k;
      }
      return Tensor(delta.shape(), std::move(out), eps_s.dtype());
    }
    case PerturbationMode::GaussianReordered: {
      Buffer z(delta.numel());
      for (std::size_t r = 0; r < rows; ++r) {
        double m = 0.0;
        for (std::size_t i = 0; i < width; ++i) m += d[r * width + i];
        m /= static_cast<double>(width);
        double v = 0.0;
        for (std::size_t i = 0; i < width; ++i) v += (d[r * width + i] - m) * (d[r * width + i] - m);
        const double sd = std::sqrt(v / static_cast<double>(width));
        if (sd == 0.0) throw NumericError("cannot standardize a constant perturbation");
        for (std::size_t i = 0; i < width; ++i) z[r * width + i] = (d[r * width + i] - m) / sd;
      }
      return rbgm(eps_s, Tensor(delta.shape(), std::move(z), eps_s.dtype()));
    }
    case PerturbationMode::LinfProjected:
      return clamp(delta.detach(), -linf_radius, linf_radius);
  }
  throw ConfigError("unknown perturbation mode");
}

double gamma_t(const Schedule& s, int t) {
  if (t < 1 || t > s.T) throw ConfigError("timestep outside [1, T]");
  const double ab = s.alpha_bar_at(t);
  return std::sqrt(ab) / std::sqrt(1.0 - ab);
}

double lambda_t(const Schedule& s, int t, const ADDTConfig& cfg) {
  return std::clamp(gamma_t(s, t) * cfg.lambda_unit, cfg.lambda_min, cfg.lambda_max);
}

Tensor mix_perturbed_input(const Tensor& x0, int t, const Tensor& eps, const Tensor& eps_delta,
                           double lam, const Schedule& s) {
  check_same_shape(x0, eps, "mix_perturbed_input");
  check_same_shape(x0, eps_delta, "mix_perturbed_input");
  check_lambda(lam);
  const double ab = alpha_bars(s, std::span<const int>(&t, 1))[0];
  const double noise = std::sqrt(1.0 - ab);
  return add(add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - lam * lam) * noise)),
             scale(eps_delta, lam * noise));
}

Tensor mix_perturbed_input(const Tensor& x0, std::span<const int> t, const Tensor& eps,
                           const Tensor& eps_delta, std::span<const double> lam,
                           const Schedule& s) {
  check_same_shape(x0, eps, "mix_perturbed_input");
  check_same_shape(x0, eps_delta, "mix_perturbed_input");
  const auto ab = alpha_bars(s, t);
  if (lam.size() != ab.size()) throw ShapeError("one lambda per row is required");
  std::vector<double> a(ab.size()), b(ab.size()), c(ab.size());
  for (std::size_t r = 0; r < ab.size(); ++r) {
    check_lambda(lam[r]);
    const double noise = std::sqrt(1.0 - ab[r]);
    a[r] = std::sqrt(ab[r]);
    b[r] = std::sqrt(1.0 - lam[r] * lam[r]) * noise;
    c[r] = lam[r] * noise;
  }
  return add(add(mul(row_coeffs(x0, a), x0), mul(row_coeffs(x0, b), eps)),
             mul(row_coeffs(x0, c), eps_delta));
}

Tensor mix_linf_input(const Tensor& x0, std::span<const int> t, const Tensor& eps,
                      const Tensor& delta, std::span<const double> lam, const Schedule& s) {
  check_same_shape(x0, eps, "mix_linf_input");
  check_same_shape(x0, delta, "mix_linf_input");
  const auto ab = alpha_bars(s, t);
  if (lam.size() != ab.size()) throw ShapeError("one lambda per row is required");
  std::vector<double> a(ab.size()), b(ab.size());
  for (std::size_t r = 0; r < ab.size(); ++r) {
    if (lam[r] < 0.0) throw ConfigError("lambda must be non-negative");
    a[r] = std::sqrt(ab[r]);
    b[r] = std::sqrt(1.0 - ab[r]);
  }
  Tensor shifted = add(x0, mul(row_coeffs(x0, lam), delta));
  return add(mul(row_coeffs(x0, a), shifted), mul(row_coeffs(x0, b), eps));
}

Tensor recover_rows(const Tensor& xt, std::span<const int> t, const Tensor& eps_pred,
                    const Schedule& s) {
  check_same_shape(xt, eps_pred, "recover_rows");
  const auto ab = alpha_bars(s, t);
  std::vector<double> inv(ab.size()), noise(ab.size());
  for (std::size_t r = 0; r < ab.size(); ++r) {
    if (ab[r] < kMinAlphaBar) throw NumericError("alpha_bar too small for one-step recovery");
    inv[r] = 1.0 / std::sqrt(ab[r]);
    noise[r] = std::sqrt(1.0 - ab[r]);
  }
  return mul(sub(xt, mul(row_coeffs(xt, noise), eps_pred)), row_coeffs(xt, inv));
}

Perturbation cgpo(const Tensor& x0, std::span<const int> y, std::span<const int> t,
                  const DenoiserNet& denoiser, const ClassifierNet& classifier,
                  const ADDTConfig& cfg, const Schedule& s, std::uint64_t tape_seed) {
  cfg.validate();
  const auto [rows, width] = rows_of(x0);
  if (y.size() != rows || t.size() != rows) {
    throw ShapeError("cgpo needs one label and one timestep per row");
  }
  const Shape& shape = x0.shape();
  const Dtype dtype = x0.dtype();
  const bool linf = cfg.perturbation_mode == PerturbationMode::LinfProjected;
  const auto lam = row_lambdas(s, t, cfg);

  // Draw layout on the Perturbation stream: 0 initialises delta; step i uses
  // 2i+1 for eps and 2i+2 for eps_s; the final mapping uses 2*steps+2.
  Perturbation p;
  p.delta = scale(draw(shape, dtype, tape_seed, 0), cfg.delta_init_std);
  if (linf) p.delta = clamp(p.delta, -cfg.linf_radius, cfg.linf_radius);

  const auto steps = static_cast<std::uint32_t>(cfg.cgpo_steps);
  for (std::uint32_t k = 0; k < steps; ++k) {
    Tensor eps = draw(shape, dtype, tape_seed, 2 * k + 1);
    Tensor eps_s = draw(shape, dtype, tape_seed, 2 * k + 2);
    Tensor mapped = map_perturbation(p.delta, eps_s, cfg.perturbation_mode, cfg.linf_radius)
                        .detach()
                        .set_requires_grad(true);
    Tensor xt = mix_for_mode(cfg.perturbation_mode, x0, t, eps, mapped, lam, s);
    Tensor x0_hat = recover_rows(xt, t, denoiser.forward(xt, t), s);
    Tensor objective = cfg.objective == AddtObjective::ClassifierCE
                           ? sum(softmax_cross_entropy(classifier.forward(x0_hat), y))
                           : sum(square(sub(x0_hat, x0)));
    std::vector<Tensor> wrt{mapped};
    Tensor g = grad(objective, wrt)[0];
    p.objective = objective.item();
    if (linf) {
      Buffer next(p.delta.data().begin(), p.delta.data().end());
      auto gv = g.data();
      for (std::size_t i = 0; i < next.size(); ++i) {
        const double dir = gv[i] > 0.0 ? 1.0 : (gv[i] < 0.0 ? -1.0 : 0.0);
        next[i] = std::clamp(next[i] + cfg.linf_step * dir, -cfg.linf_radius, cfg.linf_radius);
      }
      p.delta = Tensor(shape, std::move(next), dtype);
    } else {
      p.delta = add(p.delta, g).to(dtype);
    }
  }
  p.mapped = map_perturbation(p.delta, draw(shape, dtype, tape_seed, 2 * steps + 2),
                              cfg.perturbation_mode, cfg.linf_radius);
  return p;
}

Tensor addt_train_noise(const Shape& shape, const ADDTConfig& cfg, std::uint64_t tape_seed) {
  return Tensor(shape,
                rng::normal({tape_seed, rng::Stream::Perturbation,
                             2 * static_cast<std::uint32_t>(cfg.cgpo_steps) + 1},
                            shape_numel(shape)));
}

Tensor addt_loss(const DenoiserNet& denoiser, const Tensor& x0, std::span<const int> t,
                 const Tensor& eps, const Tensor& mapped, std::span<const double> lam,
                 const Schedule& s, PerturbationMode mode) {
  Tensor xt = mix_for_mode(mode, x0, t, eps, mapped, lam, s);
  Tensor x0_hat = recover_rows(xt, t, denoiser.forward(xt, t), s);
  std::vector<double> gamma;
  gamma.reserve(t.size());
  for (int ti : t) gamma.push_back(gamma_t(s, ti));
  return sum(square(mul(row_coeffs(x0, gamma), sub(x0, x0_hat))));
}

ADDTStep addt_train_step(DenoiserNet& denoiser, const Tensor& x0, std::span<const int> y,
                         std::span<const int> t, const ClassifierNet& classifier,
                         const ADDTConfig& cfg, Adam& optimizer, const Schedule& s,
                         std::uint64_t tape_seed) {
  Perturbation p = cgpo(x0, y, t, denoiser, classifier, cfg, s, tape_seed);
  const auto lam = row_lambdas(s, t, cfg);
  Tensor eps = addt_train_noise(x0.shape(), cfg, tape_seed).to(x0.dtype());
  const double rows = static_cast<double>(rows_of(x0).rows);
  Tensor loss = scale(addt_loss(denoiser, x0, t, eps, p.mapped, lam, s, cfg.perturbation_mode),
                      1.0 / rows);
  const auto params = denoiser.parameters();
  const auto grads = grad(loss, params);
  optimizer.step(grads);
  return {loss.item(), p.objective / rows};
}

}  // namespace dbp
