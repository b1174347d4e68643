#include "dbp/attacks.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "dbp/autograd.hpp"
#include "dbp/error.hpp"
#include "dbp/io.hpp"
#include "dbp/ops.hpp"
#include "dbp/rng.hpp"

namespace dbp {

namespace {

std::uint64_t fresh_seed(std::uint64_t seed, std::size_t id, int draw) {
  return rng::derive_seed(rng::derive_seed(seed, id), static_cast<std::uint64_t>(draw));
}

std::uint64_t step_seed(std::uint64_t seed, int step) {
  return rng::derive_seed(seed, 0x5157ull + static_cast<std::uint64_t>(step));
}

void check_batch(const AttackBatch& b) {
  if (b.x.dim() != 2) throw ShapeError("attack inputs must be [B, D]");
  const std::size_t rows = b.x.shape()[0];
  if (b.labels.size() != rows || b.ids.size() != rows) {
    throw ShapeError("attack batch labels/ids do not match the number of rows");
  }
  if (!b.victim.empty() && b.victim.size() != rows) {
    throw ShapeError("attack batch needs one victim tape per row");
  }
}

Tensor random_start(const AttackBatch& b, const AttackConfig& cfg) {
  const std::size_t rows = b.x.shape()[0];
  const std::size_t dim = b.x.shape()[1];
  Buffer out(b.x.data().begin(), b.x.data().end());
  for (std::size_t r = 0; r < rows; ++r) {
    const rng::StreamKey key{cfg.seed, rng::Stream::AttackStart,
                             static_cast<std::uint32_t>(b.ids[r])};
    std::span<double> dst(out.data() + r * dim, dim);
    if (cfg.norm == Norm::Linf) {
      Buffer u(dim);
      rng::fill_uniform(key, u);
      for (std::size_t i = 0; i < dim; ++i) dst[i] += cfg.radius * (2.0 * u[i] - 1.0);
    } else {
      Buffer z = rng::normal(key, dim + 1);
      double norm = 0.0;
      for (std::size_t i = 0; i < dim; ++i) norm += z[i] * z[i];
      norm = std::sqrt(norm);
      Buffer u(1);
      rng::fill_uniform({cfg.seed, rng::Stream::AttackStart, static_cast<std::uint32_t>(b.ids[r] + (1u << 31))}, u);
      const double radius = cfg.radius * std::pow(u[0], 1.0 / static_cast<double>(dim));
      for (std::size_t i = 0; i < dim; ++i) dst[i] += radius * z[i] / norm;
    }
    for (double& v : dst) v = std::clamp(v, 0.0, 1.0);
  }
  return Tensor(b.x.shape(), std::move(out), b.x.dtype());
}

Tensor delta_of(const Tensor& x, const Tensor& x0) {
  NoGradGuard ng;
  return sub(x, x0);
}

NoiseTape stack_row_tapes(std::span<const NoiseTape> rows) { return stack_tapes(rows); }

double batch_mean(const Tensor& losses) {
  double s = 0.0;
  for (double v : losses.data()) s += v;
  return s / static_cast<double>(losses.numel());
}

}  // namespace

std::string norm_name(Norm n) { return n == Norm::Linf ? "linf" : "l2"; }

Norm parse_norm(const std::string& name) {
  if (name == "linf") return Norm::Linf;
  if (name == "l2") return Norm::L2;
  throw ConfigError("unknown norm '" + name + "'");
}

void AttackConfig::validate() const {
  if (!(radius > 0.0)) throw ConfigError("attack radius must be positive");
  if (!(step_size > 0.0)) throw ConfigError("attack step size must be positive");
  if (steps < 1) throw ConfigError("attack needs at least one step");
  if (eot_samples < 1) throw ConfigError("EoT needs at least one sample");
  knowledge.validate();
}

double AttackReport::robust_accuracy() const {
  if (success.empty()) return 0.0;
  std::size_t robust = 0;
  for (char s : success) robust += s ? 0 : 1;
  return static_cast<double>(robust) / static_cast<double>(success.size());
}

double AttackReport::mean_loss_increase() const {
  double s = 0.0;
  for (std::size_t i = 0; i < final_loss.numel(); ++i) s += final_loss.at(i) - clean_loss.at(i);
  return s / static_cast<double>(final_loss.numel());
}

Tensor eot_gradient(const Tensor& x, std::span<const int> labels,
                    std::span<const std::size_t> ids, std::span<const AttackerTape> views,
                    int n, const Pipeline& pipeline, std::uint64_t seed, double* mean_loss) {
  if (n < 1) throw ConfigError("EoT needs at least one sample");
  if (views.size() != ids.size()) throw ShapeError("one attacker tape per row is required");
  bool all_known = true;
  for (const auto& v : views) all_known = all_known && v.fully_known();
  const int draws = all_known ? 1 : n;
  Buffer acc(x.numel(), 0.0);
  double loss = 0.0;
  std::vector<NoiseTape> rows(views.size());
  for (int e = 0; e < draws; ++e) {
    for (std::size_t r = 0; r < views.size(); ++r) rows[r] = views[r].realize(fresh_seed(seed, ids[r], e));
    Evaluation ev = pipeline.evaluate(x, labels, stack_row_tapes(rows), true);
    if (draws == 1) {
      if (mean_loss) *mean_loss = batch_mean(ev.losses);
      return ev.grad;
    }
    auto g = ev.grad.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
    loss += batch_mean(ev.losses);
  }
  for (double& v : acc) v /= draws;
  if (mean_loss) *mean_loss = loss / draws;
  return Tensor(x.shape(), std::move(acc));
}

Tensor pgd_update(const Tensor& x, const Tensor& x0, const Tensor& g, const AttackConfig& cfg) {
  if (x.shape() != x0.shape() || g.shape() != x.shape() || x.dim() != 2) {
    throw ShapeError("pgd_update expects matching [B, D] tensors");
  }
  const std::size_t rows = x.shape()[0];
  const std::size_t dim = x.shape()[1];
  auto xv = x.data();
  auto x0v = x0.data();
  auto gv = g.data();
  Buffer out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t o = r * dim;
    if (cfg.norm == Norm::Linf) {
      for (std::size_t i = 0; i < dim; ++i) {
        const double s = gv[o + i] > 0.0 ? 1.0 : (gv[o + i] < 0.0 ? -1.0 : 0.0);
        double v = xv[o + i] + cfg.step_size * s;
        v = std::clamp(v, x0v[o + i] - cfg.radius, x0v[o + i] + cfg.radius);
        out[o + i] = std::clamp(v, 0.0, 1.0);
      }
    } else {
      double gn = 0.0;
      for (std::size_t i = 0; i < dim; ++i) gn += gv[o + i] * gv[o + i];
      gn = std::sqrt(gn);
      const double k = gn > 0.0 ? cfg.step_size / gn : 0.0;
      double dn = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        out[o + i] = xv[o + i] + k * gv[o + i] - x0v[o + i];
        dn += out[o + i] * out[o + i];
      }
      dn = std::sqrt(dn);
      const double shrink = dn > cfg.radius ? cfg.radius / dn : 1.0;
      for (std::size_t i = 0; i < dim; ++i) {
        out[o + i] = std::clamp(x0v[o + i] + out[o + i] * shrink, 0.0, 1.0);
      }
    }
  }
  return Tensor(x.shape(), std::move(out), x.dtype());
}

AttackReport run_attack(const AttackBatch& batch, const AttackConfig& cfg,
                        const Pipeline& pipeline, const GradientOracle& oracle,
                        const NoiseTape& victim_tape) {
  cfg.validate();
  check_batch(batch);
  AttackReport rep;
  const Tensor& x0 = batch.x;
  Tensor x = cfg.random_start ? random_start(batch, cfg) : x0;

  Evaluation clean = pipeline.evaluate(x0, batch.labels, victim_tape, false);
  rep.clean_loss = clean.losses;
  rep.clean_predictions = clean.predictions;

  rep.trajectory.push_back(delta_of(x, x0));
  for (int s = 0; s < cfg.steps; ++s) {
    double loss = 0.0;
    Tensor g = oracle(x, s, &loss);
    rep.losses.push_back(loss);
    if (cfg.record_grads) rep.grad_records.push_back(g);
    x = pgd_update(x, x0, g, cfg);
    rep.trajectory.push_back(delta_of(x, x0));
  }
  rep.adversarial = x;

  Evaluation fin = pipeline.evaluate(x, batch.labels, victim_tape, false);
  rep.final_loss = fin.losses;
  rep.predictions = fin.predictions;
  for (std::size_t i = 0; i < batch.labels.size(); ++i) {
    rep.success.push_back(fin.predictions[i] != batch.labels[i] ? 1 : 0);
  }
  return rep;
}

namespace {

AttackReport view_attack(const AttackBatch& batch, KnowledgeSetting setting,
                         const AttackConfig& cfg, const Pipeline& pipeline) {
  check_batch(batch);
  if (batch.victim.size() != batch.labels.size()) throw ShapeError("victim tapes required");
  std::vector<AttackerTape> views;
  views.reserve(batch.victim.size());
  for (const auto& t : batch.victim) views.push_back(knowledge_view(t, setting));
  GradientOracle oracle = [&](const Tensor& x, int step, double* loss) {
    return eot_gradient(x, batch.labels, batch.ids, views, cfg.eot_samples, pipeline,
                        step_seed(cfg.seed, step), loss);
  };
  return run_attack(batch, cfg, pipeline, oracle, stack_tapes(batch.victim));
}

}  // namespace

AttackReport pgd(const AttackBatch& batch, const AttackConfig& cfg, const Pipeline& pipeline) {
  return view_attack(batch, KnowledgeSetting::white_box(), cfg, pipeline);
}

AttackReport dw_attack(const AttackBatch& batch, KnowledgeSetting setting,
                       const AttackConfig& cfg, const Pipeline& pipeline) {
  if (setting.kind == Knowledge::WhiteBox) {
    throw ConfigError("white-box setting has no known noise; use pgd");
  }
  if (setting.kind == Knowledge::DWSemi) throw ConfigError("use dw_semi_attack for semi sets");
  return view_attack(batch, setting, cfg, pipeline);
}

AttackReport dw_semi_attack(const AttackBatch& batch,
                            std::span<const std::vector<NoiseTape>> tape_sets,
                            const AttackConfig& cfg, const Pipeline& pipeline) {
  check_batch(batch);
  if (tape_sets.size() != batch.labels.size()) throw ShapeError("one tape set per row is required");
  std::size_t k = 0;
  for (const auto& set : tape_sets) {
    if (set.empty()) throw ConfigError("semi attack needs a non-empty tape set");
    if (k != 0 && set.size() != k) throw ConfigError("tape sets must have equal sizes");
    k = set.size();
  }
  std::vector<NoiseTape> batched;
  for (std::size_t j = 0; j < k; ++j) {
    std::vector<NoiseTape> rows;
    for (const auto& set : tape_sets) rows.push_back(set[j]);
    batched.push_back(stack_tapes(rows));
  }
  std::vector<std::size_t> choice;
  std::vector<NoiseTape> victim_rows;
  for (std::size_t r = 0; r < tape_sets.size(); ++r) {
    const auto c = static_cast<std::size_t>(
        rng::uniform_index({cfg.seed, rng::Stream::VictimChoice, 0}, batch.ids[r], k));
    choice.push_back(c);
    victim_rows.push_back(tape_sets[r][c]);
  }
  GradientOracle oracle = [&](const Tensor& x, int, double* loss) {
    if (k == 1) {
      Evaluation ev = pipeline.evaluate(x, batch.labels, batched[0], true);
      if (loss) *loss = batch_mean(ev.losses);
      return ev.grad;
    }
    Buffer acc(x.numel(), 0.0);
    double total = 0.0;
    for (const auto& tape : batched) {
      Evaluation ev = pipeline.evaluate(x, batch.labels, tape, true);
      auto g = ev.grad.data();
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
      total += batch_mean(ev.losses);
    }
    for (double& v : acc) v /= static_cast<double>(k);
    if (loss) *loss = total / static_cast<double>(k);
    return Tensor(x.shape(), std::move(acc));
  };
  AttackReport rep = run_attack(batch, cfg, pipeline, oracle, stack_tapes(victim_rows));
  rep.victim_choice = std::move(choice);
  return rep;
}

AttackReport attack(const AttackBatch& batch, const AttackConfig& cfg, const Pipeline& pipeline) {
  cfg.validate();
  switch (cfg.knowledge.kind) {
    case Knowledge::WhiteBox:
      return pgd(batch, cfg, pipeline);
    case Knowledge::DWSemi: {
      check_batch(batch);
      const std::size_t dim = batch.x.shape()[1];
      std::vector<std::vector<NoiseTape>> sets;
      for (std::size_t id : batch.ids) {
        sets.push_back(sample_semi_set(cfg.knowledge.semi_k, rng::derive_seed(cfg.seed, id),
                                       {1, dim}, pipeline.reverse_draws()));
      }
      return dw_semi_attack(batch, sets, cfg, pipeline);
    }
    default:
      return dw_attack(batch, cfg.knowledge, cfg, pipeline);
  }
}

double gradient_similarity(const Tensor& g1, const Tensor& g2) {
  if (g1.numel() != g2.numel()) throw ShapeError("gradient_similarity needs equal sizes");
  double dot = 0.0, n1 = 0.0, n2 = 0.0;
  auto a = g1.data();
  auto b = g2.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    n1 += a[i] * a[i];
    n2 += b[i] * b[i];
  }
  if (n1 == 0.0 || n2 == 0.0) throw NumericError("cosine similarity of a zero vector");
  return std::clamp(dot / (std::sqrt(n1) * std::sqrt(n2)), -1.0, 1.0);
}

std::pair<double, double> LandscapeGrid::project(const Tensor& delta) const {
  double a = 0.0, b = 0.0;
  auto d = delta.data();
  auto p = u1.data();
  auto q = u2.data();
  if (d.size() != p.size()) throw ShapeError("projection needs a perturbation of the grid's size");
  for (std::size_t i = 0; i < d.size(); ++i) {
    a += d[i] * p[i];
    b += d[i] * q[i];
  }
  return {a, b};
}

std::string LandscapeGrid::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "a,b,loss\n";
  for (int i = 0; i < resolution; ++i) {
    for (int j = 0; j < resolution; ++j) {
      os << coords[static_cast<std::size_t>(i)] << ',' << coords[static_cast<std::size_t>(j)] << ','
         << at(i, j) << '\n';
    }
  }
  return os.str();
}

LandscapeGrid landscape_grid(const Tensor& x, int label, const Tensor& dir1, const Tensor& dir2,
                             double extent, int resolution, const Pipeline& pipeline,
                             const NoiseTape& tape) {
  if (x.dim() != 2 || x.shape()[0] != 1) throw ShapeError("landscape needs a single [1, D] input");
  if (dir1.numel() != x.numel() || dir2.numel() != x.numel()) {
    throw ShapeError("landscape directions must match the input size");
  }
  if (resolution < 1 || resolution % 2 == 0) throw ConfigError("landscape resolution must be odd");
  if (!(extent > 0.0)) throw ConfigError("landscape extent must be positive");
  const std::size_t dim = x.numel();
  auto d1 = dir1.data();
  auto d2 = dir2.data();
  double n1 = 0.0;
  for (double v : d1) n1 += v * v;
  n1 = std::sqrt(n1);
  if (n1 == 0.0) throw NumericError("landscape direction 1 is zero");
  Buffer u1(dim), u2(dim);
  for (std::size_t i = 0; i < dim; ++i) u1[i] = d1[i] / n1;
  double dot = 0.0, n2_orig = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    dot += d2[i] * u1[i];
    n2_orig += d2[i] * d2[i];
  }
  double n2 = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    u2[i] = d2[i] - dot * u1[i];
    n2 += u2[i] * u2[i];
  }
  n2 = std::sqrt(n2);
  if (n2 <= 1e-9 * std::sqrt(n2_orig) || n2 == 0.0) {
    throw NumericError("landscape directions are parallel");
  }
  for (double& v : u2) v /= n2;
  // A second pass removes the residual component left by rounding.
  double dot2 = 0.0;
  for (std::size_t i = 0; i < dim; ++i) dot2 += u2[i] * u1[i];
  for (std::size_t i = 0; i < dim; ++i) u2[i] -= dot2 * u1[i];

  LandscapeGrid grid;
  grid.resolution = resolution;
  grid.u1 = Tensor({1, dim}, u1);
  grid.u2 = Tensor({1, dim}, u2);
  const int half = resolution / 2;
  for (int i = 0; i < resolution; ++i) {
    grid.coords.push_back(half == 0 ? 0.0 : extent * static_cast<double>(i - half) / half);
  }
  const std::size_t points = static_cast<std::size_t>(resolution * resolution);
  Buffer batch(points * dim);
  auto xv = x.data();
  for (int i = 0; i < resolution; ++i) {
    for (int j = 0; j < resolution; ++j) {
      const double a = grid.coords[static_cast<std::size_t>(i)];
      const double b = grid.coords[static_cast<std::size_t>(j)];
      double* dst = batch.data() + static_cast<std::size_t>(i * resolution + j) * dim;
      for (std::size_t k = 0; k < dim; ++k) dst[k] = xv[k] + a * u1[k] + b * u2[k];
    }
  }
  std::vector<NoiseTape> rows(points, tape);
  std::vector<int> labels(points, label);
  Evaluation e = pipeline.evaluate(Tensor({points, dim}, std::move(batch)), labels,
                                   stack_tapes(rows), false);
  grid.loss.assign(e.losses.data().begin(), e.losses.data().end());
  return grid;
}

void save_report(const std::filesystem::path& path, const AttackReport& report,
                 const AttackConfig& cfg) {
  nlohmann::json h = {{"kind", "attack_report"},
                      {"norm", norm_name(cfg.norm)},
                      {"radius", cfg.radius},
                      {"step_size", cfg.step_size},
                      {"steps", cfg.steps},
                      {"eot_samples", cfg.eot_samples},
                      {"knowledge", cfg.knowledge.name()},
                      {"seed", cfg.seed},
                      {"losses", report.losses},
                      {"predictions", report.predictions},
                      {"success", std::vector<int>(report.success.begin(), report.success.end())},
                      {"trajectory_length", report.trajectory.size()},
                      {"grad_records", report.grad_records.size()}};
  io::Bundle b;
  b.header = h.dump();
  b.tensors.push_back(report.adversarial);
  b.tensors.push_back(report.clean_loss);
  b.tensors.push_back(report.final_loss);
  for (const auto& t : report.trajectory) b.tensors.push_back(t);
  for (const auto& g : report.grad_records) b.tensors.push_back(g);
  io::save_bundle(path, b);
}

}  // namespace dbp
