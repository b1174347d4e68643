#include <doctest.h>

#include <cmath>

#include "dbp/attacks.hpp"
#include "dbp/autograd.hpp"
#include "dbp/error.hpp"
#include "dbp/kernels.hpp"
#include "dbp/ops.hpp"
#include "support/toy.hpp"

using namespace dbp;
using testing::iota_ids;
using testing::toy_images;
using testing::ToyModels;

namespace {

// Linear loss w.x per row; the gradient is fixed, scaled by `gain` and, when
// `noisy`, shifted by the row's forward draw.
class MockPipeline : public Pipeline {
 public:
  MockPipeline(Tensor w, bool noisy = false) : w_(std::move(w)), noisy_(noisy) {}

  Evaluation evaluate(const Tensor& x, std::span<const int>, const NoiseTape& tape,
                      bool need_grad) const override {
    const std::size_t rows = x.shape()[0], dim = x.shape()[1];
    Evaluation e;
    Buffer losses(rows);
    Buffer g(rows * dim);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < dim; ++i) {
        double gi = w_.at(i);
        if (noisy_) gi += tape.forward_noise.at(r * dim + i);
        g[r * dim + i] = gi;
        losses[r] += gi * x.at(r * dim + i);
      }
      e.predictions.push_back(losses[r] > 0.0 ? 1 : 0);
    }
    e.losses = Tensor({rows}, losses);
    if (need_grad) e.grad = Tensor(x.shape(), g);
    return e;
  }
  std::size_t reverse_draws() const override { return 0; }

 private:
  Tensor w_;
  bool noisy_;
};

// Gradient alternates between +g and -g on successive calls.
class AlternatingPipeline : public Pipeline {
 public:
  Evaluation evaluate(const Tensor& x, std::span<const int>, const NoiseTape&,
                      bool) const override {
    const double sign = (calls_++ % 2 == 0) ? 1.0 : -1.0;
    Evaluation e;
    e.losses = Tensor::zeros({x.shape()[0]});
    e.predictions.assign(x.shape()[0], 0);
    e.grad = Tensor::full(x.shape(), 0.5 * sign);
    return e;
  }
  std::size_t reverse_draws() const override { return 0; }

 private:
  mutable int calls_ = 0;
};

AttackBatch make_batch(const Tensor& x, std::size_t draws, std::uint64_t seed,
                       std::vector<int> labels = {}) {
  AttackBatch b;
  b.x = x;
  const std::size_t rows = x.shape()[0];
  b.labels = labels.empty() ? std::vector<int>(rows, 0) : labels;
  b.ids = iota_ids(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    b.victim.push_back(record_tape(sample_tape_seed(seed, i), {1, x.shape()[1]}, draws));
  }
  return b;
}

double row_norm(const Tensor& a, const Tensor& b, std::size_t r, Norm norm) {
  const std::size_t dim = a.shape()[1];
  double acc = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double d = std::abs(a.at(r * dim + i) - b.at(r * dim + i));
    acc = norm == Norm::Linf ? std::max(acc, d) : acc + d * d;
  }
  return norm == Norm::Linf ? acc : std::sqrt(acc);
}

}  // namespace

TEST_CASE("zero gradient leaves the input unchanged") {
  Tensor x = toy_images(3, 1, 5);
  MockPipeline p(Tensor::zeros({5}));
  for (Norm n : {Norm::Linf, Norm::L2}) {
    AttackConfig cfg;
    cfg.norm = n;
    cfg.steps = 4;
    AttackReport r = pgd(make_batch(x, 0, 1), cfg, p);
    CHECK(bitwise_equal(r.adversarial, x));
  }
}

TEST_CASE("one Linf step with a positive gradient") {
  Tensor x({1, 4}, Buffer{0.1, 0.5, 0.99, 1.0});
  MockPipeline p(Tensor::full({4}, 1.0));
  AttackConfig cfg;
  cfg.steps = 1;
  cfg.step_size = 0.02;
  cfg.radius = 0.05;
  AttackReport r = pgd(make_batch(x, 0, 1), cfg, p);
  CHECK(r.adversarial.at(0) == doctest::Approx(0.12).epsilon(1e-15));
  CHECK(r.adversarial.at(1) == doctest::Approx(0.52).epsilon(1e-15));
  CHECK(r.adversarial.at(2) == 1.0);
  CHECK(r.adversarial.at(3) == 1.0);
  cfg.step_size = 0.3;
  r = pgd(make_batch(x, 0, 1), cfg, p);
  CHECK(r.adversarial.at(0) == doctest::Approx(0.15).epsilon(1e-15));
}

TEST_CASE("an oversized L2 step lands on the sphere") {
  Tensor x = Tensor::full({2, 6}, 0.5);
  Buffer w{1, -2, 0.5, 0.25, -1, 3};
  MockPipeline p(Tensor({6}, w));
  AttackConfig cfg;
  cfg.norm = Norm::L2;
  cfg.radius = 0.3;
  cfg.step_size = 1.0;
  cfg.steps = 1;
  AttackReport r = pgd(make_batch(x, 0, 1), cfg, p);
  for (std::size_t row = 0; row < 2; ++row) {
    CHECK(std::abs(row_norm(r.adversarial, x, row, Norm::L2) - 0.3) < 1e-6);
  }
}

TEST_CASE("reports are feasible and well formed") {
  ToyModels m;
  PurifyConfig pc = PurifyConfig::make(Sampler::DDPM, 6, 3);
  PurifyPipeline p(pc, m.schedule, m.denoiser, m.classifier);
  Tensor x = toy_images(4, 3);
  for (Norm n : {Norm::Linf, Norm::L2}) {
    for (bool start : {false, true}) {
      AttackConfig cfg;
      cfg.norm = n;
      cfg.radius = n == Norm::Linf ? 0.1 : 0.4;
      cfg.step_size = n == Norm::Linf ? 0.04 : 0.2;
      cfg.steps = 5;
      cfg.eot_samples = 2;
      cfg.random_start = start;
      cfg.record_grads = true;
      AttackReport r = pgd(make_batch(x, pc.stochastic_draws(), 2, {0, 1, 2, 0}), cfg, p);
      CHECK(r.trajectory.size() == 6);
      CHECK(r.losses.size() == 5);
      CHECK(r.grad_records.size() == 5);
      CHECK(r.success.size() == 4);
      for (std::size_t row = 0; row < 4; ++row) {
        CHECK(row_norm(r.adversarial, x, row, n) <= cfg.radius + 1e-6);
      }
      for (double v : r.adversarial.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      CHECK(bitwise_equal(r.trajectory.back(), sub(r.adversarial, x)));
    }
  }
}

TEST_CASE("EoT with n = 1 is a single stochastic gradient") {
  Tensor x = toy_images(2, 4, 5);
  MockPipeline p(Tensor::zeros({5}), true);
  NoiseTape victim = record_tape(1, {1, 5}, 0);
  std::vector<AttackerTape> views(2, knowledge_view(victim, KnowledgeSetting::white_box()));
  auto ids = iota_ids(2);
  std::vector<int> y{0, 0};
  Tensor g = eot_gradient(x, y, ids, views, 1, p, 9);
  std::vector<NoiseTape> rows{views[0].realize(rng::derive_seed(rng::derive_seed(9, 0), 0)),
                              views[1].realize(rng::derive_seed(rng::derive_seed(9, 1), 0))};
  CHECK(bitwise_equal(g, stack_tapes(rows).forward_noise));
}

TEST_CASE("alternating +g and -g average to zero") {
  AlternatingPipeline p;
  Tensor x = toy_images(1, 5, 4);
  NoiseTape victim = record_tape(1, {1, 4}, 0);
  std::vector<AttackerTape> views{knowledge_view(victim, KnowledgeSetting::white_box())};
  std::vector<int> y{0};
  Tensor g = eot_gradient(x, y, iota_ids(1), views, 2, p, 3);
  for (double v : g.data()) CHECK(v == 0.0);
}

TEST_CASE("EoT estimate variance falls as 1/n") {
  const std::size_t dim = 4000;
  Tensor x = Tensor::full({1, dim}, 0.5);
  MockPipeline p(Tensor::zeros({dim}), true);
  NoiseTape victim = record_tape(1, {1, dim}, 0);
  std::vector<AttackerTape> views{knowledge_view(victim, KnowledgeSetting::white_box())};
  std::vector<int> y{0};
  std::vector<double> logn, logv;
  for (int n : {1, 4, 16}) {
    Tensor g = eot_gradient(x, y, iota_ids(1), views, n, p, 11);
    double m = 0.0, v = 0.0;
    for (double e : g.data()) m += e;
    m /= dim;
    for (double e : g.data()) v += (e - m) * (e - m);
    v /= dim - 1;
    logn.push_back(std::log(n));
    logv.push_back(std::log(v));
  }
  const double mx = (logn[0] + logn[1] + logn[2]) / 3, my = (logv[0] + logv[1] + logv[2]) / 3;
  double sxy = 0, sxx = 0;
  for (int i = 0; i < 3; ++i) {
    sxy += (logn[i] - mx) * (logv[i] - my);
    sxx += (logn[i] - mx) * (logn[i] - mx);
  }
  CHECK(std::abs(sxy / sxx + 1.0) < 0.2);
}

TEST_CASE("DW_Both with one EoT sample is deterministic") {
  ToyModels m;
  PurifyConfig pc = PurifyConfig::make(Sampler::DDPM, 6, 3);
  PurifyPipeline p(pc, m.schedule, m.denoiser, m.classifier);
  AttackBatch b = make_batch(toy_images(3, 6), pc.stochastic_draws(), 4, {0, 1, 2});
  AttackConfig cfg;
  cfg.steps = 4;
  cfg.radius = 0.1;
  cfg.step_size = 0.03;
  AttackReport r1 = dw_attack(b, KnowledgeSetting::dw_both(), cfg, p);
  cfg.seed = 777;  // fresh draws are unused when everything is known
  AttackReport r2 = dw_attack(b, KnowledgeSetting::dw_both(), cfg, p);
  CHECK(bitwise_equal(r1.adversarial, r2.adversarial));
  CHECK(r1.losses == r2.losses);
  CHECK(bitwise_equal(r1.final_loss, r2.final_loss));
  CHECK_THROWS_AS(dw_attack(b, KnowledgeSetting::white_box(), cfg, p), ConfigError);
}

TEST_CASE("DDIM: forward-only knowledge equals full knowledge") {
  ToyModels m;
  PurifyConfig pc = PurifyConfig::make(Sampler::DDIM, 8, 4);
  PurifyPipeline p(pc, m.schedule, m.denoiser, m.classifier);
  AttackBatch b = make_batch(toy_images(4, 7), pc.stochastic_draws(), 5, {0, 1, 2, 1});
  AttackConfig cfg;
  cfg.steps = 5;
  cfg.eot_samples = 3;
  cfg.radius = 0.1;
  cfg.step_size = 0.03;
  AttackReport fwd = dw_attack(b, KnowledgeSetting::dw_fwd(), cfg, p);
  AttackReport both = dw_attack(b, KnowledgeSetting::dw_both(), cfg, p);
  CHECK(bitwise_equal(fwd.adversarial, both.adversarial));
  CHECK(fwd.robust_accuracy() == both.robust_accuracy());
  // With reverse draws present the two settings differ.
  PurifyConfig ddpm = PurifyConfig::make(Sampler::DDPM, 8, 4);
  PurifyPipeline q(ddpm, m.schedule, m.denoiser, m.classifier);
  AttackBatch bd = make_batch(toy_images(4, 7), ddpm.stochastic_draws(), 5, {0, 1, 2, 1});
  CHECK(!bitwise_equal(dw_attack(bd, KnowledgeSetting::dw_fwd(), cfg, q).adversarial,
                       dw_attack(bd, KnowledgeSetting::dw_both(), cfg, q).adversarial));
}

TEST_CASE("semi attack with one tape is the full-knowledge attack") {
  ToyModels m;
  PurifyConfig pc = PurifyConfig::make(Sampler::DDPM, 6, 3);
  PurifyPipeline p(pc, m.schedule, m.denoiser, m.classifier);
  AttackBatch b = make_batch(toy_images(3, 8), pc.stochastic_draws(), 6, {2, 1, 0});
  std::vector<std::vector<NoiseTape>> sets;
  for (const auto& t : b.victim) sets.push_back({t});
  AttackConfig cfg;
  cfg.steps = 3;
  cfg.radius = 0.1;
  cfg.step_size = 0.03;
  AttackReport semi = dw_semi_attack(b, sets, cfg, p);
  AttackReport both = dw_attack(b, KnowledgeSetting::dw_both(), cfg, p);
  CHECK(bitwise_equal(semi.adversarial, both.adversarial));
  CHECK(bitwise_equal(semi.final_loss, both.final_loss));
  std::vector<std::vector<NoiseTape>> empty(3);
  CHECK_THROWS_AS(dw_semi_attack(b, empty, cfg, p), ConfigError);
}

TEST_CASE("semi attack averages over the set") {
  Tensor x = Tensor::full({1, 6}, 0.5);
  MockPipeline p(Tensor::zeros({6}), true);
  NoiseTape t1 = record_tape(1, {1, 6}, 0);
  NoiseTape t2 = t1;
  t2.forward_noise = neg(t1.forward_noise);
  std::vector<std::vector<NoiseTape>> sets{{t1, t2}};
  AttackBatch b = make_batch(x, 0, 1);
  AttackConfig cfg;
  cfg.steps = 2;
  cfg.record_grads = true;
  AttackReport r = dw_semi_attack(b, sets, cfg, p);
  for (double v : r.grad_records[0].data()) CHECK(v == 0.0);
  CHECK(bitwise_equal(r.adversarial, x));
  CHECK(r.victim_choice.size() == 1);
  CHECK(r.victim_choice[0] < 2);
}

TEST_CASE("a row's attack does not depend on its batch or thread count") {
  ToyModels m;
  PurifyConfig pc = PurifyConfig::make(Sampler::DDPM, 6, 3);
  PurifyPipeline p(pc, m.schedule, m.denoiser, m.classifier);
  AttackBatch full = make_batch(toy_images(5, 9), pc.stochastic_draws(), 7, {0, 1, 2, 0, 1});
  AttackConfig cfg;
  cfg.steps = 3;
  cfg.eot_samples = 2;
  cfg.radius = 0.1;
  cfg.step_size = 0.03;
  AttackReport all = pgd(full, cfg, p);
  AttackBatch one;
  one.x = row(full.x, 3);
  one.labels = {full.labels[3]};
  one.ids = {3};
  one.victim = {full.victim[3]};
  AttackReport single = pgd(one, cfg, p);
  CHECK(bitwise_equal(row(all.adversarial, 3), single.adversarial));
  CHECK(all.final_loss.at(3) == single.final_loss.at(0));

  const int saved = kernels::max_threads();
  for (int threads : {1, 2, 4}) {
    kernels::set_threads(threads);
    CHECK(bitwise_equal(pgd(full, cfg, p).adversarial, all.adversarial));
  }
  kernels::set_threads(saved);
}

TEST_CASE("attack config validation") {
  AttackConfig cfg;
  cfg.radius = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AttackConfig{};
  cfg.steps = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AttackConfig{};
  cfg.eot_samples = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = AttackConfig{};
  cfg.knowledge = KnowledgeSetting::dw_semi(0);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_norm(norm_name(Norm::L2)) == Norm::L2);
}

TEST_CASE("gradient similarity") {
  Tensor g({3}, Buffer{1, -2, 3});
  CHECK(gradient_similarity(g, g) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(gradient_similarity(Tensor({2}, Buffer{1, 0}), Tensor({2}, Buffer{0, 1})) == 0.0);
  CHECK(gradient_similarity(g, neg(g)) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK_THROWS_AS(gradient_similarity(g, Tensor::zeros({3})), NumericError);
}

TEST_CASE("landscape grid") {
  ToyModels m;
  PurifyConfig pc = PurifyConfig::make(Sampler::DDPM, 6, 3);
  PurifyPipeline p(pc, m.schedule, m.denoiser, m.classifier);
  Tensor x = toy_images(1, 10);
  NoiseTape tape = record_tape(3, {1, ToyModels::kDim}, pc.stochastic_draws());
  Tensor d1 = Tensor({1, ToyModels::kDim}, rng::normal({1, rng::Stream::FreshNoise, 0}, ToyModels::kDim));
  Tensor d2 = Tensor({1, ToyModels::kDim}, rng::normal({1, rng::Stream::FreshNoise, 1}, ToyModels::kDim));
  LandscapeGrid grid = landscape_grid(x, 1, scale(d1, 0.1), d2, 0.5, 7, p, tape);
  std::vector<int> y{1};
  const double base = p.evaluate(x, y, tape, false).losses.item();
  CHECK(grid.at(3, 3) == base);
  double dot = 0.0;
  for (std::size_t i = 0; i < ToyModels::kDim; ++i) dot += grid.u1.at(i) * grid.u2.at(i);
  CHECK(std::abs(dot) < 1e-9);

  // A perturbation inside the plane is recovered exactly from its coordinates.
  Tensor in_plane = add(scale(grid.u1, 0.3), scale(grid.u2, -0.2));
  auto [a, b] = grid.project(in_plane);
  CHECK(a == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(b == doctest::Approx(-0.2).epsilon(1e-12));
  auto [a1, b1] = grid.project(scale(d1, 0.1));
  CHECK(std::abs(b1) < 1e-12);
  double n1 = 0.0;
  for (double v : d1.data()) n1 += 0.01 * v * v;
  CHECK(a1 == doctest::Approx(std::sqrt(n1)).epsilon(1e-12));

  CHECK_THROWS_AS(landscape_grid(x, 1, d1, scale(d1, 2.0), 0.5, 7, p, tape), NumericError);
  CHECK_THROWS_AS(landscape_grid(x, 1, d1, d2, 0.5, 6, p, tape), ConfigError);
  const std::string csv = grid.to_csv();
  CHECK(csv.rfind("a,b,loss\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 50);
}
