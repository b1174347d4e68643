#include "dbp/purify.hpp"

#include <algorithm>

#include "dbp/autograd.hpp"
#include "dbp/error.hpp"
#include "dbp/ops.hpp"
#include "dbp/rng.hpp"

namespace dbp {

namespace {

Tensor reverse_step(const Tensor& xt, int t, int t_prev, const PurifyConfig& cfg,
                    const Schedule& s, const DenoiserNet& net, const Tensor& noise) {
  Tensor eps_pred = net.forward(xt, t);
  if (cfg.sampler == Sampler::DDIM) return ddim_reverse_step(xt, t, t_prev, eps_pred, s);
  return ddpm_skip_step(xt, t, t_prev, eps_pred, noise, s);
}

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  std::vector<Tensor> rows;
  for (std::size_t i = begin; i < end; ++i) rows.push_back(row(t, i));
  return stack_rows(rows);
}

}  // namespace

Tensor purify(const Tensor& x, const PurifyConfig& cfg, const NoiseTape& tape,
              const Schedule& s, const DenoiserNet& net, const PurifyOptions& opts,
              PurifyStats* stats) {
  cfg.validate();
  if (cfg.t_star > s.T) throw ConfigError("t_star exceeds the schedule length");
  if (tape.reverse_noises.size() != cfg.stochastic_draws()) {
    throw DeterminismError("tape has " + std::to_string(tape.reverse_noises.size()) +
                           " reverse draws but the sampler consumes " +
                           std::to_string(cfg.stochastic_draws()));
  }
  PurifyStats local;
  if (cfg.t_star == 0) {
    if (stats) *stats = local;
    return clamp(x, 0.0, 1.0);
  }
  if (!tape.forward_noise.defined() || tape.forward_noise.shape() != x.shape()) {
    throw DeterminismError("tape forward draw does not match the input shape");
  }
  for (const auto& r : tape.reverse_noises) {
    if (r.shape() != x.shape()) throw DeterminismError("tape reverse draw has the wrong shape");
  }

  Tensor xt = forward_diffuse(x, cfg.t_star, tape.forward_noise, s);
  local.forward_used = true;
  for (std::size_t i = 0; i + 1 < cfg.step_list.size(); ++i) {
    const int t = cfg.step_list[i];
    const int t_prev = cfg.step_list[i + 1];
    Tensor noise;
    if (cfg.sampler == Sampler::DDPM && t_prev > 0) noise = tape.reverse_noises[local.reverse_used++];
    if (opts.checkpoint_steps) {
      xt = checkpoint_segment(
          [cfg, &s, &net, t, t_prev, noise](std::span<const Tensor> in) {
            return reverse_step(in[0], t, t_prev, cfg, s, net, noise);
          },
          {xt});
    } else {
      xt = reverse_step(xt, t, t_prev, cfg, s, net, noise);
    }
  }
  if (stats) *stats = local;
  return clamp(xt, 0.0, 1.0);
}

Tensor purify(const Tensor& x, const PurifyConfig& cfg, const AttackerTape& tape,
              std::uint64_t fresh_seed, const Schedule& s, const DenoiserNet& net,
              const PurifyOptions& opts) {
  return purify(x, cfg, tape.realize(fresh_seed), s, net, opts);
}

Classification classify_purified(const Tensor& x, std::span<const int> truth,
                                 const PurifyConfig& cfg, const NoiseTape& tape,
                                 const Schedule& s, const DenoiserNet& denoiser,
                                 const ClassifierNet& classifier) {
  NoGradGuard ng;
  Tensor logits = classifier.forward(purify(x, cfg, tape, s, denoiser));
  Classification c;
  c.labels = argmax_rows(logits);
  if (!truth.empty()) c.losses = softmax_cross_entropy(logits, truth);
  return c;
}

std::uint64_t sample_tape_seed(std::uint64_t seed, std::uint64_t sample_id, std::uint64_t draw) {
  return rng::derive_seed(rng::derive_seed(seed, draw), sample_id);
}

NoiseTape make_batch_tape(std::uint64_t seed, std::span<const std::size_t> sample_ids,
                          std::size_t dim, const PurifyConfig& cfg, std::uint64_t draw) {
  std::vector<NoiseTape> tapes;
  tapes.reserve(sample_ids.size());
  for (std::size_t id : sample_ids) {
    tapes.push_back(record_tape(sample_tape_seed(seed, id, draw), {1, dim}, cfg.stochastic_draws()));
  }
  NoiseTape batch = stack_tapes(tapes);
  batch.seed = seed;
  return batch;
}

PurifyPipeline::PurifyPipeline(PurifyConfig cfg, const Schedule& schedule,
                               const DenoiserNet& denoiser, const ClassifierNet& classifier,
                               PurifyOptions opts)
    : cfg_(std::move(cfg)), schedule_(schedule), denoiser_(denoiser), classifier_(classifier),
      opts_(opts) {
  cfg_.validate();
}

Evaluation PurifyPipeline::evaluate(const Tensor& x, std::span<const int> labels,
                                    const NoiseTape& tape, bool need_grad) const {
  Evaluation e;
  if (!need_grad) {
    NoGradGuard ng;
    Tensor logits = classifier_.forward(purify(x, cfg_, tape, schedule_, denoiser_, opts_));
    e.predictions = argmax_rows(logits);
    e.losses = softmax_cross_entropy(logits, labels);
    return e;
  }
  Tensor xl = x.detach().set_requires_grad(true);
  Tensor logits = classifier_.forward(purify(xl, cfg_, tape, schedule_, denoiser_, opts_));
  e.predictions = argmax_rows(logits);
  Tensor losses = softmax_cross_entropy(logits, labels);
  e.grad = grad(sum(losses), std::vector<Tensor>{xl})[0];
  e.losses = losses.detach();
  return e;
}

double repeated_eval_accuracy(const Tensor& x, std::span<const int> labels,
                              const Pipeline& pipeline, int k, std::uint64_t seed,
                              std::size_t batch_size) {
  if (k < 1) throw ConfigError("repeated evaluation needs k >= 1");
  if (x.dim() != 2 || labels.size() != x.shape()[0]) {
    throw ShapeError("repeated evaluation expects [N, D] inputs with N labels");
  }
  const std::size_t n = x.shape()[0];
  const std::size_t dim = x.shape()[1];
  std::size_t robust = 0;
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    const std::size_t end = std::min(n, begin + batch_size);
    Tensor xb = slice_rows(x, begin, end);
    std::span<const int> yb = labels.subspan(begin, end - begin);
    std::vector<std::size_t> ids(end - begin);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = begin + i;
    std::vector<char> ok(ids.size(), 1);
    for (int j = 0; j < k; ++j) {
      std::vector<NoiseTape> rows;
      for (std::size_t id : ids) {
        rows.push_back(record_tape(sample_tape_seed(seed, id, static_cast<std::uint64_t>(j)),
                                   {1, dim}, pipeline.reverse_draws()));
      }
      Evaluation e = pipeline.evaluate(xb, yb, stack_tapes(rows), false);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (e.predictions[i] != yb[i]) ok[i] = 0;
      }
    }
    for (char c : ok) robust += c ? 1 : 0;
  }
  return static_cast<double>(robust) / static_cast<double>(n);
}

double repeated_eval_accuracy(const Tensor& x, std::span<const int> labels,
                              const Pipeline& pipeline, std::span<const NoiseTape> tapes) {
  if (tapes.empty()) throw ConfigError("repeated evaluation needs k >= 1");
  const std::size_t n = x.shape()[0];
  std::vector<char> ok(n, 1);
  for (const auto& tape : tapes) {
    Evaluation e = pipeline.evaluate(x, labels, tape, false);
    for (std::size_t i = 0; i < n; ++i) {
      if (e.predictions[i] != labels[i]) ok[i] = 0;
    }
  }
  std::size_t robust = 0;
  for (char c : ok) robust += c ? 1 : 0;
  return static_cast<double>(robust) / static_cast<double>(n);
}

}  // namespace dbp
