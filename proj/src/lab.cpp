#include "dbp/lab.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <initializer_list>
#include <sstream>

#include "dbp/autograd.hpp"
#include "dbp/error.hpp"
#include "dbp/io.hpp"
#include "dbp/kernels.hpp"
#include "dbp/ops.hpp"
#include "dbp/rng.hpp"

namespace dbp::lab {

using nlohmann::json;

namespace {

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  const std::size_t width = x.numel() / x.shape()[0];
  Shape shape = x.shape();
  shape[0] = end - begin;
  auto first = x.data().begin() + static_cast<std::ptrdiff_t>(begin * width);
  return Tensor(std::move(shape),
                Buffer(first, first + static_cast<std::ptrdiff_t>((end - begin) * width)),
                x.dtype());
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  const std::size_t width = x.numel() / x.shape()[0];
  Buffer v;
  v.reserve(idx.size() * width);
  for (std::size_t i : idx) {
    auto first = x.data().begin() + static_cast<std::ptrdiff_t>(i * width);
    v.insert(v.end(), first, first + static_cast<std::ptrdiff_t>(width));
  }
  Shape shape = x.shape();
  shape[0] = idx.size();
  return Tensor(std::move(shape), std::move(v), x.dtype());
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << text;
}

std::string dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::F32;
  if (s == "f64") return Dtype::F64;
  throw ConfigError("unknown dtype '" + s + "'");
}

void check_keys(const json& j, std::initializer_list<const char*> keys, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* key) { return k == key; })) {
      throw ConfigError("unknown key '" + k + "' in " + where);
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

void set_threads(int threads) {
  if (threads > 0) kernels::set_threads(threads);
}

std::size_t pattern_count(int num_classes) {
  if (num_classes != 2 && num_classes != 4) {
    throw ConfigError("synthetic dataset supports 2 or 4 classes");
  }
  return static_cast<std::size_t>(num_classes);
}

double mean_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s / static_cast<double>(t.numel());
}

ClassifierNet load_classifier_from(const ExperimentConfig& cfg, const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw ConfigError("missing classifier weights " + p.string());
  LoadOptions o;
  o.dtype = cfg.model.dtype;
  return load_classifier(p, o);
}

DenoiserNet load_denoiser_from(const ExperimentConfig& cfg, const std::filesystem::path& p) {
  if (!std::filesystem::exists(p)) throw ConfigError("missing denoiser weights " + p.string());
  LoadOptions o;
  o.dtype = cfg.model.dtype;
  return load_denoiser(p, o);
}

}  // namespace

// Dataset

Tensor ToyDataset::flat() const {
  const std::size_t n = images.shape()[0];
  return reshape(images, {n, images.numel() / n});
}

ToyDataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t image_size,
                         int num_classes, double contrast, double noise_std) {
  const std::size_t classes = pattern_count(num_classes);
  if (image_size < 8) throw ConfigError("image_size must be at least 8");
  if (n == 0) throw ConfigError("dataset needs at least one image");
  const std::size_t S = image_size;
  const std::size_t width = std::max<std::size_t>(2, S / 8);
  const std::size_t cell = std::max<std::size_t>(2, S / 4);
  const double background = 0.2;
  ToyDataset d;
  d.generator_seed = seed;
  d.num_classes = num_classes;
  Buffer pixels(n * S * S);
  std::vector<double> layout(2);
  std::vector<double> noise(S * S);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % classes);
    d.labels.push_back(label);
    rng::fill_uniform({seed, rng::Stream::DatasetLayout, static_cast<std::uint32_t>(i)}, layout);
    rng::fill_normal({seed, rng::Stream::DatasetPixels, static_cast<std::uint32_t>(i)}, noise);
    const auto pos = static_cast<std::size_t>(layout[0] * static_cast<double>(S - width + 1));
    const auto off = static_cast<long>(layout[0] * static_cast<double>(S / 2)) -
                     static_cast<long>(S / 4);
    const auto phase = static_cast<std::size_t>(layout[1] * static_cast<double>(2 * cell));
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        bool on = false;
        switch (label) {
          case 0: on = y >= pos && y < pos + width; break;
          case 1: on = x >= pos && x < pos + width; break;
          case 2: {
            const long diag = static_cast<long>(x) - static_cast<long>(y) - off;
            on = diag >= 0 && diag < static_cast<long>(width);
            break;
          }
          default: on = (((x + phase) / cell) + ((y + phase) / cell)) % 2 == 0; break;
        }
        const double v = background + (on ? contrast : 0.0) + noise_std * noise[y * S + x];
        pixels[i * S * S + y * S + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  d.images = Tensor({n, S, S}, std::move(pixels));
  return d;
}

ToyDataset train_split(const DatasetParams& p) {
  return synth_dataset(p.seed, p.train_size, p.image_size, p.num_classes, p.contrast,
                       p.noise_std);
}

ToyDataset test_split(const DatasetParams& p) {
  return synth_dataset(rng::derive_seed(p.seed, 0x7e57), p.test_size, p.image_size,
                       p.num_classes, p.contrast, p.noise_std);
}

void save_dataset(const std::filesystem::path& path, const ToyDataset& d) {
  io::Bundle b;
  b.header = json{{"kind", "toy_dataset"},
                  {"generator_seed", d.generator_seed},
                  {"num_classes", d.num_classes}}
                 .dump();
  b.tensors.push_back(d.images);
  Buffer labels(d.labels.begin(), d.labels.end());
  const Shape shape{labels.size()};
  b.tensors.push_back(Tensor(shape, std::move(labels)));
  io::save_bundle(path, b);
}

ToyDataset load_dataset(const std::filesystem::path& path) {
  io::Bundle b = io::load_bundle(path);
  ToyDataset d;
  try {
    json h = json::parse(b.header);
    if (h.at("kind") != "toy_dataset") throw FormatError("bundle is not a toy dataset");
    d.generator_seed = h.at("generator_seed").get<std::uint64_t>();
    d.num_classes = h.at("num_classes").get<int>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad dataset header: ") + e.what());
  }
  if (b.tensors.size() != 2) throw FormatError("dataset bundle needs images and labels");
  d.images = b.tensors[0];
  for (double v : b.tensors[1].data()) d.labels.push_back(static_cast<int>(v));
  return d;
}

// Config

nlohmann::json ExperimentConfig::to_json() const {
  const auto& a = addt.addt;
  return json{
      {"dataset",
       {{"seed", dataset.seed},
        {"train_size", dataset.train_size},
        {"test_size", dataset.test_size},
        {"image_size", dataset.image_size},
        {"num_classes", dataset.num_classes},
        {"contrast", dataset.contrast},
        {"noise_std", dataset.noise_std}}},
      {"model",
       {{"T", model.T},
        {"denoiser_hidden", model.denoiser_hidden},
        {"denoiser_layers", model.denoiser_layers},
        {"time_dim", model.time_dim},
        {"classifier_hidden", model.classifier_hidden},
        {"classifier_layers", model.classifier_layers},
        {"dtype", dtype_name(model.dtype)}}},
      {"train_diffusion",
       {{"epochs", diffusion.epochs},
        {"batch_size", diffusion.batch_size},
        {"lr", diffusion.lr},
        {"seed", diffusion.seed},
        {"loss_threshold", diffusion.loss_threshold}}},
      {"train_classifier",
       {{"epochs", classifier.epochs},
        {"batch_size", classifier.batch_size},
        {"lr", classifier.lr},
        {"seed", classifier.seed},
        {"noise_augment", classifier.noise_augment}}},
      {"purify",
       {{"sampler", sampler_name(purify.sampler)},
        {"t_star", purify.t_star},
        {"nfe", purify.nfe}}},
      {"attack",
       {{"norm", norm_name(attack.norm)},
        {"radius", attack.radius},
        {"step_size", attack.step_size},
        {"steps", attack.steps},
        {"eot_samples", attack.eot_samples},
        {"knowledge", attack.knowledge.name()},
        {"random_start", attack.random_start},
        {"seed", attack.seed}}},
      {"eval",
       {{"settings", eval.settings},
        {"semi_k", eval.semi_k},
        {"samples", eval.samples},
        {"tape_seed", eval.tape_seed},
        {"chunk", eval.chunk},
        {"denoiser", eval.denoiser}}},
      {"analysis",
       {{"eot_sweep", analysis.eot_sweep},
        {"samples", analysis.samples},
        {"landscape_resolution", analysis.landscape_resolution},
        {"landscape_extent", analysis.landscape_extent},
        {"landscape_sample", analysis.landscape_sample},
        {"variance_repeats", analysis.variance_repeats}}},
      {"addt",
       {{"lambda_unit", a.lambda_unit},
        {"lambda_min", a.lambda_min},
        {"lambda_max", a.lambda_max},
        {"cgpo_steps", a.cgpo_steps},
        {"perturbation_mode", mode_name(a.perturbation_mode)},
        {"objective", objective_name(a.objective)},
        {"delta_init_std", a.delta_init_std},
        {"linf_radius", a.linf_radius},
        {"linf_step", a.linf_step},
        {"t_max", addt.t_max},
        {"epochs", addt.epochs},
        {"batch_size", addt.batch_size},
        {"lr", addt.lr},
        {"seed", addt.seed},
        {"init", addt.init},
        {"output", addt.output}}},
      {"threads", threads},
      {"denoiser_file", denoiser_file},
      {"classifier_file", classifier_file}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    check_keys(j, {"dataset", "model", "train_diffusion", "train_classifier", "purify", "attack",
                   "eval", "analysis", "addt", "threads", "denoiser_file", "classifier_file"},
               "config");
    if (j.contains("dataset")) {
      const auto& d = j["dataset"];
      check_keys(d, {"seed", "train_size", "test_size", "image_size", "num_classes", "contrast",
                     "noise_std"},
                 "dataset");
      read(d, "seed", c.dataset.seed);
      read(d, "train_size", c.dataset.train_size);
      read(d, "test_size", c.dataset.test_size);
      read(d, "image_size", c.dataset.image_size);
      read(d, "num_classes", c.dataset.num_classes);
      read(d, "contrast", c.dataset.contrast);
      read(d, "noise_std", c.dataset.noise_std);
    }
    if (j.contains("model")) {
      const auto& m = j["model"];
      check_keys(m, {"T", "denoiser_hidden", "denoiser_layers", "time_dim", "classifier_hidden",
                     "classifier_layers", "dtype"},
                 "model");
      read(m, "T", c.model.T);
      read(m, "denoiser_hidden", c.model.denoiser_hidden);
      read(m, "denoiser_layers", c.model.denoiser_layers);
      read(m, "time_dim", c.model.time_dim);
      read(m, "classifier_hidden", c.model.classifier_hidden);
      read(m, "classifier_layers", c.model.classifier_layers);
      if (m.contains("dtype")) c.model.dtype = parse_dtype(m["dtype"].get<std::string>());
    }
    if (j.contains("train_diffusion")) {
      const auto& t = j["train_diffusion"];
      check_keys(t, {"epochs", "batch_size", "lr", "seed", "loss_threshold"}, "train_diffusion");
      read(t, "epochs", c.diffusion.epochs);
      read(t, "batch_size", c.diffusion.batch_size);
      read(t, "lr", c.diffusion.lr);
      read(t, "seed", c.diffusion.seed);
      read(t, "loss_threshold", c.diffusion.loss_threshold);
    }
    if (j.contains("train_classifier")) {
      const auto& t = j["train_classifier"];
      check_keys(t, {"epochs", "batch_size", "lr", "seed", "noise_augment"}, "train_classifier");
      read(t, "epochs", c.classifier.epochs);
      read(t, "batch_size", c.classifier.batch_size);
      read(t, "lr", c.classifier.lr);
      read(t, "seed", c.classifier.seed);
      read(t, "noise_augment", c.classifier.noise_augment);
    }
    if (j.contains("purify")) {
      const auto& p = j["purify"];
      check_keys(p, {"sampler", "t_star", "nfe"}, "purify");
      if (p.contains("sampler")) c.purify.sampler = parse_sampler(p["sampler"].get<std::string>());
      read(p, "t_star", c.purify.t_star);
      read(p, "nfe", c.purify.nfe);
    }
    if (j.contains("attack")) {
      const auto& a = j["attack"];
      check_keys(a, {"norm", "radius", "step_size", "steps", "eot_samples", "knowledge",
                     "random_start", "seed"},
                 "attack");
      if (a.contains("norm")) c.attack.norm = parse_norm(a["norm"].get<std::string>());
      read(a, "radius", c.attack.radius);
      read(a, "step_size", c.attack.step_size);
      read(a, "steps", c.attack.steps);
      read(a, "eot_samples", c.attack.eot_samples);
      if (a.contains("knowledge")) {
        c.attack.knowledge = KnowledgeSetting::parse(a["knowledge"].get<std::string>());
      }
      read(a, "random_start", c.attack.random_start);
      read(a, "seed", c.attack.seed);
    }
    if (j.contains("eval")) {
      const auto& e = j["eval"];
      check_keys(e, {"settings", "semi_k", "samples", "tape_seed", "chunk", "denoiser"}, "eval");
      read(e, "settings", c.eval.settings);
      read(e, "semi_k", c.eval.semi_k);
      read(e, "samples", c.eval.samples);
      read(e, "tape_seed", c.eval.tape_seed);
      read(e, "chunk", c.eval.chunk);
      read(e, "denoiser", c.eval.denoiser);
    }
    if (j.contains("analysis")) {
      const auto& a = j["analysis"];
      check_keys(a, {"eot_sweep", "sweep_steps", "sweep_step_size", "samples", "landscape_resolution", "landscape_extent",
                     "landscape_sample", "variance_repeats"},
                 "analysis");
      read(a, "eot_sweep", c.analysis.eot_sweep);
      read(a, "sweep_steps", c.analysis.sweep_steps);
      read(a, "sweep_step_size", c.analysis.sweep_step_size);
      read(a, "samples", c.analysis.samples);
      read(a, "landscape_resolution", c.analysis.landscape_resolution);
      read(a, "landscape_extent", c.analysis.landscape_extent);
      read(a, "landscape_sample", c.analysis.landscape_sample);
      read(a, "variance_repeats", c.analysis.variance_repeats);
    }
    if (j.contains("addt")) {
      const auto& a = j["addt"];
      check_keys(a, {"lambda_unit", "lambda_min", "lambda_max", "cgpo_steps",
                     "perturbation_mode", "objective", "delta_init_std", "linf_radius",
                     "linf_step", "t_max", "epochs", "batch_size", "lr", "seed", "init", "output"},
                 "addt");
      auto& x = c.addt.addt;
      read(a, "lambda_unit", x.lambda_unit);
      read(a, "lambda_min", x.lambda_min);
      read(a, "lambda_max", x.lambda_max);
      read(a, "cgpo_steps", x.cgpo_steps);
      if (a.contains("perturbation_mode")) {
        x.perturbation_mode = parse_mode(a["perturbation_mode"].get<std::string>());
      }
      if (a.contains("objective")) x.objective = parse_objective(a["objective"].get<std::string>());
      read(a, "delta_init_std", x.delta_init_std);
      read(a, "linf_radius", x.linf_radius);
      read(a, "linf_step", x.linf_step);
      read(a, "t_max", c.addt.t_max);
      read(a, "epochs", c.addt.epochs);
      read(a, "batch_size", c.addt.batch_size);
      read(a, "lr", c.addt.lr);
      read(a, "seed", c.addt.seed);
      read(a, "init", c.addt.init);
      read(a, "output", c.addt.output);
    }
    read(j, "threads", c.threads);
    read(j, "denoiser_file", c.denoiser_file);
    read(j, "classifier_file", c.classifier_file);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
  c.attack.validate();
  c.addt.addt.validate();
  c.purify_config().validate();
  if (c.eval.chunk == 0) throw ConfigError("eval.chunk must be positive");
  pattern_count(c.dataset.num_classes);
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return from_json(j);
}

void ExperimentConfig::save(const std::filesystem::path& path) const {
  write_text(path, to_json().dump(2) + "\n");
}

Schedule ExperimentConfig::schedule() const { return default_schedule(model.T); }

PurifyConfig ExperimentConfig::purify_config() const {
  return PurifyConfig::make(purify.sampler, purify.t_star, purify.nfe);
}

DenoiserSpec ExperimentConfig::denoiser_spec() const {
  DenoiserSpec s;
  s.image_dim = dataset.image_size * dataset.image_size;
  s.hidden = model.denoiser_hidden;
  s.hidden_layers = model.denoiser_layers;
  s.time_dim = model.time_dim;
  s.T = model.T;
  s.dtype = model.dtype;
  return s;
}

ClassifierSpec ExperimentConfig::classifier_spec() const {
  ClassifierSpec s;
  s.image_dim = dataset.image_size * dataset.image_size;
  s.hidden = model.classifier_hidden;
  s.hidden_layers = model.classifier_layers;
  s.num_classes = static_cast<std::size_t>(dataset.num_classes);
  s.dtype = model.dtype;
  return s;
}

// Training

TrainReport train_diffusion(DenoiserNet& net, const Tensor& images, const Schedule& s,
                            const TrainParams& p) {
  TrainReport report;
  const std::size_t n = images.shape()[0];
  const std::size_t dim = images.numel() / n;
  const std::size_t bs = std::min(p.batch_size, n);
  Adam opt(net.parameters(), AdamConfig{p.lr});
  std::uint32_t step = 0;
  for (int epoch = 0; epoch < p.epochs; ++epoch) {
    const auto order =
        rng::permutation({p.seed, rng::Stream::TrainShuffle, static_cast<std::uint32_t>(epoch)}, n);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b + bs <= n; b += bs, ++step) {
      Tensor x0 = gather_rows(images, std::span(order).subspan(b, bs)).to(net.spec().dtype);
      std::vector<int> t(bs);
      for (std::size_t r = 0; r < bs; ++r) {
        t[r] = 1 + static_cast<int>(rng::uniform_index({p.seed, rng::Stream::TrainTime, step}, r,
                                                       static_cast<std::uint64_t>(s.T)));
      }
      Tensor eps({bs, dim}, rng::normal({p.seed, rng::Stream::TrainNoise, step}, bs * dim),
                 net.spec().dtype);
      EpsModel model = [&](const Tensor& xt, std::span<const int> ts) {
        return net.forward(xt, ts);
      };
      Tensor loss = scale(diffusion_loss(model, x0, t, eps, s), 1.0 / static_cast<double>(bs * dim));
      const double value = loss.item();
      if (!std::isfinite(value)) throw TrainingError("diffusion loss diverged");
      const auto params = net.parameters();
      try {
        opt.step(grad(loss, params));
      } catch (const NumericError& e) {
        throw TrainingError(std::string("diffusion training: ") + e.what());
      }
      total += value;
      ++batches;
    }
    report.epochs.push_back({epoch + 1, total / static_cast<double>(std::max<std::size_t>(1, batches))});
  }
  return report;
}

double classifier_accuracy(const ClassifierNet& net, const Tensor& x, std::span<const int> y) {
  NoGradGuard off;
  const auto pred = argmax_rows(net.forward(x.to(net.spec().dtype)));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == y[i];
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

TrainReport train_classifier(ClassifierNet& net, const ToyDataset& train, const ToyDataset& test,
                             const TrainParams& p) {
  TrainReport report;
  const Tensor images = train.flat();
  const std::size_t n = images.shape()[0];
  const std::size_t dim = images.numel() / n;
  const std::size_t bs = std::min(p.batch_size, n);
  Adam opt(net.parameters(), AdamConfig{p.lr});
  std::uint32_t step = 0;
  for (int epoch = 0; epoch < p.epochs; ++epoch) {
    const auto order =
        rng::permutation({p.seed, rng::Stream::TrainShuffle, static_cast<std::uint32_t>(epoch)}, n);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b + bs <= n; b += bs, ++step) {
      std::span<const std::size_t> idx = std::span(order).subspan(b, bs);
      Tensor x = gather_rows(images, idx);
      if (p.noise_augment > 0.0) {
        Tensor z({bs, dim}, rng::normal({p.seed, rng::Stream::TrainNoise, step}, bs * dim));
        x = add(x, scale(z, p.noise_augment));
      }
      x = x.to(net.spec().dtype);
      std::vector<int> y;
      for (std::size_t i : idx) y.push_back(train.labels[i]);
      Tensor loss = mean(softmax_cross_entropy(net.forward(x), y));
      const double value = loss.item();
      if (!std::isfinite(value)) throw TrainingError("classifier loss diverged");
      const auto params = net.parameters();
      try {
        opt.step(grad(loss, params));
      } catch (const NumericError& e) {
        throw TrainingError(std::string("classifier training: ") + e.what());
      }
      total += value;
      ++batches;
    }
    EpochLog log;
    log.epoch = epoch + 1;
    log.loss = total / static_cast<double>(std::max<std::size_t>(1, batches));
    log.train_accuracy = classifier_accuracy(net, images, train.labels);
    log.test_accuracy = classifier_accuracy(net, test.flat(), test.labels);
    report.epochs.push_back(log);
  }
  return report;
}

std::vector<AddtEpochLog> addt_finetune(DenoiserNet& net, const ClassifierNet& classifier,
                                        const Tensor& images, std::span<const int> labels,
                                        const Schedule& s, const AddtParams& p) {
  p.addt.validate();
  const int t_max = p.t_max > 0 ? std::min(p.t_max, s.T) : s.T;
  const std::size_t n = images.shape()[0];
  const std::size_t bs = std::min(p.batch_size, n);
  Adam opt(net.parameters(), AdamConfig{p.lr});
  std::vector<AddtEpochLog> logs;
  std::uint32_t step = 0;
  for (int epoch = 0; epoch < p.epochs; ++epoch) {
    const auto order =
        rng::permutation({p.seed, rng::Stream::TrainShuffle, static_cast<std::uint32_t>(epoch)}, n);
    double loss = 0.0, objective = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b + bs <= n; b += bs, ++step) {
      std::span<const std::size_t> idx = std::span(order).subspan(b, bs);
      Tensor x0 = gather_rows(images, idx).to(net.spec().dtype);
      std::vector<int> y, t(bs);
      for (std::size_t i : idx) y.push_back(labels[i]);
      for (std::size_t r = 0; r < bs; ++r) {
        t[r] = 1 + static_cast<int>(rng::uniform_index({p.seed, rng::Stream::TrainTime, step}, r,
                                                       static_cast<std::uint64_t>(t_max)));
      }
      ADDTStep r;
      try {
        r = addt_train_step(net, x0, y, t, classifier, p.addt, opt, s,
                            rng::derive_seed(p.seed, step));
      } catch (const NumericError& e) {
        throw TrainingError(std::string("ADDT fine-tuning: ") + e.what());
      }
      if (!std::isfinite(r.loss)) throw TrainingError("ADDT loss diverged");
      loss += r.loss;
      objective += r.cgpo_objective;
      ++batches;
    }
    const double k = static_cast<double>(std::max<std::size_t>(1, batches));
    logs.push_back({epoch + 1, objective / k, loss / k});
  }
  return logs;
}

// Evaluation

AttackBatch make_eval_batch(const ToyDataset& d, std::size_t n, std::uint64_t tape_seed,
                            std::size_t reverse_draws) {
  n = std::min(n, d.size());
  const Tensor flat = d.flat();
  const std::size_t dim = flat.numel() / flat.shape()[0];
  AttackBatch b;
  b.x = slice_rows(flat, 0, n);
  b.labels.assign(d.labels.begin(), d.labels.begin() + static_cast<std::ptrdiff_t>(n));
  for (std::size_t i = 0; i < n; ++i) {
    b.ids.push_back(i);
    b.victim.push_back(record_tape(sample_tape_seed(tape_seed, i), {1, dim}, reverse_draws));
  }
  return b;
}

AttackReport attack_chunked(const AttackBatch& batch, const AttackConfig& cfg,
                            const Pipeline& pipeline, std::size_t chunk) {
  const std::size_t rows = batch.x.shape()[0];
  chunk = std::max<std::size_t>(1, chunk);
  const std::size_t chunks = (rows + chunk - 1) / chunk;
  std::vector<AttackReport> parts(chunks);
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic, 1) num_threads(kernels::max_threads())
  for (std::size_t c = 0; c < chunks; ++c) {
    try {
      const std::size_t lo = c * chunk, hi = std::min(rows, lo + chunk);
      AttackBatch sub;
      sub.x = slice_rows(batch.x, lo, hi);
      sub.labels.assign(batch.labels.begin() + static_cast<std::ptrdiff_t>(lo),
                        batch.labels.begin() + static_cast<std::ptrdiff_t>(hi));
      sub.ids.assign(batch.ids.begin() + static_cast<std::ptrdiff_t>(lo),
                     batch.ids.begin() + static_cast<std::ptrdiff_t>(hi));
      sub.victim.assign(batch.victim.begin() + static_cast<std::ptrdiff_t>(lo),
                        batch.victim.begin() + static_cast<std::ptrdiff_t>(hi));
      parts[c] = attack(sub, cfg, pipeline);
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  auto stack = [&](auto member) {
    std::vector<Tensor> pieces;
    for (const auto& p : parts) pieces.push_back(p.*member);
    return stack_rows(pieces);
  };
  AttackReport out;
  out.adversarial = stack(&AttackReport::adversarial);
  out.clean_loss = stack(&AttackReport::clean_loss);
  out.final_loss = stack(&AttackReport::final_loss);
  for (std::size_t s = 0; s < parts[0].trajectory.size(); ++s) {
    std::vector<Tensor> pieces;
    for (const auto& p : parts) pieces.push_back(p.trajectory[s]);
    out.trajectory.push_back(stack_rows(pieces));
  }
  for (std::size_t s = 0; s < parts[0].grad_records.size(); ++s) {
    std::vector<Tensor> pieces;
    for (const auto& p : parts) pieces.push_back(p.grad_records[s]);
    out.grad_records.push_back(stack_rows(pieces));
  }
  out.losses.assign(parts[0].losses.size(), 0.0);
  for (const auto& p : parts) {
    const double w = static_cast<double>(p.adversarial.shape()[0]) / static_cast<double>(rows);
    for (std::size_t s = 0; s < p.losses.size(); ++s) out.losses[s] += w * p.losses[s];
    out.clean_predictions.insert(out.clean_predictions.end(), p.clean_predictions.begin(),
                                 p.clean_predictions.end());
    out.predictions.insert(out.predictions.end(), p.predictions.begin(), p.predictions.end());
    out.success.insert(out.success.end(), p.success.begin(), p.success.end());
    out.victim_choice.insert(out.victim_choice.end(), p.victim_choice.begin(),
                             p.victim_choice.end());
  }
  return out;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "setting,norm,radius,steps,eot,accuracy,mean_loss,seed\n";
  for (const auto& r : rows) {
    os << r.setting << ',' << norm_name(r.norm) << ',' << fmt(r.radius) << ',' << r.steps << ','
       << r.eot << ',' << fmt(r.accuracy) << ',' << fmt(r.mean_loss) << ',' << r.seed << '\n';
  }
  return os.str();
}

AttackConfig setting_attack(const ExperimentConfig& cfg, const std::string& setting) {
  AttackConfig a = cfg.attack;
  if (setting == "pgd_noeot") {
    a.knowledge = KnowledgeSetting::white_box();
    a.eot_samples = 1;
  } else if (setting == "pgd_eot") {
    a.knowledge = KnowledgeSetting::white_box();
  } else if (setting == "dw_fwd") {
    a.knowledge = KnowledgeSetting::dw_fwd();
  } else if (setting == "dw_rev") {
    a.knowledge = KnowledgeSetting::dw_rev();
  } else if (setting == "dw_both") {
    a.knowledge = KnowledgeSetting::dw_both();
    a.eot_samples = 1;
  } else if (setting == "dw_semi") {
    a.knowledge = KnowledgeSetting::dw_semi(cfg.eval.semi_k);
    a.eot_samples = 1;
  } else {
    throw ConfigError("unknown eval setting '" + setting + "'");
  }
  return a;
}

std::vector<MetricRow> evaluate_settings(const ExperimentConfig& cfg, const DenoiserNet& denoiser,
                                         const ClassifierNet& classifier,
                                         const ToyDataset& test) {
  const Schedule s = cfg.schedule();
  const PurifyConfig pc = cfg.purify_config();
  PurifyPipeline pipeline(pc, s, denoiser, classifier);
  AttackBatch batch = make_eval_batch(test, cfg.eval.samples, cfg.eval.tape_seed,
                                      pc.stochastic_draws());
  batch.x = batch.x.to(cfg.model.dtype);
  std::vector<MetricRow> rows;
  for (const auto& setting : cfg.eval.settings) {
    MetricRow row;
    row.norm = cfg.attack.norm;
    row.seed = cfg.attack.seed;
    if (setting == "clean") {
      AttackConfig a = cfg.attack;
      a.knowledge = KnowledgeSetting::dw_both();
      a.steps = 1;
      a.eot_samples = 1;
      AttackReport r = attack_chunked(batch, a, pipeline, cfg.eval.chunk);
      std::size_t ok = 0;
      for (std::size_t i = 0; i < r.clean_predictions.size(); ++i) {
        ok += r.clean_predictions[i] == batch.labels[i];
      }
      row.setting = "clean";
      row.accuracy = static_cast<double>(ok) / static_cast<double>(batch.labels.size());
      row.mean_loss = mean_of(r.clean_loss);
    } else {
      const AttackConfig a = setting_attack(cfg, setting);
      AttackReport r = attack_chunked(batch, a, pipeline, cfg.eval.chunk);
      row.setting = a.knowledge.name() == "white_box" ? setting : a.knowledge.name();
      row.radius = a.radius;
      row.steps = a.steps;
      row.eot = a.eot_samples;
      row.accuracy = r.robust_accuracy();
      row.mean_loss = mean_of(r.final_loss);
    }
    rows.push_back(row);
  }
  return rows;
}

std::vector<SweepRow> eot_sweep(const ExperimentConfig& cfg, const Pipeline& pipeline,
                                const AttackBatch& batch) {
  const std::size_t rows = batch.x.shape()[0];
  std::vector<AttackerTape> known, unknown;
  for (const auto& t : batch.victim) {
    known.push_back(knowledge_view(t, KnowledgeSetting::dw_both()));
    unknown.push_back(knowledge_view(t, KnowledgeSetting::white_box()));
  }
  const Tensor g_dw = eot_gradient(batch.x, batch.labels, batch.ids, known, 1, pipeline,
                                   cfg.attack.seed);
  std::vector<SweepRow> out;
  for (int n : cfg.analysis.eot_sweep) {
    SweepRow row;
    row.n = n;
    const Tensor g = eot_gradient(batch.x, batch.labels, batch.ids, unknown, n, pipeline,
                                  rng::derive_seed(cfg.attack.seed, 0xe07));
    double cos = 0.0;
    for (std::size_t r = 0; r < rows; ++r) cos += gradient_similarity(dbp::row(g, r), dbp::row(g_dw, r));
    row.cosine = cos / static_cast<double>(rows);
    AttackConfig a = cfg.attack;
    a.knowledge = KnowledgeSetting::white_box();
    a.eot_samples = n;
    if (cfg.analysis.sweep_steps > 0) a.steps = cfg.analysis.sweep_steps;
    if (cfg.analysis.sweep_step_size > 0.0) a.step_size = cfg.analysis.sweep_step_size;
    row.robust_accuracy = attack_chunked(batch, a, pipeline, cfg.eval.chunk).robust_accuracy();
    out.push_back(row);
  }
  return out;
}

// Runners

void run_synth(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  save_dataset(out / "train.dbpb", train_split(cfg.dataset));
  save_dataset(out / "test.dbpb", test_split(cfg.dataset));
  cfg.save(out / "synth_config.json");
}

TrainReport run_train_diffusion(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  set_threads(cfg.threads);
  std::filesystem::create_directories(out);
  DenoiserNet net(cfg.denoiser_spec(), cfg.diffusion.seed);
  TrainReport r = train_diffusion(net, train_split(cfg.dataset).flat(), cfg.schedule(),
                                  cfg.diffusion);
  std::ostringstream csv;
  csv << "epoch,loss\n";
  for (const auto& e : r.epochs) csv << e.epoch << ',' << fmt(e.loss) << '\n';
  write_text(out / "diffusion_loss.csv", csv.str());
  save_weights(net, out / cfg.denoiser_file);
  cfg.save(out / "train_diffusion_config.json");
  if (cfg.diffusion.loss_threshold > 0.0 && !r.epochs.empty() &&
      r.epochs.back().loss > cfg.diffusion.loss_threshold) {
    throw TrainingError("final diffusion loss " + fmt(r.epochs.back().loss) +
                        " is above the threshold " + fmt(cfg.diffusion.loss_threshold));
  }
  return r;
}

TrainReport run_train_classifier(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  set_threads(cfg.threads);
  std::filesystem::create_directories(out);
  ClassifierNet net(cfg.classifier_spec(), cfg.classifier.seed);
  TrainReport r = train_classifier(net, train_split(cfg.dataset), test_split(cfg.dataset),
                                   cfg.classifier);
  std::ostringstream csv;
  csv << "epoch,loss,train_accuracy,test_accuracy\n";
  for (const auto& e : r.epochs) {
    csv << e.epoch << ',' << fmt(e.loss) << ',' << fmt(e.train_accuracy) << ','
        << fmt(e.test_accuracy) << '\n';
  }
  write_text(out / "classifier_log.csv", csv.str());
  save_weights(net, out / cfg.classifier_file);
  cfg.save(out / "train_classifier_config.json");
  return r;
}

std::vector<AddtEpochLog> run_addt_finetune(const ExperimentConfig& cfg,
                                            const std::filesystem::path& out) {
  set_threads(cfg.threads);
  DenoiserNet net = load_denoiser_from(cfg, out / cfg.addt.init);
  const ClassifierNet classifier = load_classifier_from(cfg, out / cfg.classifier_file);
  const ToyDataset train = train_split(cfg.dataset);
  auto logs = addt_finetune(net, classifier, train.flat(), train.labels, cfg.schedule(), cfg.addt);
  std::ostringstream csv;
  csv << "epoch,cgpo_objective,loss\n";
  for (const auto& e : logs) {
    csv << e.epoch << ',' << fmt(e.cgpo_objective) << ',' << fmt(e.loss) << '\n';
  }
  write_text(out / "addt_log.csv", csv.str());
  save_weights(net, out / cfg.addt.output);
  cfg.save(out / "addt_config.json");
  return logs;
}

std::vector<MetricRow> run_eval(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  set_threads(cfg.threads);
  const DenoiserNet denoiser = load_denoiser_from(cfg, out / cfg.eval.denoiser);
  const ClassifierNet classifier = load_classifier_from(cfg, out / cfg.classifier_file);
  auto rows = evaluate_settings(cfg, denoiser, classifier, test_split(cfg.dataset));
  write_text(out / "metrics.csv", metrics_csv(rows));
  cfg.save(out / "eval_config.json");
  return rows;
}

void run_analysis(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  set_threads(cfg.threads);
  const DenoiserNet denoiser = load_denoiser_from(cfg, out / cfg.eval.denoiser);
  const ClassifierNet classifier = load_classifier_from(cfg, out / cfg.classifier_file);
  const Schedule s = cfg.schedule();
  const PurifyConfig pc = cfg.purify_config();
  PurifyPipeline pipeline(pc, s, denoiser, classifier);
  const ToyDataset test = test_split(cfg.dataset);
  AttackBatch batch =
      make_eval_batch(test, cfg.analysis.samples, cfg.eval.tape_seed, pc.stochastic_draws());
  batch.x = batch.x.to(cfg.model.dtype);

  std::ostringstream sweep;
  sweep << "n,robust_accuracy,cosine\n";
  for (const auto& r : eot_sweep(cfg, pipeline, batch)) {
    sweep << r.n << ',' << fmt(r.robust_accuracy) << ',' << fmt(r.cosine) << '\n';
  }
  write_text(out / "eot_sweep.csv", sweep.str());

  // Gradient variance of the EoT estimate across independent repeats.
  std::vector<AttackerTape> unknown;
  for (const auto& t : batch.victim) unknown.push_back(knowledge_view(t, KnowledgeSetting::white_box()));
  std::ostringstream var;
  var << "n,variance,repeats\n";
  const int repeats = std::max(2, cfg.analysis.variance_repeats);
  for (int n : cfg.analysis.eot_sweep) {
    std::vector<Tensor> est;
    for (int r = 0; r < repeats; ++r) {
      est.push_back(eot_gradient(batch.x, batch.labels, batch.ids, unknown, n, pipeline,
                                 rng::derive_seed(cfg.attack.seed, 0x7a5 + r)));
    }
    double v = 0.0;
    const std::size_t count = est[0].numel();
    for (std::size_t i = 0; i < count; ++i) {
      double m = 0.0;
      for (const auto& e : est) m += e.at(i);
      m /= repeats;
      for (const auto& e : est) v += (e.at(i) - m) * (e.at(i) - m);
    }
    v /= static_cast<double>(count) * (repeats - 1);
    var << n << ',' << fmt(v) << ',' << repeats << '\n';
  }
  write_text(out / "gradient_variance.csv", var.str());

  // Landscape spanned by the DW_Both and EoT final perturbations of one sample.
  const std::size_t k = std::min(cfg.analysis.landscape_sample, batch.labels.size() - 1);
  AttackBatch one;
  one.x = dbp::row(batch.x, k);
  one.labels = {batch.labels[k]};
  one.ids = {batch.ids[k]};
  one.victim = {batch.victim[k]};
  AttackConfig dw = cfg.attack;
  dw.knowledge = KnowledgeSetting::dw_both();
  dw.eot_samples = 1;
  AttackConfig wb = cfg.attack;
  wb.knowledge = KnowledgeSetting::white_box();
  const AttackReport rd = attack(one, dw, pipeline);
  const AttackReport re = attack(one, wb, pipeline);
  const Tensor& p_dw = rd.trajectory.back();
  const Tensor& p_eot = re.trajectory.back();
  double extent = cfg.analysis.landscape_extent;
  if (extent <= 0.0) {
    double a = 0.0, b = 0.0;
    for (double v : p_dw.data()) a += v * v;
    for (double v : p_eot.data()) b += v * v;
    extent = 1.5 * std::sqrt(std::max(a, b));
  }
  const LandscapeGrid grid = landscape_grid(one.x, one.labels[0], p_dw, p_eot, extent,
                                            cfg.analysis.landscape_resolution, pipeline,
                                            one.victim[0]);
  write_text(out / "landscape.csv", grid.to_csv());
  json traj;
  auto path_of = [&](const AttackReport& r) {
    json pts = json::array();
    for (const auto& d : r.trajectory) {
      auto [a, b] = grid.project(d);
      pts.push_back({a, b});
    }
    return pts;
  };
  traj["sample"] = k;
  traj["extent"] = extent;
  traj["dw_both"] = path_of(rd);
  traj["white_box_eot"] = path_of(re);
  traj["dw_both_loss"] = rd.losses;
  traj["white_box_eot_loss"] = re.losses;
  write_text(out / "trajectory.json", traj.dump(2) + "\n");
  cfg.save(out / "analysis_config.json");
}

}  // namespace dbp::lab
