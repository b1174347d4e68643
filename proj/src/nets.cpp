#include "dbp/nets.hpp"

#include <cmath>

#include <json.hpp>

#include "dbp/error.hpp"
#include "dbp/io.hpp"
#include "dbp/ops.hpp"
#include "dbp/rng.hpp"

namespace dbp {

namespace {

Tensor init_weight(std::size_t in, std::size_t out, Dtype dtype, std::uint64_t seed,
                   std::uint32_t index) {
  Buffer v = rng::normal({seed, rng::Stream::WeightInit, index}, in * out);
  const double s = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& x : v) x *= s;
  return Tensor({in, out}, std::move(v), dtype, true);
}

Dense make_dense(std::size_t in, std::size_t out, Dtype dtype, std::optional<std::uint64_t> seed,
                 std::uint32_t index) {
  Dense d;
  d.weight = seed ? init_weight(in, out, dtype, *seed, index)
                  : Tensor::zeros({in, out}, dtype).set_requires_grad(true);
  d.bias = Tensor::zeros({out}, dtype).set_requires_grad(true);
  return d;
}

Tensor affine(const Tensor& h, const Dense& d) { return add(matmul(h, d.weight), d.bias); }

void check_input(const Tensor& x, std::size_t dim, const char* who) {
  if (x.dim() != 2 || x.shape()[1] != dim) {
    throw ShapeError(std::string(who) + " expects [B, " + std::to_string(dim) + "], got " +
                     shape_str(x.shape()));
  }
}

std::vector<Tensor> dense_params(const std::vector<Dense>& layers) {
  std::vector<Tensor> p;
  for (const auto& l : layers) {
    p.push_back(l.weight);
    p.push_back(l.bias);
  }
  return p;
}

void assign_dense(std::vector<Dense>& layers, std::span<Tensor> params) {
  if (params.size() != 2 * layers.size()) throw ShapeError("parameter count mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (params[2 * i].shape() != layers[i].weight.shape() ||
        params[2 * i + 1].shape() != layers[i].bias.shape()) {
      throw ShapeError("parameter shape mismatch in layer " + std::to_string(i));
    }
    layers[i].weight = params[2 * i];
    layers[i].bias = params[2 * i + 1];
  }
}

std::vector<Tensor> deep_copy(const std::vector<Tensor>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.detach().set_requires_grad(true));
  return out;
}

std::string dtype_name(Dtype d) { return d == Dtype::F32 ? "f32" : "f64"; }

Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return Dtype::F32;
  if (s == "f64") return Dtype::F64;
  throw FormatError("unknown dtype tag '" + s + "'");
}

std::vector<std::size_t> layer_sizes(std::size_t in, std::size_t hidden, std::size_t layers,
                                     std::size_t out) {
  std::vector<std::size_t> sizes{in};
  for (std::size_t i = 0; i < layers; ++i) sizes.push_back(hidden);
  sizes.push_back(out);
  return sizes;
}

void save_bundle(const std::filesystem::path& path, nlohmann::json header,
                 const std::vector<Tensor>& params, Dtype dtype) {
  header["format"] = 1;
  header["dtype"] = dtype_name(dtype);
  io::Bundle b;
  b.header = header.dump();
  for (const auto& p : params) b.tensors.push_back(p.detach());
  io::save_bundle(path, b);
}

struct Loaded {
  nlohmann::json header;
  std::vector<Tensor> tensors;
  Dtype dtype;
};

Loaded load_bundle(const std::filesystem::path& path, const char* kind,
                   const LoadOptions& opts) {
  io::Bundle b = io::load_bundle(path);
  Loaded out;
  try {
    out.header = nlohmann::json::parse(b.header);
    if (out.header.at("kind").get<std::string>() != kind) {
      throw FormatError(std::string("weight file is not a ") + kind);
    }
    if (out.header.at("format").get<int>() != 1) throw FormatError("unsupported weight format");
    const Dtype stored = parse_dtype(out.header.at("dtype").get<std::string>());
    out.dtype = opts.dtype.value_or(stored);
    if (stored == Dtype::F64 && out.dtype == Dtype::F32 && !opts.allow_downcast) {
      throw ConfigError("loading f64 weights as f32 requires allow_downcast");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad weight manifest: ") + e.what());
  }
  for (auto& t : b.tensors) out.tensors.push_back(t.to(out.dtype).set_requires_grad(true));
  return out;
}

}  // namespace

std::string activation_name(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

Tensor time_embedding(std::span<const int> t, std::size_t dim, Dtype dtype) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("time embedding dimension must be even");
  const std::size_t half = dim / 2;
  Buffer v(t.size() * dim);
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (std::size_t j = 0; j < half; ++j) {
      const double w = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(half));
      const double a = static_cast<double>(t[r]) * w;
      v[r * dim + j] = std::sin(a);
      v[r * dim + half + j] = std::cos(a);
    }
  }
  return Tensor({t.size(), dim}, std::move(v), dtype);
}

// Denoiser

DenoiserNet::DenoiserNet(const DenoiserSpec& spec, std::uint64_t seed) : spec_(spec) {
  if (spec.hidden_layers < 1) throw ConfigError("denoiser needs at least one hidden layer");
  time_weight_ = init_weight(spec.time_dim, spec.hidden, spec.dtype, seed, 0);
  auto sizes = layer_sizes(spec.image_dim, spec.hidden, spec.hidden_layers, spec.image_dim);
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    layers_.push_back(make_dense(sizes[i], sizes[i + 1], spec.dtype, seed,
                                 static_cast<std::uint32_t>(i + 1)));
  }
}

DenoiserNet DenoiserNet::zeros(const DenoiserSpec& spec) {
  DenoiserNet net;
  net.spec_ = spec;
  net.time_weight_ = Tensor::zeros({spec.time_dim, spec.hidden}, spec.dtype).set_requires_grad(true);
  auto sizes = layer_sizes(spec.image_dim, spec.hidden, spec.hidden_layers, spec.image_dim);
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    net.layers_.push_back(make_dense(sizes[i], sizes[i + 1], spec.dtype, std::nullopt, 0));
  }
  return net;
}

Tensor DenoiserNet::forward(const Tensor& xt, std::span<const int> t) const {
  check_input(xt, spec_.image_dim, "denoiser");
  if (t.size() != xt.shape()[0]) throw ShapeError("denoiser needs one timestep per row");
  for (int ti : t) {
    if (ti < 1 || ti > spec_.T) {
      throw ConfigError("denoiser timestep " + std::to_string(ti) + " outside [1, " +
                        std::to_string(spec_.T) + "]");
    }
  }
  Tensor emb = time_embedding(t, spec_.time_dim, spec_.dtype);
  Tensor h = tanh(add(affine(xt, layers_[0]), matmul(emb, time_weight_)));
  for (std::size_t i = 1; i + 1 < layers_.size(); ++i) h = tanh(affine(h, layers_[i]));
  return affine(h, layers_.back());
}

Tensor DenoiserNet::forward(const Tensor& xt, int t) const {
  check_input(xt, spec_.image_dim, "denoiser");
  std::vector<int> ts(xt.shape()[0], t);
  return forward(xt, ts);
}

std::vector<Tensor> DenoiserNet::parameters() const {
  std::vector<Tensor> p{time_weight_};
  auto rest = dense_params(layers_);
  p.insert(p.end(), rest.begin(), rest.end());
  return p;
}

DenoiserNet DenoiserNet::clone() const { return with_parameters(deep_copy(parameters())); }

DenoiserNet DenoiserNet::with_parameters(std::vector<Tensor> params) const {
  if (params.empty() || params[0].shape() != time_weight_.shape()) {
    throw ShapeError("denoiser parameter mismatch");
  }
  DenoiserNet net = *this;
  net.time_weight_ = params[0];
  assign_dense(net.layers_, std::span<Tensor>(params).subspan(1));
  return net;
}

// Classifier

ClassifierNet::ClassifierNet(const ClassifierSpec& spec, std::uint64_t seed) : spec_(spec) {
  auto sizes = layer_sizes(spec.image_dim, spec.hidden, spec.hidden_layers, spec.num_classes);
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    layers_.push_back(make_dense(sizes[i], sizes[i + 1], spec.dtype, seed,
                                 static_cast<std::uint32_t>(100 + i)));
  }
}

ClassifierNet ClassifierNet::zeros(const ClassifierSpec& spec) {
  ClassifierNet net;
  net.spec_ = spec;
  auto sizes = layer_sizes(spec.image_dim, spec.hidden, spec.hidden_layers, spec.num_classes);
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    net.layers_.push_back(make_dense(sizes[i], sizes[i + 1], spec.dtype, std::nullopt, 0));
  }
  return net;
}

Tensor ClassifierNet::forward(const Tensor& x) const {
  check_input(x, spec_.image_dim, "classifier");
  Tensor h = x;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) h = relu(affine(h, layers_[i]));
  return affine(h, layers_.back());
}

std::vector<Tensor> ClassifierNet::parameters() const { return dense_params(layers_); }

ClassifierNet ClassifierNet::clone() const { return with_parameters(deep_copy(parameters())); }

ClassifierNet ClassifierNet::with_parameters(std::vector<Tensor> params) const {
  ClassifierNet net = *this;
  assign_dense(net.layers_, params);
  return net;
}

Tensor denoiser_forward(const DenoiserNet& net, const Tensor& xt, int t) {
  return net.forward(xt, t);
}

Tensor classifier_forward(const ClassifierNet& net, const Tensor& x) { return net.forward(x); }

// Adam

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    if (!p.is_leaf()) throw ConfigError("Adam parameters must be leaves");
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(std::span<const Tensor> grads) {
  if (grads.size() != params_.size()) throw ShapeError("Adam gradient count mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto g = grads[i].data();
    if (g.size() != params_[i].numel()) throw ShapeError("Adam gradient shape mismatch");
    auto w = params_[i].mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const bool f32 = params_[i].dtype() == Dtype::F32;
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      const double update = cfg_.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg_.eps);
      w[k] -= update;
      if (f32) w[k] = static_cast<double>(static_cast<float>(w[k]));
      if (!std::isfinite(w[k])) throw NumericError("non-finite parameter after Adam step");
    }
  }
}

// Persistence

void save_weights(const DenoiserNet& net, const std::filesystem::path& path) {
  const auto& s = net.spec();
  nlohmann::json h = {
      {"kind", "denoiser"},
      {"layer_sizes", layer_sizes(s.image_dim, s.hidden, s.hidden_layers, s.image_dim)},
      {"activations", std::vector<std::string>(s.hidden_layers, activation_name(Activation::Tanh))},
      {"time_dim", s.time_dim},
      {"T", s.T}};
  save_bundle(path, h, net.parameters(), s.dtype);
}

void save_weights(const ClassifierNet& net, const std::filesystem::path& path) {
  const auto& s = net.spec();
  nlohmann::json h = {
      {"kind", "classifier"},
      {"layer_sizes", layer_sizes(s.image_dim, s.hidden, s.hidden_layers, s.num_classes)},
      {"activations", std::vector<std::string>(s.hidden_layers, activation_name(Activation::Relu))}};
  save_bundle(path, h, net.parameters(), s.dtype);
}

DenoiserNet load_denoiser(const std::filesystem::path& path, const LoadOptions& opts) {
  Loaded l = load_bundle(path, "denoiser", opts);
  DenoiserSpec s;
  try {
    auto sizes = l.header.at("layer_sizes").get<std::vector<std::size_t>>();
    if (sizes.size() < 3) throw FormatError("denoiser manifest has too few layers");
    s.image_dim = sizes.front();
    s.hidden = sizes[1];
    s.hidden_layers = sizes.size() - 2;
    s.time_dim = l.header.at("time_dim").get<std::size_t>();
    s.T = l.header.at("T").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad denoiser manifest: ") + e.what());
  }
  s.dtype = l.dtype;
  try {
    return DenoiserNet::zeros(s).with_parameters(std::move(l.tensors));
  } catch (const ShapeError& e) {
    throw FormatError(std::string("weight tensors do not match manifest: ") + e.what());
  }
}

ClassifierNet load_classifier(const std::filesystem::path& path, const LoadOptions& opts) {
  Loaded l = load_bundle(path, "classifier", opts);
  ClassifierSpec s;
  try {
    auto sizes = l.header.at("layer_sizes").get<std::vector<std::size_t>>();
    if (sizes.size() < 3) throw FormatError("classifier manifest has too few layers");
    s.image_dim = sizes.front();
    s.hidden = sizes[1];
    s.hidden_layers = sizes.size() - 2;
    s.num_classes = sizes.back();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad classifier manifest: ") + e.what());
  }
  s.dtype = l.dtype;
  try {
    return ClassifierNet::zeros(s).with_parameters(std::move(l.tensors));
  } catch (const ShapeError& e) {
    throw FormatError(std::string("weight tensors do not match manifest: ") + e.what());
  }
}

}  // namespace dbp
