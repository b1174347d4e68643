#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dbp/tensor.hpp"

namespace dbp {

enum class Activation { Tanh, Relu };

std::string activation_name(Activation a);

struct Dense {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

struct DenoiserSpec {
  std::size_t image_dim = 256;
  std::size_t hidden = 128;
  std::size_t hidden_layers = 3;
  std::size_t time_dim = 16;
  int T = 100;
  Dtype dtype = Dtype::F32;
};

struct ClassifierSpec {
  std::size_t image_dim = 256;
  std::size_t hidden = 64;
  std::size_t hidden_layers = 2;
  std::size_t num_classes = 4;
  Dtype dtype = Dtype::F32;
};

// Sinusoidal embedding of integer timesteps: [sin(t w_j) | cos(t w_j)],
// w_j = 10000^(-j / (dim/2)). Returns [rows, dim].
Tensor time_embedding(std::span<const int> t, std::size_t dim, Dtype dtype = Dtype::F64);

// eps_theta(x_t, t). The time embedding enters the first layer through its
// own weight block, which equals appending it to the flattened image.
class DenoiserNet {
 public:
  DenoiserNet() = default;
  DenoiserNet(const DenoiserSpec& spec, std::uint64_t seed);
  static DenoiserNet zeros(const DenoiserSpec& spec);

  // xt: [B, image_dim]; one timestep per row.
  Tensor forward(const Tensor& xt, std::span<const int> t) const;
  Tensor forward(const Tensor& xt, int t) const;

  const DenoiserSpec& spec() const { return spec_; }
  std::vector<Tensor> parameters() const;
  // Independent copy of every parameter.
  DenoiserNet clone() const;
  // New net holding `params` in parameters() order.
  DenoiserNet with_parameters(std::vector<Tensor> params) const;

 private:
  DenoiserSpec spec_;
  Tensor time_weight_;  // [time_dim, hidden]
  std::vector<Dense> layers_;
};

class ClassifierNet {
 public:
  ClassifierNet() = default;
  ClassifierNet(const ClassifierSpec& spec, std::uint64_t seed);
  static ClassifierNet zeros(const ClassifierSpec& spec);

  // x: [B, image_dim] -> logits [B, num_classes]
  Tensor forward(const Tensor& x) const;

  const ClassifierSpec& spec() const { return spec_; }
  std::vector<Tensor> parameters() const;
  ClassifierNet clone() const;
  ClassifierNet with_parameters(std::vector<Tensor> params) const;

 private:
  ClassifierSpec spec_;
  std::vector<Dense> layers_;
};

Tensor denoiser_forward(const DenoiserNet& net, const Tensor& xt, int t);
Tensor classifier_forward(const ClassifierNet& net, const Tensor& x);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed list of leaf tensors, updated in place.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg = {});
  void step(std::span<const Tensor> grads);
  long steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<Buffer> m_;
  std::vector<Buffer> v_;
  long t_ = 0;
};

struct LoadOptions {
  // Precision to load into; defaults to the stored one.
  std::optional<Dtype> dtype;
  // Required to load f64 weights as f32.
  bool allow_downcast = false;
};

void save_weights(const DenoiserNet& net, const std::filesystem::path& path);
void save_weights(const ClassifierNet& net, const std::filesystem::path& path);
DenoiserNet load_denoiser(const std::filesystem::path& path, const LoadOptions& opts = {});
ClassifierNet load_classifier(const std::filesystem::path& path, const LoadOptions& opts = {});

}  // namespace dbp
