#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbp/addt.hpp"
#include "dbp/attacks.hpp"
#include "dbp/diffusion.hpp"
#include "dbp/nets.hpp"
#include "dbp/purify.hpp"
#include "dbp/tensor.hpp"

namespace dbp::lab {

struct ToyDataset {
  Tensor images;            // [N, H, W] in [0, 1]
  std::vector<int> labels;  // label i % num_classes
  std::uint64_t generator_seed = 0;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  // [N, H * W]
  Tensor flat() const;
};

struct DatasetParams {
  std::uint64_t seed = 1;
  std::size_t train_size = 2048;
  std::size_t test_size = 256;
  std::size_t image_size = 16;
  int num_classes = 4;
  double contrast = 0.6;
  double noise_std = 0.08;
};

// Oriented bars (horizontal, vertical, diagonal) and a checkerboard of
// random phase on a dim background, plus clipped Gaussian pixel noise.
ToyDataset synth_dataset(std::uint64_t seed, std::size_t n, std::size_t image_size,
                         int num_classes, double contrast = 0.6, double noise_std = 0.08);
ToyDataset train_split(const DatasetParams& p);
// Drawn from a seed derived from p.seed, disjoint from the training draws.
ToyDataset test_split(const DatasetParams& p);

void save_dataset(const std::filesystem::path& path, const ToyDataset& d);
ToyDataset load_dataset(const std::filesystem::path& path);

struct TrainParams {
  int epochs = 0;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  // Diffusion: fail when the final epoch loss stays above this (0 disables).
  double loss_threshold = 0.0;
  // Classifier: std of Gaussian input noise added during training.
  double noise_augment = 0.0;
};

struct ModelParams {
  int T = 100;
  std::size_t denoiser_hidden = 128;
  std::size_t denoiser_layers = 3;
  std::size_t time_dim = 16;
  std::size_t classifier_hidden = 64;
  std::size_t classifier_layers = 2;
  Dtype dtype = Dtype::F32;
};

struct PurifyParams {
  Sampler sampler = Sampler::DDPM;
  int t_star = 10;
  int nfe = 10;
};

struct EvalParams {
  std::vector<std::string> settings{"clean",  "pgd_noeot", "pgd_eot", "dw_fwd",
                                    "dw_rev", "dw_both",   "dw_semi"};
  int semi_k = 8;
  std::size_t samples = 128;
  std::uint64_t tape_seed = 11;
  std::size_t chunk = 16;
  std::string denoiser = "denoiser.dbpb";
};

struct AnalysisParams {
  std::vector<int> eot_sweep{1, 2, 5, 10, 20};
  // PGD length and step for the sweep's attacks; 0 keeps the attack's own.
  int sweep_steps = 0;
  double sweep_step_size = 0.0;
  std::size_t samples = 32;
  int landscape_resolution = 21;
  double landscape_extent = 2.0;
  std::size_t landscape_sample = 0;
  int variance_repeats = 4;
};

struct AddtParams {
  ADDTConfig addt;
  int epochs = 5;
  std::size_t batch_size = 64;
  double lr = 2e-4;
  std::uint64_t seed = 5;
  // Fine-tune on t in [1, t_max]; 0 means the whole chain.
  int t_max = 0;
  std::string init = "denoiser.dbpb";
  std::string output = "denoiser_addt.dbpb";
};

struct ExperimentConfig {
  DatasetParams dataset;
  ModelParams model;
  TrainParams diffusion{40, 64, 2e-3, 2, 0.0, 0.0};
  TrainParams classifier{20, 64, 1e-3, 3, 0.0, 0.0};
  PurifyParams purify;
  AttackConfig attack;
  EvalParams eval;
  AnalysisParams analysis;
  AddtParams addt;
  // 0 keeps the OpenMP default.
  int threads = 0;
  std::string denoiser_file = "denoiser.dbpb";
  std::string classifier_file = "classifier.dbpb";

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  Schedule schedule() const;
  PurifyConfig purify_config() const;
  DenoiserSpec denoiser_spec() const;
  ClassifierSpec classifier_spec() const;
};

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;  // classifier only
  double test_accuracy = 0.0;   // classifier only
};

struct TrainReport {
  std::vector<EpochLog> epochs;
};

// Training loops on in-memory models; the runners below wrap them with I/O.
TrainReport train_diffusion(DenoiserNet& net, const Tensor& images, const Schedule& s,
                            const TrainParams& p);
TrainReport train_classifier(ClassifierNet& net, const ToyDataset& train,
                             const ToyDataset& test, const TrainParams& p);
double classifier_accuracy(const ClassifierNet& net, const Tensor& x, std::span<const int> y);

struct AddtEpochLog {
  int epoch = 0;
  double cgpo_objective = 0.0;
  double loss = 0.0;
};

std::vector<AddtEpochLog> addt_finetune(DenoiserNet& net, const ClassifierNet& classifier,
                                        const Tensor& images, std::span<const int> labels,
                                        const Schedule& s, const AddtParams& p);

// Victim tapes for samples 0..n-1 of a dataset.
AttackBatch make_eval_batch(const ToyDataset& d, std::size_t n, std::uint64_t tape_seed,
                            std::size_t reverse_draws);

// Splits the batch into fixed chunks attacked in parallel; the result does
// not depend on the thread count.
AttackReport attack_chunked(const AttackBatch& batch, const AttackConfig& cfg,
                            const Pipeline& pipeline, std::size_t chunk);

struct MetricRow {
  std::string setting;
  Norm norm = Norm::Linf;
  double radius = 0.0;
  int steps = 0;
  int eot = 0;
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::uint64_t seed = 0;
};

std::string metrics_csv(const std::vector<MetricRow>& rows);

// Attack configuration for one named eval setting.
AttackConfig setting_attack(const ExperimentConfig& cfg, const std::string& setting);

std::vector<MetricRow> evaluate_settings(const ExperimentConfig& cfg, const DenoiserNet& denoiser,
                                         const ClassifierNet& classifier,
                                         const ToyDataset& test);

struct SweepRow {
  int n = 0;
  double robust_accuracy = 0.0;
  double cosine = 0.0;
};

std::vector<SweepRow> eot_sweep(const ExperimentConfig& cfg, const Pipeline& pipeline,
                                const AttackBatch& batch);

// Runners: read weights from and write artifacts into `out`.
void run_synth(const ExperimentConfig& cfg, const std::filesystem::path& out);
TrainReport run_train_diffusion(const ExperimentConfig& cfg, const std::filesystem::path& out);
TrainReport run_train_classifier(const ExperimentConfig& cfg, const std::filesystem::path& out);
std::vector<AddtEpochLog> run_addt_finetune(const ExperimentConfig& cfg,
                                            const std::filesystem::path& out);
std::vector<MetricRow> run_eval(const ExperimentConfig& cfg, const std::filesystem::path& out);
void run_analysis(const ExperimentConfig& cfg, const std::filesystem::path& out);

}  // namespace dbp::lab
