#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>

#include "dbp/error.hpp"
#include "dbp/lab.hpp"

namespace {

int run(const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const dbp::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const dbp::FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 2;
  } catch (const dbp::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const dbp::TrainingError& e) {
    std::fprintf(stderr, "training error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion purification lab: toy data, training, attacks and analysis"};
  app.require_subcommand(1);
  std::string config_path;
  std::string out_dir = "out";

  struct Command {
    const char* name;
    const char* help;
    std::function<void(const dbp::lab::ExperimentConfig&, const std::filesystem::path&)> fn;
  };
  const Command commands[] = {
      {"synth", "generate the toy dataset",
       [](const auto& c, const auto& o) { dbp::lab::run_synth(c, o); }},
      {"train-diffusion", "train the denoiser",
       [](const auto& c, const auto& o) {
         auto r = dbp::lab::run_train_diffusion(c, o);
         if (!r.epochs.empty()) std::printf("final diffusion loss %.6g\n", r.epochs.back().loss);
       }},
      {"train-classifier", "train the classifier",
       [](const auto& c, const auto& o) {
         auto r = dbp::lab::run_train_classifier(c, o);
         if (!r.epochs.empty()) {
           std::printf("test accuracy %.4f\n", r.epochs.back().test_accuracy);
         }
       }},
      {"addt", "fine-tune the denoiser with adversarial noise",
       [](const auto& c, const auto& o) {
         auto r = dbp::lab::run_addt_finetune(c, o);
         if (!r.empty()) std::printf("final ADDT loss %.6g\n", r.back().loss);
       }},
      {"eval", "attack the purifier and write metrics.csv",
       [](const auto& c, const auto& o) {
         for (const auto& row : dbp::lab::run_eval(c, o)) {
           std::printf("%-12s acc %.4f  loss %.4f\n", row.setting.c_str(), row.accuracy,
                       row.mean_loss);
         }
       }},
      {"analyze", "EoT sweep, gradient variance and loss landscape",
       [](const auto& c, const auto& o) { dbp::lab::run_analysis(c, o); }},
  };

  std::string chosen;
  for (const auto& cmd : commands) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", config_path, "experiment config (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->callback([&chosen, name = cmd.name] { chosen = name; });
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  for (const auto& cmd : commands) {
    if (chosen == cmd.name) {
      return run([&] {
        const auto cfg = dbp::lab::ExperimentConfig::load(config_path);
        std::filesystem::create_directories(out_dir);
        cmd.fn(cfg, out_dir);
      });
    }
  }
  return 2;
}
