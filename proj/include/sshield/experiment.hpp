#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sshield/attacks.hpp"
#include "sshield/data.hpp"
#include "sshield/defense.hpp"
#include "sshield/train.hpp"

namespace sshield {

struct DatasetSpec {
  std::string name = "synthetic";  // synthetic | idx | cifar10
  int train_size = 2000, test_size = 500;
  uint64_t seed = 1;
  // idx pairs
  std::string train_images, train_labels, test_images, test_labels;
  // cifar10 record files
  std::vector<std::string> train_files, test_files;
};

struct ModelSpec {
  std::string builder = "cnn-svhn";
  float width = 1.f;
  std::string weights_file;  // nonempty: load instead of training
};

struct ExperimentConfig {
  uint64_t seed = 0;
  std::string output_dir = "out";
  DatasetSpec dataset;
  ModelSpec model;
  TrainConfig train;
  bool train_seed_given = false;  // config carried an explicit train.seed
  bool quantize = true;
  int calib_size = 512;
  std::vector<AttackSpec> attacks;
  std::vector<int> epsilons = {0, 2, 8, 16, 32};
  std::vector<DefenseSpec> defenses;
  int attack_samples = 200;
};

// Reads the JSON config, fills defaults, rejects unknown keys and missing
// referenced files.
ExperimentConfig load_experiment_config(const std::string& path);

Dataset load_train_split(const DatasetSpec& ds);
Dataset load_test_split(const DatasetSpec& ds);

// Trains per config (or loads weights_file) and returns the float model.
ModelGraph prepare_float_model(const ExperimentConfig& cfg, const Dataset& train_set,
                               const Dataset& test_set, TrainHistory* history = nullptr);

// Calibrates on the head of the train split and quantizes.
ModelGraph quantize_for_config(const ExperimentConfig& cfg, const ModelGraph& float_model,
                               const Dataset& train_set);

// Produces the adversarial pixels for one grid cell (never called for eps 0).
using AdvProvider = std::function<Tensor(const AttackSpec& base, int attack_idx, int eps,
                                         const Tensor& clean_x, const std::vector<int>& labels,
                                         const ModelGraph& m)>;

// Generation seed for the (attack, eps) cell group of a run.
uint64_t attack_cell_seed(uint64_t global_seed, int attack_idx, int eps);

struct ExperimentResult {
  std::string csv;  // full report including header
  int n_rows = 0;
  std::string csv_path;
  std::vector<std::string> curve_paths;
  TrainHistory history;
};

// The full grid: one adversarial set per (attack, eps), every defense scored
// on that same set, rows in deterministic grid order. Writes results.csv,
// per-curve files, model files, and history.csv under cfg.output_dir. A
// custom provider replays stored adversarial sets instead of attacking; a
// prebuilt model skips training/quantizing (and the model/history writes).
ExperimentResult run_experiment(const ExperimentConfig& cfg);
ExperimentResult run_experiment(const ExperimentConfig& cfg, const AdvProvider& provider,
                                const ModelGraph* prebuilt = nullptr);

// Small initialized model for oracle sweeps: five structural templates cycled
// by index, together covering every layer kind that carries gradients.
ModelGraph selftest_model(int i);

// Oracle sweep behind the selftest subcommand; prints one line per suite and
// returns the number of failed suites.
int run_selftest();

}  // namespace sshield
