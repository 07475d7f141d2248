#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "CLI11.hpp"
#include "sshield/experiment.hpp"
#include "sshield/model_io.hpp"
#include "sshield/parallel.hpp"
#include "sshield/rng.hpp"

using namespace sshield;

namespace {

struct CommonOpts {
  std::string config;
  uint64_t seed = 0;
  int threads = 1;
  std::string output_dir;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* output_opt = nullptr;
};

void add_common(CLI::App* sub, CommonOpts& c, bool need_config) {
  CLI::Option* cfg = sub->add_option("--config", c.config, "experiment config file (JSON)")
                         ->envname("SSHIELD_CONFIG");
  if (need_config) cfg->required();
  c.seed_opt = sub->add_option("--seed", c.seed, "override the config's global seed")
                   ->envname("SSHIELD_SEED");
  sub->add_option("--threads", c.threads, "inference thread count")
      ->envname("SSHIELD_THREADS")
      ->check(CLI::PositiveNumber);
  c.output_opt = sub->add_option("--output-dir", c.output_dir, "override the config's output dir")
                     ->envname("SSHIELD_OUTPUT_DIR");
}

ExperimentConfig resolve_config(const CommonOpts& c) {
  ExperimentConfig cfg = load_experiment_config(c.config);
  if (c.seed_opt->count() > 0) {
    cfg.seed = c.seed;
    if (!cfg.train_seed_given) cfg.train.seed = derive_seed(cfg.seed, 1);
  }
  if (c.output_opt->count() > 0) cfg.output_dir = c.output_dir;
  set_num_threads(c.threads);
  return cfg;
}

std::string default_model_path(const ExperimentConfig& cfg, bool want_float) {
  return cfg.output_dir + (want_float || !cfg.quantize ? "/model_float.sshm" : "/model_int8.sshm");
}

std::string adv_artifact_path(const ExperimentConfig& cfg, AttackKind kind, int eps) {
  return cfg.output_dir + "/adv_" + attack_kind_name(kind) + "_eps" + std::to_string(eps) +
         ".ssht";
}

int cmd_train(const CommonOpts& c) {
  ExperimentConfig cfg = resolve_config(c);
  std::filesystem::create_directories(cfg.output_dir);
  Dataset train_set = load_train_split(cfg.dataset);
  Dataset test_set = load_test_split(cfg.dataset);
  TrainHistory hist;
  ModelGraph m = prepare_float_model(cfg, train_set, test_set, &hist);
  std::string path = cfg.output_dir + "/model_float.sshm";
  save_model(m, path);

  std::string hpath = cfg.output_dir + "/history.csv";
  {
    std::ofstream f(hpath, std::ios::binary | std::ios::trunc);
    f << "epoch,train_loss,test_accuracy,lr\n";
    for (const EpochStats& s : hist.epochs) {
      char line[128];
      std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.6f\n", s.epoch, s.train_loss,
                    s.test_accuracy, s.lr);
      f << line;
    }
  }
  double final_acc = hist.epochs.empty() ? 0.0 : hist.epochs.back().test_accuracy;
  std::printf("model: %s\nhistory: %s\nfinal_test_accuracy: %.4f\n", path.c_str(), hpath.c_str(),
              final_acc);
  return 0;
}

int cmd_quantize(const CommonOpts& c, std::string model_path) {
  ExperimentConfig cfg = resolve_config(c);
  std::filesystem::create_directories(cfg.output_dir);
  if (model_path.empty()) model_path = default_model_path(cfg, true);
  ModelGraph m = load_model(model_path);
  if (m.quantized) throw std::runtime_error("model is already quantized: " + model_path);
  Dataset train_set = load_train_split(cfg.dataset);
  ModelGraph q = quantize_for_config(cfg, m, train_set);
  std::string path = cfg.output_dir + "/model_int8.sshm";
  save_model(q, path);
  std::printf("model: %s\n", path.c_str());
  return 0;
}

int cmd_attack(const CommonOpts& c, std::string model_path) {
  ExperimentConfig cfg = resolve_config(c);
  std::filesystem::create_directories(cfg.output_dir);
  if (model_path.empty()) model_path = default_model_path(cfg, false);
  ModelGraph m = load_model(model_path);
  if (m.quantized != cfg.quantize)
    throw std::runtime_error("model file and config disagree about quantization: " + model_path);
  Dataset test_set = load_test_split(cfg.dataset);
  if (cfg.attack_samples > test_set.n())
    throw std::runtime_error("attack_samples exceeds the test split");
  Dataset clean = subset(test_set, 0, cfg.attack_samples);

  for (size_t ai = 0; ai < cfg.attacks.size(); ++ai) {
    for (int eps : cfg.epsilons) {
      if (eps == 0) continue;
      AttackSpec spec = cfg.attacks[ai];
      spec.epsilon = eps;
      AttackResult r =
          run_attack(m, clean.x, clean.y, spec, attack_cell_seed(cfg.seed, int(ai), eps));
      std::string path = adv_artifact_path(cfg, spec.kind, eps);
      save_tensor(r.adv, path);
      int fooled = 0;
      for (unsigned char s : r.success) fooled += s;
      std::printf("artifact: %s (fooled %d/%d)\n", path.c_str(), fooled, clean.n());
    }
  }
  return 0;
}

int cmd_defend(const CommonOpts& c, std::string model_path) {
  ExperimentConfig cfg = resolve_config(c);
  if (model_path.empty()) model_path = default_model_path(cfg, false);
  ModelGraph m = load_model(model_path);

  AdvProvider from_artifacts = [&cfg](const AttackSpec& base, int, int eps, const Tensor& clean_x,
                                      const std::vector<int>&, const ModelGraph&) {
    std::string path = adv_artifact_path(cfg, base.kind, eps);
    Tensor adv = load_tensor(path);
    if (adv.rank() != clean_x.rank() || adv.dim(0) != clean_x.dim(0))
      throw std::runtime_error("artifact shape does not match the configured subset: " + path);
    return adv;
  };
  ExperimentResult res = run_experiment(cfg, from_artifacts, &m);
  std::printf("report: %s (%d rows)\n", res.csv_path.c_str(), res.n_rows);
  return 0;
}

int cmd_report(const CommonOpts& c) {
  ExperimentConfig cfg = resolve_config(c);
  ExperimentResult res = run_experiment(cfg);
  std::printf("report: %s (%d rows)\n", res.csv_path.c_str(), res.n_rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"quantized-CNN adversarial defense workbench"};
  app.require_subcommand(1);

  CommonOpts train_o, quant_o, attack_o, defend_o, report_o, self_o;
  std::string quant_model, attack_model, defend_model;

  CLI::App* s_train = app.add_subcommand("train", "train the float model from the config");
  add_common(s_train, train_o, true);

  CLI::App* s_quant = app.add_subcommand("quantize", "quantize a trained float model");
  add_common(s_quant, quant_o, true);
  s_quant->add_option("--model", quant_model, "float model file (default: <output>/model_float.sshm)");

  CLI::App* s_attack = app.add_subcommand("attack", "write adversarial-set artifacts for the grid");
  add_common(s_attack, attack_o, true);
  s_attack->add_option("--model", attack_model, "model file to attack");

  CLI::App* s_defend = app.add_subcommand("defend", "score the defense grid on stored artifacts");
  add_common(s_defend, defend_o, true);
  s_defend->add_option("--model", defend_model, "model file to defend");

  CLI::App* s_report = app.add_subcommand("report", "full pipeline: train, quantize, attack, defend");
  add_common(s_report, report_o, true);

  CLI::App* s_self = app.add_subcommand("selftest", "run the oracle suites and print pass counts");
  add_common(s_self, self_o, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (s_train->parsed()) return cmd_train(train_o);
    if (s_quant->parsed()) return cmd_quantize(quant_o, quant_model);
    if (s_attack->parsed()) return cmd_attack(attack_o, attack_model);
    if (s_defend->parsed()) return cmd_defend(defend_o, defend_model);
    if (s_report->parsed()) return cmd_report(report_o);
    if (s_self->parsed()) {
      set_num_threads(self_o.threads);
      return run_selftest() == 0 ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
