#include "sshield/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "sshield/metrics.hpp"
#include "sshield/model_io.hpp"
#include "sshield/oracles.hpp"
#include "sshield/quantize.hpp"
#include "sshield/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace sshield {
namespace {

int64_t now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(steady_clock::now().time_since_epoch()).count();
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string sanitize(std::string s) {
  for (char& c : s) {
    if (c == ',') c = ';';
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

void reject_unknown_keys(const json& o, const std::string& ctx,
                         std::initializer_list<const char*> allowed) {
  for (const auto& kv : o.items()) {
    bool known = false;
    for (const char* k : allowed)
      if (kv.key() == k) known = true;
    if (!known) throw std::runtime_error("unknown config key '" + kv.key() + "' in " + ctx);
  }
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path)) throw std::runtime_error(what + " does not exist: " + path);
}

DatasetSpec parse_dataset(const json& o) {
  reject_unknown_keys(o, "dataset",
                      {"name", "train_size", "test_size", "seed", "train_images", "train_labels",
                       "test_images", "test_labels", "train_files", "test_files"});
  DatasetSpec ds;
  ds.name = o.value("name", ds.name);
  ds.train_size = o.value("train_size", ds.train_size);
  ds.test_size = o.value("test_size", ds.test_size);
  ds.seed = o.value("seed", ds.seed);
  ds.train_images = o.value("train_images", "");
  ds.train_labels = o.value("train_labels", "");
  ds.test_images = o.value("test_images", "");
  ds.test_labels = o.value("test_labels", "");
  ds.train_files = o.value("train_files", std::vector<std::string>{});
  ds.test_files = o.value("test_files", std::vector<std::string>{});

  if (ds.name == "synthetic") {
    if (ds.train_size < 1 || ds.test_size < 1)
      throw std::runtime_error("synthetic dataset needs positive train_size and test_size");
  } else if (ds.name == "idx") {
    for (const auto& p : {ds.train_images, ds.train_labels, ds.test_images, ds.test_labels})
      if (p.empty())
        throw std::runtime_error("idx dataset needs train_images/train_labels/test_images/test_labels");
    for (const auto& p : {ds.train_images, ds.train_labels, ds.test_images, ds.test_labels})
      require_file(p, "dataset file");
  } else if (ds.name == "cifar10") {
    if (ds.train_files.empty() || ds.test_files.empty())
      throw std::runtime_error("cifar10 dataset needs train_files and test_files");
    for (const auto& p : ds.train_files) require_file(p, "dataset file");
    for (const auto& p : ds.test_files) require_file(p, "dataset file");
  } else {
    throw std::runtime_error("unknown dataset name '" + ds.name +
                             "' (expected synthetic, idx or cifar10)");
  }
  return ds;
}

AttackSpec parse_attack(const json& o) {
  reject_unknown_keys(o, "attacks", {"kind", "n_iter", "alpha", "epsilon1", "max_iter",
                                     "binary_search_steps", "confidence", "c_init", "step"});
  if (!o.contains("kind")) throw std::runtime_error("attack entry needs a 'kind'");
  AttackSpec a;
  a.kind = attack_kind_from_name(o.at("kind").get<std::string>());
  a.n_iter = o.value("n_iter", a.n_iter);
  a.alpha = o.value("alpha", a.alpha);
  a.epsilon1 = o.value("epsilon1", a.epsilon1);
  a.cw.max_iter = o.value("max_iter", a.cw.max_iter);
  a.cw.binary_search_steps = o.value("binary_search_steps", a.cw.binary_search_steps);
  a.cw.confidence = o.value("confidence", a.cw.confidence);
  a.cw.c_init = o.value("c_init", a.cw.c_init);
  a.cw.step = o.value("step", a.cw.step);
  return a;
}

DefenseSpec parse_defense(const json& o) {
  if (o.is_string()) return defense_preset(o.get<std::string>());
  reject_unknown_keys(o, "defenses", {"preset", "T", "no_bits", "window", "base_seed",
                                      "use_input_filter", "use_mc_dropout"});
  DefenseSpec d = o.contains("preset") ? defense_preset(o.at("preset").get<std::string>())
                                       : DefenseSpec{};
  d.T = o.value("T", d.T);
  d.no_bits = o.value("no_bits", d.no_bits);
  if (o.contains("window")) {
    auto w = o.at("window").get<std::vector<int>>();
    if (w.size() != 2) throw std::runtime_error("defense window must be [h, w]");
    d.median_h = w[0];
    d.median_w = w[1];
  }
  d.base_seed = o.value("base_seed", d.base_seed);
  d.use_input_filter = o.value("use_input_filter", d.use_input_filter);
  d.use_mc_dropout = o.value("use_mc_dropout", d.use_mc_dropout);
  return d;
}

TrainConfig parse_train(const json& o) {
  reject_unknown_keys(o, "train", {"epochs", "batch_size", "lr", "lr_decay", "decay_every",
                                   "momentum", "weight_decay", "seed"});
  TrainConfig t;
  t.epochs = o.value("epochs", t.epochs);
  t.batch_size = o.value("batch_size", t.batch_size);
  t.lr = o.value("lr", t.lr);
  t.lr_decay = o.value("lr_decay", t.lr_decay);
  t.decay_every = o.value("decay_every", t.decay_every);
  t.momentum = o.value("momentum", t.momentum);
  t.weight_decay = o.value("weight_decay", t.weight_decay);
  t.seed = o.value("seed", t.seed);
  return t;
}

int class_count(const std::vector<int>& y) {
  int k = 0;
  for (int v : y) k = std::max(k, v + 1);
  return std::max(k, 2);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);  // LF only, no translation
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path);
}

}  // namespace

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  json root;
  try {
    root = json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config parse error in " + path + ": " + e.what());
  }

  reject_unknown_keys(root, "config root",
                      {"seed", "output_dir", "dataset", "model", "train", "quantize", "calib_size",
                       "attacks", "epsilons", "defenses", "attack_samples"});
  ExperimentConfig cfg;
  cfg.seed = root.value("seed", cfg.seed);
  cfg.output_dir = root.value("output_dir", cfg.output_dir);
  if (root.contains("dataset")) cfg.dataset = parse_dataset(root.at("dataset"));

  if (root.contains("model")) {
    const json& o = root.at("model");
    reject_unknown_keys(o, "model", {"builder", "width", "weights_file"});
    cfg.model.builder = o.value("builder", cfg.model.builder);
    cfg.model.width = o.value("width", cfg.model.width);
    cfg.model.weights_file = o.value("weights_file", "");
    if (!cfg.model.weights_file.empty()) require_file(cfg.model.weights_file, "weights file");
  }

  if (root.contains("train")) {
    cfg.train = parse_train(root.at("train"));
    cfg.train_seed_given = root.at("train").contains("seed");
  }
  if (!cfg.train_seed_given) cfg.train.seed = derive_seed(cfg.seed, 1);

  cfg.quantize = root.value("quantize", cfg.quantize);
  cfg.calib_size = root.value("calib_size", cfg.calib_size);
  if (cfg.calib_size < 1) throw std::runtime_error("calib_size must be >= 1");

  if (root.contains("attacks")) {
    cfg.attacks.clear();
    for (const json& a : root.at("attacks")) cfg.attacks.push_back(parse_attack(a));
  }
  if (root.contains("epsilons")) cfg.epsilons = root.at("epsilons").get<std::vector<int>>();
  if (root.contains("defenses")) {
    cfg.defenses.clear();
    for (const json& d : root.at("defenses")) cfg.defenses.push_back(parse_defense(d));
  }
  cfg.attack_samples = root.value("attack_samples", cfg.attack_samples);

  if (cfg.attacks.empty()) throw std::runtime_error("attack grid is empty");
  if (cfg.epsilons.empty()) throw std::runtime_error("epsilon grid is empty");
  if (cfg.defenses.empty()) throw std::runtime_error("defense grid is empty");
  if (cfg.attack_samples < 1) throw std::runtime_error("attack_samples must be >= 1");
  for (int e : cfg.epsilons)
    if (e < 0 || e > 255) throw std::runtime_error("epsilon values must be within 0..255");
  return cfg;
}

Dataset load_train_split(const DatasetSpec& ds) {
  Dataset full;
  if (ds.name == "synthetic") return synthetic_digits(ds.train_size, ds.seed);
  if (ds.name == "idx")
    full = load_mnist_idx(ds.train_images, ds.train_labels);
  else
    full = load_cifar10_binary(ds.train_files);
  if (ds.train_size > 0 && ds.train_size < full.n()) return subset(full, 0, ds.train_size);
  return full;
}

Dataset load_test_split(const DatasetSpec& ds) {
  Dataset full;
  if (ds.name == "synthetic") return synthetic_digits(ds.test_size, derive_seed(ds.seed, 0x7e57));
  if (ds.name == "idx")
    full = load_mnist_idx(ds.test_images, ds.test_labels);
  else
    full = load_cifar10_binary(ds.test_files);
  if (ds.test_size > 0 && ds.test_size < full.n()) return subset(full, 0, ds.test_size);
  return full;
}

ModelGraph prepare_float_model(const ExperimentConfig& cfg, const Dataset& train_set,
                               const Dataset& test_set, TrainHistory* history) {
  if (!cfg.model.weights_file.empty()) {
    ModelGraph m = load_model(cfg.model.weights_file);
    if (m.quantized) throw std::runtime_error("weights file holds a quantized model; expected float");
    return m;
  }
  InputSpec in{train_set.x.dim(1), train_set.x.dim(2), train_set.x.dim(3)};
  ModelGraph m = build_model(cfg.model.builder, cfg.model.width, in, class_count(train_set.y));
  init_he(m, derive_seed(cfg.seed, 10));

  TrainConfig tc = cfg.train;
  tc.on_epoch = [&](const EpochStats& s) {
    std::fprintf(stderr, "[train] epoch %d/%d loss %.4f test_acc %.4f lr %.4g\n", s.epoch,
                 cfg.train.epochs, s.train_loss, s.test_accuracy, s.lr);
  };
  TrainHistory h = train(m, train_set, test_set, tc);
  if (history) *history = std::move(h);
  return m;
}

ModelGraph quantize_for_config(const ExperimentConfig& cfg, const ModelGraph& float_model,
                               const Dataset& train_set) {
  Dataset calib = subset(train_set, 0, std::min(cfg.calib_size, train_set.n()));
  return quantize_model(float_model, calibrate_activation_ranges(float_model, calib.x));
}

uint64_t attack_cell_seed(uint64_t global_seed, int attack_idx, int eps) {
  return derive_seed(global_seed, 1000 + uint64_t(attack_idx), uint64_t(eps));
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  return run_experiment(cfg, [&cfg](const AttackSpec& base, int attack_idx, int eps,
                                    const Tensor& clean_x, const std::vector<int>& labels,
                                    const ModelGraph& m) {
    AttackSpec spec = base;
    spec.epsilon = eps;
    return run_attack(m, clean_x, labels, spec, attack_cell_seed(cfg.seed, attack_idx, eps)).adv;
  });
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const AdvProvider& provider,
                                const ModelGraph* prebuilt) {
  fs::create_directories(cfg.output_dir);
  Dataset train_set = load_train_split(cfg.dataset);
  Dataset test_set = load_test_split(cfg.dataset);
  if (cfg.attack_samples > test_set.n())
    throw std::runtime_error("attack_samples (" + std::to_string(cfg.attack_samples) +
                             ") exceeds the test split (" + std::to_string(test_set.n()) + ")");

  ExperimentResult res;
  ModelGraph float_model, quant_model;
  const ModelGraph* eval_model = nullptr;
  if (prebuilt) {
    if (prebuilt->quantized && !cfg.quantize)
      throw std::runtime_error("config has quantize off but the supplied model is quantized");
    if (cfg.quantize && !prebuilt->quantized) {
      quant_model = quantize_for_config(cfg, *prebuilt, train_set);
      eval_model = &quant_model;
    } else {
      eval_model = prebuilt;
    }
  } else {
    float_model = prepare_float_model(cfg, train_set, test_set, &res.history);
    save_model(float_model, cfg.output_dir + "/model_float.sshm");
    std::ostringstream h;
    h << "epoch,train_loss,test_accuracy,lr\n";
    for (const EpochStats& s : res.history.epochs)
      h << s.epoch << ',' << fmt6(s.train_loss) << ',' << fmt6(s.test_accuracy) << ','
        << fmt6(s.lr) << '\n';
    write_text(cfg.output_dir + "/history.csv", h.str());

    if (cfg.quantize) {
      quant_model = quantize_for_config(cfg, float_model, train_set);
      save_model(quant_model, cfg.output_dir + "/model_int8.sshm");
      eval_model = &quant_model;
    } else {
      eval_model = &float_model;
    }
  }
  const ModelGraph& m = *eval_model;

  Dataset clean = subset(test_set, 0, cfg.attack_samples);
  const size_t n_def = cfg.defenses.size();

  std::ostringstream csv;
  csv << "dataset,model,quantized,attack,epsilon,defense,T,no_bits,window,n_samples,accuracy,ece,"
         "seed,wall_time_ms,error\n";
  std::vector<std::vector<std::pair<int, double>>> curves(cfg.attacks.size() * n_def);

  for (size_t ai = 0; ai < cfg.attacks.size(); ++ai) {
    const std::string attack_name = attack_kind_name(cfg.attacks[ai].kind);
    for (int eps : cfg.epsilons) {
      Tensor adv;
      std::string gen_error;
      if (eps == 0) {
        adv = clean.x;
      } else {
        int64_t t0 = now_ms();
        try {
          adv = provider(cfg.attacks[ai], int(ai), eps, clean.x, clean.y, m);
        } catch (const std::exception& e) {
          gen_error = e.what();
        }
        std::fprintf(stderr, "[attack] %s eps=%d %s (%lld ms)\n", attack_name.c_str(), eps,
                     gen_error.empty() ? "done" : gen_error.c_str(),
                     (long long)(now_ms() - t0));
      }

      for (size_t di = 0; di < n_def; ++di) {
        const DefenseSpec& d = cfg.defenses[di];
        const int row_T = d.use_mc_dropout ? d.T : 1;
        const int row_bits = d.use_input_filter ? d.no_bits : 0;
        const std::string row_window =
            d.use_input_filter ? std::to_string(d.median_h) + "x" + std::to_string(d.median_w)
                               : "-";
        std::string acc_s, ece_s, err = gen_error;
        int64_t cell_ms = 0;
        if (err.empty()) {
          int64_t t0 = now_ms();
          try {
            PredictiveDistribution pred = stochastic_shield_predict(m, adv, d);
            EvalReport rep = evaluate(pred.mean, clean.y, 10);
            acc_s = fmt6(rep.accuracy);
            ece_s = fmt6(rep.ece);
            curves[ai * n_def + di].emplace_back(eps, rep.accuracy);
          } catch (const std::exception& e) {
            err = e.what();
          }
          cell_ms = now_ms() - t0;
          std::fprintf(stderr, "[cell] %s eps=%d %s %s (%lld ms)\n", attack_name.c_str(), eps,
                       defense_name(d).c_str(),
                       err.empty() ? acc_s.c_str() : err.c_str(), (long long)cell_ms);
        }

        csv << cfg.dataset.name << ',' << m.arch << ',' << (cfg.quantize ? 1 : 0) << ','
            << attack_name << ',' << eps << ',' << defense_name(d) << ',' << row_T << ','
            << row_bits << ',' << row_window << ',' << cfg.attack_samples << ',' << acc_s << ','
            << ece_s << ',' << cfg.seed << ',' << cell_ms << ',' << sanitize(err) << '\n';
        ++res.n_rows;
      }
    }
  }

  res.csv = csv.str();
  res.csv_path = cfg.output_dir + "/results.csv";
  write_text(res.csv_path, res.csv);

  for (size_t ai = 0; ai < cfg.attacks.size(); ++ai)
    for (size_t di = 0; di < n_def; ++di) {
      std::ostringstream c;
      c << "epsilon,accuracy\n";
      for (auto [eps, acc] : curves[ai * n_def + di]) c << eps << ',' << fmt6(acc) << '\n';
      std::string path = cfg.output_dir + "/curve_" +
                         std::string(attack_kind_name(cfg.attacks[ai].kind)) + "_" +
                         defense_name(cfg.defenses[di]) + ".csv";
      write_text(path, c.str());
      res.curve_paths.push_back(path);
    }
  return res;
}

namespace {

Tensor uniform_tensor(std::vector<int> shape, uint64_t seed) {
  Tensor t(std::move(shape));
  RandomStream rs(seed);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rs.uniform();
  return t;
}

}  // namespace

// Five structural templates cycled across seeds; every layer kind that
// carries gradients appears somewhere.
ModelGraph selftest_model(int i) {
  ModelGraph m;
  m.n_classes = 3;
  switch (i % 5) {
    case 0:
      m.input = {6, 6, 1};
      m.layers.push_back(conv_layer(3, 3, 1, 2));
      m.layers.push_back(relu_layer());
      m.layers.push_back(maxpool_layer(2));
      m.layers.push_back(flatten_layer());
      m.layers.push_back(dense_layer(18, 3));
      break;
    case 1:
      m.input = {6, 6, 1};
      m.layers.push_back(conv_layer(3, 3, 1, 2));
      m.layers.push_back(batchnorm_layer(2));
      m.layers.push_back(relu_layer());
      m.layers.push_back(flatten_layer());
      m.layers.push_back(dense_layer(72, 3));
      break;
    case 2:
      m.input = {6, 6, 1};
      m.layers.push_back(conv_layer(3, 3, 1, 2));
      m.layers.push_back(relu_layer());
      m.layers.push_back(conv_layer(3, 3, 2, 2, 2));
      m.layers.push_back(flatten_layer());
      m.layers.push_back(dense_layer(18, 3));
      break;
    case 3:
      m.input = {6, 6, 2};
      m.layers.push_back(dwconv_layer(3, 3, 2));
      m.layers.push_back(relu_layer());
      m.layers.push_back(gap_layer());
      m.layers.push_back(dense_layer(2, 3));
      break;
    default:
      m.input = {4, 4, 2};
      m.layers.push_back(conv_layer(3, 3, 2, 2));
      m.layers.push_back(relu_layer());
      m.layers.push_back(conv_layer(3, 3, 2, 2));
      m.layers.push_back(add_layer(1));
      m.layers.push_back(flatten_layer());
      m.layers.push_back(dense_layer(32, 3));
      break;
  }
  m.layers.push_back(softmax_layer());
  m.arch = "selftest";
  validate_model(m);
  init_he(m, 5000 + uint64_t(i));
  return m;
}

int run_selftest() {
  int grad_pass = 0;
  const int grad_total = 20;
  for (int i = 0; i < grad_total; ++i) {
    ModelGraph m = selftest_model(i);
    Tensor x = uniform_tensor({2, m.input.h, m.input.w, m.input.c}, 9100 + uint64_t(i));
    std::vector<int> labels = {i % 3, (i + 1) % 3};
    auto r = oracle::gradient_check(m, x, labels, 1e-3f, 1e-2, 0.99);
    if (r.pass)
      ++grad_pass;
    else
      std::fprintf(stderr, "gradient-check model %d failed: max_rel %.4g frac_within %.4f\n", i,
                   r.max_rel_err, r.frac_within);
  }
  std::printf("gradient-check: %d/%d passed\n", grad_pass, grad_total);

  int median_pass = 0;
  const int median_total = 50;
  RandomStream rs(42);
  for (int i = 0; i < median_total; ++i) {
    int n = 1 + rs.uniform_int(2), h = 3 + rs.uniform_int(6), w = 3 + rs.uniform_int(6);
    int c = 1 + rs.uniform_int(3);
    int wh = 1 + rs.uniform_int(3), ww = 1 + rs.uniform_int(3);
    Tensor x = uniform_tensor({n, h, w, c}, 9200 + uint64_t(i));
    if (max_abs_diff(median_smooth(x, wh, ww), oracle::median_smooth_naive(x, wh, ww)) == 0.f)
      ++median_pass;
  }
  std::printf("median-oracle: %d/%d passed\n", median_pass, median_total);

  int ece_pass = 0;
  const int ece_total = 50;
  for (int i = 0; i < ece_total; ++i) {
    int n = 1 + rs.uniform_int(400);
    int bins = 1 + rs.uniform_int(15);
    std::vector<float> conf(static_cast<size_t>(n));
    std::vector<unsigned char> correct(static_cast<size_t>(n));
    for (int s = 0; s < n; ++s) {
      conf[size_t(s)] = rs.uniform();
      correct[size_t(s)] = rs.uniform() < 0.7f ? 1 : 0;
    }
    if (std::abs(ece(conf, correct, bins) - oracle::ece_naive(conf, correct, bins)) <= 1e-12)
      ++ece_pass;
  }
  std::printf("ece-oracle: %d/%d passed\n", ece_pass, ece_total);

  int failed_suites = (grad_pass != grad_total) + (median_pass != median_total) +
                      (ece_pass != ece_total);
  return failed_suites;
}

}  // namespace sshield
