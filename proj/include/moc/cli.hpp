#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moc/checkpoint.hpp"
#include "moc/dataset.hpp"
#include "moc/model.hpp"
#include "moc/selfcheck.hpp"

// Command-line front end: gen-data, train, eval, predict, selfcheck.
// Exit codes: 0 success, 2 usage, 3 numeric failure, 4 IO/format, 1 other.

namespace moc {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitIo = 4;

namespace cli_detail {

inline std::pair<int, int> parse_size(const std::string& s) {
  const auto x = s.find('x');
  int h = 0, w = 0;
  if (x == std::string::npos || !detail::parse_number(std::string_view(s).substr(0, x), h) ||
      !detail::parse_number(std::string_view(s).substr(x + 1), w)) {
    throw ArgumentError("--size expects HxW, got '" + s + "'");
  }
  if (h < 16 || w < 16 || h % 16 != 0 || w % 16 != 0) {
    throw ArgumentError("--size " + s + ": height and width must be positive multiples of 16");
  }
  return {h, w};
}

/// Worker count for evaluation: MOC_THREADS, 0 or unset meaning all cores.
inline unsigned eval_threads(std::size_t jobs) {
  unsigned n = 0;
  if (const char* env = std::getenv("MOC_THREADS")) {
    int v = 0;
    if (!detail::parse_number(std::string_view(env), v) || v < 0) {
      throw ArgumentError(std::string("MOC_THREADS must be a nonnegative integer, got '") + env + "'");
    }
    n = static_cast<unsigned>(v);
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Accepts a bare array `[w0, w1, ...]` or an object `{"weights": [...]}`.
inline std::vector<double> read_weights(const std::filesystem::path& path, int categories) {
  const auto j = read_json_file(path);
  std::vector<double> w;
  try {
    w = (j.is_object() ? j.at("weights") : j).get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": expected a list of weights: " + e.what());
  }
  if (w.size() != static_cast<std::size_t>(categories)) {
    throw CompatibilityError(path.string() + ": " + std::to_string(w.size()) + " weights for " +
                             std::to_string(categories) + " categories");
  }
  return w;
}

struct LoadedModel {
  ModelConfig config;
  std::unique_ptr<MambaMoc<float>> model;
};

inline LoadedModel load_model(const std::filesystem::path& ckpt) {
  const auto data = read_checkpoint_file(ckpt);
  LoadedModel m;
  m.config = checkpoint_config(data);
  m.model = std::make_unique<MambaMoc<float>>(m.config);
  apply_checkpoint(data, *m.model);
  return m;
}

inline std::uint8_t to_gray(double v, double lo, double hi) {
  if (!(hi > lo)) return 0;
  return static_cast<std::uint8_t>(std::lround(std::clamp((v - lo) / (hi - lo), 0.0, 1.0) * 255.0));
}

}  // namespace cli_detail

struct GenDataArgs {
  std::uint64_t seed = 0;
  int n = 8;
  std::string size = "64x64";
  int categories = 3;
  std::vector<double> lambda = {3.0};
  std::string split = "train";
  std::string out;
};

inline int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
  SynthOptions opt;
  opt.seed = a.seed;
  opt.n_images = a.n;
  std::tie(opt.height, opt.width) = cli_detail::parse_size(a.size);
  opt.categories = a.categories;
  opt.lambda = a.lambda;
  opt.split = a.split;
  const auto idx = synth_generate(opt, a.out);
  out << idx.manifest_path().string() << '\n';
  return kExitOk;
}

struct TrainArgs {
  std::string data;
  std::string config;
  int epochs = 200;
  int batch = 8;
  double lr = 5e-5;
  double wd = 1e-4;
  std::optional<std::uint64_t> seed;
  std::string ablation;
  std::string out;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  if (a.epochs < 0) throw ArgumentError("--epochs must be >= 0");
  if (a.batch < 1) throw ArgumentError("--batch must be >= 1");
  if (!(a.lr >= 0.0) || !(a.wd >= 0.0)) throw ArgumentError("--lr and --wd must be >= 0");
  const auto idx = DatasetIndex::load(a.data);

  nlohmann::json file_cfg = nlohmann::json::object();
  if (!a.config.empty()) file_cfg = cli_detail::read_json_file(a.config);
  ModelConfig defaults;
  defaults.num_categories = idx.num_categories;
  ModelConfig cfg = ModelConfig::from_json(file_cfg, defaults);
  if (cfg.num_categories != idx.num_categories) {
    throw CompatibilityError("config has " + std::to_string(cfg.num_categories) + " categories, dataset has " +
                             std::to_string(idx.num_categories));
  }
  if (a.seed) cfg.seed = *a.seed;
  if (!a.ablation.empty()) cfg.ablation = parse_ablation(a.ablation);
  cfg.validate();

  MambaMoc<float> model(cfg);
  AdamWOptions o;
  o.lr = static_cast<float>(a.lr);
  o.weight_decay = static_cast<float>(a.wd);
  AdamW<float> opt(model.named_parameters(), o);

  std::vector<TrainSample<float>> samples;
  for (const auto& s : load_samples(idx)) samples.push_back(make_train_sample(s, idx.num_categories));
  if (a.epochs > 0 && samples.empty()) throw ArgumentError("dataset has no entries to train on");

  Rng shuffle(cfg.seed ^ 0x9E3779B97F4A7C15ull);
  std::vector<std::size_t> order(samples.size());
  out << "epoch,loss\n";
  for (int e = 1; e <= a.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(a.batch)) {
      std::vector<TrainSample<float>> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(a.batch)); ++i) {
        batch.push_back(samples[order[i]]);
      }
      total += train_step<float>(model, opt, batch);
      ++batches;
    }
    out << e << ',' << std::setprecision(9) << total / static_cast<double>(batches) << '\n' << std::flush;
  }
  save_checkpoint(a.out, model, &opt);
  err << "wrote " << a.out << '\n';
  return kExitOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string weights;
  bool uniform = false;
  std::string convention = "squares";
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto convention = parse_wmse_convention(a.convention);
  auto loaded = cli_detail::load_model(a.ckpt);
  const auto idx = DatasetIndex::load(a.data);
  if (loaded.config.num_categories != idx.num_categories) {
    throw CompatibilityError("checkpoint predicts " + std::to_string(loaded.config.num_categories) +
                             " categories, dataset has " + std::to_string(idx.num_categories));
  }
  const int k = idx.num_categories;
  std::vector<double> weights;
  if (!a.weights.empty()) {
    weights = cli_detail::read_weights(a.weights, k);
  } else if (a.uniform || k == 1) {
    weights = uniform_weights(static_cast<std::size_t>(k));
  } else {
    throw ArgumentError("eval needs --weights FILE or --uniform when K > 1");
  }
  const auto samples = load_samples(idx);
  if (samples.empty()) throw ArgumentError("dataset has no entries to evaluate");

  CountMatrix preds(samples.size()), gts(samples.size());
  std::vector<std::string> failures(samples.size());
  const unsigned threads = cli_detail::eval_threads(samples.size());
  auto work = [&](unsigned tid) {
    NoGradGuard no_grad;
    for (std::size_t i = tid; i < samples.size(); i += threads) {
      try {
        preds[i] = (*loaded.model)(samples[i].image).counts;
        gts[i] = count_points(samples[i].points, k);
      } catch (const std::exception& e) {
        failures[i] = e.what();
      }
    }
  };
  if (threads <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < failures.size(); ++i) {
    if (!failures[i].empty()) throw NumericError(idx.entries[i].image + ": " + failures[i]);
  }
  out << evaluate_counts(preds, gts, weights, convention).to_csv();
  return kExitOk;
}

struct PredictArgs {
  std::string ckpt;
  std::string image;
  std::string out;
};

inline int cmd_predict(const PredictArgs& a, std::ostream& out) {
  auto loaded = cli_detail::load_model(a.ckpt);
  const auto raw = read_netpbm_file(a.image);
  if (raw.height % 16 != 0 || raw.width % 16 != 0) {
    throw ArgumentError(a.image + ": extents " + std::to_string(raw.height) + "x" + std::to_string(raw.width) +
                        " are not multiples of 16");
  }
  const auto image = image_to_tensor<float>(raw);
  NoGradGuard no_grad;
  const auto pred = (*loaded.model)(image);
  const Tensor& map = pred.map.value();
  const int h = map.dim(0), w = map.dim(1), k = map.dim(2);

  std::error_code ec;
  std::filesystem::create_directories(a.out, ec);
  if (ec || !std::filesystem::is_directory(a.out)) throw IoError("cannot create output directory " + a.out);
  const std::filesystem::path dir(a.out);

  nlohmann::json scales = {{"stride", 4}, {"height", h}, {"width", w}, {"maps", nlohmann::json::array()}};
  for (int c = 0; c < k; ++c) {
    double lo = map[static_cast<std::size_t>(c)], hi = lo;
    for (std::size_t i = static_cast<std::size_t>(c); i < map.size(); i += static_cast<std::size_t>(k)) {
      lo = std::min(lo, static_cast<double>(map[i]));
      hi = std::max(hi, static_cast<double>(map[i]));
    }
    RawImage pgm{w, h, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w)};
    for (std::size_t p = 0; p < pgm.pixels.size(); ++p) {
      pgm.pixels[p] = cli_detail::to_gray(map[p * static_cast<std::size_t>(k) + c], lo, hi);
    }
    const std::string name = "density_" + std::to_string(c) + ".pgm";
    write_netpbm_file(dir / name, pgm);
    // gray g maps back to min + g / 255 * (max - min)
    scales["maps"].push_back({{"category", c}, {"file", name}, {"min", lo}, {"max", hi}});
  }
  {
    std::ofstream js(dir / "scales.json");
    if (!js) throw IoError("cannot write " + (dir / "scales.json").string());
    js << scales.dump(2) << '\n';
  }
  std::ofstream csv(dir / "counts.csv");
  if (!csv) throw IoError("cannot write " + (dir / "counts.csv").string());
  csv << "category,count\n" << std::setprecision(9);
  for (int c = 0; c < k; ++c) csv << c << ',' << pred.counts[static_cast<std::size_t>(c)] << '\n';
  out << (dir / "counts.csv").string() << '\n';
  return kExitOk;
}

/// Maps library errors onto exit codes and prints a one-line diagnostic.
inline int exit_code_for(const std::exception& e, std::ostream& err) {
  err << "error: " << e.what() << '\n';
  if (dynamic_cast<const ArgumentError*>(&e) || dynamic_cast<const ConfigError*>(&e) ||
      dynamic_cast<const ModeError*>(&e)) {
    return kExitUsage;
  }
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const CompatibilityError*>(&e)) {
    return kExitIo;
  }
  return kExitInternal;
}

inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multicategory object counting with state-space models", "moc"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Render a synthetic dataset");
  gen_cmd->add_option("--seed", gen.seed, "RNG seed");
  gen_cmd->add_option("--n", gen.n, "Number of images")->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--size", gen.size, "Image size HxW (multiples of 16)");
  gen_cmd->add_option("--categories", gen.categories, "Number of categories")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--lambda", gen.lambda, "Poisson rate, one value or one per category")->delimiter(',');
  gen_cmd->add_option("--split", gen.split, "Manifest split")->check(CLI::IsMember({"train", "test"}));
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  train_cmd->add_option("--data", train.data, "Dataset directory or index.json")->required();
  train_cmd->add_option("--config", train.config, "Model config JSON");
  train_cmd->add_option("--epochs", train.epochs, "Training epochs");
  train_cmd->add_option("--batch", train.batch, "Batch size");
  train_cmd->add_option("--lr", train.lr, "AdamW learning rate");
  train_cmd->add_option("--wd", train.wd, "AdamW weight decay");
  train_cmd->add_option("--seed", train.seed, "Seed for init and shuffling (overrides config)");
  train_cmd->add_option("--ablation", train.ablation, "baseline|cim|full (overrides config)")
      ->check(CLI::IsMember({"baseline", "cim", "full"}));
  train_cmd->add_option("--out", train.out, "Checkpoint path")->required();

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Report per-category MAE/RMSE, mse_bar and wmse");
  eval_cmd->add_option("--ckpt", eval.ckpt, "Checkpoint")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset directory or index.json")->required();
  auto* weights_opt = eval_cmd->add_option("--weights", eval.weights, "JSON list of per-category weights");
  eval_cmd->add_flag("--uniform", eval.uniform, "Uniform wmse weights")->excludes(weights_opt);
  eval_cmd->add_option("--convention", eval.convention, "wmse convention: squares|values")
      ->check(CLI::IsMember({"squares", "values"}));

  PredictArgs predict;
  auto* predict_cmd = app.add_subcommand("predict", "Write density maps and counts for one image");
  predict_cmd->add_option("--ckpt", predict.ckpt, "Checkpoint")->required();
  predict_cmd->add_option("--image", predict.image, "Input P6 image")->required();
  predict_cmd->add_option("--out", predict.out, "Output directory")->required();

  std::string scratch = std::filesystem::temp_directory_path().string();
  auto* check_cmd = app.add_subcommand("selfcheck", "Run the quick property checks");
  check_cmd->add_option("--scratch", scratch, "Directory for temporary files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, out);
    if (*train_cmd) return cmd_train(train, out, err);
    if (*eval_cmd) return cmd_eval(eval, out);
    if (*predict_cmd) return cmd_predict(predict, out);
    if (*check_cmd) return selfcheck::run_all(out, scratch) ? kExitOk : kExitInternal;
  } catch (const std::exception& e) {
    return exit_code_for(e, err);
  }
  return kExitUsage;
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv;
  argv.push_back("moc");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace moc
