// busu: dataset generation, training, evaluation, gradient checks and layer
// census for the BUSU-Net family.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>

#include "busu/busu.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

/// Reads BUSU_THREADS. Intra-op work runs on one thread, which satisfies any cap.
std::size_t thread_cap() {
  const char* env = std::getenv("BUSU_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end || v < 1) throw busu::ConfigError("BUSU_THREADS must be a positive integer, got '" + std::string(env) + "'");
  return std::size_t(v);
}

json run_manifest(const std::string& command) {
  json m;
  m["tool"] = "busu";
  m["tool_version"] = kToolVersion;
  m["command"] = command;
  m["threads"] = 1;
  return m;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw busu::FormatError("cannot write " + path.string());
  os << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  long long count = 20;
  std::size_t size = 128;
  double density = busu::SynthOptions{}.density;
  double noise = busu::SynthOptions{}.noise;
  std::uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
  if (a.count < 1) throw busu::ParameterError("count must be ≥ 1");
  busu::SynthOptions opt;
  opt.count = std::size_t(a.count);
  opt.size = a.size;
  opt.density = a.density;
  opt.noise = a.noise;
  opt.seed = a.seed;
  json extra = run_manifest("synth");
  busu::gen_synthetic(a.out, opt, extra);
  std::cout << "wrote " << opt.count << " synthetic images to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data, out;
  std::optional<std::string> preset, config;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  std::optional<std::size_t> epochs, batch_size, patience, patch, patches, train_count, val_count;
  std::optional<double> lr, train_fraction;
  std::string precision = "f32";
  bool quiet = false;
};

// Training settings: defaults, then the config file's [train] section, then
// explicit flags.
struct TrainSettings {
  busu::TrainConfig train;
  busu::PatchSpec patches;
  std::uint64_t seed = 0;
};

TrainSettings resolve_train(const TrainArgs& a, const busu::ConfigFile* file) {
  TrainSettings s;
  std::optional<std::size_t> total;
  std::optional<double> fraction;
  if (file) {
    for (const auto& [key, value] : file->train) {
      auto as_size = [&] { return std::size_t(busu::detail::to_int(key, value)); };
      auto as_double = [&] { return busu::detail::to_double(key, value); };
      if (key == "epochs") s.train.epochs = as_size();
      else if (key == "batch_size") s.train.batch_size = as_size();
      else if (key == "learning_rate") s.train.learning_rate = as_double();
      else if (key == "beta1") s.train.beta1 = as_double();
      else if (key == "beta2") s.train.beta2 = as_double();
      else if (key == "adam_eps") s.train.adam_eps = as_double();
      else if (key == "patience") s.train.patience = as_size();
      else if (key == "patch_size") s.patches.size = as_size();
      else if (key == "patches") total = as_size();
      else if (key == "train_fraction") fraction = as_double();
      else if (key == "train_count") s.patches.train = as_size();
      else if (key == "val_count") s.patches.val = as_size();
      else if (key == "seed") s.seed = std::uint64_t(busu::detail::to_int(key, value));
      else throw busu::ConfigError("unknown [train] key '" + key + "'");
    }
  }
  if (a.epochs) s.train.epochs = *a.epochs;
  if (a.batch_size) s.train.batch_size = *a.batch_size;
  if (a.patience) s.train.patience = *a.patience;
  if (a.lr) s.train.learning_rate = *a.lr;
  if (a.seed) s.seed = *a.seed;
  if (a.patch) s.patches.size = *a.patch;
  if (a.train_count) s.patches.train = *a.train_count;
  if (a.val_count) s.patches.val = *a.val_count;
  if (a.patches) total = *a.patches;
  if (a.train_fraction) fraction = *a.train_fraction;
  if (total || fraction) s.patches = busu::PatchSpec::from_fraction(s.patches.size, total.value_or(s.patches.total()), fraction.value_or(0.9));
  s.train.seed = s.seed;
  s.train.record_time = !a.deterministic;
  busu::validate(s.train);
  return s;
}

template <busu::Real T>
int run_train(const TrainArgs& a) {
  std::optional<busu::ConfigFile> file;
  if (a.config) file = busu::load_config_file(*a.config);
  const busu::ChainConfig arch = busu::resolve_architecture(a.preset, file ? &*file : nullptr);
  const TrainSettings s = resolve_train(a, file ? &*file : nullptr);
  if (s.patches.size % arch.divisor() != 0)
    throw busu::ConfigError("patch size " + std::to_string(s.patches.size) + " is not divisible by " +
                            std::to_string(arch.divisor()) + " required by preset '" + arch.name + "'");
  const auto images = busu::load_dataset(a.data);
  const auto set = busu::extract_patches<T>(images, s.patches, busu::split_seed(s.seed, 0x9A7C));
  busu::Network<T> net(arch, s.seed);

  fs::create_directories(a.out);
  busu::TrainConfig tc = s.train;
  const auto log = busu::train(net, set, tc, [&](const busu::EpochRecord& e) {
    if (a.quiet) return;
    std::fprintf(stderr, "epoch %zu train_loss %.5f val_loss %.5f val_f1 %.4f val_auc %.4f\n", e.epoch, e.train_loss,
                 e.val_loss, e.val_f1, e.val_auc);
  });
  json extra;
  extra["patch_size"] = s.patches.size;
  busu::save_checkpoint(net, fs::path(a.out) / "checkpoint", extra);
  {
    std::ofstream os(fs::path(a.out) / "train_log.csv");
    busu::write_train_log_csv(os, log);
  }
  json m = run_manifest("train");
  m["preset"] = arch.name;
  m["architecture"] = busu::format_config(arch);
  m["seed"] = s.seed;
  m["deterministic"] = a.deterministic;
  m["precision"] = busu::dtype_name(busu::dtype_of<T>());
  m["data"] = fs::absolute(a.data).lexically_normal().string();
  m["train"] = {{"epochs", tc.epochs},         {"batch_size", tc.batch_size}, {"learning_rate", tc.learning_rate},
                {"beta1", tc.beta1},           {"beta2", tc.beta2},           {"adam_eps", tc.adam_eps},
                {"patience", tc.patience},     {"patch_size", s.patches.size}, {"train_patches", s.patches.train},
                {"val_patches", s.patches.val}};
  m["result"] = {{"epochs_run", log.epochs.size()}, {"best_epoch", log.best_epoch}, {"best_loss", log.best_loss}};
  m["parameters"] = net.store().parameter_count();
  m["layers"] = busu::census(net);
  m["artifacts"] = {"checkpoint/manifest.json", "checkpoint/params.bten", "train_log.csv"};
  write_json(fs::path(a.out) / "manifest.json", m);
  std::cout << "trained " << arch.name << " for " << log.epochs.size() << " epochs (best " << log.best_epoch
            << ", loss " << busu::format_number(log.best_loss) << "); outputs in " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string data, checkpoint, out;
  double threshold = busu::kDefaultThreshold;
  std::string fov = "on";
  std::optional<std::size_t> patch, stride;
  bool save_maps = false;
  std::string precision = "f32";
};

template <busu::Real T>
int run_eval(const EvalArgs& a) {
  if (a.fov != "on" && a.fov != "off") throw busu::UsageError("--fov must be 'on' or 'off'");
  // Everything is loaded and scored before the output directory is touched.
  const json cm = busu::read_checkpoint_manifest(a.checkpoint);
  const auto images = busu::load_dataset(a.data);
  busu::EvalOptions opt;
  opt.threshold = a.threshold;
  opt.use_fov = a.fov == "on";
  std::vector<busu::Tensor<T>> maps;
  std::string method;
  if (cm.value("kind", "network") == "oracle") {
    method = "oracle";
    maps = busu::oracle_maps<T>(images);
  } else {
    auto net = busu::load_checkpoint<T>(a.checkpoint);
    method = net.config().name;
    opt.patch = a.patch.value_or(cm.value("extra", json::object()).value("patch_size", std::size_t{48}));
    opt.stride = a.stride.value_or(0);
    maps = busu::predict_maps(net, images, opt);
  }
  const auto report = busu::evaluate_maps(images, maps, opt);

  busu::write_eval_outputs(a.out, method, report);
  if (a.save_maps) {
    fs::create_directories(fs::path(a.out) / "maps");
    for (std::size_t i = 0; i < images.size(); ++i)
      busu::save_bten((fs::path(a.out) / "maps" / (images[i].id + ".bten")).string(), maps[i]);
  }
  json m = run_manifest("eval");
  m["checkpoint"] = fs::absolute(a.checkpoint).lexically_normal().string();
  m["data"] = fs::absolute(a.data).lexically_normal().string();
  m["method"] = method;
  m["threshold"] = a.threshold;
  m["fov"] = a.fov;
  m["patch_size"] = opt.patch;
  m["stride"] = opt.stride ? opt.stride : std::max<std::size_t>(1, opt.patch / 2);
  m["images"] = images.size();
  m["artifacts"] = {"report.txt", "report.csv", "roc.csv", "pr.csv"};
  if (a.save_maps) m["artifacts"].push_back("maps/");
  write_json(fs::path(a.out) / "manifest.json", m);
  std::cout << busu::format_report_header() << "\n" << busu::format_report(method, report) << "\n";
  if (!report.degenerate.empty()) {
    std::cerr << "note: degenerate metrics reported as 0:";
    for (const auto& d : report.degenerate) std::cerr << " " << d;
    std::cerr << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::string scope = "op";
  std::optional<double> tolerance;
  std::size_t seeds = 20;
  std::string preset = "lightbusu";
  std::size_t size = 8;
  std::size_t max_elements = 8;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  std::vector<busu::SuiteRow> rows;
  double tol = 0.0;
  if (a.scope == "op" || a.scope == "layer") {
    busu::SuiteOptions opt;
    opt.tolerance = tol = a.tolerance.value_or(1e-4);
    opt.seeds = a.seeds;
    rows = a.scope == "op" ? busu::run_op_suite(opt) : busu::run_layer_suite(opt);
  } else if (a.scope == "net") {
    tol = a.tolerance.value_or(1e-3);
    rows = busu::run_net_suite(busu::preset(a.preset), a.size, tol, a.max_elements);
  } else {
    throw busu::UsageError("--scope must be op, layer or net");
  }
  busu::print_suite(std::cout, rows, tol);
  return busu::all_passed(rows) ? 0 : 1;
}

// ---------------------------------------------------------------------------

struct CensusArgs {
  std::optional<std::string> preset, config;
  bool compare = false;
  bool quiet = false;
};

int cmd_census(const CensusArgs& a) {
  if (a.compare) {
    std::printf("%-12s %8s %8s %12s %10s\n", "preset", "layers", "formula", "parameters", "divisor");
    for (const auto& name : busu::preset_names()) {
      const auto cfg = busu::preset(name);
      std::size_t formula = 0;
      for (const auto& s : cfg.subnets) formula += busu::census_formula(s);
      std::printf("%-12s %8zu %8zu %12zu %10zu\n", name.c_str(), busu::census(cfg), formula,
                  busu::parameter_count(cfg), cfg.divisor());
    }
    return 0;
  }
  std::optional<busu::ConfigFile> file;
  if (a.config) file = busu::load_config_file(*a.config);
  const auto cfg = busu::resolve_architecture(a.preset, file ? &*file : nullptr);
  const auto layers = busu::layer_listing(cfg);
  if (!a.quiet) {
    std::printf("%-4s %-34s %-9s %6s %5s %10s\n", "#", "layer", "kind", "kernel", "level", "params");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      std::printf("%-4zu %-34s %-9s %6s %5d %10zu\n", i + 1, l.name.c_str(), l.kind.c_str(),
                  l.kernel ? (std::to_string(l.kernel) + "x" + std::to_string(l.kernel)).c_str() : "-", l.level,
                  l.params);
    }
  }
  std::printf("%s: %zu layers, %zu parameters\n", cfg.name.c_str(), layers.size(), busu::parameter_count(cfg));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BUSU-Net family: synthetic data, training, evaluation, gradient checks, census"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic fundus-like dataset");
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--count", sa.count, "number of images");
  synth->add_option("--size", sa.size, "image side in pixels");
  synth->add_option("--density", sa.density, "vessel strokes per 8 px of image side");
  synth->add_option("--noise", sa.noise, "background texture and noise amplitude");
  synth->add_option("--seed", sa.seed, "random seed");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a network on a dataset directory");
  train->add_option("--data", ta.data, "dataset directory")->required();
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_option("--preset", ta.preset, "architecture preset");
  train->add_option("--config", ta.config, "config file (flags override it)");
  train->add_option("--seed", ta.seed, "random seed");
  train->add_flag("--deterministic", ta.deterministic, "byte-stable outputs (no wall-clock times)");
  train->add_option("--epochs", ta.epochs);
  train->add_option("--batch-size", ta.batch_size);
  train->add_option("--lr", ta.lr, "learning rate");
  train->add_option("--patience", ta.patience, "early-stopping patience in epochs (0 disables)");
  train->add_option("--patch", ta.patch, "patch side");
  train->add_option("--patches", ta.patches, "total patches (split by --train-fraction)");
  train->add_option("--train-fraction", ta.train_fraction);
  train->add_option("--train-count", ta.train_count, "exact training patch count");
  train->add_option("--val-count", ta.val_count, "exact validation patch count");
  train->add_option("--precision", ta.precision)->check(CLI::IsMember({"f32", "f64"}));
  train->add_flag("--quiet", ta.quiet, "no per-epoch progress");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint with stitched full-image inference");
  eval->add_option("--data", ea.data, "dataset directory")->required();
  eval->add_option("--checkpoint", ea.checkpoint, "checkpoint directory")->required();
  eval->add_option("--out", ea.out, "output directory")->required();
  eval->add_option("--threshold", ea.threshold);
  eval->add_option("--fov", ea.fov, "on|off");
  eval->add_option("--patch", ea.patch);
  eval->add_option("--stride", ea.stride);
  eval->add_flag("--save-maps", ea.save_maps, "write probability maps as BTEN");
  eval->add_option("--precision", ea.precision)->check(CLI::IsMember({"f32", "f64"}));

  GradcheckArgs ga;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad->add_option("--scope", ga.scope, "op|layer|net");
  grad->add_option("--tolerance", ga.tolerance);
  grad->add_option("--seeds", ga.seeds, "random trials per case (op, layer)");
  grad->add_option("--preset", ga.preset, "network for --scope net");
  grad->add_option("--size", ga.size, "input side for --scope net");
  grad->add_option("--max-elements", ga.max_elements, "checked elements per tensor for --scope net");

  CensusArgs ca;
  auto* census = app.add_subcommand("census", "count layers of an architecture");
  census->add_option("--preset", ca.preset);
  census->add_option("--config", ca.config);
  census->add_flag("--compare", ca.compare, "summary of every preset");
  census->add_flag("--quiet", ca.quiet, "total only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    thread_cap();
    if (*synth) return cmd_synth(sa);
    if (*train) return ta.precision == "f64" ? run_train<double>(ta) : run_train<float>(ta);
    if (*eval) return ea.precision == "f64" ? run_eval<double>(ea) : run_eval<float>(ea);
    if (*grad) return cmd_gradcheck(ga);
    if (*census) return cmd_census(ca);
  } catch (const std::exception& e) {
    std::cerr << "busu: error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
