#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <json.hpp>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "busu/architectures.hpp"
#include "busu/data.hpp"
#include "busu/metrics.hpp"

namespace busu {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t patience = 10;  // 0 disables early stopping
  std::uint64_t seed = 0;
  std::string checkpoint_path;  // written after training when non-empty
  bool record_time = true;      // false writes 0 seconds so logs are byte-stable
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (c.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) throw ConfigError("learning rate must be >= 0");
  if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0))
    throw ConfigError("Adam betas must be in [0, 1)");
  if (!(c.adam_eps > 0.0)) throw ConfigError("Adam epsilon must be > 0");
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0, val_loss = 0, val_f1 = 0, val_auc = 0, seconds = 0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  std::size_t best_epoch = 0;
  double best_loss = std::numeric_limits<double>::infinity();
  bool stopped_early = false;

  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

inline void write_train_log_csv(std::ostream& os, const TrainLog& log) {
  os << "epoch,train_loss,val_loss,val_f1,val_auc,seconds\n";
  char buf[192];
  for (const auto& e : log.epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.3f\n", e.epoch, e.train_loss, e.val_loss, e.val_f1,
                  e.val_auc, e.seconds);
    os << buf;
  }
}

/// Adam with bias correction.
template <Real T>
class Adam {
 public:
  Adam(const ParamStore<T>& store, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : store.params()) {
      params_.push_back(p.var);
      m_.emplace_back(p.var.shape());
      v_.emplace_back(p.var.shape());
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_)), c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k].mutable_value();
      const auto& g = params_[k].grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = T(b1_ * m[i] + (1.0 - b1_) * g[i]);
        v[i] = T(b2_ * v[i] + (1.0 - b2_) * double(g[i]) * g[i]);
        const double mh = m[i] / c1, vh = v[i] / c2;
        p[i] -= T(lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<Var<T>> params_;
  std::vector<Tensor<T>> m_, v_;
};

// ---------------------------------------------------------------------------
// Parameter snapshots.

template <Real T>
struct Snapshot {
  std::vector<Tensor<T>> params;
  std::vector<RunningStats<T>> stats;
};

template <Real T>
Snapshot<T> take_snapshot(const ParamStore<T>& store) {
  Snapshot<T> s;
  for (const auto& p : store.params()) s.params.push_back(p.var.value());
  for (const auto& st : store.stats()) s.stats.push_back(*st.stats);
  return s;
}

template <Real T>
void restore_snapshot(ParamStore<T>& store, const Snapshot<T>& s) {
  for (std::size_t k = 0; k < s.params.size(); ++k) {
    auto v = store.params()[k].var;
    v.mutable_value() = s.params[k];
  }
  for (std::size_t k = 0; k < s.stats.size(); ++k) *store.stats()[k].stats = s.stats[k];
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/manifest.json and <dir>/params.bten. The payload holds one
// BTEN record per parameter in manifest order, then running mean and running
// variance for every batch norm.

inline constexpr const char* kCheckpointFormat = "busu-checkpoint";

template <Real T>
void save_checkpoint(const Network<T>& net, const std::filesystem::path& dir,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format"] = kCheckpointFormat;
  m["version"] = 1;
  m["kind"] = "network";
  m["dtype"] = dtype_name(dtype_of<T>());
  m["seed"] = net.seed();
  m["architecture"] = format_config(net.config());
  m["payload"] = "params.bten";
  m["extra"] = extra;
  auto& ps = m["params"] = nlohmann::json::array();
  for (const auto& p : net.store().params()) ps.push_back({{"name", p.name}, {"shape", p.var.shape()}});
  auto& ss = m["stats"] = nlohmann::json::array();
  for (const auto& s : net.store().stats()) ss.push_back({{"name", s.name}, {"channels", s.stats->mean.size()}});
  std::ofstream payload(dir / "params.bten", std::ios::binary);
  if (!payload) throw FormatError("cannot write checkpoint payload in " + dir.string());
  for (const auto& p : net.store().params()) write_bten(payload, p.var.value());
  for (const auto& s : net.store().stats()) {
    write_bten(payload, s.stats->mean);
    write_bten(payload, s.stats->var);
  }
  std::ofstream(dir / "manifest.json") << m.dump(2) << "\n";
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("checkpoint " + dir.string() + ": missing manifest.json");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(is);
  } catch (const std::exception& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }
  if (m.value("format", "") != kCheckpointFormat) throw FormatError("checkpoint manifest: not a busu checkpoint");
  return m;
}

inline ChainConfig architecture_from_text(const std::string& text) {
  std::istringstream is(text);
  return apply_config(ChainConfig{}, parse_config(is));
}

/// Rebuilds the network described by the manifest and reads every tensor.
/// Nothing is returned unless every record matches its manifest entry.
template <Real T>
Network<T> load_checkpoint(const std::filesystem::path& dir) {
  const auto m = read_checkpoint_manifest(dir);
  if (m.value("kind", "network") != "network") throw FormatError("checkpoint " + dir.string() + " is not a network");
  const std::string dtype = m.at("dtype").get<std::string>();
  if (dtype != dtype_name(dtype_of<T>()))
    throw FormatError("checkpoint precision mismatch: stored " + dtype + " but requested " + dtype_name(dtype_of<T>()));
  Network<T> net(architecture_from_text(m.at("architecture").get<std::string>()), m.at("seed").get<std::uint64_t>());
  const auto& params = m.at("params");
  const auto& store_params = net.store().params();
  if (params.size() != store_params.size()) throw FormatError("checkpoint manifest: parameter count mismatch");
  std::ifstream is(dir / m.value("payload", "params.bten"), std::ios::binary);
  if (!is) throw FormatError("checkpoint " + dir.string() + ": missing payload");

  auto read_into = [&](const std::string& name, Tensor<T>& dst) {
    const auto h = read_bten_header(is, name);
    if (h.shape != dst.shape())
      throw FormatError(name + ": shape " + to_string(h.shape) + " does not match " + to_string(dst.shape()));
    dst = read_bten_payload<T>(is, h, name);
  };
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::string name = params[k].at("name").get<std::string>();
    if (name != store_params[k].name) throw FormatError(name + ": unexpected parameter (expected " + store_params[k].name + ")");
    if (params[k].at("shape").get<Shape>() != store_params[k].var.shape())
      throw FormatError(name + ": manifest shape does not match the architecture");
    auto v = store_params[k].var;
    read_into(name, v.mutable_value());
  }
  for (const auto& s : net.store().stats()) {
    read_into(s.name + ".running_mean", s.stats->mean);
    read_into(s.name + ".running_var", s.stats->var);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint payload has trailing bytes");
  return net;
}

/// A checkpoint whose predictor returns each image's ground-truth mask. Used
/// to audit the evaluation pipeline.
inline void save_oracle_checkpoint(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["format"] = kCheckpointFormat;
  m["version"] = 1;
  m["kind"] = "oracle";
  std::ofstream(dir / "manifest.json") << m.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Training.

namespace detail {

template <Real T>
struct ValidationResult {
  double loss = 0, f1 = 0, auc = 0;
};

template <Real T>
ValidationResult<T> validate_patches(Network<T>& net, const PatchSet<T>& set, std::size_t batch) {
  ValidationResult<T> r;
  std::vector<T> scores, truth;
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < set.val.size(); b += batch) {
    const std::size_t e = std::min(set.val.size(), b + batch);
    auto [x, y] = set.batch(std::span(set.val).subspan(b, e - b));
    const auto p = net.forward(Var<T>::constant(x), Mode::infer);
    const auto l = bce_loss(p, Var<T>::constant(y));
    loss_sum += double(l.value()[0]) * double(y.size());
    scores.insert(scores.end(), p.value().data().begin(), p.value().data().end());
    truth.insert(truth.end(), y.data().begin(), y.data().end());
  }
  r.loss = loss_sum / double(truth.size());
  const auto rep = evaluate_scores<T, T>(scores, truth);
  r.f1 = rep.f1;
  r.auc = rep.auc;
  return r;
}

}  // namespace detail

/// Mini-batch Adam on BCE. Early stopping monitors validation loss (training
/// loss when the validation split is empty); the best epoch's parameters are
/// restored before returning.
template <Real T>
TrainLog train(Network<T>& net, const PatchSet<T>& patches, const TrainConfig& cfg,
               const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  validate(cfg);
  if (patches.patch_size % net.divisor() != 0)
    throw ConfigError("patch size " + std::to_string(patches.patch_size) + " is not divisible by " +
                      std::to_string(net.divisor()) + " required by the network depth");
  if (net.in_channels() != 1) throw ConfigError("network must take 1 input channel for patch training");
  if (patches.train.empty()) throw ConfigError("patch set has no training patches");

  Adam<T> adam(net.store(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
  Rng rng(cfg.seed);
  net.reseed_dropout(split_seed(cfg.seed, 0xD0));
  std::vector<std::size_t> order = patches.train;
  TrainLog log;
  Snapshot<T> best = take_snapshot(net.store());
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      auto [x, y] = patches.batch(std::span(order).subspan(b, e - b));
      net.store().zero_grad();
      auto loss = bce_loss(net.forward(Var<T>::constant(std::move(x)), Mode::train), Var<T>::constant(std::move(y)));
      backward(loss);
      adam.step();
      const double l = loss.value()[0];
      log.step_losses.push_back(l);
      loss_sum += l;
      ++steps;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(steps);
    double monitored = rec.train_loss;
    if (!patches.val.empty()) {
      const auto v = detail::validate_patches(net, patches, cfg.batch_size);
      rec.val_loss = v.loss;
      rec.val_f1 = v.f1;
      rec.val_auc = v.auc;
      monitored = v.loss;
    }
    if (cfg.record_time)
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (monitored < log.best_loss) {
      log.best_loss = monitored;
      log.best_epoch = epoch;
      best = take_snapshot(net.store());
      since_best = 0;
    } else if (cfg.patience && ++since_best >= cfg.patience) {
      log.stopped_early = true;
      break;
    }
  }
  restore_snapshot(net.store(), best);
  if (!cfg.checkpoint_path.empty()) save_checkpoint(net, cfg.checkpoint_path);
  return log;
}

// ---------------------------------------------------------------------------
// Stitched inference.

/// Window start positions covering [0, extent) with the given stride; the
/// last window is flush with the far edge.
inline std::vector<std::size_t> window_starts(std::size_t extent, std::size_t patch, std::size_t stride) {
  std::vector<std::size_t> s;
  for (std::size_t p = 0; p + patch <= extent; p += stride) s.push_back(p);
  if (s.back() + patch < extent) s.push_back(extent - patch);
  return s;
}

template <Real T>
struct StitchResult {
  Tensor<T> probability;                // H x W
  std::vector<std::uint32_t> coverage;  // windows covering each pixel
};

/// Runs `predict` on every window (batched, in `order` if given) and averages
/// overlapping predictions per pixel. Accumulation always follows window
/// index order, so the result does not depend on the visiting order.
template <Real T>
StitchResult<T> stitch(const Tensor<T>& image, std::size_t patch, std::size_t stride,
                       const std::function<Tensor<T>(const Tensor<T>&)>& predict, std::size_t batch = 32,
                       const std::vector<std::size_t>* order = nullptr) {
  if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 1) throw ShapeError("stitch: expected a 1x1xHxW image");
  const std::size_t H = image.dim(2), W = image.dim(3);
  if (patch < 1 || patch > H || patch > W)
    throw ParameterError("stitch: image " + std::to_string(H) + "x" + std::to_string(W) + " is smaller than patch " +
                         std::to_string(patch));
  if (stride < 1 || stride > patch) throw ParameterError("stitch: stride must be in [1, patch size]");
  const auto ys = window_starts(H, patch, stride), xs = window_starts(W, patch, stride);
  const std::size_t nwin = ys.size() * xs.size(), px = patch * patch;
  std::vector<std::size_t> visit(nwin);
  std::iota(visit.begin(), visit.end(), std::size_t{0});
  if (order) {
    if (order->size() != nwin) throw ParameterError("stitch: visiting order has the wrong length");
    visit = *order;
  }
  std::vector<Tensor<T>> preds(nwin);
  for (std::size_t b = 0; b < nwin; b += batch) {
    const std::size_t e = std::min(nwin, b + batch);
    Tensor<T> x({e - b, 1, patch, patch});
    for (std::size_t k = b; k < e; ++k) {
      const std::size_t y0 = ys[visit[k] / xs.size()], x0 = xs[visit[k] % xs.size()];
      for (std::size_t r = 0; r < patch; ++r)
        std::copy_n(image.raw() + (y0 + r) * W + x0, patch, x.raw() + (k - b) * px + r * patch);
    }
    const Tensor<T> p = predict(x);
    if (p.shape() != x.shape()) throw ShapeError("stitch: predictor returned shape " + to_string(p.shape()));
    for (std::size_t k = b; k < e; ++k)
      preds[visit[k]] = Tensor<T>({patch, patch}, std::vector<T>(p.raw() + (k - b) * px, p.raw() + (k - b + 1) * px));
  }
  std::vector<double> acc(H * W, 0.0);
  StitchResult<T> out;
  out.coverage.assign(H * W, 0);
  for (std::size_t w = 0; w < nwin; ++w) {
    const std::size_t y0 = ys[w / xs.size()], x0 = xs[w % xs.size()];
    for (std::size_t r = 0; r < patch; ++r)
      for (std::size_t c = 0; c < patch; ++c) {
        const std::size_t k = (y0 + r) * W + x0 + c;
        acc[k] += double(preds[w][r * patch + c]);
        ++out.coverage[k];
      }
  }
  out.probability = Tensor<T>({H, W});
  for (std::size_t k = 0; k < H * W; ++k) out.probability[k] = T(std::clamp(acc[k] / out.coverage[k], 0.0, 1.0));
  return out;
}

template <Real T>
StitchResult<T> stitch_predict(Network<T>& net, const Tensor<T>& image, std::size_t patch, std::size_t stride = 0,
                               std::size_t batch = 32) {
  if (net.in_channels() != 1 || net.out_channels() != 1) throw ConfigError("stitched inference needs a 1-in 1-out network");
  if (patch % net.divisor() != 0)
    throw ConfigError("patch size " + std::to_string(patch) + " is not divisible by " + std::to_string(net.divisor()));
  if (stride == 0) stride = std::max<std::size_t>(1, patch / 2);
  return stitch<T>(image, patch, stride, [&](const Tensor<T>& x) { return net.predict(x); }, batch);
}

template <Real T>
StitchResult<T> stitch_predict(Network<T>& net, const FundusImage& image, std::size_t patch, std::size_t stride = 0,
                               const PreprocessOptions& prep = {}) {
  return stitch_predict(net, preprocess<T>(image, prep), patch, stride);
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalOptions {
  std::size_t patch = 48;
  std::size_t stride = 0;  // 0 means patch / 2
  double threshold = kDefaultThreshold;
  bool use_fov = true;
  std::size_t batch = 32;
  PreprocessOptions prep;
};

/// Scores full-image probability maps against the masks, pooling every
/// image's pixels (inside the FOV when enabled).
template <Real T>
MetricsReport evaluate_maps(const std::vector<FundusImage>& images, const std::vector<Tensor<T>>& maps,
                            const EvalOptions& opt = {}) {
  if (images.empty()) throw UsageError("evaluate: empty image list");
  if (maps.size() != images.size()) throw ShapeError("evaluate: one probability map per image required");
  std::vector<T> scores;
  std::vector<std::uint8_t> truth;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    if (maps[i].size() != im.mask.size()) throw ShapeError("evaluate: map size differs from image '" + im.id + "'");
    for (std::size_t k = 0; k < im.mask.size(); ++k) {
      if (opt.use_fov && !im.fov[k]) continue;
      scores.push_back(maps[i][k]);
      truth.push_back(im.mask[k]);
    }
  }
  if (scores.empty()) throw UsageError("evaluate: no pixels inside the field of view");
  return evaluate_scores<T, std::uint8_t>(scores, truth, opt.threshold);
}

template <Real T>
std::vector<Tensor<T>> predict_maps(Network<T>& net, const std::vector<FundusImage>& images, const EvalOptions& opt = {}) {
  std::vector<Tensor<T>> maps;
  for (const auto& im : images)
    maps.push_back(stitch_predict(net, preprocess<T>(im, opt.prep), opt.patch, opt.stride, opt.batch).probability);
  return maps;
}

template <Real T>
std::vector<Tensor<T>> oracle_maps(const std::vector<FundusImage>& images) {
  std::vector<Tensor<T>> maps;
  for (const auto& im : images) {
    Tensor<T> m({im.height(), im.width()});
    for (std::size_t k = 0; k < im.mask.size(); ++k) m[k] = T(im.mask[k]);
    maps.push_back(std::move(m));
  }
  return maps;
}

template <Real T>
MetricsReport evaluate(Network<T>& net, const std::vector<FundusImage>& images, const EvalOptions& opt = {}) {
  if (images.empty()) throw UsageError("evaluate: empty image list");
  return evaluate_maps(images, predict_maps(net, images, opt), opt);
}

/// Writes report.txt (header + row), report.csv, roc.csv and pr.csv into `dir`.
inline void write_eval_outputs(const std::filesystem::path& dir, const std::string& method, const MetricsReport& r) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "report.txt") << format_report_header() << "\n" << format_report(method, r) << "\n";
  std::ofstream rc(dir / "report.csv");
  write_report_csv(rc, method, r);
  std::ofstream roc(dir / "roc.csv");
  write_roc_csv(roc, r.roc_points);
  std::ofstream pr(dir / "pr.csv");
  write_pr_csv(pr, r.pr_points);
}

}  // namespace busu
