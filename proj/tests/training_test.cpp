#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <sstream>

#include <busu/busu.hpp>

using namespace busu;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("busu_training_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

ChainConfig tiny() {
  return {"tiny", {UNetConfig{1, 2, 1, 1, 1, 0.0}, UNetConfig{1, 2, 1, 2, 1, 0.0}}, Junction::input_and_logits, false};
}

PatchSet<float> tiny_patches(std::size_t train = 12, std::size_t val = 4, std::size_t P = 8) {
  static const auto images = synthesize({.count = 3, .size = 32, .seed = 2});
  return extract_patches<float>(images, PatchSpec{P, train, val}, 5);
}

TrainConfig quick(std::size_t epochs = 2) {
  TrainConfig c;
  c.batch_size = 4;
  c.epochs = epochs;
  c.seed = 3;
  c.record_time = false;
  return c;
}

std::vector<Tensor<float>> params_of(const Network<float>& net) {
  std::vector<Tensor<float>> out;
  for (const auto& p : net.store().params()) out.push_back(p.var.value());
  return out;
}

}  // namespace

TEST(Adam, MatchesHandUpdate) {
  ParamStore<double> store;
  auto w = store.add("w", Tensor<double>({1}, 1.0));
  Adam<double> adam(store, 0.1, 0.9, 0.999, 1e-8);
  double x = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    store.zero_grad();
    backward(sum(mul(w, w)));
    adam.step();
    const double g = 2 * x;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(w.value()[0], x, 1e-12);
  }
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.epochs = 0;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.learning_rate = -1e-3;
  EXPECT_THROW(validate(c), ConfigError);
  c = {};
  c.beta1 = 1.0;
  EXPECT_THROW(validate(c), ConfigError);
}

TEST(Train, ZeroLearningRateLeavesParameters) {
  Network<float> net(tiny(), 1);
  const auto before = params_of(net);
  auto cfg = quick(1);
  cfg.learning_rate = 0.0;
  train(net, tiny_patches(), cfg);
  EXPECT_EQ(params_of(net), before);
}

TEST(Train, DivisibilityCheckedBeforeAnyStep) {
  Network<float> net(preset("lightbusu"), 1);
  const auto before = params_of(net);
  auto patches = tiny_patches(4, 0, 6);
  EXPECT_THROW(train(net, patches, quick()), ConfigError);
  EXPECT_EQ(params_of(net), before);
}

TEST(Train, SameSeedSameLog) {
  auto run = [] {
    Network<float> net(tiny(), 4);
    auto log = train(net, tiny_patches(), quick(3));
    return std::make_pair(log, params_of(net));
  };
  auto [a, pa] = run();
  auto [b, pb] = run();
  EXPECT_EQ(a, b);
  EXPECT_EQ(pa, pb);
  std::ostringstream ca, cb;
  write_train_log_csv(ca, a);
  write_train_log_csv(cb, b);
  EXPECT_EQ(ca.str(), cb.str());
  EXPECT_EQ(ca.str().substr(0, ca.str().find('\n')), "epoch,train_loss,val_loss,val_f1,val_auc,seconds");
  EXPECT_EQ(a.epochs.size(), 3u);
  for (std::size_t i = 0; i < a.epochs.size(); ++i) EXPECT_EQ(a.epochs[i].epoch, i + 1);
}

TEST(Train, RestoresBestValidationEpoch) {
  Network<float> net(tiny(), 6);
  auto patches = tiny_patches(12, 8);
  auto cfg = quick(6);
  cfg.learning_rate = 0.05;
  cfg.patience = 2;
  auto log = train(net, patches, cfg);
  double best = 1e300;
  for (const auto& e : log.epochs) best = std::min(best, e.val_loss);
  EXPECT_EQ(log.best_loss, best);
  EXPECT_EQ(log.epochs[log.best_epoch - 1].val_loss, best);
  EXPECT_EQ(detail::validate_patches(net, patches, cfg.batch_size).loss, best);
  if (log.stopped_early) EXPECT_EQ(log.epochs.size(), log.best_epoch + cfg.patience);
}

TEST(Train, LossGoesDown) {
  Network<float> net(tiny(), 7);
  auto cfg = quick(30);
  cfg.learning_rate = 1e-2;
  cfg.patience = 0;
  auto log = train(net, tiny_patches(8, 0), cfg);
  EXPECT_LT(log.epochs.back().train_loss, log.epochs.front().train_loss);
}

TEST(Stitch, WindowStarts) {
  EXPECT_EQ(window_starts(64, 16, 8), (std::vector<std::size_t>{0, 8, 16, 24, 32, 40, 48}));
  EXPECT_EQ(window_starts(20, 16, 16), (std::vector<std::size_t>{0, 4}));
  EXPECT_EQ(window_starts(16, 16, 8), (std::vector<std::size_t>{0}));
}

TEST(Stitch, HalfStrideCoverageIsFourInside) {
  Tensor<float> img({1, 1, 64, 64}, 0.2f);
  auto r = stitch<float>(img, 16, 8, [](const Tensor<float>& x) { return x; });
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const bool iy = y >= 8 && y < 56, ix = x >= 8 && x < 56;
      const std::uint32_t want = (iy ? 2 : 1) * (ix ? 2 : 1);
      EXPECT_EQ(r.coverage[y * 64 + x], want) << y << "," << x;
    }
}

TEST(Stitch, TilingEqualsPerTilePrediction) {
  Rng rng(1);
  Tensor<double> img({1, 1, 32, 48});
  for (auto& v : img.data()) v = rng.uniform();
  auto f = [](const Tensor<double>& x) {
    Tensor<double> y = x;
    for (auto& v : y.data()) v = v * v;
    return y;
  };
  auto r = stitch<double>(img, 16, 16, f);
  for (std::size_t k = 0; k < img.size(); ++k) {
    EXPECT_EQ(r.probability[k], img[k] * img[k]);
    EXPECT_EQ(r.coverage[k], 1u);
  }
}

TEST(Stitch, ConstantPredictorAnyStride) {
  Tensor<float> img({1, 1, 40, 36}, 0.0f);
  for (std::size_t stride : {1, 3, 7, 12, 12}) {
    auto r = stitch<float>(img, 12, stride, [](const Tensor<float>& x) { return Tensor<float>(x.shape(), 0.3f); });
    for (float v : r.probability.data()) EXPECT_EQ(v, 0.3f);
  }
}

TEST(Stitch, VisitOrderInvariant) {
  Network<float> net(tiny(), 2);
  Rng rng(3);
  Tensor<float> img({1, 1, 30, 30});
  for (auto& v : img.data()) v = float(rng.uniform());
  auto pred = [&](const Tensor<float>& x) { return net.predict(x); };
  auto base = stitch<float>(img, 8, 5, pred, 3);
  const std::size_t n = window_starts(30, 8, 5).size();
  std::vector<std::size_t> order(n * n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());
  auto shuffled = stitch<float>(img, 8, 5, pred, 3, &order);
  EXPECT_EQ(base.probability, shuffled.probability);
  std::reverse(order.begin(), order.end());
  EXPECT_EQ(stitch<float>(img, 8, 5, pred, 7, &order).probability, base.probability);
}

TEST(Stitch, Errors) {
  Tensor<float> img({1, 1, 10, 10});
  auto id = [](const Tensor<float>& x) { return x; };
  EXPECT_THROW(stitch<float>(img, 12, 6, id), ParameterError);
  EXPECT_THROW(stitch<float>(img, 8, 9, id), ParameterError);
  Network<float> net(preset("lightbusu"), 0);
  EXPECT_THROW(stitch_predict(net, img, 6), ConfigError);
}

TEST(Evaluate, OracleScoresPerfect) {
  const auto images = synthesize({.count = 3, .size = 48, .seed = 4});
  auto r = evaluate_maps(images, oracle_maps<float>(images));
  for (double v : {r.accuracy, r.sensitivity, r.specificity, r.precision, r.f1, r.auc}) EXPECT_EQ(v, 1.0);
}

TEST(Evaluate, ConstantHalfIsUninformative) {
  const auto images = synthesize({.count = 3, .size = 48, .seed = 4});
  std::vector<Tensor<float>> maps;
  std::size_t pos = 0, n = 0;
  for (const auto& im : images) {
    maps.emplace_back(Shape{im.height(), im.width()}, 0.5f);
    for (std::size_t k = 0; k < im.mask.size(); ++k)
      if (im.fov[k]) pos += im.mask[k], ++n;
  }
  auto r = evaluate_maps(images, maps);
  EXPECT_EQ(r.auc, 0.5);
  // 0.5 >= threshold 0.5: every pixel is called a vessel
  EXPECT_DOUBLE_EQ(r.accuracy, double(pos) / double(n));
  EXPECT_EQ(r.sensitivity, 1.0);
  EXPECT_EQ(r.specificity, 0.0);
}

TEST(Evaluate, FovToggle) {
  const auto images = synthesize({.count = 2, .size = 32, .seed = 4});
  EvalOptions on, off;
  off.use_fov = false;
  const auto maps = oracle_maps<float>(images);
  std::size_t inside = 0;
  for (const auto& im : images)
    for (auto v : im.fov) inside += v;
  EXPECT_EQ(evaluate_maps(images, maps, on).counts.total(), inside);
  EXPECT_EQ(evaluate_maps(images, maps, off).counts.total(), 2u * 32u * 32u);
  EXPECT_THROW(evaluate_maps<float>({}, {}), UsageError);
}

TEST(Evaluate, MatchesRecomputationFromSavedMaps) {
  const auto dir = scratch("maps");
  fs::create_directories(dir);
  const auto images = synthesize({.count = 20, .size = 32, .seed = 8});
  Network<float> net(tiny(), 9);
  EvalOptions opt;
  opt.patch = 16;
  const auto report = evaluate(net, images, opt);
  std::vector<float> scores;
  std::vector<std::uint8_t> truth;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto map = stitch_predict(net, preprocess<float>(images[i]), 16).probability;
    save_bten((dir / (images[i].id + ".bten")).string(), map);
  }
  for (const auto& im : images) {
    const auto map = load_bten<float>((dir / (im.id + ".bten")).string());
    for (std::size_t k = 0; k < im.mask.size(); ++k)
      if (im.fov[k]) scores.push_back(map[k]), truth.push_back(im.mask[k]);
  }
  const auto mono = evaluate_scores<float, std::uint8_t>(scores, truth);
  EXPECT_EQ(report.counts, mono.counts);
  EXPECT_EQ(report.auc, mono.auc);
  EXPECT_EQ(report.f1, mono.f1);
  EXPECT_EQ(format_report("m", report), format_report("m", evaluate(net, images, opt)));
  fs::remove_all(dir);
}

TEST(Evaluate, OutputsWritten) {
  const auto dir = scratch("eval_out");
  const auto images = synthesize({.count = 2, .size = 32, .seed = 4});
  write_eval_outputs(dir, "oracle", evaluate_maps(images, oracle_maps<float>(images)));
  for (const char* f : {"report.txt", "report.csv", "roc.csv", "pr.csv"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_NE(slurp(dir / "report.txt").find("oracle           1.0000 1.0000 1.0000 1.0000 1.0000"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Checkpoint, RoundTripBitExact) {
  const auto dir = scratch("ckpt");
  Network<float> net(preset("lightbusu"), 5);
  train(net, tiny_patches(8, 0, 8), quick(1));
  save_checkpoint(net, dir);
  auto back = load_checkpoint<float>(dir);
  EXPECT_EQ(back.config(), net.config());
  Rng rng(6);
  for (int i = 0; i < 3; ++i) {
    Tensor<float> x({2, 1, 8, 8});
    for (auto& v : x.data()) v = float(rng.uniform());
    EXPECT_EQ(back.predict(x), net.predict(x));
  }
  const auto m = read_checkpoint_manifest(dir);
  EXPECT_EQ(m.at("params").size(), net.store().params().size());
  EXPECT_EQ(m.at("params")[0].at("name"), "net.0.enc0.conv1.kernel");
  fs::remove_all(dir);
}

TEST(Checkpoint, TruncatedPayload) {
  const auto dir = scratch("ckpt_trunc");
  Network<float> net(tiny(), 5);
  save_checkpoint(net, dir);
  const auto full = slurp(dir / "params.bten");
  std::ofstream(dir / "params.bten", std::ios::binary) << full.substr(0, full.size() - 10);
  EXPECT_THROW(load_checkpoint<float>(dir), FormatError);
  std::ofstream(dir / "params.bten", std::ios::binary) << full << "x";
  EXPECT_THROW(load_checkpoint<float>(dir), FormatError);
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptRecordNamesParameter) {
  const auto dir = scratch("ckpt_magic");
  Network<float> net(tiny(), 5);
  save_checkpoint(net, dir);
  auto full = slurp(dir / "params.bten");
  const std::size_t second = full.find("BTEN", 4);
  full[second] = 'X';
  std::ofstream(dir / "params.bten", std::ios::binary) << full;
  try {
    load_checkpoint<float>(dir);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(net.store().params()[1].name), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, PrecisionMismatch) {
  const auto dir = scratch("ckpt_f64");
  Network<double> net(tiny(), 5);
  save_checkpoint(net, dir);
  try {
    load_checkpoint<float>(dir);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("precision mismatch"), std::string::npos);
  }
  EXPECT_NO_THROW(load_checkpoint<double>(dir));
  fs::remove_all(dir);
}

TEST(Checkpoint, MissingOrForeign) {
  EXPECT_THROW(load_checkpoint<float>(scratch("nothing")), FormatError);
  const auto dir = scratch("oracle_ckpt");
  save_oracle_checkpoint(dir);
  EXPECT_EQ(read_checkpoint_manifest(dir).at("kind"), "oracle");
  EXPECT_THROW(load_checkpoint<float>(dir), FormatError);
  fs::remove_all(dir);
}
