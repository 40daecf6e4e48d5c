#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include <busu/busu.hpp>

using namespace busu;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("busu_data_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

FundusImage flat(std::size_t w, std::size_t h, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  FundusImage f;
  f.id = "flat";
  f.image = Raster(w, h, 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      f.image.at(y, x, 0) = r;
      f.image.at(y, x, 1) = g;
      f.image.at(y, x, 2) = b;
    }
  f.mask.assign(w * h, 0);
  f.fov.assign(w * h, 1);
  return f;
}

}  // namespace

TEST(Preprocess, PureRedLuminance) {
  auto g = grayscale(flat(2, 2, 255, 0, 0).image);
  for (double v : g) EXPECT_NEAR(v, 0.299, 1e-12);
}

TEST(Preprocess, ConstantImageMapsToHalf) {
  auto t = preprocess<double>(flat(6, 5, 90, 90, 90));
  EXPECT_EQ(t.shape(), (Shape{1, 1, 5, 6}));
  for (double v : t.data()) EXPECT_EQ(v, 0.5);
}

TEST(Preprocess, RangeAndIdempotence) {
  const auto images = synthesize({.count = 3, .size = 64, .seed = 2});
  for (const auto& im : images)
    for (const PreprocessOptions& opt : {PreprocessOptions{}, PreprocessOptions{.clahe = true, .gamma = 1.2}}) {
      auto t = preprocess<double>(im, opt);
      double lo = 1, hi = 0;
      for (double v : t.data()) lo = std::min(lo, v), hi = std::max(hi, v);
      EXPECT_GE(lo, 0.0);
      EXPECT_LE(hi, 1.0);
      auto again = t;
      range_normalize<double>(again.data());
      for (std::size_t i = 0; i < t.size(); ++i) EXPECT_NEAR(again[i], t[i], 1e-6);
    }
}

TEST(Preprocess, StandardizesInsideFov) {
  // Pixels outside the FOV do not move the statistics.
  auto a = synthesize_image({.size = 32, .seed = 5}, 0);
  auto b = a;
  for (std::size_t k = 0; k < b.fov.size(); ++k)
    if (!b.fov[k])
      for (std::size_t ch = 0; ch < 3; ++ch) b.image.pixels[k * 3 + ch] = 0;
  auto ta = preprocess<double>(a), tb = preprocess<double>(b);
  for (std::size_t k = 0; k < a.fov.size(); ++k)
    if (a.fov[k]) EXPECT_DOUBLE_EQ(ta[k], tb[k]);
}

TEST(Patches, DefaultAndFractionCounts) {
  PatchSpec spec;
  EXPECT_EQ(spec.size, 48u);
  EXPECT_EQ(spec.train, 170000u);
  EXPECT_EQ(spec.val, 19000u);
  EXPECT_EQ(spec.total(), 189000u);
  auto f = PatchSpec::from_fraction(48, 190000, 170.0 / 189.0);
  EXPECT_EQ(f.train, 170899u);
  EXPECT_EQ(f.val, 19101u);
  EXPECT_THROW(PatchSpec::from_fraction(48, 10, 1.5), ParameterError);
}

TEST(Patches, SinglePatchAllTrain) {
  const auto images = synthesize({.count = 2, .size = 32, .seed = 1});
  auto set = extract_patches<float>(images, PatchSpec::from_fraction(16, 1, 1.0), 3);
  EXPECT_EQ(set.train.size(), 1u);
  EXPECT_TRUE(set.val.empty());
}

TEST(Patches, SeededAndReproducible) {
  const auto images = synthesize({.count = 4, .size = 48, .seed = 1});
  const PatchSpec spec{16, 40, 10};
  EXPECT_EQ(extract_patches<float>(images, spec, 7), extract_patches<float>(images, spec, 7));
  EXPECT_NE(extract_patches<float>(images, spec, 7).origins, extract_patches<float>(images, spec, 8).origins);
}

TEST(Patches, InsideBoundsAndCopiedFaithfully) {
  const auto images = synthesize({.count = 3, .size = 40, .seed = 4});
  const PatchSpec spec{24, 30, 12};
  auto set = extract_patches<double>(images, spec, 11);
  ASSERT_EQ(set.size(), 42u);
  std::vector<Tensor<double>> pre;
  for (const auto& im : images) pre.push_back(preprocess<double>(im));
  const std::size_t P = 24;
  for (std::size_t k = 0; k < set.size(); ++k) {
    const auto o = set.origins[k];
    const auto& im = images[o.image];
    ASSERT_LE(o.y + P, im.height());
    ASSERT_LE(o.x + P, im.width());
    for (std::size_t r = 0; r < P; ++r)
      for (std::size_t c = 0; c < P; ++c) {
        const std::size_t src = (o.y + r) * im.width() + o.x + c;
        EXPECT_EQ(set.images[k * P * P + r * P + c], pre[o.image][src]);
        EXPECT_EQ(set.masks[k * P * P + r * P + c], double(im.mask[src]));
      }
  }
}

TEST(Patches, SplitIsDisjointAndComplete) {
  const auto images = synthesize({.count = 2, .size = 32, .seed = 9});
  auto set = extract_patches<float>(images, PatchSpec{16, 17, 6}, 2);
  std::vector<int> seen(set.size(), 0);
  for (auto i : set.train) ++seen[i];
  for (auto i : set.val) ++seen[i];
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_EQ(set.train.size(), 17u);
  EXPECT_EQ(set.val.size(), 6u);
}

TEST(Patches, VesselFractionTracksSource) {
  // vessels spread over the whole raster
  Rng rng(21);
  std::vector<FundusImage> images;
  for (int i = 0; i < 20; ++i) {
    auto f = flat(128, 128, 40, 40, 40);
    for (auto& m : f.mask) m = rng.uniform() < 0.08;
    images.push_back(std::move(f));
  }
  double src = 0;
  for (const auto& im : images) src += im.vessel_fraction();
  src /= double(images.size());
  double got = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto set = extract_patches<float>(images, PatchSpec{48, 400, 0}, seed);
    double s = 0;
    for (float v : set.masks.data()) s += v;
    got += s / double(set.masks.size());
  }
  got /= 5;
  EXPECT_NEAR(got, src, 0.2 * src);
}

TEST(Patches, VesselFractionMatchesCoverageWeighting) {
  // FOV-confined vessels: a pixel at offset u is covered by as many windows as
  // corners in [u-P+1, u] that keep the window inside.
  const std::size_t S = 128, P = 48;
  const auto images = synthesize({.count = 20, .size = S, .seed = 21});
  auto cover = [&](std::size_t u) {
    const std::size_t lo = u + 1 >= P ? u + 1 - P : 0, hi = std::min(u, S - P);
    return double(hi - lo + 1);
  };
  double want = 0;
  for (const auto& im : images) {
    double num = 0, den = 0;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const double w = cover(y) * cover(x);
        num += w * im.mask[y * S + x];
        den += w;
      }
    want += num / den;
  }
  want /= double(images.size());
  double got = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto set = extract_patches<float>(images, PatchSpec{P, 2000, 0}, seed);
    double s = 0;
    for (float v : set.masks.data()) s += v;
    got += s / double(set.masks.size());
  }
  got /= 5;
  EXPECT_NEAR(got, want, 0.05 * want);
}

TEST(Patches, Errors) {
  const auto images = synthesize({.count = 1, .size = 32});
  EXPECT_THROW(extract_patches<float>(images, PatchSpec{33, 1, 0}, 0), ParameterError);
  EXPECT_THROW(extract_patches<float>({}, PatchSpec{8, 1, 0}, 0), ParameterError);
  EXPECT_THROW(extract_patches<float>(images, PatchSpec{8, 0, 0}, 0), ParameterError);
}

TEST(Patches, CacheRoundTrip) {
  const auto dir = scratch("cache");
  const auto images = synthesize({.count = 2, .size = 32, .seed = 3});
  auto set = extract_patches<float>(images, PatchSpec{16, 9, 4}, 5);
  save_patchset(dir, set);
  EXPECT_EQ(load_patchset<float>(dir), set);
  EXPECT_THROW(load_patchset<double>(dir), FormatError);
  fs::remove_all(dir);
}

TEST(Synthetic, NoiseFreeSupportEqualsMask) {
  for (std::size_t i = 0; i < 4; ++i) {
    auto f = synthesize_image({.size = 64, .noise = 0.0, .seed = 6}, i);
    for (std::size_t k = 0; k < f.mask.size(); ++k) EXPECT_EQ(f.image.pixels[k * 3] > 0, f.mask[k] == 1) << k;
  }
}

TEST(Synthetic, ZeroDensityEmptyMasks) {
  for (const auto& f : synthesize({.count = 3, .size = 48, .density = 0.0, .seed = 8}))
    for (auto v : f.mask) EXPECT_EQ(v, 0);
}

TEST(Synthetic, VesselsInsideFovAndPresent) {
  for (const auto& f : synthesize({.count = 5, .size = 64, .seed = 10})) {
    EXPECT_GT(f.vessel_fraction(), 0.01);
    for (std::size_t k = 0; k < f.mask.size(); ++k)
      if (f.mask[k]) EXPECT_EQ(f.fov[k], 1);
  }
}

TEST(Synthetic, ByteIdenticalRerun) {
  const auto a = scratch("synth_a"), b = scratch("synth_b");
  const SynthOptions opt{.count = 3, .size = 32, .seed = 7};
  gen_synthetic(a, opt);
  gen_synthetic(b, opt);
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    EXPECT_EQ(slurp(e.path()), slurp(b / rel)) << rel;
  }
  EXPECT_THROW(gen_synthetic(a, {.count = 0}), ParameterError);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Loader, SyntheticRoundTrip) {
  const auto dir = scratch("roundtrip");
  const auto made = gen_synthetic(dir, {.count = 4, .size = 40, .seed = 12});
  const auto loaded = load_dataset(dir);
  ASSERT_EQ(loaded.size(), made.size());
  for (std::size_t i = 0; i < made.size(); ++i) {
    EXPECT_EQ(loaded[i].id, made[i].id);
    EXPECT_EQ(loaded[i].image.pixels, made[i].image.pixels);
    EXPECT_EQ(loaded[i].mask, made[i].mask);
    EXPECT_EQ(loaded[i].fov, made[i].fov);
  }
  fs::remove_all(dir);
}

TEST(Loader, DriveShapedDirectory) {
  const auto dir = scratch("drive");
  for (const char* sub : {"images", "masks"}) fs::create_directories(dir / sub);
  for (int i = 21; i <= 40; ++i) {
    const std::string id = std::to_string(i) + "_training";
    Raster img(565, 584, 3), mask(565, 584, 1);
    img.pixels[0] = std::uint8_t(i);
    mask.pixels[1] = 255;
    write_raster((dir / "images" / (id + ".ppm")).string(), img);
    write_raster((dir / "masks" / (id + ".pgm")).string(), mask);
  }
  const auto set = load_dataset(dir);
  ASSERT_EQ(set.size(), 20u);
  for (const auto& f : set) {
    EXPECT_EQ(f.width(), 565u);
    EXPECT_EQ(f.height(), 584u);
    EXPECT_EQ(f.mask[1], 1);
    EXPECT_EQ(f.fov.size(), 565u * 584u);  // no fov raster: whole image
  }
  fs::remove_all(dir);
}

TEST(Loader, Errors) {
  const auto empty = scratch("empty");
  fs::create_directories(empty / "images");
  EXPECT_THROW(load_dataset(empty), IngestionError);
  EXPECT_THROW(load_dataset(scratch("missing")), IngestionError);

  const auto dir = scratch("nomask");
  gen_synthetic(dir, {.count = 2, .size = 16, .seed = 1});
  fs::remove(dir / "masks" / "synth_001.png");
  try {
    load_dataset(dir);
    FAIL();
  } catch (const IngestionError& e) {
    EXPECT_NE(std::string(e.what()).find("synth_001"), std::string::npos);
  }
  fs::remove_all(empty);
  fs::remove_all(dir);
}
