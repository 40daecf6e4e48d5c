#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "busu/image_io.hpp"
#include "busu/rng.hpp"
#include "busu/tensor.hpp"

namespace busu {

namespace fs = std::filesystem;

/// A fundus photograph with its vessel annotation and field-of-view mask.
/// Masks hold 0/1 per pixel in row-major order.
struct FundusImage {
  std::string id;
  Raster image;
  std::vector<std::uint8_t> mask;
  std::vector<std::uint8_t> fov;

  std::size_t width() const { return image.width; }
  std::size_t height() const { return image.height; }

  double vessel_fraction() const {
    std::size_t n = 0;
    for (auto v : mask) n += v;
    return mask.empty() ? 0.0 : double(n) / double(mask.size());
  }
};

// ---------------------------------------------------------------------------
// Dataset directory: images/<id>.<ext>, masks/<id>.<ext>, fov/<id>.<ext>, with
// ext one of png, pgm, ppm. The fov raster is optional (whole image if absent).

namespace detail {

inline std::optional<fs::path> find_raster(const fs::path& dir, const std::string& id) {
  for (const char* ext : {".png", ".pgm", ".ppm", ".pnm"}) {
    fs::path p = dir / (id + ext);
    if (fs::exists(p)) return p;
  }
  return std::nullopt;
}

inline std::vector<std::uint8_t> binarize(const Raster& r, const std::string& what) {
  std::vector<std::uint8_t> out(r.width * r.height);
  for (std::size_t i = 0; i < out.size(); ++i) {
    unsigned v = 0;
    for (std::size_t c = 0; c < r.channels; ++c) v = std::max<unsigned>(v, r.pixels[i * r.channels + c]);
    out[i] = v >= 128 ? 1 : 0;
  }
  (void)what;
  return out;
}

inline bool is_raster(const fs::path& p) {
  const auto ext = lower_ext(p.string());
  return ext == "png" || ext == "pgm" || ext == "ppm" || ext == "pnm";
}

}  // namespace detail

inline FundusImage load_fundus(const fs::path& root, const std::string& id) {
  const auto img_path = detail::find_raster(root / "images", id);
  if (!img_path) throw IngestionError("image '" + id + "': missing image raster");
  const auto mask_path = detail::find_raster(root / "masks", id);
  if (!mask_path) throw IngestionError("image '" + id + "': missing vessel mask");
  FundusImage f;
  f.id = id;
  f.image = read_raster(img_path->string());
  const Raster mask = read_raster(mask_path->string());
  if (mask.width != f.width() || mask.height != f.height())
    throw IngestionError("image '" + id + "': mask dimensions differ from image");
  f.mask = detail::binarize(mask, "mask");
  if (const auto fov_path = detail::find_raster(root / "fov", id)) {
    const Raster fov = read_raster(fov_path->string());
    if (fov.width != f.width() || fov.height != f.height())
      throw IngestionError("image '" + id + "': FOV dimensions differ from image");
    f.fov = detail::binarize(fov, "fov");
  } else {
    f.fov.assign(f.width() * f.height(), 1);
  }
  return f;
}

/// Loads every image under `dir`/images in id order. Fails as a whole on the
/// first bad triplet.
inline std::vector<FundusImage> load_dataset(const fs::path& dir) {
  const fs::path images = dir / "images";
  if (!fs::is_directory(images)) throw IngestionError("dataset " + dir.string() + ": no images/ directory");
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(images))
    if (e.is_regular_file() && detail::is_raster(e.path())) ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.empty()) throw IngestionError("dataset " + dir.string() + ": no images found");
  std::vector<FundusImage> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(load_fundus(dir, id));
  return out;
}

inline void save_fundus(const fs::path& root, const FundusImage& f) {
  for (const char* sub : {"images", "masks", "fov"}) fs::create_directories(root / sub);
  write_raster((root / "images" / (f.id + ".png")).string(), f.image);
  Raster m(f.width(), f.height(), 1), v(f.width(), f.height(), 1);
  for (std::size_t i = 0; i < f.mask.size(); ++i) {
    m.pixels[i] = f.mask[i] ? 255 : 0;
    v.pixels[i] = f.fov[i] ? 255 : 0;
  }
  write_raster((root / "masks" / (f.id + ".png")).string(), m);
  write_raster((root / "fov" / (f.id + ".png")).string(), v);
}

// ---------------------------------------------------------------------------
// Preprocessing.

struct PreprocessOptions {
  bool clahe = false;
  double clahe_clip = 2.0;
  std::size_t clahe_tiles = 8;
  std::optional<double> gamma;
};

inline double luminance(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

/// Gray levels in [0, 1], row-major.
inline std::vector<double> grayscale(const Raster& r) {
  std::vector<double> out(r.width * r.height);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto* p = r.pixels.data() + i * r.channels;
    out[i] = (r.channels == 1 ? double(p[0]) : luminance(p[0], p[1], p[2])) / 255.0;
  }
  return out;
}

/// Contrast-limited adaptive histogram equalization on [0,1] gray levels with
/// 256 bins, tiles x tiles regions and bilinear blending of tile mappings.
inline std::vector<double> clahe(const std::vector<double>& gray, std::size_t w, std::size_t h, std::size_t tiles,
                                 double clip) {
  constexpr std::size_t bins = 256;
  tiles = std::max<std::size_t>(1, std::min({tiles, w, h}));
  const std::size_t tw = (w + tiles - 1) / tiles, th = (h + tiles - 1) / tiles;
  std::vector<std::vector<double>> maps(tiles * tiles, std::vector<double>(bins));
  auto bin_of = [](double v) { return std::min<std::size_t>(bins - 1, std::size_t(std::clamp(v, 0.0, 1.0) * (bins - 1) + 0.5)); };
  for (std::size_t ty = 0; ty < tiles; ++ty)
    for (std::size_t tx = 0; tx < tiles; ++tx) {
      std::vector<double> hist(bins, 0.0);
      std::size_t count = 0;
      for (std::size_t y = ty * th; y < std::min(h, (ty + 1) * th); ++y)
        for (std::size_t x = tx * tw; x < std::min(w, (tx + 1) * tw); ++x, ++count) hist[bin_of(gray[y * w + x])] += 1;
      if (count == 0) continue;
      const double limit = std::max(1.0, clip * double(count) / bins);
      double excess = 0.0;
      for (auto& v : hist)
        if (v > limit) excess += v - limit, v = limit;
      for (auto& v : hist) v += excess / bins;
      auto& map = maps[ty * tiles + tx];
      double acc = 0.0;
      for (std::size_t b = 0; b < bins; ++b) {
        acc += hist[b];
        map[b] = acc / double(count);
      }
    }
  std::vector<double> out(gray.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double fy = std::clamp((double(y) + 0.5) / double(th) - 0.5, 0.0, double(tiles - 1));
      const double fx = std::clamp((double(x) + 0.5) / double(tw) - 0.5, 0.0, double(tiles - 1));
      const std::size_t y0 = std::size_t(fy), x0 = std::size_t(fx);
      const std::size_t y1 = std::min(y0 + 1, tiles - 1), x1 = std::min(x0 + 1, tiles - 1);
      const double ay = fy - double(y0), ax = fx - double(x0);
      const std::size_t b = bin_of(gray[y * w + x]);
      const double top = (1 - ax) * maps[y0 * tiles + x0][b] + ax * maps[y0 * tiles + x1][b];
      const double bot = (1 - ax) * maps[y1 * tiles + x0][b] + ax * maps[y1 * tiles + x1][b];
      out[y * w + x] = (1 - ay) * top + ay * bot;
    }
  return out;
}

/// Min-max rescale to [0, 1]; a constant input maps to 0.5.
template <Real T>
void range_normalize(std::span<T> v) {
  if (v.empty()) return;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double mn = *lo, mx = *hi;
  if (mx - mn < 1e-12) {
    std::fill(v.begin(), v.end(), T(0.5));
    return;
  }
  for (auto& x : v) x = T((double(x) - mn) / (mx - mn));
}

/// Grayscale [0,1] -> optional CLAHE/gamma -> standardization with mean and
/// standard deviation measured inside the FOV -> min-max to [0,1].
template <Real T>
Tensor<T> preprocess(const FundusImage& img, const PreprocessOptions& opt = {}) {
  const std::size_t w = img.width(), h = img.height();
  std::vector<double> g = grayscale(img.image);
  if (opt.clahe) g = clahe(g, w, h, opt.clahe_tiles, opt.clahe_clip);
  if (opt.gamma)
    for (auto& v : g) v = std::pow(std::clamp(v, 0.0, 1.0), *opt.gamma);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (img.fov.empty() || img.fov[i]) sum += g[i], ++n;
  if (n == 0) n = g.size(), sum = std::accumulate(g.begin(), g.end(), 0.0);
  const double mean = sum / double(n);
  for (std::size_t i = 0; i < g.size(); ++i)
    if (img.fov.empty() || img.fov[i] || n == g.size()) sq += (g[i] - mean) * (g[i] - mean);
  const double sd = std::sqrt(sq / double(n));
  Tensor<T> out({1, 1, h, w});
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = sd > 1e-12 ? T((g[i] - mean) / sd) : T(0);
  range_normalize<T>(out.data());
  return out;
}

// ---------------------------------------------------------------------------
// Patch extraction.

struct PatchSpec {
  std::size_t size = 48;
  std::size_t train = 170000;
  std::size_t val = 19000;

  std::size_t total() const { return train + val; }

  /// round(total * fraction) training patches, the remainder for validation.
  static PatchSpec from_fraction(std::size_t size, std::size_t total, double fraction) {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw ParameterError("train fraction must be in [0, 1]");
    const auto train = std::size_t(std::llround(double(total) * fraction));
    return {size, train, total - train};
  }
};

struct PatchOrigin {
  std::size_t image, y, x;
  friend bool operator==(const PatchOrigin&, const PatchOrigin&) = default;
};

template <Real T>
struct PatchSet {
  std::size_t patch_size = 0;
  std::uint64_t seed = 0;
  Tensor<T> images;  // N x 1 x P x P
  Tensor<T> masks;   // N x 1 x P x P, values 0/1
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<PatchOrigin> origins;

  std::size_t size() const { return origins.size(); }

  /// Gathers the listed patches into (images, masks) batch tensors.
  std::pair<Tensor<T>, Tensor<T>> batch(std::span<const std::size_t> idx) const {
    const std::size_t px = patch_size * patch_size;
    Tensor<T> x({idx.size(), 1, patch_size, patch_size}), y({idx.size(), 1, patch_size, patch_size});
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::copy_n(images.raw() + idx[b] * px, px, x.raw() + b * px);
      std::copy_n(masks.raw() + idx[b] * px, px, y.raw() + b * px);
    }
    return {std::move(x), std::move(y)};
  }

  friend bool operator==(const PatchSet&, const PatchSet&) = default;
};

/// Draws spec.total() patches uniformly: image uniformly, then top-left corner
/// uniformly among positions keeping the patch inside the image. The first
/// spec.train draws form the training split, the rest validation.
template <Real T>
PatchSet<T> extract_patches(const std::vector<FundusImage>& images, const PatchSpec& spec, std::uint64_t seed,
                            const PreprocessOptions& prep = {}) {
  if (images.empty()) throw ParameterError("extract_patches: no images");
  if (spec.total() < 1) throw ParameterError("extract_patches: need at least one patch");
  if (spec.size < 1) throw ParameterError("extract_patches: patch size must be >= 1");
  for (const auto& im : images)
    if (spec.size > std::min(im.width(), im.height()))
      throw ParameterError("extract_patches: patch size " + std::to_string(spec.size) + " exceeds image '" + im.id +
                           "'");
  std::vector<Tensor<T>> pre;
  pre.reserve(images.size());
  for (const auto& im : images) pre.push_back(preprocess<T>(im, prep));

  const std::size_t P = spec.size, N = spec.total(), px = P * P;
  PatchSet<T> set;
  set.patch_size = P;
  set.seed = seed;
  set.images = Tensor<T>({N, 1, P, P});
  set.masks = Tensor<T>({N, 1, P, P});
  Rng rng(seed);
  for (std::size_t k = 0; k < N; ++k) {
    const std::size_t i = rng.below(images.size());
    const auto& im = images[i];
    const std::size_t y = rng.below(im.height() - P + 1), x = rng.below(im.width() - P + 1);
    set.origins.push_back({i, y, x});
    for (std::size_t r = 0; r < P; ++r)
      for (std::size_t c = 0; c < P; ++c) {
        const std::size_t src = (y + r) * im.width() + x + c;
        set.images[k * px + r * P + c] = pre[i][src];
        set.masks[k * px + r * P + c] = T(im.mask[src]);
      }
    (k < spec.train ? set.train : set.val).push_back(k);
  }
  return set;
}

// Cache layout: manifest.json, images.bten, masks.bten, split.txt with one
// "<index> <train|val>" line per patch.
template <Real T>
void save_patchset(const fs::path& dir, const PatchSet<T>& set) {
  fs::create_directories(dir);
  nlohmann::json m;
  m["format"] = "busu-patchset";
  m["version"] = 1;
  m["patch_size"] = set.patch_size;
  m["seed"] = set.seed;
  m["count"] = set.size();
  m["train"] = set.train.size();
  m["val"] = set.val.size();
  auto& o = m["origins"] = nlohmann::json::array();
  for (const auto& p : set.origins) o.push_back({p.image, p.y, p.x});
  std::ofstream(dir / "manifest.json") << m.dump(2) << "\n";
  save_bten((dir / "images.bten").string(), set.images);
  save_bten((dir / "masks.bten").string(), set.masks);
  std::ofstream split(dir / "split.txt");
  std::vector<const char*> label(set.size(), "train");
  for (auto i : set.val) label[i] = "val";
  for (std::size_t i = 0; i < set.size(); ++i) split << i << " " << label[i] << "\n";
}

template <Real T>
PatchSet<T> load_patchset(const fs::path& dir) {
  std::ifstream mi(dir / "manifest.json");
  if (!mi) throw FormatError("patch cache " + dir.string() + ": missing manifest.json");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(mi);
  } catch (const std::exception& e) {
    throw FormatError("patch cache manifest: " + std::string(e.what()));
  }
  PatchSet<T> set;
  set.patch_size = m.at("patch_size").get<std::size_t>();
  set.seed = m.at("seed").get<std::uint64_t>();
  for (const auto& o : m.at("origins")) set.origins.push_back({o[0], o[1], o[2]});
  set.images = load_bten<T>((dir / "images.bten").string());
  set.masks = load_bten<T>((dir / "masks.bten").string());
  const Shape expect{set.origins.size(), 1, set.patch_size, set.patch_size};
  if (set.images.shape() != expect || set.masks.shape() != expect)
    throw FormatError("patch cache " + dir.string() + ": tensor shapes disagree with manifest");
  std::ifstream split(dir / "split.txt");
  std::size_t idx;
  std::string label;
  while (split >> idx >> label) {
    if (idx >= set.size()) throw FormatError("patch cache split index out of range");
    (label == "val" ? set.val : set.train).push_back(idx);
  }
  if (set.train.size() + set.val.size() != set.size()) throw FormatError("patch cache split file incomplete");
  return set;
}

// ---------------------------------------------------------------------------
// Synthetic fundus-like images: smooth curvilinear strokes (random walks with
// momentum, 1-3 px wide) inside a circular FOV on a noisy background.

struct SynthOptions {
  std::size_t count = 20;
  std::size_t size = 128;
  double density = 1.0;  // strokes per 8 px of image side
  double noise = 0.3;    // background texture and noise amplitude in [0, 1]
  std::uint64_t seed = 0;
};

/// Image `index` of a synthetic set; its random stream is split_seed(seed, index).
inline FundusImage synthesize_image(const SynthOptions& opt, std::size_t index) {
  const std::size_t S = opt.size;
  if (S < 8) throw ParameterError("synthetic image size must be >= 8");
  if (opt.density < 0.0) throw ParameterError("density must be >= 0");
  if (opt.noise < 0.0) throw ParameterError("noise must be >= 0");
  Rng rng(split_seed(opt.seed, index));
  FundusImage f;
  char id[32];
  std::snprintf(id, sizeof id, "synth_%03zu", index);
  f.id = id;
  f.fov.assign(S * S, 0);
  f.mask.assign(S * S, 0);
  const double cx = (double(S) - 1) / 2, cy = cx, radius = 0.47 * double(S);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x)
      f.fov[y * S + x] = (double(x) - cx) * (double(x) - cx) + (double(y) - cy) * (double(y) - cy) <= radius * radius;

  std::vector<double> intensity(S * S, 0.0);
  auto stamp = [&](double px, double py, int width, double a) {
    const double r = width == 1 ? 0.5 : width == 2 ? 1.0 : 1.5;
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx) {
        const long x = std::lround(px) + dx, y = std::lround(py) + dy;
        if (x < 0 || y < 0 || x >= long(S) || y >= long(S)) continue;
        const double ddx = double(x) - px, ddy = double(y) - py;
        if (ddx * ddx + ddy * ddy > r * r) continue;
        const std::size_t k = std::size_t(y) * S + std::size_t(x);
        if (!f.fov[k]) continue;
        f.mask[k] = 1;
        intensity[k] = std::max(intensity[k], a);
      }
  };
  const auto strokes = std::size_t(std::llround(opt.density * double(S) / 8.0));
  for (std::size_t s = 0; s < strokes; ++s) {
    const double rad = radius * std::sqrt(rng.uniform()), phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    double x = cx + rad * std::cos(phi), y = cy + rad * std::sin(phi);
    double heading = rng.uniform(0.0, 2.0 * std::numbers::pi), turn = 0.0;
    const double u = rng.uniform();
    const int width = u < 0.45 ? 1 : u < 0.8 ? 2 : 3;
    const double a = rng.uniform(0.5, 1.0);
    const auto length = std::size_t(rng.uniform(0.3, 1.0) * double(S));
    for (std::size_t step = 0; step < length; ++step) {
      stamp(x, y, width, a);
      turn = 0.85 * turn + rng.normal(0.0, 0.06);
      heading += turn;
      x += std::cos(heading);
      y += std::sin(heading);
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) > radius * radius) break;
    }
  }

  // Background: smooth illumination field plus pixel noise, both scaled by
  // `noise`, so noise = 0 leaves only the vessels.
  const double fx = rng.uniform(1.0, 3.0), fy = rng.uniform(1.0, 3.0), ph = rng.uniform(0.0, 6.28);
  f.image = Raster(S, S, 3);
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      const std::size_t k = y * S + x;
      if (!f.fov[k]) continue;
      const double field =
          0.5 + 0.5 * std::sin(fx * double(x) / double(S) * std::numbers::pi + fy * double(y) / double(S) * 2.0 + ph);
      double v = 120.0 * intensity[k] + opt.noise * (60.0 + 50.0 * field + 45.0 * rng.normal());
      v = std::clamp(v, 0.0, 255.0);
      f.image.at(y, x, 0) = std::uint8_t(std::lround(v));
      f.image.at(y, x, 1) = std::uint8_t(std::lround(v * 0.75));
      f.image.at(y, x, 2) = std::uint8_t(std::lround(v * 0.5));
    }
  return f;
}

inline std::vector<FundusImage> synthesize(const SynthOptions& opt) {
  std::vector<FundusImage> out;
  for (std::size_t i = 0; i < opt.count; ++i) out.push_back(synthesize_image(opt, i));
  return out;
}

/// Writes a synthetic dataset (images/, masks/, fov/, manifest.json) to `dir`.
/// Keys of `extra` are added to the manifest.
inline std::vector<FundusImage> gen_synthetic(const fs::path& dir, const SynthOptions& opt,
                                              const nlohmann::json& extra = nlohmann::json::object()) {
  if (opt.count < 1) throw ParameterError("count must be \u2265 1");
  auto images = synthesize(opt);
  for (const auto& f : images) save_fundus(dir, f);
  nlohmann::json m;
  m["format"] = "busu-synthetic";
  m["count"] = opt.count;
  m["size"] = opt.size;
  m["density"] = opt.density;
  m["noise"] = opt.noise;
  m["seed"] = opt.seed;
  m["images"] = nlohmann::json::array();
  for (const auto& f : images) m["images"].push_back(f.id);
  for (const auto& [k, v] : extra.items()) m[k] = v;
  std::ofstream(dir / "manifest.json") << m.dump(2) << "\n";
  return images;
}

}  // namespace busu
