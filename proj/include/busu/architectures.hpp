#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "busu/layers.hpp"

namespace busu {

/// One encoder-decoder sub-network. Channels double per level: level l has
/// base_channels * 2^l channels and the bottleneck has base_channels * 2^levels.
struct UNetConfig {
  int levels = 4;
  int base_channels = 64;
  int d = 1;
  int in_channels = 1;
  int out_channels = 1;
  double dropout = 0.0;

  std::size_t channels(int level) const { return std::size_t(base_channels) << level; }
  std::size_t divisor() const { return std::size_t(1) << levels; }

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

/// How sub-net k+1 receives sub-net k's output.
enum class Junction {
  // Channel concatenation of the network input with the previous sub-net's
  // pre-sigmoid output map.
  input_and_logits,
};

inline const char* junction_name(Junction) { return "input_and_logits"; }

inline Junction parse_junction(const std::string& s) {
  if (s == "input_and_logits") return Junction::input_and_logits;
  throw ConfigError("unknown junction '" + s + "' (valid: input_and_logits)");
}

struct ChainConfig {
  std::string name = "custom";
  std::vector<UNetConfig> subnets;
  Junction junction = Junction::input_and_logits;
  // Big-U/Small-U style chains require sub-net depth to strictly decrease.
  bool decreasing_depth = false;

  std::size_t divisor() const {
    std::size_t m = 1;
    for (const auto& s : subnets) m = std::max(m, s.divisor());
    return m;
  }

  friend bool operator==(const ChainConfig&, const ChainConfig&) = default;
};

inline void validate(const UNetConfig& c) {
  if (c.levels < 1) throw ConfigError("levels must be >= 1");
  if (c.levels > 12) throw ConfigError("levels must be <= 12");
  if (c.base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (c.d < 1) throw ConfigError("d must be >= 1");
  if (c.in_channels < 1 || c.out_channels < 1) throw ConfigError("in_channels and out_channels must be >= 1");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
}

inline void validate(const ChainConfig& c) {
  if (c.subnets.empty()) throw ConfigError("chain needs at least one sub-net");
  for (const auto& s : c.subnets) validate(s);
  for (std::size_t k = 1; k < c.subnets.size(); ++k) {
    const int expected = c.subnets[0].in_channels + c.subnets[k - 1].out_channels;
    if (c.subnets[k].in_channels != expected)
      throw ConfigError("junction: sub-net " + std::to_string(k) + " needs in_channels " + std::to_string(expected) +
                        " (network input + previous output), got " + std::to_string(c.subnets[k].in_channels));
    if (c.decreasing_depth && c.subnets[k].levels >= c.subnets[k - 1].levels)
      throw ConfigError("sub-net " + std::to_string(k) + " must be shallower than sub-net " + std::to_string(k - 1));
  }
}

// ---------------------------------------------------------------------------

/// Encoder: `levels` conv blocks each followed by 2x2 max-pooling. Bottleneck:
/// dense block. Decoder per level: upsample, 3x3 up-conv, batch norm, ReLU,
/// bi-directional ConvLSTM fusion with the skip map, conv block. Head: 1x1 conv
/// producing pre-sigmoid logits.
template <Real T>
class UNet {
 public:
  UNet(ParamStore<T>& store, const std::string& prefix, const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    validate(cfg);
    std::size_t in = std::size_t(cfg.in_channels);
    for (int l = 0; l < cfg.levels; ++l) {
      enc_.emplace_back(store, prefix + ".enc" + std::to_string(l), in, cfg.channels(l), l, rng);
      in = cfg.channels(l);
    }
    mid_ = DenseBlock<T>(store, prefix + ".mid", in, cfg.channels(cfg.levels), cfg.d, cfg.levels, rng, cfg.dropout);
    dec_.resize(std::size_t(cfg.levels));
    for (int l = cfg.levels - 1; l >= 0; --l) {
      const std::string name = prefix + ".dec" + std::to_string(l);
      auto& level = dec_[std::size_t(l)];
      // no bias, bn follows
      level.up = Conv2d<T>(store, name + ".upconv", cfg.channels(l + 1), cfg.channels(l), 3, l, rng, false);
      level.bn = BatchNorm2d<T>(store, name + ".bn", cfg.channels(l), l);
      level.fuse = BConvLstmFusion<T>(store, name + ".fuse", cfg.channels(l), l, rng);
      level.block = ConvBlock<T>(store, name, cfg.channels(l), cfg.channels(l), l, rng);
    }
    head_ = Conv2d<T>(store, prefix + ".head", cfg.channels(0), std::size_t(cfg.out_channels), 1, 0, rng);
  }

  const UNetConfig& config() const { return cfg_; }

  Var<T> logits(const Var<T>& x, Mode mode, Rng& rng) const {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != std::size_t(cfg_.in_channels))
      throw ShapeError("network expects input (N," + std::to_string(cfg_.in_channels) + ",H,W), got " + to_string(s));
    if (s[2] % cfg_.divisor() || s[3] % cfg_.divisor())
      throw ShapeError("input spatial dims " + to_string(s) + " not divisible by 2^" + std::to_string(cfg_.levels));
    std::vector<Var<T>> skips;
    Var<T> cur = x;
    for (const auto& block : enc_) {
      skips.push_back(block(cur));
      cur = maxpool2d(skips.back());
    }
    cur = mid_.forward(cur, mode, rng);
    for (int l = cfg_.levels - 1; l >= 0; --l) {
      const auto& level = dec_[std::size_t(l)];
      Var<T> up = relu(level.bn(level.up(upsample2x(cur)), mode));
      cur = level.block(level.fuse(skips[std::size_t(l)], up));
    }
    return head_(cur);
  }

 private:
  struct DecoderLevel {
    Conv2d<T> up;
    BatchNorm2d<T> bn;
    BConvLstmFusion<T> fuse;
    ConvBlock<T> block;
  };

  UNetConfig cfg_;
  std::vector<ConvBlock<T>> enc_;
  DenseBlock<T> mid_;
  std::vector<DecoderLevel> dec_;
  Conv2d<T> head_;
};

/// A chain of sub-networks with a sigmoid on the last sub-net's logits.
template <Real T>
class Network {
 public:
  Network(const ChainConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed), dropout_rng_(split_seed(seed, 0xD0)) {
    validate(cfg);
    Rng rng(seed);
    for (std::size_t k = 0; k < cfg.subnets.size(); ++k)
      subnets_.emplace_back(store_, "net." + std::to_string(k), cfg.subnets[k], rng);
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const ChainConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }
  std::size_t divisor() const { return cfg_.divisor(); }
  std::size_t in_channels() const { return std::size_t(cfg_.subnets.front().in_channels); }
  std::size_t out_channels() const { return std::size_t(cfg_.subnets.back().out_channels); }

  Var<T> logits(const Var<T>& x, Mode mode) {
    Var<T> out = subnets_.front().logits(x, mode, dropout_rng_);
    for (std::size_t k = 1; k < subnets_.size(); ++k) out = subnets_[k].logits(concat<T>({x, out}, 1), mode, dropout_rng_);
    return out;
  }

  /// Probabilities in (0, 1), shape (N, out_channels, H, W).
  Var<T> forward(const Var<T>& x, Mode mode) { return sigmoid(logits(x, mode)); }

  Tensor<T> predict(const Tensor<T>& x) { return forward(Var<T>::constant(x), Mode::infer).value(); }

  void reseed_dropout(std::uint64_t seed) { dropout_rng_ = Rng(seed); }

 private:
  ChainConfig cfg_;
  std::uint64_t seed_;
  ParamStore<T> store_;
  std::vector<UNet<T>> subnets_;
  Rng dropout_rng_;
};

template <Real T>
Network<T> build_bcdu(const UNetConfig& cfg, std::uint64_t seed = 0) {
  return Network<T>(ChainConfig{"bcdu", {cfg}}, seed);
}

template <Real T>
Network<T> build_chain(const ChainConfig& cfg, std::uint64_t seed = 0) {
  if (cfg.subnets.size() < 2) throw ConfigError("a chain needs at least two sub-nets");
  return Network<T>(cfg, seed);
}

// ---------------------------------------------------------------------------
// Census. Counts parameterized layers: every convolution (the two halves of a
// fusion projection count as one), every batch norm, and each ConvLSTM
// direction as one layer. Pooling, upsampling, activations, dropout and
// concatenation are not layers. Junctions add no layers.

template <Real T>
std::size_t census(const Network<T>& net) {
  return net.store().layers().size();
}

/// Census listing computed from the configuration alone, without allocating
/// parameters. Matches the listing a built Network records, layer for layer.
inline std::vector<LayerInfo> layer_listing(const ChainConfig& cfg) {
  validate(cfg);
  std::vector<LayerInfo> out;
  auto conv = [&](const std::string& name, std::size_t in, std::size_t o, std::size_t k, int level, bool bias = true) {
    out.push_back({name, "conv", k, level, o * in * k * k + (bias ? o : 0)});
  };
  for (std::size_t s = 0; s < cfg.subnets.size(); ++s) {
    const auto& c = cfg.subnets[s];
    const std::string prefix = "net." + std::to_string(s);
    std::size_t in = std::size_t(c.in_channels);
    for (int l = 0; l < c.levels; ++l) {
      const std::string name = prefix + ".enc" + std::to_string(l);
      conv(name + ".conv1", in, c.channels(l), 3, l);
      conv(name + ".conv2", c.channels(l), c.channels(l), 3, l);
      in = c.channels(l);
    }
    const std::size_t growth = c.channels(c.levels);
    for (int i = 0; i < c.d; ++i) {
      const std::string name = prefix + ".mid.stage" + std::to_string(i + 1);
      conv(name + ".conv1", in + std::size_t(i) * growth, growth, 3, c.levels);
      conv(name + ".conv2", growth, growth, 3, c.levels);
    }
    if (c.d > 1) conv(prefix + ".mid.transition", in + std::size_t(c.d) * growth, growth, 1, c.levels);
    for (int l = c.levels - 1; l >= 0; --l) {
      const std::string name = prefix + ".dec" + std::to_string(l);
      const std::size_t ch = c.channels(l);
      conv(name + ".upconv", c.channels(l + 1), ch, 3, l, false);
      out.push_back({name + ".bn", "batchnorm", 0, l, 2 * ch});
      for (const char* dir : {".fuse.lstm_fwd", ".fuse.lstm_bwd"})
        out.push_back({name + dir, "convlstm", 3, l, 4 * ch * (ch + ch) * 9 + 4 * ch});
      out.push_back({name + ".fuse.proj", "conv", 3, l, 2 * ch * ch * 9 + ch});
      conv(name + ".conv1", ch, ch, 3, l);
      conv(name + ".conv2", ch, ch, 3, l);
    }
    conv(prefix + ".head", c.channels(0), std::size_t(c.out_channels), 1, 0);
  }
  return out;
}

inline std::vector<LayerInfo> layer_listing(const UNetConfig& cfg) { return layer_listing(ChainConfig{"bcdu", {cfg}}); }

inline std::size_t census(const ChainConfig& cfg) { return layer_listing(cfg).size(); }
inline std::size_t census(const UNetConfig& cfg) { return layer_listing(cfg).size(); }

/// Closed form of the census for one sub-net: 2 per encoder level, 7 per
/// decoder level, 2d (+1 transition when d > 1) for the bottleneck, 1 head.
inline std::size_t census_formula(const UNetConfig& c) {
  return std::size_t(9 * c.levels + 2 * c.d + (c.d > 1 ? 1 : 0) + 1);
}

inline std::size_t parameter_count(const ChainConfig& cfg) {
  std::size_t n = 0;
  for (const auto& l : layer_listing(cfg)) n += l.params;
  return n;
}

/// Receptive field (in input pixels) of a sub-net along its deepest path:
/// every conv on that path adds (k-1)*2^level, each ConvLSTM direction pair
/// adds two sequential convolutions of its cell, each pooling step adds 2^l.
inline std::size_t receptive_field(const UNetConfig& cfg) {
  std::size_t rf = 1;
  for (const auto& l : layer_listing(cfg)) {
    const std::size_t jump = std::size_t(1) << l.level;
    if (l.kind == "conv") rf += (l.kernel - 1) * jump;
    if (l.kind == "convlstm" && l.name.ends_with("lstm_fwd")) rf += 2 * (l.kernel - 1) * jump;
  }
  rf += (std::size_t(1) << cfg.levels) - 1;
  return rf;
}

// ---------------------------------------------------------------------------
// Presets. Census under the convention above: BUSU-Net 108, LightBUSU-Net 43.
//   BUSU       Big-U (L=6, d=4, base 16) 64 + Small-U (L=4, d=3, base 64) 44
//   LightBUSU  Big-U (L=2, d=4, base 8)  28 + Small-U (L=1, d=2, base 8)  15
// Small-U of BUSU is the original BCDU-Net(d=3); LadderBCDU chains two of them.

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"busu", "lightbusu", "ladderbcdu", "bcdu_d1", "bcdu_d3"};
  return names;
}

inline ChainConfig preset(const std::string& name) {
  auto sub = [](int levels, int base, int d, int in) { return UNetConfig{levels, base, d, in, 1, 0.0}; };
  if (name == "busu") return {"busu", {sub(6, 16, 4, 1), sub(4, 64, 3, 2)}, Junction::input_and_logits, true};
  if (name == "lightbusu") return {"lightbusu", {sub(2, 8, 4, 1), sub(1, 8, 2, 2)}, Junction::input_and_logits, true};
  if (name == "ladderbcdu") return {"ladderbcdu", {sub(4, 64, 3, 1), sub(4, 64, 3, 2)}, Junction::input_and_logits, false};
  if (name == "bcdu_d1") return {"bcdu_d1", {sub(4, 64, 1, 1)}};
  if (name == "bcdu_d3") return {"bcdu_d3", {sub(4, 64, 3, 1)}};
  std::string valid;
  for (const auto& n : preset_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown preset '" + name + "' (valid: " + valid + ")");
}

/// Copy of `cfg` with every sub-net's base width multiplied by num/den
/// (rounded, at least 1).
inline ChainConfig rescale_widths(ChainConfig cfg, int num, int den) {
  for (auto& s : cfg.subnets) s.base_channels = std::max(1, (s.base_channels * num + den / 2) / den);
  return cfg;
}

// ---------------------------------------------------------------------------
// Flat key-value config file:
//
//   name = mynet
//   preset = lightbusu          # optional starting point
//   [subnet.0]
//   levels = 2
//   base_channels = 8
//   d = 4
//   in_channels = 1
//   out_channels = 1
//   [subnet.1]
//   junction = input_and_logits
//   ...
//   [train]
//   epochs = 40
//
// Keys not set keep the preset (or default) value. Lines starting with '#'
// are comments.

struct ConfigFile {
  std::map<std::string, std::string> global;
  std::map<int, std::map<std::string, std::string>> subnets;
  std::map<std::string, std::string> train;
};

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline ConfigFile parse_config(std::istream& is) {
  ConfigFile out;
  std::map<std::string, std::string>* section = &out.global;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": malformed section");
      const std::string name = trim(line.substr(1, line.size() - 2));
      if (name == "train") {
        section = &out.train;
      } else if (name.starts_with("subnet.")) {
        int k = -1;
        try {
          k = std::stoi(name.substr(7));
        } catch (...) {
        }
        if (k < 0) throw ConfigError("config line " + std::to_string(lineno) + ": bad sub-net index");
        section = &out.subnets[k];
      } else {
        throw ConfigError("config line " + std::to_string(lineno) + ": unknown section [" + name + "]");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    (*section)[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

inline ConfigFile load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  return parse_config(is);
}

namespace detail {

inline int to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos == v.size()) return r;
  } catch (...) {
  }
  throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
}

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos == v.size()) return r;
  } catch (...) {
  }
  throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
}

}  // namespace detail

/// Applies the architecture part of a config file on top of `base`.
inline ChainConfig apply_config(ChainConfig base, const ConfigFile& file) {
  for (const auto& [key, value] : file.global) {
    if (key == "name") {
      base.name = value;
    } else if (key == "preset") {
      // Consumed by resolve_architecture.
    } else if (key == "junction") {
      base.junction = parse_junction(value);
    } else if (key == "decreasing_depth") {
      base.decreasing_depth = value == "true" || value == "1";
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  for (const auto& [k, keys] : file.subnets) {
    if (std::size_t(k) > base.subnets.size())
      throw ConfigError("sub-net sections must be contiguous; missing [subnet." + std::to_string(base.subnets.size()) + "]");
    if (std::size_t(k) == base.subnets.size()) {
      UNetConfig fresh;
      if (k > 0) fresh.in_channels = base.subnets[0].in_channels + base.subnets[std::size_t(k) - 1].out_channels;
      base.subnets.push_back(fresh);
    }
    auto& s = base.subnets[std::size_t(k)];
    for (const auto& [key, value] : keys) {
      if (key == "levels") s.levels = detail::to_int(key, value);
      else if (key == "base_channels") s.base_channels = detail::to_int(key, value);
      else if (key == "d") s.d = detail::to_int(key, value);
      else if (key == "in_channels") s.in_channels = detail::to_int(key, value);
      else if (key == "out_channels") s.out_channels = detail::to_int(key, value);
      else if (key == "dropout") s.dropout = detail::to_double(key, value);
      else if (key == "junction") base.junction = parse_junction(value);
      else throw ConfigError("unknown sub-net key '" + key + "'");
    }
  }
  validate(base);
  return base;
}

/// Preset (if any) overlaid with the config file (if any).
inline ChainConfig resolve_architecture(const std::optional<std::string>& preset_name, const ConfigFile* file) {
  std::optional<std::string> name = preset_name;
  if (!name && file) {
    if (auto it = file->global.find("preset"); it != file->global.end()) name = it->second;
  }
  ChainConfig base = name ? preset(*name) : ChainConfig{};
  if (!file) {
    if (!name) throw ConfigError("either a preset or a config file is required");
    return base;
  }
  return apply_config(std::move(base), *file);
}

inline std::string format_config(const ChainConfig& cfg) {
  std::ostringstream os;
  os << "name = " << cfg.name << "\n";
  os << "decreasing_depth = " << (cfg.decreasing_depth ? "true" : "false") << "\n";
  for (std::size_t k = 0; k < cfg.subnets.size(); ++k) {
    const auto& s = cfg.subnets[k];
    os << "[subnet." << k << "]\n"
       << "levels = " << s.levels << "\n"
       << "base_channels = " << s.base_channels << "\n"
       << "d = " << s.d << "\n"
       << "in_channels = " << s.in_channels << "\n"
       << "out_channels = " << s.out_channels << "\n"
       << "dropout = " << s.dropout << "\n";
    if (k > 0) os << "junction = " << junction_name(cfg.junction) << "\n";
  }
  return os.str();
}

}  // namespace busu
