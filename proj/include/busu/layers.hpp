#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "busu/ops.hpp"

namespace busu {

/// One parameterized layer in the census listing.
struct LayerInfo {
  std::string name;
  std::string kind;      // conv, batchnorm, convlstm
  std::size_t kernel{};  // spatial kernel extent (0 for batchnorm)
  int level{};           // resolution level; one pixel spans 2^level input pixels
  std::size_t params{};
};

/// Ordered registry of named parameters, batch-norm running statistics and
/// the layer census. Parameter order is construction order and is the order
/// used by checkpoints.
template <Real T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
  };
  struct StatsEntry {
    std::string name;
    std::shared_ptr<RunningStats<T>> stats;
  };

  Var<T> add(std::string name, Tensor<T> init) {
    auto v = Var<T>::parameter(std::move(init));
    params_.push_back({std::move(name), v});
    return v;
  }

  std::shared_ptr<RunningStats<T>> add_stats(std::string name, std::size_t channels) {
    auto s = std::make_shared<RunningStats<T>>(channels);
    stats_.push_back({std::move(name), s});
    return s;
  }

  void add_layer(LayerInfo info) { layers_.push_back(std::move(info)); }

  const std::vector<Entry>& params() const noexcept { return params_; }
  const std::vector<StatsEntry>& stats() const noexcept { return stats_; }
  const std::vector<LayerInfo>& layers() const noexcept { return layers_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.var.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

 private:
  std::vector<Entry> params_;
  std::vector<StatsEntry> stats_;
  std::vector<LayerInfo> layers_;
};

namespace init {

template <Real T>
Tensor<T> he_normal(Shape shape, Rng& rng) {
  const double fan_in = double(shape[1] * shape[2] * shape[3]);
  const double sd = std::sqrt(2.0 / fan_in);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = T(rng.normal(0.0, sd));
  return t;
}

template <Real T>
Tensor<T> xavier_uniform(Shape shape, Rng& rng) {
  const double rf = double(shape[2] * shape[3]);
  const double limit = std::sqrt(6.0 / (double(shape[1]) * rf + double(shape[0]) * rf));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = T(rng.uniform(-limit, limit));
  return t;
}

}  // namespace init

template <Real T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, std::size_t k, int level,
         Rng& rng, bool with_bias = true)
      : kernel_(store.add(name + ".kernel", init::he_normal<T>({out, in, k, k}, rng))) {
    if (with_bias) bias_ = store.add(name + ".bias", Tensor<T>({out}));
    store.add_layer({name, "conv", k, level, out * in * k * k + (with_bias ? out : 0)});
  }

  Var<T> operator()(const Var<T>& x) const { return conv2d(x, kernel_, bias_, Padding::same); }

  const Var<T>& kernel() const { return kernel_; }
  const Var<T>& bias() const { return bias_; }
  std::size_t in_channels() const { return kernel_.shape()[1]; }
  std::size_t out_channels() const { return kernel_.shape()[0]; }

 private:
  Var<T> kernel_, bias_;
};

/// Two 3x3 same-padded convolutions, each followed by ReLU.
template <Real T>
class ConvBlock {
 public:
  ConvBlock() = default;
  ConvBlock(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, int level, Rng& rng)
      : first_(store, name + ".conv1", in, out, 3, level, rng), second_(store, name + ".conv2", out, out, 3, level, rng) {}

  Var<T> operator()(const Var<T>& x) const {
    if (x.shape().size() != 4 || x.shape()[1] != first_.in_channels())
      throw ShapeError("conv block expects " + std::to_string(first_.in_channels()) + " input channels, got " +
                       to_string(x.shape()));
    return relu(second_(relu(first_(x))));
  }

  std::size_t in_channels() const { return first_.in_channels(); }
  std::size_t out_channels() const { return second_.out_channels(); }
  const Conv2d<T>& first() const { return first_; }
  const Conv2d<T>& second() const { return second_; }

 private:
  Conv2d<T> first_, second_;
};

/// Densely connected stack of `d` conv blocks. Stage i sees the channel
/// concatenation of the block input and every earlier stage output, so it has
/// in + (i-1)*growth input channels. For d > 1 a 1x1 transition maps the full
/// concatenation (in + d*growth channels) back to `growth`; for d == 1 the
/// block is a plain conv block.
template <Real T>
class DenseBlock {
 public:
  DenseBlock() = default;
  DenseBlock(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t growth, int d, int level,
             Rng& rng, double dropout = 0.0)
      : in_(in), growth_(growth), dropout_(dropout) {
    if (d < 1) throw ParameterError("dense block: d must be >= 1, got " + std::to_string(d));
    for (int i = 0; i < d; ++i)
      stages_.emplace_back(store, name + ".stage" + std::to_string(i + 1), in + std::size_t(i) * growth, growth, level,
                           rng);
    if (d > 1) transition_ = Conv2d<T>(store, name + ".transition", concat_channels(), growth, 1, level, rng);
  }

  int depth() const { return int(stages_.size()); }
  std::size_t stage_input_channels(int i) const { return stages_.at(std::size_t(i)).in_channels(); }
  std::size_t concat_channels() const { return in_ + stages_.size() * growth_; }
  std::size_t out_channels() const { return growth_; }

  /// Concatenation of the block input and all stage outputs.
  Var<T> features(const Var<T>& x, Mode mode, Rng& rng) const {
    std::vector<Var<T>> feats{x};
    for (const auto& stage : stages_) {
      Var<T> in = feats.size() == 1 ? x : concat(feats, 1);
      feats.push_back(dropout(stage(in), dropout_, mode, rng));
    }
    return concat(feats, 1);
  }

  Var<T> forward(const Var<T>& x, Mode mode, Rng& rng) const {
    if (stages_.size() == 1) return dropout(stages_[0](x), dropout_, mode, rng);
    return transition_(features(x, mode, rng));
  }

  const std::vector<ConvBlock<T>>& stages() const { return stages_; }

 private:
  std::size_t in_ = 0, growth_ = 0;
  double dropout_ = 0.0;
  std::vector<ConvBlock<T>> stages_;
  Conv2d<T> transition_;
};

template <Real T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParamStore<T>& store, const std::string& name, std::size_t channels, int level)
      : gamma_(store.add(name + ".gamma", Tensor<T>({channels}, T(1)))),
        beta_(store.add(name + ".beta", Tensor<T>({channels}))),
        stats_(store.add_stats(name, channels)) {
    store.add_layer({name, "batchnorm", 0, level, 2 * channels});
  }

  Var<T> operator()(const Var<T>& x, Mode mode) const { return batchnorm(x, gamma_, beta_, *stats_, mode); }

  RunningStats<T>& stats() const { return *stats_; }

 private:
  Var<T> gamma_, beta_;
  std::shared_ptr<RunningStats<T>> stats_;
};

template <Real T>
struct LstmState {
  Var<T> hidden;
  Var<T> cell;
};

/// Convolutional LSTM cell without peephole terms. Gate order is
/// input, forget, candidate, output:
///   i = s(Wxi*x + Whi*H + bi)   f = s(Wxf*x + Whf*H + bf)
///   g = tanh(Wxc*x + Whc*H + bc)  o = s(Wxo*x + Who*H + bo)
///   C' = f.C + i.g               H' = o.tanh(C')
/// where * is a same-padded convolution.
template <Real T>
class ConvLstmCell {
 public:
  static constexpr std::array<const char*, 4> kGates{"i", "f", "c", "o"};

  ConvLstmCell() = default;
  ConvLstmCell(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden, int level, Rng& rng,
               std::size_t k = 3)
      : in_(in), hidden_(hidden) {
    for (std::size_t g = 0; g < 4; ++g)
      wx_[g] = store.add(name + ".wx_" + kGates[g], init::xavier_uniform<T>({hidden, in, k, k}, rng));
    for (std::size_t g = 0; g < 4; ++g)
      wh_[g] = store.add(name + ".wh_" + kGates[g], init::xavier_uniform<T>({hidden, hidden, k, k}, rng));
    for (std::size_t g = 0; g < 4; ++g)
      b_[g] = store.add(name + ".b_" + kGates[g], Tensor<T>({hidden}, g == 1 ? T(1) : T(0)));
    store.add_layer({name, "convlstm", k, level, 4 * hidden * (in + hidden) * k * k + 4 * hidden});
  }

  std::size_t in_channels() const { return in_; }
  std::size_t hidden_channels() const { return hidden_; }

  std::array<Var<T>, 4>& input_kernels() { return wx_; }
  std::array<Var<T>, 4>& hidden_kernels() { return wh_; }
  std::array<Var<T>, 4>& biases() { return b_; }

  /// One timestep. A missing previous state means zero hidden and cell state.
  LstmState<T> step(const Var<T>& x, const std::optional<LstmState<T>>& prev = std::nullopt) const {
    const auto& xs = x.shape();
    if (xs.size() != 4 || xs[1] != in_)
      throw ShapeError("convlstm: expected " + std::to_string(in_) + " input channels, got " + to_string(xs));
    if (prev) {
      const auto& hs = prev->hidden.shape();
      const auto& cs = prev->cell.shape();
      if (hs != cs || hs.size() != 4 || hs[0] != xs[0] || hs[1] != hidden_ || hs[2] != xs[2] || hs[3] != xs[3])
        throw ShapeError("convlstm: state shape " + to_string(hs) + " incompatible with input " + to_string(xs));
    }
    Var<T> z = conv2d(x, concat<T>({wx_[0], wx_[1], wx_[2], wx_[3]}, 0), concat<T>({b_[0], b_[1], b_[2], b_[3]}, 0));
    if (prev) z = add(z, conv2d(prev->hidden, concat<T>({wh_[0], wh_[1], wh_[2], wh_[3]}, 0)));
    const std::size_t h = hidden_;
    Var<T> i = sigmoid(slice(z, 1, 0, h));
    Var<T> f = sigmoid(slice(z, 1, h, 2 * h));
    Var<T> g = busu::tanh(slice(z, 1, 2 * h, 3 * h));
    Var<T> o = sigmoid(slice(z, 1, 3 * h, 4 * h));
    Var<T> c = mul(i, g);
    if (prev) c = add(mul(f, prev->cell), c);
    return {mul(o, busu::tanh(c)), c};
  }

 private:
  std::size_t in_ = 0, hidden_ = 0;
  std::array<Var<T>, 4> wx_, wh_, b_;
};

/// Bi-directional ConvLSTM fusion of an encoder skip map with the matching
/// upsampled decoder map. The forward cell reads (skip, up), the backward cell
/// reads (up, skip). Final hidden states are combined by a 3x3 projection over
/// their channel concatenation, stored as one kernel half per direction:
///   out = P_fwd * H_fwd + P_bwd * H_bwd + b
template <Real T>
class BConvLstmFusion {
 public:
  BConvLstmFusion() = default;
  BConvLstmFusion(ParamStore<T>& store, const std::string& name, std::size_t channels, int level, Rng& rng)
      : channels_(channels),
        fwd_(store, name + ".lstm_fwd", channels, channels, level, rng),
        bwd_(store, name + ".lstm_bwd", channels, channels, level, rng) {
    proj_fwd_ = store.add(name + ".proj.kernel_fwd", init::he_normal<T>({channels, 2 * channels, 3, 3}, rng));
    // He fan-in uses the full concatenated width; split the draw into halves.
    Tensor<T> full = proj_fwd_.value();
    Tensor<T> a({channels, channels, 3, 3}), b({channels, channels, 3, 3});
    const std::size_t k2 = 9;
    for (std::size_t o = 0; o < channels; ++o)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t t = 0; t < k2; ++t) {
          a[(o * channels + c) * k2 + t] = full[(o * 2 * channels + c) * k2 + t];
          b[(o * channels + c) * k2 + t] = full[(o * 2 * channels + channels + c) * k2 + t];
        }
    proj_fwd_.mutable_value() = std::move(a);
    proj_bwd_ = store.add(name + ".proj.kernel_bwd", std::move(b));
    proj_bias_ = store.add(name + ".proj.bias", Tensor<T>({channels}));
    store.add_layer({name + ".proj", "conv", 3, level, 2 * channels * channels * 9 + channels});
  }

  Var<T> operator()(const Var<T>& skip, const Var<T>& up) const {
    const auto& s = skip.shape();
    const auto& u = up.shape();
    if (s.size() != 4 || u.size() != 4 || s[0] != u[0] || s[2] != u[2] || s[3] != u[3])
      throw ShapeError("bconvlstm: skip " + to_string(s) + " and up " + to_string(u) + " differ spatially");
    if (s[1] != channels_ || u[1] != channels_)
      throw ShapeError("bconvlstm: expected " + std::to_string(channels_) + " channels on both inputs");
    Var<T> hf = fwd_.step(up, fwd_.step(skip)).hidden;
    Var<T> hb = bwd_.step(skip, bwd_.step(up)).hidden;
    return bias_add(add(conv2d(hf, proj_fwd_), conv2d(hb, proj_bwd_)), proj_bias_);
  }

  /// Same parameters with the two directions exchanged.
  BConvLstmFusion swapped_directions() const {
    BConvLstmFusion s = *this;
    std::swap(s.fwd_, s.bwd_);
    std::swap(s.proj_fwd_, s.proj_bwd_);
    return s;
  }

  /// The projection as a single kernel over concat(H_fwd, H_bwd).
  Var<T> projection_kernel() const { return concat<T>({proj_fwd_, proj_bwd_}, 1); }
  const Var<T>& projection_bias() const { return proj_bias_; }
  const ConvLstmCell<T>& forward_cell() const { return fwd_; }
  const ConvLstmCell<T>& backward_cell() const { return bwd_; }
  std::size_t channels() const { return channels_; }

 private:
  std::size_t channels_ = 0;
  ConvLstmCell<T> fwd_, bwd_;
  Var<T> proj_fwd_, proj_bwd_, proj_bias_;
};

}  // namespace busu
