#pragma once

#include <functional>
#include <string>
#include <vector>

#include "busu/architectures.hpp"
#include "busu/gradcheck.hpp"

namespace busu {

/// One row of a gradcheck table: a named case checked over several seeds.
struct SuiteRow {
  std::string name;
  std::size_t trials = 0;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct SuiteOptions {
  double tolerance = 1e-4;
  std::size_t seeds = 20;
  GradcheckOptions check{.step = 1e-3, .kink_guard = true, .richardson = true};
};

namespace gc {

using D = double;

inline Tensor<D> randn(Shape s, Rng& rng, double sd = 1.0) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.data()) v = rng.normal(0.0, sd);
  return t;
}

inline Tensor<D> randu(Shape s, Rng& rng, double lo, double hi) {
  Tensor<D> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Moves parameters off exact zeros (fresh biases) so no check lands on a
// ReLU kink.
inline void jitter(const ParamStore<D>& store, Rng& rng, double sd = 0.05) {
  for (const auto& p : store.params()) {
    auto v = p.var;
    for (auto& x : v.mutable_value().data()) x += rng.normal(0.0, sd);
  }
}

// Scalar loss with random weights so every output element carries a distinct
// gradient.
inline Var<D> project(const Var<D>& out, const Tensor<D>& w) { return sum(mul(out, Var<D>::constant(w))); }

struct Case {
  std::string name;
  // Builds (loss_fn, params) for one seed.
  std::function<std::pair<std::function<Var<D>()>, std::vector<NamedParam>>(Rng&)> make;
};

inline SuiteRow run_case(const Case& c, const SuiteOptions& opt) {
  SuiteRow row{c.name};
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    Rng rng(split_seed(0x6C0FFEE, s));
    auto [fn, params] = c.make(rng);
    GradcheckOptions go = opt.check;
    go.seed = s;
    const auto rep = gradcheck(fn, params, opt.tolerance, go);
    ++row.trials;
    for (const auto& p : rep.params) row.checked += p.checked;
    row.max_rel_error = std::max(row.max_rel_error, rep.max_rel_error());
    row.passed = row.passed && rep.passed();
  }
  return row;
}

// Unary op on one random input of the given shape.
inline Case unary_case(std::string name, Shape shape, std::function<Var<D>(const Var<D>&)> op, double lo = -2.0,
                       double hi = 2.0) {
  return {name, [=](Rng& rng) {
            auto x = Var<D>::parameter(randu(shape, rng, lo, hi));
            auto probe = op(Var<D>::constant(x.value()));
            Tensor<D> w = randn(probe.shape(), rng);
            return std::pair{std::function<Var<D>()>([=] { return project(op(x), w); }),
                             std::vector<NamedParam>{{"x", x}}};
          }};
}

inline Case conv_case(std::string name, Shape xs, Shape ks, Padding pad, std::size_t stride) {
  return {name, [=](Rng& rng) {
            auto x = Var<D>::parameter(randn(xs, rng));
            auto k = Var<D>::parameter(randn(ks, rng, 0.5));
            auto b = Var<D>::parameter(randn({ks[0]}, rng));
            auto probe = conv2d(Var<D>::constant(x.value()), Var<D>::constant(k.value()), Var<D>{}, pad, stride);
            Tensor<D> w = randn(probe.shape(), rng);
            return std::pair{std::function<Var<D>()>([=] { return project(conv2d(x, k, b, pad, stride), w); }),
                             std::vector<NamedParam>{{"x", x}, {"kernel", k}, {"bias", b}}};
          }};
}

inline Case binary_case(std::string name, Shape as, Shape bs, std::function<Var<D>(const Var<D>&, const Var<D>&)> op) {
  return {name, [=](Rng& rng) {
            auto a = Var<D>::parameter(randn(as, rng));
            auto b = Var<D>::parameter(randn(bs, rng));
            auto probe = op(Var<D>::constant(a.value()), Var<D>::constant(b.value()));
            Tensor<D> w = randn(probe.shape(), rng);
            return std::pair{std::function<Var<D>()>([=] { return project(op(a, b), w); }),
                             std::vector<NamedParam>{{"a", a}, {"b", b}}};
          }};
}

inline std::vector<Case> op_cases() {
  std::vector<Case> cases;
  cases.push_back(conv_case("conv2d_3x3_same", {2, 2, 5, 5}, {3, 2, 3, 3}, Padding::same, 1));
  cases.push_back(conv_case("conv2d_3x3_valid", {2, 2, 5, 5}, {3, 2, 3, 3}, Padding::valid, 1));
  cases.push_back(conv_case("conv2d_stride2", {1, 2, 6, 6}, {2, 2, 3, 3}, Padding::same, 2));
  cases.push_back(conv_case("conv2d_1x1", {2, 3, 4, 4}, {2, 3, 1, 1}, Padding::same, 1));
  cases.push_back(unary_case("maxpool2d", {2, 2, 4, 6}, [](const Var<D>& x) { return maxpool2d(x); }));
  cases.push_back(unary_case("upsample2x", {2, 2, 3, 3}, [](const Var<D>& x) { return upsample2x(x); }));
  cases.push_back(unary_case("relu", {2, 3, 4, 4}, [](const Var<D>& x) { return relu(x); }));
  cases.push_back(unary_case("sigmoid", {2, 3, 4, 4}, [](const Var<D>& x) { return sigmoid(x); }));
  cases.push_back(unary_case("tanh", {2, 3, 4, 4}, [](const Var<D>& x) { return busu::tanh(x); }));
  cases.push_back(unary_case("scale", {2, 3, 4}, [](const Var<D>& x) { return scale(x, -1.7); }));
  cases.push_back(unary_case("slice", {2, 5, 3, 3}, [](const Var<D>& x) { return slice(x, 1, 1, 4); }));
  cases.push_back(unary_case("sum", {2, 3, 4}, [](const Var<D>& x) { return sum(x); }));
  cases.push_back(unary_case("mean", {2, 3, 4}, [](const Var<D>& x) { return mean(x); }));
  cases.push_back(unary_case("dropout_train", {2, 3, 4, 4}, [](const Var<D>& x) {
    Rng r(99);
    return dropout(x, 0.3, Mode::train, r);
  }));
  cases.push_back(binary_case("add", {2, 3, 4, 4}, {2, 3, 4, 4}, [](auto& a, auto& b) { return add(a, b); }));
  cases.push_back(binary_case("mul", {2, 3, 4, 4}, {2, 3, 4, 4}, [](auto& a, auto& b) { return mul(a, b); }));
  cases.push_back(binary_case("bias_add", {2, 3, 4, 4}, {3}, [](auto& a, auto& b) { return bias_add(a, b); }));
  cases.push_back(binary_case("concat_channels", {2, 3, 4, 4}, {2, 2, 4, 4},
                              [](auto& a, auto& b) { return concat<D>({a, b}, 1); }));
  cases.push_back(binary_case("concat_batch", {1, 3, 2, 2}, {2, 3, 2, 2},
                              [](auto& a, auto& b) { return concat<D>({a, b}, 0); }));
  for (Mode mode : {Mode::train, Mode::infer}) {
    cases.push_back({mode == Mode::train ? "batchnorm_train" : "batchnorm_infer", [mode](Rng& rng) {
                       auto x = Var<D>::parameter(randn({3, 2, 3, 3}, rng));
                       auto g = Var<D>::parameter(randu({2}, rng, 0.5, 1.5));
                       auto b = Var<D>::parameter(randn({2}, rng));
                       RunningStats<D> stats(2);
                       stats.mean = randn({2}, rng);
                       stats.var = randu({2}, rng, 0.5, 2.0);
                       Tensor<D> w = randn({3, 2, 3, 3}, rng);
                       auto fn = [=]() mutable { return project(batchnorm(x, g, b, stats, mode), w); };
                       return std::pair{std::function<Var<D>()>(fn),
                                        std::vector<NamedParam>{{"x", x}, {"gamma", g}, {"beta", b}}};
                     }});
  }
  cases.push_back({"bce_loss", [](Rng& rng) {
                     auto p = Var<D>::parameter(randu({2, 1, 4, 4}, rng, 0.05, 0.95));
                     Tensor<D> t({2, 1, 4, 4});
                     for (auto& v : t.data()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
                     return std::pair{std::function<Var<D>()>([=] { return bce_loss(p, Var<D>::constant(t)); }),
                                      std::vector<NamedParam>{{"pred", p}}};
                   }});
  cases.push_back({"conv_relu_pool_bce", [](Rng& rng) {
                     auto x = Var<D>::parameter(randn({2, 1, 4, 4}, rng));
                     auto k = Var<D>::parameter(randn({1, 1, 3, 3}, rng, 0.5));
                     Tensor<D> t({2, 1, 2, 2});
                     for (auto& v : t.data()) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
                     auto fn = [=] { return bce_loss(sigmoid(maxpool2d(relu(conv2d(x, k)))), Var<D>::constant(t)); };
                     return std::pair{std::function<Var<D>()>(fn), std::vector<NamedParam>{{"x", x}, {"kernel", k}}};
                   }});
  return cases;
}

// Layer in isolation: parameters from its store plus the input.
template <class Build>
Case layer_case(std::string name, Shape xs, Build build) {
  return {name, [=](Rng& rng) {
            auto store = std::make_shared<ParamStore<D>>();
            auto fwd = build(*store, rng);
            jitter(*store, rng);
            auto x = Var<D>::parameter(randn(xs, rng));
            auto probe = fwd(Var<D>::constant(x.value()));
            Tensor<D> w = randn(probe.shape(), rng);
            std::vector<NamedParam> params{{"input", x}};
            for (const auto& p : store->params()) params.push_back({p.name, p.var});
            return std::pair{std::function<Var<D>()>([=] {
                               (void)store;
                               return project(fwd(x), w);
                             }),
                             params};
          }};
}

inline std::vector<Case> layer_cases() {
  using F = std::function<Var<D>(const Var<D>&)>;
  std::vector<Case> cases;
  cases.push_back(layer_case("conv2d", {2, 2, 5, 5}, [](ParamStore<D>& s, Rng& r) -> F {
    Conv2d<D> c(s, "conv", 2, 3, 3, 0, r);
    return [c](const Var<D>& x) { return c(x); };
  }));
  cases.push_back(layer_case("conv_block", {1, 2, 6, 6}, [](ParamStore<D>& s, Rng& r) -> F {
    ConvBlock<D> c(s, "block", 2, 3, 0, r);
    return [c](const Var<D>& x) { return c(x); };
  }));
  for (int d : {1, 3}) {
    cases.push_back(layer_case("dense_block_d" + std::to_string(d), {1, 2, 4, 4}, [d](ParamStore<D>& s, Rng& r) -> F {
      DenseBlock<D> b(s, "dense", 2, 2, d, 0, r);
      return [b](const Var<D>& x) {
        Rng unused(0);
        return b.forward(x, Mode::train, unused);
      };
    }));
  }
  cases.push_back(layer_case("batchnorm2d", {3, 2, 3, 3}, [](ParamStore<D>& s, Rng& r) -> F {
    BatchNorm2d<D> bn(s, "bn", 2, 0);
    auto g = s.params()[0].var;
    g.mutable_value() = randu({2}, r, 0.5, 1.5);
    auto b = s.params()[1].var;
    b.mutable_value() = randn({2}, r);
    return [bn](const Var<D>& x) { return bn(x, Mode::train); };
  }));
  cases.push_back(layer_case("convlstm_zero_state", {1, 2, 4, 4}, [](ParamStore<D>& s, Rng& r) -> F {
    ConvLstmCell<D> c(s, "lstm", 2, 2, 0, r);
    return [c](const Var<D>& x) { return c.step(x).hidden; };
  }));
  cases.push_back(layer_case("convlstm_two_steps", {1, 2, 4, 4}, [](ParamStore<D>& s, Rng& r) -> F {
    ConvLstmCell<D> c(s, "lstm", 2, 2, 0, r);
    auto x0 = Var<D>::constant(randn({1, 2, 4, 4}, r));
    return [c, x0](const Var<D>& x) {
      auto st = c.step(x, c.step(x0));
      return add(st.hidden, st.cell);
    };
  }));
  cases.push_back(layer_case("bconvlstm_fusion", {1, 2, 4, 4}, [](ParamStore<D>& s, Rng& r) -> F {
    BConvLstmFusion<D> f(s, "fuse", 2, 0, r);
    auto up = Var<D>::constant(randn({1, 2, 4, 4}, r));
    return [f, up](const Var<D>& skip) { return f(skip, up); };
  }));
  return cases;
}

}  // namespace gc

inline std::vector<SuiteRow> run_op_suite(const SuiteOptions& opt = {}) {
  std::vector<SuiteRow> rows;
  for (const auto& c : gc::op_cases()) rows.push_back(gc::run_case(c, opt));
  return rows;
}

inline std::vector<SuiteRow> run_layer_suite(const SuiteOptions& opt = {}) {
  std::vector<SuiteRow> rows;
  for (const auto& c : gc::layer_cases()) rows.push_back(gc::run_case(c, opt));
  return rows;
}

/// Whole-network check on a jittered net, BCE against a random target.
/// Samples `max_elements` entries per parameter; step 1e-3 with Richardson
/// extrapolation and the kink guard.
inline std::vector<SuiteRow> run_net_suite(const ChainConfig& cfg, std::size_t size = 8, double tolerance = 1e-3,
                                           std::size_t max_elements = 8, std::uint64_t seed = 0, double step = 1e-3) {
  Network<double> net(cfg, seed);
  Rng rng(split_seed(seed, 0x6C));
  gc::jitter(net.store(), rng);
  auto x = Var<double>::parameter(gc::randu({1, std::size_t(cfg.subnets.front().in_channels), size, size}, rng, 0, 1));
  Tensor<double> target({1, std::size_t(cfg.subnets.back().out_channels), size, size});
  for (auto& v : target.data()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  std::vector<NamedParam> params{{"input", x}};
  for (const auto& p : net.store().params()) params.push_back({p.name, p.var});
  auto fn = [&] { return bce_loss(net.forward(x, Mode::train), Var<double>::constant(target)); };
  GradcheckOptions go;
  go.max_elements = max_elements;
  go.seed = seed;
  go.step = step;
  go.kink_guard = true;
  go.richardson = true;
  const auto rep = gradcheck(fn, params, tolerance, go);
  std::vector<SuiteRow> rows;
  for (const auto& p : rep.params) rows.push_back({p.name, 1, p.checked, p.max_rel_error, p.passed});
  return rows;
}

inline bool all_passed(const std::vector<SuiteRow>& rows) {
  return std::all_of(rows.begin(), rows.end(), [](const SuiteRow& r) { return r.passed; });
}

inline void print_suite(std::ostream& os, const std::vector<SuiteRow>& rows, double tolerance) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-44s %6s %8s %12s  %s\n", "case", "trials", "checked", "max_rel_err", "result");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-44s %6zu %8zu %12.3e  %s\n", r.name.c_str(), r.trials, r.checked,
                  r.max_rel_error, r.passed ? "PASS" : "FAIL");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "tolerance %.1e: %s\n", tolerance, all_passed(rows) ? "all passed" : "FAILURES");
  os << buf;
}

}  // namespace busu
