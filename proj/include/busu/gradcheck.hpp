#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "busu/autodiff.hpp"
#include "busu/ops.hpp"
#include "busu/rng.hpp"

namespace busu {

struct NamedParam {
  std::string name;
  Var<double> var;
};

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<ParamCheck> params;
  double tolerance = 0.0;

  bool passed() const {
    return std::all_of(params.begin(), params.end(), [](const ParamCheck& p) { return p.passed; });
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& p : params) m = std::max(m, p.max_rel_error);
    return m;
  }
};

struct GradcheckOptions {
  double step = 1e-6;
  // Elements checked per parameter; 0 checks every element. Sampled elements
  // are drawn with `seed`.
  std::size_t max_elements = 0;
  std::uint64_t seed = 0;
  // Accept the central difference at h only when both perturbed passes take
  // the same branches as the unperturbed one; otherwise a kink lies inside
  // the stencil and h shrinks tenfold, at most `refinements` times.
  bool kink_guard = false;
  int refinements = 5;
  // Combine central differences at h and h/2 as (4 D(h/2) - D(h)) / 3,
  // cancelling the h^2 truncation term.
  bool richardson = false;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Compares reverse-mode gradients of a scalar loss with central finite
/// differences. `loss_fn` must rebuild the graph from the current parameter
/// values on every call and be deterministic.
inline GradcheckReport gradcheck(const std::function<Var<double>()>& loss_fn, std::vector<NamedParam> params,
                                 double tolerance, const GradcheckOptions& opt = {}) {
  for (auto& p : params) p.var.zero_grad();
  std::uint64_t base = 0;
  {
    BranchTrace trace;
    BranchTrace::Scope scope(trace);
    backward(loss_fn());
    base = trace.digest();
  }

  GradcheckReport report;
  report.tolerance = tolerance;
  Rng rng(opt.seed);
  for (auto& p : params) {
    ParamCheck check{p.name};
    auto& value = p.var.mutable_value();
    const Tensor<double> analytic = p.var.grad();
    std::vector<std::size_t> indices(value.size());
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    if (opt.max_elements && indices.size() > opt.max_elements) {
      rng.shuffle(indices.begin(), indices.end());
      indices.resize(opt.max_elements);
      std::sort(indices.begin(), indices.end());
    }
    // Returns the central difference and whether both sides kept the
    // unperturbed branch trace.
    auto central_once = [&](std::size_t i, double h) {
      const double saved = value[i];
      BranchTrace up_trace, down_trace;
      value[i] = saved + h;
      double up, down;
      {
        BranchTrace::Scope scope(up_trace);
        up = loss_fn().value()[0];
      }
      value[i] = saved - h;
      {
        BranchTrace::Scope scope(down_trace);
        down = loss_fn().value()[0];
      }
      value[i] = saved;
      const bool smooth = up_trace.digest() == base && down_trace.digest() == base;
      return std::pair{(up - down) / (2.0 * h), smooth};
    };
    auto central = [&](std::size_t i, double h) {
      auto coarse = central_once(i, h);
      if (!opt.richardson) return coarse;
      auto fine = central_once(i, h / 2.0);
      return std::pair{(4.0 * fine.first - coarse.first) / 3.0, coarse.second && fine.second};
    };
    for (std::size_t i : indices) {
      double h = opt.step;
      auto [numeric, smooth] = central(i, h);
      for (int r = 0; opt.kink_guard && !smooth && r < opt.refinements; ++r) {
        h /= 10.0;
        std::tie(numeric, smooth) = central(i, h);
      }
      check.max_rel_error = std::max(check.max_rel_error, relative_error(analytic[i], numeric));
      ++check.checked;
    }
    check.passed = check.max_rel_error <= tolerance;
    report.params.push_back(std::move(check));
  }
  return report;
}

}  // namespace busu
