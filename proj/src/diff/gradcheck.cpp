#include "pt/diff/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace pt::diff {
namespace {

struct Probe {
  double value;
  std::uint64_t signature;
};

Probe probe(const Expr<double>& e, const Bindings<double>& b) {
  Graph<double> g(b);
  Var<double> root = e(g);
  return {g.value(root).item(), g.branch_signature()};
}

}  // namespace

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

GradCheckReport grad_check(const Expr<double>& e, const Bindings<double>& bindings, const GradCheckOptions& opts) {
  if (!(opts.step >= 1e-6 && opts.step <= 1e-4)) {
    throw std::invalid_argument("grad_check step must lie in [1e-6, 1e-4]");
  }
  std::vector<std::string> names = opts.leaves;
  if (names.empty()) {
    for (const auto& [name, _] : bindings) names.push_back(name);
  }

  GradCheckReport report;
  Graph<double> base(bindings);
  Var<double> root = e(base);
  if (base.value(root).size() != 1) throw NonScalarRootError("grad_check requires a scalar expression");
  if (base.at_kink()) {
    report.non_differentiable = true;
    report.note = "non-differentiable point, skipped";
    return report;
  }
  base.backward(root);
  const std::uint64_t base_sig = base.branch_signature();

  std::mt19937_64 rng(opts.seed);
  Bindings<double> work = bindings;
  for (const auto& name : names) {
    LeafCheck lc;
    lc.name = name;
    const Tensor<double> analytic = base.has_input(name) ? base.grad(base.named(name))
                                                         : Tensor<double>(bindings.at(name).rows(), bindings.at(name).cols());
    const std::size_t n = analytic.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (opts.max_coords_per_leaf > 0 && opts.max_coords_per_leaf < n) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_leaf);
      std::sort(coords.begin(), coords.end());
    }
    auto& x = work.at(name);
    for (std::size_t i : coords) {
      const double orig = x[i];
      x[i] = orig + opts.step;
      const Probe plus = probe(e, work);
      x[i] = orig - opts.step;
      const Probe minus = probe(e, work);
      x[i] = orig;
      if (plus.signature != base_sig || minus.signature != base_sig) {
        ++lc.skipped;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * opts.step);
      const double err = relative_error(analytic[i], numeric);
      lc.max_rel_error = std::max(lc.max_rel_error, err);
      ++lc.checked;
    }
    lc.passed = lc.max_rel_error <= opts.tolerance;
    report.max_rel_error = std::max(report.max_rel_error, lc.max_rel_error);
    report.passed = report.passed && lc.passed;
    report.leaves.push_back(std::move(lc));
  }
  return report;
}

}  // namespace pt::diff
