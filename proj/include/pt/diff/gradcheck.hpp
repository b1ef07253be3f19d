#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pt/diff/graph.hpp"

namespace pt::diff {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates probed per leaf; 0 probes all of them.
  std::size_t max_coords_per_leaf = 0;
  std::uint64_t seed = 0;
  /// Leaves to check; empty means every binding.
  std::vector<std::string> leaves;
};

struct LeafCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose +/-h probes landed on a different piece of a piecewise op.
  std::size_t skipped = 0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<LeafCheck> leaves;
  double max_rel_error = 0.0;
  bool passed = true;
  /// The base point sits exactly on a kink; nothing was compared.
  bool non_differentiable = false;
  std::string note;
};

/// |a - n| / max(1, |a|, |n|)
double relative_error(double analytic, double numeric);

/// Central-difference check of an expression's analytic gradient. Always in
/// double precision.
GradCheckReport grad_check(const Expr<double>& e, const Bindings<double>& bindings, const GradCheckOptions& opts = {});

}  // namespace pt::diff
