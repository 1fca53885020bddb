#pragma once

#include "vlkd/common.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace vlkd {

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-5);

/// Perturbs every entry of `x` by +-step, evaluates `f` and compares the
/// central difference with `analytic`. `x` is restored. Returns the largest
/// relative error.
double check_gradient(Matrix& x, const std::function<double()>& f, const Matrix& analytic, double step = 1e-5);
double check_gradient(Vector& x, const std::function<double()>& f, const Vector& analytic, double step = 1e-5);

struct GradcheckOptions {
  int instances = 20;
  std::uint64_t seed = 0;
  double step = 1e-5;
  // Hinge points whose argument lies within this distance of a kink are redrawn.
  double kink_margin = 1e-3;
  bool include_encoder = true;
};

struct GradcheckReport {
  std::string loss;
  double max_rel_err = 0.0;
  int instances = 0;
  int skipped = 0;
};

/// Finite-difference suite over every loss (and the encoder backward pass).
std::vector<GradcheckReport> run_gradcheck_suite(const GradcheckOptions& opts = {});

}  // namespace vlkd
