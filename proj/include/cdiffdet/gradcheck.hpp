#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cdiffdet/tensor.hpp"

namespace cdiffdet {

// Builds a scalar from the watched copies of the parameters. Must be a
// deterministic function of the parameter values.
using ScalarFn = std::function<Tensor(GradTape& tape, std::span<const Tensor> params)>;

struct GradCheckOptions {
  double eps = 1e-5;
  // 0 checks every coordinate; otherwise a seeded sample of at most this many
  // coordinates per parameter tensor.
  std::size_t max_coords_per_param = 0;
  std::uint64_t seed = 0;
  // How many times eps is divided by 10 when a perturbation crosses a kink
  // before the coordinate is skipped.
  int kink_retries = 2;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  // "<param index>:<flat index>" of the worst coordinate.
  std::string worst;
  double worst_ad = 0.0;
  double worst_fd = 0.0;
};

// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)
double gradient_rel_error(double ad, double fd);

// Compares reverse-mode gradients against central differences. Coordinates
// whose ±eps perturbation changes the branch pattern of a piecewise op are
// retried with a smaller step and skipped if they still straddle a kink.
// Throws OracleError when two evaluations at the same point disagree.
GradCheckResult finite_difference_check(const ScalarFn& f, const std::vector<Tensor>& params,
                                        const GradCheckOptions& opts = {});

// Reverse-mode gradients of f at params.
std::vector<Tensor> autodiff_gradients(const ScalarFn& f, const std::vector<Tensor>& params);

}  // namespace cdiffdet
