#include "cdiffdet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cdiffdet/errors.hpp"

namespace cdiffdet {

namespace {

struct Eval {
  double value;
  std::uint64_t signature;
};

Eval evaluate(const ScalarFn& f, const std::vector<Tensor>& params) {
  BranchRecorder rec;
  GradTape tape;
  std::vector<Tensor> watched;
  watched.reserve(params.size());
  for (const auto& p : params) watched.push_back(tape.watch(p));
  const Tensor out = f(tape, watched);
  return {out.item(), rec.signature()};
}

std::vector<Tensor> with_coordinate(const std::vector<Tensor>& params, std::size_t pi, std::size_t ci,
                                    double delta) {
  std::vector<Tensor> out = params;
  std::vector<double> v = params[pi].values();
  v[ci] += delta;
  out[pi] = Tensor(params[pi].shape(), std::move(v));
  return out;
}

}  // namespace

double gradient_rel_error(double ad, double fd) {
  return std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
}

std::vector<Tensor> autodiff_gradients(const ScalarFn& f, const std::vector<Tensor>& params) {
  GradTape tape;
  std::vector<Tensor> watched;
  watched.reserve(params.size());
  for (const auto& p : params) watched.push_back(tape.watch(p));
  const Tensor loss = f(tape, watched);
  if (!loss.requires_grad()) {
    std::vector<Tensor> zeros;
    for (const auto& p : params) zeros.push_back(Tensor::zeros(p.shape()));
    return zeros;
  }
  tape.backward(loss);
  std::vector<Tensor> grads;
  grads.reserve(watched.size());
  for (const auto& w : watched) grads.push_back(tape.grad(w));
  return grads;
}

GradCheckResult finite_difference_check(const ScalarFn& f, const std::vector<Tensor>& params,
                                        const GradCheckOptions& opts) {
  const Eval base = evaluate(f, params);
  const Eval again = evaluate(f, params);
  if (base.value != again.value || base.signature != again.signature) {
    throw OracleError("function under test is not deterministic");
  }
  const std::vector<Tensor> ad = autodiff_gradients(f, params);

  GradCheckResult res;
  std::mt19937_64 rng(opts.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    std::vector<std::size_t> coords(params[pi].numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_param && coords.size() > opts.max_coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_param);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t ci : coords) {
      double eps = opts.eps;
      bool smooth = false;
      double fd = 0.0;
      for (int attempt = 0; attempt <= opts.kink_retries; ++attempt, eps /= 10.0) {
        const Eval plus = evaluate(f, with_coordinate(params, pi, ci, eps));
        const Eval minus = evaluate(f, with_coordinate(params, pi, ci, -eps));
        if (plus.signature == base.signature && minus.signature == base.signature) {
          fd = (plus.value - minus.value) / (2.0 * eps);
          smooth = true;
          break;
        }
      }
      if (!smooth) {
        ++res.skipped_kinks;
        continue;
      }
      const double err = gradient_rel_error(ad[pi][ci], fd);
      ++res.checked;
      if (err > res.max_rel_error || res.worst.empty()) {
        if (err >= res.max_rel_error) {
          res.max_rel_error = err;
          res.worst = std::to_string(pi) + ":" + std::to_string(ci);
          res.worst_ad = ad[pi][ci];
          res.worst_fd = fd;
        }
      }
    }
  }
  return res;
}

}  // namespace cdiffdet
