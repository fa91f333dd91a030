#include "cdiffdet/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cdiffdet/errors.hpp"

namespace cdiffdet {

namespace {

double clamp_if(double v, const SignalOptions& opts) {
  return opts.clamp ? std::clamp(v, -opts.scale, opts.scale) : v;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

double NoiseSchedule::alpha_bar_at(std::ptrdiff_t t) const {
  if (t < 0 || static_cast<std::size_t>(t) > T) {
    throw IndexError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
  }
  return alpha_bar[static_cast<std::size_t>(t)];
}

NoiseSchedule build_cosine_schedule(std::size_t T, double s, double max_beta) {
  if (T == 0) throw ConfigError("noise schedule needs T >= 1");
  auto f = [&](double t) {
    const double c = std::cos(((t / static_cast<double>(T)) + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  NoiseSchedule sched;
  sched.T = T;
  sched.alpha_bar.resize(T + 1);
  sched.beta.assign(T + 1, 0.0);
  const double f0 = f(0.0);
  for (std::size_t t = 0; t <= T; ++t) sched.alpha_bar[t] = f(static_cast<double>(t)) / f0;
  sched.alpha_bar[0] = 1.0;
  for (std::size_t t = 1; t <= T; ++t) {
    sched.beta[t] = std::min(1.0 - sched.alpha_bar[t] / sched.alpha_bar[t - 1], max_beta);
  }
  return sched;
}

BoxSignal BoxSignal::from_boxes(const Tensor& boxes_norm, double scale) {
  return {boxes_norm, boxes_to_signal(boxes_norm, scale), scale};
}

BoxSignal BoxSignal::from_signal(const Tensor& signal, double scale) {
  return {signal_to_boxes(signal, scale), signal, scale};
}

Tensor boxes_to_signal(const Tensor& boxes_norm, double scale) {
  std::vector<double> v(boxes_norm.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp((boxes_norm[i] * 2.0 - 1.0) * scale, -scale, scale);
  return Tensor(boxes_norm.shape(), std::move(v));
}

Tensor signal_to_boxes(const Tensor& signal, double scale) {
  std::vector<double> v(signal.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (std::clamp(signal[i], -scale, scale) / scale + 1.0) / 2.0;
  return Tensor(signal.shape(), std::move(v));
}

Tensor q_sample(const Tensor& x0_signal, std::ptrdiff_t t, const Tensor& noise, const NoiseSchedule& sched,
                const SignalOptions& opts) {
  check_same_shape(x0_signal, noise, "q_sample noise");
  const double ab = sched.alpha_bar_at(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<double> v(x0_signal.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = clamp_if(a * x0_signal[i] + b * noise[i], opts);
  return Tensor(x0_signal.shape(), std::move(v));
}

Tensor epsilon_from_x0(const Tensor& x_t, const Tensor& x0_hat, double alpha_bar_t) {
  check_same_shape(x_t, x0_hat, "epsilon_from_x0");
  if (!(alpha_bar_t < 1.0)) throw ContractError("epsilon_from_x0 needs alpha_bar < 1");
  const double a = std::sqrt(alpha_bar_t), b = std::sqrt(1.0 - alpha_bar_t);
  std::vector<double> v(x_t.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (x_t[i] - a * x0_hat[i]) / b;
  return Tensor(x_t.shape(), std::move(v));
}

Tensor ddim_step(const Tensor& x_t, const Tensor& x0_hat, const Tensor& eps_hat, std::ptrdiff_t t,
                 std::ptrdiff_t t_prev, const NoiseSchedule& sched, const SignalOptions& opts) {
  check_same_shape(x_t, x0_hat, "ddim_step x0_hat");
  check_same_shape(x_t, eps_hat, "ddim_step eps_hat");
  if (t_prev >= t) throw ContractError("ddim_step needs t_prev < t");
  sched.alpha_bar_at(t);
  const double ab = sched.alpha_bar_at(t_prev);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<double> v(x_t.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = clamp_if(a * x0_hat[i] + b * eps_hat[i], opts);
  return Tensor(x_t.shape(), std::move(v));
}

Tensor box_renewal(const Tensor& x, const Tensor& scores, double threshold, std::mt19937_64& rng,
                   const SignalOptions& opts) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("renewal threshold must lie in (0,1)");
  if (x.rank() != 3 || x.dim(-1) != 4) throw ShapeError("box_renewal expects x[B,N,4], got " + shape_str(x.shape()));
  if (scores.rank() != 3 || scores.dim(0) != x.dim(0) || scores.dim(1) != x.dim(1)) {
    throw ShapeError("box_renewal scores " + shape_str(scores.shape()) + " do not match " + shape_str(x.shape()));
  }
  const std::size_t rows = x.dim(0) * x.dim(1), C = scores.dim(2);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double best = -1.0;
    for (std::size_t c = 0; c < C; ++c) best = std::max(best, scores[r * C + c]);
    if (best > threshold) continue;
    for (std::size_t k = 0; k < 4; ++k) v[r * 4 + k] = clamp_if(normal(rng), opts);
  }
  return Tensor(x.shape(), std::move(v));
}

std::vector<std::ptrdiff_t> ddim_timesteps(std::size_t T, std::size_t steps) {
  if (steps == 0) throw ConfigError("ddim_steps must be >= 1");
  if (steps > T) throw ConfigError("ddim_steps cannot exceed T");
  std::vector<std::ptrdiff_t> ts(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) {
    ts[i] = static_cast<std::ptrdiff_t>(T - (T * i) / steps);
  }
  return ts;
}

}  // namespace cdiffdet
