#pragma once

// Cosine noise schedule, forward corruption, DDIM reverse update and box
// renewal over box signals.
//
// A box signal is a [.., 4] tensor of center-form boxes (cx, cy, w, h)
// normalized to [0, 1] and mapped affinely to [-scale, scale].

#include <cstddef>
#include <random>
#include <vector>

#include "cdiffdet/tensor.hpp"

namespace cdiffdet {

struct NoiseSchedule {
  std::size_t T = 0;
  // alpha_bar[t] for t = 0..T; alpha_bar[0] == 1.
  std::vector<double> alpha_bar;
  // beta[t] for t = 1..T (beta[0] is unused and stored as 0).
  std::vector<double> beta;

  double alpha_bar_at(std::ptrdiff_t t) const;
};

// alpha_bar[t] = f(t)/f(0), f(t) = cos^2(((t/T)+s)/(1+s) * pi/2);
// beta[t] = min(1 - alpha_bar[t]/alpha_bar[t-1], max_beta).
NoiseSchedule build_cosine_schedule(std::size_t T, double s = 0.008, double max_beta = 0.999);

struct SignalOptions {
  double scale = 2.0;
  // Clamp every produced signal to [-scale, scale].
  bool clamp = true;
};

struct BoxSignal {
  Tensor boxes_norm;
  Tensor signal;
  double scale = 2.0;

  static BoxSignal from_boxes(const Tensor& boxes_norm, double scale = 2.0);
  static BoxSignal from_signal(const Tensor& signal, double scale = 2.0);
};

// (b*2 - 1)*scale clamped to [-scale, scale].
Tensor boxes_to_signal(const Tensor& boxes_norm, double scale);
// (clamp(s)/scale + 1)/2.
Tensor signal_to_boxes(const Tensor& signal, double scale);

Tensor q_sample(const Tensor& x0_signal, std::ptrdiff_t t, const Tensor& noise, const NoiseSchedule& sched,
                const SignalOptions& opts = {});

// (x_t - sqrt(ab)*x0_hat)/sqrt(1 - ab). Throws ContractError when ab >= 1.
Tensor epsilon_from_x0(const Tensor& x_t, const Tensor& x0_hat, double alpha_bar_t);

Tensor ddim_step(const Tensor& x_t, const Tensor& x0_hat, const Tensor& eps_hat, std::ptrdiff_t t,
                 std::ptrdiff_t t_prev, const NoiseSchedule& sched, const SignalOptions& opts = {});

// Rows of x ([B,N,4]) whose max class probability exceeds threshold are kept
// verbatim; the rest are redrawn from N(0, I) (clamped when opts.clamp).
Tensor box_renewal(const Tensor& x, const Tensor& scores, double threshold, std::mt19937_64& rng,
                   const SignalOptions& opts = {});

// Strided descending timesteps T = t_0 > t_1 > ... > t_steps = 0.
std::vector<std::ptrdiff_t> ddim_timesteps(std::size_t T, std::size_t steps);

}  // namespace cdiffdet
