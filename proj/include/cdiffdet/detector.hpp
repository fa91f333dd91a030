#pragma once

// The assembled detector: one denoising forward pass, the training step with
// AdamW, and the DDIM sampling loop.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cdiffdet/config.hpp"
#include "cdiffdet/diffusion.hpp"
#include "cdiffdet/geometry.hpp"
#include "cdiffdet/loss.hpp"
#include "cdiffdet/params.hpp"
#include "cdiffdet/tensor.hpp"

namespace cdiffdet {

// Box delta weights (dx, dy, dw, dh) and limits used by decode_boxes.
inline constexpr double kDeltaWeights[4] = {2.0, 2.0, 1.0, 1.0};
inline constexpr double kMinProposalSize = 0.02;
inline constexpr double kMaxLogScale = 4.135166556742356;  // log(1000/16)

// Applies deltas [B,N,4] to fixed center-form proposals [B,N,4] (normalized)
// and returns normalized xyxy boxes. Differentiable in deltas only.
Tensor decode_boxes(const Tensor& deltas, const Tensor& proposals_cxcywh);

struct DenoiseOutput {
  Tensor boxes;      // [B,N,4] normalized xyxy (taped)
  Tensor logits;     // [B,N,C] (taped)
  Tensor eps_pred;   // [B,N,4] (taped)
  Tensor x0_signal;  // [B,N,4] plain values, boxes mapped to signal space
};

// image [B,3,H,W]; x_t [B,N,4] signal; one timestep per batch entry.
DenoiseOutput denoise_forward(const Tensor& image, const Tensor& x_t, const std::vector<double>& t,
                              const ParamContext& params, const DetectorConfig& cfg,
                              std::mt19937_64* dropout_rng = nullptr);

struct TrainSample {
  Tensor image;     // [1,3,H,W]
  GroundTruth gt;   // normalized xyxy
};

struct OptimizerState {
  std::size_t step = 0;
  std::map<std::string, std::vector<double>> m, v;
};

struct StepStats {
  std::size_t step = 0;  // index of the step just taken (0-based)
  double total = 0, cls = 0, l1 = 0, giou = 0, noise = 0;
  double grad_norm = 0;     // before clipping
  double clipped_norm = 0;  // after clipping
  double lr = 0;
};

double learning_rate(const TrainConfig& tc, std::size_t step);

// Builds the N training proposals for one image in signal space: the first
// ceil(fill*N) slots cycle through the gt boxes (when there are any), the
// rest are clamped unit-Gaussian signals.
Tensor training_proposals(const GroundTruth& gt, std::size_t N, double fill, const SignalOptions& opts,
                          std::mt19937_64& rng);

// One optimizer update over the batch. Randomness is drawn from
// (seed, state.step, image index) so the step is reproducible and
// independent of the worker count.
StepStats train_step(const std::vector<TrainSample>& batch, ParamStore& params, OptimizerState& state,
                     const DetectorConfig& cfg, const TrainConfig& tc, const NoiseSchedule& sched,
                     std::uint64_t seed);

struct DenoiserOutput {
  Tensor x0_signal;  // [1,N,4]
  Tensor logits;     // [1,N,C]
  Tensor eps_pred;   // [1,N,4], may be empty when the noise head is unused
};

using Denoiser = std::function<DenoiserOutput(const Tensor& x_t, std::ptrdiff_t t)>;

struct TraceRow {
  std::size_t step = 0;
  std::ptrdiff_t t = 0;
  std::size_t proposal = 0;
  BoxCxCyWH box;  // predicted clean box, normalized
};

struct DetectionResult {
  std::vector<BoxXYXY> boxes;  // pixels
  std::vector<double> scores;  // descending
  std::vector<int> labels;     // 0-based class ids
  std::vector<TraceRow> trace;
  std::size_t denoise_calls = 0;
};

// Sampling loop over any denoiser. width/height convert normalized boxes to
// pixels.
DetectionResult run_sampler(const Denoiser& denoiser, std::size_t width, std::size_t height,
                            const DetectorConfig& cfg, const NoiseSchedule& sched, std::uint64_t seed,
                            bool trace = false);

// image [1,3,H,W].
DetectionResult infer(const Tensor& image, const ParamStore& params, const DetectorConfig& cfg,
                      const NoiseSchedule& sched, std::uint64_t seed, bool trace = false);

// Sigmoid scores above threshold, class-wise NMS, best max_detections.
DetectionResult select_detections(const std::vector<BoxXYXY>& boxes_px, const std::vector<double>& probs,
                                  std::size_t num_classes, const DetectorConfig& cfg);

}  // namespace cdiffdet
