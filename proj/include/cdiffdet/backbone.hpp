#pragma once

// Image-side feature extraction: a small strided CNN standing in for the
// transformer backbone, squeeze-excitation channel gating on the last stage,
// a top-down feature pyramid, the global context encoder, and RoI pooling.

#include <array>
#include <random>
#include <vector>

#include "cdiffdet/config.hpp"
#include "cdiffdet/params.hpp"
#include "cdiffdet/tensor.hpp"

namespace cdiffdet {

struct BackboneFeatures {
  Tensor stem;              // stride 2
  std::array<Tensor, 4> c;  // C2..C5 at strides 4, 8, 16, 32
};

struct FeaturePyramid {
  int min_level = 2;
  std::vector<Tensor> levels;  // levels[i] is P_{min_level + i}

  int max_level() const { return min_level + static_cast<int>(levels.size()) - 1; }
  const Tensor& level(int l) const;
  static std::size_t stride(int l) { return std::size_t{1} << l; }
};

void add_backbone_params(ParamStore& store, const ModelConfig& cfg, std::mt19937_64& rng);

// image: [B,3,H,W] with H, W divisible by 32.
BackboneFeatures backbone_forward(const Tensor& image, const ParamContext& params, const ModelConfig& cfg);

// out = x * sigmoid(W2 relu(W1 GAP(x) + b1) + b2), gate broadcast per channel.
Tensor ace_forward(const Tensor& c5, const ParamContext& params, const ModelConfig& cfg);

// P5 = conv3(lat(C5)); P_l = conv3(lat(C_l) + up2(P_{l+1})).
FeaturePyramid fpn_forward(const BackboneFeatures& feats, const Tensor& c5_enhanced, const ParamContext& params,
                           const ModelConfig& cfg);

// g: [B, gce_dim]. image H, W divisible by 8.
Tensor gce_forward(const Tensor& image, const ParamContext& params, const ModelConfig& cfg);

// Bilinear samples at the centers of a resolution x resolution grid inside
// each box (pixel xyxy, boxes_px [B,N,4]) on its assigned level, averaged to
// one vector per box: [B,N,C]. levels holds B*N pyramid levels. Samples more
// than one cell outside the map read as zero; a box that does not overlap
// the image yields a zero vector.
Tensor roi_pool(const FeaturePyramid& pyramid, const Tensor& boxes_px, const std::vector<int>& levels,
                std::size_t resolution);

}  // namespace cdiffdet
