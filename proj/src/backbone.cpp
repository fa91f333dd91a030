#include "cdiffdet/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cdiffdet/errors.hpp"

namespace cdiffdet {

namespace {

const double kReluGain = std::sqrt(2.0);

void add_conv(ParamStore& store, const std::string& name, std::size_t out, std::size_t in, std::size_t k,
              double gain, std::mt19937_64& rng) {
  store.add(name + ".w", fan_in_uniform({out, in, k, k}, in * k * k, gain, rng));
  store.add(name + ".b", Tensor::zeros({out}));
}

Tensor conv(const Tensor& x, const ParamContext& p, const std::string& name, std::size_t stride, std::size_t pad) {
  return conv2d(x, p[name + ".w"], p[name + ".b"], stride, pad);
}

void check_image(const Tensor& image, std::size_t multiple, const char* who) {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw ShapeError(std::string(who) + " expects an image [B,3,H,W], got " + shape_str(image.shape()));
  }
  if (image.dim(2) % multiple != 0 || image.dim(3) % multiple != 0 || image.dim(2) == 0 || image.dim(3) == 0) {
    throw ConfigError(std::string(who) + " needs H and W divisible by " + std::to_string(multiple) + ", got " +
                      shape_str(image.shape()));
  }
}

}  // namespace

const Tensor& FeaturePyramid::level(int l) const {
  if (l < min_level || l > max_level()) throw IndexError("pyramid has no level " + std::to_string(l));
  return levels[static_cast<std::size_t>(l - min_level)];
}

void add_backbone_params(ParamStore& store, const ModelConfig& cfg, std::mt19937_64& rng) {
  const auto& ch = cfg.backbone_channels;
  add_conv(store, "backbone.stem", cfg.stem_channels, 3, 3, kReluGain, rng);
  std::size_t in = cfg.stem_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string stage = "backbone.c" + std::to_string(s + 2);
    add_conv(store, stage + ".down", ch[s], in, 3, kReluGain, rng);
    add_conv(store, stage + ".refine", ch[s], ch[s], 3, kReluGain, rng);
    in = ch[s];
  }

  const std::size_t c5 = ch[3], hidden = c5 / cfg.ace_reduction;
  store.add("ace.fc1.w", fan_in_uniform({c5, hidden}, c5, kReluGain, rng));
  store.add("ace.fc1.b", Tensor::zeros({hidden}));
  store.add("ace.fc2.w", fan_in_uniform({hidden, c5}, hidden, 1.0, rng));
  store.add("ace.fc2.b", Tensor::zeros({c5}));

  const std::size_t d = cfg.fpn_dim;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string l = std::to_string(s + 2);
    add_conv(store, "fpn.lat" + l, d, ch[s], 1, 1.0, rng);
    add_conv(store, "fpn.out" + l, d, d, 3, 1.0, rng);
  }
  if (cfg.use_p1) {
    add_conv(store, "fpn.lat1", d, cfg.stem_channels, 1, 1.0, rng);
    add_conv(store, "fpn.out1", d, d, 3, 1.0, rng);
  }

  const auto& g = cfg.gce_channels;
  add_conv(store, "gce.conv1", g[0], 3, 3, kReluGain, rng);
  add_conv(store, "gce.conv2", g[1], g[0], 3, kReluGain, rng);
  add_conv(store, "gce.conv3", cfg.gce_dim, g[1], 3, kReluGain, rng);
  if (cfg.gce_variant == "residual") add_conv(store, "gce.res", cfg.gce_dim, 3, 1, 1.0, rng);
}

BackboneFeatures backbone_forward(const Tensor& image, const ParamContext& params, const ModelConfig& cfg) {
  check_image(image, 32, "backbone");
  BackboneFeatures f;
  f.stem = relu(conv(image, params, "backbone.stem", 2, 1));
  Tensor x = f.stem;
  for (std::size_t s = 0; s < 4; ++s) {
    const std::string stage = "backbone.c" + std::to_string(s + 2);
    x = relu(conv(x, params, stage + ".down", 2, 1));
    x = relu(conv(x, params, stage + ".refine", 1, 1));
    f.c[s] = x;
  }
  (void)cfg;
  return f;
}

Tensor ace_forward(const Tensor& c5, const ParamContext& params, const ModelConfig& cfg) {
  if (c5.rank() != 4) throw ShapeError("ace expects [B,C,h,w], got " + shape_str(c5.shape()));
  const std::size_t B = c5.dim(0), C = c5.dim(1);
  if (cfg.ace_reduction == 0 || C % cfg.ace_reduction != 0) {
    throw ConfigError("ace: channels " + std::to_string(C) + " not divisible by r=" +
                      std::to_string(cfg.ace_reduction));
  }
  const Tensor mu = global_avg_pool(c5);
  const Tensor hidden = relu(linear(mu, params["ace.fc1.w"], params["ace.fc1.b"]));
  const Tensor gate = sigmoid(linear(hidden, params["ace.fc2.w"], params["ace.fc2.b"]));
  return mul(c5, reshape(gate, {B, C, 1, 1}));
}

FeaturePyramid fpn_forward(const BackboneFeatures& feats, const Tensor& c5_enhanced, const ParamContext& params,
                           const ModelConfig& cfg) {
  std::array<Tensor, 4> c = feats.c;
  c[3] = c5_enhanced;
  FeaturePyramid pyr;
  pyr.min_level = cfg.use_p1 ? 1 : 2;
  std::vector<Tensor> top_down(4);
  Tensor above;
  for (std::size_t s = 4; s-- > 0;) {
    const std::string l = std::to_string(s + 2);
    Tensor lat = conv(c[s], params, "fpn.lat" + l, 1, 0);
    if (s < 3) lat = add(lat, upsample_nearest2x(above));
    above = conv(lat, params, "fpn.out" + l, 1, 1);
    top_down[s] = above;
  }
  if (cfg.use_p1) {
    Tensor lat = add(conv(feats.stem, params, "fpn.lat1", 1, 0), upsample_nearest2x(top_down[0]));
    pyr.levels.push_back(conv(lat, params, "fpn.out1", 1, 1));
  }
  for (auto& t : top_down) pyr.levels.push_back(t);
  return pyr;
}

Tensor gce_forward(const Tensor& image, const ParamContext& params, const ModelConfig& cfg) {
  check_image(image, 8, "gce");
  Tensor x = relu(conv(image, params, "gce.conv1", 2, 1));
  x = relu(conv(x, params, "gce.conv2", 2, 1));
  x = relu(conv(x, params, "gce.conv3", 2, 1));
  if (cfg.gce_variant == "residual") {
    Tensor r = avg_pool2d(image, 3, 2, 1);
    r = avg_pool2d(r, 3, 2, 1);
    r = avg_pool2d(r, 3, 2, 1);
    x = add(x, conv(r, params, "gce.res", 1, 0));
  }
  return global_avg_pool(x);
}

namespace {

struct Tap {
  std::size_t offset;  // into the level tensor
  double weight;
};

// Bilinear taps for a sample at feature coords (y, x) on an H×W plane.
void bilinear_taps(double y, double x, std::size_t H, std::size_t W, std::vector<Tap>& out, double scale) {
  if (y < -1.0 || y > static_cast<double>(H) || x < -1.0 || x > static_cast<double>(W)) return;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  auto y0 = static_cast<std::size_t>(y), x0 = static_cast<std::size_t>(x);
  std::size_t y1, x1;
  if (y0 >= H - 1) {
    y0 = y1 = H - 1;
    y = static_cast<double>(y0);
  } else {
    y1 = y0 + 1;
  }
  if (x0 >= W - 1) {
    x0 = x1 = W - 1;
    x = static_cast<double>(x0);
  } else {
    x1 = x0 + 1;
  }
  const double ly = y - static_cast<double>(y0), lx = x - static_cast<double>(x0);
  const double hy = 1.0 - ly, hx = 1.0 - lx;
  out.push_back({y0 * W + x0, hy * hx * scale});
  out.push_back({y0 * W + x1, hy * lx * scale});
  out.push_back({y1 * W + x0, ly * hx * scale});
  out.push_back({y1 * W + x1, ly * lx * scale});
}

}  // namespace

Tensor roi_pool(const FeaturePyramid& pyramid, const Tensor& boxes_px, const std::vector<int>& levels,
                std::size_t resolution) {
  if (boxes_px.rank() != 3 || boxes_px.dim(2) != 4) {
    throw ShapeError("roi_pool expects boxes [B,N,4], got " + shape_str(boxes_px.shape()));
  }
  if (pyramid.levels.empty()) throw ShapeError("roi_pool on an empty pyramid");
  const std::size_t B = boxes_px.dim(0), N = boxes_px.dim(1);
  if (levels.size() != B * N) throw ShapeError("roi_pool: one level per box required");
  const Tensor& first = pyramid.levels.front();
  const std::size_t C = first.dim(1);
  if (first.dim(0) != B) throw ShapeError("roi_pool: batch size differs from pyramid");
  const double img_h = static_cast<double>(first.dim(2) * FeaturePyramid::stride(pyramid.min_level));
  const double img_w = static_cast<double>(first.dim(3) * FeaturePyramid::stride(pyramid.min_level));

  // Per box: which level and the list of (offset, weight) taps within one channel plane.
  struct BoxTaps {
    std::size_t level_index = 0;
    std::vector<Tap> taps;
  };
  auto plan = std::make_shared<std::vector<BoxTaps>>(B * N);
  const double inv = 1.0 / static_cast<double>(resolution * resolution);
  for (std::size_t bn = 0; bn < B * N; ++bn) {
    const int l = levels[bn];
    if (l < pyramid.min_level || l > pyramid.max_level()) {
      throw IndexError("roi_pool: level " + std::to_string(l) + " not in pyramid");
    }
    auto& bt = (*plan)[bn];
    bt.level_index = static_cast<std::size_t>(l - pyramid.min_level);
    const double x1 = boxes_px[bn * 4 + 0], y1 = boxes_px[bn * 4 + 1];
    const double x2 = boxes_px[bn * 4 + 2], y2 = boxes_px[bn * 4 + 3];
    if (x2 <= 0.0 || y2 <= 0.0 || x1 >= img_w || y1 >= img_h) continue;
    const Tensor& P = pyramid.levels[bt.level_index];
    const std::size_t H = P.dim(2), W = P.dim(3);
    const double s = static_cast<double>(FeaturePyramid::stride(l));
    const double bw = (x2 - x1) / static_cast<double>(resolution);
    const double bh = (y2 - y1) / static_cast<double>(resolution);
    for (std::size_t iy = 0; iy < resolution; ++iy) {
      const double py = y1 + (static_cast<double>(iy) + 0.5) * bh;
      for (std::size_t ix = 0; ix < resolution; ++ix) {
        const double px = x1 + (static_cast<double>(ix) + 0.5) * bw;
        bilinear_taps(py / s - 0.5, px / s - 0.5, H, W, bt.taps, inv);
      }
    }
  }

  std::vector<double> out(B * N * C, 0.0);
  for (std::size_t bn = 0; bn < B * N; ++bn) {
    const auto& bt = (*plan)[bn];
    const Tensor& P = pyramid.levels[bt.level_index];
    const std::size_t plane = P.dim(2) * P.dim(3);
    const std::size_t b = bn / N;
    const auto& pv = P.values();
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = pv.data() + (b * C + c) * plane;
      double acc = 0.0;
      for (const auto& t : bt.taps) acc += t.weight * src[t.offset];
      out[bn * C + c] = acc;
    }
  }

  std::vector<std::size_t> plane_sizes;
  for (const auto& P : pyramid.levels) plane_sizes.push_back(P.dim(2) * P.dim(3));
  return make_result("roi_pool", Shape{B, N, C}, std::move(out), pyramid.levels,
                     [plan, plane_sizes, N, C](std::span<const double> g, std::span<double* const> gi) {
                       for (std::size_t bn = 0; bn < plan->size(); ++bn) {
                         const auto& bt = (*plan)[bn];
                         double* dst = gi[bt.level_index];
                         if (!dst) continue;
                         const std::size_t plane = plane_sizes[bt.level_index];
                         const std::size_t b = bn / N;
                         for (std::size_t c = 0; c < C; ++c) {
                           const double gv = g[bn * C + c];
                           if (gv == 0.0) continue;
                           double* d = dst + (b * C + c) * plane;
                           for (const auto& t : bt.taps) d[t.offset] += t.weight * gv;
                         }
                       }
                     });
}

}  // namespace cdiffdet
