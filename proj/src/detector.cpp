#include "cdiffdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cdiffdet/backbone.hpp"
#include "cdiffdet/errors.hpp"
#include "cdiffdet/head.hpp"
#include "cdiffdet/parallel.hpp"

namespace cdiffdet {

namespace {

constexpr std::uint64_t kTagDeltaClamp = 0x61;

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

double to_float(double x) { return static_cast<double>(static_cast<float>(x)); }

BoxCxCyWH row_cxcywh(const Tensor& t, std::size_t row) {
  return {t[row * 4], t[row * 4 + 1], t[row * 4 + 2], t[row * 4 + 3]};
}

}  // namespace

Tensor decode_boxes(const Tensor& deltas, const Tensor& proposals_cxcywh) {
  if (deltas.rank() != 3 || deltas.dim(2) != 4 || deltas.shape() != proposals_cxcywh.shape()) {
    throw ShapeError("decode_boxes: deltas " + shape_str(deltas.shape()) + " vs proposals " +
                     shape_str(proposals_cxcywh.shape()));
  }
  const std::size_t rows = deltas.numel() / 4;
  std::vector<double> out(rows * 4);
  // d out[r*4+k] / d delta[r*4+j] is sparse: dx -> x1,x2; dy -> y1,y2; dw -> x1,x2; dh -> y1,y2.
  auto jac = std::make_shared<std::vector<double>>(rows * 4);  // per row: d/ddx, d/ddy, d/ddw (half w), d/ddh
  for (std::size_t r = 0; r < rows; ++r) {
    const double pcx = proposals_cxcywh[r * 4], pcy = proposals_cxcywh[r * 4 + 1];
    const double pw = std::max(proposals_cxcywh[r * 4 + 2], kMinProposalSize);
    const double ph = std::max(proposals_cxcywh[r * 4 + 3], kMinProposalSize);
    const double dx = deltas[r * 4] / kDeltaWeights[0], dy = deltas[r * 4 + 1] / kDeltaWeights[1];
    const double rw = deltas[r * 4 + 2] / kDeltaWeights[2], rh = deltas[r * 4 + 3] / kDeltaWeights[3];
    const bool cw = rw > kMaxLogScale, ch = rh > kMaxLogScale;
    if (branch_recording()) {
      note_branch(kTagDeltaClamp, cw);
      note_branch(kTagDeltaClamp, ch);
    }
    const double cx = pcx + dx * pw, cy = pcy + dy * ph;
    const double w = pw * std::exp(cw ? kMaxLogScale : rw), h = ph * std::exp(ch ? kMaxLogScale : rh);
    out[r * 4] = cx - 0.5 * w;
    out[r * 4 + 1] = cy - 0.5 * h;
    out[r * 4 + 2] = cx + 0.5 * w;
    out[r * 4 + 3] = cy + 0.5 * h;
    (*jac)[r * 4] = pw / kDeltaWeights[0];
    (*jac)[r * 4 + 1] = ph / kDeltaWeights[1];
    (*jac)[r * 4 + 2] = cw ? 0.0 : 0.5 * w / kDeltaWeights[2];
    (*jac)[r * 4 + 3] = ch ? 0.0 : 0.5 * h / kDeltaWeights[3];
  }
  return make_result("decode_boxes", deltas.shape(), std::move(out), {deltas},
                     [jac](std::span<const double> g, std::span<double* const> gi) {
                       if (!gi[0]) return;
                       double* d = gi[0];
                       for (std::size_t r = 0; r < jac->size() / 4; ++r) {
                         const double* j = &(*jac)[r * 4];
                         const double g1 = g[r * 4], g2 = g[r * 4 + 1], g3 = g[r * 4 + 2], g4 = g[r * 4 + 3];
                         d[r * 4] += j[0] * (g1 + g3);
                         d[r * 4 + 1] += j[1] * (g2 + g4);
                         d[r * 4 + 2] += j[2] * (g3 - g1);
                         d[r * 4 + 3] += j[3] * (g4 - g2);
                       }
                     });
}

DenoiseOutput denoise_forward(const Tensor& image, const Tensor& x_t, const std::vector<double>& t,
                              const ParamContext& params, const DetectorConfig& cfg, std::mt19937_64* dropout_rng) {
  const ModelConfig& mc = cfg.model;
  if (image.rank() != 4) throw ShapeError("denoise_forward: image must be [B,3,H,W]");
  const std::size_t B = image.dim(0), H = image.dim(2), W = image.dim(3);
  if (x_t.rank() != 3 || x_t.dim(0) != B || x_t.dim(2) != 4) {
    throw ShapeError("denoise_forward: x_t must be [B,N,4], got " + shape_str(x_t.shape()));
  }
  if (t.size() != B) throw ShapeError("denoise_forward: one timestep per image required");
  const std::size_t N = x_t.dim(1);

  const BackboneFeatures feats = backbone_forward(image, params, mc);
  const Tensor c5 = ace_forward(feats.c[3], params, mc);
  const FeaturePyramid pyr = fpn_forward(feats, c5, params, mc);
  const Tensor g = gce_forward(image, params, mc);

  const Tensor proposals = signal_to_boxes(x_t.detach(), cfg.signal_scale);
  std::vector<double> px(B * N * 4);
  std::vector<int> levels(B * N);
  const LevelRange range{pyr.min_level, pyr.max_level()};
  for (std::size_t r = 0; r < B * N; ++r) {
    const BoxXYXY b = to_xyxy(row_cxcywh(proposals, r));
    const BoxXYXY p{b.x1 * static_cast<double>(W), b.y1 * static_cast<double>(H), b.x2 * static_cast<double>(W),
                    b.y2 * static_cast<double>(H)};
    px[r * 4] = p.x1;
    px[r * 4 + 1] = p.y1;
    px[r * 4 + 2] = p.x2;
    px[r * 4 + 3] = p.y2;
    levels[r] = assign_fpn_level(p, mc.fpn_base_size, range);
  }
  const Tensor f_roi = roi_pool(pyr, Tensor({B, N, 4}, std::move(px)), levels, mc.roi_resolution);

  Tensor f = self_attention(f_roi, params, mc);
  f = cross_attention_caf(f, g, params, mc).out;
  if (mc.instance_interaction) f = self_attention(f, params, mc, "head.inst");
  const ConditionalEmbeddings emb = build_embeddings(t, N, g, params, mc);
  f = mmf_fuse(f, emb, g, params, mc).out;
  f = final_mlp(f, params, mc, dropout_rng);
  const HeadOutputs heads = prediction_heads(f, params, mc);

  DenoiseOutput out;
  out.boxes = decode_boxes(heads.box_deltas, proposals);
  out.logits = heads.logits;
  out.eps_pred = heads.eps_pred;
  std::vector<double> cxcywh(B * N * 4);
  for (std::size_t r = 0; r < B * N; ++r) {
    const BoxCxCyWH c = to_cxcywh({out.boxes[r * 4], out.boxes[r * 4 + 1], out.boxes[r * 4 + 2], out.boxes[r * 4 + 3]});
    cxcywh[r * 4] = c.cx;
    cxcywh[r * 4 + 1] = c.cy;
    cxcywh[r * 4 + 2] = c.w;
    cxcywh[r * 4 + 3] = c.h;
  }
  out.x0_signal = boxes_to_signal(Tensor({B, N, 4}, std::move(cxcywh)), cfg.signal_scale);
  return out;
}

double learning_rate(const TrainConfig& tc, std::size_t step) {
  double lr = tc.lr;
  if (tc.warmup_steps > 0 && step < tc.warmup_steps) {
    lr *= static_cast<double>(step + 1) / static_cast<double>(tc.warmup_steps);
  }
  for (auto s : tc.decay_steps) {
    if (step >= s) lr *= tc.decay_factor;
  }
  return lr;
}

Tensor training_proposals(const GroundTruth& gt, std::size_t N, double fill, const SignalOptions& opts,
                          std::mt19937_64& rng) {
  const std::size_t M = gt.boxes.size();
  std::size_t k = 0;
  if (M > 0) {
    k = static_cast<std::size_t>(std::ceil(fill * static_cast<double>(N)));
    k = std::min(N, std::max(k, M));
  }
  std::vector<double> sig(N * 4);
  for (std::size_t s = 0; s < k; ++s) {
    const BoxCxCyWH c = to_cxcywh(gt.boxes[s % M]);
    const double v[4] = {c.cx, c.cy, c.w, c.h};
    for (std::size_t j = 0; j < 4; ++j) sig[s * 4 + j] = std::clamp((v[j] * 2.0 - 1.0) * opts.scale, -opts.scale, opts.scale);
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = k * 4; i < N * 4; ++i) {
    const double z = normal(rng);
    sig[i] = opts.clamp ? std::clamp(z, -opts.scale, opts.scale) : z;
  }
  return Tensor({1, N, 4}, std::move(sig));
}

StepStats train_step(const std::vector<TrainSample>& batch, ParamStore& params, OptimizerState& state,
                     const DetectorConfig& cfg, const TrainConfig& tc, const NoiseSchedule& sched,
                     std::uint64_t seed) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  if (sched.T != cfg.timesteps) throw ConfigError("train_step: schedule length differs from config timesteps");
  const std::size_t B = batch.size(), N = cfg.num_proposals, C = cfg.model.num_classes;
  const SignalOptions opts{cfg.signal_scale, cfg.clamp_signal};
  const MatchWeights mw{tc.lambda_cls, tc.lambda_l1, tc.lambda_giou};
  const FocalParams fp{tc.focal_alpha, tc.focal_gamma};

  struct PerImage {
    std::map<std::string, Tensor> grads;
    SetLossTerms terms;
  };
  std::vector<PerImage> results(B);
  parallel_for(B, [&](std::size_t i) {
    const TrainSample& s = batch[i];
    std::mt19937_64 rng = seeded(seed, state.step, i);
    const Tensor x0 = training_proposals(s.gt, N, tc.gt_fill_fraction, opts, rng);
    std::uniform_int_distribution<std::size_t> pick_t(0, cfg.timesteps - 1);
    const auto t = static_cast<std::ptrdiff_t>(pick_t(rng));
    const Tensor noise = Tensor::randn({1, N, 4}, rng);
    const Tensor x_t = q_sample(x0, t, noise, sched, opts);

    GradTape tape;
    ParamContext ctx(params, &tape);
    const DenoiseOutput out =
        denoise_forward(s.image, x_t, {static_cast<double>(t)}, ctx, cfg, cfg.model.dropout > 0 ? &rng : nullptr);
    const Tensor logits = reshape(out.logits, {N, C});
    const Tensor boxes = reshape(out.boxes, {N, 4});

    std::vector<double> probs(N * C);
    for (std::size_t k = 0; k < N * C; ++k) probs[k] = 1.0 / (1.0 + std::exp(-logits[k]));
    std::vector<BoxXYXY> pred(N);
    for (std::size_t k = 0; k < N; ++k) pred[k] = {boxes[k * 4], boxes[k * 4 + 1], boxes[k * 4 + 2], boxes[k * 4 + 3]};
    const Assignment asg = hungarian(matching_cost(probs, C, pred, s.gt, mw, fp), N, s.gt.boxes.size());

    std::optional<NoiseTarget> nt;
    if (tc.lambda_noise > 0) nt = NoiseTarget{reshape(out.eps_pred, {N, 4}), noise.values(), tc.lambda_noise};
    SetLossTerms terms = set_loss(logits, boxes, s.gt, asg, mw, fp, nt);
    tape.backward(scale(terms.total, 1.0 / static_cast<double>(B)));
    results[i].grads = ctx.gradients();
    terms.total = terms.total.detach();
    results[i].terms = std::move(terms);
  });

  StepStats st;
  st.step = state.step;
  std::map<std::string, std::vector<double>> grads;
  for (const auto& [name, p] : params.items()) grads[name].assign(p.numel(), 0.0);
  for (std::size_t i = 0; i < B; ++i) {
    for (const auto& [name, g] : results[i].grads) {
      auto& acc = grads.at(name);
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
    }
    const double inv = 1.0 / static_cast<double>(B);
    st.total += results[i].terms.total.item() * inv;
    st.cls += results[i].terms.cls * inv;
    st.l1 += results[i].terms.l1 * inv;
    st.giou += results[i].terms.giou * inv;
    st.noise += results[i].terms.noise * inv;
  }

  double sq = 0.0;
  for (const auto& [_, g] : grads) {
    for (double x : g) sq += x * x;
  }
  st.grad_norm = std::sqrt(sq);
  const double clip = st.grad_norm > tc.clip_norm ? tc.clip_norm / st.grad_norm : 1.0;
  double sq_after = 0.0;
  for (auto& [_, g] : grads) {
    for (double& x : g) {
      x *= clip;
      sq_after += x * x;
    }
  }
  st.clipped_norm = std::sqrt(sq_after);

  // AdamW with decoupled weight decay; parameters and moments are kept at
  // 32-bit precision so checkpoints restore the exact optimizer state.
  st.lr = learning_rate(tc, state.step);
  const double t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(tc.beta1, t), bc2 = 1.0 - std::pow(tc.beta2, t);
  for (const auto& [name, g] : grads) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != g.size()) m.assign(g.size(), 0.0);
    if (v.size() != g.size()) v.assign(g.size(), 0.0);
    const Tensor& p = params.get(name);
    std::vector<double> w = p.values();
    for (std::size_t k = 0; k < g.size(); ++k) {
      m[k] = to_float(tc.beta1 * m[k] + (1.0 - tc.beta1) * g[k]);
      v[k] = to_float(tc.beta2 * v[k] + (1.0 - tc.beta2) * g[k] * g[k]);
      const double mhat = m[k] / bc1, vhat = v[k] / bc2;
      w[k] = to_float(w[k] * (1.0 - st.lr * tc.weight_decay) - st.lr * mhat / (std::sqrt(vhat) + tc.adam_eps));
    }
    params.set(name, Tensor(p.shape(), std::move(w)));
  }
  ++state.step;
  return st;
}

DetectionResult select_detections(const std::vector<BoxXYXY>& boxes_px, const std::vector<double>& probs,
                                  std::size_t num_classes, const DetectorConfig& cfg) {
  const std::size_t N = boxes_px.size();
  if (probs.size() != N * num_classes) throw ShapeError("select_detections: probs must be [N, C]");
  struct Cand {
    std::size_t proposal;
    int label;
    double score;
  };
  std::vector<Cand> kept;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<std::size_t> idx;
    std::vector<BoxXYXY> bx;
    std::vector<double> sc;
    for (std::size_t i = 0; i < N; ++i) {
      const double p = probs[i * num_classes + c];
      if (p > cfg.score_threshold) {
        idx.push_back(i);
        bx.push_back(boxes_px[i]);
        sc.push_back(p);
      }
    }
    for (auto k : nms(bx, sc, cfg.nms_iou)) kept.push_back({idx[k], static_cast<int>(c), sc[k]});
  }
  std::sort(kept.begin(), kept.end(), [](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.proposal != b.proposal) return a.proposal < b.proposal;
    return a.label < b.label;
  });
  if (kept.size() > cfg.max_detections) kept.resize(cfg.max_detections);
  DetectionResult r;
  for (const auto& k : kept) {
    r.boxes.push_back(boxes_px[k.proposal]);
    r.scores.push_back(k.score);
    r.labels.push_back(k.label);
  }
  return r;
}

DetectionResult run_sampler(const Denoiser& denoiser, std::size_t width, std::size_t height,
                            const DetectorConfig& cfg, const NoiseSchedule& sched, std::uint64_t seed, bool trace) {
  cfg.validate();
  const std::size_t N = cfg.num_proposals, C = cfg.model.num_classes;
  const SignalOptions opts{cfg.signal_scale, cfg.clamp_signal};
  std::mt19937_64 rng(seed);
  Tensor x = Tensor::randn({1, N, 4}, rng);
  if (opts.clamp) {
    std::vector<double> v = x.values();
    for (auto& e : v) e = std::clamp(e, -opts.scale, opts.scale);
    x = Tensor({1, N, 4}, std::move(v));
  }
  const auto ts = ddim_timesteps(cfg.timesteps, cfg.ddim_steps);
  DenoiserOutput last;
  std::vector<TraceRow> rows;
  std::size_t calls = 0;
  for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
    const std::ptrdiff_t t = ts[k], t_prev = ts[k + 1];
    last = denoiser(x, t);
    ++calls;
    if (last.x0_signal.shape() != Shape{1, N, 4} || last.logits.shape() != Shape{1, N, C}) {
      throw ShapeError("denoiser returned wrong shapes");
    }
    if (trace) {
      const Tensor b = signal_to_boxes(last.x0_signal, opts.scale);
      for (std::size_t i = 0; i < N; ++i) rows.push_back({k, t, i, row_cxcywh(b, i)});
    }
    const bool noise_head = cfg.use_noise_head && last.eps_pred.numel() == N * 4;
    const Tensor eps = noise_head ? last.eps_pred : epsilon_from_x0(x, last.x0_signal, sched.alpha_bar_at(t));
    x = ddim_step(x, last.x0_signal, eps, t, t_prev, sched, opts);
    if (k + 2 < ts.size() && (k + 1) % cfg.renewal_stride == 0) {
      x = box_renewal(x, sigmoid(last.logits), cfg.renewal_threshold, rng, opts);
    }
  }

  const Tensor boxes = signal_to_boxes(last.x0_signal, opts.scale);
  const double W = static_cast<double>(width), H = static_cast<double>(height);
  std::vector<BoxXYXY> px(N);
  for (std::size_t i = 0; i < N; ++i) {
    const BoxXYXY b = to_xyxy(row_cxcywh(boxes, i));
    px[i] = {std::clamp(b.x1 * W, 0.0, W), std::clamp(b.y1 * H, 0.0, H), std::clamp(b.x2 * W, 0.0, W),
             std::clamp(b.y2 * H, 0.0, H)};
  }
  const Tensor probs = sigmoid(last.logits);
  DetectionResult r = select_detections(px, probs.values(), C, cfg);
  r.trace = std::move(rows);
  r.denoise_calls = calls;
  return r;
}

DetectionResult infer(const Tensor& image, const ParamStore& params, const DetectorConfig& cfg,
                      const NoiseSchedule& sched, std::uint64_t seed, bool trace) {
  if (image.rank() != 4 || image.dim(0) != 1) throw ShapeError("infer expects one image [1,3,H,W]");
  const ParamContext ctx(params);
  const Denoiser net = [&](const Tensor& x_t, std::ptrdiff_t t) {
    const DenoiseOutput o = denoise_forward(image, x_t, {static_cast<double>(t)}, ctx, cfg);
    return DenoiserOutput{o.x0_signal, o.logits, o.eps_pred};
  };
  return run_sampler(net, image.dim(3), image.dim(2), cfg, sched, seed, trace);
}

}  // namespace cdiffdet
