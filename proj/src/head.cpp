#include "cdiffdet/head.hpp"

#include <cmath>

#include "cdiffdet/errors.hpp"

namespace cdiffdet {

namespace {

const double kReluGain = std::sqrt(2.0);

void add_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, double gain,
                std::mt19937_64& rng, bool bias = true) {
  store.add(name + ".w", fan_in_uniform({in, out}, in, gain, rng));
  if (bias) store.add(name + ".b", Tensor::zeros({out}));
}

void add_mlp(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
             double out_gain, std::mt19937_64& rng) {
  add_linear(store, name + ".fc1", in, hidden, kReluGain, rng);
  add_linear(store, name + ".fc2", hidden, out, out_gain, rng);
}

void add_ln(ParamStore& store, const std::string& name, std::size_t d) {
  store.add(name + ".g", Tensor::full({d}, 1.0));
  store.add(name + ".b", Tensor::zeros({d}));
}

void add_attention(ParamStore& store, const std::string& prefix, std::size_t q_in, std::size_t kv_in, std::size_t d,
                   std::mt19937_64& rng) {
  add_linear(store, prefix + ".wq", q_in, d, 1.0, rng, false);
  add_linear(store, prefix + ".wk", kv_in, d, 1.0, rng, false);
  add_linear(store, prefix + ".wv", kv_in, d, 1.0, rng, false);
  add_linear(store, prefix + ".wo", d, d, 1.0, rng, false);
  add_ln(store, prefix + ".ln", d);
}

Tensor proj(const Tensor& x, const ParamContext& p, const std::string& name) { return linear(x, p[name + ".w"], {}); }

Tensor dense(const Tensor& x, const ParamContext& p, const std::string& name) {
  return linear(x, p[name + ".w"], p[name + ".b"]);
}

Tensor mlp(const Tensor& x, const ParamContext& p, const std::string& name) {
  return dense(relu(dense(x, p, name + ".fc1")), p, name + ".fc2");
}

Tensor ln(const Tensor& x, const ParamContext& p, const std::string& name) {
  return layer_norm(x, p[name + ".g"], p[name + ".b"]);
}

void check_tokens(const Tensor& x, std::size_t d, const char* who) {
  if (x.rank() != 3 || x.dim(2) != d) {
    throw ShapeError(std::string(who) + " expects [B,N," + std::to_string(d) + "], got " + shape_str(x.shape()));
  }
}

}  // namespace

void add_head_params(ParamStore& store, const ModelConfig& cfg, std::mt19937_64& rng) {
  const std::size_t d = cfg.model_dim(), df = cfg.gce_dim, C = cfg.num_classes;
  add_attention(store, "head.self", d, d, d, rng);
  if (cfg.instance_interaction) add_attention(store, "head.inst", d, d, d, rng);
  add_attention(store, "head.caf", d, df, d, rng);
  add_mlp(store, "head.caf.gate", df, d, 1, 1.0, rng);

  add_mlp(store, "head.emb.time", d, d, d, 1.0, rng);
  add_mlp(store, "head.emb.pos", d, d, d, 1.0, rng);
  add_mlp(store, "head.emb.ctx", df, d, d, 1.0, rng);

  if (cfg.mmf == "attention") {
    add_linear(store, "head.mmf.wq", d, d, 1.0, rng, false);
    add_linear(store, "head.mmf.wk", 3 * d, d, 1.0, rng, false);
    add_linear(store, "head.mmf.wv", 3 * d, d, 1.0, rng, false);
  } else {
    add_mlp(store, "head.mmf.mod", df, d, 1, 1.0, rng);
  }
  add_ln(store, "head.mmf.ln", d);

  add_mlp(store, "head.final", d, 2 * d, d, 1.0, rng);

  add_mlp(store, "head.cls", d, d, C, 0.1, rng);
  // Low initial foreground prior (0.01) keeps the focal loss stable early on.
  store.set("head.cls.fc2.b", Tensor::full({C}, -std::log(99.0)));
  add_mlp(store, "head.box", d, d, 4, 0.1, rng);
  add_mlp(store, "head.noise", d, d, 4, 1.0, rng);
}

AttentionOutput multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                    double score_dim) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) throw ShapeError("attention expects rank-3 q, k, v");
  const std::size_t B = q.dim(0), Nq = q.dim(1), Nk = k.dim(1), d = q.dim(2);
  if (k.dim(0) != B || v.dim(0) != B || k.dim(2) != d || v.dim(2) != d || v.dim(1) != Nk) {
    throw ShapeError("attention shapes disagree: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()));
  }
  if (heads == 0 || d % heads != 0) throw ConfigError("attention width not divisible by head count");
  const std::size_t dk = d / heads;
  const double scale_by = 1.0 / std::sqrt(score_dim > 0.0 ? score_dim : static_cast<double>(dk));

  auto split = [&](const Tensor& x, std::size_t n) {
    if (heads == 1) return reshape(x, {B, 1, n, dk});
    return permute(reshape(x, {B, n, heads, dk}), {0, 2, 1, 3});
  };
  const Tensor qh = split(q, Nq), kh = split(k, Nk), vh = split(v, Nk);
  AttentionOutput r;
  r.weights = softmax(scale(matmul(qh, transpose_last2(kh)), scale_by), -1);
  const Tensor ctx = matmul(r.weights, vh);
  r.out = heads == 1 ? reshape(ctx, {B, Nq, d}) : reshape(permute(ctx, {0, 2, 1, 3}), {B, Nq, d});
  return r;
}

Tensor self_attention(const Tensor& f_roi, const ParamContext& params, const ModelConfig& cfg,
                      const std::string& prefix) {
  check_tokens(f_roi, cfg.model_dim(), "self_attention");
  const auto att = multihead_attention(proj(f_roi, params, prefix + ".wq"), proj(f_roi, params, prefix + ".wk"),
                                       proj(f_roi, params, prefix + ".wv"), cfg.attention_heads);
  return ln(add(f_roi, proj(att.out, params, prefix + ".wo")), params, prefix + ".ln");
}

CafOutput cross_attention_caf(const Tensor& f_self, const Tensor& g, const ParamContext& params,
                              const ModelConfig& cfg) {
  check_tokens(f_self, cfg.model_dim(), "cross_attention_caf");
  const std::size_t B = f_self.dim(0);
  if (g.rank() != 2 || g.dim(0) != B || g.dim(1) != cfg.gce_dim) {
    throw ShapeError("cross_attention_caf: context must be [B," + std::to_string(cfg.gce_dim) + "], got " +
                     shape_str(g.shape()));
  }
  const Tensor token = reshape(g, {B, 1, cfg.gce_dim});
  const auto att = multihead_attention(proj(f_self, params, "head.caf.wq"), proj(token, params, "head.caf.wk"),
                                       proj(token, params, "head.caf.wv"), cfg.attention_heads);
  CafOutput r;
  r.attended = proj(att.out, params, "head.caf.wo");
  r.beta = reshape(sigmoid(mlp(g, params, "head.caf.gate")), {B, 1, 1});
  const Tensor keep = add_scalar(scale(r.beta, -1.0), 1.0);
  r.modulated = add(mul(r.beta, r.attended), mul(keep, f_self));
  r.out = ln(add(f_self, r.modulated), params, "head.caf.ln");
  return r;
}

Tensor sinusoidal(const std::vector<double>& positions, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ConfigError("sinusoidal width must be even");
  std::vector<double> out(positions.size() * dim);
  for (std::size_t p = 0; p < positions.size(); ++p) {
    for (std::size_t i = 0; i < dim / 2; ++i) {
      const double w = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      out[p * dim + 2 * i] = std::sin(positions[p] * w);
      out[p * dim + 2 * i + 1] = std::cos(positions[p] * w);
    }
  }
  return Tensor({positions.size(), dim}, std::move(out));
}

ConditionalEmbeddings build_embeddings(const std::vector<double>& t, std::size_t num_proposals, const Tensor& g,
                                       const ParamContext& params, const ModelConfig& cfg) {
  const std::size_t B = t.size(), N = num_proposals, d = cfg.model_dim();
  if (B == 0 || N == 0) throw ShapeError("build_embeddings needs B, N >= 1");
  if (g.rank() != 2 || g.dim(0) != B) throw ShapeError("build_embeddings: context batch differs from t");
  std::vector<double> idx(N);
  for (std::size_t i = 0; i < N; ++i) idx[i] = static_cast<double>(i);

  ConditionalEmbeddings e;
  e.time = mlp(sinusoidal(t, d), params, "head.emb.time");
  e.pos = mlp(sinusoidal(idx, d), params, "head.emb.pos");
  e.context = mlp(g, params, "head.emb.ctx");
  const Shape full{B, N, d};
  e.latent = concat({broadcast_to(reshape(e.time, {B, 1, d}), full), broadcast_to(reshape(e.pos, {1, N, d}), full),
                     broadcast_to(reshape(e.context, {B, 1, d}), full)},
                    -1);
  return e;
}

MmfOutput mmf_fuse(const Tensor& f_cross, const ConditionalEmbeddings& emb, const Tensor& g,
                   const ParamContext& params, const ModelConfig& cfg) {
  const std::size_t d = cfg.model_dim();
  check_tokens(f_cross, d, "mmf_fuse");
  const std::size_t B = f_cross.dim(0), N = f_cross.dim(1);
  MmfOutput r;
  if (cfg.mmf == "attention") {
    if (emb.latent.shape() != Shape{B, N, 3 * d}) throw ShapeError("mmf_fuse: latent must be [B,N,3d]");
    const auto att = multihead_attention(proj(f_cross, params, "head.mmf.wq"), proj(emb.latent, params, "head.mmf.wk"),
                                         proj(emb.latent, params, "head.mmf.wv"), 1, static_cast<double>(d));
    r.weights = att.weights;
    r.out = ln(add(f_cross, att.out), params, "head.mmf.ln");
    return r;
  }
  const Shape full{B, N, d};
  const Tensor ctx = broadcast_to(reshape(emb.context, {B, 1, d}), full);
  Tensor fused = add(add(f_cross, broadcast_to(reshape(emb.time, {B, 1, d}), full)),
                     add(broadcast_to(reshape(emb.pos, {1, N, d}), full), ctx));
  fused = ln(fused, params, "head.mmf.ln");
  const Tensor alpha = reshape(sigmoid(mlp(g, params, "head.mmf.mod")), {B, 1, 1});
  r.out = add(fused, mul(alpha, ctx));
  return r;
}

Tensor final_mlp(const Tensor& x, const ParamContext& params, const ModelConfig& cfg, std::mt19937_64* rng) {
  Tensor y = mlp(x, params, "head.final");
  if (rng && cfg.dropout > 0.0) y = dropout(y, cfg.dropout, rng);
  return y;
}

HeadOutputs prediction_heads(const Tensor& f_final, const ParamContext& params, const ModelConfig& cfg) {
  check_tokens(f_final, cfg.model_dim(), "prediction_heads");
  return {mlp(f_final, params, "head.cls"), mlp(f_final, params, "head.box"), mlp(f_final, params, "head.noise")};
}

}  // namespace cdiffdet
