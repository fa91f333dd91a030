#pragma once

// Proposal-side modules: inter-proposal self-attention, gated cross-attention
// against the global context vector, conditional embeddings, multi-modal
// fusion, the bottleneck MLP and the three prediction heads.

#include <random>
#include <string>
#include <vector>

#include "cdiffdet/config.hpp"
#include "cdiffdet/params.hpp"
#include "cdiffdet/tensor.hpp"

namespace cdiffdet {

void add_head_params(ParamStore& store, const ModelConfig& cfg, std::mt19937_64& rng);

struct AttentionOutput {
  Tensor out;      // [B,Nq,d] after head merge (before any output projection)
  Tensor weights;  // [B,h,Nq,Nk], rows sum to 1
};

// Scaled dot-product attention split into `heads` equal slices of the last
// axis. Scores are divided by sqrt(score_dim); score_dim = 0 means the head
// width.
AttentionOutput multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                    double score_dim = 0.0);

// LayerNorm(x + W_O * MHA(xW_Q, xW_K, xW_V)). prefix names the parameter group.
Tensor self_attention(const Tensor& f_roi, const ParamContext& params, const ModelConfig& cfg,
                      const std::string& prefix = "head.self");

struct CafOutput {
  Tensor attended;   // W_O-projected attention output, [B,N,d]
  Tensor beta;       // gate, [B,1,1]
  Tensor modulated;  // beta * attended + (1 - beta) * f_self
  Tensor out;        // LayerNorm(f_self + modulated)
};

// g: [B, gce_dim] used as a single key/value token.
CafOutput cross_attention_caf(const Tensor& f_self, const Tensor& g, const ParamContext& params,
                              const ModelConfig& cfg);

// Interleaved sin/cos encoding: row p is [sin(p w_0), cos(p w_0), sin(p w_1), ...]
// with w_i = 10000^(-2i/dim). dim must be even.
Tensor sinusoidal(const std::vector<double>& positions, std::size_t dim);

struct ConditionalEmbeddings {
  Tensor time;     // [B,d]
  Tensor pos;      // [N,d]
  Tensor context;  // [B,d]
  Tensor latent;   // [B,N,3d], (time, position, context)
};

// t holds one timestep per batch entry.
ConditionalEmbeddings build_embeddings(const std::vector<double>& t, std::size_t num_proposals, const Tensor& g,
                                       const ParamContext& params, const ModelConfig& cfg);

struct MmfOutput {
  Tensor out;      // [B,N,d]
  Tensor weights;  // [B,1,N,N] for the attention variant, empty otherwise
};

MmfOutput mmf_fuse(const Tensor& f_cross, const ConditionalEmbeddings& emb, const Tensor& g,
                   const ParamContext& params, const ModelConfig& cfg);

// ReLU(x W1 + b1) W2 + b2 with hidden width 2d. Dropout applies only when rng
// is given and cfg.dropout > 0.
Tensor final_mlp(const Tensor& x, const ParamContext& params, const ModelConfig& cfg,
                 std::mt19937_64* rng = nullptr);

struct HeadOutputs {
  Tensor logits;      // [B,N,C]
  Tensor box_deltas;  // [B,N,4]
  Tensor eps_pred;    // [B,N,4]
};

HeadOutputs prediction_heads(const Tensor& f_final, const ParamContext& params, const ModelConfig& cfg);

}  // namespace cdiffdet
