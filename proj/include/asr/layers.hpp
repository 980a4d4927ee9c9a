#pragma once

#include <functional>
#include <optional>

#include "asr/ops.hpp"

namespace asr {

struct LayerNormParams {
  Tensor gain;  // [d]
  Tensor bias;  // [d]
};

struct AttentionParams {
  Tensor wq, bq;  // [d, d], [d]
  Tensor wk, bk;
  Tensor wv, bv;
  Tensor wo, bo;
  Index heads = 1;
};

struct FeedForwardParams {
  Tensor w1, b1;  // [d, d_ff], [d_ff]
  Tensor w2, b2;  // [d_ff, d], [d]
};

struct EncoderLayer {
  AttentionParams self_attn;
  FeedForwardParams ff;
  LayerNormParams norm1, norm2;
};

struct DecoderLayer {
  AttentionParams self_attn;
  AttentionParams cross_attn;
  FeedForwardParams ff;
  LayerNormParams norm1, norm2, norm3;
};

/// Per-site random streams for one training run. Eval-mode forwards take
/// nullptr and must consume nothing.
struct RngBundle {
  RngStream dropout;
  RngStream layer_mask;
  RngStream char_drop;

  static RngBundle from_seed(uint64_t seed) {
    RngStream root(seed);
    return RngBundle{root.derive("dropout"), root.derive("layer_mask"),
                     root.derive("char_dropout")};
  }
};

/// Drop probability for layer l of L under global parameter p: (l/L)*(1-p).
/// l is 1-based; deeper layers drop more often.
double layer_drop_schedule(Index l, Index total_layers, double p);

/// Depth-scaled layer-drop policy for one stack. A default-constructed or
/// disabled() policy never drops and consumes no randomness.
class StochasticPolicy {
 public:
  StochasticPolicy() = default;
  StochasticPolicy(double p, Index total_layers);
  static StochasticPolicy disabled() { return StochasticPolicy(); }

  bool enabled() const { return enabled_; }
  double global_p() const { return p_; }
  Index total_layers() const { return total_layers_; }
  double drop_prob(Index l) const;

 private:
  double p_ = 0.0;
  Index total_layers_ = 0;
  bool enabled_ = false;
};

using SubLayerFn = std::function<Tensor(const Tensor&)>;

/// Pre-normalization combination of a residual branch with its sub-layer
/// output. Train mode with keep=false skips evaluating f entirely; with
/// keep=true the branch is scaled by 1/(1-p_drop). Eval mode runs the full
/// branch unscaled.
Tensor stochastic_combine_masked(const Tensor& x, const SubLayerFn& f, double p_drop,
                                 Mode mode, bool keep);

/// Draws its own keep mask from rng (train mode only) and applies the
/// combination; exposed so the mask statistics can be studied in isolation.
Tensor stochastic_combine(const Tensor& x, const SubLayerFn& f, double p_drop, Mode mode,
                          RngStream& rng);

/// LayerNorm(M * f(x) / (1-p_drop) + x) in train mode, LayerNorm(f(x) + x)
/// in eval mode. When the mask skips the branch the LayerNorm is still
/// applied unless norm_on_skip is false (then x passes through untouched).
Tensor stochastic_residual_masked(const Tensor& x, const SubLayerFn& f,
                                  const LayerNormParams& norm, double p_drop, Mode mode,
                                  bool keep, bool norm_on_skip = true);

Tensor stochastic_residual(const Tensor& x, const SubLayerFn& f, const LayerNormParams& norm,
                           double p_drop, Mode mode, RngStream& rng,
                           bool norm_on_skip = true);

/// Sinusoidal position table [length, width]; width must be even.
Tensor positional_encoding(Index length, Index width);

/// Strict upper-triangular mask [t, t]; 1 marks a blocked key position.
Tensor causal_mask(Index t);

/// [B, 1, t] mask; 1 marks padding beyond each sequence's length.
Tensor pad_mask_from_lengths(const std::vector<Index>& lengths, Index t);

/// softmax(Q K^T / sqrt(width)) V with optional blocking mask (broadcastable
/// to the score shape; nonzero = blocked). Rows with every key blocked are
/// an error. Attention weights are dropped out in train mode.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor* mask, double attn_dropout, Mode mode,
                            RngStream* rng);

/// n parallel attention heads over learned sub-space projections of width
/// d/n, concatenated and re-projected.
Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv, const Tensor* mask,
                            const AttentionParams& params, double attn_dropout, Mode mode,
                            RngStream* rng);

struct LayerOptions {
  double dropout = 0.0;   // applied to attention weights and sub-layer outputs
  bool norm_on_skip = true;
};

/// Self-attention + feed-forward, each wrapped in a stochastic residual.
/// One keep mask is drawn per call in train mode and shared by both
/// sub-layers.
Tensor encoder_layer_forward(const Tensor& x, const EncoderLayer& layer,
                             const Tensor* pad_mask, const StochasticPolicy& policy,
                             Index layer_index, const LayerOptions& opts, Mode mode,
                             RngBundle* rng);

/// Masked self-attention, encoder-decoder attention, feed-forward; one
/// shared keep mask across the three sub-layers.
Tensor decoder_layer_forward(const Tensor& y, const Tensor& memory, const DecoderLayer& layer,
                             const Tensor& causal, const Tensor* memory_pad_mask,
                             const StochasticPolicy& policy, Index layer_index,
                             const LayerOptions& opts, Mode mode, RngBundle* rng);

}  // namespace asr
