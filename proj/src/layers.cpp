#include "asr/layers.hpp"

#include <cmath>
#include <limits>

namespace asr {

double layer_drop_schedule(Index l, Index total_layers, double p) {
  if (total_layers < 1) throw ConfigError("layer_drop_schedule: empty stack");
  if (l < 1 || l > total_layers) {
    throw ConfigError("layer_drop_schedule: layer index " + std::to_string(l) +
                      " outside [1, " + std::to_string(total_layers) + "]");
  }
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("layer_drop_schedule: p must be in [0, 1), got " + std::to_string(p));
  }
  return static_cast<double>(l) / static_cast<double>(total_layers) * (1.0 - p);
}

StochasticPolicy::StochasticPolicy(double p, Index total_layers)
    : p_(p), total_layers_(total_layers), enabled_(true) {
  if (total_layers < 1) throw ConfigError("StochasticPolicy: empty stack");
  // p = 0 would give the top layer a drop probability of exactly 1, which the
  // 1/(1-p_l) rescale cannot represent.
  if (p <= 0.0 || p >= 1.0) {
    throw ConfigError("StochasticPolicy: p must be in (0, 1), got " + std::to_string(p));
  }
}

double StochasticPolicy::drop_prob(Index l) const {
  if (!enabled_) return 0.0;
  return layer_drop_schedule(l, total_layers_, p_);
}

Tensor stochastic_combine_masked(const Tensor& x, const SubLayerFn& f, double p_drop,
                                 Mode mode, bool keep) {
  if (p_drop < 0.0 || p_drop >= 1.0) {
    throw ConfigError("stochastic residual: drop probability must be in [0, 1), got " +
                      std::to_string(p_drop));
  }
  if (mode == Mode::kEval) return add(f(x), x);
  if (!keep) return x;
  return add(scale(f(x), 1.0 / (1.0 - p_drop)), x);
}

Tensor stochastic_combine(const Tensor& x, const SubLayerFn& f, double p_drop, Mode mode,
                          RngStream& rng) {
  const bool keep = mode == Mode::kTrain ? rng.bernoulli(1.0 - p_drop) : true;
  return stochastic_combine_masked(x, f, p_drop, mode, keep);
}

Tensor stochastic_residual_masked(const Tensor& x, const SubLayerFn& f,
                                  const LayerNormParams& norm, double p_drop, Mode mode,
                                  bool keep, bool norm_on_skip) {
  if (mode == Mode::kTrain && !keep && !norm_on_skip) {
    if (p_drop < 0.0 || p_drop >= 1.0) {
      throw ConfigError("stochastic residual: drop probability must be in [0, 1), got " +
                        std::to_string(p_drop));
    }
    return x;
  }
  return layer_norm(stochastic_combine_masked(x, f, p_drop, mode, keep), norm.gain,
                    norm.bias);
}

Tensor stochastic_residual(const Tensor& x, const SubLayerFn& f, const LayerNormParams& norm,
                           double p_drop, Mode mode, RngStream& rng, bool norm_on_skip) {
  const bool keep = mode == Mode::kTrain ? rng.bernoulli(1.0 - p_drop) : true;
  return stochastic_residual_masked(x, f, norm, p_drop, mode, keep, norm_on_skip);
}

Tensor positional_encoding(Index length, Index width) {
  if (width % 2 != 0) throw ConfigError("positional_encoding: width must be even");
  Tensor pe(Shape{length, width});
  double* o = pe.mutable_data().data();
  for (Index pos = 0; pos < length; ++pos) {
    for (Index i = 0; i < width / 2; ++i) {
      const double freq =
          std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) * freq;
      o[pos * width + 2 * i] = std::sin(angle);
      o[pos * width + 2 * i + 1] = std::cos(angle);
    }
  }
  return pe;
}

Tensor causal_mask(Index t) {
  Tensor m(Shape{t, t});
  double* o = m.mutable_data().data();
  for (Index i = 0; i < t; ++i)
    for (Index j = i + 1; j < t; ++j) o[i * t + j] = 1.0;
  return m;
}

Tensor pad_mask_from_lengths(const std::vector<Index>& lengths, Index t) {
  Tensor m(Shape{lengths.size(), 1, t});
  double* o = m.mutable_data().data();
  for (Index b = 0; b < lengths.size(); ++b)
    for (Index j = lengths[b]; j < t; ++j) o[b * t + j] = 1.0;
  return m;
}

namespace {

// Every query row must keep at least one attendable key.
void check_attendable(const Tensor& mask, const Shape& score_shape) {
  const Index tk = score_shape.back();
  const Index tq = score_shape[score_shape.size() - 2];
  const Shape& ms = mask.shape();
  // Reduce the mask over its broadcast view: a row is dead when all tk
  // entries are nonzero for some leading/query index.
  const Index m_tk = ms.back();
  const Index m_tq = ms.size() >= 2 ? ms[ms.size() - 2] : 1;
  const Index lead = mask.numel() / (m_tq * m_tk);
  if (m_tk != tk) return;  // extent-1 key axis can never block a full row
  const double* pm = mask.data().data();
  for (Index b = 0; b < lead; ++b) {
    for (Index i = 0; i < m_tq; ++i) {
      bool all_blocked = true;
      const double* row = pm + (b * m_tq + i) * m_tk;
      for (Index j = 0; j < m_tk; ++j) {
        if (row[j] == 0.0) {
          all_blocked = false;
          break;
        }
      }
      if (all_blocked) {
        throw UsageError("attention: query position " + std::to_string(i) +
                         " has no attendable key (fully masked row, T_q=" +
                         std::to_string(tq) + ")");
      }
    }
  }
}

}  // namespace

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor* mask, double attn_dropout, Mode mode,
                            RngStream* rng) {
  if (q.shape().back() != k.shape().back()) {
    throw ShapeError("attention: query/key widths disagree: " + shape_str(q.shape()) +
                     " vs " + shape_str(k.shape()));
  }
  if (k.shape()[k.rank() - 2] != v.shape()[v.rank() - 2]) {
    throw ShapeError("attention: key/value lengths disagree: " + shape_str(k.shape()) +
                     " vs " + shape_str(v.shape()));
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(q.shape().back()));
  Tensor scores = matmul(scale(q, inv_sqrt), transpose_last_two(k));
  if (mask != nullptr) {
    check_attendable(*mask, scores.shape());
    scores = masked_fill(scores, *mask, -std::numeric_limits<double>::infinity());
  }
  Tensor weights = softmax_last(scores);
  if (mode == Mode::kTrain && attn_dropout > 0.0) {
    if (rng == nullptr) throw UsageError("attention: train mode requires an rng stream");
    weights = dropout(weights, attn_dropout, mode, *rng);
  }
  return matmul(weights, v);
}

Tensor multi_head_attention(const Tensor& x_q, const Tensor& x_kv, const Tensor* mask,
                            const AttentionParams& params, double attn_dropout, Mode mode,
                            RngStream* rng) {
  const Index d = params.wq.shape()[0];
  if (x_q.shape().back() != d || x_kv.shape().back() != d) {
    throw ShapeError("multi_head_attention: inputs must have width " + std::to_string(d));
  }
  if (params.heads == 0 || d % params.heads != 0) {
    throw ConfigError("multi_head_attention: width " + std::to_string(d) +
                      " not divisible into " + std::to_string(params.heads) + " heads");
  }
  const Index hd = d / params.heads;
  Tensor q = add(matmul(x_q, params.wq), params.bq);
  Tensor k = add(matmul(x_kv, params.wk), params.bk);
  Tensor v = add(matmul(x_kv, params.wv), params.bv);
  std::vector<Tensor> heads;
  heads.reserve(params.heads);
  for (Index h = 0; h < params.heads; ++h) {
    Tensor qh = slice_last_axis(q, h * hd, hd);
    Tensor kh = slice_last_axis(k, h * hd, hd);
    Tensor vh = slice_last_axis(v, h * hd, hd);
    heads.push_back(scaled_dot_attention(qh, kh, vh, mask, attn_dropout, mode, rng));
  }
  Tensor cat = concat_last_axis(heads);
  return add(matmul(cat, params.wo), params.bo);
}

namespace {

bool draw_keep(const StochasticPolicy& policy, Index layer_index, Mode mode, RngBundle* rng) {
  if (mode != Mode::kTrain || !policy.enabled()) return true;
  if (rng == nullptr) throw UsageError("layer forward: train mode requires rng streams");
  return rng->layer_mask.bernoulli(1.0 - policy.drop_prob(layer_index));
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& ff) {
  return add(matmul(relu(add(matmul(x, ff.w1), ff.b1)), ff.w2), ff.b2);
}

// Null when nothing will be drawn; dropout itself rejects a missing stream.
RngStream* dropout_stream(Mode mode, RngBundle* rng) {
  if (mode != Mode::kTrain || rng == nullptr) return nullptr;
  return &rng->dropout;
}

}  // namespace

Tensor encoder_layer_forward(const Tensor& x, const EncoderLayer& layer,
                             const Tensor* pad_mask, const StochasticPolicy& policy,
                             Index layer_index, const LayerOptions& opts, Mode mode,
                             RngBundle* rng) {
  const bool keep = draw_keep(policy, layer_index, mode, rng);
  const double p_l = policy.drop_prob(layer_index);
  RngStream* drop_rng = dropout_stream(mode, rng);
  auto with_dropout = [&](Tensor t) {
    if (mode != Mode::kTrain || opts.dropout == 0.0) return t;
    if (drop_rng == nullptr) throw UsageError("layer forward: dropout requires rng streams");
    return dropout(t, opts.dropout, mode, *drop_rng);
  };
  SubLayerFn self_attn = [&](const Tensor& in) {
    return with_dropout(
        multi_head_attention(in, in, pad_mask, layer.self_attn, opts.dropout, mode, drop_rng));
  };
  SubLayerFn ff = [&](const Tensor& in) { return with_dropout(feed_forward(in, layer.ff)); };
  Tensor h = stochastic_residual_masked(x, self_attn, layer.norm1, p_l, mode, keep,
                                        opts.norm_on_skip);
  return stochastic_residual_masked(h, ff, layer.norm2, p_l, mode, keep, opts.norm_on_skip);
}

Tensor decoder_layer_forward(const Tensor& y, const Tensor& memory, const DecoderLayer& layer,
                             const Tensor& causal, const Tensor* memory_pad_mask,
                             const StochasticPolicy& policy, Index layer_index,
                             const LayerOptions& opts, Mode mode, RngBundle* rng) {
  if (memory.numel() == 0 || memory.shape()[memory.rank() - 2] == 0) {
    throw UsageError("decoder layer: zero-length encoder memory");
  }
  const bool keep = draw_keep(policy, layer_index, mode, rng);
  const double p_l = policy.drop_prob(layer_index);
  RngStream* drop_rng = dropout_stream(mode, rng);
  auto with_dropout = [&](Tensor t) {
    if (mode != Mode::kTrain || opts.dropout == 0.0) return t;
    if (drop_rng == nullptr) throw UsageError("layer forward: dropout requires rng streams");
    return dropout(t, opts.dropout, mode, *drop_rng);
  };
  SubLayerFn self_attn = [&](const Tensor& in) {
    return with_dropout(
        multi_head_attention(in, in, &causal, layer.self_attn, opts.dropout, mode, drop_rng));
  };
  SubLayerFn cross_attn = [&](const Tensor& in) {
    return with_dropout(multi_head_attention(in, memory, memory_pad_mask, layer.cross_attn,
                                             opts.dropout, mode, drop_rng));
  };
  SubLayerFn ff = [&](const Tensor& in) { return with_dropout(feed_forward(in, layer.ff)); };
  Tensor h = stochastic_residual_masked(y, self_attn, layer.norm1, p_l, mode, keep,
                                        opts.norm_on_skip);
  h = stochastic_residual_masked(h, cross_attn, layer.norm2, p_l, mode, keep,
                                 opts.norm_on_skip);
  return stochastic_residual_masked(h, ff, layer.norm3, p_l, mode, keep, opts.norm_on_skip);
}

}  // namespace asr
