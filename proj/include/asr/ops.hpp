#pragma once

#include <cstdint>
#include <vector>

#include "asr/tensor.hpp"

namespace asr {

// Elementwise ops broadcast both operands numpy-style (right-aligned, extent
// 1 stretches). Every op registers an adjoint on the active graph when any
// input is tracked.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor relu(const Tensor& x);

Tensor reshape(const Tensor& x, Shape target);
Tensor transpose_last_two(const Tensor& x);
Tensor concat_last_axis(const std::vector<Tensor>& parts);
Tensor slice_last_axis(const Tensor& x, Index start, Index len);

/// Fills positions where mask is nonzero with `value`; mask broadcasts to
/// x's shape and receives no gradient.
Tensor masked_fill(const Tensor& x, const Tensor& mask, double value);

/// Batched matrix product [..., m, k] x [..., k, n] -> [..., m, n]; leading
/// extents broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Softmax along the last axis, computed with max-subtraction.
Tensor softmax_last(const Tensor& x);

/// Normalizes the last axis to zero mean / unit variance (eps added to the
/// variance), then applies gain and bias of shape [d].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

/// Train mode zeroes each element with probability p and scales survivors by
/// 1/(1-p); eval mode is the identity and consumes no draws.
Tensor dropout(const Tensor& x, double p, Mode mode, RngStream& rng);

/// Gathers rows of `table` ([vocab, d]) by id; output shape is id_shape + [d].
Tensor embedding_lookup(const Tensor& table, const std::vector<int32_t>& ids,
                        const Shape& id_shape);

/// Concatenates `factor` consecutive time steps along the feature axis,
/// zero-padding the final group. Accepts [T, F] or [B, T, F].
Tensor stack_frames(const Tensor& x, Index factor);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

enum class Reduction { kMean, kSum };

struct LossValue {
  Tensor value;       // scalar
  Index non_pad = 0;  // positions contributing to the loss
};

/// Cross-entropy against the smoothed distribution that puts 1-eps on the
/// target class and eps/(V-1) on each other class. Positions whose target
/// equals pad_id contribute nothing; kMean divides by the non-pad count.
LossValue label_smoothed_loss(const Tensor& logits, const std::vector<int32_t>& targets,
                              double epsilon, int32_t pad_id,
                              Reduction reduction = Reduction::kMean);

}  // namespace asr
