#pragma once

#include <vector>

#include "dsai/tensor.hpp"

namespace dsai {

// Dense-tensor operations with reverse-mode backward rules. Every op records
// onto the thread's active tape when at least one input requires grad; with
// no active tape they are plain forward evaluations.

// a[m,k] * b[k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);

// Batched matmul: a[B,m,k] * b[B,k,n] -> [B,m,n]
Tensor bmm(const Tensor& a, const Tensor& b);

// Swap the last two axes (rank >= 2).
Tensor transpose(const Tensor& x);

// Same element count, new extents; data copied in row-major order.
Tensor reshape(const Tensor& x, std::vector<std::size_t> shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// x + b where b's shape equals a trailing suffix of x's shape.
Tensor add_suffix(const Tensor& x, const Tensor& b);

// x[..., ch, len] + b[ch] broadcast over the length axis.
Tensor add_channel_bias(const Tensor& x, const Tensor& b);

Tensor scale(const Tensor& x, Real c);

// x scaled by a learnable scalar tensor s (size 1).
Tensor scale_param(const Tensor& x, const Tensor& s);

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);

// Exact erf-form GELU: x * Phi(x).
Tensor gelu(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);

// Normalization over the last axis; gamma/beta sized to that axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = 1e-5);

// Per-channel normalization of x[B,ch,len] over (batch, len). In training
// mode batch statistics are used and the running buffers are updated as
// running = (1 - momentum) * running + momentum * batch (population variance);
// in eval mode the running statistics normalize.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool train, Real eps = 1e-5,
                  Real momentum = 0.1);

// Inverted-scaling dropout: identity when train is off; kept elements are
// scaled by 1/(1-rate) so the expectation matches the input.
Tensor dropout(const Tensor& x, Real rate, bool train, Rng* rng);

// Non-overlapping mean pooling of the last axis; trailing remainder dropped.
Tensor avg_pool1d(const Tensor& x, std::size_t window);

// Depthwise convolution along the last axis of x[ch,len] or x[B,ch,len] with
// kernel[ch,k]. pad < 0 selects same padding (symmetric zeros, one extra on
// the right for even k); otherwise pad zeros are added on both sides.
Tensor conv1d_depthwise(const Tensor& x, const Tensor& kernel, long pad = -1);

// Grouped 1x1 convolution over the channel axis of x[ch_in,len] or
// x[B,ch_in,len]; w[ch_out, ch_in/groups].
Tensor pointwise_grouped(const Tensor& x, const Tensor& w, std::size_t groups);

// x[B,C,T] convolved along time with w[F,k] (same padding), one output map
// per filter and input row: -> [B,F,C,T].
Tensor conv_temporal_expand(const Tensor& x, const Tensor& w);

// Depthwise spatial convolution spanning all channels: x[B,F,C,T] with
// w[F,D,C] -> [B,F*D,T]; output map f*D+d sums input map f over channels.
Tensor conv_spatial_depthwise(const Tensor& x, const Tensor& w);

// [B,N,d] -> [B*heads, N, d/heads] and back.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x, std::size_t heads);

Tensor sum_all(const Tensor& x);

// out[b] = x[b, labels[b]] for x[B,K].
Tensor pick(const Tensor& x, const std::vector<int>& labels);

// Mean over the batch of -log softmax(logits)[label], fused stable form.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// x[..., k] * w[k,n] (+ b[n]) applied along the last axis.
Tensor linear(const Tensor& x, const Tensor& w);
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

}  // namespace dsai
