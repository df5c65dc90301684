#pragma once

#include "hfgd/rng.hpp"
#include "hfgd/tensor.hpp"

namespace hfgd {

// --- convolution -------------------------------------------------------------

struct Conv2dParams {
    Tensor weight;  // [out_ch, in_ch, k, k]
    Tensor bias;    // [out_ch]
    int stride = 1;
    int padding = 0;  // zero padding; (k-1)/2 keeps stride-1 output size

    int out_ch() const { return static_cast<int>(weight.dim(0)); }
    int in_ch() const { return static_cast<int>(weight.dim(1)); }
    int ksize() const { return static_cast<int>(weight.dim(2)); }
};

// He-normal weights (std = sqrt(2/fan_in)), zero bias, padding (k-1)/2.
Conv2dParams make_conv(int in_ch, int out_ch, int k, int stride, Rng& rng);

// Cross-correlation with zero padding over [B,C,H,W].
Tensor conv2d(const Tensor& x, const Conv2dParams& p);

// --- batch normalization -------------------------------------------------------

enum class NormMode { train, eval };

struct NormParams {
    Tensor gamma, beta;                    // trainable, [ch]
    Tensor running_mean, running_var;      // buffers, [ch]
    double momentum = 0.1;
    double eps = 1e-5;
};

NormParams make_norm(int ch);

// Train mode standardizes with batch statistics (biased variance) and folds
// them into the running buffers; eval mode uses the running buffers only.
Tensor batch_norm(const Tensor& x, NormParams& p, NormMode mode);

// --- bilinear upsampling -------------------------------------------------------

// Half-pixel centers: src = (dst + 0.5)/factor - 0.5, clamped to the input
// range. Backward is the exact transpose of the interpolation weights.
Tensor bilinear_upsample(const Tensor& x, int factor);

// --- attention -----------------------------------------------------------------

struct AttentionParams {
    Tensor wq, wk, wv;  // [d_in, d_attn]

    int d_in() const { return static_cast<int>(wq.dim(0)); }
    int d_attn() const { return static_cast<int>(wq.dim(1)); }
};

// He-normal scaled by 0.1 so attention starts close to a no-op contribution.
AttentionParams make_attention(int d_in, int d_attn, Rng& rng);

struct AttentionResult {
    Tensor out;      // [G, N, d_attn]
    Tensor weights;  // [G, N, N], rows sum to 1
};

// Scaled dot-product attention over token groups: x is [G, N, d_in], each
// group of N tokens attends within itself with shared projections.
AttentionResult attention_tokens(const Tensor& x, const AttentionParams& p);

// Full self-attention over all H*W positions: [B,C,H,W] -> [B,d_attn,H,W].
Tensor self_attention(const Tensor& x, const AttentionParams& p);

// Row pass then column pass, each with a residual connection. Requires
// d_attn == d_in == C so the residual adds up.
Tensor axial_attention(const Tensor& x, const AttentionParams& p_row,
                       const AttentionParams& p_col);

}  // namespace hfgd
