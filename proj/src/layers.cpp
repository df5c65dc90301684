#include "hfgd/layers.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace hfgd {

// --- convolution -------------------------------------------------------------

Conv2dParams make_conv(int in_ch, int out_ch, int k, int stride, Rng& rng) {
    if (k != 1 && k != 3) {
        throw std::runtime_error("make_conv: kernel size must be 1 or 3");
    }
    const double std = std::sqrt(2.0 / (in_ch * k * k));
    std::vector<double> w(static_cast<size_t>(out_ch) * in_ch * k * k);
    for (auto& v : w) v = rng.normal() * std;
    Conv2dParams p;
    p.weight = Tensor::from_data({out_ch, in_ch, k, k}, std::move(w), true);
    p.bias = Tensor::zeros({out_ch}, true);
    p.stride = stride;
    p.padding = (k - 1) / 2;
    return p;
}

namespace {

struct ConvDims {
    std::int64_t B, C, H, W, O, K, Ho, Wo;
    int stride, pad;
};

// valid output range [lo, hi] for a kernel tap, solving 0 <= o*s + t - pad < limit
inline void tap_range(std::int64_t t, int pad, int s, std::int64_t limit,
                      std::int64_t out_limit, std::int64_t& lo, std::int64_t& hi) {
    const std::int64_t a = pad - t;
    lo = a <= 0 ? 0 : (a + s - 1) / s;
    const std::int64_t b = limit - 1 - t + pad;
    hi = b < 0 ? -1 : std::min(out_limit - 1, b / s);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
    if (x.ndim() != 4) {
        throw std::runtime_error("conv2d: input must be [B,C,H,W], got " +
                                 shape_str(x.shape()));
    }
    ConvDims d;
    d.B = x.dim(0);
    d.C = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.O = p.weight.dim(0);
    d.K = p.weight.dim(2);
    d.stride = p.stride;
    d.pad = p.padding;
    if (p.weight.dim(1) != d.C) {
        throw std::runtime_error("conv2d: weight expects " +
                                 std::to_string(p.weight.dim(1)) + " channels, input has " +
                                 std::to_string(d.C));
    }
    if (p.bias.numel() != d.O) throw std::runtime_error("conv2d: bias/out_ch mismatch");
    const std::int64_t hn = d.H + 2 * d.pad - d.K;
    const std::int64_t wn = d.W + 2 * d.pad - d.K;
    if (hn < 0 || wn < 0) {
        throw std::runtime_error("conv2d: kernel does not fit input " +
                                 shape_str(x.shape()));
    }
    // floor convention: trailing rows/cols that no window reaches are unused
    d.Ho = hn / d.stride + 1;
    d.Wo = wn / d.stride + 1;

    const double* xv = x.data().data();
    const double* wv = p.weight.data().data();
    const double* bv = p.bias.data().data();
    std::vector<double> out(static_cast<size_t>(d.B * d.O * d.Ho * d.Wo));

    for (std::int64_t b = 0; b < d.B; ++b) {
        for (std::int64_t o = 0; o < d.O; ++o) {
            double* oplane = out.data() + (b * d.O + o) * d.Ho * d.Wo;
            const double bias = bv[o];
            for (std::int64_t i = 0; i < d.Ho * d.Wo; ++i) oplane[i] = bias;
            for (std::int64_t c = 0; c < d.C; ++c) {
                const double* xplane = xv + (b * d.C + c) * d.H * d.W;
                const double* wbase = wv + (o * d.C + c) * d.K * d.K;
                for (std::int64_t kh = 0; kh < d.K; ++kh) {
                    std::int64_t oh_lo, oh_hi;
                    tap_range(kh, d.pad, d.stride, d.H, d.Ho, oh_lo, oh_hi);
                    for (std::int64_t kw = 0; kw < d.K; ++kw) {
                        const double wt = wbase[kh * d.K + kw];
                        std::int64_t ow_lo, ow_hi;
                        tap_range(kw, d.pad, d.stride, d.W, d.Wo, ow_lo, ow_hi);
                        for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                            const std::int64_t ih = oh * d.stride + kh - d.pad;
                            const double* xrow = xplane + ih * d.W;
                            double* orow = oplane + oh * d.Wo;
                            for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                orow[ow] += wt * xrow[ow * d.stride + kw - d.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    return make_node(
        {d.B, d.O, d.Ho, d.Wo}, std::move(out), {x, p.weight, p.bias},
        [d](TensorImpl& self) {
            const double* g = self.grad.data();
            const double* xv = self.parents[0].data().data();
            const double* wv = self.parents[1].data().data();
            if (double* gb = grad_target_of(self.parents[2])) {
                for (std::int64_t b = 0; b < d.B; ++b) {
                    for (std::int64_t o = 0; o < d.O; ++o) {
                        const double* gplane = g + (b * d.O + o) * d.Ho * d.Wo;
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < d.Ho * d.Wo; ++i) acc += gplane[i];
                        gb[o] += acc;
                    }
                }
            }
            if (double* gw = grad_target_of(self.parents[1])) {
                for (std::int64_t b = 0; b < d.B; ++b) {
                    for (std::int64_t o = 0; o < d.O; ++o) {
                        const double* gplane = g + (b * d.O + o) * d.Ho * d.Wo;
                        for (std::int64_t c = 0; c < d.C; ++c) {
                            const double* xplane = xv + (b * d.C + c) * d.H * d.W;
                            double* wbase = gw + (o * d.C + c) * d.K * d.K;
                            for (std::int64_t kh = 0; kh < d.K; ++kh) {
                                std::int64_t oh_lo, oh_hi;
                                tap_range(kh, d.pad, d.stride, d.H, d.Ho, oh_lo, oh_hi);
                                for (std::int64_t kw = 0; kw < d.K; ++kw) {
                                    std::int64_t ow_lo, ow_hi;
                                    tap_range(kw, d.pad, d.stride, d.W, d.Wo, ow_lo, ow_hi);
                                    double acc = 0.0;
                                    for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                                        const std::int64_t ih = oh * d.stride + kh - d.pad;
                                        const double* xrow = xplane + ih * d.W;
                                        const double* grow = gplane + oh * d.Wo;
                                        for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                            acc += grow[ow] * xrow[ow * d.stride + kw - d.pad];
                                        }
                                    }
                                    wbase[kh * d.K + kw] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if (double* gx = grad_target_of(self.parents[0])) {
                for (std::int64_t b = 0; b < d.B; ++b) {
                    for (std::int64_t o = 0; o < d.O; ++o) {
                        const double* gplane = g + (b * d.O + o) * d.Ho * d.Wo;
                        for (std::int64_t c = 0; c < d.C; ++c) {
                            double* xplane = gx + (b * d.C + c) * d.H * d.W;
                            const double* wbase = wv + (o * d.C + c) * d.K * d.K;
                            for (std::int64_t kh = 0; kh < d.K; ++kh) {
                                std::int64_t oh_lo, oh_hi;
                                tap_range(kh, d.pad, d.stride, d.H, d.Ho, oh_lo, oh_hi);
                                for (std::int64_t kw = 0; kw < d.K; ++kw) {
                                    const double wt = wbase[kh * d.K + kw];
                                    std::int64_t ow_lo, ow_hi;
                                    tap_range(kw, d.pad, d.stride, d.W, d.Wo, ow_lo, ow_hi);
                                    for (std::int64_t oh = oh_lo; oh <= oh_hi; ++oh) {
                                        const std::int64_t ih = oh * d.stride + kh - d.pad;
                                        double* xrow = xplane + ih * d.W;
                                        const double* grow = gplane + oh * d.Wo;
                                        for (std::int64_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                            xrow[ow * d.stride + kw - d.pad] += wt * grow[ow];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

// --- batch normalization -------------------------------------------------------

NormParams make_norm(int ch) {
    NormParams p;
    p.gamma = Tensor::full({ch}, 1.0, true);
    p.beta = Tensor::zeros({ch}, true);
    p.running_mean = Tensor::zeros({ch});
    p.running_var = Tensor::full({ch}, 1.0);
    return p;
}

Tensor batch_norm(const Tensor& x, NormParams& p, NormMode mode) {
    if (x.ndim() != 4) {
        throw std::runtime_error("batch_norm: input must be [B,C,H,W], got " +
                                 shape_str(x.shape()));
    }
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (p.gamma.numel() != C) {
        throw std::runtime_error("batch_norm: affine for " +
                                 std::to_string(p.gamma.numel()) + " channels, input has " +
                                 std::to_string(C));
    }
    const std::int64_t plane = H * W;
    const std::int64_t N = B * plane;
    const double* xv = x.data().data();

    std::vector<double> mean(static_cast<size_t>(C)), invstd(static_cast<size_t>(C));
    if (mode == NormMode::train) {
        if (N < 2) throw std::runtime_error("batch_norm: train mode needs B*H*W >= 2");
        for (std::int64_t c = 0; c < C; ++c) {
            double m = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const double* px = xv + (b * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) m += px[i];
            }
            m /= static_cast<double>(N);
            double var = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const double* px = xv + (b * C + c) * plane;
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double dv = px[i] - m;
                    var += dv * dv;
                }
            }
            var /= static_cast<double>(N);
            mean[static_cast<size_t>(c)] = m;
            invstd[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + p.eps);
            auto& rm = p.running_mean.mutable_data();
            auto& rv = p.running_var.mutable_data();
            rm[static_cast<size_t>(c)] = (1.0 - p.momentum) * rm[static_cast<size_t>(c)] +
                                         p.momentum * m;
            rv[static_cast<size_t>(c)] = (1.0 - p.momentum) * rv[static_cast<size_t>(c)] +
                                         p.momentum * var;
        }
    } else {
        const auto& rm = p.running_mean.data();
        const auto& rv = p.running_var.data();
        for (std::int64_t c = 0; c < C; ++c) {
            mean[static_cast<size_t>(c)] = rm[static_cast<size_t>(c)];
            invstd[static_cast<size_t>(c)] = 1.0 / std::sqrt(rv[static_cast<size_t>(c)] + p.eps);
        }
    }

    const auto& gv = p.gamma.data();
    const auto& bv = p.beta.data();
    std::vector<double> out(static_cast<size_t>(B * C * plane));
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(B * C * plane));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double* px = xv + (b * C + c) * plane;
            double* po = out.data() + (b * C + c) * plane;
            double* ph = xhat->data() + (b * C + c) * plane;
            const double m = mean[static_cast<size_t>(c)];
            const double is = invstd[static_cast<size_t>(c)];
            const double g = gv[static_cast<size_t>(c)];
            const double bb = bv[static_cast<size_t>(c)];
            for (std::int64_t i = 0; i < plane; ++i) {
                ph[i] = (px[i] - m) * is;
                po[i] = g * ph[i] + bb;
            }
        }
    }

    auto sh_invstd = std::make_shared<std::vector<double>>(std::move(invstd));
    const bool train = mode == NormMode::train;
    return make_node(
        x.shape(), std::move(out), {x, p.gamma, p.beta},
        [B, C, plane, N, xhat, sh_invstd, train](TensorImpl& self) {
            const double* g = self.grad.data();
            const double* gammav = self.parents[1].data().data();
            // per-channel reductions shared by all three gradients
            std::vector<double> sum_g(static_cast<size_t>(C), 0.0);
            std::vector<double> sum_gx(static_cast<size_t>(C), 0.0);
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t c = 0; c < C; ++c) {
                    const double* pg = g + (b * C + c) * plane;
                    const double* ph = xhat->data() + (b * C + c) * plane;
                    double sg = 0.0, sgx = 0.0;
                    for (std::int64_t i = 0; i < plane; ++i) {
                        sg += pg[i];
                        sgx += pg[i] * ph[i];
                    }
                    sum_g[static_cast<size_t>(c)] += sg;
                    sum_gx[static_cast<size_t>(c)] += sgx;
                }
            }
            if (double* gb = grad_target_of(self.parents[2])) {
                for (std::int64_t c = 0; c < C; ++c) gb[c] += sum_g[static_cast<size_t>(c)];
            }
            if (double* gg = grad_target_of(self.parents[1])) {
                for (std::int64_t c = 0; c < C; ++c) gg[c] += sum_gx[static_cast<size_t>(c)];
            }
            if (double* gx = grad_target_of(self.parents[0])) {
                for (std::int64_t b = 0; b < B; ++b) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        const double* pg = g + (b * C + c) * plane;
                        const double* ph = xhat->data() + (b * C + c) * plane;
                        double* px = gx + (b * C + c) * plane;
                        const double gis = gammav[c] * (*sh_invstd)[static_cast<size_t>(c)];
                        if (train) {
                            const double mg = sum_g[static_cast<size_t>(c)] / N;
                            const double mgx = sum_gx[static_cast<size_t>(c)] / N;
                            for (std::int64_t i = 0; i < plane; ++i) {
                                px[i] += gis * (pg[i] - mg - ph[i] * mgx);
                            }
                        } else {
                            for (std::int64_t i = 0; i < plane; ++i) px[i] += gis * pg[i];
                        }
                    }
                }
            }
        });
}

// --- bilinear upsampling -------------------------------------------------------

namespace {

struct LerpTap {
    std::int64_t i0, i1;
    double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<LerpTap> lerp_taps(std::int64_t in, std::int64_t out, int factor) {
    std::vector<LerpTap> taps(static_cast<size_t>(out));
    for (std::int64_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
        src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
        const std::int64_t i0 = static_cast<std::int64_t>(std::floor(src));
        taps[static_cast<size_t>(o)] = {i0, std::min(i0 + 1, in - 1), src - i0};
    }
    return taps;
}

}  // namespace

Tensor bilinear_upsample(const Tensor& x, int factor) {
    if (factor != 2 && factor != 4 && factor != 8 && factor != 16) {
        throw std::runtime_error("bilinear_upsample: factor must be one of 2,4,8,16");
    }
    if (x.ndim() != 4) {
        throw std::runtime_error("bilinear_upsample: input must be [B,C,H,W], got " +
                                 shape_str(x.shape()));
    }
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t Ho = H * factor, Wo = W * factor;
    auto htaps = std::make_shared<std::vector<LerpTap>>(lerp_taps(H, Ho, factor));
    auto wtaps = std::make_shared<std::vector<LerpTap>>(lerp_taps(W, Wo, factor));

    const double* xv = x.data().data();
    std::vector<double> out(static_cast<size_t>(B * C * Ho * Wo));
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* px = xv + bc * H * W;
        double* po = out.data() + bc * Ho * Wo;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
            const LerpTap& th = (*htaps)[static_cast<size_t>(oh)];
            const double* r0 = px + th.i0 * W;
            const double* r1 = px + th.i1 * W;
            double* orow = po + oh * Wo;
            for (std::int64_t ow = 0; ow < Wo; ++ow) {
                const LerpTap& tw = (*wtaps)[static_cast<size_t>(ow)];
                const double top = r0[tw.i0] * (1.0 - tw.w1) + r0[tw.i1] * tw.w1;
                const double bot = r1[tw.i0] * (1.0 - tw.w1) + r1[tw.i1] * tw.w1;
                orow[ow] = top * (1.0 - th.w1) + bot * th.w1;
            }
        }
    }

    return make_node({B, C, Ho, Wo}, std::move(out), {x},
                     [B, C, H, W, Ho, Wo, htaps, wtaps](TensorImpl& self) {
                         double* gx = grad_target_of(self.parents[0]);
                         if (!gx) return;
                         const double* g = self.grad.data();
                         for (std::int64_t bc = 0; bc < B * C; ++bc) {
                             double* px = gx + bc * H * W;
                             const double* pg = g + bc * Ho * Wo;
                             for (std::int64_t oh = 0; oh < Ho; ++oh) {
                                 const LerpTap& th = (*htaps)[static_cast<size_t>(oh)];
                                 const double* grow = pg + oh * Wo;
                                 for (std::int64_t ow = 0; ow < Wo; ++ow) {
                                     const LerpTap& tw = (*wtaps)[static_cast<size_t>(ow)];
                                     const double gv = grow[ow];
                                     px[th.i0 * W + tw.i0] += gv * (1.0 - th.w1) * (1.0 - tw.w1);
                                     px[th.i0 * W + tw.i1] += gv * (1.0 - th.w1) * tw.w1;
                                     px[th.i1 * W + tw.i0] += gv * th.w1 * (1.0 - tw.w1);
                                     px[th.i1 * W + tw.i1] += gv * th.w1 * tw.w1;
                                 }
                             }
                         }
                     });
}

// --- attention -----------------------------------------------------------------

AttentionParams make_attention(int d_in, int d_attn, Rng& rng) {
    const double std = std::sqrt(2.0 / d_in) * 0.1;
    auto proj = [&] {
        std::vector<double> w(static_cast<size_t>(d_in) * d_attn);
        for (auto& v : w) v = rng.normal() * std;
        return Tensor::from_data({d_in, d_attn}, std::move(w), true);
    };
    AttentionParams p;
    p.wq = proj();
    p.wk = proj();
    p.wv = proj();
    return p;
}

AttentionResult attention_tokens(const Tensor& x, const AttentionParams& p) {
    if (x.ndim() != 3) {
        throw std::runtime_error("attention_tokens: input must be [G,N,C], got " +
                                 shape_str(x.shape()));
    }
    const std::int64_t G = x.dim(0), N = x.dim(1), C = x.dim(2);
    if (p.wq.dim(0) != C || p.wk.dim(0) != C || p.wv.dim(0) != C) {
        throw std::runtime_error("attention_tokens: projections expect d_in " +
                                 std::to_string(p.wq.dim(0)) + ", tokens have " +
                                 std::to_string(C));
    }
    const std::int64_t D = p.wq.dim(1);
    Tensor flat = reshape(x, {G * N, C});
    Tensor q = reshape(matmul(flat, p.wq), {G, N, D});
    Tensor k = reshape(matmul(flat, p.wk), {G, N, D});
    Tensor v = reshape(matmul(flat, p.wv), {G, N, D});
    Tensor scores = scale(bmm(q, permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(D)));
    AttentionResult r;
    r.weights = softmax(scores, 2);
    r.out = bmm(r.weights, v);
    return r;
}

Tensor self_attention(const Tensor& x, const AttentionParams& p) {
    if (x.ndim() != 4) {
        throw std::runtime_error("self_attention: input must be [B,C,H,W], got " +
                                 shape_str(x.shape()));
    }
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    // [B,C,H,W] -> [B, H*W, C]
    Tensor tokens = reshape(permute(x, {0, 2, 3, 1}), {B, H * W, C});
    Tensor out = attention_tokens(tokens, p).out;  // [B, N, D]
    const std::int64_t D = p.wq.dim(1);
    return permute(reshape(out, {B, H, W, D}), {0, 3, 1, 2});
}

Tensor axial_attention(const Tensor& x, const AttentionParams& p_row,
                       const AttentionParams& p_col) {
    if (x.ndim() != 4) {
        throw std::runtime_error("axial_attention: input must be [B,C,H,W], got " +
                                 shape_str(x.shape()));
    }
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (const AttentionParams* p : {&p_row, &p_col}) {
        if (p->wq.dim(0) != C || p->wq.dim(1) != C) {
            throw std::runtime_error(
                "axial_attention: residual form needs square projections matching " +
                std::to_string(C) + " channels");
        }
    }
    // row pass: tokens along W within each (b, h)
    Tensor rows = reshape(permute(x, {0, 2, 3, 1}), {B * H, W, C});
    Tensor row_out = attention_tokens(rows, p_row).out;
    Tensor y = add(x, permute(reshape(row_out, {B, H, W, C}), {0, 3, 1, 2}));
    // column pass: tokens along H within each (b, w)
    Tensor cols = reshape(permute(y, {0, 3, 2, 1}), {B * W, H, C});
    Tensor col_out = attention_tokens(cols, p_col).out;
    return add(y, permute(reshape(col_out, {B, W, H, C}), {0, 3, 2, 1}));
}

}  // namespace hfgd
