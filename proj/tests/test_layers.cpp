#include <doctest.h>

#include <cmath>
#include <vector>

#include "hfgd/layers.hpp"
#include "hfgd/rng.hpp"
#include "hfgd/tensor.hpp"

using namespace hfgd;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = false,
                     double scale = 1.0, double offset = 0.0) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.normal() * scale + offset;
    return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// direct 7-loop convolution, the independent oracle
std::vector<double> naive_conv(const std::vector<double>& x, const std::vector<double>& w,
                               const std::vector<double>& bias, std::int64_t B,
                               std::int64_t C, std::int64_t H, std::int64_t W,
                               std::int64_t O, std::int64_t K, int stride, int pad) {
    const std::int64_t Ho = (H + 2 * pad - K) / stride + 1;
    const std::int64_t Wo = (W + 2 * pad - K) / stride + 1;
    std::vector<double> out(static_cast<size_t>(B * O * Ho * Wo));
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t o = 0; o < O; ++o)
            for (std::int64_t oh = 0; oh < Ho; ++oh)
                for (std::int64_t ow = 0; ow < Wo; ++ow) {
                    double acc = bias[static_cast<size_t>(o)];
                    for (std::int64_t c = 0; c < C; ++c)
                        for (std::int64_t kh = 0; kh < K; ++kh)
                            for (std::int64_t kw = 0; kw < K; ++kw) {
                                const std::int64_t ih = oh * stride + kh - pad;
                                const std::int64_t iw = ow * stride + kw - pad;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += w[static_cast<size_t>(((o * C + c) * K + kh) * K + kw)] *
                                       x[static_cast<size_t>(((b * C + c) * H + ih) * W + iw)];
                            }
                    out[static_cast<size_t>(((b * O + o) * Ho + oh) * Wo + ow)] = acc;
                }
    return out;
}

}  // namespace

TEST_SUITE_BEGIN("layers");

TEST_CASE("conv2d 1x1 identity kernel is a biased copy") {
    Rng rng(101);
    Tensor x = random_tensor({2, 3, 4, 5}, rng);
    Conv2dParams p;
    // identity: out channel i copies in channel i
    std::vector<double> w(9, 0.0);
    w[0] = w[4] = w[8] = 1.0;  // 3x3 identity matrix as [3,3,1,1]
    p.weight = Tensor::from_data({3, 3, 1, 1}, std::move(w), true);
    p.bias = Tensor::from_data({3}, {0.5, -1.0, 0.0}, true);
    p.stride = 1;
    p.padding = 0;
    Tensor y = conv2d(x, p);
    REQUIRE(y.shape() == x.shape());
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t h = 0; h < 4; ++h)
                for (std::int64_t wi = 0; wi < 5; ++wi) {
                    const double bias = p.bias.data()[static_cast<size_t>(c)];
                    CHECK(y.at({b, c, h, wi}) ==
                          doctest::Approx(x.at({b, c, h, wi}) + bias).epsilon(1e-15));
                }
}

TEST_CASE("conv2d 3x3 ones kernel on constant image counts the window") {
    const double cval = 1.7;
    Tensor x = Tensor::full({1, 1, 5, 6}, cval);
    Conv2dParams p;
    p.weight = Tensor::full({1, 1, 3, 3}, 1.0, true);
    p.bias = Tensor::from_data({1}, {0.25}, true);
    p.stride = 1;
    p.padding = 1;
    Tensor y = conv2d(x, p);
    REQUIRE(y.shape() == Shape{1, 1, 5, 6});
    // interior: full 3x3 window
    CHECK(y.at({0, 0, 2, 3}) == doctest::Approx(9 * cval + 0.25));
    // corners: 2x2 of the window lands inside
    CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(4 * cval + 0.25));
    CHECK(y.at({0, 0, 4, 5}) == doctest::Approx(4 * cval + 0.25));
    // edge (non-corner): 2x3 window
    CHECK(y.at({0, 0, 0, 3}) == doctest::Approx(6 * cval + 0.25));
}

TEST_CASE("conv2d matches the naive-loop oracle") {
    Rng rng(103);
    for (const auto& [k, stride] : std::vector<std::pair<int, int>>{{1, 1}, {3, 1}, {3, 2}, {1, 2}}) {
        Tensor x = random_tensor({2, 3, 8, 6}, rng);
        Conv2dParams p = make_conv(3, 4, k, stride, rng);
        // give the bias some signal too
        for (auto& b : p.bias.mutable_data()) b = rng.normal();
        Tensor y = conv2d(x, p);
        auto ref = naive_conv(x.data(), p.weight.data(), p.bias.data(), 2, 3, 8, 6, 4, k,
                              stride, p.padding);
        REQUIRE(y.data().size() == ref.size());
        for (size_t i = 0; i < ref.size(); ++i) {
            CHECK(std::fabs(y.data()[i] - ref[i]) <= 1e-12);
        }
    }
}

TEST_CASE("conv2d shape and error contract") {
    Rng rng(104);
    Tensor x = random_tensor({1, 2, 7, 7}, rng);
    Conv2dParams p = make_conv(2, 3, 3, 2, rng);
    CHECK(conv2d(x, p).shape() == Shape{1, 3, 4, 4});  // (7+2-3)/2+1

    Conv2dParams bad = make_conv(5, 3, 3, 1, rng);
    CHECK_THROWS(conv2d(x, bad));  // channel mismatch

    // floor convention for strided outputs
    Conv2dParams s2 = make_conv(2, 3, 3, 2, rng);
    s2.padding = 0;
    CHECK(conv2d(x, s2).shape() == Shape{1, 3, 3, 3});  // (7-3)/2+1
    Tensor x2 = random_tensor({1, 2, 7, 6}, rng);
    CHECK(conv2d(x2, s2).shape() == Shape{1, 3, 3, 2});  // floor(3/2)+1
    // even input, stride 2, pad 1: the standard halving
    CHECK(conv2d(random_tensor({1, 2, 64, 64}, rng), p).shape() == Shape{1, 3, 32, 32});

    CHECK_THROWS(conv2d(random_tensor({1, 2, 2, 5}, rng), s2));  // kernel does not fit
    CHECK_THROWS(make_conv(2, 3, 5, 1, rng));  // kernel size outside {1,3}
    CHECK_THROWS(conv2d(random_tensor({2, 7, 7}, rng), p));
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(105);
    Tensor x = random_tensor({2, 2, 5, 4}, rng, true);
    Conv2dParams p = make_conv(2, 3, 3, 2, rng);
    auto f = [&] { return mean_all(mul(conv2d(x, p), conv2d(x, p))); };
    GradCheckReport rep = finite_diff_check(
        f, {{"x", x}, {"w", p.weight}, {"b", p.bias}});
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("batch_norm standardizes per channel in train mode") {
    Rng rng(107);
    Tensor x = random_tensor({3, 4, 5, 5}, rng, false, 2.5, -1.0);
    NormParams p = make_norm(4);
    Tensor y = batch_norm(x, p, NormMode::train);
    const std::int64_t N = 3 * 5 * 5;
    for (std::int64_t c = 0; c < 4; ++c) {
        double mean = 0, var = 0;
        for (std::int64_t b = 0; b < 3; ++b)
            for (std::int64_t h = 0; h < 5; ++h)
                for (std::int64_t w = 0; w < 5; ++w) mean += y.at({b, c, h, w});
        mean /= N;
        for (std::int64_t b = 0; b < 3; ++b)
            for (std::int64_t h = 0; h < 5; ++h)
                for (std::int64_t w = 0; w < 5; ++w) {
                    const double d = y.at({b, c, h, w}) - mean;
                    var += d * d;
                }
        var /= N;
        CHECK(std::fabs(mean) < 1e-10);
        CHECK(std::fabs(var - 1.0) < 1e-4);  // eps in the denominator shrinks it slightly
    }
}

TEST_CASE("batch_norm affine maps standardized input to (mean 1, std 2)") {
    Rng rng(109);
    // build input with exact zero mean, unit biased variance per channel
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    auto& xv = x.mutable_data();
    const std::int64_t C = 3, plane = 16, B = 2;
    for (std::int64_t c = 0; c < C; ++c) {
        double m = 0, v = 0;
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t i = 0; i < plane; ++i) m += xv[static_cast<size_t>((b * C + c) * plane + i)];
        m /= (B * plane);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t i = 0; i < plane; ++i) {
                auto& e = xv[static_cast<size_t>((b * C + c) * plane + i)];
                e -= m;
                v += e * e;
            }
        v /= (B * plane);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t i = 0; i < plane; ++i)
                xv[static_cast<size_t>((b * C + c) * plane + i)] /= std::sqrt(v);
    }
    NormParams p = make_norm(3);
    p.gamma = Tensor::full({3}, 2.0, true);
    p.beta = Tensor::full({3}, 1.0, true);
    Tensor y = batch_norm(x, p, NormMode::train);
    for (std::int64_t c = 0; c < C; ++c) {
        double m = 0, v = 0;
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t h = 0; h < 4; ++h)
                for (std::int64_t w = 0; w < 4; ++w) m += y.at({b, c, h, w});
        m /= (B * plane);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t h = 0; h < 4; ++h)
                for (std::int64_t w = 0; w < 4; ++w) {
                    const double d = y.at({b, c, h, w}) - m;
                    v += d * d;
                }
        v /= (B * plane);
        CHECK(m == doctest::Approx(1.0).epsilon(1e-10));
        CHECK(std::sqrt(v) == doctest::Approx(2.0).epsilon(1e-4));
    }
}

TEST_CASE("batch_norm eval mode uses running statistics") {
    Rng rng(111);
    Tensor x = random_tensor({2, 2, 3, 3}, rng);
    NormParams p = make_norm(2);
    p.gamma = Tensor::from_data({2}, {1.5, -2.0}, true);
    p.beta = Tensor::from_data({2}, {0.25, 1.0}, true);
    Tensor y = batch_norm(x, p, NormMode::eval);
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t c = 0; c < 2; ++c)
            for (std::int64_t h = 0; h < 3; ++h)
                for (std::int64_t w = 0; w < 3; ++w) {
                    const double g = p.gamma.data()[static_cast<size_t>(c)];
                    const double be = p.beta.data()[static_cast<size_t>(c)];
                    CHECK(y.at({b, c, h, w}) ==
                          doctest::Approx(g * x.at({b, c, h, w}) + be).epsilon(1e-4));
                }
}

TEST_CASE("batch_norm folds batch statistics into running buffers") {
    Rng rng(113);
    Tensor x = random_tensor({2, 2, 3, 3}, rng, false, 1.0, 3.0);
    NormParams p = make_norm(2);
    p.momentum = 0.25;
    batch_norm(x, p, NormMode::train);
    // recompute channel-0 batch stats
    double m = 0, v = 0;
    const std::int64_t plane = 9, C = 2;
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t i = 0; i < plane; ++i)
            m += x.data()[static_cast<size_t>((b * C) * plane + i)];
    m /= 18;
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t i = 0; i < plane; ++i) {
            const double d = x.data()[static_cast<size_t>((b * C) * plane + i)] - m;
            v += d * d;
        }
    v /= 18;
    CHECK(p.running_mean.data()[0] == doctest::Approx(0.25 * m).epsilon(1e-12));
    CHECK(p.running_var.data()[0] == doctest::Approx(0.75 * 1.0 + 0.25 * v).epsilon(1e-12));
}

TEST_CASE("batch_norm gradient matches finite differences in both modes") {
    Rng rng(115);
    Tensor x = random_tensor({2, 2, 3, 2}, rng, true);
    NormParams p = make_norm(2);
    // non-trivial affine and running stats
    p.gamma = Tensor::from_data({2}, {1.3, 0.7}, true);
    p.beta = Tensor::from_data({2}, {-0.2, 0.4}, true);
    p.running_mean = Tensor::from_data({2}, {0.1, -0.3});
    p.running_var = Tensor::from_data({2}, {1.5, 0.8});

    auto f_train = [&] {
        NormParams q = p;  // copy shares tensors; running buffers mutate, stats recomputed anyway
        Tensor y = batch_norm(x, q, NormMode::train);
        return mean_all(mul(y, y));
    };
    GradCheckReport t =
        finite_diff_check(f_train, {{"x", x}, {"gamma", p.gamma}, {"beta", p.beta}});
    CHECK(t.pass);
    CHECK(t.max_rel_err < 1e-4);

    auto f_eval = [&] {
        NormParams q = p;
        Tensor y = batch_norm(x, q, NormMode::eval);
        return mean_all(mul(y, y));
    };
    GradCheckReport e =
        finite_diff_check(f_eval, {{"x", x}, {"gamma", p.gamma}, {"beta", p.beta}});
    CHECK(e.pass);
    CHECK(e.max_rel_err < 1e-4);
}

TEST_CASE("batch_norm error contract") {
    NormParams p = make_norm(2);
    CHECK_THROWS(batch_norm(Tensor::zeros({1, 2, 1, 1}), p, NormMode::train));  // N < 2
    CHECK_NOTHROW(batch_norm(Tensor::zeros({1, 2, 1, 1}), p, NormMode::eval));
    CHECK_THROWS(batch_norm(Tensor::zeros({1, 3, 2, 2}), p, NormMode::train));  // channels
    CHECK_THROWS(batch_norm(Tensor::zeros({2, 2}), p, NormMode::train));
    // zero-variance channel stays finite thanks to eps
    Tensor flat = Tensor::full({2, 2, 2, 2}, 5.0);
    Tensor y = batch_norm(flat, p, NormMode::train);
    for (double v : y.data()) CHECK(std::isfinite(v));
}

TEST_CASE("bilinear_upsample preserves constants") {
    for (int f : {2, 4, 8, 16}) {
        Tensor x = Tensor::full({1, 2, 3, 2}, 0.75);
        Tensor y = bilinear_upsample(x, f);
        CHECK(y.shape() == Shape{1, 2, 3 * f, 2 * f});
        for (double v : y.data()) CHECK(v == doctest::Approx(0.75).epsilon(1e-15));
    }
    CHECK_THROWS(bilinear_upsample(Tensor::zeros({1, 1, 2, 2}), 3));
    CHECK_THROWS(bilinear_upsample(Tensor::zeros({2, 2}), 2));
}

TEST_CASE("bilinear_upsample half-pixel formula on [0,1]") {
    Tensor x = Tensor::from_data({1, 1, 1, 2}, {0.0, 1.0});
    Tensor y = bilinear_upsample(x, 2);
    REQUIRE(y.shape() == Shape{1, 1, 2, 4});
    for (std::int64_t r = 0; r < 2; ++r) {
        CHECK(y.at({0, 0, r, 0}) == doctest::Approx(0.0).epsilon(1e-15));
        CHECK(y.at({0, 0, r, 1}) == doctest::Approx(0.25).epsilon(1e-15));
        CHECK(y.at({0, 0, r, 2}) == doctest::Approx(0.75).epsilon(1e-15));
        CHECK(y.at({0, 0, r, 3}) == doctest::Approx(1.0).epsilon(1e-15));
    }
}

TEST_CASE("bilinear_upsample gradient matches finite differences") {
    Rng rng(117);
    Tensor x = random_tensor({1, 2, 3, 3}, rng, true);
    auto f = [&] {
        Tensor y = bilinear_upsample(x, 2);
        return mean_all(mul(y, y));
    };
    GradCheckReport rep = finite_diff_check(f, {{"x", x}});
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-6);  // piecewise linear: near-exact
}

TEST_CASE("self_attention over a single token is its V projection") {
    Rng rng(119);
    Tensor x = random_tensor({2, 3, 1, 1}, rng);
    AttentionParams p = make_attention(3, 4, rng);
    Tensor y = self_attention(x, p);
    REQUIRE(y.shape() == Shape{2, 4, 1, 1});
    for (std::int64_t b = 0; b < 2; ++b) {
        for (std::int64_t d = 0; d < 4; ++d) {
            double ref = 0;
            for (std::int64_t c = 0; c < 3; ++c) {
                ref += x.at({b, c, 0, 0}) * p.wv.at({c, d});
            }
            CHECK(y.at({b, d, 0, 0}) == doctest::Approx(ref).epsilon(1e-12));
        }
    }
}

TEST_CASE("attention rows sum to one") {
    Rng rng(121);
    Tensor tokens = random_tensor({3, 7, 5}, rng);
    AttentionParams p = make_attention(5, 4, rng);
    AttentionResult r = attention_tokens(tokens, p);
    REQUIRE(r.weights.shape() == Shape{3, 7, 7});
    for (std::int64_t g = 0; g < 3; ++g)
        for (std::int64_t i = 0; i < 7; ++i) {
            double s = 0;
            for (std::int64_t j = 0; j < 7; ++j) s += r.weights.at({g, i, j});
            CHECK(std::fabs(s - 1.0) < 1e-9);
        }
}

TEST_CASE("self_attention matches a hand-computed 2-token case") {
    Rng rng(123);
    Tensor x = random_tensor({1, 2, 1, 2}, rng);  // two tokens with 2 channels
    AttentionParams p = make_attention(2, 2, rng);
    // larger weights make the attention matrix non-trivial
    for (auto* w : {&p.wq, &p.wk, &p.wv})
        for (auto& v : w->mutable_data()) v *= 10.0;
    Tensor y = self_attention(x, p);

    // independent recompute with scalar arithmetic
    const double t[2][2] = {{x.at({0, 0, 0, 0}), x.at({0, 1, 0, 0})},
                            {x.at({0, 0, 0, 1}), x.at({0, 1, 0, 1})}};
    auto proj = [&](const Tensor& w, const double* tok, int d) {
        return tok[0] * w.at({0, d}) + tok[1] * w.at({1, d});
    };
    double q[2][2], k[2][2], v[2][2];
    for (int i = 0; i < 2; ++i)
        for (int d = 0; d < 2; ++d) {
            q[i][d] = proj(p.wq, t[i], d);
            k[i][d] = proj(p.wk, t[i], d);
            v[i][d] = proj(p.wv, t[i], d);
        }
    const double sc = 1.0 / std::sqrt(2.0);
    for (int i = 0; i < 2; ++i) {
        double s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) * sc;
        double s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) * sc;
        const double mx = std::max(s0, s1);
        const double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
        const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
        for (int d = 0; d < 2; ++d) {
            const double ref = a0 * v[0][d] + a1 * v[1][d];
            CHECK(y.at({0, d, 0, static_cast<std::int64_t>(i)}) ==
                  doctest::Approx(ref).epsilon(1e-12));
        }
    }
}

TEST_CASE("self_attention gradient matches finite differences") {
    Rng rng(125);
    Tensor x = random_tensor({1, 3, 2, 2}, rng, true);
    AttentionParams p = make_attention(3, 3, rng);
    auto f = [&] {
        Tensor y = self_attention(x, p);
        return mean_all(mul(y, y));
    };
    GradCheckReport rep = finite_diff_check(
        f, {{"x", x}, {"wq", p.wq}, {"wk", p.wk}, {"wv", p.wv}});
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("axial_attention degenerate 1x1 grid") {
    Rng rng(127);
    Tensor x = random_tensor({2, 3, 1, 1}, rng);
    AttentionParams pr = make_attention(3, 3, rng);
    AttentionParams pc = make_attention(3, 3, rng);
    Tensor y = axial_attention(x, pr, pc);
    REQUIRE(y.shape() == x.shape());
    // row pass: y1 = x + Vr(x); col pass adds Vc(y1)
    for (std::int64_t b = 0; b < 2; ++b)
        for (std::int64_t d = 0; d < 3; ++d) {
            double y1[3];
            for (std::int64_t e = 0; e < 3; ++e) {
                double acc = 0;
                for (std::int64_t c = 0; c < 3; ++c) acc += x.at({b, c, 0, 0}) * pr.wv.at({c, e});
                y1[e] = x.at({b, e, 0, 0}) + acc;
            }
            double acc = 0;
            for (std::int64_t c = 0; c < 3; ++c) acc += y1[c] * pc.wv.at({c, d});
            CHECK(y.at({b, d, 0, 0}) == doctest::Approx(y1[d] + acc).epsilon(1e-12));
        }
}

TEST_CASE("axial row pass is equivariant to row permutation") {
    Rng rng(129);
    Tensor x = random_tensor({1, 2, 4, 5}, rng);
    AttentionParams pr = make_attention(2, 2, rng);
    AttentionParams pc = make_attention(2, 2, rng);
    // zero the column V projection: the column pass then adds nothing and the
    // output is exactly the row-pass result
    for (auto& v : pc.wv.mutable_data()) v = 0.0;
    Tensor y = axial_attention(x, pr, pc);

    // permute rows 0..3 -> 2,0,3,1 of the input
    const std::int64_t perm[4] = {2, 0, 3, 1};
    std::vector<double> px(x.data().size());
    for (std::int64_t c = 0; c < 2; ++c)
        for (std::int64_t h = 0; h < 4; ++h)
            for (std::int64_t w = 0; w < 5; ++w)
                px[static_cast<size_t>((c * 4 + h) * 5 + w)] =
                    x.at({0, c, perm[h], w});
    Tensor xp = Tensor::from_data({1, 2, 4, 5}, std::move(px));
    Tensor yp = axial_attention(xp, pr, pc);
    for (std::int64_t c = 0; c < 2; ++c)
        for (std::int64_t h = 0; h < 4; ++h)
            for (std::int64_t w = 0; w < 5; ++w)
                CHECK(yp.at({0, c, h, w}) ==
                      doctest::Approx(y.at({0, c, perm[h], w})).epsilon(1e-12));
}

TEST_CASE("axial_attention broadcasts gradient to every position") {
    Rng rng(131);
    const std::int64_t H = 8, W = 8, C = 3;
    Tensor x = random_tensor({1, C, H, W}, rng, true);
    AttentionParams pr = make_attention(static_cast<int>(C), static_cast<int>(C), rng);
    AttentionParams pc = make_attention(static_cast<int>(C), static_cast<int>(C), rng);
    Tensor y = axial_attention(x, pr, pc);
    // one-hot gradient at output pixel (channel 0, h=5, w=2) via a mask dot
    std::vector<double> mask(static_cast<size_t>(C * H * W), 0.0);
    mask[static_cast<size_t>(5 * W + 2)] = 1.0;
    Tensor loss = sum_all(mul(y, Tensor::from_data({1, C, H, W}, std::move(mask))));
    GradientMap g = backward(loss, {{"x", x}});
    const auto& gx = g.at("x").data();
    for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
            double m = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                m = std::max(m, std::fabs(gx[static_cast<size_t>((c * H + h) * W + w)]));
            }
            CHECK(m > 0.0);
        }
}

TEST_CASE("axial_attention gradient matches finite differences") {
    Rng rng(133);
    Tensor x = random_tensor({1, 2, 3, 3}, rng, true);
    AttentionParams pr = make_attention(2, 2, rng);
    AttentionParams pc = make_attention(2, 2, rng);
    auto f = [&] {
        Tensor y = axial_attention(x, pr, pc);
        return mean_all(mul(y, y));
    };
    GradCheckReport rep = finite_diff_check(f, {{"x", x},
                                                {"rq", pr.wq},
                                                {"rk", pr.wk},
                                                {"rv", pr.wv},
                                                {"cq", pc.wq},
                                                {"ck", pc.wk},
                                                {"cv", pc.wv}});
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("axial_attention rejects non-square projections") {
    Rng rng(135);
    Tensor x = random_tensor({1, 3, 2, 2}, rng);
    AttentionParams good = make_attention(3, 3, rng);
    AttentionParams bad = make_attention(3, 2, rng);
    CHECK_THROWS(axial_attention(x, bad, good));
    CHECK_THROWS(axial_attention(x, good, bad));
}

TEST_SUITE_END();
