#include "hfgd/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string_view>

namespace hfgd {

// --- config ------------------------------------------------------------------

static int scaled_ch(double width_mult, int base) {
    return static_cast<int>(std::ceil(static_cast<double>(base) * width_mult - 1e-9));
}

int ModelConfig::cae_wide_ch() const { return scaled_ch(width_mult, 2048); }
int ModelConfig::cae_mid_ch() const { return scaled_ch(width_mult, 512); }
int ModelConfig::d_final() const { return scaled_ch(width_mult, 256); }
int ModelConfig::branch_ch() const { return scaled_ch(width_mult, 256); }

void ModelConfig::validate() const {
    if (num_classes < 2) throw std::runtime_error("config: num_classes must be >= 2");
    if (!(width_mult > 0.0)) throw std::runtime_error("config: width_mult must be > 0");
    if (backbone_stage_channels.size() != 4) {
        throw std::runtime_error("config: backbone_stage_channels needs exactly 4 entries");
    }
    for (int c : backbone_stage_channels) {
        if (c < 1) throw std::runtime_error("config: backbone stage channels must be >= 1");
    }
    if (target_os != 2 && target_os != 4) {
        throw std::runtime_error("config: target_os must be 2 or 4");
    }
    if (target_os == 2 && upsampler == Upsampler::sfpn) {
        throw std::runtime_error("config: target_os=2 requires upsampler=usfpn");
    }
    if (car_weight < 0.0) throw std::runtime_error("config: car_weight must be >= 0");
    for (const auto& site : disabled_barriers) {
        if (std::find_if(kBarrierSites.begin(), kBarrierSites.end(), [&](const char* s) {
                return site == s;
            }) == kBarrierSites.end()) {
            throw std::runtime_error("config: unknown barrier site '" + site + "'");
        }
    }
}

KeyValues ModelConfig::to_kv() const {
    KeyValues kv;
    kv.set_int("num_classes", num_classes);
    kv.set_double("width_mult", width_mult);
    kv.set_int_list("backbone_stage_channels", backbone_stage_channels);
    kv.set("upsampler", upsampler == Upsampler::sfpn ? "sfpn" : "usfpn");
    kv.set_int("target_os", target_os);
    kv.set_bool("cae_enabled", cae_enabled);
    kv.set_bool("hfg_guidance_enabled", hfg_guidance_enabled);
    kv.set_bool("hfgm_aa_enabled", hfgm_aa_enabled);
    kv.set_bool("lateral_stop_grad_enabled", lateral_stop_grad_enabled);
    kv.set_double("car_weight", car_weight);
    return kv;
}

ModelConfig ModelConfig::from_kv(const KeyValues& kv) {
    ModelConfig cfg;
    cfg.num_classes = static_cast<int>(kv.get_int("num_classes"));
    cfg.width_mult = kv.get_double("width_mult");
    cfg.backbone_stage_channels = kv.get_int_list("backbone_stage_channels");
    const std::string up = kv.get("upsampler");
    if (up == "sfpn") {
        cfg.upsampler = Upsampler::sfpn;
    } else if (up == "usfpn") {
        cfg.upsampler = Upsampler::usfpn;
    } else {
        throw std::runtime_error("config: upsampler must be sfpn or usfpn, got '" + up + "'");
    }
    cfg.target_os = static_cast<int>(kv.get_int("target_os"));
    cfg.cae_enabled = kv.get_bool("cae_enabled");
    cfg.hfg_guidance_enabled = kv.get_bool("hfg_guidance_enabled");
    cfg.hfgm_aa_enabled = kv.get_bool("hfgm_aa_enabled");
    cfg.lateral_stop_grad_enabled = kv.get_bool("lateral_stop_grad_enabled");
    cfg.car_weight = kv.get_double("car_weight");
    cfg.validate();
    return cfg;
}

// --- label downsampling --------------------------------------------------------

std::vector<int> downsample_labels_nearest(const std::vector<std::uint16_t>& labels,
                                           std::int64_t B, std::int64_t H,
                                           std::int64_t W, int factor) {
    if (static_cast<std::int64_t>(labels.size()) != B * H * W) {
        throw std::runtime_error("downsample_labels_nearest: label count mismatch");
    }
    if (factor < 1 || H % factor != 0 || W % factor != 0) {
        throw std::runtime_error("downsample_labels_nearest: size not divisible by factor");
    }
    const std::int64_t h = H / factor, w = W / factor, off = factor / 2;
    std::vector<int> out(static_cast<size_t>(B * h * w));
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t i = 0; i < h; ++i) {
            const std::int64_t src_row = i * factor + off;
            for (std::int64_t j = 0; j < w; ++j) {
                out[static_cast<size_t>((b * h + i) * w + j)] = static_cast<int>(
                    labels[static_cast<size_t>((b * H + src_row) * W + j * factor + off)]);
            }
        }
    }
    return out;
}

// --- CAR surrogate ---------------------------------------------------------------

CarLosses car_losses(const Tensor& feat, const std::vector<int>& labels,
                     int num_classes) {
    if (feat.ndim() != 4) {
        throw std::runtime_error("car_losses: feature map must be [B,d,h,w], got " +
                                 shape_str(feat.shape()));
    }
    const std::int64_t B = feat.dim(0), d = feat.dim(1), h = feat.dim(2), w = feat.dim(3);
    const std::int64_t N = B * h * w;
    if (static_cast<std::int64_t>(labels.size()) != N) {
        throw std::runtime_error("car_losses: " + std::to_string(labels.size()) +
                                 " labels for " + std::to_string(N) + " pixels");
    }

    std::vector<std::int64_t> valid;
    for (std::int64_t n = 0; n < N; ++n) {
        const int y = labels[static_cast<size_t>(n)];
        if (y == 255) continue;
        if (y < 0 || y >= num_classes) {
            throw std::runtime_error("car_losses: label " + std::to_string(y) +
                                     " outside [0," + std::to_string(num_classes) + ")");
        }
        valid.push_back(n);
    }
    const std::int64_t Nv = static_cast<std::int64_t>(valid.size());
    if (Nv == 0) throw std::runtime_error("car_losses: every pixel is ignored");

    // pixels as rows: [N,d], then select the non-ignored rows with a constant
    // 0/1 matrix so gradients flow only through the features
    Tensor rows = reshape(permute(feat, {0, 2, 3, 1}), {N, d});
    std::vector<double> sel(static_cast<size_t>(Nv * N), 0.0);
    for (std::int64_t v = 0; v < Nv; ++v) sel[static_cast<size_t>(v * N + valid[v])] = 1.0;
    Tensor fv = matmul(Tensor::from_data({Nv, N}, std::move(sel)), rows);  // [Nv,d]

    // present classes and their pixel counts
    std::map<int, std::int64_t> counts;
    for (std::int64_t v = 0; v < Nv; ++v) ++counts[labels[static_cast<size_t>(valid[v])]];
    std::vector<int> present;
    for (const auto& [c, n] : counts) present.push_back(c);
    const std::int64_t P = static_cast<std::int64_t>(present.size());

    // class centers: masked means, [P,d]
    std::vector<double> meanw(static_cast<size_t>(P * Nv), 0.0);
    for (std::int64_t v = 0; v < Nv; ++v) {
        const int y = labels[static_cast<size_t>(valid[v])];
        const auto p = static_cast<std::int64_t>(
            std::lower_bound(present.begin(), present.end(), y) - present.begin());
        meanw[static_cast<size_t>(p * Nv + v)] = 1.0 / static_cast<double>(counts[y]);
    }
    Tensor mu = matmul(Tensor::from_data({P, Nv}, std::move(meanw)), fv);  // [P,d]

    Tensor ones_d = Tensor::full({d, 1}, 1.0);

    // intra: 1 - cos(pixel, stop_gradient(center of its class))
    Tensor mu_sg = stop_gradient(mu);
    std::vector<double> pick(static_cast<size_t>(Nv * P), 0.0);
    for (std::int64_t v = 0; v < Nv; ++v) {
        const int y = labels[static_cast<size_t>(valid[v])];
        const auto p = static_cast<std::int64_t>(
            std::lower_bound(present.begin(), present.end(), y) - present.begin());
        pick[static_cast<size_t>(v * P + p)] = 1.0;
    }
    Tensor centers = matmul(Tensor::from_data({Nv, P}, std::move(pick)), mu_sg);  // [Nv,d]
    Tensor dots = matmul(mul(fv, centers), ones_d);                               // [Nv,1]
    Tensor nf = sqrt_elem(add_scalar(matmul(mul(fv, fv), ones_d), 1e-12));
    Tensor nc = sqrt_elem(add_scalar(matmul(mul(centers, centers), ones_d), 1e-12));
    Tensor cos_pix = divide(dots, mul(nf, nc));
    CarLosses out;
    out.intra = add_scalar(scale(sum_all(cos_pix), -1.0 / static_cast<double>(Nv)), 1.0);

    // inter: mean over present pairs c != c' of max(0, cos(mu_c, mu_c'))
    if (P < 2) {
        out.inter = Tensor::scalar(0.0);
        return out;
    }
    Tensor norms = sqrt_elem(add_scalar(matmul(mul(mu, mu), ones_d), 1e-12));  // [P,1]
    Tensor inv = divide(Tensor::full({P}, 1.0), reshape(norms, {P}));
    Tensor unit = mul_channel(mu, inv, 0);                      // [P,d], rows normalized
    Tensor gram = matmul(unit, permute(unit, {1, 0}));          // [P,P]
    std::vector<double> offdiag(static_cast<size_t>(P * P), 1.0);
    for (std::int64_t p = 0; p < P; ++p) offdiag[static_cast<size_t>(p * P + p)] = 0.0;
    Tensor hinged = mul(relu(gram), Tensor::from_data({P, P}, std::move(offdiag)));
    out.inter = scale(sum_all(hinged), 1.0 / static_cast<double>(P * (P - 1)));
    return out;
}

// --- token similarity ------------------------------------------------------------

Tensor token_similarity_matrix(const Tensor& tokens, bool* zero_norm) {
    if (tokens.ndim() != 2) {
        throw std::runtime_error("token_similarity_matrix: tokens must be [C,d], got " +
                                 shape_str(tokens.shape()));
    }
    const std::int64_t C = tokens.dim(0), d = tokens.dim(1);
    const auto& tv = tokens.data();
    std::vector<double> norms(static_cast<size_t>(C));
    bool any_zero = false;
    for (std::int64_t c = 0; c < C; ++c) {
        double s = 0;
        for (std::int64_t k = 0; k < d; ++k) {
            const double v = tv[static_cast<size_t>(c * d + k)];
            s += v * v;
        }
        norms[static_cast<size_t>(c)] = std::sqrt(s);
        if (s == 0.0) any_zero = true;
    }
    if (zero_norm) *zero_norm = any_zero;
    std::vector<double> sim(static_cast<size_t>(C * C), 0.0);
    for (std::int64_t i = 0; i < C; ++i) {
        for (std::int64_t j = 0; j < C; ++j) {
            const double denom = norms[static_cast<size_t>(i)] * norms[static_cast<size_t>(j)];
            if (denom == 0.0) continue;  // zero-norm token: similarity 0
            double dot = 0;
            for (std::int64_t k = 0; k < d; ++k) {
                dot += tv[static_cast<size_t>(i * d + k)] * tv[static_cast<size_t>(j * d + k)];
            }
            sim[static_cast<size_t>(i * C + j)] = dot / denom;
        }
    }
    return Tensor::from_data({C, C}, std::move(sim));
}

// --- model construction ------------------------------------------------------

void Model::reg_conv(const std::string& prefix, Conv2dParams& c) {
    params_.push_back({prefix + ".weight", c.weight, false});
    params_.push_back({prefix + ".bias", c.bias, false});
}

void Model::reg_norm(const std::string& prefix, NormParams& n) {
    params_.push_back({prefix + ".gamma", n.gamma, true});
    params_.push_back({prefix + ".beta", n.beta, true});
    buffers_.push_back({prefix + ".running_mean", n.running_mean, false});
    buffers_.push_back({prefix + ".running_var", n.running_var, false});
}

void Model::reg_attn(const std::string& prefix, AttentionParams& a) {
    params_.push_back({prefix + ".wq", a.wq, false});
    params_.push_back({prefix + ".wk", a.wk, false});
    params_.push_back({prefix + ".wv", a.wv, false});
}

static int upsample_blocks_for(int os_in, int target_os) {
    int n = 0;
    while (os_in > target_os) {
        os_in /= 2;
        ++n;
    }
    return n;
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(mix_seed(seed, 0x6d6f64656cULL));  // independent of data streams

    const auto& ch = cfg_.backbone_stage_channels;
    const int df = cfg_.d_final();

    stem_.conv = make_conv(3, ch[0], 3, 2, rng);
    stem_.norm = make_norm(ch[0]);
    reg_conv("backbone.stem.conv", stem_.conv);
    reg_norm("backbone.stem.norm", stem_.norm);
    for (int s = 0; s < 4; ++s) {
        const int in_ch = s == 0 ? ch[0] : ch[static_cast<size_t>(s - 1)];
        const int out_ch = ch[static_cast<size_t>(s)];
        Stage& st = stages_[static_cast<size_t>(s)];
        st.a.conv = make_conv(in_ch, out_ch, 3, 2, rng);
        st.a.norm = make_norm(out_ch);
        st.b.conv = make_conv(out_ch, out_ch, 3, 1, rng);
        st.b.norm = make_norm(out_ch);
        const std::string p = "backbone.stage" + std::to_string(s + 1);
        reg_conv(p + ".conv1", st.a.conv);
        reg_norm(p + ".norm1", st.a.norm);
        reg_conv(p + ".conv2", st.b.conv);
        reg_norm(p + ".norm2", st.b.norm);
    }

    if (cfg_.cae_enabled) {
        cae_expand_ = make_conv(ch[3], cfg_.cae_wide_ch(), 1, 1, rng);
        cae_norm1_ = make_norm(cfg_.cae_wide_ch());
        cae_reduce_ = make_conv(cfg_.cae_wide_ch(), cfg_.cae_mid_ch(), 1, 1, rng);
        cae_attn_ = make_attention(cfg_.cae_mid_ch(), cfg_.cae_mid_ch(), rng);
        cae_trail_ = make_conv(cfg_.cae_mid_ch(), df, 1, 1, rng);
        cae_norm2_ = make_norm(df);
        reg_conv("cae.expand", cae_expand_);
        reg_norm("cae.norm1", cae_norm1_);
        reg_conv("cae.reduce", cae_reduce_);
        reg_attn("cae.attn", cae_attn_);
        reg_conv("cae.trail", cae_trail_);
        reg_norm("cae.norm2", cae_norm2_);
    } else {
        identity_head_ = make_conv(ch[3], df, 1, 1, rng);
        reg_conv("cae.identity", identity_head_);
    }

    {
        std::vector<double> t(static_cast<size_t>(cfg_.num_classes) * df);
        const double std = std::sqrt(2.0 / df);
        for (auto& v : t) v = rng.normal() * std;
        tokens_ = Tensor::from_data({cfg_.num_classes, df}, std::move(t), true);
        params_.push_back({"tokens", tokens_, true});
    }

    const int lead_k = cfg_.upsampler == Upsampler::usfpn ? 3 : 1;
    const int bch = cfg_.branch_ch();
    const int branch_in[4] = {ch[0], ch[1], ch[2], df};
    const int branch_os[4] = {4, 8, 16, 32};
    const char* branch_name[4] = {"lat4", "lat8", "lat16", "lat32"};
    for (int i = 0; i < 4; ++i) {
        Branch& br = branches_[static_cast<size_t>(i)];
        br.lead = make_conv(branch_in[i], bch, lead_k, 1, rng);
        const std::string p = std::string("usfpn.") + branch_name[i];
        reg_conv(p + ".lead", br.lead);
        const int nblocks = upsample_blocks_for(branch_os[i], cfg_.target_os);
        for (int bIdx = 0; bIdx < nblocks; ++bIdx) {
            ConvNormBlock blk;
            blk.conv = make_conv(bch, bch, 3, 1, rng);
            blk.norm = make_norm(bch);
            const std::string bp = p + ".block" + std::to_string(bIdx + 1);
            br.blocks.push_back(blk);
            reg_conv(bp + ".conv", br.blocks.back().conv);
            reg_norm(bp + ".norm", br.blocks.back().norm);
        }
    }
    merge_.conv = make_conv(bch, df, 3, 1, rng);
    merge_.norm = make_norm(df);
    reg_conv("usfpn.merge.conv", merge_.conv);
    reg_norm("usfpn.merge.norm", merge_.norm);

    if (cfg_.hfgm_aa_enabled) {
        aa_row_ = make_attention(df, df, rng);
        aa_col_ = make_attention(df, df, rng);
        reg_attn("hfgm_aa.row", aa_row_);
        reg_attn("hfgm_aa.col", aa_col_);
    }
    if (!cfg_.hfg_guidance_enabled) {
        student_head_ = make_conv(df, cfg_.num_classes, 1, 1, rng);
        reg_conv("student_head", student_head_);
    }
}

std::vector<NamedParam> Model::named_params() const {
    std::vector<NamedParam> out;
    out.reserve(params_.size());
    for (const auto& e : params_) out.push_back({e.name, e.tensor});
    return out;
}

void Model::load_value(const std::string& name, const Shape& shape,
                       const std::vector<double>& data) {
    for (auto* list : {&params_, &buffers_}) {
        for (auto& e : *list) {
            if (e.name != name) continue;
            if (e.tensor.shape() != shape) {
                throw std::runtime_error("load_value: '" + name + "' expects " +
                                         shape_str(e.tensor.shape()) + ", file has " +
                                         shape_str(shape));
            }
            e.tensor.mutable_data() = data;
            return;
        }
    }
    throw std::runtime_error("load_value: model has no tensor named '" + name + "'");
}

// --- forward -----------------------------------------------------------------

static Tensor conv_norm_relu(const Tensor& x, ConvNormBlock& blk, NormMode mode) {
    return relu(batch_norm(conv2d(x, blk.conv), blk.norm, mode));
}

FeaturePyramid Model::backbone_forward(const Tensor& image, NormMode mode) {
    if (image.ndim() != 4 || image.dim(1) != 3) {
        throw std::runtime_error("backbone: input must be [B,3,H,W], got " +
                                 shape_str(image.shape()));
    }
    if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0 || image.dim(2) < 32 ||
        image.dim(3) < 32) {
        throw std::runtime_error("backbone: spatial dims must be divisible by 32, got " +
                                 shape_str(image.shape()));
    }
    Tensor h = conv_norm_relu(image, stem_, mode);
    FeaturePyramid pyr;
    Tensor* outs[4] = {&pyr.f4, &pyr.f8, &pyr.f16, &pyr.f32};
    for (int s = 0; s < 4; ++s) {
        h = conv_norm_relu(h, stages_[static_cast<size_t>(s)].a, mode);
        h = conv_norm_relu(h, stages_[static_cast<size_t>(s)].b, mode);
        *outs[s] = h;
    }
    return pyr;
}

std::pair<Tensor, CarLosses> Model::cae_forward(const Tensor& f32,
                                                const std::vector<int>* labels_os,
                                                NormMode mode) {
    CarLosses car;
    if (!cfg_.cae_enabled) {
        return {conv2d(f32, identity_head_), car};
    }
    Tensor h = relu(batch_norm(conv2d(f32, cae_expand_), cae_norm1_, mode));
    h = conv2d(h, cae_reduce_);
    Tensor attn_out = self_attention(h, cae_attn_);
    if (labels_os) {
        car = car_losses(attn_out, *labels_os, cfg_.num_classes);
    }
    Tensor feat = relu(batch_norm(conv2d(attn_out, cae_trail_), cae_norm2_, mode));
    return {feat, car};
}

Tensor Model::lateral_barrier(const Tensor& t, const char* site) const {
    bool on = std::string_view(site).substr(0, 8) == "lateral_"
                  ? cfg_.lateral_stop_grad_enabled
                  : true;
    if (cfg_.disabled_barriers.count(site)) on = false;
    return on ? stop_gradient(t) : t;
}

Tensor Model::usfpn_forward(const FeaturePyramid& pyr, const Tensor& teacher_feat,
                            NormMode mode) {
    const Tensor inputs[4] = {
        lateral_barrier(pyr.f4, "lateral_f4"),
        lateral_barrier(pyr.f8, "lateral_f8"),
        lateral_barrier(pyr.f16, "lateral_f16"),
        lateral_barrier(teacher_feat, "teacher_feat"),
    };
    Tensor acc;
    for (int i = 0; i < 4; ++i) {
        Branch& br = branches_[static_cast<size_t>(i)];
        Tensor h = conv2d(inputs[i], br.lead);
        for (auto& blk : br.blocks) {
            h = bilinear_upsample(conv_norm_relu(h, blk, mode), 2);
        }
        acc = i == 0 ? h : add(acc, h);
    }
    Tensor merged = conv_norm_relu(acc, merge_, mode);
    if (cfg_.hfgm_aa_enabled) {
        merged = axial_attention(merged, aa_row_, aa_col_);
    }
    return merged;
}

Tensor Model::head_logits(const Tensor& feat, bool student_role) {
    if (student_role && !cfg_.hfg_guidance_enabled) {
        return conv2d(feat, student_head_);
    }
    const std::int64_t B = feat.dim(0), d = feat.dim(1), h = feat.dim(2), w = feat.dim(3);
    if (d != tokens_.dim(1)) {
        throw std::runtime_error("head_logits: feature dim " + std::to_string(d) +
                                 " does not match token dim " +
                                 std::to_string(tokens_.dim(1)));
    }
    Tensor tok = student_role ? stop_gradient(tokens_) : tokens_;
    Tensor rows = reshape(permute(feat, {0, 2, 3, 1}), {B * h * w, d});
    Tensor lg = matmul(rows, permute(tok, {1, 0}));  // [B*h*w, C]
    return permute(reshape(lg, {B, h, w, cfg_.num_classes}), {0, 3, 1, 2});
}

ModelOutput Model::forward(const Tensor& image, const std::vector<std::uint16_t>* labels,
                           NormMode mode, bool teacher_only) {
    cfg_.validate();
    FeaturePyramid pyr = backbone_forward(image, mode);

    const bool want_car = cfg_.car_weight > 0.0 && mode == NormMode::train && cfg_.cae_enabled;
    std::vector<int> labels_os;
    if (want_car) {
        if (!labels) {
            throw std::runtime_error(
                "forward: labels required when car_weight > 0 in train mode");
        }
        labels_os = downsample_labels_nearest(*labels, image.dim(0), image.dim(2),
                                              image.dim(3), 32);
    }
    auto [teacher_feat, car] = cae_forward(pyr.f32, want_car ? &labels_os : nullptr, mode);

    ModelOutput out;
    out.teacher_feat = teacher_feat;
    out.teacher_logits = head_logits(teacher_feat, false);
    out.car_intra = car.intra;
    out.car_inter = car.inter;
    if (!teacher_only) {
        out.student_feat = usfpn_forward(pyr, teacher_feat, mode);
        Tensor slogits = head_logits(out.student_feat, true);
        out.student_logits = bilinear_upsample(slogits, cfg_.target_os);
    }
    return out;
}

}  // namespace hfgd
