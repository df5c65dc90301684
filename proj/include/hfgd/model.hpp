#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "hfgd/config.hpp"
#include "hfgd/layers.hpp"
#include "hfgd/tensor.hpp"

namespace hfgd {

enum class Upsampler { sfpn, usfpn };

// Barrier sites that topology mutation tests can knock out one at a time.
// "lateral_f4/f8/f16" guard the skip connections into the upsampler;
// "teacher_feat" guards the hand-off of the encoder output to the student's
// OS=32 branch. The token barrier in the student head is structural and has
// no knockout switch.
inline const std::array<const char*, 4> kBarrierSites = {
    "lateral_f4", "lateral_f8", "lateral_f16", "teacher_feat"};

struct ModelConfig {
    int num_classes = 6;
    double width_mult = 1.0 / 16.0;  // scales the 2048/512/256 channel trio
    std::vector<int> backbone_stage_channels = {8, 16, 24, 32};
    Upsampler upsampler = Upsampler::usfpn;
    int target_os = 4;
    bool cae_enabled = true;
    bool hfg_guidance_enabled = true;
    bool hfgm_aa_enabled = true;
    bool lateral_stop_grad_enabled = true;
    double car_weight = 0.1;

    // test-only knockout switches; never serialized
    std::set<std::string> disabled_barriers;

    int cae_wide_ch() const;  // ceil(2048 * width_mult)
    int cae_mid_ch() const;   // ceil(512 * width_mult)
    int d_final() const;      // ceil(256 * width_mult)
    int branch_ch() const;    // ceil(256 * width_mult), upsampler branch width

    void validate() const;
    KeyValues to_kv() const;
    static ModelConfig from_kv(const KeyValues& kv);
};

struct FeaturePyramid {
    Tensor f4, f8, f16, f32;
};

struct ModelOutput {
    Tensor teacher_logits;  // [B,C,H/32,W/32]
    Tensor student_logits;  // [B,C,H,W], upsampled to input resolution
    Tensor teacher_feat;    // encoder output, [B,d_final,H/32,W/32]
    Tensor student_feat;    // pre-logit upsampler features
    Tensor car_intra;       // scalars; defined only when CAR was computed
    Tensor car_inter;
};

struct CarLosses {
    Tensor intra, inter;
};

// Class-aware regularizers over a feature map. labels is the flattened
// [B*h*w] map at the feature resolution (255 = ignore). Centers are masked
// class means; the intra term pulls pixels toward their (stop-gradient)
// center, the inter term hinges on cosine similarity between live centers.
CarLosses car_losses(const Tensor& feat, const std::vector<int>& labels,
                     int num_classes);

// Nearest-neighbor downsample of a [B,H,W] label map by `factor`, sampling
// src = dst*factor + factor/2. Preserves the ignore value exactly.
std::vector<int> downsample_labels_nearest(const std::vector<std::uint16_t>& labels,
                                           std::int64_t B, std::int64_t H,
                                           std::int64_t W, int factor);

// Cosine similarity between all token pairs; zero-norm tokens yield 0
// similarity (and set *zero_norm if given).
Tensor token_similarity_matrix(const Tensor& tokens, bool* zero_norm = nullptr);

struct ParamEntry {
    std::string name;
    Tensor tensor;
    bool no_decay = false;  // norm affine and class tokens skip weight decay
};

struct ConvNormBlock {
    Conv2dParams conv;
    NormParams norm;
};

class Model {
public:
    Model(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ModelConfig& config_mutable() { return cfg_; }

    // labels (full resolution, [B,H,W] flattened) are required when
    // car_weight > 0 in train mode; teacher_only skips the student branch
    // entirely and leaves its outputs undefined.
    ModelOutput forward(const Tensor& image, const std::vector<std::uint16_t>* labels,
                        NormMode mode, bool teacher_only = false);

    FeaturePyramid backbone_forward(const Tensor& image, NormMode mode);
    std::pair<Tensor, CarLosses> cae_forward(const Tensor& f32,
                                             const std::vector<int>* labels_os,
                                             NormMode mode);
    Tensor usfpn_forward(const FeaturePyramid& pyr, const Tensor& teacher_feat,
                         NormMode mode);
    // role-dependent classifier: teacher reads live tokens, student reads them
    // through a stop-gradient (or a private 1x1 conv when guidance is off)
    Tensor head_logits(const Tensor& feat, bool student_role);

    const std::vector<ParamEntry>& parameters() const { return params_; }
    const std::vector<ParamEntry>& buffers() const { return buffers_; }
    std::vector<NamedParam> named_params() const;
    Tensor tokens() const { return tokens_; }

    // checkpoint restore: overwrite one parameter or buffer by name
    void load_value(const std::string& name, const Shape& shape,
                    const std::vector<double>& data);

private:
    Tensor lateral_barrier(const Tensor& t, const char* site) const;

    void reg_conv(const std::string& prefix, Conv2dParams& c);
    void reg_norm(const std::string& prefix, NormParams& n);
    void reg_attn(const std::string& prefix, AttentionParams& a);

    ModelConfig cfg_;

    ConvNormBlock stem_;
    struct Stage {
        ConvNormBlock a, b;
    };
    std::array<Stage, 4> stages_;

    Conv2dParams cae_expand_, cae_reduce_, cae_trail_;
    NormParams cae_norm1_, cae_norm2_;
    AttentionParams cae_attn_;
    Conv2dParams identity_head_;  // replaces the encoder when cae_enabled=false

    Tensor tokens_;  // [C, d_final]

    struct Branch {
        Conv2dParams lead;
        std::vector<ConvNormBlock> blocks;  // conv -> norm -> relu -> up x2
    };
    std::array<Branch, 4> branches_;  // from f4, f8, f16, teacher_feat
    ConvNormBlock merge_;
    AttentionParams aa_row_, aa_col_;
    Conv2dParams student_head_;  // private classifier when guidance is off

    std::vector<ParamEntry> params_, buffers_;
};

}  // namespace hfgd
