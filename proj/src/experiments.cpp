#include "hfgd/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "hfgd/checkpoint.hpp"
#include "hfgd/config.hpp"
#include "hfgd/layers.hpp"
#include "hfgd/rng.hpp"

namespace hfgd {

// --- decoder ablation grid ---------------------------------------------------

std::vector<std::pair<std::string, ModelConfig>> ablation_rows(int num_classes) {
    auto variant = [num_classes](Upsampler up, bool cae, bool guidance, bool aa,
                                 int target_os) {
        ModelConfig m;
        m.num_classes = num_classes;
        m.upsampler = up;
        m.cae_enabled = cae;
        m.hfg_guidance_enabled = guidance;
        m.hfgm_aa_enabled = aa;
        m.target_os = target_os;
        m.validate();
        return m;
    };
    return {
        {"sfpn_identity", variant(Upsampler::sfpn, false, false, false, 4)},
        {"sfpn_identity_guidance", variant(Upsampler::sfpn, false, true, false, 4)},
        {"sfpn_identity_aa", variant(Upsampler::sfpn, false, false, true, 4)},
        {"sfpn_identity_hfgm", variant(Upsampler::sfpn, false, true, true, 4)},
        {"sfpn_cae", variant(Upsampler::sfpn, true, false, false, 4)},
        {"sfpn_cae_guidance", variant(Upsampler::sfpn, true, true, false, 4)},
        {"sfpn_cae_aa", variant(Upsampler::sfpn, true, false, true, 4)},
        {"sfpn_cae_hfgm", variant(Upsampler::sfpn, true, true, true, 4)},
        {"usfpn_cae_hfgm_os4", variant(Upsampler::usfpn, true, true, true, 4)},
        {"usfpn_cae_hfgm_os2", variant(Upsampler::usfpn, true, true, true, 2)},
    };
}

double AblationReport::median_of(const std::string& row_name) const {
    for (const auto& r : rows) {
        if (r.name == row_name) return r.median_miou;
    }
    throw std::runtime_error("ablation report: unknown row '" + row_name + "'");
}

std::string AblationReport::csv() const {
    std::ostringstream os;
    os << "row,seed,miou,pixel_acc\n";
    for (const auto& r : rows) {
        for (size_t i = 0; i < seeds.size(); ++i) {
            os << r.name << ',' << seeds[i] << ','
               << KeyValues::format_double(r.mious[i]) << ','
               << KeyValues::format_double(r.pixel_accs[i]) << '\n';
        }
        os << r.name << ",median," << KeyValues::format_double(r.median_miou)
           << ",\n";
    }
    os << "# reference_gains full_hfgm=+" << kReferenceFullHfgmGain
       << " cae_context=+" << kReferenceCaeGain << " usfpn=+"
       << kReferenceUsfpnGain << " os2=+" << kReferenceOs2Gain << "\n";
    return os.str();
}

std::string AblationReport::table() const {
    std::ostringstream os;
    for (const auto& r : rows) {
        os << r.name;
        for (double m : r.mious) os << ' ' << KeyValues::format_double(m);
        os << ' ' << KeyValues::format_double(r.median_miou) << '\n';
    }
    return os.str();
}

AblationReport ablation_matrix(const Dataset& train_data, const Dataset& eval_data,
                               const TrainConfig& base_cfg,
                               const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw std::runtime_error("ablation: need at least one seed");
    base_cfg.validate();
    AblationReport report;
    report.seeds = seeds;
    for (const auto& [name, mcfg] : ablation_rows(train_data.spec.num_classes)) {
        AblationRow row;
        row.name = name;
        row.config = mcfg;
        for (std::uint64_t seed : seeds) {
            TrainConfig tc = base_cfg;
            tc.seed = seed;
            Model model(mcfg, seed);
            TrainResult r = train_model(model, train_data, &eval_data, tc);
            row.mious.push_back(r.final_eval.miou);
            row.pixel_accs.push_back(r.final_eval.pixel_acc);
        }
        row.median_miou = median(row.mious);
        report.rows.push_back(std::move(row));
    }
    return report;
}

// --- auxiliary-head probe ------------------------------------------------------

namespace {

enum class ProbeMode { fcn_only, joint, stop_grad };

// open-lateral flat-SFPN student: every stop-gradient disabled, no encoder,
// no guidance, no attention -- the decoder the probe interrogates
ModelConfig probe_model_cfg(int num_classes) {
    ModelConfig m;
    m.num_classes = num_classes;
    m.upsampler = Upsampler::sfpn;
    m.cae_enabled = false;
    m.hfg_guidance_enabled = false;
    m.hfgm_aa_enabled = false;
    m.lateral_stop_grad_enabled = false;
    m.disabled_barriers = {"teacher_feat"};
    m.car_weight = 0.0;
    m.validate();
    return m;
}

std::vector<std::uint16_t> to_u16(const std::vector<int>& v) {
    std::vector<std::uint16_t> out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<std::uint16_t>(v[i]);
    return out;
}

ProbeRun run_probe_variant(ProbeMode mode, const std::string& name,
                           const Dataset& train_data, const Dataset& eval_data,
                           const TrainConfig& cfg) {
    const int C = train_data.spec.num_classes;
    ModelConfig mcfg = probe_model_cfg(C);
    Model model(mcfg, cfg.seed);
    Rng head_rng(mix_seed(cfg.seed, 0x6175785f68656164ULL));
    Conv2dParams aux_head =
        make_conv(mcfg.backbone_stage_channels[3], C, 1, 1, head_rng);

    std::vector<ParamEntry> entries;
    for (const auto& p : model.parameters()) {
        if (mode != ProbeMode::fcn_only || p.name.rfind("backbone.", 0) == 0) {
            entries.push_back(p);
        }
    }
    entries.push_back({"aux_head.weight", aux_head.weight, false});
    entries.push_back({"aux_head.bias", aux_head.bias, false});

    auto forward_losses = [&](const Batch& batch) {
        FeaturePyramid pyr = model.backbone_forward(batch.images, NormMode::train);
        Tensor aux_in = mode == ProbeMode::stop_grad ? stop_gradient(pyr.f32)
                                                     : pyr.f32;
        Tensor aux_logits = conv2d(aux_in, aux_head);
        std::vector<int> labels32 = downsample_labels_nearest(
            batch.labels, batch.images.dim(0), batch.images.dim(2),
            batch.images.dim(3), 32);
        Tensor loss = seg_cross_entropy(aux_logits, labels32);
        if (mode != ProbeMode::fcn_only) {
            Tensor feat = model.cae_forward(pyr.f32, nullptr, NormMode::train).first;
            Tensor sfeat = model.usfpn_forward(pyr, feat, NormMode::train);
            Tensor slogits = bilinear_upsample(
                model.head_logits(sfeat, /*student_role=*/true), mcfg.target_os);
            loss = add(loss, seg_cross_entropy(slogits, batch.labels));
        }
        return loss;
    };

    SgdOptimizer opt(cfg);
    BatchStream stream(train_data, cfg.batch_size, cfg.flip_augment, cfg.seed);
    std::vector<std::string> trainable;
    for (int step = 0; step < cfg.total_iters; ++step) {
        Batch batch = stream.next();
        Tensor loss = forward_losses(batch);
        if (trainable.empty()) {
            Reachability reach = analyze_reachability(loss);
            for (const auto& e : entries) {
                if (reach.reaches(e.tensor)) trainable.push_back(e.name);
            }
        }
        std::vector<NamedParam> named;
        std::vector<ParamEntry> live;
        for (const auto& e : entries) {
            if (std::find(trainable.begin(), trainable.end(), e.name) !=
                trainable.end()) {
                named.push_back({e.name, e.tensor});
                live.push_back(e);
            }
        }
        GradientMap grads = backward(loss, named);
        opt.step(live, grads, poly_lr(step, cfg));
    }

    // auxiliary head quality: OS=32 predictions against OS=32 labels
    ProbeRun run;
    run.name = name;
    {
        NoGradGuard ng;
        std::vector<std::int64_t> aux_conf(static_cast<size_t>(C) * C, 0);
        std::vector<std::int64_t> main_conf(static_cast<size_t>(C) * C, 0);
        for (const auto& s : eval_data.samples) {
            const std::int64_t H = s.image.dim(1), W = s.image.dim(2);
            Tensor img = reshape(s.image, {1, 3, H, W});
            FeaturePyramid pyr = model.backbone_forward(img, NormMode::eval);
            Tensor aux_logits = conv2d(pyr.f32, aux_head);
            std::vector<std::uint16_t> gt32 =
                to_u16(downsample_labels_nearest(s.labels, 1, H, W, 32));
            accumulate_confusion(aux_conf, C, argmax_classes(aux_logits), gt32);
            if (mode != ProbeMode::fcn_only) {
                Tensor feat =
                    model.cae_forward(pyr.f32, nullptr, NormMode::eval).first;
                Tensor sfeat = model.usfpn_forward(pyr, feat, NormMode::eval);
                Tensor slogits = bilinear_upsample(
                    model.head_logits(sfeat, true), model.config().target_os);
                accumulate_confusion(main_conf, C, argmax_classes(slogits),
                                     s.labels);
            }
        }
        run.aux_miou = eval_from_confusion(aux_conf, C).miou;
        run.main_miou = mode == ProbeMode::fcn_only
                            ? run.aux_miou
                            : eval_from_confusion(main_conf, C).miou;
    }
    return run;
}

}  // namespace

std::string ProbeReport::csv() const {
    std::ostringstream os;
    os << "run,aux_miou,main_miou\n";
    for (const auto& r : runs) {
        os << r.name << ',' << KeyValues::format_double(r.aux_miou) << ','
           << KeyValues::format_double(r.main_miou) << '\n';
    }
    os << "# reference_aux_miou fcn_only=" << kReferenceFcnOnly
       << " joint=" << kReferenceJoint << " stop_grad=" << kReferenceStopGrad
       << "\n";
    return os.str();
}

ProbeReport aux_probe_experiment(const Dataset& train_data, const Dataset& eval_data,
                                 const TrainConfig& cfg) {
    cfg.validate();
    ProbeReport report;
    report.runs.push_back(run_probe_variant(ProbeMode::fcn_only, "fcn_only",
                                            train_data, eval_data, cfg));
    report.runs.push_back(run_probe_variant(ProbeMode::joint, "sfpn_aux_joint",
                                            train_data, eval_data, cfg));
    report.runs.push_back(run_probe_variant(ProbeMode::stop_grad,
                                            "sfpn_aux_stopgrad", train_data,
                                            eval_data, cfg));
    return report;
}

// --- backbone pretraining ------------------------------------------------------

namespace {

struct ClassificationSet {
    std::vector<Tensor> images;  // [3,S,S] each
    std::vector<int> labels;
};

ClassificationSet classification_set(const Dataset& data) {
    ClassificationSet set;
    for (const auto& s : data.samples) {
        try {
            auto [img, cls] = classification_view(s);
            set.images.push_back(img);
            set.labels.push_back(cls);
        } catch (const std::runtime_error&) {
            // background-only scenes carry no dominant shape; skip them
        }
    }
    if (set.images.size() < 2) {
        throw std::runtime_error("pretrain: classification view kept fewer than "
                                 "2 samples");
    }
    return set;
}

// [B,ch,h,w] -> [B,ch] global average pool, differentiable
Tensor global_average_pool(const Tensor& feat) {
    const std::int64_t B = feat.dim(0), ch = feat.dim(1),
                       hw = feat.dim(2) * feat.dim(3);
    Tensor flat = reshape(feat, {B * ch, hw});
    Tensor pooled = matmul(flat, Tensor::full({hw, 1}, 1.0 / static_cast<double>(hw)));
    return reshape(pooled, {B, ch});
}

}  // namespace

PretrainResult pretrain_backbone(const Dataset& data, const ModelConfig& model_cfg,
                                 const TrainConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    model_cfg.validate();
    ClassificationSet set = classification_set(data);
    const int C = model_cfg.num_classes;
    const std::int64_t S = set.images[0].dim(1);
    const int B = std::min<int>(cfg.batch_size, static_cast<int>(set.images.size()));

    Model model(model_cfg, cfg.seed);
    Rng rng(mix_seed(cfg.seed, 0x636c735f68656164ULL));
    const std::int64_t ch = model_cfg.backbone_stage_channels[3];
    std::vector<double> w(static_cast<size_t>(ch) * C);
    for (auto& v : w) v = rng.normal() * std::sqrt(2.0 / static_cast<double>(ch));
    Tensor head_w = Tensor::from_data({ch, C}, std::move(w), /*requires_grad=*/true);
    Tensor head_b = Tensor::zeros({C}, /*requires_grad=*/true);

    std::vector<ParamEntry> entries;
    for (const auto& p : model.parameters()) {
        if (p.name.rfind("backbone.", 0) == 0) entries.push_back(p);
    }
    entries.push_back({"cls_head.weight", head_w, false});
    entries.push_back({"cls_head.bias", head_b, false});
    std::vector<NamedParam> named;
    for (const auto& e : entries) named.push_back({e.name, e.tensor});

    auto logits_of = [&](const Tensor& images, NormMode mode) {
        Tensor pooled = global_average_pool(model.backbone_forward(images, mode).f32);
        return add_channel(matmul(pooled, head_w), head_b, 1);
    };

    SgdOptimizer opt(cfg);
    std::vector<int> order(set.images.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    size_t cursor = order.size();  // trigger an initial shuffle
    for (int step = 0; step < cfg.total_iters; ++step) {
        if (cursor + static_cast<size_t>(B) > order.size()) {
            for (size_t i = order.size(); i > 1; --i) {
                std::swap(order[i - 1], order[rng.uniform_int(i)]);
            }
            cursor = 0;
        }
        std::vector<double> pixels;
        pixels.reserve(static_cast<size_t>(B) * 3 * S * S);
        std::vector<int> labels(static_cast<size_t>(B));
        for (int k = 0; k < B; ++k, ++cursor) {
            const auto& d = set.images[static_cast<size_t>(order[cursor])].data();
            pixels.insert(pixels.end(), d.begin(), d.end());
            labels[static_cast<size_t>(k)] =
                set.labels[static_cast<size_t>(order[cursor])];
        }
        Tensor images = Tensor::from_data({B, 3, S, S}, std::move(pixels));
        Tensor loss = cross_entropy(logits_of(images, NormMode::train), labels, -1);
        GradientMap grads = backward(loss, named);
        opt.step(entries, grads, poly_lr(step, cfg));
    }

    PretrainResult result;
    {
        NoGradGuard ng;
        int correct = 0;
        for (size_t i = 0; i < set.images.size(); ++i) {
            Tensor img = reshape(set.images[i], {1, 3, S, S});
            const auto& lv = logits_of(img, NormMode::eval).data();
            int best = 0;
            for (int c = 1; c < C; ++c) {
                if (lv[static_cast<size_t>(c)] > lv[static_cast<size_t>(best)])
                    best = c;
            }
            if (best == set.labels[i]) ++correct;
        }
        result.accuracy =
            static_cast<double>(correct) / static_cast<double>(set.images.size());
    }
    save_checkpoint(out_dir, model);
    result.checkpoint_dir = out_dir;
    return result;
}

PretrainCompare pretrain_compare(const std::string& checkpoint_dir,
                                 const Dataset& train_data, const Dataset& eval_data,
                                 const TrainConfig& cfg) {
    cfg.validate();
    PretrainCompare cmp;
    {
        Model pretrained = load_checkpoint(checkpoint_dir);
        TrainResult r = train_model(pretrained, train_data, &eval_data, cfg);
        cmp.pretrained_miou = r.final_eval.miou;
    }
    {
        Model pretrained = load_checkpoint(checkpoint_dir);
        Model scratch(pretrained.config(), cfg.seed);
        TrainResult r = train_model(scratch, train_data, &eval_data, cfg);
        cmp.scratch_miou = r.final_eval.miou;
    }
    return cmp;
}

}  // namespace hfgd
