#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hfgd/data.hpp"
#include "hfgd/metrics.hpp"
#include "hfgd/model.hpp"
#include "hfgd/train.hpp"

namespace hfgd {

// --- decoder ablation grid ---------------------------------------------------

// The ten comparison variants: {plain, +guidance, +AA, full HFGM} x
// {identity encoder, CAE} on the flat SFPN upsampler, plus the full model on
// U-SFPN at OS=4 and at OS=2.
std::vector<std::pair<std::string, ModelConfig>> ablation_rows(int num_classes);

struct AblationRow {
    std::string name;
    ModelConfig config;
    std::vector<double> mious;  // one per seed, in seed order
    std::vector<double> pixel_accs;
    double median_miou = 0.0;
};

struct AblationReport {
    std::vector<AblationRow> rows;
    std::vector<std::uint64_t> seeds;

    // mIoU gains measured by the full-scale counterparts of these rows
    // (ImageNet backbone, real benchmarks); the desk-scale grid is expected
    // to match their sign, not their size.
    static constexpr double kReferenceFullHfgmGain = 1.80;
    static constexpr double kReferenceCaeGain = 1.52;
    static constexpr double kReferenceUsfpnGain = 0.48;
    static constexpr double kReferenceOs2Gain = 0.7;

    double median_of(const std::string& row_name) const;
    std::string csv() const;    // long form: row,seed,miou,pixel_acc
    std::string table() const;  // one line per row: name, per-seed mIoU, median
};

AblationReport ablation_matrix(const Dataset& train_data, const Dataset& eval_data,
                               const TrainConfig& base_cfg,
                               const std::vector<std::uint64_t>& seeds);

// --- auxiliary-head probe ------------------------------------------------------

// Three runs quantifying what decoder supervision does to the encoder's own
// features: (a) a bare backbone + 1x1 head trained on OS=32 masks, (b) an
// open-lateral SFPN trained jointly with that auxiliary head, (c) the same
// with the auxiliary gradient stopped at the backbone. The auxiliary mIoU is
// always measured on the OS=32 grid; runs share bit-identical batch order.
struct ProbeRun {
    std::string name;  // fcn_only | sfpn_aux_joint | sfpn_aux_stopgrad
    double aux_miou = 0.0;
    double main_miou = 0.0;  // full-resolution decoder output; == aux for (a)
};

struct ProbeReport {
    std::vector<ProbeRun> runs;  // exactly 3, in the order above

    // aux-head mIoU ordering of the full-scale counterpart of this protocol
    static constexpr double kReferenceFcnOnly = 45.87;
    static constexpr double kReferenceJoint = 44.35;
    static constexpr double kReferenceStopGrad = 40.04;

    std::string csv() const;  // run,aux_miou,main_miou
};

ProbeReport aux_probe_experiment(const Dataset& train_data, const Dataset& eval_data,
                                 const TrainConfig& cfg);

// --- backbone pretraining ------------------------------------------------------

// Trains backbone + global-average-pool + linear head on the dominant-shape
// classification view of `data`, then checkpoints the full model (heads still
// at their seed initialization) for fine-tuning.
struct PretrainResult {
    double accuracy = 0.0;  // classification accuracy on `data` after training
    std::string checkpoint_dir;

    // full-scale counterpart at its iteration budget: pretrained vs scratch
    static constexpr double kReferencePretrainedMiou = 45.87;
    static constexpr double kReferenceScratchMiou = 26.13;
};

PretrainResult pretrain_backbone(const Dataset& data, const ModelConfig& model_cfg,
                                 const TrainConfig& cfg, const std::string& out_dir);

// Fine-tunes segmentation from the pretrained checkpoint and from scratch
// under identical seeds, batch order and iteration budget.
struct PretrainCompare {
    double scratch_miou = 0.0;
    double pretrained_miou = 0.0;
};

PretrainCompare pretrain_compare(const std::string& checkpoint_dir,
                                 const Dataset& train_data, const Dataset& eval_data,
                                 const TrainConfig& cfg);

}  // namespace hfgd
