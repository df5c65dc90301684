#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hfgd/tensor.hpp"

namespace hfgd {

struct EvalResult {
    int num_classes = 0;
    std::vector<std::int64_t> confusion;  // C*C, row = ground truth, col = prediction
    std::vector<double> per_class_iou;    // NaN for classes absent in GT and prediction
    double miou = 0.0;                    // mean over non-NaN entries
    double pixel_acc = 0.0;

    std::int64_t confusion_at(int gt, int pred) const {
        return confusion[static_cast<size_t>(gt) * num_classes + static_cast<size_t>(pred)];
    }
    std::string csv() const;  // per-class rows plus summary
};

// Per-pixel argmax over the channel axis of [B,C,H,W]; ties resolve to the
// lowest class index.
std::vector<int> argmax_classes(const Tensor& logits);

// Adds non-ignored pixels into a C*C confusion accumulator.
void accumulate_confusion(std::vector<std::int64_t>& confusion, int num_classes,
                          const std::vector<int>& pred,
                          const std::vector<std::uint16_t>& gt);

// IoU_c = TP / (TP + FP + FN); classes with an empty union are excluded from
// the mean (NaN in per_class_iou).
EvalResult eval_from_confusion(const std::vector<std::int64_t>& confusion,
                               int num_classes);

// Median with the even-count midpoint average; throws on an empty input.
double median(std::vector<double> values);

}  // namespace hfgd
