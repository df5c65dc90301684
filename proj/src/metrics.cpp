#include "hfgd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "hfgd/config.hpp"

namespace hfgd {

std::vector<int> argmax_classes(const Tensor& logits) {
    if (logits.ndim() != 4) {
        throw std::runtime_error("argmax_classes: expected [B,C,H,W], got " +
                                 shape_str(logits.shape()));
    }
    const std::int64_t B = logits.dim(0), C = logits.dim(1), H = logits.dim(2),
                       W = logits.dim(3);
    const auto& v = logits.data();
    std::vector<int> out(static_cast<size_t>(B * H * W));
    const std::int64_t plane = H * W;
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t p = 0; p < plane; ++p) {
            const size_t base = static_cast<size_t>((b * C) * plane + p);
            int best = 0;
            double best_v = v[base];
            for (std::int64_t c = 1; c < C; ++c) {
                const double cv = v[base + static_cast<size_t>(c * plane)];
                if (cv > best_v) {  // strict: ties keep the lowest class
                    best_v = cv;
                    best = static_cast<int>(c);
                }
            }
            out[static_cast<size_t>(b * plane + p)] = best;
        }
    }
    return out;
}

void accumulate_confusion(std::vector<std::int64_t>& confusion, int num_classes,
                          const std::vector<int>& pred,
                          const std::vector<std::uint16_t>& gt) {
    if (confusion.size() != static_cast<size_t>(num_classes) * num_classes) {
        throw std::runtime_error("accumulate_confusion: accumulator size mismatch");
    }
    if (pred.size() != gt.size()) {
        throw std::runtime_error("accumulate_confusion: prediction/label count mismatch");
    }
    for (size_t i = 0; i < gt.size(); ++i) {
        const int y = gt[i];
        if (y == 255) continue;
        if (y < 0 || y >= num_classes || pred[i] < 0 || pred[i] >= num_classes) {
            throw std::runtime_error("accumulate_confusion: class index out of range");
        }
        ++confusion[static_cast<size_t>(y) * num_classes + static_cast<size_t>(pred[i])];
    }
}

EvalResult eval_from_confusion(const std::vector<std::int64_t>& confusion,
                               int num_classes) {
    EvalResult r;
    r.num_classes = num_classes;
    r.confusion = confusion;
    r.per_class_iou.assign(static_cast<size_t>(num_classes),
                           std::numeric_limits<double>::quiet_NaN());
    std::int64_t total = 0, correct = 0;
    double iou_sum = 0.0;
    int iou_n = 0;
    for (int c = 0; c < num_classes; ++c) {
        std::int64_t tp = r.confusion_at(c, c), fp = 0, fn = 0;
        for (int o = 0; o < num_classes; ++o) {
            if (o != c) {
                fn += r.confusion_at(c, o);
                fp += r.confusion_at(o, c);
            }
        }
        if (tp + fp + fn > 0) {
            const double iou =
                static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
            r.per_class_iou[static_cast<size_t>(c)] = iou;
            iou_sum += iou;
            ++iou_n;
        }
        correct += tp;
        for (int o = 0; o < num_classes; ++o) total += r.confusion_at(c, o);
    }
    r.miou = iou_n > 0 ? iou_sum / iou_n : 0.0;
    r.pixel_acc = total > 0 ? static_cast<double>(correct) / static_cast<double>(total)
                            : 0.0;
    return r;
}

double median(std::vector<double> values) {
    if (values.empty()) throw std::runtime_error("median: empty input");
    std::sort(values.begin(), values.end());
    const size_t n = values.size();
    return n % 2 == 1 ? values[n / 2]
                      : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::string EvalResult::csv() const {
    std::ostringstream os;
    os << "class,iou,gt_pixels\n";
    for (int c = 0; c < num_classes; ++c) {
        std::int64_t row = 0;
        for (int o = 0; o < num_classes; ++o) row += confusion_at(c, o);
        os << c << ',';
        const double iou = per_class_iou[static_cast<size_t>(c)];
        if (std::isnan(iou)) {
            os << "absent";
        } else {
            os << KeyValues::format_double(iou);
        }
        os << ',' << row << '\n';
    }
    os << "miou," << KeyValues::format_double(miou) << ",\n";
    os << "pixel_acc," << KeyValues::format_double(pixel_acc) << ",\n";
    return os.str();
}

}  // namespace hfgd
