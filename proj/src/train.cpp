#include "hfgd/train.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "hfgd/rng.hpp"

namespace hfgd {

void TrainConfig::validate() const {
    if (total_iters < 1) throw std::runtime_error("train config: total_iters must be >= 1");
    if (!(lr0 > 0)) throw std::runtime_error("train config: lr0 must be > 0");
    if (batch_size < 4) {
        throw std::runtime_error("train config: batch_size must be >= 4 for stable "
                                 "batch statistics");
    }
    if (momentum < 0 || momentum >= 1) {
        throw std::runtime_error("train config: momentum must be in [0, 1)");
    }
    if (weight_decay < 0) throw std::runtime_error("train config: weight_decay must be >= 0");
    if (!(poly_power > 0)) throw std::runtime_error("train config: poly_power must be > 0");
    if (lambda_teacher < 0 || lambda_student < 0 || lambda_car < 0) {
        throw std::runtime_error("train config: loss weights must be >= 0");
    }
    if (lambda_teacher == 0 && lambda_student == 0 && lambda_car == 0) {
        throw std::runtime_error("train config: at least one loss weight must be > 0");
    }
    if (eval_every < 0) throw std::runtime_error("train config: eval_every must be >= 0");
}

KeyValues TrainConfig::to_kv() const {
    KeyValues kv;
    kv.set_int("batch_size", batch_size);
    kv.set_int("total_iters", total_iters);
    kv.set_double("lr0", lr0);
    kv.set_double("poly_power", poly_power);
    kv.set_double("momentum", momentum);
    kv.set_double("weight_decay", weight_decay);
    kv.set_double("lambda_teacher", lambda_teacher);
    kv.set_double("lambda_student", lambda_student);
    kv.set_double("lambda_car", lambda_car);
    kv.set_int("seed", static_cast<std::int64_t>(seed));
    kv.set_bool("flip_augment", flip_augment);
    kv.set_int("eval_every", eval_every);
    return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
    TrainConfig c;
    c.batch_size = static_cast<int>(kv.get_int("batch_size"));
    c.total_iters = static_cast<int>(kv.get_int("total_iters"));
    c.lr0 = kv.get_double("lr0");
    c.poly_power = kv.get_double("poly_power");
    c.momentum = kv.get_double("momentum");
    c.weight_decay = kv.get_double("weight_decay");
    c.lambda_teacher = kv.get_double("lambda_teacher");
    c.lambda_student = kv.get_double("lambda_student");
    c.lambda_car = kv.get_double("lambda_car");
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed"));
    c.flip_augment = kv.get_bool("flip_augment");
    c.eval_every = static_cast<int>(kv.get_int("eval_every"));
    c.validate();
    return c;
}

double poly_lr(int step, const TrainConfig& cfg) {
    if (step < 0 || step > cfg.total_iters) {
        throw std::runtime_error("poly_lr: step outside [0, total_iters]");
    }
    const double frac = 1.0 - static_cast<double>(step) /
                                  static_cast<double>(cfg.total_iters);
    return cfg.lr0 * std::pow(frac, cfg.poly_power);
}

void SgdOptimizer::step(std::vector<ParamEntry>& params, const GradientMap& grads,
                        double lr) {
    for (auto& p : params) {
        const Tensor* g = grads.find(p.name);
        if (!g) continue;  // parameter not trained by this loss
        if (g->shape() != p.tensor.shape()) {
            throw std::runtime_error("sgd: gradient shape " + shape_str(g->shape()) +
                                     " does not match parameter '" + p.name + "' " +
                                     shape_str(p.tensor.shape()));
        }
        auto& v = velocity_[p.name];
        if (v.empty()) v.assign(static_cast<size_t>(p.tensor.numel()), 0.0);
        auto& pv = p.tensor.mutable_data();
        const auto& gv = g->data();
        const double wd = p.no_decay ? 0.0 : cfg_.weight_decay;
        for (size_t i = 0; i < pv.size(); ++i) {
            v[i] = cfg_.momentum * v[i] + gv[i] + wd * pv[i];
            pv[i] -= lr * v[i];
        }
    }
}

Tensor seg_cross_entropy(const Tensor& logits4d, const std::vector<int>& labels) {
    const std::int64_t B = logits4d.dim(0), C = logits4d.dim(1), H = logits4d.dim(2),
                       W = logits4d.dim(3);
    Tensor flat = reshape(permute(logits4d, {0, 2, 3, 1}), {B * H * W, C});
    return cross_entropy(flat, labels, 255);
}

Tensor seg_cross_entropy(const Tensor& logits4d, const std::vector<std::uint16_t>& labels) {
    return seg_cross_entropy(logits4d, std::vector<int>(labels.begin(), labels.end()));
}

// --- batch stream ----------------------------------------------------------------

BatchStream::BatchStream(const Dataset& data, int batch_size, bool flip,
                         std::uint64_t seed)
    : data_(data),
      batch_size_(batch_size),
      flip_(flip),
      rng_(mix_seed(seed, 0xba7cULL)) {
    if (data_.samples.empty()) throw std::runtime_error("batch stream: empty dataset");
    if (batch_size_ < 1 || static_cast<size_t>(batch_size_) > data_.samples.size()) {
        throw std::runtime_error("batch stream: batch_size exceeds dataset size");
    }
    order_.resize(data_.samples.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    reshuffle();
}

void BatchStream::reshuffle() {
    // Fisher-Yates with the stream's own generator, independent of std::shuffle
    // implementation details
    for (size_t i = order_.size(); i > 1; --i) {
        const size_t j = static_cast<size_t>(rng_.uniform_int(i));
        std::swap(order_[i - 1], order_[j]);
    }
    cursor_ = 0;
}

Batch BatchStream::next() {
    // partial trailing batches are dropped: reshuffle when too few remain
    if (cursor_ + static_cast<size_t>(batch_size_) > order_.size()) reshuffle();
    const auto& s0 = data_.samples[static_cast<size_t>(order_[cursor_])];
    const std::int64_t H = s0.image.dim(1), W = s0.image.dim(2);
    const std::int64_t plane = H * W;
    Batch b;
    std::vector<double> img(static_cast<size_t>(batch_size_) * 3 * plane);
    b.labels.resize(static_cast<size_t>(batch_size_) * plane);
    for (int k = 0; k < batch_size_; ++k, ++cursor_) {
        const auto& s = data_.samples[static_cast<size_t>(order_[cursor_])];
        if (s.image.dim(1) != H || s.image.dim(2) != W) {
            throw std::runtime_error("batch stream: mixed sample sizes");
        }
        const bool flip = flip_ && rng_.uniform() < 0.5;
        const auto& sv = s.image.data();
        for (std::int64_t c = 0; c < 3; ++c) {
            for (std::int64_t i = 0; i < H; ++i) {
                for (std::int64_t j = 0; j < W; ++j) {
                    const std::int64_t sj = flip ? W - 1 - j : j;
                    img[static_cast<size_t>(((k * 3 + c) * H + i) * W + j)] =
                        sv[static_cast<size_t>((c * H + i) * W + sj)];
                }
            }
        }
        for (std::int64_t i = 0; i < H; ++i) {
            for (std::int64_t j = 0; j < W; ++j) {
                const std::int64_t sj = flip ? W - 1 - j : j;
                b.labels[static_cast<size_t>(k * plane + i * W + j)] =
                    s.labels[static_cast<size_t>(i * W + sj)];
            }
        }
    }
    b.images = Tensor::from_data({batch_size_, 3, H, W}, std::move(img));
    return b;
}

// --- trainer ----------------------------------------------------------------------

Trainer::Trainer(Model& model, const TrainConfig& cfg)
    : model_(model), cfg_(cfg), opt_(cfg) {
    cfg_.validate();
    model_.config_mutable().car_weight = cfg_.lambda_car;
}

void Trainer::resolve_trainable(const Tensor& loss) {
    Reachability r = analyze_reachability(loss);
    trainable_.clear();
    for (const auto& e : model_.parameters()) {
        if (r.reaches(e.tensor)) trainable_.push_back(e.name);
    }
    if (trainable_.empty()) {
        throw std::runtime_error("train_step: no parameter is reachable from the loss");
    }
    resolved_ = true;
}

StepLosses Trainer::train_step(const Batch& batch, int step) {
    ModelOutput out = model_.forward(batch.images, &batch.labels, NormMode::train);

    StepLosses losses;
    Tensor total;
    auto contribute = [&](const Tensor& term, double weight, double& slot) {
        slot = term.value();
        if (weight == 0.0) return;  // keep zero-weighted terms out of the graph
        Tensor scaled = weight == 1.0 ? term : scale(term, weight);
        total = total.defined() ? add(total, scaled) : scaled;
    };
    if (cfg_.lambda_teacher > 0 || cfg_.lambda_student > 0 || cfg_.lambda_car > 0) {
        if (cfg_.lambda_teacher > 0) {
            Tensor tce = seg_cross_entropy(
                out.teacher_logits,
                downsample_labels_nearest(batch.labels, batch.images.dim(0),
                                          batch.images.dim(2), batch.images.dim(3), 32));
            contribute(tce, cfg_.lambda_teacher, losses.teacher_ce);
        }
        if (cfg_.lambda_student > 0) {
            Tensor sce = seg_cross_entropy(out.student_logits, batch.labels);
            contribute(sce, cfg_.lambda_student, losses.student_ce);
        }
        if (cfg_.lambda_car > 0 && out.car_intra.defined()) {
            contribute(out.car_intra, cfg_.lambda_car, losses.car_intra);
            contribute(out.car_inter, cfg_.lambda_car, losses.car_inter);
        }
    }
    if (!total.defined()) {
        throw std::runtime_error("train_step: loss graph is empty");
    }
    losses.total = total.value();

    if (!resolved_) resolve_trainable(total);
    std::vector<NamedParam> named;
    std::vector<ParamEntry> entries;
    for (const auto& e : model_.parameters()) {
        if (std::find(trainable_.begin(), trainable_.end(), e.name) != trainable_.end()) {
            named.push_back({e.name, e.tensor});
            entries.push_back(e);
        }
    }
    GradientMap grads = backward(total, named);
    opt_.step(entries, grads, poly_lr(step, cfg_));
    return losses;
}

// --- full runs --------------------------------------------------------------------

TrainResult train_model(Model& model, const Dataset& train_data,
                        const Dataset* eval_data, const TrainConfig& cfg) {
    cfg.validate();
    Trainer trainer(model, cfg);
    BatchStream stream(train_data, cfg.batch_size, cfg.flip_augment, cfg.seed);
    TrainResult result;
    result.history.reserve(static_cast<size_t>(cfg.total_iters));
    std::ostringstream csv;
    csv << "step,lr,total,teacher_ce,student_ce,car_intra,car_inter";
    if (eval_data) csv << ",miou";
    csv << '\n';
    for (int step = 0; step < cfg.total_iters; ++step) {
        StepLosses l = trainer.train_step(stream.next(), step);
        result.history.push_back(l);
        csv << step << ',' << KeyValues::format_double(poly_lr(step, cfg)) << ','
            << KeyValues::format_double(l.total) << ','
            << KeyValues::format_double(l.teacher_ce) << ','
            << KeyValues::format_double(l.student_ce) << ','
            << KeyValues::format_double(l.car_intra) << ','
            << KeyValues::format_double(l.car_inter);
        const bool eval_now =
            eval_data && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if (eval_now) {
            csv << ',' << KeyValues::format_double(evaluate(model, *eval_data).miou);
        } else if (eval_data) {
            csv << ',';
        }
        csv << '\n';
    }
    if (eval_data) {
        result.final_eval = evaluate(model, *eval_data);
    }
    result.metrics_csv = csv.str();
    return result;
}

EvalResult evaluate(Model& model, const Dataset& data) {
    if (data.samples.empty()) throw std::runtime_error("evaluate: empty dataset");
    NoGradGuard ng;
    const int C = model.config().num_classes;
    std::vector<std::int64_t> confusion(static_cast<size_t>(C) * C, 0);
    for (const auto& s : data.samples) {
        const std::int64_t H = s.image.dim(1), W = s.image.dim(2);
        Tensor img = reshape(s.image, {1, 3, H, W});
        ModelOutput out = model.forward(img, nullptr, NormMode::eval);
        accumulate_confusion(confusion, C, argmax_classes(out.student_logits), s.labels);
    }
    return eval_from_confusion(confusion, C);
}

}  // namespace hfgd
