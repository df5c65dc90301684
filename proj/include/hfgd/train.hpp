#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hfgd/config.hpp"
#include "hfgd/data.hpp"
#include "hfgd/metrics.hpp"
#include "hfgd/model.hpp"
#include "hfgd/rng.hpp"

namespace hfgd {

struct TrainConfig {
    int batch_size = 8;
    int total_iters = 2000;
    double lr0 = 0.01;
    double poly_power = 0.9;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double lambda_teacher = 1.0;
    double lambda_student = 1.0;
    double lambda_car = 0.1;
    std::uint64_t seed = 0;
    bool flip_augment = true;
    int eval_every = 0;  // 0 = evaluate only at the end

    void validate() const;
    KeyValues to_kv() const;
    static TrainConfig from_kv(const KeyValues& kv);
};

double poly_lr(int step, const TrainConfig& cfg);

// Momentum SGD: v <- momentum*v + grad + weight_decay*param; param -= lr*v.
// Entries flagged no_decay (norm affine, class tokens) skip the decay term.
class SgdOptimizer {
public:
    explicit SgdOptimizer(const TrainConfig& cfg) : cfg_(cfg) {}
    void step(std::vector<ParamEntry>& params, const GradientMap& grads, double lr);

private:
    TrainConfig cfg_;
    std::map<std::string, std::vector<double>> velocity_;
};

struct StepLosses {
    double total = 0.0;
    double teacher_ce = 0.0;
    double student_ce = 0.0;
    double car_intra = 0.0;
    double car_inter = 0.0;
};

// Cross entropy helpers shared by training, audits and experiments.
Tensor seg_cross_entropy(const Tensor& logits4d, const std::vector<std::uint16_t>& labels);
Tensor seg_cross_entropy(const Tensor& logits4d, const std::vector<int>& labels);

struct Batch {
    Tensor images;                      // [B,3,H,W]
    std::vector<std::uint16_t> labels;  // B*H*W
};

// Deterministic batch stream: per-epoch Fisher-Yates shuffle and an optional
// per-sample horizontal flip, all driven by one seeded generator.
class BatchStream {
public:
    BatchStream(const Dataset& data, int batch_size, bool flip, std::uint64_t seed);
    Batch next();

private:
    const Dataset& data_;
    int batch_size_;
    bool flip_;
    Rng rng_;
    std::vector<int> order_;
    size_t cursor_ = 0;

    void reshuffle();
};

class Trainer {
public:
    // The trainer drives which loss terms exist, so it owns the car weight:
    // the model's car_weight is overwritten with lambda_car up front.
    Trainer(Model& model, const TrainConfig& cfg);

    StepLosses train_step(const Batch& batch, int step);
    const TrainConfig& config() const { return cfg_; }

private:
    Model& model_;
    TrainConfig cfg_;
    SgdOptimizer opt_;
    // Parameters the active loss can reach without crossing a barrier; only
    // these receive optimizer updates (weight decay included), so protected
    // branches stay bit-identical. Resolved from the graph on the first step.
    std::vector<std::string> trainable_;
    bool resolved_ = false;

    void resolve_trainable(const Tensor& loss);
};

struct TrainResult {
    std::vector<StepLosses> history;  // one entry per step
    EvalResult final_eval;            // default-empty when no eval set given
    std::string metrics_csv;          // step,total,teacher_ce,student_ce,...
};

TrainResult train_model(Model& model, const Dataset& train_data,
                        const Dataset* eval_data, const TrainConfig& cfg);

EvalResult evaluate(Model& model, const Dataset& data);

}  // namespace hfgd
