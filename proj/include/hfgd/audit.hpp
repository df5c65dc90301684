#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "hfgd/model.hpp"
#include "hfgd/train.hpp"

namespace hfgd {

struct GradAuditRow {
    std::string loss_term;  // teacher_ce | student_ce | car_intra | car_inter
    std::string group;      // backbone.stem, backbone.stage1..4, cae, tokens, ...
    bool reachable = false; // a graph path without barriers exists
    double max_abs_grad = 0.0;
    std::string verdict;    // zero-by-topology | nonzero | zero-but-reachable
};

struct GradAuditReport {
    std::vector<GradAuditRow> rows;
    bool sound = true;  // every zero-by-topology row has a bit-zero gradient

    const GradAuditRow* find(const std::string& loss_term,
                             const std::string& group) const;
    std::string text() const;  // one line per (loss term, group)
};

// Parameter group of a registered name, e.g. "backbone.stage2.conv1.weight"
// -> "backbone.stage2".
std::string param_group(const std::string& name);

// Backpropagates each active loss term separately on one seeded synthetic
// batch and grades every parameter group against static reachability.
GradAuditReport grad_audit(Model& model, std::uint64_t seed, int batch_size = 4);

struct GradCheckSuite {
    std::vector<std::pair<std::string, GradCheckReport>> terms;
    bool pass = true;
    double max_rel_err = 0.0;
    std::string text() const;
};

// Finite-difference check of every parameter against each loss term on a
// fixed fixture (one uniformly-labeled 32x32 image per class pixel, so CAR
// centers coincide with their single pixels and stay differentiable).
GradCheckSuite gradcheck_model(const ModelConfig& cfg, std::uint64_t seed,
                               int max_coords_per_param = 3);

}  // namespace hfgd
