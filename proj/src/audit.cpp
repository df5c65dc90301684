#include "hfgd/audit.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "hfgd/data.hpp"
#include "hfgd/rng.hpp"

namespace hfgd {

std::string param_group(const std::string& name) {
    auto first_dot = name.find('.');
    if (first_dot == std::string::npos) return name;  // "tokens"
    std::string head = name.substr(0, first_dot);
    if (head != "backbone") return head;
    auto second_dot = name.find('.', first_dot + 1);
    if (second_dot == std::string::npos) return name;
    return name.substr(0, second_dot);  // "backbone.stem", "backbone.stageN"
}

const GradAuditRow* GradAuditReport::find(const std::string& loss_term,
                                          const std::string& group) const {
    for (const auto& r : rows)
        if (r.loss_term == loss_term && r.group == group) return &r;
    return nullptr;
}

std::string GradAuditReport::text() const {
    std::ostringstream os;
    os << std::left << std::setw(12) << "loss_term" << std::setw(18) << "group"
       << std::setw(11) << "reachable" << std::setw(20) << "verdict"
       << "max_abs_grad\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(12) << r.loss_term << std::setw(18)
           << r.group << std::setw(11) << (r.reachable ? "yes" : "no")
           << std::setw(20) << r.verdict << std::scientific
           << std::setprecision(3) << r.max_abs_grad << "\n";
        os << std::defaultfloat;
    }
    os << (sound ? "audit: sound (every unreachable group has a bit-zero "
                   "gradient)\n"
                 : "audit: VIOLATION (a group graded zero-by-topology "
                   "received gradient)\n");
    return os.str();
}

namespace {

Batch make_audit_batch(const ModelConfig& cfg, std::uint64_t seed,
                       int batch_size, int image_size) {
    SceneSpec spec;
    spec.image_size = image_size;
    spec.num_classes = cfg.num_classes;
    spec.validate();
    std::vector<double> pixels;
    pixels.reserve(static_cast<size_t>(batch_size) * 3 * image_size * image_size);
    std::vector<std::uint16_t> labels;
    labels.reserve(static_cast<size_t>(batch_size) * image_size * image_size);
    for (int b = 0; b < batch_size; ++b) {
        SegSample s = generate_sample(mix_seed(seed, static_cast<std::uint64_t>(b)), spec);
        const auto& d = s.image.data();
        pixels.insert(pixels.end(), d.begin(), d.end());
        labels.insert(labels.end(), s.labels.begin(), s.labels.end());
    }
    Batch batch;
    batch.images = Tensor::from_data(
        {batch_size, 3, image_size, image_size}, std::move(pixels));
    batch.labels = std::move(labels);
    return batch;
}

}  // namespace

GradAuditReport grad_audit(Model& model, std::uint64_t seed, int batch_size) {
    if (batch_size < 2)
        throw std::invalid_argument("grad_audit: batch_size must be >= 2");
    const ModelConfig& cfg = model.config();
    const int S = 64;
    Batch batch = make_audit_batch(cfg, mix_seed(seed, 0x617564697472ULL),
                                   batch_size, S);
    std::vector<int> labels32 = downsample_labels_nearest(
        batch.labels, batch_size, S, S, 32);

    std::vector<std::string> terms = {"teacher_ce", "student_ce"};
    const bool car_active = cfg.cae_enabled && cfg.car_weight > 0;
    if (car_active) {
        terms.push_back("car_intra");
        terms.push_back("car_inter");
    }

    // parameter groups in registration order
    std::vector<std::string> groups;
    for (const auto& p : model.parameters()) {
        std::string g = param_group(p.name);
        if (std::find(groups.begin(), groups.end(), g) == groups.end())
            groups.push_back(g);
    }

    auto named = model.named_params();
    GradAuditReport rep;
    for (const auto& term : terms) {
        // each term gets its own forward pass: backward() dismantles the graph
        ModelOutput out = model.forward(batch.images, &batch.labels,
                                        NormMode::train,
                                        /*teacher_only=*/term != "student_ce");
        Tensor loss;
        if (term == "teacher_ce")
            loss = seg_cross_entropy(out.teacher_logits, labels32);
        else if (term == "student_ce")
            loss = seg_cross_entropy(out.student_logits, batch.labels);
        else if (term == "car_intra")
            loss = out.car_intra;
        else
            loss = out.car_inter;

        Reachability reach = analyze_reachability(loss);
        GradientMap grads = backward(loss, named);
        for (const auto& g : groups) {
            GradAuditRow row;
            row.loss_term = term;
            row.group = g;
            for (const auto& p : model.parameters()) {
                if (param_group(p.name) != g) continue;
                row.reachable = row.reachable || reach.reaches(p.tensor);
                row.max_abs_grad =
                    std::max(row.max_abs_grad, grads.max_abs(p.name));
            }
            if (!row.reachable) {
                row.verdict = "zero-by-topology";
                if (row.max_abs_grad != 0.0) rep.sound = false;
            } else {
                row.verdict = row.max_abs_grad > 0.0 ? "nonzero"
                                                     : "zero-but-reachable";
            }
            rep.rows.push_back(std::move(row));
        }
    }
    return rep;
}

std::string GradCheckSuite::text() const {
    std::ostringstream os;
    for (const auto& [name, rep] : terms) {
        std::int64_t checked = 0, excluded = 0;
        for (const auto& e : rep.entries) {
            checked += e.checked;
            if (e.barrier_excluded) ++excluded;
        }
        os << std::left << std::setw(12) << name
           << (rep.pass ? "pass" : "FAIL") << "  max_rel_err="
           << std::scientific << std::setprecision(3) << rep.max_rel_err
           << std::defaultfloat << "  coords=" << checked
           << "  barrier_excluded_params=" << excluded << "\n";
    }
    os << (pass ? "gradcheck: pass\n" : "gradcheck: FAIL\n");
    return os.str();
}

GradCheckSuite gradcheck_model(const ModelConfig& cfg, std::uint64_t seed,
                               int max_coords_per_param) {
    cfg.validate();
    Model model(cfg, seed);
    const int S = 32;  // OS=32 leaves one cell per image
    const int B = 2;
    Batch batch = make_audit_batch(cfg, mix_seed(seed, 0x6764636bULL), B, S);
    // Uniform single-class labels, one distinct class per image: at OS=32
    // every class then owns exactly one pixel, so the frozen CAR center
    // coincides with its pixel and the stop-gradient path carries no true
    // gradient -- the only labeling where finite differences stay valid.
    std::vector<std::uint16_t> labels(batch.labels.size());
    for (int b = 0; b < B; ++b) {
        auto cls = static_cast<std::uint16_t>(b % (cfg.num_classes - 1) + 1);
        std::fill(labels.begin() + static_cast<std::ptrdiff_t>(b) * S * S,
                  labels.begin() + static_cast<std::ptrdiff_t>(b + 1) * S * S,
                  cls);
    }
    std::vector<int> labels32 = downsample_labels_nearest(labels, B, S, S, 32);

    auto named = model.named_params();
    GradCheckOptions opts;
    opts.max_coords_per_param = max_coords_per_param;

    GradCheckSuite suite;
    auto run_term = [&](const std::string& name,
                        const std::function<Tensor()>& fwd) {
        GradCheckReport rep = finite_diff_check(fwd, named, opts);
        suite.pass = suite.pass && rep.pass;
        suite.max_rel_err = std::max(suite.max_rel_err, rep.max_rel_err);
        suite.terms.emplace_back(name, rep);
    };

    run_term("teacher_ce", [&] {
        ModelOutput out = model.forward(batch.images, &labels, NormMode::train,
                                        /*teacher_only=*/true);
        return seg_cross_entropy(out.teacher_logits, labels32);
    });
    run_term("student_ce", [&] {
        ModelOutput out = model.forward(batch.images, &labels, NormMode::train);
        return seg_cross_entropy(out.student_logits, labels);
    });
    if (cfg.cae_enabled && cfg.car_weight > 0 && cfg.num_classes >= 3) {
        run_term("car_intra", [&] {
            ModelOutput out = model.forward(batch.images, &labels,
                                            NormMode::train, /*teacher_only=*/true);
            return out.car_intra;
        });
        run_term("car_inter", [&] {
            ModelOutput out = model.forward(batch.images, &labels,
                                            NormMode::train, /*teacher_only=*/true);
            return out.car_inter;
        });
    }
    return suite;
}

}  // namespace hfgd
