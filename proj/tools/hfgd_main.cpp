#include <CLI11.hpp>

#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "hfgd/audit.hpp"
#include "hfgd/checkpoint.hpp"
#include "hfgd/config.hpp"
#include "hfgd/data.hpp"
#include "hfgd/experiments.hpp"
#include "hfgd/io.hpp"
#include "hfgd/metrics.hpp"
#include "hfgd/model.hpp"
#include "hfgd/train.hpp"

namespace fs = std::filesystem;
using namespace hfgd;

namespace {

constexpr const char* kVersion = "0.1.0";

// thrown for bad flags/keys/values -> exit 2; other exceptions -> exit 1
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string timestamp_utc() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

KeyValues default_config_kv() {
    KeyValues kv = ModelConfig().to_kv();
    const KeyValues train_kv = TrainConfig().to_kv();
    for (const auto& [k, v] : train_kv.items()) kv.set(k, v);
    return kv;
}

std::string valid_keys_line() {
    const KeyValues defaults = default_config_kv();
    std::string line;
    for (const auto& [k, v] : defaults.items()) {
        if (!line.empty()) line += ", ";
        line += k;
    }
    return line;
}

struct ConfigBundle {
    ModelConfig model;
    TrainConfig train;
    KeyValues merged;  // every key materialized, overrides applied
};

// defaults <- optional config file (run_* manifest keys skipped) <- --set pairs
ConfigBundle resolve_config(const std::string& config_path,
                            const std::vector<std::string>& sets) {
    KeyValues kv = default_config_kv();
    if (!config_path.empty()) {
        const KeyValues file = KeyValues::parse(read_text_file(config_path));
        for (const auto& [k, v] : file.items()) {
            if (kv.has(k)) {
                kv.set(k, v);
            } else if (k.rfind("run_", 0) != 0) {
                throw UsageError("config file '" + config_path + "': unknown key '" +
                                 k + "'; valid keys: " + valid_keys_line());
            }
        }
    }
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw UsageError("--set expects key=value, got '" + s + "'");
        }
        const std::string key = s.substr(0, eq);
        if (!kv.has(key)) {
            throw UsageError("unknown key '" + key +
                             "'; valid keys: " + valid_keys_line());
        }
        kv.set(key, s.substr(eq + 1));
    }
    ConfigBundle b;
    try {
        b.model = ModelConfig::from_kv(kv);
        b.train = TrainConfig::from_kv(kv);
    } catch (const std::exception& e) {
        throw UsageError(e.what());
    }
    b.merged = b.model.to_kv();
    const KeyValues train_kv = b.train.to_kv();
    for (const auto& [k, v] : train_kv.items()) b.merged.set(k, v);
    return b;
}

void guard_output(const fs::path& p, bool overwrite) {
    if (fs::exists(p) && !overwrite) {
        throw std::runtime_error("output '" + p.string() +
                                 "' already exists; pass --overwrite to replace it");
    }
}

void write_run_manifest(const fs::path& path, const std::string& command,
                        const KeyValues& cfg,
                        const std::vector<std::pair<std::string, std::string>>& meta) {
    KeyValues kv = cfg;
    kv.set("run_command", command);
    kv.set("run_code_version", kVersion);
    for (const auto& [k, v] : meta) kv.set("run_" + k, v);
    write_text_file(path.string(), kv.serialize());
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            size_t used = 0;
            seeds.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError("--seeds expects comma-separated integers, got '" +
                             text + "'");
        }
    }
    if (seeds.empty()) throw UsageError("--seeds expects at least one seed");
    return seeds;
}

std::string keys_footer() {
    std::ostringstream os;
    os << "Configurable keys for --set key=value and config files "
          "(defaults shown):\n";
    const KeyValues model_kv = ModelConfig().to_kv();
    const KeyValues train_kv = TrainConfig().to_kv();
    const KeyValues spec_kv = SceneSpec().to_kv();
    os << "  model:\n";
    for (const auto& [k, v] : model_kv.items())
        os << "    " << k << " = " << v << "\n";
    os << "  train:\n";
    for (const auto& [k, v] : train_kv.items())
        os << "    " << k << " = " << v << "\n";
    os << "  scene spec (gen-data --spec FILE):\n";
    for (const auto& [k, v] : spec_kv.items())
        os << "    " << k << " = " << v << "\n";
    os << "Environment: HFGD_THREADS caps worker count "
          "(absent or 0 = single-threaded deterministic mode).\n";
    return os.str();
}

// ---------------------------------------------------------------------------

struct GenDataOpts {
    std::string out, spec_file;
    int n = 0;
    std::uint64_t seed = 0;
    bool overwrite = false;
};

int cmd_gen_data(const GenDataOpts& o) {
    SceneSpec spec;
    if (!o.spec_file.empty()) {
        KeyValues kv = spec.to_kv();  // partial spec files overlay the defaults
        const KeyValues file = KeyValues::parse(read_text_file(o.spec_file));
        for (const auto& [k, v] : file.items()) {
            if (!kv.has(k)) {
                throw UsageError("--spec: unknown key '" + k + "'");
            }
            kv.set(k, v);
        }
        try {
            spec = SceneSpec::from_kv(kv);
            spec.validate();
        } catch (const std::exception& e) {
            throw UsageError(std::string("--spec: ") + e.what());
        }
    }
    if (o.n < 1) throw UsageError("--n must be >= 1");
    guard_output(fs::path(o.out) / "manifest.txt", o.overwrite);
    const std::string manifest = generate_dataset(o.n, o.seed, spec, o.out);
    std::cout << manifest << "\n";
    return 0;
}

struct TrainOpts {
    std::string data, eval_data, out, config;
    std::vector<std::string> sets;
    bool overwrite = false;
};

int cmd_train(const TrainOpts& o) {
    ConfigBundle bundle = resolve_config(o.config, o.sets);
    const Dataset train_data = load_dataset(o.data);
    Dataset eval_data;
    const bool has_eval = !o.eval_data.empty();
    if (has_eval) eval_data = load_dataset(o.eval_data);

    const fs::path out(o.out);
    guard_output(out / "manifest.txt", o.overwrite);
    fs::create_directories(out);
    std::vector<std::pair<std::string, std::string>> meta = {
        {"status", "running"},
        {"started", timestamp_utc()},
        {"data", o.data},
    };
    if (has_eval) meta.push_back({"eval_data", o.eval_data});
    write_run_manifest(out / "manifest.txt", "train", bundle.merged, meta);

    Model model(bundle.model, bundle.train.seed);
    TrainResult result =
        train_model(model, train_data, has_eval ? &eval_data : nullptr, bundle.train);

    save_checkpoint((out / "checkpoint").string(), model);
    write_text_file((out / "metrics.csv").string(), result.metrics_csv);
    meta[0].second = "completed";
    meta.push_back({"finished", timestamp_utc()});
    meta.push_back({"checkpoint", (out / "checkpoint").string()});
    meta.push_back({"metrics", (out / "metrics.csv").string()});
    if (has_eval) {
        write_text_file((out / "eval.csv").string(), result.final_eval.csv());
        meta.push_back({"final_miou",
                        KeyValues::format_double(result.final_eval.miou)});
    }
    write_run_manifest(out / "manifest.txt", "train", bundle.merged, meta);

    const StepLosses& last = result.history.back();
    std::cout << "trained " << bundle.train.total_iters << " iterations; final total "
              << KeyValues::format_double(last.total);
    if (has_eval) {
        std::cout << "; eval miou "
                  << KeyValues::format_double(result.final_eval.miou);
    }
    std::cout << "\ncheckpoint: " << (out / "checkpoint").string() << "\n";
    return 0;
}

struct EvalOpts {
    std::string checkpoint, data, out;
    bool overwrite = false;
};

int cmd_eval(const EvalOpts& o) {
    Model model = load_checkpoint(o.checkpoint);
    const Dataset data = load_dataset(o.data);
    const EvalResult r = evaluate(model, data);
    std::cout << "miou " << KeyValues::format_double(r.miou) << " pixel_acc "
              << KeyValues::format_double(r.pixel_acc) << " over "
              << data.samples.size() << " samples\n";
    if (!o.out.empty()) {
        guard_output(fs::path(o.out) / "eval.csv", o.overwrite);
        fs::create_directories(o.out);
        write_text_file((fs::path(o.out) / "eval.csv").string(), r.csv());
    }
    return 0;
}

struct AuditOpts {
    std::string config, out;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    int batch = 4;
    bool overwrite = false;
};

int cmd_audit(const AuditOpts& o) {
    ConfigBundle bundle = resolve_config(o.config, o.sets);
    Model model(bundle.model, bundle.train.seed);
    const GradAuditReport rep = grad_audit(model, o.seed, o.batch);
    std::cout << rep.text();
    if (!o.out.empty()) {
        guard_output(fs::path(o.out) / "audit.txt", o.overwrite);
        fs::create_directories(o.out);
        write_text_file((fs::path(o.out) / "audit.txt").string(), rep.text());
    }
    return rep.sound ? 0 : 1;
}

struct GradCheckOpts {
    std::string config, out;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    int coords = 3;
    bool overwrite = false;
};

int cmd_gradcheck(const GradCheckOpts& o) {
    ConfigBundle bundle = resolve_config(o.config, o.sets);
    if (o.coords < 0) throw UsageError("--coords must be >= 0");
    const GradCheckSuite suite = gradcheck_model(bundle.model, o.seed, o.coords);
    std::cout << suite.text();
    if (!o.out.empty()) {
        guard_output(fs::path(o.out) / "gradcheck.txt", o.overwrite);
        fs::create_directories(o.out);
        write_text_file((fs::path(o.out) / "gradcheck.txt").string(), suite.text());
    }
    return suite.pass ? 0 : 1;
}

struct PretrainOpts {
    std::string data, out, config, seg_data, seg_eval;
    std::vector<std::string> sets;
    bool overwrite = false;
};

int cmd_pretrain(const PretrainOpts& o) {
    ConfigBundle bundle = resolve_config(o.config, o.sets);
    if (o.seg_data.empty() != o.seg_eval.empty()) {
        throw UsageError("--seg-data and --seg-eval must be given together");
    }
    const Dataset data = load_dataset(o.data);
    const fs::path out(o.out);
    guard_output(out / "manifest.txt", o.overwrite);
    fs::create_directories(out);
    std::vector<std::pair<std::string, std::string>> meta = {
        {"status", "running"},
        {"started", timestamp_utc()},
        {"data", o.data},
    };
    write_run_manifest(out / "manifest.txt", "pretrain", bundle.merged, meta);

    const PretrainResult res = pretrain_backbone(data, bundle.model, bundle.train,
                                                 (out / "checkpoint").string());
    std::cout << "classification accuracy "
              << KeyValues::format_double(res.accuracy) << " (chance "
              << KeyValues::format_double(1.0 / bundle.model.num_classes)
              << ")\ncheckpoint: " << res.checkpoint_dir << "\n";
    meta[0].second = "completed";
    meta.push_back({"finished", timestamp_utc()});
    meta.push_back({"checkpoint", res.checkpoint_dir});
    meta.push_back({"accuracy", KeyValues::format_double(res.accuracy)});

    if (!o.seg_data.empty()) {
        const Dataset seg_train = load_dataset(o.seg_data);
        const Dataset seg_eval = load_dataset(o.seg_eval);
        const PretrainCompare cmp = pretrain_compare(res.checkpoint_dir, seg_train,
                                                     seg_eval, bundle.train);
        std::cout << "fine-tune miou: pretrained "
                  << KeyValues::format_double(cmp.pretrained_miou) << " vs scratch "
                  << KeyValues::format_double(cmp.scratch_miou) << "\n";
        meta.push_back({"pretrained_miou",
                        KeyValues::format_double(cmp.pretrained_miou)});
        meta.push_back({"scratch_miou",
                        KeyValues::format_double(cmp.scratch_miou)});
    }
    write_run_manifest(out / "manifest.txt", "pretrain", bundle.merged, meta);
    return 0;
}

struct AblateOpts {
    std::string data, eval_data, out, config, seeds = "1,2,3,4,5";
    std::vector<std::string> sets;
    bool overwrite = false;
};

int cmd_ablate(const AblateOpts& o) {
    ConfigBundle bundle = resolve_config(o.config, o.sets);
    const std::vector<std::uint64_t> seeds = parse_seed_list(o.seeds);
    const Dataset train_data = load_dataset(o.data);
    const Dataset eval_data = load_dataset(o.eval_data);
    const fs::path out(o.out);
    guard_output(out / "ablation.csv", o.overwrite);
    fs::create_directories(out);

    const AblationReport rep =
        ablation_matrix(train_data, eval_data, bundle.train, seeds);
    write_text_file((out / "ablation.csv").string(), rep.csv());
    std::cout << rep.table() << "wrote " << (out / "ablation.csv").string() << "\n";
    return 0;
}

struct ProbeOpts {
    std::string data, eval_data, out, config;
    std::vector<std::string> sets;
    bool overwrite = false;
};

int cmd_probe(const ProbeOpts& o) {
    ConfigBundle bundle = resolve_config(o.config, o.sets);
    const Dataset train_data = load_dataset(o.data);
    const Dataset eval_data = load_dataset(o.eval_data);
    const fs::path out(o.out);
    guard_output(out / "probe.csv", o.overwrite);
    fs::create_directories(out);

    const ProbeReport rep = aux_probe_experiment(train_data, eval_data, bundle.train);
    write_text_file((out / "probe.csv").string(), rep.csv());
    std::cout << rep.csv();
    return 0;
}

struct PredictOpts {
    std::string checkpoint, input, out;
    bool token_csv = false;
    bool overwrite = false;
};

int cmd_predict(const PredictOpts& o) {
    Model model = load_checkpoint(o.checkpoint);
    std::vector<Tensor> images;
    if (fs::is_directory(o.input)) {
        const Dataset data = load_dataset(o.input);
        for (const auto& s : data.samples) images.push_back(s.image);
    } else {
        const HfgtRecord rec = load_hfgt(o.input);
        if (rec.dtype != HfgtDtype::f64 || rec.shape.size() != 3 ||
            rec.shape[0] != 3) {
            throw std::runtime_error("predict: input must be a float64 [3,H,W] "
                                     "image or a dataset directory");
        }
        images.push_back(Tensor::from_data(rec.shape, rec.f64));
    }

    const fs::path out(o.out);
    guard_output(out / "pred_00000.hfgt", o.overwrite);
    fs::create_directories(out);
    const auto palette = seg_palette(model.config().num_classes);
    NoGradGuard ng;
    for (size_t i = 0; i < images.size(); ++i) {
        const std::int64_t H = images[i].dim(1), W = images[i].dim(2);
        Tensor img = reshape(images[i], {1, 3, H, W});
        const ModelOutput outp = model.forward(img, nullptr, NormMode::eval);
        const std::vector<int> pred = argmax_classes(outp.student_logits);
        std::vector<std::uint16_t> map(pred.begin(), pred.end());
        char name[32];
        std::snprintf(name, sizeof name, "pred_%05zu", i);
        save_hfgt_u16((out / (std::string(name) + ".hfgt")).string(), {H, W}, map);
        std::vector<Rgb> pixels(map.size());
        for (size_t p = 0; p < map.size(); ++p) pixels[p] = palette[map[p]];
        write_ppm((out / (std::string(name) + ".ppm")).string(),
                  static_cast<int>(W), static_cast<int>(H), pixels);
    }
    if (o.token_csv) {
        const Tensor sim = token_similarity_matrix(model.tokens());
        const std::int64_t C = sim.dim(0);
        std::ostringstream os;
        for (std::int64_t r = 0; r < C; ++r) {
            for (std::int64_t c = 0; c < C; ++c) {
                if (c) os << ',';
                os << KeyValues::format_double(
                    sim.data()[static_cast<size_t>(r * C + c)]);
            }
            os << '\n';
        }
        write_text_file((out / "token_similarity.csv").string(), os.str());
    }
    std::cout << "wrote " << images.size() << " prediction(s) to " << out.string()
              << "\n";
    return 0;
}

void add_config_flags(CLI::App* sub, std::string& config,
                      std::vector<std::string>& sets) {
    sub->add_option("--config", config,
                    "key=value config file (a run manifest also works)");
    sub->add_option("--set", sets, "override one config key, e.g. --set lr0=0.02");
}

}  // namespace

int main(int argc, char** argv) {
    if (const char* threads = std::getenv("HFGD_THREADS")) {
        const std::string t(threads);
        if (!t.empty() && t != "0" && t != "1") {
            std::cerr << "note: HFGD_THREADS=" << t
                      << " requested; this build runs single-threaded\n";
        }
    }

    CLI::App app{"Stop-gradient guided two-branch segmentation toolkit"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);
    app.footer(keys_footer());

    GenDataOpts gen;
    CLI::App* gen_cmd = app.add_subcommand(
        "gen-data", "Generate a deterministic synthetic shape dataset");
    gen_cmd->add_option("--out", gen.out, "output directory")->required();
    gen_cmd->add_option("--n", gen.n, "number of samples")->required();
    gen_cmd->add_option("--seed", gen.seed, "base seed");
    gen_cmd->add_option("--spec", gen.spec_file, "scene spec key=value file");
    gen_cmd->add_flag("--overwrite", gen.overwrite, "replace existing outputs");

    TrainOpts train;
    CLI::App* train_cmd =
        app.add_subcommand("train", "Train the two-branch segmentation model");
    train_cmd->add_option("--data", train.data, "training dataset directory")
        ->required();
    train_cmd->add_option("--out", train.out, "run output directory")->required();
    train_cmd->add_option("--eval-data", train.eval_data,
                          "evaluation dataset directory");
    add_config_flags(train_cmd, train.config, train.sets);
    train_cmd->add_flag("--overwrite", train.overwrite, "replace existing outputs");

    EvalOpts eval;
    CLI::App* eval_cmd =
        app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint directory")
        ->required();
    eval_cmd->add_option("--data", eval.data, "dataset directory")->required();
    eval_cmd->add_option("--out", eval.out, "directory for eval.csv");
    eval_cmd->add_flag("--overwrite", eval.overwrite, "replace existing outputs");

    AuditOpts audit;
    CLI::App* audit_cmd = app.add_subcommand(
        "audit", "Grade per-loss gradients against the stop-gradient topology");
    add_config_flags(audit_cmd, audit.config, audit.sets);
    audit_cmd->add_option("--seed", audit.seed, "audit batch seed");
    audit_cmd->add_option("--batch", audit.batch, "audit batch size");
    audit_cmd->add_option("--out", audit.out, "directory for audit.txt");
    audit_cmd->add_flag("--overwrite", audit.overwrite, "replace existing outputs");

    GradCheckOpts gc;
    CLI::App* gc_cmd = app.add_subcommand(
        "gradcheck", "Finite-difference check of every loss term's gradients");
    add_config_flags(gc_cmd, gc.config, gc.sets);
    gc_cmd->add_option("--seed", gc.seed, "fixture seed");
    gc_cmd->add_option("--coords", gc.coords,
                       "max coordinates checked per parameter (0 = all)");
    gc_cmd->add_option("--out", gc.out, "directory for gradcheck.txt");
    gc_cmd->add_flag("--overwrite", gc.overwrite, "replace existing outputs");

    PretrainOpts pre;
    CLI::App* pre_cmd = app.add_subcommand(
        "pretrain", "Pretrain the backbone on dominant-shape classification");
    pre_cmd->add_option("--data", pre.data, "dataset directory")->required();
    pre_cmd->add_option("--out", pre.out, "run output directory")->required();
    pre_cmd->add_option("--seg-data", pre.seg_data,
                        "segmentation training set for the scratch comparison");
    pre_cmd->add_option("--seg-eval", pre.seg_eval,
                        "segmentation eval set for the scratch comparison");
    add_config_flags(pre_cmd, pre.config, pre.sets);
    pre_cmd->add_flag("--overwrite", pre.overwrite, "replace existing outputs");

    AblateOpts ablate;
    CLI::App* ablate_cmd = app.add_subcommand(
        "ablate", "Run the ten-variant decoder comparison grid");
    ablate_cmd->add_option("--data", ablate.data, "training dataset directory")
        ->required();
    ablate_cmd->add_option("--eval-data", ablate.eval_data,
                           "evaluation dataset directory")
        ->required();
    ablate_cmd->add_option("--out", ablate.out, "output directory")->required();
    ablate_cmd->add_option("--seeds", ablate.seeds,
                           "comma-separated seeds (one run per row per seed)");
    add_config_flags(ablate_cmd, ablate.config, ablate.sets);
    ablate_cmd->add_flag("--overwrite", ablate.overwrite,
                         "replace existing outputs");

    ProbeOpts probe;
    CLI::App* probe_cmd = app.add_subcommand(
        "probe", "Auxiliary-head probe: what decoder supervision does to the "
                 "encoder");
    probe_cmd->add_option("--data", probe.data, "training dataset directory")
        ->required();
    probe_cmd->add_option("--eval-data", probe.eval_data,
                          "evaluation dataset directory")
        ->required();
    probe_cmd->add_option("--out", probe.out, "output directory")->required();
    add_config_flags(probe_cmd, probe.config, probe.sets);
    probe_cmd->add_flag("--overwrite", probe.overwrite, "replace existing outputs");

    PredictOpts pred;
    CLI::App* pred_cmd = app.add_subcommand(
        "predict", "Export predicted label maps (HFGT u16 + PPM renders)");
    pred_cmd->add_option("--checkpoint", pred.checkpoint, "checkpoint directory")
        ->required();
    pred_cmd->add_option("--input", pred.input,
                         "dataset directory or one float64 [3,H,W] HFGT image")
        ->required();
    pred_cmd->add_option("--out", pred.out, "output directory")->required();
    pred_cmd->add_flag("--token-csv", pred.token_csv,
                       "also export the class-token cosine similarity matrix");
    pred_cmd->add_flag("--overwrite", pred.overwrite, "replace existing outputs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen_cmd->parsed()) return cmd_gen_data(gen);
        if (train_cmd->parsed()) return cmd_train(train);
        if (eval_cmd->parsed()) return cmd_eval(eval);
        if (audit_cmd->parsed()) return cmd_audit(audit);
        if (gc_cmd->parsed()) return cmd_gradcheck(gc);
        if (pre_cmd->parsed()) return cmd_pretrain(pre);
        if (ablate_cmd->parsed()) return cmd_ablate(ablate);
        if (probe_cmd->parsed()) return cmd_probe(probe);
        if (pred_cmd->parsed()) return cmd_predict(pred);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "no subcommand given\n";
    return 2;
}
