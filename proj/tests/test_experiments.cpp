#include <doctest.h>

#include <set>
#include <string>
#include <vector>

#include "hfgd/checkpoint.hpp"
#include "hfgd/data.hpp"
#include "hfgd/experiments.hpp"
#include "hfgd/rng.hpp"

using namespace hfgd;

namespace {

Dataset micro_dataset(int n, std::uint64_t seed, int num_classes = 3) {
    SceneSpec spec;
    spec.image_size = 32;
    spec.num_classes = num_classes;
    Dataset d;
    d.spec = spec;
    for (int i = 0; i < n; ++i) {
        d.samples.push_back(
            generate_sample(mix_seed(seed, static_cast<std::uint64_t>(i)), spec));
    }
    return d;
}

TrainConfig micro_train_cfg(int iters) {
    TrainConfig t;
    t.batch_size = 4;
    t.total_iters = iters;
    t.seed = 5;
    return t;
}

}  // namespace

TEST_SUITE("experiments") {

TEST_CASE("the ablation grid enumerates ten serializable variants") {
    auto rows = ablation_rows(6);
    REQUIRE(rows.size() == 10);
    std::set<std::string> names;
    int usfpn_rows = 0, cae_rows = 0, os2_rows = 0;
    for (const auto& [name, cfg] : rows) {
        names.insert(name);
        CHECK_NOTHROW(cfg.validate());
        ModelConfig back = ModelConfig::from_kv(cfg.to_kv());
        CHECK(back.to_kv().serialize() == cfg.to_kv().serialize());
        if (cfg.upsampler == Upsampler::usfpn) ++usfpn_rows;
        if (cfg.cae_enabled) ++cae_rows;
        if (cfg.target_os == 2) ++os2_rows;
    }
    CHECK(names.size() == 10);  // unique row names
    CHECK(usfpn_rows == 2);
    CHECK(cae_rows == 6);  // four SFPN CAE rows + both U-SFPN rows
    CHECK(os2_rows == 1);
}

TEST_CASE("ablation matrix reports every row across shared seeds") {
    Dataset train_data = micro_dataset(8, 71);
    Dataset eval_data = micro_dataset(4, 72);
    AblationReport rep =
        ablation_matrix(train_data, eval_data, micro_train_cfg(2), {1, 2});

    REQUIRE(rep.rows.size() == 10);
    CHECK(rep.seeds == std::vector<std::uint64_t>{1, 2});
    for (const auto& row : rep.rows) {
        REQUIRE(row.mious.size() == 2);
        REQUIRE(row.pixel_accs.size() == 2);
        for (double m : row.mious) {
            CHECK(m >= 0.0);
            CHECK(m <= 1.0);
        }
        CHECK(row.median_miou == median(row.mious));
    }
    CHECK(rep.median_of("sfpn_identity") == rep.rows[0].median_miou);
    CHECK_THROWS(rep.median_of("nope"));

    // long-form csv: header + 10 rows x (2 seeds + 1 median line) + metadata
    const std::string csv = rep.csv();
    CHECK(csv.rfind("row,seed,miou,pixel_acc\n", 0) == 0);
    size_t lines = 0;
    for (char c : csv)
        if (c == '\n') ++lines;
    CHECK(lines == 1 + 10 * 3 + 1);
    CHECK(csv.find("reference_gains") != std::string::npos);
    CHECK(csv.find("usfpn_cae_hfgm_os2,median,") != std::string::npos);

    // table: one line per row, name + per-seed mIoU + median
    const std::string table = rep.table();
    lines = 0;
    for (char c : table)
        if (c == '\n') ++lines;
    CHECK(lines == 10);
    const std::string first = table.substr(0, table.find('\n'));
    size_t cols = 0;
    for (char c : first)
        if (c == ' ') ++cols;
    CHECK(cols == 3);  // seeds + median after the name
}

TEST_CASE("ablation matrix requires seeds") {
    Dataset d = micro_dataset(4, 73);
    CHECK_THROWS(ablation_matrix(d, d, micro_train_cfg(1), {}));
}

TEST_CASE("auxiliary probe emits three runs with both mIoU figures") {
    Dataset train_data = micro_dataset(8, 81);
    Dataset eval_data = micro_dataset(4, 82);
    ProbeReport rep =
        aux_probe_experiment(train_data, eval_data, micro_train_cfg(3));

    REQUIRE(rep.runs.size() == 3);
    CHECK(rep.runs[0].name == "fcn_only");
    CHECK(rep.runs[1].name == "sfpn_aux_joint");
    CHECK(rep.runs[2].name == "sfpn_aux_stopgrad");
    for (const auto& r : rep.runs) {
        CHECK(r.aux_miou >= 0.0);
        CHECK(r.aux_miou <= 1.0);
        CHECK(r.main_miou >= 0.0);
        CHECK(r.main_miou <= 1.0);
    }
    // the FCN-only run's sole head is its main head
    CHECK(rep.runs[0].aux_miou == rep.runs[0].main_miou);

    const std::string csv = rep.csv();
    CHECK(csv.rfind("run,aux_miou,main_miou\n", 0) == 0);
    CHECK(csv.find("reference_aux_miou") != std::string::npos);
    CHECK(csv.find("45.87") != std::string::npos);

    // determinism: same config reproduces the same report
    ProbeReport again =
        aux_probe_experiment(train_data, eval_data, micro_train_cfg(3));
    CHECK(again.csv() == csv);
}

TEST_CASE("pretraining touches only the backbone and survives reload") {
    Dataset data = micro_dataset(8, 91);
    ModelConfig mcfg;
    mcfg.num_classes = 3;
    mcfg.width_mult = 1.0 / 64.0;
    mcfg.backbone_stage_channels = {4, 4, 4, 4};
    TrainConfig cfg = micro_train_cfg(4);

    PretrainResult res = pretrain_backbone(data, mcfg, cfg, "ckpt_pretrain_test");
    CHECK(res.accuracy >= 0.0);
    CHECK(res.accuracy <= 1.0);
    CHECK(res.checkpoint_dir == "ckpt_pretrain_test");

    // reload must find the exact parameter set (missing/extra names throw)
    Model reloaded = load_checkpoint("ckpt_pretrain_test");
    Model scratch(mcfg, cfg.seed);
    bool backbone_moved = false;
    for (const auto& p : reloaded.parameters()) {
        const Tensor* init = nullptr;
        for (const auto& q : scratch.parameters())
            if (q.name == p.name) init = &q.tensor;
        REQUIRE(init != nullptr);
        if (p.name.rfind("backbone.", 0) == 0) {
            if (p.tensor.data() != init->data()) backbone_moved = true;
        } else {
            // heads were never trained: bit-identical to the seed init
            CHECK_MESSAGE(p.tensor.data() == init->data(), p.name);
        }
    }
    CHECK(backbone_moved);
}

TEST_CASE("pretrain comparison fine-tunes both initializations identically") {
    Dataset train_data = micro_dataset(8, 95);
    Dataset eval_data = micro_dataset(4, 96);
    ModelConfig mcfg;
    mcfg.num_classes = 3;
    mcfg.width_mult = 1.0 / 64.0;
    mcfg.backbone_stage_channels = {4, 4, 4, 4};
    TrainConfig cfg = micro_train_cfg(3);

    pretrain_backbone(train_data, mcfg, cfg, "ckpt_pretrain_cmp");
    PretrainCompare cmp =
        pretrain_compare("ckpt_pretrain_cmp", train_data, eval_data, cfg);
    CHECK(cmp.scratch_miou >= 0.0);
    CHECK(cmp.scratch_miou <= 1.0);
    CHECK(cmp.pretrained_miou >= 0.0);
    CHECK(cmp.pretrained_miou <= 1.0);
}

}  // TEST_SUITE("experiments")
