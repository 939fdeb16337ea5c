#include "ftn/experiments/analysis.hpp"
#include "ftn/experiments/approx.hpp"
#include "ftn/experiments/classify.hpp"
#include "ftn/experiments/config.hpp"
#include "ftn/experiments/gradcheck_suite.hpp"
#include "ftn/experiments/report.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

using namespace ftn;
using namespace ftn::exp;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("ftn_exp_" + std::to_string(::getpid()) + "_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
    std::ifstream f(p);
    std::vector<std::string> out;
    for (std::string l; std::getline(f, l);) out.push_back(l);
    return out;
}

json tiny_approx(const fs::path& out, const std::string& target = "max") {
    return resolve_config("approx", json(),
                          {"approx.target=" + target, "approx.lengths=[4]", "approx.batches_per_epoch=100",
                           "approx.validation_batches=20", "approx.test_batches=20", "approx.max_epochs=3",
                           "output_dir=" + out.string()});
}

/// CIFAR-10-format train/test files of random images: label = brightest
/// channel, so the task is learnable.
fs::path write_fake_cifar(const fs::path& root, std::size_t per_batch, std::size_t test_n) {
    fs::create_directories(root);
    Rng rng(77);
    auto make = [&](std::size_t n) {
        std::vector<data::CifarRecord> recs(n);
        for (auto& r : recs) {
            r.label = static_cast<int>(rng.below(3));
            for (std::size_t i = 0; i < data::kCifarPixels; ++i) {
                const bool bright = i / 1024 == static_cast<std::size_t>(r.label);
                r.pixels[i] = static_cast<std::uint8_t>(rng.below(128) + (bright ? 120 : 0));
            }
        }
        return data::serialize_cifar_records(recs, data::CifarVariant::cifar10);
    };
    for (int k = 1; k <= 5; ++k) data::write_binary(root / ("data_batch_" + std::to_string(k) + ".bin"), make(per_batch));
    data::write_binary(root / "test_batch.bin", make(test_n));
    return root;
}

json tiny_classify(const fs::path& data, const fs::path& out, const std::string& pool) {
    return resolve_config("classify", json(),
                          {"classify.data_root=" + data.string(), "classify.train_subset=40", "classify.test_subset=20",
                           "classify.iterations=6", "classify.batch_size=10", "classify.eval_every=3",
                           "network.width=2", "network.pool=" + pool,
                           "optimizer.schedule={\"kind\":\"step\",\"milestones\":[4],\"factor\":0.1}",
                           "output_dir=" + out.string()});
}

} // namespace

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, DefaultsExistForEveryKind) {
    for (const auto& kind : experiment_kinds()) {
        const auto c = default_config(kind);
        EXPECT_EQ(c.at("experiment"), kind);
        EXPECT_TRUE(c.contains("seed"));
        EXPECT_TRUE(c.contains("output_dir"));
    }
    EXPECT_THROW(default_config("train"), ConfigError);
    const auto a = default_config("approx");
    EXPECT_EQ(a["optimizer"]["lr"], 0.1);
    EXPECT_EQ(a["optimizer"]["momentum"], 0.9);
    EXPECT_EQ(a["approx"]["batch_size"], 128);
    EXPECT_EQ(a["optimizer"]["schedule"]["kind"], "plateau");
    const auto c = default_config("classify");
    EXPECT_EQ(c["optimizer"]["lr"], 0.01);
    EXPECT_EQ(c["classify"]["batch_size"], 100);
    EXPECT_EQ(c["classify"]["train_subset"], 5000);
    EXPECT_EQ(c["classify"]["test_subset"], 1000);
    EXPECT_EQ(c["classify"]["iterations"], 15000);
}

TEST(Config, DocumentMergesDeeplyAndOverridesApplyLast) {
    const json doc = json::parse(R"({"approx": {"lengths": [9]}, "optimizer": {"lr": 0.05}})");
    const auto c = resolve_config("approx", doc, {"optimizer.lr=0.2", "approx.target=avg", "seed=7"});
    EXPECT_EQ(c["approx"]["lengths"], json::array({9}));
    EXPECT_EQ(c["approx"]["batch_size"], 128); // untouched default survives
    EXPECT_EQ(c["optimizer"]["lr"], 0.2);
    EXPECT_EQ(c["optimizer"]["momentum"], 0.9);
    EXPECT_EQ(c["approx"]["target"], "avg"); // bare word taken as a string
    EXPECT_EQ(c["seed"], 7);
}

TEST(Config, UnknownKeysAndMalformedOverridesAreRejected) {
    EXPECT_THROW(resolve_config("approx", json::parse(R"({"aprox": {}})"), {}), ConfigError);
    EXPECT_THROW(resolve_config("approx", json::parse(R"({"approx": {"lenghts": [4]}})"), {}), ConfigError);
    EXPECT_THROW(resolve_config("approx", json(), {"approx.nope=1"}), ConfigError);
    EXPECT_THROW(resolve_config("approx", json(), {"approx.lengths"}), ConfigError);
    EXPECT_THROW(resolve_config("approx", json(), {"=3"}), ConfigError);
    EXPECT_THROW(resolve_config("approx", json::parse(R"({"experiment": "classify"})"), {}), ConfigError);
    try {
        resolve_config("classify", json::parse(R"({"network": {"pool": "lstm", "sharin": "x"}})"), {});
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("network.sharin"), std::string::npos) << e.what();
    }
}

TEST(Config, FreeFormSectionsAcceptAnyShape) {
    const auto c = resolve_config("classify", json::parse(R"({"optimizer": {"schedule": {"kind": "constant"}}})"), {});
    EXPECT_EQ(c["optimizer"]["schedule"], json::parse(R"({"kind": "constant"})"));
    EXPECT_TRUE(std::holds_alternative<ConstantSchedule>(schedule_from_json(c["optimizer"]["schedule"])));
    const auto p = resolve_config("analyze_response", json(), {"analysis.params=[1,2,3]"});
    EXPECT_EQ(p["analysis"]["params"].size(), 3u);
}

TEST(Config, TypedAccessNamesThePath) {
    const auto c = resolve_config("approx", json(), {"approx.batch_size=\"big\""});
    try {
        get<std::size_t>(c, "approx.batch_size");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("approx.batch_size"), std::string::npos);
    }
    EXPECT_THROW(get<int>(c, "approx.missing"), ConfigError);
}

TEST(Config, SchedulesAndClip) {
    const auto step = schedule_from_json(json::parse(R"({"kind": "step", "milestones": [10, 20], "factor": 0.5})"));
    ASSERT_TRUE(std::holds_alternative<StepSchedule>(step));
    EXPECT_EQ(std::get<StepSchedule>(step).milestones, (std::vector<std::int64_t>{10, 20}));
    const auto plateau = schedule_from_json(json::parse(R"({"kind": "plateau", "patience": 2})"));
    ASSERT_TRUE(std::holds_alternative<PlateauSchedule>(plateau));
    EXPECT_EQ(std::get<PlateauSchedule>(plateau).patience, 2);
    EXPECT_THROW(schedule_from_json(json::parse(R"({"kind": "cosine"})")), ConfigError);
    EXPECT_THROW(schedule_from_json(json::parse(R"({"kind": "step"})")), ConfigError);

    auto c = default_config("approx");
    EXPECT_EQ(clip_from_json(c), 1.0);
    c["optimizer"]["clip_norm"] = nullptr;
    EXPECT_EQ(clip_from_json(c), std::nullopt);
    c["optimizer"]["clip_norm"] = -1;
    EXPECT_THROW(clip_from_json(c), ConfigError);
}

TEST(Config, NetworkFromPresetOrInlineSpec) {
    auto c = default_config("classify");
    const auto conv8 = network_from_config(c, 10);
    EXPECT_EQ(conv8.layers.size(), conv_n_preset(8, PoolKind::lstm).layers.size());
    c["network"]["spec"] = to_json(conv_n_preset(2, PoolKind::max));
    EXPECT_EQ(to_json(network_from_config(c, 10)), to_json(conv_n_preset(2, PoolKind::max)));
    c["network"]["spec"] = nullptr;
    c["network"]["preset"] = "resnet";
    EXPECT_THROW(network_from_config(c, 10), ConfigError);
}

TEST(Config, DataRootEnvironmentOverridesConfig) {
    ::unsetenv(kDataRootEnv);
    EXPECT_EQ(data_root("/a"), fs::path("/a"));
    EXPECT_THROW(data_root(""), IoError);
    ::setenv(kDataRootEnv, "/from/env", 1);
    EXPECT_EQ(data_root("/a"), fs::path("/from/env"));
    ::unsetenv(kDataRootEnv);
}

// ---------------------------------------------------------------------------
// Reports

TEST(Report, RealsUseNineSignificantDigits) {
    EXPECT_EQ(format_real(0.1), "0.1");
    EXPECT_EQ(format_real(1.0 / 3.0), "0.333333333");
    EXPECT_EQ(format_real(2.0 / 3.0 * 1e-7), "6.66666667e-08");
    EXPECT_EQ(format_real(123456789.25), "123456789");
    EXPECT_EQ(format_real(1234567891.0), "1.23456789e+09");
    EXPECT_EQ(format_real(-0.5), "-0.5");
    EXPECT_EQ(format_real(std::nan("")), "nan");
    EXPECT_EQ(format_real(-INFINITY), "-inf");
    // 9 digits round-trip a float exactly
    const float f = 0.1234567f;
    EXPECT_EQ(std::stof(format_real(f)), f);
}

TEST(Report, CsvWriterChecksArity) {
    const auto dir = temp_dir("csv");
    fs::create_directories(dir);
    {
        CsvWriter w(dir / "x.csv", {"a", "b", "c"});
        w.row({std::int64_t{1}, 0.25, std::string("T1")});
        EXPECT_THROW(w.row({std::int64_t{1}}), Error);
    }
    EXPECT_EQ(slurp(dir / "x.csv"), "a,b,c\n1,0.25,T1\n");
    EXPECT_THROW(CsvWriter(dir / "missing" / "x.csv", {"a"}), IoError);
    fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Location histogram

TEST(Locations, SingleChannelCountsOneEverywhere) {
    Rng rng(1);
    Tensor<float> feat(Shape{2, 1, 8, 8});
    for (auto& v : feat.data()) v = static_cast<float>(rng.uniform(-1, 1));
    const auto counts = location_counts(feat, 4, 4, all_regions(2, 2, 2));
    ASSERT_EQ(counts.size(), 8u);
    for (auto c : counts) EXPECT_EQ(c, 1u);
}

TEST(Locations, ConstantRegionCountsOneByFirstIndexTies) {
    Tensor<float> feat(Shape{1, 5, 4, 4}, 0.5f);
    EXPECT_EQ(location_counts(feat, 4, 4, all_regions(1, 1, 1)), std::vector<std::size_t>{1});
}

TEST(Locations, DistinctArgmaxPerChannel) {
    // channel c peaks at position c of the 4x4 region
    Tensor<float> feat(Shape{1, 6, 4, 4}, 0.0f);
    for (std::size_t c = 0; c < 6; ++c) feat[c * 16 + c] = 1.0f;
    EXPECT_EQ(location_counts(feat, 4, 4, all_regions(1, 1, 1)), std::vector<std::size_t>{6});
    // two channels sharing a peak count once
    feat[1 * 16 + 1] = 0.0f;
    feat[1 * 16 + 0] = 1.0f;
    EXPECT_EQ(location_counts(feat, 4, 4, all_regions(1, 1, 1)), std::vector<std::size_t>{5});
}

TEST(Locations, CountNeverExceedsChannelsOrRegionSize) {
    Rng rng(2);
    for (std::size_t channels : {1u, 3u, 8u, 40u}) {
        Tensor<float> feat(Shape{3, channels, 8, 8});
        for (auto& v : feat.data()) v = static_cast<float>(rng.uniform(-1, 1));
        for (auto c : location_counts(feat, 4, 4, all_regions(3, 2, 2))) {
            EXPECT_GE(c, 1u);
            EXPECT_LE(c, std::min<std::size_t>(channels, 16));
        }
    }
}

TEST(Locations, HistogramAndMedian) {
    const std::vector<std::size_t> counts{1, 2, 2, 3, 16};
    const auto h = count_histogram(counts, 4);
    ASSERT_EQ(h.size(), 16u);
    EXPECT_EQ(h[0], 1u);
    EXPECT_EQ(h[1], 2u);
    EXPECT_EQ(h[2], 1u);
    EXPECT_EQ(h[15], 1u);
    EXPECT_EQ(median(counts), 2.0);
    EXPECT_EQ(median({1, 2, 3, 4}), 2.5);
    EXPECT_THROW(count_histogram({17}, 4), Error);
}

TEST(Locations, RequiresMaxPoolLayer) {
    EXPECT_THROW(resolve_max_pool_layer(conv_n_preset(2, PoolKind::lstm), -1), ConfigError);
    EXPECT_THROW(resolve_max_pool_layer(conv_n_preset(2, PoolKind::max), 0), ConfigError);
    EXPECT_EQ(resolve_max_pool_layer(conv_n_preset(2, PoolKind::max), -1), 6u);
    EXPECT_EQ(resolve_max_pool_layer(conv_n_preset(2, PoolKind::max), 13), 13u);
}

// ---------------------------------------------------------------------------
// Response curves

TEST(Response, MaxColumnConstantAndAvgSorted) {
    Rng rng(3);
    LstmPoolParams<double> unit;
    unit.v = {0.1, 0.1, 0.1, 0.1, 0.1, 1.0, 0.1, 0.1, 0.1, 0.5, 0.1, 0.0};
    const auto rows = response_curve(unit, Modulation::relu(), 3, 500, 1.5, rng);
    ASSERT_EQ(rows.size(), 500u);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].max, 1.5);
        EXPECT_GE(rows[i].avg, 1.5 / 9);
        EXPECT_LE(rows[i].avg, 1.5);
        if (i) {
            EXPECT_LE(rows[i - 1].avg, rows[i].avg);
        }
    }
}

TEST(Response, SaturatedSummingUnitTracksAverage) {
    // Gates pinned open and g = x / L: the cell sums to the average and the
    // output is sigmoid(30) * relu(avg).
    LstmPoolParams<double> unit;
    unit.v = {0, 0, 30, 0, 0, 30, 0, 0, 30, 0.25, 0, 0};
    Rng rng(4);
    const auto rows = response_curve(unit, Modulation::relu(), 2, 1000, 1.5, rng);
    std::vector<double> avg, lstm;
    for (const auto& r : rows) {
        avg.push_back(r.avg);
        lstm.push_back(r.lstm);
        EXPECT_NEAR(r.lstm, r.avg, 1e-9);
    }
    EXPECT_GT(correlation(lstm, avg), 0.999999);
}

TEST(Response, CorrelationEdgeCases) {
    EXPECT_NEAR(correlation({1, 2, 3}, {2, 4, 6}), 1.0, 1e-15);
    EXPECT_NEAR(correlation({1, 2, 3}, {3, 2, 1}), -1.0, 1e-15);
    EXPECT_EQ(correlation({1, 1, 1}, {1, 2, 3}), 0.0);
}

TEST(Response, ExplicitParamsWriteSortedFile) {
    const auto dir = temp_dir("response");
    const auto cfg = resolve_config("analyze_response", json(),
                                    {"analysis.params=[0,0,30,0,0,30,0,0,30,0.25,0,0]", "analysis.n=200",
                                     "output_dir=" + dir.string()});
    const auto layers = run_analyze_response(cfg, dir);
    ASSERT_EQ(layers.size(), 1u);
    EXPECT_GT(layers[0].corr_avg, 0.999);
    const auto rows = lines(dir / "response_params.csv");
    ASSERT_EQ(rows.size(), 201u);
    EXPECT_EQ(rows[0], "avg,max,lstm");
    for (const auto* f : {"resolved_config.json", "metrics.csv", "summary.json"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
    EXPECT_THROW(run_analyze_response(resolve_config("analyze_response", json(), {"analysis.params=[1,2]"}), dir),
                 ConfigError);
    EXPECT_THROW(run_analyze_response(resolve_config("analyze_response", json(), {}), dir), ConfigError);
    fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Approximation runner

TEST(Approx, WritesReportAndImprovesOnUntrainedUnit) {
    const auto dir = temp_dir("approx");
    const auto rep = run_approx(tiny_approx(dir), dir);
    ASSERT_EQ(rep.lengths.size(), 1u);
    const auto& r = rep.lengths[0];
    for (std::size_t g = 0; g < 3; ++g) {
        EXPECT_GT(r.untrained_mae[g], 10.0); // random init is far from max pooling
        EXPECT_LT(r.mae[g], r.untrained_mae[g]);
    }
    EXPECT_GE(r.params[w_g], 1e-6); // constraints hold on the kept unit
    EXPECT_GE(r.params[b_g], 0.0);
    for (const auto* f : {"resolved_config.json", "metrics.csv", "timing.csv", "summary.json", "approx_mae.csv", "approx_L4.ckpt"}) {
        EXPECT_TRUE(fs::exists(dir / f)) << f;
    }
    const auto table = lines(dir / "approx_mae.csv");
    ASSERT_EQ(table.size(), 4u);
    EXPECT_EQ(table[0], "target,length,regime,untrained_mae,mae");
    const auto metrics = lines(dir / "metrics.csv");
    EXPECT_EQ(metrics[0], "length,restart,iteration,epoch,train_loss,validation_mae,lr");
    EXPECT_EQ(metrics.size(), 1 + r.epochs);

    // The checkpoint holds the kept unit (stored as float32).
    auto model = load_checkpoint<double>((dir / "approx_L4.ckpt").string());
    for (std::size_t p = 0; p < kLstmParamCount; ++p) EXPECT_EQ(model.pool_unit(0)[p], static_cast<double>(static_cast<float>(r.params[p])));
    const auto summary = json::parse(slurp(dir / "summary.json"));
    EXPECT_EQ(summary["build_id"], build_id());
    EXPECT_FALSE(summary["build_id"].get<std::string>().empty());
    fs::remove_all(dir);
}

TEST(Approx, IdenticalConfigGivesByteIdenticalCsv) {
    const auto a = temp_dir("approx_a"), b = temp_dir("approx_b");
    auto cfg = tiny_approx(a, "avg");
    cfg["approx"]["restarts"] = 2;
    run_approx(cfg, a);
    run_approx(cfg, b);
    EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
    EXPECT_EQ(slurp(a / "approx_mae.csv"), slurp(b / "approx_mae.csv"));
    EXPECT_EQ(slurp(a / "approx_L4.ckpt"), slurp(b / "approx_L4.ckpt"));
    cfg["seed"] = 2;
    const auto c = temp_dir("approx_c");
    run_approx(cfg, c);
    EXPECT_NE(slurp(a / "metrics.csv"), slurp(c / "metrics.csv"));
    for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST(Approx, RestartsAreRecordedAndBestValidationKept) {
    const auto dir = temp_dir("approx_restart");
    auto cfg = tiny_approx(dir);
    cfg["approx"]["restarts"] = 3;
    cfg["approx"]["max_epochs"] = 1;
    const auto rep = run_approx(cfg, dir);
    const auto metrics = lines(dir / "metrics.csv");
    ASSERT_EQ(metrics.size(), 4u);
    double best = 1e300;
    std::size_t best_restart = 0;
    for (std::size_t r = 0; r < 3; ++r) {
        std::stringstream ss(metrics[1 + r]);
        std::vector<std::string> cells;
        for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
        EXPECT_EQ(cells[1], std::to_string(r));
        const double val = std::stod(cells[5]);
        if (val < best) {
            best = val;
            best_restart = r;
        }
    }
    EXPECT_EQ(rep.lengths[0].restart, best_restart);
    fs::remove_all(dir);
}

TEST(Approx, PlateauValidationNonIncreasingAcrossDrops) {
    // Kept validation MAE only improves; every lr drop follows a round that
    // failed to improve on the best so far.
    const auto dir = temp_dir("approx_plateau");
    auto cfg = tiny_approx(dir);
    cfg["approx"]["max_epochs"] = 8;
    run_approx(cfg, dir);
    const auto metrics = lines(dir / "metrics.csv");
    double best = 1e300, prev_lr = 0.1;
    for (std::size_t i = 1; i < metrics.size(); ++i) {
        std::stringstream ss(metrics[i]);
        std::vector<std::string> cells;
        for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
        const double val = std::stod(cells[5]), lr = std::stod(cells[6]);
        EXPECT_LE(lr, prev_lr);
        prev_lr = lr;
        best = std::min(best, val);
    }
    fs::remove_all(dir);
}

TEST(Approx, DivergenceWritesSnapshotAndThrowsNumeric) {
    const auto dir = temp_dir("approx_nan");
    auto cfg = tiny_approx(dir);
    cfg["optimizer"]["lr"] = 1e308;
    cfg["optimizer"]["clip_norm"] = nullptr;
    EXPECT_THROW(run_approx(cfg, dir), NumericError);
    ASSERT_TRUE(fs::exists(dir / "divergence_L4.json"));
    const auto snap = json::parse(slurp(dir / "divergence_L4.json"));
    EXPECT_EQ(snap["params"].size(), kLstmParamCount);
    EXPECT_TRUE(snap["params"].contains("w_g"));
    fs::remove_all(dir);
}

TEST(Approx, RejectsBadConfig) {
    const auto dir = temp_dir("approx_bad");
    auto cfg = tiny_approx(dir);
    cfg["approx"]["lengths"] = {5};
    EXPECT_THROW(run_approx(cfg, dir), ConfigError);
    cfg = tiny_approx(dir);
    cfg["approx"]["target"] = "median";
    EXPECT_THROW(run_approx(cfg, dir), ConfigError);
    cfg = tiny_approx(dir);
    cfg["approx"]["restarts"] = 0;
    EXPECT_THROW(run_approx(cfg, dir), ConfigError);
    fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Classification and the location analysis on its checkpoint

TEST(Classify, TinyRunIsDeterministicAndAnalysable) {
    const auto data = write_fake_cifar(temp_dir("cifar"), 8, 20);
    ::unsetenv(kDataRootEnv);
    const auto a = temp_dir("cls_a"), b = temp_dir("cls_b");
    const auto rep = run_classify(tiny_classify(data, a, "max"), a);
    run_classify(tiny_classify(data, b, "max"), b);
    EXPECT_EQ(rep.iterations, 6);
    EXPECT_GE(rep.test_error, 0.0);
    EXPECT_LE(rep.test_error, 1.0);
    EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
    const auto metrics = lines(a / "metrics.csv");
    ASSERT_EQ(metrics.size(), 3u);
    EXPECT_EQ(metrics[0], "iteration,epoch,train_loss,test_error,lr");
    EXPECT_EQ(metrics[1].substr(0, 4), "3,0,");
    EXPECT_EQ(metrics[2].substr(0, 4), "6,1,");
    EXPECT_EQ(metrics[2].substr(metrics[2].rfind(',') + 1), "0.001"); // after the milestone at 4
    for (const auto* f : {"resolved_config.json", "timing.csv", "summary.json", "model.ckpt"}) EXPECT_TRUE(fs::exists(a / f)) << f;

    // Location histogram of the trained max-pool network's first layer.
    const auto loc = temp_dir("loc");
    const auto lcfg = resolve_config("analyze_locations", json(),
                                     {"analysis.checkpoint=" + (a / "model.ckpt").string(), "analysis.n_patches=100",
                                      "analysis.images=synthetic", "output_dir=" + loc.string()});
    const auto lrep = run_analyze_locations(lcfg, loc);
    EXPECT_EQ(lrep.layer, 6u);
    EXPECT_EQ(lrep.regions, 100u);
    EXPECT_LE(lrep.max, 2u); // width-2 network: at most two channels vote
    const auto hist = lines(loc / "locations.csv");
    ASSERT_EQ(hist.size(), 17u);
    EXPECT_EQ(hist[0], "count,regions");

    // An lstm-pooling checkpoint has no max pooling layer to analyse.
    const auto l = temp_dir("cls_lstm");
    run_classify(tiny_classify(data, l, "lstm"), l);
    auto bad = lcfg;
    bad["analysis"]["checkpoint"] = (l / "model.ckpt").string();
    EXPECT_THROW(run_analyze_locations(bad, loc), ConfigError);

    // Probing the lstm network's units gives one response file per layer.
    const auto resp = temp_dir("resp");
    const auto layers = run_analyze_response(
        resolve_config("analyze_response", json(),
                       {"analysis.checkpoint=" + (l / "model.ckpt").string(), "analysis.n=50", "output_dir=" + resp.string()}),
        resp);
    ASSERT_EQ(layers.size(), 2u);
    EXPECT_TRUE(fs::exists(resp / "response_layer6.csv"));
    EXPECT_TRUE(fs::exists(resp / "response_layer13.csv"));
    EXPECT_EQ(layers[1].k, 8u);
    for (const auto& d : {data, a, b, loc, l, resp}) fs::remove_all(d);
}

TEST(Classify, WhiteningCacheIsReused) {
    const auto data = write_fake_cifar(temp_dir("cifar_cache"), 8, 20);
    const auto a = temp_dir("cls_cache_a"), b = temp_dir("cls_cache_b");
    const auto cache = temp_dir("zca.bin");
    auto cfg = tiny_classify(data, a, "avg");
    cfg["classify"]["whitening_cache"] = cache.string();
    run_classify(cfg, a);
    ASSERT_TRUE(fs::exists(cache));
    const auto stamp = fs::last_write_time(cache);
    run_classify(cfg, b);
    EXPECT_EQ(fs::last_write_time(cache), stamp);
    EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
    for (const auto& d : {data, a, b, cache}) fs::remove_all(d);
}

TEST(Classify, MissingDatasetIsAnIoError) {
    const auto dir = temp_dir("cls_missing");
    EXPECT_THROW(run_classify(tiny_classify(temp_dir("nowhere"), dir, "max"), dir), IoError);
}

// ---------------------------------------------------------------------------
// Gradient checks

TEST(GradCheckSuite, AllCasesPass) {
    for (const auto& c : run_gradcheck_suite(5)) {
        EXPECT_TRUE(c.passed()) << c.name << " max rel error " << c.max_rel_error;
        EXPECT_GT(c.points, 0u);
    }
}
