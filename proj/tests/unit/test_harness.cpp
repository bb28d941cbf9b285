#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "selfcal/harness.hpp"

using namespace selfcal;
using namespace selfcal::harness;
namespace fs = std::filesystem;

namespace {

// Tiny model plus short text files in a scratch directory.
class HarnessFixture : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = fs::temp_directory_path() / "selfcal_harness_test";
        fs::create_directories(dir_);
        const auto m = testutil::random_model(50, testutil::tiny_config(1, 16, 32));
        lm::save_checkpoint(m, dir_ / "m.tlm");
        std::string text;
        for (int i = 0; i < 40; ++i) {
            text += "the quick brown fox jumps over the lazy dog number " + std::to_string(i) + "\n\n";
        }
        std::ofstream(dir_ / "eval.txt") << text;
        std::ofstream(dir_ / "corpus.txt") << text;
        std::ofstream(dir_ / "short.txt") << "tiny\n";
    }
    static void TearDownTestSuite() { fs::remove_all(dir_); }

    static ExperimentConfig base() {
        ExperimentConfig c;
        c.model_path = (dir_ / "m.tlm").string();
        c.eval_path = (dir_ / "eval.txt").string();
        c.corpus_path = (dir_ / "corpus.txt").string();
        c.methods = {compress::Method::rtn};
        c.sources = {calib::Source::random_vocab, calib::Source::corpus};
        c.num_seeds = 2;
        c.num_examples = 4;
        c.example_len = 24;
        c.eval_tokens = 512;
        c.dense_baseline = false;
        return c;
    }

    static fs::path dir_;
};

fs::path HarnessFixture::dir_;

}  // namespace

TEST(MeanStd, PopulationConvention) {
    const auto [m, s] = mean_std({1.0, 3.0});
    EXPECT_EQ(m, 2.0);
    EXPECT_EQ(s, 1.0);
    EXPECT_EQ(mean_std({5.0}).second, 0.0);
    EXPECT_TRUE(std::isnan(mean_std({}).first));
}

TEST(Settings, Names) {
    EXPECT_EQ(grid_setting(0.5, 2.0), "ti=0.5/tf=2");
    EXPECT_EQ(quantity_setting(16), "n=16");
    EXPECT_EQ(kDefaultSetting, "default");
}

TEST(Config, JsonRoundTripAndErrors) {
    ExperimentConfig c;
    c.model_path = "m";
    c.eval_path = "e";
    c.corpus_path = "c";
    c.seeds = {3, 7};
    c.num_seeds = 2;
    c.ablation = Ablation::temperature_grid;
    c.grid_values = {0.0, 1.0};
    c.threads = 9;
    const auto back = ExperimentConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(back.seed_values(), (std::vector<std::uint64_t>{3, 7}));
    EXPECT_EQ(c.to_json().find("threads"), std::string::npos);
    EXPECT_THROW(ExperimentConfig::from_json(R"({"model_path":"m","eval_path":"e","nope":1})"),
                 ContractViolation);
    ExperimentConfig bad = c;
    bad.num_seeds = 0;
    bad.seeds.clear();
    EXPECT_THROW(bad.validate(), ContractViolation);
    bad = c;
    bad.ablation = Ablation::quantity;
    bad.quantity_sizes = {1, 3};
    EXPECT_THROW(bad.validate(), ContractViolation);
    ExperimentConfig defaults;
    EXPECT_EQ(defaults.seed_values(), (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
    EXPECT_NE(defaults.calibration_seed(0), defaults.calibration_seed(1));
}

TEST_F(HarnessFixture, RtnIsIdenticalAcrossSources) {
    const auto table = run_experiment(base());
    ASSERT_EQ(table.cells.size(), 4u);
    for (const auto& c : table.cells) {
        EXPECT_TRUE(c.ok()) << c.error;
    }
    const auto a = table.find("rtn", "random_vocab", "default");
    const auto b = table.find("rtn", "corpus", "default");
    ASSERT_TRUE(a && b);
    EXPECT_EQ(a->ppl_mean, b->ppl_mean);
    EXPECT_EQ(a->acc_mean, b->acc_mean);
    EXPECT_EQ(a->runs, 2u);
    EXPECT_EQ(a->ppl_std, 0.0);
}

TEST_F(HarnessFixture, RepeatedRunsAreByteIdentical) {
    auto cfg = base();
    cfg.methods = {compress::Method::sparsegpt, compress::Method::rtn};
    cfg.sources = {calib::Source::self, calib::Source::random_vocab};
    cfg.dense_baseline = true;
    const auto a = run(cfg);
    cfg.threads = 3;
    const auto b = run(cfg);
    EXPECT_EQ(a.to_json(), b.to_json());
    EXPECT_EQ(a.per_seed_csv(), b.per_seed_csv());
    EXPECT_EQ(a.cells.front().method, "dense");
    EXPECT_EQ(a.cells.front().source, "none");
}

TEST_F(HarnessFixture, FailedCellsAreRecordedAndRunContinues) {
    auto cfg = base();
    cfg.corpus_path = (dir_ / "short.txt").string();
    const auto table = run_experiment(cfg);
    std::size_t failed = 0;
    for (const auto& c : table.cells) {
        if (c.source == "corpus") {
            EXPECT_FALSE(c.ok());
            ++failed;
        } else {
            EXPECT_TRUE(c.ok());
        }
    }
    EXPECT_EQ(failed, 2u);
    const auto row = table.find("rtn", "corpus", "default");
    ASSERT_TRUE(row);
    EXPECT_EQ(row->runs, 0u);
    EXPECT_EQ(row->failures, 2u);
    EXPECT_NE(table.to_json().find("\"error\""), std::string::npos);
    EXPECT_NE(table.aggregate_csv().find("nan"), std::string::npos);
}

TEST_F(HarnessFixture, QuantityAblationUsesNestedPrefixes) {
    auto cfg = base();
    cfg.methods = {compress::Method::sparsegpt};
    cfg.sources = {calib::Source::random_vocab};
    cfg.num_seeds = 1;
    cfg.ablation = Ablation::quantity;
    cfg.quantity_sizes = {1, 2, 4};
    const auto q = run(cfg);
    ASSERT_EQ(q.cells.size(), 3u);
    EXPECT_EQ(q.cells[0].setting, "n=1");
    EXPECT_EQ(q.cells[2].setting, "n=4");
    cfg.ablation = Ablation::none;
    const auto full = run(cfg);
    EXPECT_EQ(full.cells.front().ppl, q.cells[2].ppl);
    cfg.num_examples = 1;
    const auto one = run(cfg);
    EXPECT_EQ(one.cells.front().ppl, q.cells[0].ppl);
}

TEST_F(HarnessFixture, QuantitySizeAboveBaseIsRejected) {
    auto cfg = base();
    cfg.ablation = Ablation::quantity;
    cfg.quantity_sizes = {1, 8};
    EXPECT_THROW(run(cfg), ContractViolation);
}

TEST_F(HarnessFixture, TemperatureGridWritesHeatmap) {
    auto cfg = base();
    cfg.methods = {compress::Method::wanda};
    cfg.sources = {calib::Source::self};
    cfg.num_seeds = 1;
    cfg.ablation = Ablation::temperature_grid;
    cfg.grid_values = {0.0, 1.0};
    const auto table = run(cfg);
    EXPECT_EQ(table.cells.size(), 4u);
    const auto out = dir_ / "grid";
    const auto files = write_outputs(table, cfg, out);
    EXPECT_TRUE(fs::exists(out / "results.json"));
    EXPECT_TRUE(fs::exists(out / "results.csv"));
    EXPECT_TRUE(fs::exists(out / "aggregate.csv"));
    EXPECT_TRUE(fs::exists(out / "heatmap_wanda.csv"));
    const std::string heat = table.heatmap_csv("wanda", cfg.grid_values);
    EXPECT_EQ(heat.substr(0, heat.find('\n')), "t_initial\\t_final,0,1");
    EXPECT_EQ(heat.find("nan"), std::string::npos);
}
