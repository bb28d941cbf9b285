#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "selfcal/calibration.hpp"
#include "selfcal/compress.hpp"

namespace selfcal::harness {

enum class Ablation { none, quantity, temperature_grid };
std::string_view ablation_name(Ablation a);
Ablation parse_ablation(std::string_view name);

struct ExperimentConfig {
    std::string model_path;
    std::string eval_path;    // held-out text
    std::string corpus_path;  // source for corpus calibration sets
    std::vector<compress::Method> methods{compress::Method::sparsegpt, compress::Method::wanda,
                                          compress::Method::gptq, compress::Method::rtn,
                                          compress::Method::aws};
    std::vector<calib::Source> sources{calib::Source::self, calib::Source::corpus,
                                       calib::Source::random_vocab};
    std::size_t num_seeds = 5;
    std::vector<std::uint64_t> seeds;  // explicit seed values; default 0..num_seeds-1
    std::uint64_t seed = 0;            // root seed mixed into every set
    std::size_t num_examples = 128;
    std::size_t example_len = 2048;
    calib::TemperatureSchedule schedule{1.0, 1.0, 10};
    bool stopword_constraint = false;
    Ablation ablation = Ablation::none;
    std::vector<std::size_t> quantity_sizes{1, 2, 4, 8, 16, 32, 64, 128};
    std::vector<double> grid_values{0.0, 0.5, 1.0, 1.5, 2.0};
    std::size_t grid_ramp = 10;
    std::size_t eval_tokens = 0;  // 0: the whole held-out file
    bool dense_baseline = true;
    std::size_t threads = 1;  // never affects results

    std::vector<std::uint64_t> seed_values() const;
    void validate() const;
    std::string to_json() const;  // excludes threads
    static ExperimentConfig from_json(std::string_view text);
    // Seed of the calibration set for one seed value.
    std::uint64_t calibration_seed(std::uint64_t seed_value) const;
};

struct CellResult {
    std::string method;
    std::string source;
    std::string setting;
    std::uint64_t seed = 0;
    double ppl = 0.0;
    double next_token_acc = 0.0;
    std::string error;  // non-empty when the cell failed
    bool ok() const { return error.empty(); }
};

struct AggregateRow {
    std::string method;
    std::string source;
    std::string setting;
    std::size_t runs = 0;  // successful seeds
    std::size_t failures = 0;
    double ppl_mean = 0.0;
    double ppl_std = 0.0;  // population convention
    double acc_mean = 0.0;
    double acc_std = 0.0;
};

struct ResultTable {
    std::string config_json;
    std::vector<CellResult> cells;  // ordered by method, source, setting, seed

    std::vector<AggregateRow> aggregate() const;
    std::optional<AggregateRow> find(std::string_view method, std::string_view source,
                             std::string_view setting) const;
    std::string to_json() const;
    std::string per_seed_csv() const;   // method,source,setting,seed,ppl,next_token_acc
    std::string aggregate_csv() const;  // mean and population std per row
    // t_initial rows by t_final columns of mean perplexity for one method.
    std::string heatmap_csv(std::string_view method, const std::vector<double>& grid) const;
};

// Population mean and standard deviation (divide by the count).
std::pair<double, double> mean_std(const std::vector<double>& v);

std::string grid_setting(double t_initial, double t_final);
std::string quantity_setting(std::size_t n);
inline constexpr std::string_view kDefaultSetting = "default";

using Progress = std::function<void(const CellResult&)>;

ResultTable run_experiment(const ExperimentConfig& cfg, const Progress& progress = {});
ResultTable ablate_quantity(const ExperimentConfig& cfg, const Progress& progress = {});
ResultTable ablate_temperature_grid(const ExperimentConfig& cfg, const Progress& progress = {});
// Dispatches on cfg.ablation.
ResultTable run(const ExperimentConfig& cfg, const Progress& progress = {});

// results.json, results.csv, aggregate.csv (+ heatmap_<method>.csv for the grid).
std::vector<std::filesystem::path> write_outputs(const ResultTable& table, const ExperimentConfig& cfg,
                                                 const std::filesystem::path& dir);

}  // namespace selfcal::harness
