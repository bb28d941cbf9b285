#include "selfcal/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <tuple>

#include "json.hpp"

namespace selfcal::harness {

using nlohmann::json;
using compress::Method;
using calib::Source;

std::string_view ablation_name(Ablation a) {
    switch (a) {
        case Ablation::none: return "none";
        case Ablation::quantity: return "quantity";
        case Ablation::temperature_grid: return "temperature_grid";
    }
    return "?";
}

Ablation parse_ablation(std::string_view name) {
    for (Ablation a : {Ablation::none, Ablation::quantity, Ablation::temperature_grid}) {
        if (ablation_name(a) == name) {
            return a;
        }
    }
    throw ContractViolation("unknown ablation '" + std::string(name) + "'");
}

std::vector<std::uint64_t> ExperimentConfig::seed_values() const {
    if (!seeds.empty()) {
        return seeds;
    }
    std::vector<std::uint64_t> v(num_seeds);
    for (std::size_t k = 0; k < num_seeds; ++k) {
        v[k] = k;
    }
    return v;
}

std::uint64_t ExperimentConfig::calibration_seed(std::uint64_t seed_value) const {
    return derive_seed(seed, seed_value);
}

void ExperimentConfig::validate() const {
    require(!model_path.empty(), "ExperimentConfig: model_path is required");
    require(!eval_path.empty(), "ExperimentConfig: eval_path is required");
    require(!methods.empty(), "ExperimentConfig: methods must not be empty");
    require(!sources.empty(), "ExperimentConfig: sources must not be empty");
    require(num_seeds >= 1, "ExperimentConfig: num_seeds must be >= 1");
    require(seeds.empty() || seeds.size() == num_seeds,
            "ExperimentConfig: seeds list must have num_seeds entries");
    auto sv = seed_values();
    std::sort(sv.begin(), sv.end());
    require(std::adjacent_find(sv.begin(), sv.end()) == sv.end(),
            "ExperimentConfig: seed values must be distinct");
    require(num_examples >= 1 && example_len >= 1, "ExperimentConfig: empty calibration sets");
    schedule.validate();
    if (std::find(sources.begin(), sources.end(), Source::corpus) != sources.end()) {
        require(!corpus_path.empty(), "ExperimentConfig: corpus source needs corpus_path");
    }
    if (ablation == Ablation::quantity) {
        require(!quantity_sizes.empty(), "ExperimentConfig: quantity_sizes must not be empty");
        for (std::size_t i = 0; i < quantity_sizes.size(); ++i) {
            const std::size_t n = quantity_sizes[i];
            require(n >= 1 && (n & (n - 1)) == 0, "ExperimentConfig: sizes must be powers of two");
            require(i == 0 || n > quantity_sizes[i - 1], "ExperimentConfig: sizes must ascend");
            require(n <= num_examples, "ExperimentConfig: size exceeds the base set");
        }
    }
    if (ablation == Ablation::temperature_grid) {
        require(!grid_values.empty() && grid_ramp >= 1, "ExperimentConfig: empty grid");
        require(std::find(sources.begin(), sources.end(), Source::self) != sources.end(),
                "ExperimentConfig: temperature grid needs the self source");
        for (double t : grid_values) {
            require(std::isfinite(t) && t >= 0.0, "ExperimentConfig: bad grid temperature");
        }
    }
}

std::string ExperimentConfig::to_json() const {
    json m = json::array();
    for (Method x : methods) {
        m.push_back(compress::method_name(x));
    }
    json s = json::array();
    for (Source x : sources) {
        s.push_back(calib::source_name(x));
    }
    const json j = {{"model_path", model_path},
                    {"eval_path", eval_path},
                    {"corpus_path", corpus_path},
                    {"methods", m},
                    {"sources", s},
                    {"num_seeds", num_seeds},
                    {"seeds", seed_values()},
                    {"seed", seed},
                    {"num_examples", num_examples},
                    {"example_len", example_len},
                    {"t_initial", schedule.t_initial},
                    {"t_final", schedule.t_final},
                    {"ramp", schedule.n},
                    {"stopword_constraint", stopword_constraint},
                    {"ablation", ablation_name(ablation)},
                    {"quantity_sizes", quantity_sizes},
                    {"grid_values", grid_values},
                    {"grid_ramp", grid_ramp},
                    {"eval_tokens", eval_tokens},
                    {"dense_baseline", dense_baseline}};
    return j.dump();
}

ExperimentConfig ExperimentConfig::from_json(std::string_view text) {
    ExperimentConfig c;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ContractViolation(std::string("ExperimentConfig: ") + e.what());
    }
    require(j.is_object(), "ExperimentConfig: expected a JSON object");
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "model_path") {
                c.model_path = v.get<std::string>();
            } else if (key == "eval_path") {
                c.eval_path = v.get<std::string>();
            } else if (key == "corpus_path") {
                c.corpus_path = v.get<std::string>();
            } else if (key == "methods") {
                c.methods.clear();
                for (const auto& x : v) {
                    c.methods.push_back(compress::parse_method(x.get<std::string>()));
                }
            } else if (key == "sources") {
                c.sources.clear();
                for (const auto& x : v) {
                    c.sources.push_back(calib::parse_source(x.get<std::string>()));
                }
            } else if (key == "num_seeds") {
                c.num_seeds = v.get<std::size_t>();
            } else if (key == "seeds") {
                c.seeds = v.get<std::vector<std::uint64_t>>();
            } else if (key == "seed") {
                c.seed = v.get<std::uint64_t>();
            } else if (key == "num_examples") {
                c.num_examples = v.get<std::size_t>();
            } else if (key == "example_len") {
                c.example_len = v.get<std::size_t>();
            } else if (key == "t_initial") {
                c.schedule.t_initial = v.get<double>();
            } else if (key == "t_final") {
                c.schedule.t_final = v.get<double>();
            } else if (key == "ramp") {
                c.schedule.n = v.get<std::size_t>();
            } else if (key == "stopword_constraint") {
                c.stopword_constraint = v.get<bool>();
            } else if (key == "ablation") {
                c.ablation = parse_ablation(v.get<std::string>());
            } else if (key == "quantity_sizes") {
                c.quantity_sizes = v.get<std::vector<std::size_t>>();
            } else if (key == "grid_values") {
                c.grid_values = v.get<std::vector<double>>();
            } else if (key == "grid_ramp") {
                c.grid_ramp = v.get<std::size_t>();
            } else if (key == "eval_tokens") {
                c.eval_tokens = v.get<std::size_t>();
            } else if (key == "dense_baseline") {
                c.dense_baseline = v.get<bool>();
            } else if (key == "threads") {
                c.threads = v.get<std::size_t>();
            } else {
                throw ContractViolation("ExperimentConfig: unknown key '" + key + "'");
            }
        }
    } catch (const json::exception& e) {
        throw ContractViolation(std::string("ExperimentConfig: ") + e.what());
    }
    if (!c.seeds.empty() && !j.contains("num_seeds")) {
        c.num_seeds = c.seeds.size();
    }
    c.validate();
    return c;
}

std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) {
        return {std::nan(""), std::nan("")};
    }
    double mean = 0.0;
    for (double x : v) {
        mean += x;
    }
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) {
        var += (x - mean) * (x - mean);
    }
    var /= static_cast<double>(v.size());
    return {mean, std::sqrt(var)};
}

namespace {

std::string fmt(double v) {
    if (std::isnan(v)) {
        return "nan";
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string short_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

json num_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

std::string grid_setting(double t_initial, double t_final) {
    return "ti=" + short_num(t_initial) + "/tf=" + short_num(t_final);
}

std::string quantity_setting(std::size_t n) { return "n=" + std::to_string(n); }

std::vector<AggregateRow> ResultTable::aggregate() const {
    std::vector<AggregateRow> rows;
    std::vector<std::vector<double>> ppl;
    std::vector<std::vector<double>> acc;
    for (const auto& c : cells) {
        auto it = std::find_if(rows.begin(), rows.end(), [&](const AggregateRow& r) {
            return r.method == c.method && r.source == c.source && r.setting == c.setting;
        });
        if (it == rows.end()) {
            rows.push_back({c.method, c.source, c.setting});
            ppl.emplace_back();
            acc.emplace_back();
            it = rows.end() - 1;
        }
        const auto k = static_cast<std::size_t>(it - rows.begin());
        if (c.ok()) {
            ++it->runs;
            ppl[k].push_back(c.ppl);
            acc[k].push_back(c.next_token_acc);
        } else {
            ++it->failures;
        }
    }
    for (std::size_t k = 0; k < rows.size(); ++k) {
        std::tie(rows[k].ppl_mean, rows[k].ppl_std) = mean_std(ppl[k]);
        std::tie(rows[k].acc_mean, rows[k].acc_std) = mean_std(acc[k]);
    }
    return rows;
}

std::optional<AggregateRow> ResultTable::find(std::string_view method, std::string_view source,
                                              std::string_view setting) const {
    for (auto& r : aggregate()) {
        if (r.method == method && r.source == source && r.setting == setting) {
            return r;
        }
    }
    return std::nullopt;
}

std::string ResultTable::to_json() const {
    json cj = json::array();
    for (const auto& c : cells) {
        json e = {{"method", c.method},   {"source", c.source},
                  {"setting", c.setting}, {"seed", c.seed},
                  {"ppl", num_or_null(c.ppl)}, {"next_token_acc", num_or_null(c.next_token_acc)}};
        if (!c.ok()) {
            e["error"] = c.error;
        }
        cj.push_back(e);
    }
    json aj = json::array();
    for (const auto& r : aggregate()) {
        aj.push_back({{"method", r.method},
                      {"source", r.source},
                      {"setting", r.setting},
                      {"runs", r.runs},
                      {"failures", r.failures},
                      {"ppl_mean", num_or_null(r.ppl_mean)},
                      {"ppl_std", num_or_null(r.ppl_std)},
                      {"acc_mean", num_or_null(r.acc_mean)},
                      {"acc_std", num_or_null(r.acc_std)}});
    }
    const json j = {{"config", config_json.empty() ? json::object() : json::parse(config_json)},
                    {"std_convention", "population"},
                    {"cells", cj},
                    {"rows", aj}};
    return j.dump(2) + "\n";
}

std::string ResultTable::per_seed_csv() const {
    std::ostringstream os;
    os << "method,source,setting,seed,ppl,next_token_acc\n";
    for (const auto& c : cells) {
        os << c.method << ',' << c.source << ',' << c.setting << ',' << c.seed << ','
           << fmt(c.ok() ? c.ppl : std::nan("")) << ','
           << fmt(c.ok() ? c.next_token_acc : std::nan("")) << '\n';
    }
    return os.str();
}

std::string ResultTable::aggregate_csv() const {
    std::ostringstream os;
    os << "method,source,setting,runs,failures,ppl_mean,ppl_std,acc_mean,acc_std\n";
    for (const auto& r : aggregate()) {
        os << r.method << ',' << r.source << ',' << r.setting << ',' << r.runs << ',' << r.failures
           << ',' << fmt(r.ppl_mean) << ',' << fmt(r.ppl_std) << ',' << fmt(r.acc_mean) << ','
           << fmt(r.acc_std) << '\n';
    }
    return os.str();
}

std::string ResultTable::heatmap_csv(std::string_view method, const std::vector<double>& grid) const {
    const auto rows = aggregate();
    std::ostringstream os;
    os << "t_initial\\t_final";
    for (double tf : grid) {
        os << ',' << short_num(tf);
    }
    os << '\n';
    for (double ti : grid) {
        os << short_num(ti);
        for (double tf : grid) {
            const std::string setting = grid_setting(ti, tf);
            double v = std::nan("");
            for (const auto& r : rows) {
                if (r.method == method && r.source == "self" && r.setting == setting) {
                    v = r.ppl_mean;
                }
            }
            os << ',' << fmt(v);
        }
        os << '\n';
    }
    return os.str();
}

// --- orchestration ---------------------------------------------------------

namespace {

struct Context {
    lm::ModelCheckpoint model;
    std::vector<lm::TokenSequence> eval;
    lm::TokenSequence corpus;
};

Context load_context(const ExperimentConfig& cfg) {
    Context ctx;
    ctx.model = lm::load_checkpoint(cfg.model_path);
    lm::TokenSequence stream = lm::tokenize_corpus(lm::read_text_file(cfg.eval_path));
    if (cfg.eval_tokens > 0 && stream.size() > cfg.eval_tokens) {
        stream.resize(cfg.eval_tokens);
    }
    const std::size_t ctx_len = ctx.model.config.context_len;
    for (std::size_t s = 0; s + 1 < stream.size(); s += ctx_len) {
        const std::size_t e = std::min(stream.size(), s + ctx_len);
        ctx.eval.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(s),
                              stream.begin() + static_cast<std::ptrdiff_t>(e));
    }
    if (ctx.eval.empty() || ctx.eval.back().size() < 2) {
        if (!ctx.eval.empty()) {
            ctx.eval.pop_back();
        }
    }
    require(!ctx.eval.empty(), "experiment: held-out text is too short");
    if (std::find(cfg.sources.begin(), cfg.sources.end(), Source::corpus) != cfg.sources.end()) {
        ctx.corpus = lm::tokenize_corpus(lm::read_text_file(cfg.corpus_path));
    }
    return ctx;
}

struct Keyed {
    std::tuple<std::size_t, std::size_t, std::size_t, std::size_t> key;
    CellResult cell;
};

class Runner {
public:
    Runner(const ExperimentConfig& cfg, const Progress& progress)
        : cfg_(cfg), progress_(progress), ctx_(load_context(cfg)) {
        threads_ = std::max<std::size_t>(cfg.threads, 1);
    }

    // The error text is empty on success.
    std::pair<calib::CalibrationSet, std::string> make_set(Source source, std::uint64_t seed_value,
                                                           const calib::TemperatureSchedule& sched) {
        calib::CalibrationSpec spec;
        spec.source = source;
        spec.num_examples = cfg_.num_examples;
        spec.example_len = cfg_.example_len;
        spec.seed = cfg_.calibration_seed(seed_value);
        spec.schedule = sched;
        spec.stopword_constraint = cfg_.stopword_constraint && source == Source::self;
        spec.corpus_path = source == Source::corpus ? cfg_.corpus_path : std::string();
        try {
            return {calib::build_calibration_set(spec, &ctx_.model, ctx_.corpus, threads_), {}};
        } catch (const std::exception& e) {
            return {calib::CalibrationSet{}, std::string("calibration: ") + e.what()};
        }
    }

    void cell(std::size_t setting_index, std::size_t method_index, std::size_t source_index,
              std::size_t seed_index, const std::string& setting, const calib::CalibrationSet& set,
              const std::string& set_error) {
        const Method m = cfg_.methods[method_index];
        CellResult c;
        c.method = std::string(compress::method_name(m));
        c.source = std::string(calib::source_name(cfg_.sources[source_index]));
        c.setting = setting;
        c.seed = cfg_.seed_values()[seed_index];
        if (!set_error.empty()) {
            c.error = set_error;
        } else {
            try {
                auto ccfg = compress::CompressionConfig::defaults(m);
                ccfg.threads = threads_;
                const auto out = compress::compress_model(ctx_.model, set, ccfg);
                const auto ev = lm::evaluate(out.model, ctx_.eval, threads_);
                c.ppl = ev.perplexity;
                c.next_token_acc = ev.next_token_acc;
            } catch (const std::exception& e) {
                c.error = e.what();
            }
        }
        push({method_index + 1, source_index, setting_index, seed_index}, std::move(c));
    }

    void dense() {
        if (!cfg_.dense_baseline) {
            return;
        }
        CellResult c;
        c.method = "dense";
        c.source = "none";
        c.setting = std::string(kDefaultSetting);
        try {
            const auto ev = lm::evaluate(ctx_.model, ctx_.eval, threads_);
            c.ppl = ev.perplexity;
            c.next_token_acc = ev.next_token_acc;
        } catch (const std::exception& e) {
            c.error = e.what();
        }
        push({0, 0, 0, 0}, std::move(c));
    }

    ResultTable finish() {
        std::stable_sort(cells_.begin(), cells_.end(),
                         [](const Keyed& a, const Keyed& b) { return a.key < b.key; });
        ResultTable t;
        t.config_json = cfg_.to_json();
        for (auto& k : cells_) {
            t.cells.push_back(std::move(k.cell));
        }
        return t;
    }

private:
    void push(std::tuple<std::size_t, std::size_t, std::size_t, std::size_t> key, CellResult c) {
        if (progress_) {
            progress_(c);
        }
        cells_.push_back({key, std::move(c)});
    }

    const ExperimentConfig& cfg_;
    const Progress& progress_;
    Context ctx_;
    std::size_t threads_ = 1;
    std::vector<Keyed> cells_;
};

}  // namespace

ResultTable run_experiment(const ExperimentConfig& cfg, const Progress& progress) {
    cfg.validate();
    Runner runner(cfg, progress);
    runner.dense();
    const auto seeds = cfg.seed_values();
    for (std::size_t si = 0; si < cfg.sources.size(); ++si) {
        for (std::size_t k = 0; k < seeds.size(); ++k) {
            const auto [set, err] = runner.make_set(cfg.sources[si], seeds[k], cfg.schedule);
            for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
                runner.cell(0, mi, si, k, std::string(kDefaultSetting), set, err);
            }
        }
    }
    return runner.finish();
}

ResultTable ablate_quantity(const ExperimentConfig& cfg, const Progress& progress) {
    cfg.validate();
    require(!cfg.quantity_sizes.empty() && cfg.quantity_sizes.back() <= cfg.num_examples,
            "ablate_quantity: subset size exceeds the base set");
    Runner runner(cfg, progress);
    runner.dense();
    const auto seeds = cfg.seed_values();
    for (std::size_t si = 0; si < cfg.sources.size(); ++si) {
        for (std::size_t k = 0; k < seeds.size(); ++k) {
            const auto [base, err] = runner.make_set(cfg.sources[si], seeds[k], cfg.schedule);
            for (std::size_t qi = 0; qi < cfg.quantity_sizes.size(); ++qi) {
                const std::size_t n = cfg.quantity_sizes[qi];
                const calib::CalibrationSet sub = err.empty() ? base.prefix(n) : calib::CalibrationSet{};
                for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
                    runner.cell(qi, mi, si, k, quantity_setting(n), sub, err);
                }
            }
        }
    }
    return runner.finish();
}

ResultTable ablate_temperature_grid(const ExperimentConfig& cfg, const Progress& progress) {
    cfg.validate();
    const auto self_it = std::find(cfg.sources.begin(), cfg.sources.end(), Source::self);
    require(self_it != cfg.sources.end(), "ablate_temperature_grid: self source is required");
    const auto si = static_cast<std::size_t>(self_it - cfg.sources.begin());
    Runner runner(cfg, progress);
    runner.dense();
    const auto seeds = cfg.seed_values();
    const std::size_t g = cfg.grid_values.size();
    for (std::size_t k = 0; k < seeds.size(); ++k) {
        for (std::size_t a = 0; a < g; ++a) {
            for (std::size_t b = 0; b < g; ++b) {
                const calib::TemperatureSchedule sched{cfg.grid_values[a], cfg.grid_values[b],
                                                       cfg.grid_ramp};
                const auto [set, err] = runner.make_set(Source::self, seeds[k], sched);
                const std::string setting = grid_setting(sched.t_initial, sched.t_final);
                for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
                    runner.cell(a * g + b, mi, si, k, setting, set, err);
                }
            }
        }
    }
    return runner.finish();
}

ResultTable run(const ExperimentConfig& cfg, const Progress& progress) {
    switch (cfg.ablation) {
        case Ablation::none: return run_experiment(cfg, progress);
        case Ablation::quantity: return ablate_quantity(cfg, progress);
        case Ablation::temperature_grid: return ablate_temperature_grid(cfg, progress);
    }
    throw ContractViolation("run: unknown ablation");
}

std::vector<std::filesystem::path> write_outputs(const ResultTable& table, const ExperimentConfig& cfg,
                                                 const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> written;
    auto put = [&](const std::string& name, const std::string& bytes) {
        const auto path = dir / name;
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error("cannot write " + path.string());
        }
        out << bytes;
        written.push_back(path);
    };
    put("results.json", table.to_json());
    put("results.csv", table.per_seed_csv());
    put("aggregate.csv", table.aggregate_csv());
    if (cfg.ablation == Ablation::temperature_grid) {
        for (Method m : cfg.methods) {
            const std::string name(compress::method_name(m));
            put("heatmap_" + name + ".csv", table.heatmap_csv(name, cfg.grid_values));
        }
    }
    return written;
}

}  // namespace selfcal::harness
