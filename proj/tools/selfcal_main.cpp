#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "selfcal/calibration.hpp"
#include "selfcal/common.hpp"
#include "selfcal/compress.hpp"
#include "selfcal/harness.hpp"
#include "selfcal/text_metrics.hpp"
#include "selfcal/tiny_lm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace selfcal;

namespace {

struct Globals {
    std::uint64_t seed = 0;
    std::string config;
    std::string out;
    std::size_t threads = 0;
};

struct TrainOpts {
    std::string corpus = SELFCAL_DATA_DIR "/corpus.txt";
    std::string heldout;
    std::size_t steps = 6000;
    std::size_t batch = 4;
    double lr = 2e-3;
    std::size_t warmup = 200;
    double clip = 1.0;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t dim = 128;
    std::size_t ffn = 512;
    std::size_t context = 256;
    bool untied = false;
    std::size_t log_every = 50;
};

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Timestamps and timings live here, never in the result files themselves.
void write_sidecar(const fs::path& result, const std::string& command, const std::string& hash,
                   double seconds, json extra = json::object()) {
    extra["command"] = command;
    extra["config_hash"] = hash;
    extra["created_utc"] = utc_timestamp();
    extra["wall_seconds"] = seconds;
    write_file(fs::path(result.string() + ".meta.json"), extra.dump(2) + "\n");
}

std::string config_hash(const json& resolved) { return hex64(fnv1a(resolved.dump())); }

// Applies keys of a JSON config file to options the user did not pass on the
// command line. Keys are long flag names without the leading dashes
// (underscores and dashes are interchangeable).
void layer_config(CLI::App& root, CLI::App& sub, const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw CLI::ValidationError("--config", "cannot open " + path);
    }
    json cfg;
    try {
        cfg = json::parse(in);
    } catch (const json::exception& e) {
        throw CLI::ValidationError("--config", e.what());
    }
    if (!cfg.is_object()) {
        throw CLI::ValidationError("--config", "config file must hold a JSON object");
    }
    for (const auto& [key, value] : cfg.items()) {
        std::string flag = "--" + key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        CLI::Option* opt = sub.get_option_no_throw(flag);
        if (opt == nullptr) {
            opt = root.get_option_no_throw(flag);
        }
        if (opt == nullptr || key == "config" || key == "help") {
            throw CLI::ValidationError("--config", "unknown key '" + key + "'");
        }
        if (opt->count() > 0) {
            continue;
        }
        auto as_text = [](const json& v) {
            return v.is_string() ? v.get<std::string>() : v.dump();
        };
        if (value.is_array()) {
            for (const auto& v : value) {
                opt->add_result(as_text(v));
            }
        } else if (value.is_boolean()) {
            if (!value.get<bool>()) {
                continue;
            }
            opt->add_result("true");
        } else {
            opt->add_result(as_text(value));
        }
        opt->run_callback();
    }
}

int run_train(const Globals& g, const TrainOpts& o) {
    lm::ModelConfig mc;
    mc.layers = o.layers;
    mc.heads = o.heads;
    mc.model_dim = o.dim;
    mc.ffn_dim = o.ffn;
    mc.context_len = o.context;
    mc.tied_output = !o.untied;
    mc.validate();

    lm::TrainConfig tc;
    tc.steps = o.steps;
    tc.batch_size = o.batch;
    tc.learning_rate = o.lr;
    tc.warmup_steps = o.warmup;
    tc.grad_clip = o.clip;
    tc.seed = g.seed;
    tc.threads = resolve_threads(g.threads);

    const json resolved = {{"command", "train"},  {"seed", g.seed},     {"corpus", o.corpus},
                           {"heldout", o.heldout}, {"steps", o.steps},   {"batch", o.batch},
                           {"lr", o.lr},           {"warmup", o.warmup}, {"clip", o.clip},
                           {"layers", o.layers},   {"heads", o.heads},   {"dim", o.dim},
                           {"ffn", o.ffn},         {"context", o.context}, {"untied", o.untied}};
    const std::string hash = config_hash(resolved);
    std::cout << "config hash " << hash << "\n";

    const auto start = std::chrono::steady_clock::now();
    const lm::TokenSequence corpus = lm::tokenize_corpus(lm::read_text_file(o.corpus));
    std::cout << "corpus tokens " << corpus.size() << "\n";
    const auto init = lm::ModelCheckpoint::init_random(mc, g.seed);
    std::cout << "parameters " << init.weights.parameter_count() << "\n";

    double running = 0.0;
    std::size_t seen = 0;
    const auto model = lm::train(init, corpus, tc, [&](std::size_t step, double loss) {
        running += loss;
        ++seen;
        if (o.log_every > 0 && ((step + 1) % o.log_every == 0 || step + 1 == o.steps)) {
            std::cout << "step " << step + 1 << " loss " << std::fixed << std::setprecision(4)
                      << running / static_cast<double>(seen) << std::defaultfloat << std::endl;
            running = 0.0;
            seen = 0;
        }
    });

    const fs::path out = g.out.empty() ? fs::path("model.tlm") : fs::path(g.out);
    if (out.has_parent_path()) {
        fs::create_directories(out.parent_path());
    }
    lm::save_checkpoint(model, out);
    std::cout << "wrote " << out.string() << "\n";

    json extra = json::object();
    if (!o.heldout.empty()) {
        const lm::TokenSequence held = lm::tokenize_corpus(lm::read_text_file(o.heldout));
        const std::vector<lm::TokenSequence> data{held};
        const auto ev = lm::evaluate(model, data, tc.threads);
        std::cout << "heldout ppl " << ev.perplexity << " acc " << ev.next_token_acc << "\n";
        extra["heldout_ppl"] = ev.perplexity;
        extra["heldout_next_token_acc"] = ev.next_token_acc;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_sidecar(out, "train", hash, secs, extra);
    return 0;
}


struct GenCalibOpts {
    std::string source = "self";
    std::size_t n = 128;
    std::size_t len = 2048;
    double t_initial = 1.0;
    double t_final = 1.0;
    std::size_t ramp = 10;
    bool stopword_constraint = false;
    std::string corpus = SELFCAL_DATA_DIR "/corpus.txt";
    std::string model = SELFCAL_DATA_DIR "/tiny_lm.tlm";
};

int run_gen_calib(const Globals& g, const GenCalibOpts& o) {
    calib::CalibrationSpec spec;
    spec.source = calib::parse_source(o.source);
    spec.num_examples = o.n;
    spec.example_len = o.len;
    spec.seed = g.seed;
    spec.schedule = {o.t_initial, o.t_final, o.ramp};
    spec.stopword_constraint = o.stopword_constraint;
    if (spec.source == calib::Source::corpus) {
        spec.corpus_path = o.corpus;
    }
    spec.validate();
    json resolved = json::parse(calib::spec_to_json(spec));
    resolved["command"] = "gen-calib";
    if (spec.source == calib::Source::self) {
        resolved["model"] = o.model;
    }
    const std::string hash = config_hash(resolved);
    std::cout << "config hash " << hash << "\n";

    const auto start = std::chrono::steady_clock::now();
    lm::ModelCheckpoint model;
    lm::TokenSequence corpus;
    if (spec.source == calib::Source::self) {
        model = lm::load_checkpoint(o.model);
    } else if (spec.source == calib::Source::corpus) {
        corpus = lm::tokenize_corpus(lm::read_text_file(o.corpus));
    }
    const auto set = calib::build_calibration_set(
        spec, spec.source == calib::Source::self ? &model : nullptr, corpus, resolve_threads(g.threads));
    const fs::path out = g.out.empty() ? fs::path("calib.tcs") : fs::path(g.out);
    const std::string bytes = calib::serialize_calibration_set(set);
    write_file(out, bytes);
    std::cout << "wrote " << out.string() << " (" << set.examples.size() << " x "
              << spec.example_len << " tokens, set hash " << hex64(fnv1a(bytes)) << ")\n";
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_sidecar(out, "gen-calib", hash, secs);
    return 0;
}

struct CompressOpts {
    std::string model = SELFCAL_DATA_DIR "/tiny_lm.tlm";
    std::string calib;
    std::string method = "sparsegpt";
    std::string compression;  // CompressionConfig JSON file
    double dampening = -1.0;
    std::size_t group_size = 0;
    int bits = 0;
    std::string desc_act_order;
    std::string true_sequential;
};

bool parse_bool_text(const std::string& flag, const std::string& v) {
    if (v == "true" || v == "1") {
        return true;
    }
    if (v == "false" || v == "0") {
        return false;
    }
    throw ContractViolation(flag + " expects true or false");
}

compress::CompressionConfig resolve_compression(const CompressOpts& o, std::size_t threads) {
    json j = json::object();
    if (!o.compression.empty()) {
        j = json::parse(lm::read_text_file(o.compression));
    }
    if (!o.method.empty()) {
        j["method"] = o.method;
    }
    if (o.dampening >= 0.0) {
        j["dampening"] = o.dampening;
    }
    if (o.group_size > 0) {
        j["group_size"] = o.group_size;
    }
    if (o.bits > 0) {
        j["bits"] = o.bits;
    }
    if (!o.desc_act_order.empty()) {
        j["desc_act_order"] = parse_bool_text("--desc-act-order", o.desc_act_order);
    }
    if (!o.true_sequential.empty()) {
        j["true_sequential"] = parse_bool_text("--true-sequential", o.true_sequential);
    }
    auto cfg = compress::CompressionConfig::from_json(j.dump());
    cfg.threads = threads;
    return cfg;
}

int run_compress(const Globals& g, const CompressOpts& o) {
    require(!o.calib.empty(), "compress: --calib is required");
    const auto cfg = resolve_compression(o, resolve_threads(g.threads));
    const json resolved = {{"command", "compress"},
                           {"model", o.model},
                           {"calib", o.calib},
                           {"compression", json::parse(cfg.to_json())}};
    const std::string hash = config_hash(resolved);
    std::cout << "config hash " << hash << "\n";

    const auto start = std::chrono::steady_clock::now();
    const auto model = lm::load_checkpoint(o.model);
    const auto set = calib::load_calibration_set(o.calib);
    const auto result = compress::compress_model(model, set, cfg);
    const fs::path dir = g.out.empty() ? fs::path("compressed") : fs::path(g.out);
    fs::create_directories(dir);
    lm::save_checkpoint(result.model, dir / "model.tlm");
    write_file(dir / "report.json", result.report.to_json());
    write_file(dir / "report.csv", result.report.to_csv());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_sidecar(dir / "report.json", "compress", hash, secs,
                  {{"layer_seconds", json::parse(result.report.timing_json())}});

    std::cout << "method " << result.report.method << "\n";
    for (const auto& l : result.report.layers) {
        std::cout << "  " << l.layer << " recon_error " << l.recon_error << " sparsity "
                  << l.sparsity << " bits " << l.bits << "\n";
    }
    if (compress::is_pruning(cfg.method)) {
        std::cout << "global sparsity " << result.report.global_sparsity() << "\n";
    }
    std::cout << "wrote " << (dir / "model.tlm").string() << "\n";
    return 0;
}

// Fraction of exact zeros over the compressible linear layers.
double target_sparsity(const lm::ModelCheckpoint& model) {
    std::size_t zeros = 0;
    std::size_t total = 0;
    for (const auto& layer : model.weights.layers) {
        for (lm::LinearKind kind : compress::target_kinds()) {
            for (double v : layer.weight(kind).data()) {
                zeros += v == 0.0 ? 1 : 0;
                ++total;
            }
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(zeros) / static_cast<double>(total);
}

struct EvalOpts {
    std::string model = SELFCAL_DATA_DIR "/tiny_lm.tlm";
    std::string data = SELFCAL_DATA_DIR "/heldout.txt";
    std::size_t eval_tokens = 0;
};

int run_eval(const Globals& g, const EvalOpts& o) {
    const json resolved = {{"command", "eval"},
                           {"model", o.model},
                           {"data", o.data},
                           {"eval_tokens", o.eval_tokens}};
    const std::string hash = config_hash(resolved);
    std::cout << "config hash " << hash << "\n";
    const auto start = std::chrono::steady_clock::now();
    const auto model = lm::load_checkpoint(o.model);
    lm::TokenSequence stream = lm::tokenize_corpus(lm::read_text_file(o.data));
    if (o.eval_tokens > 0 && stream.size() > o.eval_tokens) {
        stream.resize(o.eval_tokens);
    }
    std::vector<lm::TokenSequence> windows;
    const std::size_t ctx = model.config.context_len;
    for (std::size_t s = 0; s + 1 < stream.size(); s += ctx) {
        const std::size_t e = std::min(stream.size(), s + ctx);
        if (e - s >= 2) {
            windows.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(s),
                                 stream.begin() + static_cast<std::ptrdiff_t>(e));
        }
    }
    require(!windows.empty(), "eval: data file is too short");
    const auto ev = lm::evaluate(model, windows, resolve_threads(g.threads));
    const double sparsity = target_sparsity(model);
    std::cout << "ppl " << ev.perplexity << "\nnext_token_acc " << ev.next_token_acc
              << "\ntarget_sparsity " << sparsity << "\n";
    if (!g.out.empty()) {
        const json j = {{"model", o.model},
                        {"model_hash", hex64(fnv1a(lm::serialize_checkpoint(model)))},
                        {"data", o.data},
                        {"windows", windows.size()},
                        {"targets", ev.targets},
                        {"ppl", ev.perplexity},
                        {"next_token_acc", ev.next_token_acc},
                        {"target_sparsity", sparsity}};
        write_file(g.out, j.dump(2) + "\n");
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        write_sidecar(g.out, "eval", hash, secs);
    }
    return 0;
}

struct AnalyzeOpts {
    std::string model = SELFCAL_DATA_DIR "/tiny_lm.tlm";
    std::string calib;
};

int run_analyze(const Globals& g, const AnalyzeOpts& o) {
    require(!o.calib.empty(), "analyze: --calib is required");
    const json resolved = {{"command", "analyze"}, {"model", o.model}, {"calib", o.calib}};
    const std::string hash = config_hash(resolved);
    std::cout << "config hash " << hash << "\n";
    const auto start = std::chrono::steady_clock::now();
    const auto model = lm::load_checkpoint(o.model);
    const auto set = calib::load_calibration_set(o.calib);
    const auto rep = metrics::analyze(model, set.examples, resolve_threads(g.threads));
    std::cout << rep.to_csv();
    const fs::path dir = g.out.empty() ? fs::path("analysis") : fs::path(g.out);
    write_file(dir / "analysis.json", rep.to_json());
    write_file(dir / "analysis.csv", rep.to_csv());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_sidecar(dir / "analysis.json", "analyze", hash, secs);
    return 0;
}

struct ExperimentOpts {
    harness::ExperimentConfig cfg;
    std::vector<std::string> methods{"sparsegpt", "wanda", "gptq", "rtn", "aws"};
    std::vector<std::string> sources{"self", "corpus", "random_vocab"};
    std::string ablation = "none";
    std::string dense_baseline = "true";

    ExperimentOpts() {
        cfg.model_path = SELFCAL_DATA_DIR "/tiny_lm.tlm";
        cfg.eval_path = SELFCAL_DATA_DIR "/heldout.txt";
        cfg.corpus_path = SELFCAL_DATA_DIR "/corpus.txt";
    }
};

void add_experiment_options(CLI::App* app, ExperimentOpts& o, bool with_ablation) {
    auto& c = o.cfg;
    app->add_option("--model-path", c.model_path, "Checkpoint to compress")->capture_default_str();
    app->add_option("--eval-path", c.eval_path, "Held-out text for perplexity")->capture_default_str();
    app->add_option("--corpus-path", c.corpus_path, "Text sampled by the corpus source")
        ->capture_default_str();
    app->add_option("--methods", o.methods, "Methods: sparsegpt wanda gptq rtn aws")
        ->capture_default_str();
    app->add_option("--sources", o.sources, "Calibration sources: self corpus random_vocab")
        ->capture_default_str();
    app->add_option("--num-seeds", c.num_seeds, "Calibration sets per (method, source)")
        ->capture_default_str();
    app->add_option("--seeds", c.seeds, "Explicit seed values (default 0..num-seeds-1)");
    app->add_option("--num-examples", c.num_examples, "Examples per calibration set")
        ->capture_default_str();
    app->add_option("--example-len", c.example_len, "Tokens per example")->capture_default_str();
    app->add_option("--t-initial", c.schedule.t_initial, "Initial sampling temperature (self)")
        ->capture_default_str();
    app->add_option("--t-final", c.schedule.t_final, "Final sampling temperature (self)")
        ->capture_default_str();
    app->add_option("--ramp", c.schedule.n, "Temperature ramp length in tokens")->capture_default_str();
    app->add_flag("--stopword-constraint", c.stopword_constraint,
                  "Restrict the first generated token to stop-word first bytes");
    app->add_option("--quantity-sizes", c.quantity_sizes, "Subset sizes for the quantity ablation")
        ->capture_default_str();
    app->add_option("--grid-values", c.grid_values, "Temperatures of the grid ablation")
        ->capture_default_str();
    app->add_option("--grid-ramp", c.grid_ramp, "Ramp length of the grid ablation")
        ->capture_default_str();
    app->add_option("--eval-tokens", c.eval_tokens, "Held-out tokens scored (0: all)")
        ->capture_default_str();
    app->add_option("--dense-baseline", o.dense_baseline, "Also evaluate the uncompressed model")
        ->capture_default_str();
    auto* ab = app->add_option("--ablation", o.ablation,
                               with_ablation ? "Ablation: quantity or temperature_grid"
                                             : "Ablation: none, quantity or temperature_grid");
    ab->capture_default_str();
}

harness::ExperimentConfig resolve_experiment(const Globals& g, ExperimentOpts& o) {
    auto c = o.cfg;
    c.methods.clear();
    for (const auto& m : o.methods) {
        c.methods.push_back(compress::parse_method(m));
    }
    c.sources.clear();
    for (const auto& s : o.sources) {
        c.sources.push_back(calib::parse_source(s));
    }
    c.ablation = harness::parse_ablation(o.ablation);
    c.dense_baseline = parse_bool_text("--dense-baseline", o.dense_baseline);
    if (!c.seeds.empty() && c.seeds.size() != c.num_seeds) {
        c.num_seeds = c.seeds.size();
    }
    c.seed = g.seed;
    c.threads = resolve_threads(g.threads);
    c.validate();
    return c;
}

int run_experiment_cmd(const Globals& g, const harness::ExperimentConfig& cfg, const char* command) {
    const std::string hash = config_hash(json::parse(cfg.to_json()));
    std::cout << "config hash " << hash << "\n";
    const auto start = std::chrono::steady_clock::now();
    const auto table = harness::run(cfg, [](const harness::CellResult& c) {
        std::cout << "  " << c.method << " " << c.source << " " << c.setting << " seed " << c.seed;
        if (c.ok()) {
            std::cout << " ppl " << c.ppl << " acc " << c.next_token_acc << std::endl;
        } else {
            std::cout << " FAILED: " << c.error << std::endl;
        }
    });
    const fs::path dir = g.out.empty() ? fs::path("results") : fs::path(g.out);
    const auto files = harness::write_outputs(table, cfg, dir);
    std::cout << table.aggregate_csv();
    for (const auto& f : files) {
        std::cout << "wrote " << f.string() << "\n";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_sidecar(dir / "results.json", command, hash, secs);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"selfcal: calibration data for post-training compression of a tiny LM"};
    app.require_subcommand(1);
    app.fallthrough();
    app.set_version_flag("--version", "0.1.0");

    Globals g;
    app.add_option("--seed", g.seed, "Root seed; all randomness derives from it")->capture_default_str();
    app.add_option("--config", g.config, "JSON file of flag defaults (keys are flag names)");
    app.add_option("--out", g.out, "Output path (file or directory, per subcommand)");
    app.add_option("--threads", g.threads,
                   "Worker threads (0: SELFCAL_THREADS or 1); never changes results")
        ->capture_default_str();

    TrainOpts to;
    CLI::App* train = app.add_subcommand("train", "Train the tiny byte-level LM on a text corpus");
    train->add_option("--corpus", to.corpus, "Training text file")->capture_default_str();
    train->add_option("--heldout", to.heldout, "Held-out text file scored after training");
    train->add_option("--steps", to.steps, "Optimizer steps")->capture_default_str();
    train->add_option("--batch", to.batch, "Sequences per step")->capture_default_str();
    train->add_option("--lr", to.lr, "Peak Adam learning rate")->capture_default_str();
    train->add_option("--warmup", to.warmup, "Linear warmup steps")->capture_default_str();
    train->add_option("--clip", to.clip, "Global gradient-norm clip (0 disables)")->capture_default_str();
    train->add_option("--layers", to.layers, "Transformer blocks")->capture_default_str();
    train->add_option("--heads", to.heads, "Attention heads")->capture_default_str();
    train->add_option("--dim", to.dim, "Model width")->capture_default_str();
    train->add_option("--ffn", to.ffn, "Feed-forward width")->capture_default_str();
    train->add_option("--context", to.context, "Context length")->capture_default_str();
    train->add_flag("--untied", to.untied, "Use a separate output projection");
    train->add_option("--log-every", to.log_every, "Print mean loss every k steps")->capture_default_str();

    GenCalibOpts go;
    CLI::App* gen = app.add_subcommand("gen-calib", "Build a calibration set and write it to --out");
    gen->add_option("--source", go.source, "self, corpus or random_vocab")->capture_default_str();
    gen->add_option("--n", go.n, "Number of examples")->capture_default_str();
    gen->add_option("--len", go.len, "Tokens per example")->capture_default_str();
    gen->add_option("--t-initial", go.t_initial, "Temperature of the first generated token")
        ->capture_default_str();
    gen->add_option("--t-final", go.t_final, "Temperature after the ramp")->capture_default_str();
    gen->add_option("--ramp", go.ramp, "Ramp length n in generated tokens")->capture_default_str();
    gen->add_flag("--stopword-constraint", go.stopword_constraint,
                  "Restrict the first generated token to stop-word first bytes");
    gen->add_option("--corpus", go.corpus, "Text file for the corpus source")->capture_default_str();
    gen->add_option("--model", go.model, "Checkpoint for the self source")->capture_default_str();

    CompressOpts co;
    CLI::App* comp = app.add_subcommand("compress", "Compress a checkpoint; --out is a directory");
    comp->add_option("--model", co.model, "Checkpoint to compress")->capture_default_str();
    comp->add_option("--calib", co.calib, "Calibration set file from gen-calib");
    comp->add_option("--method", co.method, "wanda, sparsegpt, gptq, rtn or aws")->capture_default_str();
    comp->add_option("--compression", co.compression, "CompressionConfig JSON file");
    comp->add_option("--dampening", co.dampening, "Relative Hessian dampening (overrides the file)");
    comp->add_option("--group-size", co.group_size, "Quantization group / sweep block width");
    comp->add_option("--bits", co.bits, "Quantization bits");
    comp->add_option("--desc-act-order", co.desc_act_order, "gptq column order by descending diag(H)");
    comp->add_option("--true-sequential", co.true_sequential,
                     "Capture inputs through already compressed layers");

    EvalOpts eo;
    CLI::App* ev = app.add_subcommand("eval", "Held-out perplexity and next-token accuracy");
    ev->add_option("--model", eo.model, "Checkpoint to evaluate")->capture_default_str();
    ev->add_option("--data", eo.data, "Text file scored in context-length windows")->capture_default_str();
    ev->add_option("--eval-tokens", eo.eval_tokens, "Score only the first k tokens (0: all)")
        ->capture_default_str();

    AnalyzeOpts ao;
    CLI::App* an = app.add_subcommand("analyze", "Text metrics of a calibration set; --out is a directory");
    an->add_option("--model", ao.model, "Checkpoint used for perplexity")->capture_default_str();
    an->add_option("--calib", ao.calib, "Calibration set file");

    ExperimentOpts xo;
    CLI::App* ex = app.add_subcommand("experiment", "Method x source x seed grid; --out is a directory");
    add_experiment_options(ex, xo, false);

    ExperimentOpts bo;
    bo.ablation = "quantity";
    CLI::App* ab = app.add_subcommand("ablate", "Quantity or temperature-grid ablation; --out is a directory");
    add_experiment_options(ab, bo, true);

    harness::ExperimentConfig xcfg;
    try {
        app.parse(argc, argv);
        CLI::App* sub = app.get_subcommands().front();
        if (!g.config.empty()) {
            layer_config(app, *sub, g.config);
        }
        if (ex->parsed()) {
            xcfg = resolve_experiment(g, xo);
        } else if (ab->parsed()) {
            xcfg = resolve_experiment(g, bo);
            if (xcfg.ablation == harness::Ablation::none) {
                throw ContractViolation("ablate: --ablation must be quantity or temperature_grid");
            }
        }
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const ContractViolation& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    }

    try {
        if (train->parsed()) {
            return run_train(g, to);
        }
        if (gen->parsed()) {
            return run_gen_calib(g, go);
        }
        if (comp->parsed()) {
            return run_compress(g, co);
        }
        if (ev->parsed()) {
            return run_eval(g, eo);
        }
        if (an->parsed()) {
            return run_analyze(g, ao);
        }
        if (ex->parsed()) {
            return run_experiment_cmd(g, xcfg, "experiment");
        }
        if (ab->parsed()) {
            return run_experiment_cmd(g, xcfg, "ablate");
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
