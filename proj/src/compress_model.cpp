#include <chrono>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "selfcal/compress.hpp"

namespace selfcal::compress {

using nlohmann::json;
using lm::LinearKind;

CompressionConfig CompressionConfig::defaults(Method m) {
    CompressionConfig c;
    c.method = m;
    c.group_size = m == Method::wanda ? 1 : 128;
    return c;
}

void CompressionConfig::validate() const {
    require(prune_m >= 1 && prune_n <= prune_m, "CompressionConfig: invalid n:m pattern");
    require(bits >= 2 && bits <= 8, "CompressionConfig: bits must be in [2, 8]");
    require(group_size >= 1, "CompressionConfig: group_size must be >= 1");
    require(dampening >= 0.0 && std::isfinite(dampening), "CompressionConfig: bad dampening");
    require(symmetric, "CompressionConfig: only symmetric quantization is implemented");
}

std::string CompressionConfig::to_json() const {
    const json j = {{"method", method_name(method)},
                    {"prune_n", prune_n},
                    {"prune_m", prune_m},
                    {"bits", bits},
                    {"group_size", group_size},
                    {"dampening", dampening},
                    {"symmetric", symmetric},
                    {"desc_act_order", desc_act_order},
                    {"true_sequential", true_sequential}};
    return j.dump();
}

CompressionConfig CompressionConfig::from_json(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ContractViolation(std::string("CompressionConfig: ") + e.what());
    }
    require(j.is_object(), "CompressionConfig: expected a JSON object");
    CompressionConfig c = defaults(parse_method(j.value("method", std::string("sparsegpt"))));
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "method") {
            } else if (key == "prune_n") {
                c.prune_n = v.get<std::size_t>();
            } else if (key == "prune_m") {
                c.prune_m = v.get<std::size_t>();
            } else if (key == "bits") {
                c.bits = v.get<int>();
            } else if (key == "group_size") {
                c.group_size = v.get<std::size_t>();
            } else if (key == "dampening") {
                c.dampening = v.get<double>();
            } else if (key == "symmetric") {
                c.symmetric = v.get<bool>();
            } else if (key == "desc_act_order") {
                c.desc_act_order = v.get<bool>();
            } else if (key == "true_sequential") {
                c.true_sequential = v.get<bool>();
            } else if (key == "threads") {
                c.threads = v.get<std::size_t>();
            } else {
                throw ContractViolation("CompressionConfig: unknown key '" + key + "'");
            }
        }
    } catch (const json::exception& e) {
        throw ContractViolation(std::string("CompressionConfig: ") + e.what());
    }
    c.validate();
    return c;
}

double CompressionReport::global_sparsity() const {
    return prunable_weights == 0
               ? 0.0
               : static_cast<double>(zero_weights) / static_cast<double>(prunable_weights);
}

std::string CompressionReport::to_json() const {
    json layers_j = json::array();
    for (const auto& l : layers) {
        json e = {{"layer", l.layer},           {"rows", l.rows},         {"cols", l.cols},
                  {"tokens", l.tokens},         {"recon_error", l.recon_error},
                  {"sparsity", l.sparsity},     {"bits", l.bits}};
        if (l.alpha >= 0.0) {
            e["alpha"] = l.alpha;
        }
        layers_j.push_back(e);
    }
    const json j = {{"method", method},
                    {"config", json::parse(config_json)},
                    {"config_hash", config_hash},
                    {"model_hash", model_hash},
                    {"calib_hash", calib_hash},
                    {"layers", layers_j},
                    {"prunable_weights", prunable_weights},
                    {"zero_weights", zero_weights},
                    {"global_sparsity", global_sparsity()}};
    return j.dump(2) + "\n";
}

std::string CompressionReport::to_csv() const {
    std::ostringstream os;
    os << "layer,method,recon_error,sparsity,bits\n";
    char buf[64];
    for (const auto& l : layers) {
        os << l.layer << ',' << method << ',';
        std::snprintf(buf, sizeof buf, "%.17g", l.recon_error);
        os << buf << ',';
        std::snprintf(buf, sizeof buf, "%.17g", l.sparsity);
        os << buf << ',' << l.bits << '\n';
    }
    return os.str();
}

std::string CompressionReport::timing_json() const {
    json j = json::array();
    for (const auto& l : layers) {
        j.push_back({{"layer", l.layer}, {"seconds", l.seconds}});
    }
    return j.dump(2);
}

std::vector<LinearKind> target_kinds() {
    return {LinearKind::q, LinearKind::k, LinearKind::v, LinearKind::out, LinearKind::ffn_in,
            LinearKind::ffn_out};
}

std::string layer_name(std::size_t block, LinearKind kind) {
    return "layers." + std::to_string(block) + "." + std::string(lm::linear_kind_name(kind));
}

namespace {

// Consecutive context-length windows of every example, in order.
std::vector<lm::TokenSequence> windows_of(const calib::CalibrationSet& calib, std::size_t ctx) {
    std::vector<lm::TokenSequence> out;
    for (const auto& e : calib.examples) {
        for (std::size_t s = 0; s < e.size(); s += ctx) {
            const std::size_t end = std::min(e.size(), s + ctx);
            out.emplace_back(e.begin() + static_cast<std::ptrdiff_t>(s),
                             e.begin() + static_cast<std::ptrdiff_t>(end));
        }
    }
    return out;
}

void add_into(Matrix& x, const Matrix& y) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        x.data()[i] += y.data()[i];
    }
}

Matrix attention_of(const lm::LayerWeights& L, const Matrix& h, std::size_t heads) {
    const Matrix x1 = lm::layer_norm(h, L.ln1_g, L.ln1_b);
    return lm::causal_attention(lm::linear(x1, L.q_w, L.q_b), lm::linear(x1, L.k_w, L.k_b),
                                lm::linear(x1, L.v_w, L.v_b), heads);
}

Matrix after_attention(const lm::LayerWeights& L, const Matrix& h, std::size_t heads) {
    Matrix h2 = h;
    add_into(h2, lm::linear(attention_of(L, h, heads), L.o_w, L.o_b));
    return h2;
}

Matrix ffn_hidden(const lm::LayerWeights& L, const Matrix& h2) {
    Matrix u = lm::linear(lm::layer_norm(h2, L.ln2_g, L.ln2_b), L.ffn_in_w, L.ffn_in_b);
    for (double& v : u.data()) {
        v = lm::gelu(v);
    }
    return u;
}

// Computes act(k) for every window on worker threads, in chunks, and folds
// the results into the stats strictly in window order.
template <class Act>
LayerCalibStats gather(std::string id, std::size_t d_in, std::size_t windows, std::size_t threads,
                       Act&& act) {
    LayerCalibStats stats(std::move(id), d_in);
    const std::size_t chunk = std::max<std::size_t>(threads, 1) * 4;
    std::vector<Matrix> slot(chunk);
    for (std::size_t base = 0; base < windows; base += chunk) {
        const std::size_t count = std::min(chunk, windows - base);
        parallel_for(count, threads, [&](std::size_t i) { slot[i] = act(base + i); });
        for (std::size_t i = 0; i < count; ++i) {
            stats.accumulate(slot[i]);
        }
    }
    return stats;
}

// Drives capture in true-sequential order. on_stats(block, kinds, stats)
// may rewrite the weights of `live` for those kinds before they are used.
template <class OnStats>
void sequential_capture(const lm::ModelCheckpoint& embed_model, lm::ModelCheckpoint& live,
                        const calib::CalibrationSet& calib, std::size_t threads, OnStats&& on_stats) {
    require(!calib.examples.empty(), "capture: empty calibration set");
    const auto windows = windows_of(calib, live.config.context_len);
    const std::size_t n = windows.size();
    const std::size_t d = live.config.model_dim;
    const std::size_t f = live.config.ffn_dim;
    const std::size_t heads = live.config.heads;
    std::vector<Matrix> hidden(n);
    parallel_for(n, threads, [&](std::size_t k) { hidden[k] = lm::embed(embed_model, windows[k]); });

    for (std::size_t b = 0; b < live.config.layers; ++b) {
        const auto& L = live.weights.layers[b];
        auto qkv = gather(layer_name(b, LinearKind::q), d, n, threads, [&](std::size_t k) {
            return lm::layer_norm(hidden[k], L.ln1_g, L.ln1_b);
        });
        on_stats(b, std::vector{LinearKind::q, LinearKind::k, LinearKind::v}, qkv);
        auto out = gather(layer_name(b, LinearKind::out), d, n, threads,
                          [&](std::size_t k) { return attention_of(L, hidden[k], heads); });
        on_stats(b, std::vector{LinearKind::out}, out);
        auto fin = gather(layer_name(b, LinearKind::ffn_in), d, n, threads, [&](std::size_t k) {
            return lm::layer_norm(after_attention(L, hidden[k], heads), L.ln2_g, L.ln2_b);
        });
        on_stats(b, std::vector{LinearKind::ffn_in}, fin);
        auto fout = gather(layer_name(b, LinearKind::ffn_out), f, n, threads, [&](std::size_t k) {
            return ffn_hidden(L, after_attention(L, hidden[k], heads));
        });
        on_stats(b, std::vector{LinearKind::ffn_out}, fout);
        parallel_for(n, threads, [&](std::size_t k) {
            Matrix h2 = after_attention(L, hidden[k], heads);
            add_into(h2, lm::linear(ffn_hidden(L, h2), L.ffn_out_w, L.ffn_out_b));
            hidden[k] = std::move(h2);
        });
    }
}

}  // namespace

std::vector<LayerCalibStats> capture_layer_inputs(const lm::ModelCheckpoint& model,
                                                  const calib::CalibrationSet& calib,
                                                  std::size_t threads) {
    model.validate();
    lm::ModelCheckpoint live = model;
    std::vector<LayerCalibStats> out;
    sequential_capture(model, live, calib, threads,
                       [&](std::size_t b, const std::vector<LinearKind>& kinds,
                           const LayerCalibStats& stats) {
                           for (LinearKind kind : kinds) {
                               LayerCalibStats s = stats;
                               s.layer_id = layer_name(b, kind);
                               out.push_back(std::move(s));
                           }
                       });
    return out;
}

CompressionOutput compress_model(const lm::ModelCheckpoint& model, const calib::CalibrationSet& calib,
                                 const CompressionConfig& cfg) {
    cfg.validate();
    model.validate();
    calib.validate();
    const std::size_t threads = std::max<std::size_t>(cfg.threads, 1);

    CompressionOutput result;
    result.model = model;
    CompressionReport& rep = result.report;
    rep.method = std::string(method_name(cfg.method));
    rep.config_json = cfg.to_json();
    rep.config_hash = hex64(fnv1a(rep.config_json));
    rep.model_hash = hex64(fnv1a(lm::serialize_checkpoint(model)));
    rep.calib_hash = hex64(fnv1a(calib::serialize_calibration_set(calib)));

    auto compress_layer = [&](std::size_t b, LinearKind kind, const LayerCalibStats& stats) {
        const auto start = std::chrono::steady_clock::now();
        const Matrix& w = model.weights.layers[b].weight(kind);
        LayerReport lr;
        lr.layer = layer_name(b, kind);
        lr.rows = w.rows();
        lr.cols = w.cols();
        lr.tokens = stats.token_count;
        Matrix w_hat;
        switch (cfg.method) {
            case Method::wanda:
                w_hat = wanda_prune(w, stats.col_norms, cfg.prune_n, cfg.prune_m);
                lr.recon_error = reconstruction_error(w, w_hat, stats.hessian);
                break;
            case Method::sparsegpt: {
                auto r = sparsegpt_prune(w, stats.hessian, cfg);
                w_hat = std::move(r.weights);
                lr.recon_error = r.error;
                break;
            }
            case Method::gptq: {
                auto r = gptq_quantize(w, stats.hessian, cfg);
                w_hat = std::move(r.weights);
                lr.recon_error = r.error;
                break;
            }
            case Method::rtn: {
                auto r = rtn_quantize(w, stats.hessian, cfg);
                w_hat = std::move(r.weights);
                lr.recon_error = r.error;
                break;
            }
            case Method::aws: {
                auto r = aws_quantize(w, stats, cfg);
                w_hat = std::move(r.weights);
                lr.recon_error = r.error;
                lr.alpha = r.alpha;
                break;
            }
        }
        // checkpoint precision
        for (double& v : w_hat.data()) {
            v = static_cast<double>(static_cast<float>(v));
        }
        std::size_t zeros = 0;
        for (double v : w_hat.data()) {
            zeros += v == 0.0 ? 1 : 0;
        }
        lr.sparsity = static_cast<double>(zeros) / static_cast<double>(w_hat.size());
        lr.bits = is_pruning(cfg.method) ? 32 : cfg.bits;
        if (is_pruning(cfg.method)) {
            rep.prunable_weights += w_hat.size();
            rep.zero_weights += zeros;
        }
        result.model.weights.layers[b].weight(kind) = std::move(w_hat);
        lr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        rep.layers.push_back(std::move(lr));
    };

    if (cfg.true_sequential) {
        sequential_capture(model, result.model, calib, threads,
                           [&](std::size_t b, const std::vector<LinearKind>& kinds,
                               const LayerCalibStats& stats) {
                               for (LinearKind kind : kinds) {
                                   compress_layer(b, kind, stats);
                               }
                           });
    } else {
        const auto all = capture_layer_inputs(model, calib, threads);
        std::size_t i = 0;
        for (std::size_t b = 0; b < model.config.layers; ++b) {
            for (LinearKind kind : target_kinds()) {
                compress_layer(b, kind, all[i++]);
            }
        }
    }
    result.model.validate();
    return result;
}

}  // namespace selfcal::compress
