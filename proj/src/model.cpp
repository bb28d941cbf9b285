#include <cmath>
#include <string>

#include "selfcal/tiny_lm.hpp"

namespace selfcal::lm {

void ModelConfig::validate() const {
    require(heads > 0 && model_dim > 0 && model_dim % heads == 0,
            "ModelConfig: model_dim must be a positive multiple of heads");
    require(ffn_dim > 0, "ModelConfig: ffn_dim must be positive");
    require(context_len >= 2, "ModelConfig: context_len must be >= 2");
    require(vocab_size == Tokenizer::kVocabSize, "ModelConfig: vocab_size must match tokenizer");
}

std::string_view linear_kind_name(LinearKind kind) {
    switch (kind) {
        case LinearKind::q: return "attn.q";
        case LinearKind::k: return "attn.k";
        case LinearKind::v: return "attn.v";
        case LinearKind::out: return "attn.out";
        case LinearKind::ffn_in: return "ffn.in";
        case LinearKind::ffn_out: return "ffn.out";
    }
    return "?";
}

Matrix& LayerWeights::weight(LinearKind kind) {
    return const_cast<Matrix&>(static_cast<const LayerWeights&>(*this).weight(kind));
}

const Matrix& LayerWeights::weight(LinearKind kind) const {
    switch (kind) {
        case LinearKind::q: return q_w;
        case LinearKind::k: return k_w;
        case LinearKind::v: return v_w;
        case LinearKind::out: return o_w;
        case LinearKind::ffn_in: return ffn_in_w;
        case LinearKind::ffn_out: return ffn_out_w;
    }
    return q_w;
}

Matrix& LayerWeights::bias(LinearKind kind) {
    return const_cast<Matrix&>(static_cast<const LayerWeights&>(*this).bias(kind));
}

const Matrix& LayerWeights::bias(LinearKind kind) const {
    switch (kind) {
        case LinearKind::q: return q_b;
        case LinearKind::k: return k_b;
        case LinearKind::v: return v_b;
        case LinearKind::out: return o_b;
        case LinearKind::ffn_in: return ffn_in_b;
        case LinearKind::ffn_out: return ffn_out_b;
    }
    return q_b;
}

namespace {

template <class Weights, class Fn>
void visit(Weights& w, Fn&& fn) {
    fn(std::string("tok_emb"), w.tok_emb);
    fn(std::string("pos_emb"), w.pos_emb);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        auto& L = w.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        fn(p + "ln1.gain", L.ln1_g);
        fn(p + "ln1.bias", L.ln1_b);
        fn(p + "attn.q.weight", L.q_w);
        fn(p + "attn.q.bias", L.q_b);
        fn(p + "attn.k.weight", L.k_w);
        fn(p + "attn.k.bias", L.k_b);
        fn(p + "attn.v.weight", L.v_w);
        fn(p + "attn.v.bias", L.v_b);
        fn(p + "attn.out.weight", L.o_w);
        fn(p + "attn.out.bias", L.o_b);
        fn(p + "ln2.gain", L.ln2_g);
        fn(p + "ln2.bias", L.ln2_b);
        fn(p + "ffn.in.weight", L.ffn_in_w);
        fn(p + "ffn.in.bias", L.ffn_in_b);
        fn(p + "ffn.out.weight", L.ffn_out_w);
        fn(p + "ffn.out.bias", L.ffn_out_b);
    }
    fn(std::string("lnf.gain"), w.lnf_g);
    fn(std::string("lnf.bias"), w.lnf_b);
    if (!w.out_w.empty()) {
        fn(std::string("out.weight"), w.out_w);
    }
}

}  // namespace

void ModelWeights::for_each(const std::function<void(const std::string&, Matrix&)>& fn) {
    visit(*this, fn);
}

void ModelWeights::for_each(
    const std::function<void(const std::string&, const Matrix&)>& fn) const {
    visit(*this, fn);
}

ModelWeights ModelWeights::zeros_like() const {
    ModelWeights z = *this;
    z.for_each([](const std::string&, Matrix& m) { m.fill(0.0); });
    return z;
}

std::size_t ModelWeights::parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
}

ModelCheckpoint ModelCheckpoint::blank(const ModelConfig& config) {
    config.validate();
    const std::size_t d = config.model_dim;
    const std::size_t f = config.ffn_dim;
    ModelCheckpoint m;
    m.config = config;
    auto& w = m.weights;
    w.tok_emb = Matrix(config.vocab_size, d);
    w.pos_emb = Matrix(config.context_len, d);
    w.layers.resize(config.layers);
    for (auto& L : w.layers) {
        L.ln1_g = Matrix(1, d, 1.0);
        L.ln1_b = Matrix(1, d);
        L.q_w = Matrix(d, d);
        L.q_b = Matrix(1, d);
        L.k_w = Matrix(d, d);
        L.k_b = Matrix(1, d);
        L.v_w = Matrix(d, d);
        L.v_b = Matrix(1, d);
        L.o_w = Matrix(d, d);
        L.o_b = Matrix(1, d);
        L.ln2_g = Matrix(1, d, 1.0);
        L.ln2_b = Matrix(1, d);
        L.ffn_in_w = Matrix(f, d);
        L.ffn_in_b = Matrix(1, f);
        L.ffn_out_w = Matrix(d, f);
        L.ffn_out_b = Matrix(1, d);
    }
    w.lnf_g = Matrix(1, d, 1.0);
    w.lnf_b = Matrix(1, d);
    if (!config.tied_output) {
        w.out_w = Matrix(config.vocab_size, d);
    }
    return m;
}

ModelCheckpoint ModelCheckpoint::init_random(const ModelConfig& config, std::uint64_t seed) {
    ModelCheckpoint m = blank(config);
    Rng rng(derive_seed(seed, 0x1A17));
    auto fill_normal = [&](Matrix& t, double stddev) {
        for (double& v : t.data()) {
            v = stddev * rng.normal();
        }
    };
    const double proj_std = 0.02 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, config.layers)));
    auto& w = m.weights;
    fill_normal(w.tok_emb, 0.02);
    fill_normal(w.pos_emb, 0.01);
    for (auto& L : w.layers) {
        fill_normal(L.q_w, 0.02);
        fill_normal(L.k_w, 0.02);
        fill_normal(L.v_w, 0.02);
        fill_normal(L.o_w, proj_std);
        fill_normal(L.ffn_in_w, 0.02);
        fill_normal(L.ffn_out_w, proj_std);
    }
    if (!config.tied_output) {
        fill_normal(w.out_w, 0.02);
    }
    m.round_to_f32();
    return m;
}

void ModelCheckpoint::round_to_f32() {
    weights.for_each([](const std::string&, Matrix& t) {
        for (double& v : t.data()) {
            v = static_cast<double>(static_cast<float>(v));
        }
    });
}

void ModelCheckpoint::validate() const {
    config.validate();
    ModelCheckpoint ref = blank(config);
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> expected;
    ref.weights.for_each([&](const std::string& name, const Matrix& t) {
        expected.push_back({name, {t.rows(), t.cols()}});
    });
    std::size_t i = 0;
    bool ok = true;
    weights.for_each([&](const std::string& name, const Matrix& t) {
        if (i >= expected.size() || expected[i].first != name ||
            expected[i].second != std::pair{t.rows(), t.cols()}) {
            ok = false;
        }
        for (double v : t.data()) {
            if (!std::isfinite(v)) {
                ok = false;
            }
        }
        ++i;
    });
    require(ok && i == expected.size(), "ModelCheckpoint: tensors inconsistent with config");
}

}  // namespace selfcal::lm
