#include <cmath>
#include <numbers>

#include "selfcal/tiny_lm.hpp"

namespace selfcal::lm {

namespace {

double learning_rate_at(const TrainConfig& cfg, std::size_t step) {
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
        return cfg.learning_rate * static_cast<double>(step + 1) /
               static_cast<double>(cfg.warmup_steps);
    }
    const std::size_t decay_steps = cfg.steps > cfg.warmup_steps ? cfg.steps - cfg.warmup_steps : 1;
    const double progress =
        static_cast<double>(step - std::min(step, cfg.warmup_steps)) / static_cast<double>(decay_steps);
    // cosine from lr down to lr/10
    return cfg.learning_rate * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * progress)));
}

}  // namespace

ModelCheckpoint train(const ModelCheckpoint& init, std::span<const Token> corpus,
                      const TrainConfig& cfg, const TrainCallback& on_step) {
    init.validate();
    require(cfg.learning_rate > 0.0, "train: learning_rate must be positive");
    require(cfg.batch_size >= 1, "train: batch_size must be >= 1");
    if (cfg.steps == 0) {
        return init;
    }
    const std::size_t ctx = init.config.context_len;
    if (corpus.size() < ctx) {
        throw CorpusTooSmallError("train: corpus has " + std::to_string(corpus.size()) +
                                  " tokens, need at least context_len = " + std::to_string(ctx));
    }
    const std::size_t seq_len = cfg.seq_len == 0 ? ctx : std::min(cfg.seq_len, ctx);
    const std::size_t window = std::min(seq_len + 1, corpus.size());

    ModelCheckpoint model = init;
    std::vector<Matrix*> params;
    model.weights.for_each([&](const std::string&, Matrix& m) { params.push_back(&m); });
    ModelWeights m1 = model.weights.zeros_like();
    ModelWeights m2 = model.weights.zeros_like();
    std::vector<Matrix*> first, second;
    m1.for_each([&](const std::string&, Matrix& m) { first.push_back(&m); });
    m2.for_each([&](const std::string&, Matrix& m) { second.push_back(&m); });

    std::vector<TokenSequence> batch(cfg.batch_size);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Rng rng(derive_seed(cfg.seed, step));
        for (auto& seq : batch) {
            const std::size_t start = rng.below(corpus.size() - window + 1);
            seq.assign(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                       corpus.begin() + static_cast<std::ptrdiff_t>(start + window));
        }
        LossAndGrads lg = loss_and_grads(model, batch, cfg.threads);

        std::vector<Matrix*> grads;
        lg.grads.for_each([&](const std::string&, Matrix& m) { grads.push_back(&m); });
        double scale = 1.0;
        if (cfg.grad_clip > 0.0) {
            double sq = 0.0;
            for (const Matrix* gm : grads) {
                for (double v : gm->data()) {
                    sq += v * v;
                }
            }
            const double norm = std::sqrt(sq);
            if (norm > cfg.grad_clip) {
                scale = cfg.grad_clip / norm;
            }
        }
        const double lr = learning_rate_at(cfg, step);
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step + 1));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step + 1));
        for (std::size_t p = 0; p < params.size(); ++p) {
            auto w = params[p]->data();
            auto g = grads[p]->data();
            auto a = first[p]->data();
            auto b = second[p]->data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g[i] * scale;
                a[i] = cfg.beta1 * a[i] + (1.0 - cfg.beta1) * gi;
                b[i] = cfg.beta2 * b[i] + (1.0 - cfg.beta2) * gi * gi;
                w[i] -= lr * (a[i] / bc1) / (std::sqrt(b[i] / bc2) + cfg.eps);
            }
        }
        if (on_step) {
            on_step(step, lg.loss);
        }
    }
    model.round_to_f32();
    return model;
}

}  // namespace selfcal::lm
