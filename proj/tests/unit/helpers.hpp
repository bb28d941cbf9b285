#pragma once

#include <vector>

#include "selfcal/common.hpp"
#include "selfcal/compress.hpp"
#include "selfcal/numerics.hpp"
#include "selfcal/tiny_lm.hpp"

namespace testutil {

using selfcal::Rng;
using selfcal::numerics::Matrix;

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    Matrix m(r, c);
    for (double& v : m.data()) {
        v = scale * rng.normal();
    }
    return m;
}

// tokens x d activations with correlated channels and uneven magnitudes.
inline Matrix correlated_inputs(Rng& rng, std::size_t tokens, std::size_t d) {
    const Matrix mix = random_matrix(rng, d, d, 1.0 / static_cast<double>(d));
    Matrix x(tokens, d);
    for (std::size_t t = 0; t < tokens; ++t) {
        std::vector<double> z(d);
        for (double& v : z) {
            v = rng.normal();
        }
        for (std::size_t j = 0; j < d; ++j) {
            double s = z[j];
            for (std::size_t k = 0; k < d; ++k) {
                s += 2.0 * mix(j, k) * z[k];
            }
            x(t, j) = s * (0.2 + 2.0 * static_cast<double>(j % 5));
        }
    }
    return x;
}

inline selfcal::compress::LayerCalibStats stats_of(const Matrix& x) {
    selfcal::compress::LayerCalibStats s("test", x.cols());
    s.accumulate(x);
    return s;
}

inline Matrix spd(Rng& rng, std::size_t n) {
    const Matrix a = random_matrix(rng, n, n);
    Matrix h = selfcal::numerics::matmul_at(a, a);
    for (std::size_t i = 0; i < n; ++i) {
        h(i, i) += static_cast<double>(n);
    }
    return h;
}

inline selfcal::lm::ModelConfig tiny_config(std::size_t layers = 1, std::size_t dim = 16,
                                            std::size_t ctx = 16) {
    selfcal::lm::ModelConfig c;
    c.layers = layers;
    c.heads = 2;
    c.model_dim = dim;
    c.ffn_dim = 2 * dim;
    c.context_len = ctx;
    return c;
}

// Random model with non-trivial layer norms and biases.
inline selfcal::lm::ModelCheckpoint random_model(std::uint64_t seed, const selfcal::lm::ModelConfig& c) {
    auto m = selfcal::lm::ModelCheckpoint::init_random(c, seed);
    Rng rng(seed ^ 0xA5A5);
    m.weights.for_each([&](const std::string&, Matrix& t) {
        for (double& v : t.data()) {
            v += 0.1 * rng.normal();
        }
    });
    return m;
}

inline std::vector<std::uint32_t> random_tokens(Rng& rng, std::size_t n, std::uint32_t vocab = 259) {
    std::vector<std::uint32_t> s(n);
    for (auto& t : s) {
        t = static_cast<std::uint32_t>(rng.below(vocab));
    }
    return s;
}

}  // namespace testutil
