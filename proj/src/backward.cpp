// Hand-derived reverse pass for the fixed architecture in tiny_lm.hpp.

#include <cmath>
#include <numbers>

#include "selfcal/tiny_lm.hpp"

namespace selfcal::lm {

namespace {

using numerics::accumulate_at;
using numerics::matmul;

constexpr double kLayerNormEps = 1e-5;

struct LnCache {
    Matrix xhat;
    std::vector<double> rstd;
};

Matrix ln_forward(const Matrix& x, const Matrix& g, const Matrix& b, LnCache& cache) {
    const std::size_t T = x.rows();
    const std::size_t d = x.cols();
    cache.xhat = Matrix(T, d);
    cache.rstd.assign(T, 0.0);
    Matrix y(T, d);
    for (std::size_t t = 0; t < T; ++t) {
        const auto row = x.row(t);
        double mean = 0.0;
        for (double v : row) {
            mean += v;
        }
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
        cache.rstd[t] = rstd;
        for (std::size_t i = 0; i < d; ++i) {
            const double xh = (row[i] - mean) * rstd;
            cache.xhat(t, i) = xh;
            y(t, i) = xh * g(0, i) + b(0, i);
        }
    }
    return y;
}

// Returns dx; accumulates dg, db.
Matrix ln_backward(const Matrix& dy, const LnCache& cache, const Matrix& g, Matrix& dg,
                   Matrix& db) {
    const std::size_t T = dy.rows();
    const std::size_t d = dy.cols();
    Matrix dx(T, d);
    std::vector<double> dxhat(d);
    for (std::size_t t = 0; t < T; ++t) {
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double xh = cache.xhat(t, i);
            dg(0, i) += dy(t, i) * xh;
            db(0, i) += dy(t, i);
            dxhat[i] = dy(t, i) * g(0, i);
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh;
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        for (std::size_t i = 0; i < d; ++i) {
            dx(t, i) = cache.rstd[t] * (dxhat[i] - mean_dxhat - cache.xhat(t, i) * mean_dxhat_xhat);
        }
    }
    return dx;
}

// y = x W^T + b. Accumulates dW, db and returns dx.
Matrix linear_backward(const Matrix& dy, const Matrix& x, const Matrix& w, Matrix& dw, Matrix& db) {
    accumulate_at(dw, dy, x);
    for (std::size_t t = 0; t < dy.rows(); ++t) {
        for (std::size_t j = 0; j < dy.cols(); ++j) {
            db(0, j) += dy(t, j);
        }
    }
    return matmul(dy, w);
}

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
    return cdf + x * pdf;
}

struct LayerCache {
    LnCache ln1;
    Matrix h1, q, k, v;
    std::vector<Matrix> probs;  // per head, T x T (lower triangle used)
    Matrix att;
    LnCache ln2;
    Matrix h2, u, a;
};

void attention_forward(LayerCache& c, std::size_t heads) {
    const std::size_t T = c.q.rows();
    const std::size_t d = c.q.cols();
    const std::size_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    c.att = Matrix(T, d);
    c.probs.assign(heads, Matrix(T, T));
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        Matrix& P = c.probs[h];
        for (std::size_t t = 0; t < T; ++t) {
            double top = -INFINITY;
            for (std::size_t s = 0; s <= t; ++s) {
                double dot = 0.0;
                for (std::size_t i = 0; i < hd; ++i) {
                    dot += c.q(t, off + i) * c.k(s, off + i);
                }
                P(t, s) = dot * scale;
                top = std::max(top, P(t, s));
            }
            double sum = 0.0;
            for (std::size_t s = 0; s <= t; ++s) {
                P(t, s) = std::exp(P(t, s) - top);
                sum += P(t, s);
            }
            for (std::size_t s = 0; s <= t; ++s) {
                P(t, s) /= sum;
                for (std::size_t i = 0; i < hd; ++i) {
                    c.att(t, off + i) += P(t, s) * c.v(s, off + i);
                }
            }
        }
    }
}

void attention_backward(const LayerCache& c, const Matrix& datt, std::size_t heads, Matrix& dq,
                        Matrix& dk, Matrix& dv) {
    const std::size_t T = c.q.rows();
    const std::size_t d = c.q.cols();
    const std::size_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    dq = Matrix(T, d);
    dk = Matrix(T, d);
    dv = Matrix(T, d);
    std::vector<double> dp(T);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        const Matrix& P = c.probs[h];
        for (std::size_t t = 0; t < T; ++t) {
            double dot_pdp = 0.0;
            for (std::size_t s = 0; s <= t; ++s) {
                double acc = 0.0;
                for (std::size_t i = 0; i < hd; ++i) {
                    acc += datt(t, off + i) * c.v(s, off + i);
                    dv(s, off + i) += P(t, s) * datt(t, off + i);
                }
                dp[s] = acc;
                dot_pdp += P(t, s) * acc;
            }
            for (std::size_t s = 0; s <= t; ++s) {
                const double ds = P(t, s) * (dp[s] - dot_pdp) * scale;
                for (std::size_t i = 0; i < hd; ++i) {
                    dq(t, off + i) += ds * c.k(s, off + i);
                    dk(s, off + i) += ds * c.q(t, off + i);
                }
            }
        }
    }
}

struct SequenceGrad {
    double nll = 0.0;
    std::size_t targets = 0;
    ModelWeights grads;
};

void check_sequence(const ModelCheckpoint& model, const TokenSequence& seq) {
    require(seq.size() >= 2, "loss: each sequence needs at least 2 tokens");
    require(seq.size() <= model.config.context_len + 1,
            "loss: sequence longer than context_len + 1");
}

SequenceGrad sequence_loss_and_grads(const ModelCheckpoint& model, const TokenSequence& seq) {
    check_sequence(model, seq);
    const auto& cfg = model.config;
    const auto& w = model.weights;
    const std::size_t T = seq.size() - 1;
    const std::span<const Token> inputs(seq.data(), T);

    SequenceGrad out;
    out.grads = w.zeros_like();
    auto& g = out.grads;

    // forward
    Matrix x = embed(model, inputs);
    std::vector<LayerCache> caches(w.layers.size());
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& L = w.layers[l];
        auto& c = caches[l];
        c.h1 = ln_forward(x, L.ln1_g, L.ln1_b, c.ln1);
        c.q = linear(c.h1, L.q_w, L.q_b);
        c.k = linear(c.h1, L.k_w, L.k_b);
        c.v = linear(c.h1, L.v_w, L.v_b);
        attention_forward(c, cfg.heads);
        const Matrix o = linear(c.att, L.o_w, L.o_b);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x.data()[i] += o.data()[i];
        }
        c.h2 = ln_forward(x, L.ln2_g, L.ln2_b, c.ln2);
        c.u = linear(c.h2, L.ffn_in_w, L.ffn_in_b);
        c.a = c.u;
        for (double& v : c.a.data()) {
            v = gelu(v);
        }
        const Matrix m = linear(c.a, L.ffn_out_w, L.ffn_out_b);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x.data()[i] += m.data()[i];
        }
    }
    LnCache lnf;
    const Matrix hf = ln_forward(x, w.lnf_g, w.lnf_b, lnf);
    const Matrix& wout = model.output_weight();
    Matrix dlogits = numerics::matmul_bt(hf, wout);

    // softmax cross-entropy, gradient of the summed NLL
    for (std::size_t t = 0; t < T; ++t) {
        auto row = dlogits.row(t);
        const Token target = seq[t + 1];
        if (target == Tokenizer::kPad) {
            std::fill(row.begin(), row.end(), 0.0);
            continue;
        }
        double top = -INFINITY;
        for (double v : row) {
            top = std::max(top, v);
        }
        const double shifted_target = row[target] - top;
        double sum = 0.0;
        for (double& v : row) {
            v = std::exp(v - top);
            sum += v;
        }
        out.nll += std::log(sum) - shifted_target;
        for (double& v : row) {
            v /= sum;
        }
        row[target] -= 1.0;
        ++out.targets;
    }

    // backward
    accumulate_at(cfg.tied_output ? g.tok_emb : g.out_w, dlogits, hf);
    Matrix dx = ln_backward(matmul(dlogits, wout), lnf, w.lnf_g, g.lnf_g, g.lnf_b);

    for (std::size_t li = w.layers.size(); li-- > 0;) {
        const auto& L = w.layers[li];
        auto& G = g.layers[li];
        const auto& c = caches[li];

        Matrix da = linear_backward(dx, c.a, L.ffn_out_w, G.ffn_out_w, G.ffn_out_b);
        for (std::size_t i = 0; i < da.size(); ++i) {
            da.data()[i] *= gelu_grad(c.u.data()[i]);
        }
        const Matrix dh2 = linear_backward(da, c.h2, L.ffn_in_w, G.ffn_in_w, G.ffn_in_b);
        const Matrix dx2 = ln_backward(dh2, c.ln2, L.ln2_g, G.ln2_g, G.ln2_b);
        for (std::size_t i = 0; i < dx.size(); ++i) {
            dx.data()[i] += dx2.data()[i];
        }

        const Matrix datt = linear_backward(dx, c.att, L.o_w, G.o_w, G.o_b);
        Matrix dq, dk, dv;
        attention_backward(c, datt, cfg.heads, dq, dk, dv);
        Matrix dh1 = linear_backward(dq, c.h1, L.q_w, G.q_w, G.q_b);
        const Matrix dh1k = linear_backward(dk, c.h1, L.k_w, G.k_w, G.k_b);
        const Matrix dh1v = linear_backward(dv, c.h1, L.v_w, G.v_w, G.v_b);
        for (std::size_t i = 0; i < dh1.size(); ++i) {
            dh1.data()[i] += dh1k.data()[i] + dh1v.data()[i];
        }
        const Matrix dx1 = ln_backward(dh1, c.ln1, L.ln1_g, G.ln1_g, G.ln1_b);
        for (std::size_t i = 0; i < dx.size(); ++i) {
            dx.data()[i] += dx1.data()[i];
        }
    }

    for (std::size_t t = 0; t < T; ++t) {
        auto te = g.tok_emb.row(inputs[t]);
        auto pe = g.pos_emb.row(t);
        const auto row = dx.row(t);
        for (std::size_t i = 0; i < row.size(); ++i) {
            te[i] += row[i];
            pe[i] += row[i];
        }
    }
    return out;
}

}  // namespace

LossAndGrads loss_and_grads(const ModelCheckpoint& model, std::span<const TokenSequence> batch,
                            std::size_t threads) {
    require(!batch.empty(), "loss_and_grads: empty batch");
    std::vector<SequenceGrad> parts(batch.size());
    parallel_for(batch.size(), threads,
                 [&](std::size_t i) { parts[i] = sequence_loss_and_grads(model, batch[i]); });

    LossAndGrads out;
    out.grads = model.weights.zeros_like();
    double nll = 0.0;
    for (const auto& part : parts) {
        nll += part.nll;
        out.targets += part.targets;
    }
    require(out.targets > 0, "loss_and_grads: batch has no non-PAD targets");
    const double inv = 1.0 / static_cast<double>(out.targets);
    out.loss = nll * inv;

    std::vector<Matrix*> dst;
    out.grads.for_each([&](const std::string&, Matrix& m) { dst.push_back(&m); });
    for (auto& part : parts) {
        std::size_t i = 0;
        part.grads.for_each([&](const std::string&, Matrix& m) {
            auto d = dst[i++]->data();
            const auto s = m.data();
            for (std::size_t j = 0; j < d.size(); ++j) {
                d[j] += s[j];
            }
        });
    }
    for (Matrix* m : dst) {
        for (double& v : m->data()) {
            v *= inv;
        }
    }
    return out;
}

double mean_loss(const ModelCheckpoint& model, std::span<const TokenSequence> batch,
                 std::size_t threads) {
    require(!batch.empty(), "mean_loss: empty batch");
    std::vector<std::pair<double, std::size_t>> parts(batch.size());
    parallel_for(batch.size(), threads, [&](std::size_t i) {
        const auto& seq = batch[i];
        check_sequence(model, seq);
        const Matrix logits =
            forward_all_logits(model, std::span<const Token>(seq.data(), seq.size() - 1));
        double nll = 0.0;
        std::size_t n = 0;
        for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
            const Token target = seq[t + 1];
            if (target == Tokenizer::kPad) {
                continue;
            }
            const auto row = logits.row(t);
            double top = -INFINITY;
            for (double v : row) {
                top = std::max(top, v);
            }
            double sum = 0.0;
            for (double v : row) {
                sum += std::exp(v - top);
            }
            nll += std::log(sum) + top - row[target];
            ++n;
        }
        parts[i] = {nll, n};
    });
    double nll = 0.0;
    std::size_t n = 0;
    for (const auto& [a, b] : parts) {
        nll += a;
        n += b;
    }
    require(n > 0, "mean_loss: batch has no non-PAD targets");
    return nll / static_cast<double>(n);
}

}  // namespace selfcal::lm
