#include <algorithm>
#include <cmath>
#include <numbers>

#include "selfcal/tiny_lm.hpp"

namespace selfcal::lm {

namespace {

constexpr double kLayerNormEps = 1e-5;

void layer_norm_row(std::span<const double> x, std::span<const double> g,
                    std::span<const double> b, std::span<double> out) {
    const auto n = static_cast<double>(x.size());
    double mean = 0.0;
    for (double v : x) {
        mean += v;
    }
    mean /= n;
    double var = 0.0;
    for (double v : x) {
        var += (v - mean) * (v - mean);
    }
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = (x[i] - mean) * rstd * g[i] + b[i];
    }
}

// y (1 x out) = x (1 x in) * wt (in x out) + b
void linear_row(std::span<const double> x, const Matrix& wt, const Matrix& b,
                std::span<double> y) {
    std::copy(b.data().begin(), b.data().end(), y.begin());
    const std::size_t n = wt.cols();
    double* __restrict yp = y.data();
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double xk = x[k];
        const double* __restrict w = wt.row(k).data();
        for (std::size_t j = 0; j < n; ++j) {
            yp[j] += xk * w[j];
        }
    }
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t t = 0; t < x.rows(); ++t) {
        layer_norm_row(x.row(t), gain.row(0), bias.row(0), out.row(t));
    }
    return out;
}

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix y = numerics::matmul_bt(x, w);
    for (std::size_t t = 0; t < y.rows(); ++t) {
        auto row = y.row(t);
        for (std::size_t j = 0; j < row.size(); ++j) {
            row[j] += b(0, j);
        }
    }
    return y;
}

Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads) {
    const std::size_t T = q.rows();
    const std::size_t d = q.cols();
    const std::size_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix out(T, d);
    std::vector<double> p(T);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        for (std::size_t t = 0; t < T; ++t) {
            const double* qt = q.row(t).data() + off;
            double top = -INFINITY;
            for (std::size_t s = 0; s <= t; ++s) {
                const double* ks = k.row(s).data() + off;
                double dot = 0.0;
                for (std::size_t i = 0; i < hd; ++i) {
                    dot += qt[i] * ks[i];
                }
                p[s] = dot * scale;
                top = std::max(top, p[s]);
            }
            double sum = 0.0;
            for (std::size_t s = 0; s <= t; ++s) {
                p[s] = std::exp(p[s] - top);
                sum += p[s];
            }
            double* ot = out.row(t).data() + off;
            for (std::size_t s = 0; s <= t; ++s) {
                const double a = p[s] / sum;
                const double* vs = v.row(s).data() + off;
                for (std::size_t i = 0; i < hd; ++i) {
                    ot[i] += a * vs[i];
                }
            }
        }
    }
    return out;
}

Matrix embed(const ModelCheckpoint& model, std::span<const Token> tokens) {
    const auto& cfg = model.config;
    require(!tokens.empty() && tokens.size() <= cfg.context_len,
            "forward: sequence length must be in [1, context_len]");
    Matrix x(tokens.size(), cfg.model_dim);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        require(tokens[t] < cfg.vocab_size, "forward: token id out of range");
        const auto e = model.weights.tok_emb.row(tokens[t]);
        const auto p = model.weights.pos_emb.row(t);
        auto row = x.row(t);
        for (std::size_t i = 0; i < cfg.model_dim; ++i) {
            row[i] = e[i] + p[i];
        }
    }
    return x;
}

Matrix logits_from_hidden(const ModelCheckpoint& model, const Matrix& hidden) {
    const auto& w = model.weights;
    const Matrix h = layer_norm(hidden, w.lnf_g, w.lnf_b);
    return numerics::matmul_bt(h, model.output_weight());
}

Matrix forward_all_logits(const ModelCheckpoint& model, std::span<const Token> tokens) {
    Matrix x = embed(model, tokens);
    for (const auto& L : model.weights.layers) {
        const Matrix h1 = layer_norm(x, L.ln1_g, L.ln1_b);
        const Matrix att = causal_attention(linear(h1, L.q_w, L.q_b), linear(h1, L.k_w, L.k_b),
                                            linear(h1, L.v_w, L.v_b), model.config.heads);
        const Matrix o = linear(att, L.o_w, L.o_b);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x.data()[i] += o.data()[i];
        }
        const Matrix h2 = layer_norm(x, L.ln2_g, L.ln2_b);
        Matrix u = linear(h2, L.ffn_in_w, L.ffn_in_b);
        for (double& val : u.data()) {
            val = gelu(val);
        }
        const Matrix m = linear(u, L.ffn_out_w, L.ffn_out_b);
        for (std::size_t i = 0; i < x.size(); ++i) {
            x.data()[i] += m.data()[i];
        }
    }
    return logits_from_hidden(model, x);
}

std::vector<double> forward_logits(const ModelCheckpoint& model, std::span<const Token> context) {
    const Matrix all = forward_all_logits(model, context);
    const auto last = all.row(all.rows() - 1);
    return {last.begin(), last.end()};
}

// --- incremental decoding ----------------------------------------------------

Decoder::Decoder(const ModelCheckpoint& model) : model_(&model) {
    const auto& cfg = model.config;
    for (const auto& L : model.weights.layers) {
        for (LinearKind kind : kAllLinearKinds) {
            wt_.push_back(L.weight(kind).transposed());
        }
        keys_.emplace_back(cfg.context_len, cfg.model_dim);
        values_.emplace_back(cfg.context_len, cfg.model_dim);
    }
    wt_.push_back(model.output_weight().transposed());
}

void Decoder::reset() { position_ = 0; }

std::vector<double> Decoder::step(Token token) {
    const auto& cfg = model_->config;
    const auto& w = model_->weights;
    require(position_ < cfg.context_len, "Decoder: context is full");
    require(token < cfg.vocab_size, "Decoder: token id out of range");
    const std::size_t d = cfg.model_dim;
    const std::size_t hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t pos = position_;

    std::vector<double> x(d), h(d), q(d), att(d), tmp(d), u(cfg.ffn_dim), p(pos + 1);
    for (std::size_t i = 0; i < d; ++i) {
        x[i] = w.tok_emb(token, i) + w.pos_emb(pos, i);
    }
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
        const auto& L = w.layers[l];
        const Matrix* wt = &wt_[l * 6];
        layer_norm_row(x, L.ln1_g.row(0), L.ln1_b.row(0), h);
        linear_row(h, wt[0], L.q_b, q);
        linear_row(h, wt[1], L.k_b, keys_[l].row(pos));
        linear_row(h, wt[2], L.v_b, values_[l].row(pos));
        std::fill(att.begin(), att.end(), 0.0);
        for (std::size_t hh = 0; hh < cfg.heads; ++hh) {
            const std::size_t off = hh * hd;
            double top = -INFINITY;
            for (std::size_t s = 0; s <= pos; ++s) {
                const double* ks = keys_[l].row(s).data() + off;
                double dot = 0.0;
                for (std::size_t i = 0; i < hd; ++i) {
                    dot += q[off + i] * ks[i];
                }
                p[s] = dot * scale;
                top = std::max(top, p[s]);
            }
            double sum = 0.0;
            for (std::size_t s = 0; s <= pos; ++s) {
                p[s] = std::exp(p[s] - top);
                sum += p[s];
            }
            for (std::size_t s = 0; s <= pos; ++s) {
                const double a = p[s] / sum;
                const double* vs = values_[l].row(s).data() + off;
                for (std::size_t i = 0; i < hd; ++i) {
                    att[off + i] += a * vs[i];
                }
            }
        }
        linear_row(att, wt[3], L.o_b, tmp);
        for (std::size_t i = 0; i < d; ++i) {
            x[i] += tmp[i];
        }
        layer_norm_row(x, L.ln2_g.row(0), L.ln2_b.row(0), h);
        linear_row(h, wt[4], L.ffn_in_b, u);
        for (double& val : u) {
            val = gelu(val);
        }
        linear_row(u, wt[5], L.ffn_out_b, tmp);
        for (std::size_t i = 0; i < d; ++i) {
            x[i] += tmp[i];
        }
    }
    layer_norm_row(x, w.lnf_g.row(0), w.lnf_b.row(0), h);
    std::vector<double> logits(cfg.vocab_size);
    const Matrix zero_bias(1, cfg.vocab_size);
    linear_row(h, wt_.back(), zero_bias, logits);
    ++position_;
    return logits;
}

// --- evaluation --------------------------------------------------------------

namespace {

struct SequenceScore {
    double nll = 0.0;
    std::size_t targets = 0;
    std::size_t correct = 0;
};

SequenceScore score_sequence(const ModelCheckpoint& model, std::span<const Token> seq) {
    require(seq.size() >= 2, "evaluate: sequences must have at least 2 tokens");
    SequenceScore score;
    const std::size_t ctx = model.config.context_len;
    for (std::size_t start = 0; start + 1 < seq.size(); start += ctx) {
        const std::size_t len = std::min(ctx, seq.size() - start);
        if (len < 2) {
            break;
        }
        const auto window = seq.subspan(start, len);
        const Matrix logits = forward_all_logits(model, window);
        for (std::size_t t = 0; t + 1 < len; ++t) {
            const Token target = window[t + 1];
            if (target == Tokenizer::kPad) {
                continue;
            }
            const auto row = logits.row(t);
            const auto best = static_cast<std::size_t>(
                std::max_element(row.begin(), row.end()) - row.begin());
            const double top = row[best];
            double sum = 0.0;
            for (double v : row) {
                sum += std::exp(v - top);
            }
            score.nll += std::log(sum) + top - row[target];
            score.correct += (best == target) ? 1 : 0;
            ++score.targets;
        }
    }
    return score;
}

std::vector<SequenceScore> score_all(const ModelCheckpoint& model,
                                     std::span<const TokenSequence> data, std::size_t threads) {
    std::vector<SequenceScore> scores(data.size());
    parallel_for(data.size(), threads,
                 [&](std::size_t i) { scores[i] = score_sequence(model, data[i]); });
    return scores;
}

}  // namespace

std::vector<double> example_nll(const ModelCheckpoint& model, std::span<const TokenSequence> data,
                                std::size_t threads) {
    std::vector<double> out;
    for (const auto& s : score_all(model, data, threads)) {
        require(s.targets > 0, "evaluate: example has no scorable targets");
        out.push_back(s.nll / static_cast<double>(s.targets));
    }
    return out;
}

EvalResult evaluate(const ModelCheckpoint& model, std::span<const TokenSequence> data,
                    std::size_t threads) {
    require(!data.empty(), "evaluate: empty data");
    EvalResult r;
    std::size_t correct = 0;
    double ppl_sum = 0.0;
    for (const auto& s : score_all(model, data, threads)) {
        require(s.targets > 0, "evaluate: example has no scorable targets");
        ppl_sum += std::exp(s.nll / static_cast<double>(s.targets));
        correct += s.correct;
        r.targets += s.targets;
    }
    r.perplexity = ppl_sum / static_cast<double>(data.size());
    r.next_token_acc = static_cast<double>(correct) / static_cast<double>(r.targets);
    return r;
}

double perplexity(const ModelCheckpoint& model, std::span<const TokenSequence> data,
                  std::size_t threads) {
    return evaluate(model, data, threads).perplexity;
}

}  // namespace selfcal::lm
