#include <algorithm>
#include <cmath>
#include <numeric>

#include "selfcal/compress.hpp"

namespace selfcal::compress {

using numerics::DecompositionError;

LayerCalibStats::LayerCalibStats(std::string id, std::size_t d_in)
    : layer_id(std::move(id)), hessian(d_in, d_in), col_norms(d_in, 0.0), mean_abs(d_in, 0.0) {}

void LayerCalibStats::accumulate(const Matrix& x) {
    const std::size_t d = dim();
    require(x.cols() == d, "LayerCalibStats::accumulate: width mismatch");
    // upper triangle, mirrored afterwards so H stays exactly symmetric
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const auto xr = x.row(t);
        for (std::size_t i = 0; i < d; ++i) {
            const double xi = xr[i];
            if (xi == 0.0) {
                continue;
            }
            auto hr = hessian.row(i);
            for (std::size_t j = i; j < d; ++j) {
                hr[j] += xi * xr[j];
            }
        }
    }
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            hessian(i, j) = hessian(j, i);
        }
    }
    // mean_abs is kept as a running sum until divided here
    const double old_n = static_cast<double>(token_count);
    token_count += x.rows();
    const double new_n = static_cast<double>(token_count);
    for (std::size_t j = 0; j < d; ++j) {
        double s = mean_abs[j] * old_n;
        for (std::size_t t = 0; t < x.rows(); ++t) {
            s += std::abs(x(t, j));
        }
        mean_abs[j] = new_n > 0 ? s / new_n : 0.0;
        col_norms[j] = std::sqrt(hessian(j, j));
    }
}

void LayerCalibStats::validate() const {
    const std::size_t d = dim();
    require(hessian.cols() == d && col_norms.size() == d && mean_abs.size() == d,
            "LayerCalibStats: inconsistent dimensions");
    for (std::size_t i = 0; i < d; ++i) {
        require(hessian(i, i) >= 0.0, "LayerCalibStats: negative diagonal");
        for (std::size_t j = 0; j < i; ++j) {
            require(hessian(i, j) == hessian(j, i), "LayerCalibStats: H not symmetric");
        }
    }
}

std::string_view method_name(Method m) {
    switch (m) {
        case Method::wanda: return "wanda";
        case Method::sparsegpt: return "sparsegpt";
        case Method::gptq: return "gptq";
        case Method::rtn: return "rtn";
        case Method::aws: return "aws";
    }
    return "?";
}

Method parse_method(std::string_view name) {
    for (Method m : {Method::wanda, Method::sparsegpt, Method::gptq, Method::rtn, Method::aws}) {
        if (method_name(m) == name) {
            return m;
        }
    }
    throw ContractViolation("unknown compression method '" + std::string(name) + "'");
}

bool is_pruning(Method m) { return m == Method::wanda || m == Method::sparsegpt; }

int max_code(int bits) { return (1 << (bits - 1)) - 1; }

double reconstruction_error(const Matrix& w, const Matrix& w_hat, const Matrix& h) {
    require(w.rows() == w_hat.rows() && w.cols() == w_hat.cols() && h.rows() == w.cols() &&
                h.cols() == w.cols(),
            "reconstruction_error: shape mismatch");
    Matrix d(w.rows(), w.cols());
    for (std::size_t i = 0; i < d.size(); ++i) {
        d.data()[i] = w.data()[i] - w_hat.data()[i];
    }
    const Matrix dh = numerics::matmul(d, h);
    double total = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        total += dh.data()[i] * d.data()[i];
    }
    return total;
}

InverseHessian inverse_hessian_factor(const Matrix& h, double dampening) {
    require(h.rows() == h.cols() && h.rows() > 0, "inverse_hessian_factor: H must be square");
    require(dampening >= 0.0 && std::isfinite(dampening), "inverse_hessian_factor: bad dampening");
    Matrix base = h;
    const std::size_t d = h.rows();
    for (std::size_t j = 0; j < d; ++j) {
        require(std::isfinite(base(j, j)), "inverse_hessian_factor: non-finite H");
        if (base(j, j) == 0.0) {
            base(j, j) = 1.0;
        }
    }
    double mean_diag = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        mean_diag += base(j, j);
    }
    mean_diag /= static_cast<double>(d);

    // retries after a zero dampening start from kRetryFloor
    constexpr std::size_t kRetries = 3;
    constexpr double kRetryFloor = 1e-6;
    double damp = dampening;
    for (std::size_t attempt = 0; attempt <= kRetries; ++attempt, damp = std::max(10.0 * damp, kRetryFloor)) {
        Matrix hd = base;
        const double lambda = damp * mean_diag;
        for (std::size_t j = 0; j < d; ++j) {
            hd(j, j) += lambda;
        }
        try {
            const Matrix hinv = numerics::inverse_from_cholesky(numerics::cholesky(hd));
            InverseHessian out;
            out.upper = numerics::cholesky(hinv).transposed();
            out.lambda = lambda;
            out.retries = attempt;
            return out;
        } catch (const DecompositionError&) {
        } catch (const numerics::SingularMatrixError&) {
        }
    }
    throw DecompositionError("inverse_hessian_factor: H not positive definite after " +
                             std::to_string(kRetries) + " dampening retries");
}

Matrix wanda_prune(const Matrix& w, std::span<const double> col_norms, std::size_t prune_n,
                   std::size_t prune_m) {
    require(prune_m >= 1 && prune_n <= prune_m, "wanda_prune: invalid n:m pattern");
    require(w.cols() % prune_m == 0, "wanda_prune: d_in must be divisible by the group size");
    require(col_norms.size() == w.cols(), "wanda_prune: col_norms length mismatch");
    Matrix out = w;
    std::vector<std::size_t> idx(prune_m);
    std::vector<double> score(prune_m);
    for (std::size_t r = 0; r < w.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t g = 0; g < w.cols(); g += prune_m) {
            for (std::size_t k = 0; k < prune_m; ++k) {
                score[k] = std::abs(row[g + k]) * col_norms[g + k];
            }
            std::iota(idx.begin(), idx.end(), 0);
            std::stable_sort(idx.begin(), idx.end(),
                             [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
            for (std::size_t k = 0; k < prune_n; ++k) {
                row[g + idx[k]] = 0.0;
            }
        }
    }
    return out;
}

namespace {

// rule(col, local, w1, u1, q): writes the compressed values of block-local
// column `local` into q, given the live (error-updated) block copy w1.
using ColumnRule = std::function<void(std::size_t col, std::size_t local, const Matrix& w1,
                                      const Matrix& u1, std::span<double> q)>;

// Left-to-right OBS sweep with lazy batched updates over blocks of `block`
// columns. `u` is the upper Cholesky factor of the damped inverse Hessian.
void obs_sweep(Matrix& w, const Matrix& u, std::size_t block, const ColumnRule& rule) {
    const std::size_t rows = w.rows();
    const std::size_t cols = w.cols();
    std::vector<double> q(rows);
    std::vector<double> err(rows);
    for (std::size_t b0 = 0; b0 < cols; b0 += block) {
        const std::size_t b1 = std::min(cols, b0 + block);
        const std::size_t count = b1 - b0;
        Matrix w1(rows, count);
        Matrix u1(count, count);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t k = 0; k < count; ++k) {
                w1(r, k) = w(r, b0 + k);
            }
        }
        for (std::size_t a = 0; a < count; ++a) {
            for (std::size_t k = 0; k < count; ++k) {
                u1(a, k) = u(b0 + a, b0 + k);
            }
        }
        Matrix err_block(rows, count);
        for (std::size_t i = 0; i < count; ++i) {
            rule(b0 + i, i, w1, u1, q);
            const double d = u1(i, i);
            for (std::size_t r = 0; r < rows; ++r) {
                err[r] = (w1(r, i) - q[r]) / d;
                err_block(r, i) = err[r];
            }
            for (std::size_t r = 0; r < rows; ++r) {
                auto wr = w1.row(r);
                const double e = err[r];
                if (e == 0.0) {
                    continue;
                }
                const auto ur = u1.row(i);
                for (std::size_t k = i + 1; k < count; ++k) {
                    wr[k] -= e * ur[k];
                }
            }
            for (std::size_t r = 0; r < rows; ++r) {
                w1(r, i) = q[r];
            }
        }
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t k = 0; k < count; ++k) {
                w(r, b0 + k) = w1(r, k);
            }
        }
        if (b1 < cols) {
            // W[:, b1:] -= Err_block * U[b0:b1, b1:]
            for (std::size_t r = 0; r < rows; ++r) {
                auto wr = w.row(r);
                for (std::size_t a = 0; a < count; ++a) {
                    const double e = err_block(r, a);
                    if (e == 0.0) {
                        continue;
                    }
                    const auto ua = u.row(b0 + a);
                    for (std::size_t k = b1; k < cols; ++k) {
                        wr[k] -= e * ua[k];
                    }
                }
            }
        }
    }
}

std::size_t block_width(const CompressionConfig& cfg, std::size_t cols) {
    return std::min(cols, std::max<std::size_t>(cfg.group_size, 1));
}

void check_layer(const Matrix& w, const Matrix& h) {
    require(w.rows() > 0 && w.cols() > 0, "compress: empty weight matrix");
    require(h.rows() == w.cols() && h.cols() == w.cols(), "compress: H does not match d_in");
}

}  // namespace

PruneResult sparsegpt_prune(const Matrix& w, const Matrix& h, const CompressionConfig& cfg) {
    check_layer(w, h);
    const std::size_t m = cfg.prune_m;
    const std::size_t n = cfg.prune_n;
    require(m >= 1 && n <= m && w.cols() % m == 0,
            "sparsegpt_prune: d_in must be divisible by the group size");
    const std::size_t block = block_width(cfg, w.cols());
    require(block % m == 0, "sparsegpt_prune: block width must be a multiple of the group size");
    const InverseHessian ih = inverse_hessian_factor(h, cfg.dampening);

    Matrix work = w;
    std::vector<std::uint8_t> pruned(w.rows() * m, 0);
    std::vector<std::size_t> idx(m);
    std::vector<double> sal(m);
    obs_sweep(work, ih.upper, block,
              [&](std::size_t, std::size_t local, const Matrix& w1, const Matrix& u1,
                  std::span<double> q) {
                  if (local % m == 0) {
                      for (std::size_t r = 0; r < w1.rows(); ++r) {
                          for (std::size_t k = 0; k < m; ++k) {
                              const double wv = w1(r, local + k);
                              const double d = u1(local + k, local + k);
                              sal[k] = wv * wv / (d * d);
                          }
                          std::iota(idx.begin(), idx.end(), 0);
                          std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
                              return sal[a] < sal[b];
                          });
                          std::fill_n(pruned.begin() + static_cast<std::ptrdiff_t>(r * m), m, 0);
                          for (std::size_t k = 0; k < n; ++k) {
                              pruned[r * m + idx[k]] = 1;
                          }
                      }
                  }
                  const std::size_t k = local % m;
                  for (std::size_t r = 0; r < w1.rows(); ++r) {
                      q[r] = pruned[r * m + k] ? 0.0 : w1(r, local);
                  }
              });
    PruneResult out;
    out.error = reconstruction_error(w, work, h);
    out.weights = std::move(work);
    return out;
}

PruneResult obs_prune_mask(const Matrix& w, const Matrix& h, const Matrix& mask,
                           const CompressionConfig& cfg) {
    check_layer(w, h);
    require(mask.rows() == w.rows() && mask.cols() == w.cols(), "obs_prune_mask: mask shape");
    const InverseHessian ih = inverse_hessian_factor(h, cfg.dampening);
    Matrix work = w;
    obs_sweep(work, ih.upper, block_width(cfg, w.cols()),
              [&](std::size_t col, std::size_t local, const Matrix& w1, const Matrix&,
                  std::span<double> q) {
                  for (std::size_t r = 0; r < w1.rows(); ++r) {
                      q[r] = mask(r, col) != 0.0 ? 0.0 : w1(r, local);
                  }
              });
    PruneResult out;
    out.error = reconstruction_error(w, work, h);
    out.weights = std::move(work);
    return out;
}

namespace {

double group_scale(std::span<const double> values, int qmax) {
    double mx = 0.0;
    for (double v : values) {
        mx = std::max(mx, std::abs(v));
    }
    return mx > 0.0 ? mx / qmax : 1.0;
}

int quantize_code(double v, double scale, int qmax) {
    const double q = std::nearbyint(v / scale);
    return static_cast<int>(std::clamp(q, static_cast<double>(-qmax), static_cast<double>(qmax)));
}

void check_quant_config(const CompressionConfig& cfg) {
    require(cfg.bits >= 2 && cfg.bits <= 8, "quantize: bits must be in [2, 8]");
    require(cfg.group_size >= 1, "quantize: group size must be >= 1");
    require(cfg.symmetric, "quantize: only symmetric quantization is implemented");
}

}  // namespace

QuantResult gptq_quantize(const Matrix& w, const Matrix& h, const CompressionConfig& cfg) {
    check_layer(w, h);
    check_quant_config(cfg);
    const std::size_t rows = w.rows();
    const std::size_t cols = w.cols();
    const int qmax = max_code(cfg.bits);
    const std::size_t gs = std::min(cfg.group_size, cols);

    std::vector<std::size_t> perm(cols);
    std::iota(perm.begin(), perm.end(), 0);
    if (cfg.desc_act_order) {
        std::stable_sort(perm.begin(), perm.end(),
                         [&](std::size_t a, std::size_t b) { return h(a, a) > h(b, b); });
    }
    Matrix wp(rows, cols);
    Matrix hp(cols, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            wp(r, c) = w(r, perm[c]);
        }
    }
    for (std::size_t a = 0; a < cols; ++a) {
        for (std::size_t c = 0; c < cols; ++c) {
            hp(a, c) = h(perm[a], perm[c]);
        }
    }
    const InverseHessian ih = inverse_hessian_factor(hp, cfg.dampening);

    const std::size_t groups = (cols + gs - 1) / gs;
    QuantResult out;
    out.scales = Matrix(rows, groups);
    out.codes.assign(rows * cols, 0);
    out.group_of.assign(cols, 0);
    out.channel_scale.assign(cols, 1.0);
    std::vector<double> row_scale(rows, 1.0);
    // Quant groups coincide with the sweep blocks, so every group starts with
    // fully updated weights in the block copy.
    obs_sweep(wp, ih.upper, gs,
              [&](std::size_t col, std::size_t local, const Matrix& w1, const Matrix&,
                  std::span<double> q) {
                  const std::size_t g = col / gs;
                  if (local == 0) {
                      for (std::size_t r = 0; r < rows; ++r) {
                          const auto rowv = w1.row(r);
                          row_scale[r] = group_scale(rowv, qmax);
                          out.scales(r, g) = row_scale[r];
                      }
                  }
                  out.group_of[perm[col]] = g;
                  for (std::size_t r = 0; r < rows; ++r) {
                      const int code = quantize_code(w1(r, local), row_scale[r], qmax);
                      out.codes[r * cols + perm[col]] = static_cast<std::int8_t>(code);
                      q[r] = row_scale[r] * code;
                  }
              });
    out.weights = Matrix(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out.weights(r, perm[c]) = wp(r, c);
        }
    }
    out.error = reconstruction_error(w, out.weights, h);
    return out;
}

QuantResult rtn_quantize(const Matrix& w, const CompressionConfig& cfg) {
    check_quant_config(cfg);
    const std::size_t rows = w.rows();
    const std::size_t cols = w.cols();
    require(rows > 0 && cols > 0, "rtn_quantize: empty weight matrix");
    const int qmax = max_code(cfg.bits);
    const std::size_t gs = std::min(cfg.group_size, cols);
    const std::size_t groups = (cols + gs - 1) / gs;
    QuantResult out;
    out.weights = Matrix(rows, cols);
    out.scales = Matrix(rows, groups);
    out.codes.assign(rows * cols, 0);
    out.group_of.resize(cols);
    out.channel_scale.assign(cols, 1.0);
    for (std::size_t c = 0; c < cols; ++c) {
        out.group_of[c] = c / gs;
    }
    for (std::size_t r = 0; r < rows; ++r) {
        const auto row = w.row(r);
        for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t c0 = g * gs;
            const std::size_t c1 = std::min(cols, c0 + gs);
            const double s = group_scale(row.subspan(c0, c1 - c0), qmax);
            out.scales(r, g) = s;
            for (std::size_t c = c0; c < c1; ++c) {
                const int code = quantize_code(row[c], s, qmax);
                out.codes[r * cols + c] = static_cast<std::int8_t>(code);
                out.weights(r, c) = s * code;
            }
        }
    }
    return out;
}

QuantResult rtn_quantize(const Matrix& w, const Matrix& h, const CompressionConfig& cfg) {
    check_layer(w, h);
    QuantResult out = rtn_quantize(w, cfg);
    out.error = reconstruction_error(w, out.weights, h);
    return out;
}

QuantResult aws_quantize(const Matrix& w, const LayerCalibStats& stats, const CompressionConfig& cfg) {
    check_layer(w, stats.hessian);
    check_quant_config(cfg);
    const std::size_t cols = w.cols();
    require(stats.mean_abs.size() == cols, "aws_quantize: mean_abs length mismatch");

    // log-scale offsets relative to the first active channel, so identical
    // activations give scales of exactly 1
    std::vector<double> rel(cols, 0.0);
    std::size_t active = 0;
    std::size_t first = cols;
    for (std::size_t j = 0; j < cols; ++j) {
        if (stats.mean_abs[j] > 0.0) {
            if (first == cols) {
                first = j;
            }
            ++active;
        }
    }
    if (active > 0) {
        const double base = std::log(stats.mean_abs[first]);
        double mean_rel = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            if (stats.mean_abs[j] > 0.0) {
                rel[j] = std::log(stats.mean_abs[j]) - base;
                mean_rel += rel[j];
            }
        }
        mean_rel /= static_cast<double>(active);
        for (std::size_t j = 0; j < cols; ++j) {
            if (stats.mean_abs[j] > 0.0) {
                rel[j] -= mean_rel;
            }
        }
    }

    constexpr int kSteps = 20;
    QuantResult best;
    bool have = false;
    for (int k = 0; k <= kSteps; ++k) {
        const double alpha = static_cast<double>(k) / kSteps;
        std::vector<double> s(cols, 1.0);
        for (std::size_t j = 0; j < cols; ++j) {
            if (stats.mean_abs[j] > 0.0) {
                s[j] = std::exp(alpha * rel[j]);
            }
        }
        Matrix scaled = w;
        for (std::size_t r = 0; r < w.rows(); ++r) {
            for (std::size_t j = 0; j < cols; ++j) {
                scaled(r, j) *= s[j];
            }
        }
        QuantResult q = rtn_quantize(scaled, cfg);
        for (std::size_t r = 0; r < w.rows(); ++r) {
            for (std::size_t j = 0; j < cols; ++j) {
                q.weights(r, j) /= s[j];
            }
        }
        q.error = reconstruction_error(w, q.weights, stats.hessian);
        q.alpha = alpha;
        q.channel_scale = std::move(s);
        if (!have || q.error < best.error) {
            best = std::move(q);
            have = true;
        }
    }
    return best;
}

}  // namespace selfcal::compress
