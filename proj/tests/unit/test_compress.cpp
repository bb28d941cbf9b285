#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "../oracles/oracles.hpp"
#include "helpers.hpp"
#include "selfcal/compress.hpp"

using namespace selfcal;
using namespace selfcal::compress;
using numerics::Matrix;

namespace {

CompressionConfig cfg_for(Method m) { return CompressionConfig::defaults(m); }

Matrix hessian_of(const Matrix& x) { return testutil::stats_of(x).hessian; }

std::vector<double> row_of(const Matrix& m, std::size_t r) {
    return {m.row(r).begin(), m.row(r).end()};
}

void expect_two_four(const Matrix& w) {
    for (std::size_t r = 0; r < w.rows(); ++r) {
        for (std::size_t g = 0; g < w.cols(); g += 4) {
            int zeros = 0;
            for (std::size_t k = 0; k < 4; ++k) {
                zeros += w(r, g + k) == 0.0 ? 1 : 0;
            }
            ASSERT_GE(zeros, 2) << "row " << r << " group " << g;
        }
    }
}

void expect_on_grid(const QuantResult& q, const Matrix& w, int bits) {
    const int qmax = max_code(bits);
    for (std::size_t r = 0; r < w.rows(); ++r) {
        for (std::size_t c = 0; c < w.cols(); ++c) {
            const int code = q.codes[r * w.cols() + c];
            ASSERT_LE(std::abs(code), qmax);
            const double s = q.scales(r, q.group_of[c]);
            ASSERT_EQ(q.weights(r, c), s * code / q.channel_scale[c]) << r << "," << c;
        }
    }
}

}  // namespace

TEST(Stats, MatchesBruteForceOuterProducts) {
    Rng rng(1);
    const Matrix x = testutil::random_matrix(rng, 30, 6);
    std::vector<std::vector<double>> rows;
    for (std::size_t t = 0; t < x.rows(); ++t) {
        rows.push_back(row_of(x, t));
    }
    LayerCalibStats s("l", 6);
    s.accumulate(Matrix(10, 6, std::vector<double>(x.data().begin(), x.data().begin() + 60)));
    s.accumulate(Matrix(20, 6, std::vector<double>(x.data().begin() + 60, x.data().end())));
    EXPECT_LT(numerics::max_abs_diff(s.hessian, oracle::brute_hessian(rows)), 1e-9);
    EXPECT_EQ(s.token_count, 30u);
    for (std::size_t j = 0; j < 6; ++j) {
        double m = 0.0;
        for (std::size_t t = 0; t < 30; ++t) {
            m += std::fabs(x(t, j));
        }
        EXPECT_NEAR(s.mean_abs[j], m / 30.0, 1e-12);
        EXPECT_NEAR(s.col_norms[j], std::sqrt(s.hessian(j, j)), 1e-15);
    }
    EXPECT_NO_THROW(s.validate());
}

TEST(Stats, IdenticalExamplesScaleLinearly) {
    Rng rng(2);
    const Matrix x = testutil::random_matrix(rng, 5, 4);
    LayerCalibStats one("l", 4);
    one.accumulate(x);
    LayerCalibStats three("l", 4);
    for (int i = 0; i < 3; ++i) {
        three.accumulate(x);
    }
    for (std::size_t i = 0; i < one.hessian.size(); ++i) {
        EXPECT_NEAR(three.hessian.data()[i], 3.0 * one.hessian.data()[i], 1e-12);
    }
}

TEST(Stats, WidthMismatchIsContractViolation) {
    LayerCalibStats s("l", 4);
    EXPECT_THROW(s.accumulate(Matrix(2, 3)), ContractViolation);
}

TEST(Wanda, UnitNormsPruneSmallestMagnitudes) {
    const Matrix w(1, 4, {1, -2, 3, -4});
    const std::vector<double> norms{1, 1, 1, 1};
    EXPECT_EQ(wanda_prune(w, norms), Matrix(1, 4, {0, 0, 3, -4}));
}

TEST(Wanda, ActivationNormsChangeTheChoice) {
    const Matrix w(1, 4, {1, -2, 3, -4});
    const std::vector<double> norms{10, 10, 0.1, 0.1};
    EXPECT_EQ(wanda_prune(w, norms), Matrix(1, 4, {1, -2, 0, 0}));
}

TEST(Wanda, KeepsTheBestPairOfEveryGroup) {
    Rng rng(3);
    const Matrix w = testutil::random_matrix(rng, 8, 16);
    std::vector<double> norms(16);
    for (double& v : norms) {
        v = 0.1 + rng.uniform();
    }
    const Matrix out = wanda_prune(w, norms);
    for (std::size_t r = 0; r < 8; ++r) {
        for (std::size_t g = 0; g < 16; g += 4) {
            double best = -1.0;
            std::pair<std::size_t, std::size_t> keep{0, 0};
            for (std::size_t a = 0; a < 4; ++a) {
                for (std::size_t b = a + 1; b < 4; ++b) {
                    const double s = std::fabs(w(r, g + a)) * norms[g + a] + std::fabs(w(r, g + b)) * norms[g + b];
                    if (s > best) {
                        best = s;
                        keep = {a, b};
                    }
                }
            }
            for (std::size_t k = 0; k < 4; ++k) {
                const bool kept = k == keep.first || k == keep.second;
                EXPECT_EQ(out(r, g + k), kept ? w(r, g + k) : 0.0);
            }
        }
    }
}

TEST(Wanda, WidthNotMultipleOfFourIsContractViolation) {
    const std::vector<double> norms(6, 1.0);
    EXPECT_THROW(wanda_prune(Matrix(2, 6), norms), ContractViolation);
}

TEST(InverseHessian, FactorReproducesTheInverse) {
    Rng rng(4);
    const Matrix h = testutil::spd(rng, 8);
    const auto ih = inverse_hessian_factor(h, 0.0);
    EXPECT_EQ(ih.retries, 0u);
    const Matrix hinv = oracle::naive_matmul(ih.upper.transposed(), ih.upper);
    EXPECT_LT(numerics::max_abs_diff(oracle::naive_matmul(hinv, h), Matrix::identity(8)), 1e-9);
    for (std::size_t i = 0; i < 8; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            EXPECT_EQ(ih.upper(i, j), 0.0);
        }
    }
}

TEST(InverseHessian, DeadInputsAndRetries) {
    Matrix h(3, 3);
    h(0, 0) = 2.0;
    const auto ih = inverse_hessian_factor(h, 0.01);
    EXPECT_EQ(ih.retries, 0u);
    // rank-deficient but non-zero diagonal: needs dampening
    const Matrix singular(2, 2, {1, 1, 1, 1});
    const auto r = inverse_hessian_factor(singular, 0.0);
    EXPECT_EQ(r.retries, 1u);
    EXPECT_DOUBLE_EQ(r.lambda, 1e-6);
    EXPECT_THROW(inverse_hessian_factor(Matrix(2, 2, {1, 2, 2, 1}), 0.0), numerics::DecompositionError);
}

TEST(SparseGpt, IdentityHessianIsMagnitudePruning) {
    Rng rng(5);
    const Matrix w = testutil::random_matrix(rng, 6, 16);
    const std::vector<double> ones(16, 1.0);
    for (double damp : {0.0, 0.01}) {
        auto cfg = cfg_for(Method::sparsegpt);
        cfg.dampening = damp;
        const auto r = sparsegpt_prune(w, Matrix::identity(16), cfg);
        EXPECT_EQ(r.weights, wanda_prune(w, ones));
        double pruned_mass = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            pruned_mass += r.weights.data()[i] == 0.0 ? w.data()[i] * w.data()[i] : 0.0;
        }
        EXPECT_NEAR(r.error, pruned_mass, 1e-12);
    }
}

TEST(SparseGpt, TwoColumnClosedForm) {
    const Matrix h(2, 2, {3.0, 1.2, 1.2, 2.0});
    const Matrix w(1, 2, {0.7, -1.3});
    auto cfg = cfg_for(Method::sparsegpt);
    cfg.dampening = 0.0;
    const auto r = obs_prune_mask(w, h, Matrix(1, 2, {1, 0}), cfg);
    // survivor refit: w1' = w1 + (h01 / h11) w0
    EXPECT_EQ(r.weights(0, 0), 0.0);
    EXPECT_NEAR(r.weights(0, 1), -1.3 + 1.2 / 2.0 * 0.7, 1e-14);
    const double hinv00 = 2.0 / (3.0 * 2.0 - 1.2 * 1.2);
    EXPECT_NEAR(r.error, 0.7 * 0.7 / hinv00, 1e-12);
}

TEST(SparseGpt, SingleColumnMatchesLeastSquaresRefit) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(100 + seed);
        const std::size_t d = 3 + seed % 6;
        const Matrix x = testutil::correlated_inputs(rng, 40, d);
        const Matrix h = hessian_of(x);
        const Matrix w = testutil::random_matrix(rng, 3, d);
        const std::size_t j = rng.below(d);
        Matrix mask(3, d);
        for (std::size_t r = 0; r < 3; ++r) {
            mask(r, j) = 1.0;
        }
        auto cfg = cfg_for(Method::sparsegpt);
        cfg.dampening = 0.0;
        const auto got = obs_prune_mask(w, h, mask, cfg);
        for (std::size_t r = 0; r < 3; ++r) {
            std::vector<std::size_t> fixed;
            std::vector<double> vals;
            for (std::size_t c = 0; c <= j; ++c) {
                fixed.push_back(c);
                vals.push_back(c == j ? 0.0 : w(r, c));
            }
            const auto want = oracle::refit_row(row_of(w, r), h, fixed, vals);
            for (std::size_t c = 0; c < d; ++c) {
                EXPECT_NEAR(got.weights(r, c), want[c], 1e-6 * (1.0 + std::fabs(want[c])));
            }
        }
        EXPECT_NEAR(got.error, oracle::quad_error(w, got.weights, h), 1e-8 * (1.0 + got.error));
    }
}

TEST(SparseGpt, TwoFourPatternAndNoWorseThanWanda) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(200 + seed);
        const Matrix x = testutil::correlated_inputs(rng, 64, 16);
        const auto stats = testutil::stats_of(x);
        const Matrix w = testutil::random_matrix(rng, 8, 16);
        const auto sg = sparsegpt_prune(w, stats.hessian, cfg_for(Method::sparsegpt));
        expect_two_four(sg.weights);
        const Matrix wd = wanda_prune(w, stats.col_norms);
        EXPECT_LE(sg.error, reconstruction_error(w, wd, stats.hessian)) << "seed " << seed;
    }
}

TEST(SparseGpt, BlockWidthDoesNotChangeTheResultMuch) {
    Rng rng(6);
    const Matrix x = testutil::correlated_inputs(rng, 64, 32);
    const Matrix h = hessian_of(x);
    const Matrix w = testutil::random_matrix(rng, 4, 32);
    auto cfg = cfg_for(Method::sparsegpt);
    cfg.group_size = 8;
    const auto small = sparsegpt_prune(w, h, cfg);
    cfg.group_size = 32;
    const auto full = sparsegpt_prune(w, h, cfg);
    EXPECT_LT(numerics::max_abs_diff(small.weights, full.weights), 1e-9);
}

TEST(SparseGpt, InvalidShapesAreRejected) {
    const auto cfg = cfg_for(Method::sparsegpt);
    EXPECT_THROW(sparsegpt_prune(Matrix(2, 6), Matrix::identity(6), cfg), ContractViolation);
    EXPECT_THROW(sparsegpt_prune(Matrix(2, 8), Matrix::identity(4), cfg), ContractViolation);
}

TEST(Rtn, ZerosStayZero) {
    const auto q = rtn_quantize(Matrix(3, 8), cfg_for(Method::rtn));
    EXPECT_EQ(q.weights, Matrix(3, 8));
}

TEST(Rtn, OnGridRowIsUnchanged) {
    const double s = 0.125;
    Matrix w(1, 15);
    for (int k = -7; k <= 7; ++k) {
        w(0, static_cast<std::size_t>(k + 7)) = s * k;
    }
    const auto q = rtn_quantize(w, cfg_for(Method::rtn));
    EXPECT_EQ(q.weights, w);
}

TEST(Rtn, MatchesScalarOracleGroupwise) {
    Rng rng(7);
    const Matrix w = testutil::random_matrix(rng, 4, 40);
    auto cfg = cfg_for(Method::rtn);
    cfg.group_size = 16;
    const auto q = rtn_quantize(w, cfg);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t g0 = 0; g0 < 40; g0 += 16) {
            const std::size_t g1 = std::min<std::size_t>(40, g0 + 16);
            const std::vector<double> grp(w.row(r).begin() + static_cast<long>(g0),
                                          w.row(r).begin() + static_cast<long>(g1));
            const auto want = oracle::quantize_group(grp, 4);
            for (std::size_t c = g0; c < g1; ++c) {
                EXPECT_DOUBLE_EQ(q.weights(r, c), want[c - g0]);
            }
        }
    }
    expect_on_grid(q, w, 4);
}

TEST(Rtn, ErrorOnlyWithHessian) {
    Rng rng(8);
    const Matrix w = testutil::random_matrix(rng, 2, 8);
    EXPECT_EQ(rtn_quantize(w, cfg_for(Method::rtn)).error, 0.0);
    const Matrix h = testutil::spd(rng, 8);
    const auto q = rtn_quantize(w, h, cfg_for(Method::rtn));
    EXPECT_NEAR(q.error, oracle::quad_error(w, q.weights, h), 1e-9 * (1 + q.error));
}

TEST(Gptq, ConstantRowIsExact) {
    Rng rng(9);
    const Matrix h = testutil::spd(rng, 12);
    const Matrix w(2, 12, 0.37);
    const auto q = gptq_quantize(w, h, cfg_for(Method::gptq));
    EXPECT_LT(numerics::max_abs_diff(q.weights, w), 1e-15);
    EXPECT_NEAR(q.error, 0.0, 1e-20);
}

TEST(Gptq, OutputsLieOnTheGroupGrid) {
    Rng rng(10);
    const Matrix x = testutil::correlated_inputs(rng, 64, 32);
    const Matrix h = hessian_of(x);
    const Matrix w = testutil::random_matrix(rng, 16, 32);
    for (bool desc : {false, true}) {
        for (std::size_t gs : {8u, 32u, 128u}) {
            auto cfg = cfg_for(Method::gptq);
            cfg.desc_act_order = desc;
            cfg.group_size = gs;
            const auto q = gptq_quantize(w, h, cfg);
            expect_on_grid(q, w, 4);
            std::vector<std::size_t> per_group(q.scales.cols(), 0);
            for (std::size_t g : q.group_of) {
                ++per_group[g];
            }
            for (std::size_t n : per_group) {
                EXPECT_LE(n, std::min<std::size_t>(gs, 32));
            }
        }
    }
}

TEST(Gptq, MeanErrorNotAboveRtn) {
    double gptq_sum = 0.0;
    double rtn_sum = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(300 + seed);
        const Matrix x = testutil::correlated_inputs(rng, 128, 32);
        const Matrix h = hessian_of(x);
        const Matrix w = testutil::random_matrix(rng, 16, 32);
        gptq_sum += gptq_quantize(w, h, cfg_for(Method::gptq)).error;
        rtn_sum += rtn_quantize(w, h, cfg_for(Method::rtn)).error;
    }
    EXPECT_LE(gptq_sum, rtn_sum);
}

TEST(Aws, EqualActivationsReduceToRtn) {
    Rng rng(11);
    Matrix x(20, 8);
    for (std::size_t t = 0; t < 20; ++t) {
        for (std::size_t j = 0; j < 8; ++j) {
            x(t, j) = (t + j) % 2 == 0 ? 1.5 : -1.5;
        }
    }
    const auto stats = testutil::stats_of(x);
    const Matrix w = testutil::random_matrix(rng, 4, 8);
    const auto a = aws_quantize(w, stats, cfg_for(Method::aws));
    const auto r = rtn_quantize(w, stats.hessian, cfg_for(Method::rtn));
    EXPECT_EQ(a.weights, r.weights);
    EXPECT_EQ(a.alpha, 0.0);
    for (double s : a.channel_scale) {
        EXPECT_EQ(s, 1.0);
    }
}

TEST(Aws, ReportedErrorIsRecomputableAndNotAboveRtn) {
    for (std::uint64_t seed = 0; seed < 8; ++seed) {
        Rng rng(400 + seed);
        const Matrix x = testutil::correlated_inputs(rng, 64, 32);
        const auto stats = testutil::stats_of(x);
        const Matrix w = testutil::random_matrix(rng, 16, 32);
        const auto a = aws_quantize(w, stats, cfg_for(Method::aws));
        EXPECT_NEAR(a.error, oracle::quad_error(w, a.weights, stats.hessian), 1e-9 * (1 + a.error));
        EXPECT_LE(a.error, rtn_quantize(w, stats.hessian, cfg_for(Method::rtn)).error);
        EXPECT_GE(a.alpha, 0.0);
        EXPECT_LE(a.alpha, 1.0);
        EXPECT_NEAR(a.alpha * 20.0, std::round(a.alpha * 20.0), 1e-12);
        expect_on_grid(a, w, 4);
        double log_sum = 0.0;
        for (double s : a.channel_scale) {
            log_sum += std::log(s);
        }
        EXPECT_NEAR(log_sum, 0.0, 1e-9);
    }
}

TEST(Aws, DeadChannelsKeepUnitScale) {
    Rng rng(12);
    Matrix x = testutil::correlated_inputs(rng, 32, 8);
    for (std::size_t t = 0; t < 32; ++t) {
        x(t, 3) = 0.0;
    }
    const auto stats = testutil::stats_of(x);
    const auto a = aws_quantize(testutil::random_matrix(rng, 4, 8), stats, cfg_for(Method::aws));
    EXPECT_EQ(a.channel_scale[3], 1.0);
}

TEST(Config, DefaultsJsonAndValidation) {
    EXPECT_EQ(CompressionConfig::defaults(Method::wanda).group_size, 1u);
    EXPECT_EQ(CompressionConfig::defaults(Method::gptq).group_size, 128u);
    auto c = CompressionConfig::defaults(Method::gptq);
    c.dampening = 0.05;
    c.desc_act_order = false;
    c.threads = 7;
    const auto back = CompressionConfig::from_json(c.to_json());
    EXPECT_EQ(back.to_json(), c.to_json());
    EXPECT_EQ(back.dampening, 0.05);
    EXPECT_EQ(back.threads, 1u);
    EXPECT_EQ(c.to_json().find("threads"), std::string::npos);
    EXPECT_THROW(CompressionConfig::from_json(R"({"method":"gptq","bogus":1})"), ContractViolation);
    EXPECT_THROW(CompressionConfig::from_json(R"({"method":"magic"})"), ContractViolation);
    EXPECT_EQ(CompressionConfig::from_json(R"({"method":"wanda"})").group_size, 1u);
    c.bits = 1;
    EXPECT_THROW(c.validate(), ContractViolation);
}

TEST(Methods, NamesRoundTrip) {
    for (Method m : {Method::wanda, Method::sparsegpt, Method::gptq, Method::rtn, Method::aws}) {
        EXPECT_EQ(parse_method(method_name(m)), m);
    }
    EXPECT_TRUE(is_pruning(Method::wanda));
    EXPECT_FALSE(is_pruning(Method::aws));
}
