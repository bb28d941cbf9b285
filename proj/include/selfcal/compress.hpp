#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "selfcal/calibration.hpp"
#include "selfcal/numerics.hpp"
#include "selfcal/tiny_lm.hpp"

namespace selfcal::compress {

using numerics::Matrix;

// Second-moment statistics of one linear layer's inputs.
struct LayerCalibStats {
    std::string layer_id;
    Matrix hessian;                 // sum over tokens of x x^T, undamped
    std::vector<double> col_norms;  // sqrt(H_jj)
    std::vector<double> mean_abs;   // mean |x_j|
    std::size_t token_count = 0;

    explicit LayerCalibStats(std::string id = {}, std::size_t d_in = 0);
    std::size_t dim() const noexcept { return hessian.rows(); }
    // Adds the rows of x (tokens x d_in). col_norms is refreshed.
    void accumulate(const Matrix& x);
    void validate() const;
};

enum class Method { wanda, sparsegpt, gptq, rtn, aws };
std::string_view method_name(Method m);
Method parse_method(std::string_view name);
bool is_pruning(Method m);

struct CompressionConfig {
    Method method = Method::sparsegpt;
    std::size_t prune_n = 2;  // zeros per group of prune_m
    std::size_t prune_m = 4;
    int bits = 4;
    std::size_t group_size = 128;
    double dampening = 0.01;
    bool symmetric = true;
    bool desc_act_order = true;
    bool true_sequential = true;
    std::size_t threads = 1;  // never affects results

    // Table defaults for `m` (wanda uses group size 1).
    static CompressionConfig defaults(Method m);
    void validate() const;
    std::string to_json() const;  // excludes threads
    // Keys absent from the text keep the defaults for the named method.
    static CompressionConfig from_json(std::string_view text);
};

// Damped H plus the upper Cholesky factor U of its inverse (H^-1 = U^T U).
struct InverseHessian {
    Matrix upper;
    double lambda = 0.0;  // dampening actually applied
    std::size_t retries = 0;
};
// Adds lambda = dampening * mean(diag H) and factors; on failure multiplies
// the dampening by 10, up to three retries. Zero-diagonal (dead) inputs get
// H_jj = 1. Throws numerics::DecompositionError when all attempts fail.
InverseHessian inverse_hessian_factor(const Matrix& h, double dampening);

// trace((W - W') H (W - W')^T): squared output error on the calibration inputs.
double reconstruction_error(const Matrix& w, const Matrix& w_hat, const Matrix& h);

// Zeroes the prune_n lowest |w_ij| * col_norms_j entries in every row and
// every contiguous group of prune_m inputs; ties prune the lower column first.
Matrix wanda_prune(const Matrix& w, std::span<const double> col_norms, std::size_t prune_n = 2,
                   std::size_t prune_m = 4);

struct PruneResult {
    Matrix weights;
    double error = 0.0;  // reconstruction_error against the undamped H
};

PruneResult sparsegpt_prune(const Matrix& w, const Matrix& h, const CompressionConfig& cfg);

// The same left-to-right OBS sweep as sparsegpt_prune, but with a fixed set
// of pruned positions (mask(i, j) != 0 means prune w_ij).
PruneResult obs_prune_mask(const Matrix& w, const Matrix& h, const Matrix& mask,
                           const CompressionConfig& cfg);

struct QuantResult {
    Matrix weights;                    // dequantized, d_out x d_in
    Matrix scales;                     // d_out x n_groups
    std::vector<std::int8_t> codes;    // row-major d_out x d_in, in [-qmax, qmax]
    std::vector<std::size_t> group_of;  // group index of each original column
    std::vector<double> channel_scale;  // aws only: per input channel, else all 1
    double alpha = 0.0;                // aws only
    double error = 0.0;
};

int max_code(int bits);  // 2^(bits-1) - 1

QuantResult gptq_quantize(const Matrix& w, const Matrix& h, const CompressionConfig& cfg);
QuantResult rtn_quantize(const Matrix& w, const CompressionConfig& cfg);
// The error reported for rtn is zero unless `h` is supplied.
QuantResult rtn_quantize(const Matrix& w, const Matrix& h, const CompressionConfig& cfg);
// Scales input channel j by mean_abs_j^alpha (geometric mean 1), rounds with
// rtn, undoes the scale, and keeps the alpha in {0, 0.05, ..., 1} with the
// lowest reconstruction error.
QuantResult aws_quantize(const Matrix& w, const LayerCalibStats& stats, const CompressionConfig& cfg);

struct LayerReport {
    std::string layer;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t tokens = 0;
    double recon_error = 0.0;
    double sparsity = 0.0;
    int bits = 32;
    double alpha = -1.0;  // aws only
    double seconds = 0.0;  // wall time, kept out of deterministic outputs
};

struct CompressionReport {
    std::string method;
    std::string config_json;
    std::string config_hash;
    std::string model_hash;
    std::string calib_hash;
    std::vector<LayerReport> layers;
    std::size_t prunable_weights = 0;
    std::size_t zero_weights = 0;

    double global_sparsity() const;
    std::string to_json() const;  // deterministic fields only
    std::string to_csv() const;   // layer,method,recon_error,sparsity,bits
    std::string timing_json() const;
};

// Target linear layers of block l, in compression order.
std::vector<lm::LinearKind> target_kinds();
std::string layer_name(std::size_t block, lm::LinearKind kind);

// Stats for every target layer of the unmodified model (no compression).
std::vector<LayerCalibStats> capture_layer_inputs(const lm::ModelCheckpoint& model,
                                                  const calib::CalibrationSet& calib,
                                                  std::size_t threads = 1);

struct CompressionOutput {
    lm::ModelCheckpoint model;
    CompressionReport report;
};

// Compresses every target linear layer. With true_sequential, inputs of each
// layer are computed through the already compressed earlier layers.
// Examples longer than the context are fed as consecutive context-length windows.
CompressionOutput compress_model(const lm::ModelCheckpoint& model, const calib::CalibrationSet& calib,
                                 const CompressionConfig& cfg);

}  // namespace selfcal::compress
