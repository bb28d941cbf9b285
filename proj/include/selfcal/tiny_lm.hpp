#pragma once

// A small pre-norm decoder-only transformer over a byte-level vocabulary.
//
// Architecture (fixed): token + learned positional embeddings, `layers`
// blocks of {LN -> causal MHA -> residual, LN -> GELU FFN -> residual},
// final LN, output projection (tied to the token embedding by default).
// All computation is in 64-bit floats; checkpoints store 32-bit floats.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "selfcal/numerics.hpp"

namespace selfcal::lm {

using numerics::Matrix;
using Token = std::uint32_t;
using TokenSequence = std::vector<Token>;

// Byte-level tokenizer: ids 0..255 are raw bytes, then BOS, EOS, PAD.
struct Tokenizer {
    static constexpr Token kBos = 256;
    static constexpr Token kEos = 257;
    static constexpr Token kPad = 258;
    static constexpr std::size_t kNumSpecial = 3;
    static constexpr std::size_t kVocabSize = 259;

    static TokenSequence encode(std::string_view text);
    // Special ids are skipped.
    static std::string decode(std::span<const Token> tokens);
    static constexpr bool is_special(Token t) noexcept { return t >= kBos; }
    static std::string description();
    static std::uint64_t hash();
};

// Paragraphs (blank-line separated) become BOS + bytes + EOS, concatenated.
TokenSequence tokenize_corpus(std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

// First-byte token ids of a newline-separated word list (comments with '#').
std::vector<Token> stopword_first_tokens(std::string_view word_list);

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t model_dim = 128;
    std::size_t ffn_dim = 512;
    std::size_t context_len = 256;
    std::size_t vocab_size = Tokenizer::kVocabSize;
    bool tied_output = true;

    void validate() const;
    std::size_t head_dim() const { return model_dim / heads; }
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// The six compressible projections of a block.
enum class LinearKind { q, k, v, out, ffn_in, ffn_out };
inline constexpr LinearKind kAllLinearKinds[] = {LinearKind::q,   LinearKind::k,
                                                 LinearKind::v,   LinearKind::out,
                                                 LinearKind::ffn_in, LinearKind::ffn_out};
std::string_view linear_kind_name(LinearKind kind);

// Vectors are stored as 1 x n matrices. Linear weights are (out x in).
struct LayerWeights {
    Matrix ln1_g, ln1_b;
    Matrix q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b;
    Matrix ln2_g, ln2_b;
    Matrix ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;

    Matrix& weight(LinearKind kind);
    const Matrix& weight(LinearKind kind) const;
    Matrix& bias(LinearKind kind);
    const Matrix& bias(LinearKind kind) const;
};

struct ModelWeights {
    Matrix tok_emb;  // vocab x dim
    Matrix pos_emb;  // context_len x dim
    std::vector<LayerWeights> layers;
    Matrix lnf_g, lnf_b;
    Matrix out_w;  // vocab x dim; empty when tied to tok_emb

    // Visits every tensor in canonical order with its checkpoint name.
    void for_each(const std::function<void(const std::string&, Matrix&)>& fn);
    void for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const;

    // Same shapes, all zeros.
    ModelWeights zeros_like() const;
    std::size_t parameter_count() const;
};

struct ModelCheckpoint {
    ModelConfig config;
    ModelWeights weights;

    // Shapes for `config`, all zeros except layer-norm gains (1).
    static ModelCheckpoint blank(const ModelConfig& config);
    static ModelCheckpoint init_random(const ModelConfig& config, std::uint64_t seed);

    // Rounds every tensor to the nearest 32-bit float (checkpoint precision).
    void round_to_f32();
    const Matrix& output_weight() const {
        return config.tied_output ? weights.tok_emb : weights.out_w;
    }
    void validate() const;
};

// --- forward ---------------------------------------------------------------

// Building blocks, shared with the layer-input capture used by compression.
Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias);
Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b);
// Per-head causal softmax attention over (T x dim) q/k/v; returns T x dim.
Matrix causal_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads);
double gelu(double x);
Matrix embed(const ModelCheckpoint& model, std::span<const Token> tokens);
Matrix logits_from_hidden(const ModelCheckpoint& model, const Matrix& hidden);

// Causal logits for every position (T x vocab). 1 <= T <= context_len.
Matrix forward_all_logits(const ModelCheckpoint& model, std::span<const Token> tokens);
// Next-token logits after `context`.
std::vector<double> forward_logits(const ModelCheckpoint& model, std::span<const Token> context);

// Incremental decoder with a per-layer key/value cache. step(t) feeds one token
// and returns the next-token logits; identical to forward_logits on the fed
// prefix up to floating-point rounding of the attention reductions.
class Decoder {
public:
    explicit Decoder(const ModelCheckpoint& model);
    void reset();
    std::vector<double> step(Token token);
    std::size_t position() const noexcept { return position_; }
    std::size_t capacity() const noexcept { return model_->config.context_len; }

private:
    const ModelCheckpoint* model_;
    std::vector<Matrix> wt_;  // transposed linear weights, 6 per layer
    std::vector<Matrix> keys_;
    std::vector<Matrix> values_;
    std::size_t position_ = 0;
};

// --- training objective ----------------------------------------------------

struct LossAndGrads {
    double loss = 0.0;  // mean next-token NLL over non-PAD targets
    std::size_t targets = 0;
    ModelWeights grads;
};

// Sequences are scored independently (may run on `threads` workers);
// gradients are reduced in batch order.
LossAndGrads loss_and_grads(const ModelCheckpoint& model, std::span<const TokenSequence> batch,
                            std::size_t threads = 1);
double mean_loss(const ModelCheckpoint& model, std::span<const TokenSequence> batch,
                 std::size_t threads = 1);

struct TrainConfig {
    std::size_t steps = 2000;
    std::size_t batch_size = 4;
    double learning_rate = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    std::uint64_t seed = 0;
    std::size_t warmup_steps = 100;
    double grad_clip = 1.0;  // global-norm clip; <= 0 disables
    std::size_t seq_len = 0;  // 0 -> context_len
    std::size_t threads = 1;
};

class CorpusTooSmallError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using TrainCallback = std::function<void(std::size_t step, double loss)>;

// Adam with linear warmup then cosine decay. Windows are drawn uniformly from
// `corpus`. Output tensors are rounded to f32.
ModelCheckpoint train(const ModelCheckpoint& init, std::span<const Token> corpus,
                      const TrainConfig& cfg, const TrainCallback& on_step = {});

// --- evaluation ------------------------------------------------------------

struct EvalResult {
    double perplexity = 0.0;      // mean of per-example perplexities
    double next_token_acc = 0.0;  // pooled over all scored targets
    std::size_t targets = 0;
};

// Sequences longer than context_len are scored in consecutive windows of
// context_len tokens; each window's first token is context only.
EvalResult evaluate(const ModelCheckpoint& model, std::span<const TokenSequence> data,
                    std::size_t threads = 1);
double perplexity(const ModelCheckpoint& model, std::span<const TokenSequence> data,
                  std::size_t threads = 1);
// Per-example mean NLL, in input order.
std::vector<double> example_nll(const ModelCheckpoint& model, std::span<const TokenSequence> data,
                                std::size_t threads = 1);

// --- checkpoint I/O --------------------------------------------------------

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class CheckpointMagicError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

// "TLM1" | u64 LE header length | JSON header | f32 LE payload.
std::string serialize_checkpoint(const ModelCheckpoint& model);
ModelCheckpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace selfcal::lm
