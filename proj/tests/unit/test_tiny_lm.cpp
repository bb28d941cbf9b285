#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "../oracles/oracles.hpp"
#include "helpers.hpp"
#include "json.hpp"
#include "selfcal/tiny_lm.hpp"

using namespace selfcal;
using lm::Tokenizer;
using numerics::Matrix;

namespace {

// 0-layer untied model whose output always prefers token k by a margin of `margin`.
lm::ModelCheckpoint forcing_model(lm::Token k, double margin = 100.0) {
    lm::ModelConfig c;
    c.layers = 0;
    c.heads = 1;
    c.model_dim = 4;
    c.ffn_dim = 4;
    c.context_len = 32;
    c.tied_output = false;
    auto m = lm::ModelCheckpoint::blank(c);
    m.weights.lnf_b(0, 0) = 1.0;
    m.weights.out_w(k, 0) = margin;
    return m;
}

std::string rebuild_with_header(const std::string& bytes, const std::function<void(nlohmann::json&)>& edit) {
    const std::uint64_t len = [&] {
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) {
            v = (v << 8) | static_cast<unsigned char>(bytes[4 + static_cast<std::size_t>(i)]);
        }
        return v;
    }();
    auto header = nlohmann::json::parse(bytes.substr(12, len));
    edit(header);
    const std::string text = header.dump();
    std::string out = bytes.substr(0, 4);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((text.size() >> (8 * i)) & 0xFF));
    }
    return out + text + bytes.substr(12 + len);
}

}  // namespace

TEST(Tokenizer, EmptyRoundTrip) {
    EXPECT_TRUE(Tokenizer::encode("").empty());
    EXPECT_EQ(Tokenizer::decode({}), "");
}

TEST(Tokenizer, BytesMapToThemselves) {
    const auto ids = Tokenizer::encode("ab");
    EXPECT_EQ(ids, (lm::TokenSequence{97, 98}));
    EXPECT_EQ(Tokenizer::decode(ids), "ab");
}

TEST(Tokenizer, RandomBlobRoundTrip) {
    Rng rng(11);
    std::string blob(1024, '\0');
    for (char& c : blob) {
        c = static_cast<char>(rng.below(256));
    }
    EXPECT_EQ(Tokenizer::decode(Tokenizer::encode(blob)), blob);
}

TEST(Tokenizer, DecodeSkipsSpecials) {
    const lm::TokenSequence s{Tokenizer::kBos, 104, 105, Tokenizer::kEos, Tokenizer::kPad};
    EXPECT_EQ(Tokenizer::decode(s), "hi");
}

TEST(Tokenizer, CorpusParagraphsAreWrapped) {
    const auto s = lm::tokenize_corpus("ab\n\ncd\n");
    ASSERT_GE(s.size(), 8u);
    EXPECT_EQ(s.front(), Tokenizer::kBos);
    EXPECT_EQ(s[3], Tokenizer::kEos);
    EXPECT_EQ(s[4], Tokenizer::kBos);
}

TEST(Forward, HandBuiltModelPredictsForcedToken) {
    const auto m = forcing_model(42);
    const lm::TokenSequence ctx{1, 2, 3};
    const auto u = lm::forward_logits(m, ctx);
    EXPECT_EQ(std::max_element(u.begin(), u.end()) - u.begin(), 42);
    EXPECT_EQ(lm::forward_logits(m, ctx), u);
}

TEST(Forward, MatchesReferenceImplementation) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto m = testutil::random_model(seed, testutil::tiny_config(2, 16, 12));
        Rng rng(seed);
        const auto tokens = testutil::random_tokens(rng, 12);
        const Matrix got = lm::forward_all_logits(m, tokens);
        const auto want = oracle::forward(m, tokens);
        double worst = 0.0;
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            for (std::size_t v = 0; v < want[t].size(); ++v) {
                worst = std::max(worst, std::fabs(got(t, v) - want[t][v]));
            }
        }
        EXPECT_LT(worst, 1e-10) << "seed " << seed;
    }
}

TEST(Forward, UntiedOutputMatchesReference) {
    auto c = testutil::tiny_config(1, 8, 8);
    c.tied_output = false;
    const auto m = testutil::random_model(7, c);
    const lm::TokenSequence tokens{256, 5, 9, 200};
    const auto got = lm::forward_logits(m, tokens);
    const auto want = oracle::forward(m, tokens).back();
    for (std::size_t v = 0; v < got.size(); ++v) {
        EXPECT_NEAR(got[v], want[v], 1e-10);
    }
}

TEST(Forward, ContextTooLongIsContractViolation) {
    const auto m = testutil::random_model(1, testutil::tiny_config(1, 8, 4));
    EXPECT_THROW(lm::forward_logits(m, lm::TokenSequence(5, 1)), ContractViolation);
    EXPECT_THROW(lm::forward_logits(m, lm::TokenSequence{}), ContractViolation);
}

TEST(Decoder, IncrementalStepsMatchFullForward) {
    const auto m = testutil::random_model(5, testutil::tiny_config(2, 16, 10));
    Rng rng(5);
    const auto tokens = testutil::random_tokens(rng, 10);
    lm::Decoder dec(m);
    const Matrix full = lm::forward_all_logits(m, tokens);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        const auto u = dec.step(tokens[t]);
        for (std::size_t v = 0; v < u.size(); ++v) {
            ASSERT_NEAR(u[v], full(t, v), 1e-11);
        }
    }
    EXPECT_THROW(dec.step(1), ContractViolation);
    dec.reset();
    EXPECT_EQ(dec.position(), 0u);
}

TEST(Loss, UniformModelGivesLogVocab) {
    const auto m = lm::ModelCheckpoint::blank(testutil::tiny_config());
    const std::vector<lm::TokenSequence> batch{{256, 1, 2, 3, 4}};
    EXPECT_NEAR(lm::mean_loss(m, batch), std::log(259.0), 1e-12);
}

TEST(Loss, DuplicatingTheBatchKeepsTheLoss) {
    const auto m = testutil::random_model(3, testutil::tiny_config());
    Rng rng(3);
    std::vector<lm::TokenSequence> batch{testutil::random_tokens(rng, 9), testutil::random_tokens(rng, 9)};
    const double once = lm::loss_and_grads(m, batch).loss;
    auto twice = batch;
    twice.insert(twice.end(), batch.begin(), batch.end());
    EXPECT_NEAR(lm::loss_and_grads(m, twice).loss, once, 1e-13);
}

TEST(Loss, PadTargetsAreIgnored) {
    const auto m = testutil::random_model(4, testutil::tiny_config());
    const std::vector<lm::TokenSequence> plain{{256, 10, 11, 12}};
    const std::vector<lm::TokenSequence> padded{{256, 10, 11, 12, Tokenizer::kPad}};
    EXPECT_EQ(lm::loss_and_grads(m, padded).targets, 3u);
    EXPECT_NEAR(lm::mean_loss(m, padded), lm::mean_loss(m, plain), 1e-13);
}

TEST(Gradients, MatchCentralDifferences) {
    for (bool tied : {true, false}) {
        auto c = testutil::tiny_config(1, 16, 12);
        c.tied_output = tied;
        const auto m = testutil::random_model(21, c);
        Rng rng(21);
        const std::vector<oracle::Seq> batch{testutil::random_tokens(rng, 12), testutil::random_tokens(rng, 7)};
        const auto check = oracle::gradient_check(m, batch, 120, 99);
        EXPECT_EQ(check.checked, 120u);
        EXPECT_LT(check.worst, 1e-4) << (tied ? "tied" : "untied");
    }
}

TEST(Gradients, ThreadCountDoesNotChangeResults) {
    const auto m = testutil::random_model(8, testutil::tiny_config());
    Rng rng(8);
    std::vector<lm::TokenSequence> batch;
    for (int i = 0; i < 5; ++i) {
        batch.push_back(testutil::random_tokens(rng, 10));
    }
    const auto a = lm::loss_and_grads(m, batch, 1);
    const auto b = lm::loss_and_grads(m, batch, 3);
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.grads.tok_emb, b.grads.tok_emb);
    EXPECT_EQ(a.grads.layers[0].q_w, b.grads.layers[0].q_w);
}

TEST(Train, ZeroStepsReturnsInput) {
    const auto m = testutil::random_model(1, testutil::tiny_config());
    lm::TrainConfig tc;
    tc.steps = 0;
    const lm::TokenSequence corpus(100, 5);
    const auto out = lm::train(m, corpus, tc);
    EXPECT_EQ(out.weights.tok_emb, m.weights.tok_emb);
    EXPECT_EQ(out.weights.layers[0].ffn_in_w, m.weights.layers[0].ffn_in_w);
}

TEST(Train, FixedSeedIsBitReproducibleAndLowersLoss) {
    const auto m = lm::ModelCheckpoint::init_random(testutil::tiny_config(1, 16, 16), 3);
    const auto corpus = lm::tokenize_corpus(
        "the cat sat on the mat\n\nthe dog sat on the log\n\nthe cat and the dog sat\n\n"
        "a cat is on a mat and a dog is on a log\n");
    lm::TrainConfig tc;
    tc.steps = 60;
    tc.seed = 4;
    tc.learning_rate = 1e-2;
    tc.warmup_steps = 5;
    const auto a = lm::train(m, corpus, tc);
    tc.threads = 2;
    const auto b = lm::train(m, corpus, tc);
    EXPECT_EQ(lm::serialize_checkpoint(a), lm::serialize_checkpoint(b));
    const std::vector<lm::TokenSequence> data{corpus};
    EXPECT_LT(lm::perplexity(a, data), lm::perplexity(m, data));
}

TEST(Train, CorpusTooSmallThrows) {
    const auto m = lm::ModelCheckpoint::init_random(testutil::tiny_config(1, 8, 16), 3);
    lm::TrainConfig tc;
    tc.steps = 1;
    EXPECT_THROW(lm::train(m, lm::TokenSequence(5, 1), tc), lm::CorpusTooSmallError);
}

TEST(Perplexity, UniformModelGivesVocabSize) {
    const auto m = lm::ModelCheckpoint::blank(testutil::tiny_config());
    const std::vector<lm::TokenSequence> data{{256, 1, 2, 3}, {256, 9, 9}};
    EXPECT_NEAR(lm::perplexity(m, data), 259.0, 1e-9);
}

TEST(Perplexity, PerfectModelGivesOne) {
    const auto m = forcing_model(7);
    const std::vector<lm::TokenSequence> data{lm::TokenSequence(20, 7)};
    const auto r = lm::evaluate(m, data);
    EXPECT_NEAR(r.perplexity, 1.0, 1e-12);
    EXPECT_EQ(r.next_token_acc, 1.0);
    EXPECT_EQ(r.targets, 19u);
}

TEST(Perplexity, MatchesPerTokenOracleIncludingWindows) {
    const auto m = testutil::random_model(6, testutil::tiny_config(1, 16, 8));
    Rng rng(6);
    const std::vector<oracle::Seq> data{testutil::random_tokens(rng, 8), testutil::random_tokens(rng, 21),
                                        testutil::random_tokens(rng, 3)};
    EXPECT_NEAR(lm::perplexity(m, data), oracle::perplexity(m, data), 1e-9);
    EXPECT_EQ(lm::perplexity(m, data, 1), lm::perplexity(m, data, 3));
}

TEST(Perplexity, EmptyDataIsContractViolation) {
    const auto m = lm::ModelCheckpoint::blank(testutil::tiny_config());
    EXPECT_THROW(lm::perplexity(m, std::vector<lm::TokenSequence>{}), ContractViolation);
}

TEST(Checkpoint, RoundTripKeepsLogitsBitIdentical) {
    auto m = testutil::random_model(9, testutil::tiny_config(2, 16, 8));
    m.round_to_f32();
    const auto path = std::filesystem::temp_directory_path() / "selfcal_ckpt_test.tlm";
    lm::save_checkpoint(m, path);
    const auto back = lm::load_checkpoint(path);
    std::filesystem::remove(path);
    const lm::TokenSequence ctx{256, 3, 4, 5};
    EXPECT_EQ(lm::forward_logits(back, ctx), lm::forward_logits(m, ctx));
    EXPECT_EQ(back.config, m.config);
}

TEST(Checkpoint, CorruptedMagicIsMagicError) {
    std::string bytes = lm::serialize_checkpoint(lm::ModelCheckpoint::blank(testutil::tiny_config()));
    bytes[0] = 'X';
    EXPECT_THROW(lm::deserialize_checkpoint(bytes), lm::CheckpointMagicError);
}

TEST(Checkpoint, WrongDeclaredShapeIsShapeError) {
    const std::string bytes = lm::serialize_checkpoint(lm::ModelCheckpoint::blank(testutil::tiny_config()));
    const auto bad_shape = rebuild_with_header(bytes, [](nlohmann::json& h) {
        h["tensors"][0]["shape"] = {1, 1};
    });
    EXPECT_THROW(lm::deserialize_checkpoint(bad_shape), lm::CheckpointShapeError);
    const auto bad_len = rebuild_with_header(bytes, [](nlohmann::json& h) {
        h["payload_bytes"] = h["payload_bytes"].get<std::size_t>() + 4;
    });
    EXPECT_THROW(lm::deserialize_checkpoint(bad_len), lm::CheckpointShapeError);
}

TEST(Checkpoint, TruncatedFileIsTruncatedError) {
    const std::string bytes = lm::serialize_checkpoint(lm::ModelCheckpoint::blank(testutil::tiny_config()));
    EXPECT_THROW(lm::deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)),
                 lm::CheckpointTruncatedError);
    EXPECT_THROW(lm::deserialize_checkpoint(bytes.substr(0, 8)), lm::CheckpointTruncatedError);
}

TEST(Model, DefaultSizeParameterCount) {
    const auto m = lm::ModelCheckpoint::blank(lm::ModelConfig{});
    EXPECT_EQ(m.weights.parameter_count(), 462720u);
}
