#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "selfcal/tiny_lm.hpp"

namespace selfcal::calib {

using lm::Token;
using lm::TokenSequence;

struct TemperatureSchedule {
    double t_initial = 1.0;
    double t_final = 1.0;
    std::size_t n = 1;  // ramp length in generated tokens

    void validate() const;
    friend bool operator==(const TemperatureSchedule&, const TemperatureSchedule&) = default;
};

// t_i for the i-th generated token of a segment, i >= 1.
double schedule_temperature(std::size_t i, const TemperatureSchedule& s);

enum class Source { self, corpus, random_vocab };
std::string_view source_name(Source s);
Source parse_source(std::string_view name);

struct CalibrationSpec {
    Source source = Source::self;
    std::size_t num_examples = 128;
    std::size_t example_len = 2048;
    std::uint64_t seed = 0;
    TemperatureSchedule schedule;    // self only
    bool stopword_constraint = false;  // self only
    std::string corpus_path;         // corpus only, recorded for provenance

    static constexpr std::size_t kMaxExampleLen = std::size_t{1} << 20;
    void validate() const;
    friend bool operator==(const CalibrationSpec&, const CalibrationSpec&) = default;
};

struct CalibrationSet {
    CalibrationSpec spec;
    std::vector<TokenSequence> examples;

    // First n examples, same spec except num_examples.
    CalibrationSet prefix(std::size_t n) const;
    void validate() const;
};

class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Draws from softmax(logits / t) restricted to `allowed` (sorted ids) when given.
// t == 0 picks the argmax, lowest id on ties. Consumes exactly one uniform
// draw per call whatever t is, so schedules with equal values give equal streams.
Token sample_next_token(std::span<const double> logits, double t, Rng& rng,
                        const std::vector<Token>* allowed = nullptr);

// Anything that produces next-token logits one fed token at a time.
class NextTokenModel {
public:
    virtual ~NextTokenModel() = default;
    virtual void reset() = 0;
    virtual std::vector<double> step(Token token) = 0;
    virtual std::size_t capacity() const = 0;
};

class DecoderModel final : public NextTokenModel {
public:
    explicit DecoderModel(const lm::ModelCheckpoint& model) : decoder_(model) {}
    void reset() override { decoder_.reset(); }
    std::vector<double> step(Token token) override { return decoder_.step(token); }
    std::size_t capacity() const override { return decoder_.capacity(); }

private:
    lm::Decoder decoder_;
};

// Generation gives up after this many consecutive segments of length zero.
inline constexpr std::size_t kMaxEmptySegments = 16;

// Self-generation conditioned only on BOS. Segments end at EOS or when the
// segment (BOS included) fills the context; continuation segments restart
// from BOS and contribute only their generated tokens. BOS and PAD are never
// sampled. `constraint` restricts only the first token of the first segment.
TokenSequence generate_example(NextTokenModel& model, const TemperatureSchedule& s,
                               std::size_t length, Rng& rng,
                               const std::vector<Token>* constraint = nullptr);
TokenSequence generate_example(const lm::ModelCheckpoint& model, const TemperatureSchedule& s,
                               std::size_t length, Rng& rng,
                               const std::vector<Token>* constraint = nullptr);

// Bundled stop-word list mapped to first-byte token ids.
std::vector<Token> default_stopword_tokens();

// Example k always uses Rng(derive_seed(spec.seed, k)).
// self needs `model`; corpus needs `corpus` tokens.
CalibrationSet build_calibration_set(const CalibrationSpec& spec, const lm::ModelCheckpoint* model,
                                     std::span<const Token> corpus, std::size_t threads = 1);

// "TCS1" + u64 LE header length + JSON header + N*L u32 LE token ids.
std::string serialize_calibration_set(const CalibrationSet& set);
CalibrationSet deserialize_calibration_set(std::string_view bytes);
void save_calibration_set(const CalibrationSet& set, const std::filesystem::path& path);
CalibrationSet load_calibration_set(const std::filesystem::path& path);

class CalibrationFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string spec_to_json(const CalibrationSpec& spec);
CalibrationSpec spec_from_json(std::string_view text);

}  // namespace selfcal::calib
