#pragma once

#include <span>
#include <string>
#include <vector>

#include "selfcal/tiny_lm.hpp"

namespace selfcal::metrics {

using lm::Token;
using lm::TokenSequence;

struct TextMetricsReport {
    double ppl = 0.0;
    double repetitions = 0.0;
    double coverage = 0.0;
    double diversity = 0.0;
    double zipf = 0.0;

    std::string to_json() const;
    // Header plus one row: PPL,Rep.,Cov.,Div.,Zipf
    std::string to_csv() const;
};

// Fraction of positions whose token already occurred earlier in the same
// sequence, averaged over all N*L positions. Sequences must share one length.
double repetition_fraction(std::span<const TokenSequence> data);

// Distinct ids present divided by vocab_size (specials count in both).
double vocabulary_coverage(std::span<const TokenSequence> data,
                           std::size_t vocab_size = lm::Tokenizer::kVocabSize);

// Mean over n = 1..max_n of unique/total n-grams pooled over the set;
// n-grams never cross sequence boundaries.
double ngram_diversity(std::span<const TokenSequence> data, std::size_t max_n = 4);

// Negated least-squares slope of log(frequency) against log(rank).
double zipf_coefficient(std::span<const TokenSequence> data);
// Same fit on raw counts (any order; zero counts are ignored).
double zipf_from_counts(std::vector<double> counts);

TextMetricsReport analyze(const lm::ModelCheckpoint& model, std::span<const TokenSequence> data,
                          std::size_t threads = 1);

}  // namespace selfcal::metrics
