#include "selfcal/text_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <unordered_set>

#include "json.hpp"

namespace selfcal::metrics {

namespace {

void require_nonempty(std::span<const TokenSequence> data, const char* who) {
    if (data.empty()) {
        throw ContractViolation(std::string(who) + ": empty data set");
    }
}

Token max_token(std::span<const TokenSequence> data) {
    Token mx = 0;
    for (const auto& s : data) {
        for (Token t : s) {
            mx = std::max(mx, t);
        }
    }
    return mx;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

double repetition_fraction(std::span<const TokenSequence> data) {
    require_nonempty(data, "repetition_fraction");
    const std::size_t L = data.front().size();
    require(L >= 1, "repetition_fraction: sequences must be non-empty");
    std::vector<char> seen(static_cast<std::size_t>(max_token(data)) + 1, 0);
    std::size_t repeats = 0;
    for (const auto& s : data) {
        require(s.size() == L, "repetition_fraction: sequences have different lengths");
        std::fill(seen.begin(), seen.end(), 0);
        for (Token t : s) {
            repeats += seen[t] ? 1 : 0;
            seen[t] = 1;
        }
    }
    return static_cast<double>(repeats) / (static_cast<double>(data.size()) * static_cast<double>(L));
}

double vocabulary_coverage(std::span<const TokenSequence> data, std::size_t vocab_size) {
    require_nonempty(data, "vocabulary_coverage");
    require(vocab_size >= 1, "vocabulary_coverage: vocab_size must be positive");
    require(max_token(data) < vocab_size, "vocabulary_coverage: token id outside the vocabulary");
    std::vector<char> seen(vocab_size, 0);
    std::size_t distinct = 0;
    for (const auto& s : data) {
        for (Token t : s) {
            if (!seen[t]) {
                seen[t] = 1;
                ++distinct;
            }
        }
    }
    return static_cast<double>(distinct) / static_cast<double>(vocab_size);
}

double ngram_diversity(std::span<const TokenSequence> data, std::size_t max_n) {
    require_nonempty(data, "ngram_diversity");
    require(max_n >= 1, "ngram_diversity: max_n must be >= 1");
    for (const auto& s : data) {
        require(s.size() >= max_n, "ngram_diversity: sequence shorter than max_n");
    }
    // n-grams of up to four 16-bit ids pack exactly into one 64-bit key
    const bool packable = max_n <= 4 && max_token(data) < (1u << 16);
    long double sum = 0.0L;  // extended sum keeps the small hand cases correctly rounded
    for (std::size_t n = 1; n <= max_n; ++n) {
        std::size_t total = 0;
        std::size_t unique = 0;
        if (packable) {
            std::unordered_set<std::uint64_t> grams;
            for (const auto& s : data) {
                for (std::size_t i = 0; i + n <= s.size(); ++i) {
                    std::uint64_t key = 0;
                    for (std::size_t k = 0; k < n; ++k) {
                        key = (key << 16) | s[i + k];
                    }
                    grams.insert(key);
                    ++total;
                }
            }
            unique = grams.size();
        } else {
            std::set<std::vector<Token>> grams;
            for (const auto& s : data) {
                for (std::size_t i = 0; i + n <= s.size(); ++i) {
                    grams.emplace(s.begin() + static_cast<std::ptrdiff_t>(i),
                                  s.begin() + static_cast<std::ptrdiff_t>(i + n));
                    ++total;
                }
            }
            unique = grams.size();
        }
        sum += static_cast<long double>(unique) / static_cast<long double>(total);
    }
    return static_cast<double>(sum / static_cast<long double>(max_n));
}

double zipf_from_counts(std::vector<double> counts) {
    std::erase_if(counts, [](double c) { return !(c > 0.0); });
    require(counts.size() >= 2, "zipf_coefficient: need at least two distinct tokens");
    std::sort(counts.begin(), counts.end(), std::greater<>());
    const std::size_t k = counts.size();
    std::vector<double> x(k);
    std::vector<double> y(k);
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t r = 0; r < k; ++r) {
        x[r] = std::log(static_cast<double>(r + 1));
        y[r] = std::log(counts[r]);
        mx += x[r];
        my += y[r];
    }
    mx /= static_cast<double>(k);
    my /= static_cast<double>(k);
    double sxy = 0.0;
    double sxx = 0.0;
    for (std::size_t r = 0; r < k; ++r) {
        sxy += (x[r] - mx) * (y[r] - my);
        sxx += (x[r] - mx) * (x[r] - mx);
    }
    return -(sxy / sxx);
}

double zipf_coefficient(std::span<const TokenSequence> data) {
    require_nonempty(data, "zipf_coefficient");
    std::vector<double> counts(static_cast<std::size_t>(max_token(data)) + 1, 0.0);
    for (const auto& s : data) {
        for (Token t : s) {
            counts[t] += 1.0;
        }
    }
    return zipf_from_counts(std::move(counts));
}

TextMetricsReport analyze(const lm::ModelCheckpoint& model, std::span<const TokenSequence> data,
                          std::size_t threads) {
    require_nonempty(data, "analyze");
    TextMetricsReport r;
    r.ppl = lm::perplexity(model, data, threads);
    r.repetitions = repetition_fraction(data);
    r.coverage = vocabulary_coverage(data, model.config.vocab_size);
    r.diversity = ngram_diversity(data, std::min<std::size_t>(4, data.front().size()));
    r.zipf = zipf_coefficient(data);
    return r;
}

std::string TextMetricsReport::to_json() const {
    const nlohmann::json j = {{"ppl", ppl},
                              {"repetitions", repetitions},
                              {"coverage", coverage},
                              {"diversity", diversity},
                              {"zipf", zipf}};
    return j.dump(2) + "\n";
}

std::string TextMetricsReport::to_csv() const {
    return "PPL,Rep.,Cov.,Div.,Zipf\n" + fmt(ppl) + "," + fmt(repetitions) + "," + fmt(coverage) +
           "," + fmt(diversity) + "," + fmt(zipf) + "\n";
}

}  // namespace selfcal::metrics
