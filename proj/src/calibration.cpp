#include "selfcal/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "binio.hpp"
#include "json.hpp"
#include "selfcal/numerics.hpp"
#include "stopwords.hpp"

namespace selfcal::calib {

using nlohmann::json;
using lm::Tokenizer;

void TemperatureSchedule::validate() const {
    require(std::isfinite(t_initial) && std::isfinite(t_final) && t_initial >= 0.0 &&
                t_final >= 0.0,
            "TemperatureSchedule: temperatures must be finite and >= 0");
    require(n >= 1, "TemperatureSchedule: ramp length must be >= 1");
}

double schedule_temperature(std::size_t i, const TemperatureSchedule& s) {
    require(i >= 1, "schedule_temperature: step index starts at 1");
    s.validate();
    if (i > s.n) {
        return s.t_final;
    }
    return s.t_initial +
           (static_cast<double>(i) / static_cast<double>(s.n)) * (s.t_final - s.t_initial);
}

std::string_view source_name(Source s) {
    switch (s) {
        case Source::self: return "self";
        case Source::corpus: return "corpus";
        case Source::random_vocab: return "random_vocab";
    }
    return "?";
}

Source parse_source(std::string_view name) {
    for (Source s : {Source::self, Source::corpus, Source::random_vocab}) {
        if (source_name(s) == name) {
            return s;
        }
    }
    throw ContractViolation("unknown calibration source '" + std::string(name) + "'");
}

void CalibrationSpec::validate() const {
    require(num_examples >= 1, "CalibrationSpec: num_examples must be >= 1");
    require(example_len >= 1 && example_len <= kMaxExampleLen,
            "CalibrationSpec: example_len out of range");
    schedule.validate();
}

CalibrationSet CalibrationSet::prefix(std::size_t n) const {
    require(n >= 1 && n <= examples.size(), "CalibrationSet::prefix: size exceeds the set");
    CalibrationSet out;
    out.spec = spec;
    out.spec.num_examples = n;
    out.examples.assign(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(n));
    return out;
}

void CalibrationSet::validate() const {
    spec.validate();
    require(examples.size() == spec.num_examples, "CalibrationSet: wrong number of examples");
    for (const auto& e : examples) {
        require(e.size() == spec.example_len, "CalibrationSet: example length differs from spec");
        for (Token t : e) {
            require(t < Tokenizer::kVocabSize && t != Tokenizer::kPad,
                    "CalibrationSet: invalid token id");
        }
    }
}

Token sample_next_token(std::span<const double> logits, double t, Rng& rng,
                        const std::vector<Token>* allowed) {
    require(!logits.empty(), "sample_next_token: empty logits");
    const double u = rng.uniform();
    std::vector<double> restricted;
    if (allowed != nullptr) {
        require(!allowed->empty(), "sample_next_token: allowed set is empty");
        restricted.reserve(allowed->size());
        for (Token id : *allowed) {
            require(id < logits.size(), "sample_next_token: allowed id outside the vocabulary");
            restricted.push_back(logits[id]);
        }
        logits = restricted;
    }
    require(std::any_of(logits.begin(), logits.end(), [](double v) { return v > -INFINITY; }),
            "sample_next_token: no allowed token has finite probability");
    auto pick = [&](std::size_t k) {
        return allowed != nullptr ? (*allowed)[k] : static_cast<Token>(k);
    };
    const std::vector<double> p = numerics::softmax_with_temperature(logits, t);
    double acc = 0.0;
    std::size_t last = p.size();
    for (std::size_t k = 0; k < p.size(); ++k) {
        if (p[k] <= 0.0) {
            continue;
        }
        acc += p[k];
        last = k;
        if (u < acc) {
            return pick(k);
        }
    }
    require(last < p.size(), "sample_next_token: no token has positive probability");
    return pick(last);  // u landed in the rounding gap above the cumulative sum
}

namespace {

// Everything except BOS and PAD: the alphabet of generated tokens.
const std::vector<Token>& generation_alphabet() {
    static const std::vector<Token> ids = [] {
        std::vector<Token> v;
        for (Token t = 0; t < Tokenizer::kVocabSize; ++t) {
            if (t != Tokenizer::kBos && t != Tokenizer::kPad) {
                v.push_back(t);
            }
        }
        return v;
    }();
    return ids;
}

}  // namespace

TokenSequence generate_example(NextTokenModel& model, const TemperatureSchedule& s,
                               std::size_t length, Rng& rng, const std::vector<Token>* constraint) {
    s.validate();
    require(length >= 1 && length <= CalibrationSpec::kMaxExampleLen,
            "generate_example: length out of range");
    require(model.capacity() >= 2, "generate_example: model context too short");
    if (constraint != nullptr) {
        require(!constraint->empty() && std::is_sorted(constraint->begin(), constraint->end()),
                "generate_example: constraint must be a sorted non-empty id set");
    }
    TokenSequence out;
    out.reserve(length);
    out.push_back(Tokenizer::kBos);
    bool first_segment = true;
    std::size_t empty_run = 0;
    while (out.size() < length) {
        model.reset();
        std::vector<double> logits = model.step(Tokenizer::kBos);
        const std::size_t fed = 1;  // BOS
        std::size_t generated = 0;
        for (std::size_t i = 1; out.size() < length; ++i) {
            const bool constrained = first_segment && i == 1 && constraint != nullptr;
            const Token tok = sample_next_token(logits, schedule_temperature(i, s), rng,
                                                constrained ? constraint : &generation_alphabet());
            if (tok == Tokenizer::kEos) {
                break;
            }
            out.push_back(tok);
            ++generated;
            if (fed + generated >= model.capacity() || out.size() >= length) {
                break;
            }
            logits = model.step(tok);
        }
        first_segment = false;
        if (generated == 0) {
            if (++empty_run >= kMaxEmptySegments) {
                throw GenerationError("generate_example: " + std::to_string(kMaxEmptySegments) +
                                      " consecutive empty segments");
            }
        } else {
            empty_run = 0;
        }
    }
    return out;
}

TokenSequence generate_example(const lm::ModelCheckpoint& model, const TemperatureSchedule& s,
                               std::size_t length, Rng& rng, const std::vector<Token>* constraint) {
    DecoderModel dm(model);
    return generate_example(dm, s, length, rng, constraint);
}

std::vector<Token> default_stopword_tokens() {
    return lm::stopword_first_tokens(detail::kStopwordList);
}

CalibrationSet build_calibration_set(const CalibrationSpec& spec, const lm::ModelCheckpoint* model,
                                     std::span<const Token> corpus, std::size_t threads) {
    spec.validate();
    CalibrationSet set;
    set.spec = spec;
    set.examples.resize(spec.num_examples);
    const std::size_t L = spec.example_len;

    switch (spec.source) {
        case Source::self: {
            require(model != nullptr, "build_calibration_set: self source needs a model");
            model->validate();
            const std::vector<Token> stop = default_stopword_tokens();
            const std::vector<Token>* constraint = spec.stopword_constraint ? &stop : nullptr;
            parallel_for(spec.num_examples, threads, [&](std::size_t k) {
                Rng rng(derive_seed(spec.seed, k));
                set.examples[k] = generate_example(*model, spec.schedule, L, rng, constraint);
            });
            break;
        }
        case Source::corpus: {
            if (corpus.size() < L) {
                throw ContractViolation("build_calibration_set: corpus has " +
                                        std::to_string(corpus.size()) + " tokens, fewer than L = " +
                                        std::to_string(L));
            }
            for (std::size_t k = 0; k < spec.num_examples; ++k) {
                Rng rng(derive_seed(spec.seed, k));
                const std::size_t start = rng.below(corpus.size() - L + 1);
                set.examples[k].assign(corpus.begin() + static_cast<std::ptrdiff_t>(start),
                                       corpus.begin() + static_cast<std::ptrdiff_t>(start + L));
            }
            break;
        }
        case Source::random_vocab: {
            for (std::size_t k = 0; k < spec.num_examples; ++k) {
                Rng rng(derive_seed(spec.seed, k));
                auto& e = set.examples[k];
                e.resize(L);
                for (auto& t : e) {
                    t = static_cast<Token>(rng.below(Tokenizer::kBos));
                }
            }
            break;
        }
    }
    return set;
}

// --- serialization ---------------------------------------------------------

namespace {

constexpr std::string_view kMagic = "TCS1";

json spec_json(const CalibrationSpec& s) {
    return {{"source", source_name(s.source)},
            {"num_examples", s.num_examples},
            {"example_len", s.example_len},
            {"seed", s.seed},
            {"schedule", {{"t_initial", s.schedule.t_initial},
                          {"t_final", s.schedule.t_final},
                          {"n", s.schedule.n}}},
            {"stopword_constraint", s.stopword_constraint},
            {"corpus_path", s.corpus_path}};
}

CalibrationSpec spec_from(const json& j) {
    CalibrationSpec s;
    s.source = parse_source(j.at("source").get<std::string>());
    s.num_examples = j.at("num_examples").get<std::size_t>();
    s.example_len = j.at("example_len").get<std::size_t>();
    s.seed = j.at("seed").get<std::uint64_t>();
    const json& sc = j.at("schedule");
    s.schedule.t_initial = sc.at("t_initial").get<double>();
    s.schedule.t_final = sc.at("t_final").get<double>();
    s.schedule.n = sc.at("n").get<std::size_t>();
    s.stopword_constraint = j.value("stopword_constraint", false);
    s.corpus_path = j.value("corpus_path", std::string());
    return s;
}

}  // namespace

std::string spec_to_json(const CalibrationSpec& spec) { return spec_json(spec).dump(); }

CalibrationSpec spec_from_json(std::string_view text) {
    try {
        return spec_from(json::parse(text));
    } catch (const json::exception& e) {
        throw ContractViolation(std::string("calibration spec: ") + e.what());
    }
}

std::string serialize_calibration_set(const CalibrationSet& set) {
    set.validate();
    const json header = {{"spec", spec_json(set.spec)},
                         {"tokenizer", {{"description", Tokenizer::description()},
                                        {"hash", hex64(Tokenizer::hash())}}},
                         {"dtype", "u32"},
                         {"creator", "selfcal"}};
    const std::string text = header.dump();
    std::string out(kMagic);
    selfcal::detail::put_le<std::uint64_t>(out, text.size());
    out += text;
    out.reserve(out.size() + 4 * set.spec.num_examples * set.spec.example_len);
    for (const auto& e : set.examples) {
        for (Token t : e) {
            selfcal::detail::put_le<std::uint32_t>(out, t);
        }
    }
    return out;
}

CalibrationSet deserialize_calibration_set(std::string_view bytes) {
    if (bytes.size() < kMagic.size() + 8 || bytes.substr(0, kMagic.size()) != kMagic) {
        throw CalibrationFormatError("calibration file: bad magic or truncated");
    }
    const auto header_len = selfcal::detail::get_le<std::uint64_t>(bytes, kMagic.size());
    const std::size_t start = kMagic.size() + 8;
    if (bytes.size() - start < header_len) {
        throw CalibrationFormatError("calibration file: truncated header");
    }
    CalibrationSet set;
    try {
        const json header = json::parse(bytes.substr(start, header_len));
        if (header.at("tokenizer").at("hash").get<std::string>() != hex64(Tokenizer::hash())) {
            throw CalibrationFormatError("calibration file: tokenizer mismatch");
        }
        set.spec = spec_from(header.at("spec"));
    } catch (const json::exception& e) {
        throw CalibrationFormatError(std::string("calibration file: bad header: ") + e.what());
    }
    const std::string_view payload = bytes.substr(start + header_len);
    const std::size_t N = set.spec.num_examples;
    const std::size_t L = set.spec.example_len;
    if (L == 0 || N == 0 || payload.size() / 4 / L != N || payload.size() != 4 * N * L) {
        throw CalibrationFormatError("calibration file: payload size does not match N*L");
    }
    set.examples.assign(N, TokenSequence(L));
    for (std::size_t k = 0; k < N; ++k) {
        for (std::size_t i = 0; i < L; ++i) {
            set.examples[k][i] = selfcal::detail::get_le<std::uint32_t>(payload, 4 * (k * L + i));
        }
    }
    try {
        set.validate();
    } catch (const ContractViolation& e) {
        throw CalibrationFormatError(std::string("calibration file: ") + e.what());
    }
    return set;
}

void save_calibration_set(const CalibrationSet& set, const std::filesystem::path& path) {
    const std::string bytes = serialize_calibration_set(set);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CalibrationSet load_calibration_set(const std::filesystem::path& path) {
    return deserialize_calibration_set(lm::read_text_file(path));
}

}  // namespace selfcal::calib
