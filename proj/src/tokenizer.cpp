#include <algorithm>
#include <fstream>
#include <sstream>

#include "selfcal/tiny_lm.hpp"

namespace selfcal::lm {

TokenSequence Tokenizer::encode(std::string_view text) {
    TokenSequence out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        out.push_back(static_cast<Token>(c));
    }
    return out;
}

std::string Tokenizer::decode(std::span<const Token> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
        if (!is_special(t)) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
        }
    }
    return out;
}

std::string Tokenizer::description() { return "byte-level:256+bos=256,eos=257,pad=258"; }

std::uint64_t Tokenizer::hash() { return fnv1a(description()); }

TokenSequence tokenize_corpus(std::string_view text) {
    TokenSequence out;
    out.reserve(text.size() + text.size() / 64);
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find("\n\n", pos);
        if (end == std::string_view::npos) {
            end = text.size();
        }
        std::string_view para = text.substr(pos, end - pos);
        while (!para.empty() && (para.back() == '\n' || para.back() == '\r')) {
            para.remove_suffix(1);
        }
        while (!para.empty() && para.front() == '\n') {
            para.remove_prefix(1);
        }
        if (!para.empty()) {
            out.push_back(Tokenizer::kBos);
            for (unsigned char c : para) {
                out.push_back(static_cast<Token>(c));
            }
            out.push_back(Tokenizer::kEos);
        }
        pos = end + 2;
    }
    return out;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<Token> stopword_first_tokens(std::string_view word_list) {
    std::vector<Token> ids;
    std::size_t pos = 0;
    while (pos < word_list.size()) {
        std::size_t end = word_list.find('\n', pos);
        if (end == std::string_view::npos) {
            end = word_list.size();
        }
        std::string_view line = word_list.substr(pos, end - pos);
        pos = end + 1;
        while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) {
            line.remove_prefix(1);
        }
        if (line.empty() || line.front() == '#' || line.front() == '\r') {
            continue;
        }
        ids.push_back(static_cast<Token>(static_cast<unsigned char>(line.front())));
    }
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
}

}  // namespace selfcal::lm
