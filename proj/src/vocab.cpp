#include "cptlab/vocab.hpp"

#include <cctype>

namespace cptlab {

namespace {

bool is_split_punct(char c) {
    switch (c) {
        case '.':
        case ',':
        case '?':
        case ':':
        case '\'':
        case '(':
        case ')':
        case ';':
            return true;
        default:
            return false;
    }
}

}  // namespace

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            out.push_back(cur);
            cur.clear();
        }
    };
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            flush();
        } else if (is_split_punct(c)) {
            flush();
            out.emplace_back(1, c);
        } else {
            cur.push_back(c);
        }
    }
    flush();
    return out;
}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
    if (words_.empty() || words_[0] != kEos) {
        throw ConfigError("vocabulary must start with <eos>");
    }
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second) {
            throw ConfigError("duplicate vocabulary entry: " + words_[i]);
        }
    }
}

TokenId Vocab::id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    if (it == index_.end()) {
        throw ConfigError("word not in vocabulary: '" + std::string(word) + "'");
    }
    return it->second;
}

bool Vocab::contains(std::string_view word) const { return index_.count(std::string(word)) != 0; }

const std::string& Vocab::word(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
        throw ConfigError("token id out of range");
    }
    return words_[static_cast<std::size_t>(id)];
}

Tokens Vocab::encode(const std::vector<std::string>& words) const {
    Tokens out;
    out.reserve(words.size());
    for (const std::string& w : words) {
        out.push_back(id(w));
    }
    return out;
}

std::string Vocab::decode(const Tokens& tokens) const {
    std::string out;
    for (TokenId t : tokens) {
        if (t == eos()) {
            continue;
        }
        if (!out.empty()) {
            out.push_back(' ');
        }
        out += word(t);
    }
    return out;
}

}  // namespace cptlab
