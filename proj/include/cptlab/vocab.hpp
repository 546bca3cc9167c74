#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cptlab/common.hpp"

namespace cptlab {

/// Splits on whitespace and emits the punctuation characters . , ? : ' ( ) ;
/// as tokens of their own. Case is preserved.
std::vector<std::string> split_words(std::string_view text);

/// Closed word-level vocabulary. Unknown words are an error, never mapped.
class Vocab {
public:
    static constexpr std::string_view kEos = "<eos>";

    Vocab() = default;
    /// Word list in id order; id 0 must be <eos>.
    explicit Vocab(std::vector<std::string> words);

    TokenId id(std::string_view word) const;
    bool contains(std::string_view word) const;
    const std::string& word(TokenId id) const;
    std::size_t size() const { return words_.size(); }
    TokenId eos() const { return 0; }
    const std::vector<std::string>& words() const { return words_; }

    Tokens encode(const std::vector<std::string>& words) const;
    Tokens encode_text(std::string_view text) const { return encode(split_words(text)); }
    /// Space-joined surface form; <eos> is not rendered.
    std::string decode(const Tokens& tokens) const;

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, TokenId> index_;
};

}  // namespace cptlab
