#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace keepfit {

/// Whitespace word vocabulary with sentence punctuation split into separate
/// tokens. Ids 0–3 are reserved for the special tokens.
class Vocabulary {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kUnk = 1;
    static constexpr std::size_t kCls = 2;
    static constexpr std::size_t kMask = 3;
    static constexpr std::size_t kNumSpecial = 4;

    Vocabulary();
    /// Sorted unique words of `texts` after the specials.
    static Vocabulary build(const std::vector<std::string>& texts);
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    std::size_t size() const { return tokens_.size(); }
    std::size_t id(const std::string& word) const;
    const std::string& token(std::size_t id) const { return tokens_.at(id); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    /// [CLS] followed by word ids; unknown words map to [UNK]. Not truncated.
    std::vector<std::size_t> tokenize(const std::string& text) const;
    /// Inverse of tokenize up to [UNK] substitution; specials other than
    /// [UNK] and [MASK] are dropped.
    std::string detokenize(const std::vector<std::size_t>& ids) const;

    /// One token per line; line index is the id.
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> index_;
};

std::vector<std::string> split_words(const std::string& text);
/// Keep at most `max_tokens` ids (the leading [CLS] included).
std::vector<std::size_t> truncate_tokens(std::vector<std::size_t> ids, std::size_t max_tokens);

} // namespace keepfit
