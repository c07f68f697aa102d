#include "keepfit/tokenizer.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "keepfit/checkpoint.hpp"
#include "keepfit/tensor.hpp"

namespace keepfit {

namespace {

bool is_punct(char c) { return c == ',' || c == '.' || c == ';' || c == ':' || c == '!' || c == '?'; }

const std::vector<std::string> kSpecials = {"[PAD]", "[UNK]", "[CLS]", "[MASK]"};

} // namespace

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string word;
    while (in >> word) {
        std::string trailing;
        while (!word.empty() && is_punct(word.back())) {
            trailing.insert(trailing.begin(), word.back());
            word.pop_back();
        }
        if (!word.empty()) out.push_back(word);
        for (char c : trailing) out.emplace_back(1, c);
    }
    return out;
}

std::vector<std::size_t> truncate_tokens(std::vector<std::size_t> ids, std::size_t max_tokens) {
    if (ids.size() > max_tokens) ids.resize(max_tokens);
    return ids;
}

Vocabulary::Vocabulary() : tokens_(kSpecials) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], i);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
    std::set<std::string> words;
    for (const auto& t : texts)
        for (auto& w : split_words(t)) words.insert(std::move(w));
    std::vector<std::string> tokens = kSpecials;
    for (const auto& w : words)
        if (std::find(kSpecials.begin(), kSpecials.end(), w) == kSpecials.end()) tokens.push_back(w);
    return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < kNumSpecial || !std::equal(kSpecials.begin(), kSpecials.end(), tokens.begin())) {
        throw Error("vocabulary must start with [PAD] [UNK] [CLS] [MASK]");
    }
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    v.index_.clear();
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        if (!v.index_.emplace(v.tokens_[i], i).second) throw Error("vocabulary: duplicate token '" + v.tokens_[i] + "'");
    }
    return v;
}

std::size_t Vocabulary::id(const std::string& word) const {
    const auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Vocabulary::tokenize(const std::string& text) const {
    std::vector<std::size_t> ids{kCls};
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
}

std::string Vocabulary::detokenize(const std::vector<std::size_t>& ids) const {
    std::string out;
    for (auto id : ids) {
        if (id == kPad || id == kCls) continue;
        const std::string& tok = token(id);
        const bool attach = tok.size() == 1 && is_punct(tok[0]);
        if (!out.empty() && !attach) out += ' ';
        out += tok;
    }
    return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::string text;
    for (const auto& t : tokens_) text += t + "\n";
    atomic_write(path, text);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return from_tokens(std::move(tokens));
}

} // namespace keepfit
