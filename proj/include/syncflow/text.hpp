#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "syncflow/nn.hpp"

namespace syncflow {

class Vocabulary {
public:
    static constexpr std::int64_t kPad = 0;
    static constexpr std::int64_t kUnk = 1;

    Vocabulary() : Vocabulary(std::vector<std::string>{"<pad>", "<unk>"}) {}
    explicit Vocabulary(std::vector<std::string> words);
    // Words of the caption templates plus <pad>/<unk>.
    static Vocabulary synthetic();

    std::int64_t size() const { return static_cast<std::int64_t>(words_.size()); }
    std::int64_t id(const std::string& word) const;
    const std::string& word(std::int64_t id) const;
    const std::vector<std::string>& words() const { return words_; }

    // One token per line, line index = id.
    std::string to_text() const;
    static Vocabulary from_text(const std::string& text);

    bool operator==(const Vocabulary& other) const { return words_ == other.words_; }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::int64_t> index_;
};

// Lowercase + whitespace split; unknown words map to <unk>, an empty caption
// to a single <pad>.
std::vector<std::int64_t> tokenize(const std::string& caption, const Vocabulary& vocab);

struct TextCondition {
    std::vector<std::int64_t> tokens;
    Tensor embeddings; // [L, E]
    bool is_null = false;
};

// Padded batch of conditions for cross-attention.
struct TextBatch {
    Tensor embeddings; // [B, L_max, E]
    Tensor key_bias;   // [B, 1, 1, L_max], -1e9 at padding
};

class TextEncoder {
public:
    TextEncoder() = default;
    TextEncoder(Vocabulary vocab, std::int64_t dim, std::int64_t heads, Rng& rng);

    TextCondition encode(const std::vector<std::int64_t>& tokens) const;
    TextCondition encode(const std::string& caption) const { return encode(tokenize(caption, vocab_)); }
    TextCondition null_condition() const;

    const Vocabulary& vocab() const { return vocab_; }
    std::int64_t dim() const { return dim_; }

    void visit(const std::string& prefix, const nn::ParamVisitor& fn);

private:
    Vocabulary vocab_;
    std::int64_t dim_ = 0;
    Tensor table_;    // [V, E]
    Tensor null_row_; // [1, E]
    nn::LayerNorm norm_;
    nn::Attention attn_;
};

TextBatch batch_conditions(const std::vector<TextCondition>& conditions);

} // namespace syncflow
