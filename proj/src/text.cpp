#include "syncflow/text.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "syncflow/errors.hpp"

namespace syncflow {

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words))
{
    if (words_.size() < 2 || words_[0] != "<pad>" || words_[1] != "<unk>")
        throw FormatError("vocabulary must start with <pad> and <unk>");
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (!index_.emplace(words_[i], static_cast<std::int64_t>(i)).second)
            throw FormatError("duplicate vocabulary word '" + words_[i] + "'");
    }
}

Vocabulary Vocabulary::synthetic()
{
    return Vocabulary({"<pad>", "<unk>", "a", "ball", "bouncing", "red", "green", "blue", "slow", "fast", "slowly",
                       "quickly"});
}

std::int64_t Vocabulary::id(const std::string& word) const
{
    const auto it = index_.find(word);
    return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::word(std::int64_t id) const
{
    if (id < 0 || id >= size()) throw DomainError("token id out of range: " + std::to_string(id));
    return words_[static_cast<std::size_t>(id)];
}

std::string Vocabulary::to_text() const
{
    std::string out;
    for (const auto& w : words_) out += w + "\n";
    return out;
}

Vocabulary Vocabulary::from_text(const std::string& text)
{
    std::vector<std::string> words;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        words.push_back(line);
    }
    return Vocabulary(std::move(words));
}

std::vector<std::int64_t> tokenize(const std::string& caption, const Vocabulary& vocab)
{
    std::string lower = caption;
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::istringstream in(lower);
    std::vector<std::int64_t> ids;
    std::string word;
    while (in >> word) ids.push_back(vocab.id(word));
    if (ids.empty()) ids.push_back(Vocabulary::kPad);
    return ids;
}

TextEncoder::TextEncoder(Vocabulary vocab, std::int64_t dim, std::int64_t heads, Rng& rng)
    : vocab_(std::move(vocab)), dim_(dim), table_(nn::normal_param({vocab_.size(), dim}, rng)),
      null_row_(nn::normal_param({1, dim}, rng)), norm_(dim), attn_(dim, heads, rng)
{
}

TextCondition TextEncoder::encode(const std::vector<std::int64_t>& tokens) const
{
    if (tokens.empty()) throw ContractError("encode_text: empty token sequence");
    for (auto t : tokens)
        if (t < 0 || t >= vocab_.size()) throw DomainError("token id out of range: " + std::to_string(t));
    std::vector<double> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<double>(i);
    Tensor x = add(index_select(table_, 0, tokens), nn::sinusoidal_features(positions, dim_, 100.0, table_.dtype()));
    x = reshape(x, {1, static_cast<std::int64_t>(tokens.size()), dim_});
    x = add(x, attn_.self(norm_(x)));
    return {tokens, reshape(x, {static_cast<std::int64_t>(tokens.size()), dim_}), false};
}

TextCondition TextEncoder::null_condition() const
{
    return {{Vocabulary::kPad}, null_row_, true};
}

void TextEncoder::visit(const std::string& prefix, const nn::ParamVisitor& fn)
{
    fn(prefix + ".table", table_);
    fn(prefix + ".null", null_row_);
    norm_.visit(prefix + ".norm", fn);
    attn_.visit(prefix + ".attn", fn);
}

TextBatch batch_conditions(const std::vector<TextCondition>& conditions)
{
    if (conditions.empty()) throw ContractError("batch_conditions: empty batch");
    std::int64_t longest = 0;
    for (const auto& c : conditions) longest = std::max(longest, c.embeddings.dim(0));
    const std::int64_t E = conditions[0].embeddings.dim(1);
    const DType dtype = conditions[0].embeddings.dtype();
    std::vector<Tensor> rows;
    std::vector<std::vector<bool>> valid;
    for (const auto& c : conditions) {
        const std::int64_t L = c.embeddings.dim(0);
        Tensor row = c.embeddings;
        if (L < longest) row = concat({row, Tensor({longest - L, E}, dtype)}, 0);
        rows.push_back(reshape(row, {1, longest, E}));
        std::vector<bool> v(static_cast<std::size_t>(longest), false);
        std::fill(v.begin(), v.begin() + L, true);
        valid.push_back(std::move(v));
    }
    return {concat(rows, 0), nn::key_padding_bias(valid, dtype)};
}

} // namespace syncflow
