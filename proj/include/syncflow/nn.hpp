#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "syncflow/ops.hpp"
#include "syncflow/rng.hpp"

// Small building blocks shared by the text encoder, the two towers, the
// adaptors and the trainable codec.
namespace syncflow::nn {

using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;

// weight ~ Normal(0, stddev)
Tensor normal_param(Shape shape, Rng& rng, double stddev = 0.02);
Tensor zeros_param(Shape shape);
Tensor ones_param(Shape shape);

struct Linear {
    Tensor weight; // [in, out]
    Tensor bias;   // [out], undefined for a bias-free map

    Linear() = default;
    Linear(std::int64_t in, std::int64_t out, Rng& rng, bool zero_init = false, bool with_bias = true);
    Tensor operator()(const Tensor& x) const;
    void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;

    LayerNorm() = default;
    explicit LayerNorm(std::int64_t dim);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias, -1); }
    void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct Mlp {
    Linear fc1;
    Linear fc2;

    Mlp() = default;
    Mlp(std::int64_t dim, std::int64_t hidden, Rng& rng);
    Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
    void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Multi-head attention. The key projection has no bias: a shared key offset
// shifts every score of a row equally and cancels in the softmax. query: [N, Lq, E]; context: [N, Lk, E];
// key_bias: additive score bias broadcastable to [N, heads, Lq, Lk]
// (use -1e9 to mask padded keys), or undefined.
struct Attention {
    Linear q, k, v, o;
    std::int64_t heads = 1;

    Attention() = default;
    Attention(std::int64_t dim, std::int64_t heads, Rng& rng);
    Tensor operator()(const Tensor& query, const Tensor& context, const Tensor& key_bias = {}) const;
    Tensor self(const Tensor& x) const { return (*this)(x, x); }
    void visit(const std::string& prefix, const ParamVisitor& fn);
};

// Builds the [N, 1, 1, Lk] additive bias for per-item key validity.
Tensor key_padding_bias(const std::vector<std::vector<bool>>& valid, DType dtype);

// Sinusoidal features of scalar positions: [n, dim], geometric frequencies
// from 1 to 1/max_period.
Tensor sinusoidal_features(const std::vector<double>& positions, std::int64_t dim, double max_period, DType dtype);

} // namespace syncflow::nn
