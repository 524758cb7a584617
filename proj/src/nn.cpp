#include "syncflow/nn.hpp"

#include <cmath>

#include "syncflow/errors.hpp"

namespace syncflow::nn {

Tensor normal_param(Shape shape, Rng& rng, double stddev)
{
    Tensor t(std::move(shape));
    for (float& v : t.data<float>()) v = static_cast<float>(rng.normal() * stddev);
    t.set_requires_grad(true);
    return t;
}

Tensor zeros_param(Shape shape)
{
    Tensor t(std::move(shape));
    t.set_requires_grad(true);
    return t;
}

Tensor ones_param(Shape shape)
{
    Tensor t = Tensor::full(std::move(shape), 1.0);
    t.set_requires_grad(true);
    return t;
}

Linear::Linear(std::int64_t in, std::int64_t out, Rng& rng, bool zero_init, bool with_bias)
    : weight(zero_init ? zeros_param({in, out}) : normal_param({in, out}, rng))
{
    if (with_bias) bias = zeros_param({out});
}

Tensor Linear::operator()(const Tensor& x) const
{
    const Tensor y = matmul(x, weight);
    return bias.defined() ? add(y, bias) : y;
}

void Linear::visit(const std::string& prefix, const ParamVisitor& fn)
{
    fn(prefix + ".weight", weight);
    if (bias.defined()) fn(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::int64_t dim) : gain(ones_param({dim})), bias(zeros_param({dim})) {}

void LayerNorm::visit(const std::string& prefix, const ParamVisitor& fn)
{
    fn(prefix + ".gain", gain);
    fn(prefix + ".bias", bias);
}

Mlp::Mlp(std::int64_t dim, std::int64_t hidden, Rng& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

void Mlp::visit(const std::string& prefix, const ParamVisitor& fn)
{
    fc1.visit(prefix + ".fc1", fn);
    fc2.visit(prefix + ".fc2", fn);
}

Attention::Attention(std::int64_t dim, std::int64_t heads_, Rng& rng)
    : q(dim, dim, rng), k(dim, dim, rng, false, false), v(dim, dim, rng), o(dim, dim, rng), heads(heads_)
{
    if (heads <= 0 || dim % heads != 0)
        throw ConfigError("attention width " + std::to_string(dim) + " not divisible by " + std::to_string(heads)
                          + " heads");
}

Tensor Attention::operator()(const Tensor& query, const Tensor& context, const Tensor& key_bias) const
{
    const std::int64_t n = query.dim(0), lq = query.dim(1), lk = context.dim(1), e = query.dim(2);
    if (context.dim(0) != n || context.dim(2) != e)
        throw ShapeError("attention: query " + shape_str(query.shape()) + " vs context " + shape_str(context.shape()));
    const std::int64_t d = e / heads;
    auto split = [&](const Tensor& t, std::int64_t len) {
        return permute(reshape(t, {n, len, heads, d}), {0, 2, 1, 3});
    };
    const Tensor qh = split(q(query), lq);
    const Tensor kh = split(k(context), lk);
    const Tensor vh = split(v(context), lk);
    Tensor scores = scale(matmul(qh, kh, true), 1.0 / std::sqrt(static_cast<double>(d)));
    if (key_bias.defined()) scores = add(scores, key_bias);
    const Tensor mixed = matmul(softmax(scores, -1), vh);
    return o(reshape(permute(mixed, {0, 2, 1, 3}), {n, lq, e}));
}

void Attention::visit(const std::string& prefix, const ParamVisitor& fn)
{
    q.visit(prefix + ".q", fn);
    k.visit(prefix + ".k", fn);
    v.visit(prefix + ".v", fn);
    o.visit(prefix + ".o", fn);
}

Tensor key_padding_bias(const std::vector<std::vector<bool>>& valid, DType dtype)
{
    const auto n = static_cast<std::int64_t>(valid.size());
    const auto lk = n ? static_cast<std::int64_t>(valid[0].size()) : 0;
    Tensor bias({n, 1, 1, lk}, dtype);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < lk; ++j)
            if (!valid[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) bias.set(i * lk + j, -1e9);
    return bias;
}

Tensor sinusoidal_features(const std::vector<double>& positions, std::int64_t dim, double max_period, DType dtype)
{
    const auto n = static_cast<std::int64_t>(positions.size());
    const std::int64_t half = dim / 2;
    Tensor out({n, dim}, dtype);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(max_period) * static_cast<double>(j) / static_cast<double>(half));
            const double arg = positions[static_cast<std::size_t>(i)] * freq;
            out.set(i * dim + j, std::cos(arg));
            out.set(i * dim + half + j, std::sin(arg));
        }
    }
    return out;
}

} // namespace syncflow::nn
