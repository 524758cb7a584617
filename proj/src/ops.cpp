#include "syncflow/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "syncflow/errors.hpp"

namespace syncflow {

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatR<T>>;
template <class T>
using MapC = Eigen::Map<const MatR<T>>;

int normalize_axis(int axis, int rank, const char* op)
{
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank)
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank "
                         + std::to_string(rank));
    return a;
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op)
{
    if (a.dtype() != b.dtype()) throw ContractError(std::string(op) + ": mixed dtypes");
}

bool wants_grad(std::initializer_list<const Tensor*> inputs)
{
    if (active_tape() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->defined() && t->requires_grad()) return true;
    return false;
}

bool wants_grad(const std::vector<Tensor>& inputs)
{
    if (active_tape() == nullptr) return false;
    for (const Tensor& t : inputs)
        if (t.requires_grad()) return true;
    return false;
}

// Checks the output and, when needed, marks it differentiable and records
// its backward closure.
template <class Fn>
void finish(Tensor& out, const char* op, bool grad, Fn&& backward)
{
    check_finite(out, op);
    if (!grad) return;
    out.set_requires_grad(true);
    active_tape()->record(std::forward<Fn>(backward));
}

struct Split3 {
    std::int64_t outer = 1;
    std::int64_t n = 1;
    std::int64_t inner = 1;
};

Split3 split_at(const Shape& shape, int axis)
{
    Split3 s;
    for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    s.n = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
    Shape out;
    std::vector<std::int64_t> stride_a; // per output dim, 0 where broadcast
    std::vector<std::int64_t> stride_b;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op)
{
    const std::size_t r = std::max(a.size(), b.size());
    Broadcast p;
    p.out.assign(r, 1);
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
    for (std::size_t i = 0; i < r; ++i) {
        if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        p.out[i] = std::max(pa[i], pb[i]);
        if (pa[i] == 0 || pb[i] == 0) p.out[i] = 0;
    }
    p.stride_a.assign(r, 0);
    p.stride_b.assign(r, 0);
    std::int64_t sa = 1, sb = 1;
    for (std::size_t i = r; i-- > 0;) {
        p.stride_a[i] = pa[i] == 1 ? 0 : sa;
        p.stride_b[i] = pb[i] == 1 ? 0 : sb;
        sa *= pa[i];
        sb *= pb[i];
    }
    return p;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <class Fn>
void for_each_broadcast(const Broadcast& p, Fn&& fn)
{
    const std::size_t r = p.out.size();
    const std::int64_t total = shape_numel(p.out);
    if (total == 0) return;
    if (r == 0) {
        fn(0, 0, 0);
        return;
    }
    const std::int64_t last = p.out[r - 1];
    const std::int64_t la = p.stride_a[r - 1], lb = p.stride_b[r - 1];
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t ia = 0, ib = 0, o = 0;
    while (o < total) {
        for (std::int64_t j = 0; j < last; ++j) fn(o + j, ia + j * la, ib + j * lb);
        o += last;
        // advance the outer counters
        for (std::size_t d = r - 1; d-- > 0;) {
            ++idx[d];
            ia += p.stride_a[d];
            ib += p.stride_b[d];
            if (idx[d] < p.out[d]) break;
            ia -= p.stride_a[d] * idx[d];
            ib -= p.stride_b[d] * idx[d];
            idx[d] = 0;
        }
    }
}

enum class BinOp { kAdd, kSub, kMul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp kind, const char* op)
{
    require_same_dtype(a, b, op);
    const bool same = a.shape() == b.shape();
    Broadcast plan;
    if (!same) plan = plan_broadcast(a.shape(), b.shape(), op);
    Tensor out(same ? a.shape() : plan.out, a.dtype());
    dispatch_dtype(a.dtype(), [&]<class T>(std::type_identity<T>) {
        auto pa = a.data<T>();
        auto pb = b.data<T>();
        auto po = out.data<T>();
        auto apply = [kind](T x, T y) {
            switch (kind) {
            case BinOp::kAdd: return x + y;
            case BinOp::kSub: return x - y;
            default: return x * y;
            }
        };
        if (same) {
            for (std::size_t i = 0; i < po.size(); ++i) po[i] = apply(pa[i], pb[i]);
        } else {
            for_each_broadcast(plan, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                po[o] = apply(pa[ia], pb[ib]);
            });
        }
    });
    finish(out, op, wants_grad({&a, &b}), [a, b, out, kind, same, plan]() mutable {
        if (!out.has_grad()) return;
        dispatch_dtype(out.dtype(), [&]<class T>(std::type_identity<T>) {
            auto g = out.grad<T>();
            const bool need_a = a.requires_grad(), need_b = b.requires_grad();
            if (need_a) a.impl()->ensure_grad();
            if (need_b) b.impl()->ensure_grad();
            T* ga = need_a ? a.grad<T>().data() : nullptr;
            T* gb = need_b ? b.grad<T>().data() : nullptr;
            const T* va = a.data<T>().data();
            const T* vb = b.data<T>().data();
            auto step = [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                const T go = g[static_cast<std::size_t>(o)];
                switch (kind) {
                case BinOp::kAdd:
                    if (ga) ga[ia] += go;
                    if (gb) gb[ib] += go;
                    break;
                case BinOp::kSub:
                    if (ga) ga[ia] += go;
                    if (gb) gb[ib] -= go;
                    break;
                case BinOp::kMul:
                    if (ga) ga[ia] += go * vb[ib];
                    if (gb) gb[ib] += go * va[ia];
                    break;
                }
            };
            if (same) {
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(g.size()); ++i) step(i, i, i);
            } else {
                for_each_broadcast(plan, step);
            }
        });
    });
    return out;
}

// Elementwise unary op given value and derivative functors.
template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, const char* op, Fwd fwd, Deriv deriv)
{
    Tensor out(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
        auto px = x.data<T>();
        auto po = out.data<T>();
        for (std::size_t i = 0; i < po.size(); ++i) po[i] = static_cast<T>(fwd(static_cast<double>(px[i])));
    });
    finish(out, op, wants_grad({&x}), [x, out, deriv]() mutable {
        if (!out.has_grad()) return;
        x.impl()->ensure_grad();
        dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
            auto g = out.grad<T>();
            auto gx = x.grad<T>();
            auto px = x.data<T>();
            auto po = out.data<T>();
            for (std::size_t i = 0; i < g.size(); ++i)
                gx[i] += g[i] * static_cast<T>(deriv(static_cast<double>(px[i]), static_cast<double>(po[i])));
        });
    });
    return out;
}

// Generic strided gather used by permute: out[i] = in[src(i)].
std::vector<std::int64_t> permute_source_index(const Shape& in_shape, const std::vector<int>& order)
{
    const std::size_t r = in_shape.size();
    std::vector<std::int64_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
    Shape out_shape(r);
    std::vector<std::int64_t> stride(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = in_shape[static_cast<std::size_t>(order[i])];
        stride[i] = in_stride[static_cast<std::size_t>(order[i])];
    }
    const std::int64_t total = shape_numel(in_shape);
    std::vector<std::int64_t> src(static_cast<std::size_t>(total));
    if (total == 0) return src;
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t s = 0;
    for (std::int64_t o = 0; o < total; ++o) {
        src[static_cast<std::size_t>(o)] = s;
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            s += stride[d];
            if (idx[d] < out_shape[d]) break;
            s -= stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    return src;
}

} // namespace

void check_finite(const Tensor& t, const char* op)
{
    dispatch_dtype(t.dtype(), [&]<class T>(std::type_identity<T>) {
        for (T v : t.data<T>())
            if (!std::isfinite(v)) throw NumericalError(std::string(op) + ": non-finite value in output");
    });
}

Tensor add(const Tensor& a, const Tensor& b)
{
    return binary(a, b, BinOp::kAdd, "add");
}

Tensor sub(const Tensor& a, const Tensor& b)
{
    return binary(a, b, BinOp::kSub, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b)
{
    return binary(a, b, BinOp::kMul, "mul");
}

Tensor scale(const Tensor& a, double factor)
{
    return unary(a, "scale", [factor](double v) { return v * factor; },
                 [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value)
{
    return unary(a, "add_scalar", [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b)
{
    require_same_dtype(a, b, "matmul");
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and "
                         + shape_str(b.shape()));
    const std::int64_t m = a.dim(-2), k = a.dim(-1);
    const std::int64_t bk = transpose_b ? b.dim(-1) : b.dim(-2);
    const std::int64_t n = transpose_b ? b.dim(-2) : b.dim(-1);
    if (bk != k)
        throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x "
                         + shape_str(b.shape()) + (transpose_b ? "^T" : ""));
    const std::int64_t batch = a.numel() / std::max<std::int64_t>(m * k, 1);
    const std::int64_t batch_b = b.numel() / std::max<std::int64_t>(bk * n, 1);
    if (b.rank() > 2) {
        const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
        const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
        if (a_batch != b_batch)
            throw ShapeError("matmul: batch dimensions differ: " + shape_str(a.shape()) + " x "
                             + shape_str(b.shape()));
    }
    const bool shared_b = b.rank() == 2;
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor out(out_shape, a.dtype());
    (void)batch_b;

    dispatch_dtype(a.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* pa = a.data<T>().data();
        const T* pb = b.data<T>().data();
        T* po = out.data<T>().data();
        if (shared_b) {
            MapC<T> A(pa, batch * m, k);
            MapM<T> C(po, batch * m, n);
            if (transpose_b) C.noalias() = A * MapC<T>(pb, n, k).transpose();
            else C.noalias() = A * MapC<T>(pb, k, n);
        } else {
            for (std::int64_t i = 0; i < batch; ++i) {
                MapC<T> A(pa + i * m * k, m, k);
                MapM<T> C(po + i * m * n, m, n);
                if (transpose_b) C.noalias() = A * MapC<T>(pb + i * n * k, n, k).transpose();
                else C.noalias() = A * MapC<T>(pb + i * k * n, k, n);
            }
        }
    });

    finish(out, "matmul", wants_grad({&a, &b}), [a, b, out, m, k, n, batch, shared_b, transpose_b]() mutable {
        if (!out.has_grad()) return;
        dispatch_dtype(out.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = out.grad<T>().data();
            const T* pa = a.data<T>().data();
            const T* pb = b.data<T>().data();
            if (a.requires_grad()) {
                a.impl()->ensure_grad();
                T* ga = a.grad<T>().data();
                if (shared_b) {
                    MapM<T> GA(ga, batch * m, k);
                    MapC<T> G(g, batch * m, n);
                    if (transpose_b) GA.noalias() += G * MapC<T>(pb, n, k);
                    else GA.noalias() += G * MapC<T>(pb, k, n).transpose();
                } else {
                    for (std::int64_t i = 0; i < batch; ++i) {
                        MapM<T> GA(ga + i * m * k, m, k);
                        MapC<T> G(g + i * m * n, m, n);
                        if (transpose_b) GA.noalias() += G * MapC<T>(pb + i * n * k, n, k);
                        else GA.noalias() += G * MapC<T>(pb + i * k * n, k, n).transpose();
                    }
                }
            }
            if (b.requires_grad()) {
                b.impl()->ensure_grad();
                T* gb = b.grad<T>().data();
                if (shared_b) {
                    MapC<T> A(pa, batch * m, k);
                    MapC<T> G(g, batch * m, n);
                    if (transpose_b) MapM<T>(gb, n, k).noalias() += G.transpose() * A;
                    else MapM<T>(gb, k, n).noalias() += A.transpose() * G;
                } else {
                    for (std::int64_t i = 0; i < batch; ++i) {
                        MapC<T> A(pa + i * m * k, m, k);
                        MapC<T> G(g + i * m * n, m, n);
                        if (transpose_b) MapM<T>(gb + i * n * k, n, k).noalias() += G.transpose() * A;
                        else MapM<T>(gb + i * k * n, k, n).noalias() += A.transpose() * G;
                    }
                }
            }
        });
    });
    return out;
}

Tensor softmax(const Tensor& x, int axis)
{
    const int ax = normalize_axis(axis, x.rank(), "softmax");
    const Split3 s = split_at(x.shape(), ax);
    Tensor out(x.shape(), x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* px = x.data<T>().data();
        T* po = out.data<T>().data();
        for (std::int64_t o = 0; o < s.outer; ++o) {
            for (std::int64_t in = 0; in < s.inner; ++in) {
                const std::int64_t base = o * s.n * s.inner + in;
                T mx = px[base];
                for (std::int64_t j = 1; j < s.n; ++j) mx = std::max(mx, px[base + j * s.inner]);
                T total = 0;
                for (std::int64_t j = 0; j < s.n; ++j) {
                    const T e = std::exp(px[base + j * s.inner] - mx);
                    po[base + j * s.inner] = e;
                    total += e;
                }
                const T inv = T(1) / total;
                for (std::int64_t j = 0; j < s.n; ++j) po[base + j * s.inner] *= inv;
            }
        }
    });
    finish(out, "softmax", wants_grad({&x}), [x, out, s]() mutable {
        if (!out.has_grad()) return;
        x.impl()->ensure_grad();
        dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = out.grad<T>().data();
            const T* y = out.data<T>().data();
            T* gx = x.grad<T>().data();
            for (std::int64_t o = 0; o < s.outer; ++o) {
                for (std::int64_t in = 0; in < s.inner; ++in) {
                    const std::int64_t base = o * s.n * s.inner + in;
                    T dot = 0;
                    for (std::int64_t j = 0; j < s.n; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
                    for (std::int64_t j = 0; j < s.n; ++j) {
                        const std::int64_t i = base + j * s.inner;
                        gx[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        });
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, int axis)
{
    constexpr double kEps = 1e-5;
    const int ax = normalize_axis(axis, x.rank(), "layer_norm");
    const Split3 s = split_at(x.shape(), ax);
    for (const Tensor* p : {&gain, &bias}) {
        if (!p->defined()) continue;
        require_same_dtype(x, *p, "layer_norm");
        if (p->numel() != s.n)
            throw ShapeError("layer_norm: gain/bias length " + std::to_string(p->numel())
                             + " does not match normalized axis length " + std::to_string(s.n));
    }
    Tensor out(x.shape(), x.dtype());
    // normalized values and reciprocal std, saved for backward
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.numel()));
    auto rstd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(s.outer * s.inner));
    dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* px = x.data<T>().data();
        const T* pg = gain.defined() ? gain.data<T>().data() : nullptr;
        const T* pb = bias.defined() ? bias.data<T>().data() : nullptr;
        T* po = out.data<T>().data();
        for (std::int64_t o = 0; o < s.outer; ++o) {
            for (std::int64_t in = 0; in < s.inner; ++in) {
                const std::int64_t base = o * s.n * s.inner + in;
                double mu = 0;
                for (std::int64_t j = 0; j < s.n; ++j) mu += px[base + j * s.inner];
                mu /= static_cast<double>(s.n);
                double var = 0;
                for (std::int64_t j = 0; j < s.n; ++j) {
                    const double d = px[base + j * s.inner] - mu;
                    var += d * d;
                }
                var /= static_cast<double>(s.n);
                const double r = 1.0 / std::sqrt(var + kEps);
                (*rstd)[static_cast<std::size_t>(o * s.inner + in)] = r;
                for (std::int64_t j = 0; j < s.n; ++j) {
                    const std::int64_t i = base + j * s.inner;
                    const double h = (px[i] - mu) * r;
                    (*xhat)[static_cast<std::size_t>(i)] = h;
                    double v = h;
                    if (pg) v *= pg[j];
                    if (pb) v += pb[j];
                    po[i] = static_cast<T>(v);
                }
            }
        }
    });
    finish(out, "layer_norm", wants_grad({&x, &gain, &bias}), [x, gain, bias, out, s, xhat, rstd]() mutable {
        if (!out.has_grad()) return;
        dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = out.grad<T>().data();
            const T* pg = gain.defined() ? gain.data<T>().data() : nullptr;
            T* gx = nullptr;
            T* ggain = nullptr;
            T* gbias = nullptr;
            if (x.requires_grad()) {
                x.impl()->ensure_grad();
                gx = x.grad<T>().data();
            }
            if (gain.defined() && gain.requires_grad()) {
                gain.impl()->ensure_grad();
                ggain = gain.grad<T>().data();
            }
            if (bias.defined() && bias.requires_grad()) {
                bias.impl()->ensure_grad();
                gbias = bias.grad<T>().data();
            }
            std::vector<double> gh(static_cast<std::size_t>(s.n));
            for (std::int64_t o = 0; o < s.outer; ++o) {
                for (std::int64_t in = 0; in < s.inner; ++in) {
                    const std::int64_t base = o * s.n * s.inner + in;
                    double mean_gh = 0, mean_ghx = 0;
                    for (std::int64_t j = 0; j < s.n; ++j) {
                        const std::int64_t i = base + j * s.inner;
                        const double h = (*xhat)[static_cast<std::size_t>(i)];
                        if (ggain) ggain[j] += static_cast<T>(g[i] * h);
                        if (gbias) gbias[j] += g[i];
                        const double v = pg ? static_cast<double>(g[i]) * pg[j] : static_cast<double>(g[i]);
                        gh[static_cast<std::size_t>(j)] = v;
                        mean_gh += v;
                        mean_ghx += v * h;
                    }
                    if (!gx) continue;
                    mean_gh /= static_cast<double>(s.n);
                    mean_ghx /= static_cast<double>(s.n);
                    const double r = (*rstd)[static_cast<std::size_t>(o * s.inner + in)];
                    for (std::int64_t j = 0; j < s.n; ++j) {
                        const std::int64_t i = base + j * s.inner;
                        const double h = (*xhat)[static_cast<std::size_t>(i)];
                        gx[i] += static_cast<T>(r * (gh[static_cast<std::size_t>(j)] - mean_gh - h * mean_ghx));
                    }
                }
            }
        });
    });
    return out;
}

Tensor gelu(const Tensor& x)
{
    constexpr double c = 0.7978845608028654; // sqrt(2/pi)
    return unary(
        x, "gelu",
        [](double v) { return 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))); },
        [](double v, double) {
            const double u = c * (v + 0.044715 * v * v * v);
            const double th = std::tanh(u);
            const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
            return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
        });
}

Tensor silu(const Tensor& x)
{
    return unary(
        x, "silu", [](double v) { return v / (1.0 + std::exp(-v)); },
        [](double v, double) {
            const double sg = 1.0 / (1.0 + std::exp(-v));
            return sg * (1.0 + v * (1.0 - sg));
        });
}

Tensor exp(const Tensor& x)
{
    return unary(x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor square(const Tensor& x)
{
    return unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sum(const Tensor& x)
{
    Tensor out({}, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
        double total = 0;
        for (T v : x.data<T>()) total += v;
        out.data<T>()[0] = static_cast<T>(total);
    });
    finish(out, "sum", wants_grad({&x}), [x, out]() mutable {
        if (!out.has_grad()) return;
        x.impl()->ensure_grad();
        dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
            const T g = out.grad<T>()[0];
            for (T& v : x.grad<T>()) v += g;
        });
    });
    return out;
}

Tensor mean(const Tensor& x)
{
    if (x.numel() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mean_axis(const Tensor& x, int axis, bool keepdim)
{
    const int ax = normalize_axis(axis, x.rank(), "mean_axis");
    const Split3 s = split_at(x.shape(), ax);
    Shape out_shape = x.shape();
    if (keepdim) out_shape[static_cast<std::size_t>(ax)] = 1;
    else out_shape.erase(out_shape.begin() + ax);
    Tensor out(out_shape, x.dtype());
    const double inv = 1.0 / static_cast<double>(s.n);
    dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* px = x.data<T>().data();
        T* po = out.data<T>().data();
        for (std::int64_t o = 0; o < s.outer; ++o) {
            for (std::int64_t in = 0; in < s.inner; ++in) {
                double total = 0;
                for (std::int64_t j = 0; j < s.n; ++j) total += px[(o * s.n + j) * s.inner + in];
                po[o * s.inner + in] = static_cast<T>(total * inv);
            }
        }
    });
    finish(out, "mean_axis", wants_grad({&x}), [x, out, s, inv]() mutable {
        if (!out.has_grad()) return;
        x.impl()->ensure_grad();
        dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = out.grad<T>().data();
            T* gx = x.grad<T>().data();
            for (std::int64_t o = 0; o < s.outer; ++o)
                for (std::int64_t j = 0; j < s.n; ++j)
                    for (std::int64_t in = 0; in < s.inner; ++in)
                        gx[(o * s.n + j) * s.inner + in] += static_cast<T>(g[o * s.inner + in] * inv);
        });
    });
    return out;
}

Tensor reshape(const Tensor& x, Shape shape)
{
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension");
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) {
        if (known == 0 || x.numel() % known != 0)
            throw ShapeError("reshape: cannot infer dimension for " + shape_str(x.shape()) + " -> " + shape_str(shape));
        shape[static_cast<std::size_t>(infer)] = x.numel() / known;
    }
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
    Tensor out = dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
        auto v = x.data<T>();
        return Tensor(shape, std::vector<T>(v.begin(), v.end()));
    });
    finish(out, "reshape", wants_grad({&x}), [x, out]() mutable {
        if (!out.has_grad()) return;
        x.impl()->ensure_grad();
        dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
            auto g = out.grad<T>();
            auto gx = x.grad<T>();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    });
    return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& order)
{
    const int r = x.rank();
    if (static_cast<int>(order.size()) != r) throw ShapeError("permute: order length differs from rank");
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        const int o = order[static_cast<std::size_t>(i)];
        if (o < 0 || o >= r || seen[static_cast<std::size_t>(o)]) throw ShapeError("permute: invalid order");
        seen[static_cast<std::size_t>(o)] = true;
        out_shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(o)];
    }
    auto src = std::make_shared<std::vector<std::int64_t>>(permute_source_index(x.shape(), order));
    Tensor out(out_shape, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* px = x.data<T>().data();
        T* po = out.data<T>().data();
        for (std::size_t i = 0; i < src->size(); ++i) po[i] = px[(*src)[i]];
    });
    finish(out, "permute", wants_grad({&x}), [x, out, src]() mutable {
        if (!out.has_grad()) return;
        x.impl()->ensure_grad();
        dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = out.grad<T>().data();
            T* gx = x.grad<T>().data();
            for (std::size_t i = 0; i < src->size(); ++i) gx[(*src)[i]] += g[i];
        });
    });
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis)
{
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const int ax = normalize_axis(axis, parts[0].rank(), "concat");
    Shape out_shape = parts[0].shape();
    out_shape[static_cast<std::size_t>(ax)] = 0;
    for (const Tensor& p : parts) {
        require_same_dtype(parts[0], p, "concat");
        if (p.rank() != parts[0].rank()) throw ShapeError("concat: rank mismatch");
        for (int d = 0; d < p.rank(); ++d) {
            if (d != ax && p.shape()[static_cast<std::size_t>(d)] != parts[0].shape()[static_cast<std::size_t>(d)])
                throw ShapeError("concat: shapes " + shape_str(parts[0].shape()) + " and " + shape_str(p.shape())
                                 + " differ off the concat axis");
        }
        out_shape[static_cast<std::size_t>(ax)] += p.shape()[static_cast<std::size_t>(ax)];
    }
    const Split3 so = split_at(out_shape, ax);
    Tensor out(out_shape, parts[0].dtype());
    dispatch_dtype(out.dtype(), [&]<class T>(std::type_identity<T>) {
        T* po = out.data<T>().data();
        std::int64_t offset = 0;
        for (const Tensor& p : parts) {
            const std::int64_t chunk = p.dim(ax) * so.inner;
            const T* pp = p.data<T>().data();
            for (std::int64_t o = 0; o < so.outer; ++o)
                std::copy(pp + o * chunk, pp + (o + 1) * chunk, po + o * so.n * so.inner + offset);
            offset += chunk;
        }
    });
    finish(out, "concat", wants_grad(parts), [parts, out, so, ax]() mutable {
        if (!out.has_grad()) return;
        dispatch_dtype(out.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = out.grad<T>().data();
            std::int64_t offset = 0;
            for (const Tensor& p : parts) {
                const std::int64_t chunk = p.dim(ax) * so.inner;
                if (p.requires_grad()) {
                    p.impl()->ensure_grad();
                    T* gp = p.grad<T>().data();
                    for (std::int64_t o = 0; o < so.outer; ++o)
                        for (std::int64_t j = 0; j < chunk; ++j) gp[o * chunk + j] += g[o * so.n * so.inner + offset + j];
                }
                offset += chunk;
            }
        });
    });
    return out;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length)
{
    const int ax = normalize_axis(axis, x.rank(), "slice");
    const Split3 s = split_at(x.shape(), ax);
    if (start < 0 || length < 0 || start + length > s.n)
        throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length)
                         + ") outside axis of length " + std::to_string(s.n));
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(ax)] = length;
    Tensor out(out_shape, x.dtype());
    const std::int64_t chunk = length * s.inner;
    dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* px = x.data<T>().data();
        T* po = out.data<T>().data();
        for (std::int64_t o = 0; o < s.outer; ++o) {
            const T* from = px + (o * s.n + start) * s.inner;
            std::copy(from, from + chunk, po + o * chunk);
        }
    });
    finish(out, "slice", wants_grad({&x}), [x, out, s, start, chunk]() mutable {
        if (!out.has_grad()) return;
        x.impl()->ensure_grad();
        dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = out.grad<T>().data();
            T* gx = x.grad<T>().data();
            for (std::int64_t o = 0; o < s.outer; ++o)
                for (std::int64_t j = 0; j < chunk; ++j) gx[(o * s.n + start) * s.inner + j] += g[o * chunk + j];
        });
    });
    return out;
}

Tensor index_select(const Tensor& x, int axis, const std::vector<std::int64_t>& indices)
{
    const int ax = normalize_axis(axis, x.rank(), "index_select");
    const Split3 s = split_at(x.shape(), ax);
    for (auto i : indices)
        if (i < 0 || i >= s.n)
            throw ShapeError("index_select: index " + std::to_string(i) + " out of range " + std::to_string(s.n));
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(ax)] = static_cast<std::int64_t>(indices.size());
    Tensor out(out_shape, x.dtype());
    const auto m = static_cast<std::int64_t>(indices.size());
    dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* px = x.data<T>().data();
        T* po = out.data<T>().data();
        for (std::int64_t o = 0; o < s.outer; ++o)
            for (std::int64_t j = 0; j < m; ++j) {
                const T* from = px + (o * s.n + indices[static_cast<std::size_t>(j)]) * s.inner;
                std::copy(from, from + s.inner, po + (o * m + j) * s.inner);
            }
    });
    finish(out, "index_select", wants_grad({&x}), [x, out, s, m, indices]() mutable {
        if (!out.has_grad()) return;
        x.impl()->ensure_grad();
        dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
            const T* g = out.grad<T>().data();
            T* gx = x.grad<T>().data();
            for (std::int64_t o = 0; o < s.outer; ++o)
                for (std::int64_t j = 0; j < m; ++j) {
                    T* to = gx + (o * s.n + indices[static_cast<std::size_t>(j)]) * s.inner;
                    const T* from = g + (o * m + j) * s.inner;
                    for (std::int64_t i = 0; i < s.inner; ++i) to[i] += from[i];
                }
        });
    });
    return out;
}

Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::array<int, 3> kernel)
{
    if (x.rank() != 5) throw ShapeError("conv3d: input must be [B, T, H, W, C], got " + shape_str(x.shape()));
    for (int k : kernel)
        if (k < 1 || k % 2 == 0) throw ShapeError("conv3d: kernel extents must be odd");
    require_same_dtype(x, weight, "conv3d");
    const std::int64_t B = x.dim(0), T_ = x.dim(1), H = x.dim(2), W = x.dim(3), C = x.dim(4);
    const std::int64_t taps = static_cast<std::int64_t>(kernel[0]) * kernel[1] * kernel[2];
    if (weight.rank() != 2 || weight.dim(0) != taps * C)
        throw ShapeError("conv3d: weight " + shape_str(weight.shape()) + " does not match input channels "
                         + std::to_string(C) + " and kernel taps " + std::to_string(taps));
    const std::int64_t O = weight.dim(1);
    if (bias.defined() && bias.numel() != O) throw ShapeError("conv3d: bias length mismatch");
    const std::int64_t positions = B * T_ * H * W;
    const std::int64_t row = taps * C;

    // Gather offsets for each output position and tap; -1 means zero padding.
    auto gather = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(positions * taps));
    {
        const int pt = kernel[0] / 2, ph = kernel[1] / 2, pw = kernel[2] / 2;
        std::int64_t p = 0;
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t t = 0; t < T_; ++t)
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t w = 0; w < W; ++w, ++p) {
                        std::int64_t tap = 0;
                        for (int dt = -pt; dt <= pt; ++dt)
                            for (int dh = -ph; dh <= ph; ++dh)
                                for (int dw = -pw; dw <= pw; ++dw, ++tap) {
                                    const std::int64_t tt = t + dt, hh = h + dh, ww = w + dw;
                                    const bool inside = tt >= 0 && tt < T_ && hh >= 0 && hh < H && ww >= 0 && ww < W;
                                    (*gather)[static_cast<std::size_t>(p * taps + tap)] =
                                        inside ? (((b * T_ + tt) * H + hh) * W + ww) * C : -1;
                                }
                    }
    }

    Shape out_shape{B, T_, H, W, O};
    Tensor out(out_shape, x.dtype());
    dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
        const T* px = x.data<T>().data();
        std::vector<T> cols(static_cast<std::size_t>(positions * row), T(0));
        for (std::int64_t p = 0; p < positions; ++p)
            for (std::int64_t tap = 0; tap < taps; ++tap) {
                const std::int64_t src = (*gather)[static_cast<std::size_t>(p * taps + tap)];
                if (src < 0) continue;
                std::copy(px + src, px + src + C, cols.data() + p * row + tap * C);
            }
        MapM<T> Y(out.data<T>().data(), positions, O);
        Y.noalias() = MapC<T>(cols.data(), positions, row) * MapC<T>(weight.data<T>().data(), row, O);
        if (bias.defined()) {
            const T* pb = bias.data<T>().data();
            for (std::int64_t p = 0; p < positions; ++p)
                for (std::int64_t o = 0; o < O; ++o) Y(p, o) += pb[o];
        }
    });

    finish(out, "conv3d", wants_grad({&x, &weight, &bias}),
           [x, weight, bias, out, gather, positions, row, taps, C, O]() mutable {
               if (!out.has_grad()) return;
               dispatch_dtype(x.dtype(), [&]<class T>(std::type_identity<T>) {
                   MapC<T> G(out.grad<T>().data(), positions, O);
                   if (bias.defined() && bias.requires_grad()) {
                       bias.impl()->ensure_grad();
                       T* gb = bias.grad<T>().data();
                       for (std::int64_t p = 0; p < positions; ++p)
                           for (std::int64_t o = 0; o < O; ++o) gb[o] += G(p, o);
                   }
                   const bool need_w = weight.requires_grad(), need_x = x.requires_grad();
                   if (!need_w && !need_x) return;
                   std::vector<T> cols(static_cast<std::size_t>(positions * row), T(0));
                   if (need_w) {
                       const T* px = x.data<T>().data();
                       for (std::int64_t p = 0; p < positions; ++p)
                           for (std::int64_t tap = 0; tap < taps; ++tap) {
                               const std::int64_t src = (*gather)[static_cast<std::size_t>(p * taps + tap)];
                               if (src < 0) continue;
                               std::copy(px + src, px + src + C, cols.data() + p * row + tap * C);
                           }
                       weight.impl()->ensure_grad();
                       MapM<T>(weight.grad<T>().data(), row, O).noalias() +=
                           MapC<T>(cols.data(), positions, row).transpose() * G;
                   }
                   if (need_x) {
                       MapM<T> dcols(cols.data(), positions, row);
                       dcols.noalias() = G * MapC<T>(weight.data<T>().data(), row, O).transpose();
                       x.impl()->ensure_grad();
                       T* gx = x.grad<T>().data();
                       for (std::int64_t p = 0; p < positions; ++p)
                           for (std::int64_t tap = 0; tap < taps; ++tap) {
                               const std::int64_t dst = (*gather)[static_cast<std::size_t>(p * taps + tap)];
                               if (dst < 0) continue;
                               const T* from = cols.data() + p * row + tap * C;
                               for (std::int64_t c = 0; c < C; ++c) gx[dst + c] += from[c];
                           }
                   }
               });
           });
    return out;
}

Tensor mse(const Tensor& prediction, const Tensor& target)
{
    if (prediction.shape() != target.shape())
        throw ShapeError("mse: shapes " + shape_str(prediction.shape()) + " and " + shape_str(target.shape()));
    return mean(square(sub(prediction, target)));
}

} // namespace syncflow
