#include "syncflow/tensor.hpp"

#include <sstream>

#include "syncflow/errors.hpp"

namespace syncflow {

namespace {
thread_local GradTape* g_active_tape = nullptr;
} // namespace

std::int64_t shape_numel(const Shape& shape)
{
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void TensorImpl::ensure_grad()
{
    if (has_grad()) return;
    if (dtype == DType::kF32) grad_f32.assign(f32.size(), 0.0f);
    else grad_f64.assign(f64.size(), 0.0);
}

Tensor::Tensor(Shape shape, DType dtype) : impl_(std::make_shared<TensorImpl>())
{
    impl_->dtype = dtype;
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    impl_->shape = std::move(shape);
    if (dtype == DType::kF32) impl_->f32.assign(n, 0.0f);
    else impl_->f64.assign(n, 0.0);
}

Tensor::Tensor(Shape shape, std::vector<float> values) : impl_(std::make_shared<TensorImpl>())
{
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape "
                         + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->dtype = DType::kF32;
    impl_->f32 = std::move(values);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<TensorImpl>())
{
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size()))
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape "
                         + shape_str(shape));
    impl_->shape = std::move(shape);
    impl_->dtype = DType::kF64;
    impl_->f64 = std::move(values);
}

Tensor Tensor::scalar(double value, DType dtype)
{
    return full({}, value, dtype);
}

Tensor Tensor::full(Shape shape, double value, DType dtype)
{
    Tensor t(std::move(shape), dtype);
    if (dtype == DType::kF32) std::fill(t.impl_->f32.begin(), t.impl_->f32.end(), static_cast<float>(value));
    else std::fill(t.impl_->f64.begin(), t.impl_->f64.end(), value);
    return t;
}

std::int64_t Tensor::dim(int axis) const
{
    const int r = rank();
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r)
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    return impl_->shape[static_cast<std::size_t>(a)];
}

void Tensor::zero_grad()
{
    impl_->grad_f32.clear();
    impl_->grad_f64.clear();
}

double Tensor::item() const
{
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return at(0);
}

double Tensor::at(std::int64_t i) const
{
    return impl_->dtype == DType::kF32 ? static_cast<double>(impl_->f32[static_cast<std::size_t>(i)])
                                       : impl_->f64[static_cast<std::size_t>(i)];
}

void Tensor::set(std::int64_t i, double value)
{
    if (impl_->dtype == DType::kF32) impl_->f32[static_cast<std::size_t>(i)] = static_cast<float>(value);
    else impl_->f64[static_cast<std::size_t>(i)] = value;
}

std::vector<float> Tensor::to_f32_vector() const
{
    if (impl_->dtype == DType::kF32) return impl_->f32;
    return {impl_->f64.begin(), impl_->f64.end()};
}

std::vector<double> Tensor::to_f64_vector() const
{
    if (impl_->dtype == DType::kF64) return impl_->f64;
    return {impl_->f32.begin(), impl_->f32.end()};
}

std::vector<double> Tensor::grad_f64_vector() const
{
    if (!has_grad()) return std::vector<double>(static_cast<std::size_t>(numel()), 0.0);
    if (impl_->dtype == DType::kF64) return impl_->grad_f64;
    return {impl_->grad_f32.begin(), impl_->grad_f32.end()};
}

Tensor Tensor::clone() const
{
    return to(dtype());
}

Tensor Tensor::to(DType target) const
{
    if (target == DType::kF32) return Tensor(shape(), to_f32_vector());
    return Tensor(shape(), to_f64_vector());
}

void Tensor::assign(const Tensor& other)
{
    if (other.shape() != shape())
        throw ShapeError("assign: shape " + shape_str(other.shape()) + " into " + shape_str(shape()));
    if (dtype() == DType::kF32) impl_->f32 = other.to_f32_vector();
    else impl_->f64 = other.to_f64_vector();
}

void GradTape::backward(const Tensor& loss)
{
    if (loss.numel() != 1) throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    loss.impl()->ensure_grad();
    if (loss.dtype() == DType::kF32) loss.impl()->grad_f32[0] = 1.0f;
    else loss.impl()->grad_f64[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

GradTape* active_tape()
{
    return g_active_tape;
}

TapeScope::TapeScope(GradTape& tape) : previous_(g_active_tape)
{
    g_active_tape = &tape;
}

TapeScope::~TapeScope()
{
    g_active_tape = previous_;
}

NoTapeScope::NoTapeScope() : previous_(g_active_tape)
{
    g_active_tape = nullptr;
}

NoTapeScope::~NoTapeScope()
{
    g_active_tape = previous_;
}

} // namespace syncflow
