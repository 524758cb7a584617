#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace syncflow {

using Shape = std::vector<std::int64_t>;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
    Shape shape;
    DType dtype = DType::kF32;
    std::vector<float> f32;
    std::vector<double> f64;
    std::vector<float> grad_f32;
    std::vector<double> grad_f64;
    bool requires_grad = false;

    std::int64_t numel() const { return shape_numel(shape); }
    bool has_grad() const { return dtype == DType::kF32 ? !grad_f32.empty() : !grad_f64.empty(); }
    void ensure_grad();

    template <class T>
    std::vector<T>& values()
    {
        if constexpr (std::is_same_v<T, float>) return f32;
        else return f64;
    }
    template <class T>
    std::vector<T>& grads()
    {
        if constexpr (std::is_same_v<T, float>) return grad_f32;
        else return grad_f64;
    }
};

// Dense row-major tensor with shared ownership. Copies of a Tensor alias the
// same storage; use clone()/detach() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, DType dtype = DType::kF32);
    Tensor(Shape shape, std::vector<float> values);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value, DType dtype = DType::kF32);
    static Tensor full(Shape shape, double value, DType dtype = DType::kF32);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    // Negative axes count from the back.
    std::int64_t dim(int axis) const;
    std::int64_t numel() const { return impl_->numel(); }
    DType dtype() const { return impl_->dtype; }

    template <class T>
    std::span<T> data()
    {
        return impl_->values<T>();
    }
    template <class T>
    std::span<const T> data() const
    {
        return impl_->values<T>();
    }
    // Gradient buffers are accumulation targets even through const handles.
    template <class T>
    std::span<T> grad() const
    {
        return impl_->grads<T>();
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }
    bool has_grad() const { return impl_->has_grad(); }
    void zero_grad();

    // Value accessors that work for either dtype.
    double item() const;
    double at(std::int64_t flat_index) const;
    void set(std::int64_t flat_index, double value);
    std::vector<float> to_f32_vector() const;
    std::vector<double> to_f64_vector() const;
    std::vector<double> grad_f64_vector() const;

    // Deep copies; the result is a leaf without gradient history.
    Tensor clone() const;
    Tensor to(DType dtype) const;
    // Copies values from other (same shape), converting dtype when needed.
    void assign(const Tensor& other);

    TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of backward closures. Operations append while a tape is
// active on the current thread; backward() replays them in reverse.
class GradTape {
public:
    using Backward = std::function<void()>;

    void record(Backward fn) { entries_.push_back(std::move(fn)); }
    // Seeds d(loss)/d(loss) = 1 and propagates to every tensor with
    // requires_grad that the loss depends on.
    void backward(const Tensor& loss);
    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }

private:
    std::vector<Backward> entries_;
};

GradTape* active_tape();

// Activates a tape for the lifetime of the scope (nests; restores previous).
class TapeScope {
public:
    explicit TapeScope(GradTape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    GradTape* previous_;
};

// Suspends recording for the lifetime of the scope.
class NoTapeScope {
public:
    NoTapeScope();
    ~NoTapeScope();
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

private:
    GradTape* previous_;
};

// Runs f with tensor and dtype specific element type T.
template <class F>
decltype(auto) dispatch_dtype(DType dtype, F&& f)
{
    if (dtype == DType::kF64) return f(std::type_identity<double>{});
    return f(std::type_identity<float>{});
}

} // namespace syncflow
