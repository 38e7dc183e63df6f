#include "dualdiff/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace dualdiff {

const char* dtype_name(DType dtype) { return dtype == DType::f32 ? "f32" : "f64"; }

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << ',';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

void check_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > static_cast<std::size_t>(kMaxRank))
        throw ShapeError("tensor rank must be in [1," + std::to_string(kMaxRank) + "], got " +
                         shape_str(shape));
    for (auto e : shape)
        if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape));
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
    check_shape(shape_);
    numel_ = shape_numel(shape_);
    if (dtype == DType::f32)
        buffer_ = std::vector<float>(static_cast<std::size_t>(numel_), 0.0f);
    else
        buffer_ = std::vector<double>(static_cast<std::size_t>(numel_), 0.0);
}

Tensor Tensor::filled(Shape shape, DType dtype, double value) {
    Tensor t(std::move(shape), dtype);
    dispatch(dtype, [&]<class T>() {
        for (auto& x : t.data<T>()) x = static_cast<T>(value);
    });
    return t;
}

Tensor Tensor::from(Shape shape, std::span<const double> values, DType dtype) {
    Tensor t(std::move(shape), dtype);
    if (static_cast<std::int64_t>(values.size()) != t.numel())
        throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(t.shape()));
    dispatch(dtype, [&]<class T>() {
        auto d = t.data<T>();
        for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
    });
    return t;
}

std::int64_t Tensor::extent(int axis) const {
    if (axis < 0) axis += rank();
    if (axis < 0 || axis >= rank())
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item(std::int64_t index) const {
    return dispatch(dtype_, [&]<class T>() { return static_cast<double>(data<T>()[index]); });
}

void Tensor::set_item(std::int64_t index, double value) {
    dispatch(dtype_, [&]<class T>() { data<T>()[index] = static_cast<T>(value); });
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(static_cast<std::size_t>(numel_));
    dispatch(dtype_, [&]<class T>() {
        auto d = data<T>();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i];
    });
    return out;
}

Tensor Tensor::reshaped(Shape shape) const {
    check_shape(shape);
    if (shape_numel(shape) != numel_)
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
}

Tensor Tensor::cast(DType dtype) const {
    if (dtype == dtype_) return *this;
    Tensor t(shape_, dtype);
    dispatch(dtype_, [&]<class S>() {
        dispatch(dtype, [&]<class D>() {
            auto src = data<S>();
            auto dst = t.data<D>();
            for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
        });
    });
    return t;
}

bool Tensor::all_finite() const {
    return dispatch(dtype_, [&]<class T>() {
        for (T x : data<T>())
            if (!std::isfinite(x)) return false;
        return true;
    });
}

bool Tensor::identical(const Tensor& other) const {
    if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
    return dispatch(dtype_, [&]<class T>() {
        auto a = data<T>();
        auto b = other.data<T>();
        return std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
    });
}

}  // namespace dualdiff
