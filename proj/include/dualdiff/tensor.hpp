#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace dualdiff {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

const char* dtype_name(DType dtype);

using Shape = std::vector<std::int64_t>;

inline constexpr int kMaxRank = 5;

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
   public:
    using std::domain_error::domain_error;
};

// Calls f.template operator()<T>() with T matching the runtime dtype.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
    if (dtype == DType::f32) return f.template operator()<float>();
    return f.template operator()<double>();
}

template <class T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// Dense row-major tensor (last axis fastest). Every extent is >= 1 and the
/// rank is between 1 and kMaxRank; a scalar is shape [1].
class Tensor {
   public:
    Tensor() = default;
    Tensor(Shape shape, DType dtype);

    static Tensor filled(Shape shape, DType dtype, double value);
    static Tensor from(Shape shape, std::span<const double> values, DType dtype);
    static Tensor scalar(double value, DType dtype) { return filled({1}, dtype, value); }

    DType dtype() const { return dtype_; }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t extent(int axis) const;
    std::int64_t numel() const { return numel_; }
    bool defined() const { return numel_ > 0; }

    template <class T>
    std::span<T> data() {
        return std::get<std::vector<T>>(buffer_);
    }
    template <class T>
    std::span<const T> data() const {
        return std::get<std::vector<T>>(buffer_);
    }

    double item(std::int64_t index) const;
    void set_item(std::int64_t index, double value);
    std::vector<double> to_vector() const;

    // Same buffer, new shape with equal element count.
    Tensor reshaped(Shape shape) const;
    Tensor cast(DType dtype) const;

    bool all_finite() const;
    // Bitwise equality of shape, dtype and payload.
    bool identical(const Tensor& other) const;

   private:
    Shape shape_;
    DType dtype_ = DType::f32;
    std::int64_t numel_ = 0;
    std::variant<std::vector<float>, std::vector<double>> buffer_;
};

void check_shape(const Shape& shape);

}  // namespace dualdiff
