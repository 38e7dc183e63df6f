#pragma once

// Data-parallel numeric kernels. Every kernel here partitions its output
// disjointly across OpenMP threads, so results are bitwise independent of the
// thread count. Serial counterparts live in reference.hpp.

#include <cstdint>
#include <span>

namespace dualdiff::kernels {

struct ConvGeometry {
    std::int64_t batch = 1;
    std::int64_t in_channels = 1;
    std::int64_t height = 1;
    std::int64_t width = 1;
    std::int64_t out_channels = 1;
    std::int64_t kernel_h = 1;
    std::int64_t kernel_w = 1;
    std::int64_t stride = 1;
    std::int64_t pad = 0;

    std::int64_t out_height() const { return (height + 2 * pad - kernel_h) / stride + 1; }
    std::int64_t out_width() const { return (width + 2 * pad - kernel_w) / stride + 1; }
    std::int64_t patch_size() const { return in_channels * kernel_h * kernel_w; }
};

// C[m,n] (+)= op(A) * op(B), row-major. op(A) is [m,k], op(B) is [k,n].
template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
          bool transpose_a, bool transpose_b, bool accumulate);

// Pairwise (tree) summation; order is fixed by the length alone.
template <class T>
T pairwise_sum(std::span<const T> values);

// col is [patch_size, out_h*out_w] for one batch item.
template <class T>
void im2col(const T* image, const ConvGeometry& g, T* col);
template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* image);

// x [N,Cin,H,W], w [Cout,Cin,kh,kw], bias [Cout] or null -> y [N,Cout,Ho,Wo].
template <class T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, const ConvGeometry& g);

// Accumulates into any non-null gradient buffer.
template <class T>
void conv2d_backward(const T* x, const T* w, const T* grad_y, T* grad_x, T* grad_w, T* grad_b,
                     const ConvGeometry& g);

}  // namespace dualdiff::kernels
