#include "dualdiff/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#include "dualdiff/reference.hpp"

namespace dualdiff::kernels {

namespace {

template <class T>
const T* packed(const T* src, std::int64_t rows, std::int64_t cols, bool transpose, std::vector<T>& buffer) {
    if (!transpose) return src;
    // src holds the [cols, rows] matrix; produce its row-major transpose.
    constexpr std::int64_t kTile = 32;
    buffer.resize(static_cast<std::size_t>(rows * cols));
    for (std::int64_t c0 = 0; c0 < cols; c0 += kTile)
        for (std::int64_t r0 = 0; r0 < rows; r0 += kTile) {
            const std::int64_t c1 = std::min(cols, c0 + kTile), r1 = std::min(rows, r0 + kTile);
            for (std::int64_t r = r0; r < r1; ++r)
                for (std::int64_t c = c0; c < c1; ++c) buffer[static_cast<std::size_t>(r * cols + c)] = src[c * rows + r];
        }
    return buffer.data();
}

constexpr std::int64_t kRowBlock = 4;
constexpr int kVecBytes = 64;
constexpr int kVecsPerRow = 2;

template <class T>
struct Lanes {
    typedef T vec __attribute__((vector_size(kVecBytes)));
    static constexpr std::int64_t count = kVecBytes / static_cast<int>(sizeof(T));
};

// Column block: two vectors per row.
template <class T>
constexpr std::int64_t kColBlock = kVecsPerRow * Lanes<T>::count;

// Full 4-row block held in registers.
template <class T>
void micro_kernel(const T* A, std::int64_t a_row, std::int64_t a_step, std::int64_t k, const T* B, std::int64_t ldb, T* C, std::int64_t ldc, bool accumulate) {
    using V = typename Lanes<T>::vec;
    constexpr std::int64_t L = Lanes<T>::count;
    V acc[kRowBlock][kVecsPerRow];
    for (auto& row : acc)
        for (auto& v : row) v = V{};
    for (std::int64_t p = 0; p < k; ++p) {
        V b[kVecsPerRow];
        for (int q = 0; q < kVecsPerRow; ++q) std::memcpy(&b[q], B + p * ldb + q * L, sizeof(V));
        for (int r = 0; r < kRowBlock; ++r) {
            const T av = A[r * a_row + p * a_step];
            for (int q = 0; q < kVecsPerRow; ++q) acc[r][q] += b[q] * av;
        }
    }
    for (int r = 0; r < kRowBlock; ++r)
        for (int q = 0; q < kVecsPerRow; ++q) {
            T* out = C + r * ldc + q * L;
            if (accumulate) {
                V cur;
                std::memcpy(&cur, out, sizeof(V));
                cur += acc[r][q];
                std::memcpy(out, &cur, sizeof(V));
            } else {
                std::memcpy(out, &acc[r][q], sizeof(V));
            }
        }
}

}  // namespace

// Every entry is accumulated over k in index order with separate multiply and
// add, whatever its position, so equal inputs give bit-equal outputs.
template <class T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n,
          bool transpose_a, bool transpose_b, bool accumulate) {
    constexpr std::int64_t kCols = kColBlock<T>;
    std::vector<T> b_buf;
    // A is read in place through strides; B is packed to row-major when transposed.
    const std::int64_t a_row = transpose_a ? 1 : k;
    const std::int64_t a_step = transpose_a ? m : 1;
    const T* B = packed(b, k, n, transpose_b, b_buf);
    const std::int64_t row_blocks = (m + kRowBlock - 1) / kRowBlock;
#pragma omp parallel for schedule(static) if (m * n * k > (1 << 22))
    for (std::int64_t rb = 0; rb < row_blocks; ++rb) {
        const std::int64_t i0 = rb * kRowBlock;
        const std::int64_t rows = std::min(kRowBlock, m - i0);
        alignas(64) T acc[kRowBlock][kCols];
        for (std::int64_t j0 = 0; j0 < n; j0 += kCols) {
            const std::int64_t cols = std::min(kCols, n - j0);
            if (rows == kRowBlock && cols == kCols) {
                micro_kernel(a + i0 * a_row, a_row, a_step, k, B + j0, n, c + i0 * n + j0, n, accumulate);
                continue;
            }
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < kCols; ++j) acc[r][j] = T(0);
            for (std::int64_t p = 0; p < k; ++p) {
                const T* brow = B + p * n + j0;
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T av = a[(i0 + r) * a_row + p * a_step];
                    T* out = acc[r];
                    for (std::int64_t j = 0; j < cols; ++j) out[j] += av * brow[j];
                }
            }
            for (std::int64_t r = 0; r < rows; ++r) {
                T* crow = c + (i0 + r) * n + j0;
                if (accumulate)
                    for (std::int64_t j = 0; j < cols; ++j) crow[j] += acc[r][j];
                else
                    for (std::int64_t j = 0; j < cols; ++j) crow[j] = acc[r][j];
            }
        }
    }
}

template <class T>
T pairwise_sum(std::span<const T> values) {
    constexpr std::size_t kLeaf = 8;
    if (values.size() <= kLeaf) {
        T s = T(0);
        for (T v : values) s += v;
        return s;
    }
    const std::size_t half = values.size() / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

template <class T>
void im2col(const T* image, const ConvGeometry& g, T* col) {
    const std::int64_t oh = g.out_height();
    const std::int64_t ow = g.out_width();
    const std::int64_t rows = g.patch_size();
#pragma omp parallel for if (rows * oh * ow > 65536)
    for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t c = r / (g.kernel_h * g.kernel_w);
        const std::int64_t ki = (r / g.kernel_w) % g.kernel_h;
        const std::int64_t kj = r % g.kernel_w;
        const T* plane = image + c * g.height * g.width;
        T* out = col + r * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y) {
            const std::int64_t iy = y * g.stride - g.pad + ki;
            for (std::int64_t x = 0; x < ow; ++x) {
                const std::int64_t ix = x * g.stride - g.pad + kj;
                out[y * ow + x] = (iy >= 0 && iy < g.height && ix >= 0 && ix < g.width)
                                      ? plane[iy * g.width + ix]
                                      : T(0);
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, const ConvGeometry& g, T* image) {
    const std::int64_t oh = g.out_height();
    const std::int64_t ow = g.out_width();
    const std::int64_t taps = g.kernel_h * g.kernel_w;
    // Parallel over channels: each channel plane is written by one thread only.
#pragma omp parallel for if (g.patch_size() * oh * ow > 65536)
    for (std::int64_t c = 0; c < g.in_channels; ++c) {
        T* plane = image + c * g.height * g.width;
        for (std::int64_t t = 0; t < taps; ++t) {
            const std::int64_t ki = t / g.kernel_w;
            const std::int64_t kj = t % g.kernel_w;
            const T* in = col + (c * taps + t) * oh * ow;
            for (std::int64_t y = 0; y < oh; ++y) {
                const std::int64_t iy = y * g.stride - g.pad + ki;
                if (iy < 0 || iy >= g.height) continue;
                for (std::int64_t x = 0; x < ow; ++x) {
                    const std::int64_t ix = x * g.stride - g.pad + kj;
                    if (ix < 0 || ix >= g.width) continue;
                    plane[iy * g.width + ix] += in[y * ow + x];
                }
            }
        }
    }
}

namespace {

bool is_pointwise(const ConvGeometry& g) {
    return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.pad == 0;
}

}  // namespace

template <class T>
void conv2d_forward(const T* x, const T* w, const T* bias, T* y, const ConvGeometry& g) {
    const std::int64_t hw_in = g.height * g.width;
    const std::int64_t hw_out = g.out_height() * g.out_width();
    const std::int64_t patch = g.patch_size();
    const bool pointwise = is_pointwise(g);
#pragma omp parallel if (g.batch > 1)
    {
        std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(patch * hw_out));
#pragma omp for
        for (std::int64_t n = 0; n < g.batch; ++n) {
            const T* xn = x + n * g.in_channels * hw_in;
            T* yn = y + n * g.out_channels * hw_out;
            const T* src = xn;
            if (!pointwise) {
                im2col(xn, g, col.data());
                src = col.data();
            }
            gemm(w, src, yn, g.out_channels, patch, hw_out, false, false, false);
            if (bias) {
                for (std::int64_t o = 0; o < g.out_channels; ++o)
                    for (std::int64_t i = 0; i < hw_out; ++i) yn[o * hw_out + i] += bias[o];
            }
        }
    }
}

template <class T>
void conv2d_backward(const T* x, const T* w, const T* grad_y, T* grad_x, T* grad_w, T* grad_b,
                     const ConvGeometry& g) {
    const std::int64_t hw_in = g.height * g.width;
    const std::int64_t hw_out = g.out_height() * g.out_width();
    const std::int64_t patch = g.patch_size();
    const bool pointwise = is_pointwise(g);
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(patch * hw_out));
    std::vector<T> grad_col(static_cast<std::size_t>(patch * hw_out));
    // Batch items are reduced in index order so weight gradients are deterministic.
    for (std::int64_t n = 0; n < g.batch; ++n) {
        const T* xn = x + n * g.in_channels * hw_in;
        const T* gyn = grad_y + n * g.out_channels * hw_out;
        if (grad_w) {
            const T* src = xn;
            if (!pointwise) {
                im2col(xn, g, col.data());
                src = col.data();
            }
            gemm(gyn, src, grad_w, g.out_channels, hw_out, patch, false, true, true);
        }
        if (grad_b) {
            for (std::int64_t o = 0; o < g.out_channels; ++o) {
                T s = T(0);
                for (std::int64_t i = 0; i < hw_out; ++i) s += gyn[o * hw_out + i];
                grad_b[o] += s;
            }
        }
        if (grad_x) {
            T* gxn = grad_x + n * g.in_channels * hw_in;
            if (pointwise) {
                gemm(w, gyn, gxn, patch, g.out_channels, hw_out, true, false, true);
            } else {
                gemm(w, gyn, grad_col.data(), patch, g.out_channels, hw_out, true, false, false);
                col2im_add(grad_col.data(), g, gxn);
            }
        }
    }
}

#define DUALDIFF_INSTANTIATE(T)                                                                    \
    template void gemm<T>(const T*, const T*, T*, std::int64_t, std::int64_t, std::int64_t, bool,  \
                          bool, bool);                                                             \
    template T pairwise_sum<T>(std::span<const T>);                                                \
    template void im2col<T>(const T*, const ConvGeometry&, T*);                                    \
    template void col2im_add<T>(const T*, const ConvGeometry&, T*);                                \
    template void conv2d_forward<T>(const T*, const T*, const T*, T*, const ConvGeometry&);        \
    template void conv2d_backward<T>(const T*, const T*, const T*, T*, T*, T*, const ConvGeometry&);

DUALDIFF_INSTANTIATE(float)
DUALDIFF_INSTANTIATE(double)
#undef DUALDIFF_INSTANTIATE

}  // namespace dualdiff::kernels

namespace dualdiff::reference {

template <class T>
void matmul(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            T s = T(0);
            for (std::int64_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = s;
        }
}

template <class T>
void conv2d(const T* x, const T* w, const T* bias, T* y, const kernels::ConvGeometry& g) {
    const std::int64_t oh = g.out_height();
    const std::int64_t ow = g.out_width();
    for (std::int64_t n = 0; n < g.batch; ++n)
        for (std::int64_t o = 0; o < g.out_channels; ++o)
            for (std::int64_t oy = 0; oy < oh; ++oy)
                for (std::int64_t ox = 0; ox < ow; ++ox) {
                    T s = bias ? bias[o] : T(0);
                    for (std::int64_t c = 0; c < g.in_channels; ++c)
                        for (std::int64_t ki = 0; ki < g.kernel_h; ++ki)
                            for (std::int64_t kj = 0; kj < g.kernel_w; ++kj) {
                                const std::int64_t iy = oy * g.stride - g.pad + ki;
                                const std::int64_t ix = ox * g.stride - g.pad + kj;
                                if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
                                s += w[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj] *
                                     x[((n * g.in_channels + c) * g.height + iy) * g.width + ix];
                            }
                    y[((n * g.out_channels + o) * oh + oy) * ow + ox] = s;
                }
}

template void matmul<float>(const float*, const float*, float*, std::int64_t, std::int64_t,
                            std::int64_t);
template void matmul<double>(const double*, const double*, double*, std::int64_t, std::int64_t,
                             std::int64_t);
template void conv2d<float>(const float*, const float*, const float*, float*,
                            const kernels::ConvGeometry&);
template void conv2d<double>(const double*, const double*, const double*, double*,
                             const kernels::ConvGeometry&);

}  // namespace dualdiff::reference
