#pragma once

// Serial reference implementations. They are the slow, obviously-correct
// counterparts of the parallel kernels and are kept for tests and benchmarks.

#include <cstdint>

#include "dualdiff/kernels.hpp"

namespace dualdiff::reference {

template <class T>
void matmul(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n);

// Direct 7-loop convolution.
template <class T>
void conv2d(const T* x, const T* w, const T* bias, T* y, const kernels::ConvGeometry& g);

}  // namespace dualdiff::reference
