#include "dualdiff/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>

#include "dualdiff/kernels.hpp"

namespace dualdiff::ad {

namespace {

std::atomic<bool> g_checked{false};
thread_local bool g_grad_enabled = true;

constexpr std::int64_t kParallelThreshold = 1 << 15;

using Backward = std::function<void(Node&)>;

void check_finite(const Tensor& t, const char* op) {
    if (g_checked.load(std::memory_order_relaxed) && !t.all_finite())
        throw NonFiniteError(std::string(op) + ": non-finite operand of shape " +
                             shape_str(t.shape()));
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    if (a.dtype() != b.dtype())
        throw ShapeError(std::string(op) + ": dtype mismatch " + dtype_name(a.dtype()) + " vs " +
                         dtype_name(b.dtype()));
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                     shape_str(b));
}

int normalize_axis(int axis, int rank, const char* op) {
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank)
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
    return axis;
}

Var make(Op op, Tensor value, std::initializer_list<const Var*> inputs, Backward fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    bool needs = false;
    if (g_grad_enabled)
        for (const Var* in : inputs)
            if (in && *in && in->requires_grad()) needs = true;
    if (needs) {
        node->requires_grad = true;
        for (const Var* in : inputs) node->parents.push_back(in && *in ? in->ptr() : nullptr);
        node->backward = std::move(fn);
    }
    return Var(std::move(node));
}

Var make_many(Op op, Tensor value, std::span<const Var> inputs, Backward fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    bool needs = false;
    if (g_grad_enabled)
        for (const Var& in : inputs)
            if (in.requires_grad()) needs = true;
    if (needs) {
        node->requires_grad = true;
        for (const Var& in : inputs) node->parents.push_back(in.ptr());
        node->backward = std::move(fn);
    }
    return Var(std::move(node));
}

bool wants(const Node& self, std::size_t i) {
    return i < self.parents.size() && self.parents[i] && self.parents[i]->requires_grad;
}

// Adds g into the parent's gradient buffer.
void accumulate(Node& parent, Tensor g) {
    if (!parent.requires_grad) return;
    if (!parent.grad.defined()) {
        parent.grad = std::move(g);
        return;
    }
    if (parent.grad.shape() != g.shape()) shape_mismatch("accumulate", parent.grad.shape(), g.shape());
    dispatch(g.dtype(), [&]<class T>() {
        auto dst = parent.grad.data<T>();
        auto src = g.data<T>();
        const auto n = static_cast<std::int64_t>(dst.size());
#pragma omp parallel for if (n > kParallelThreshold)
        for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
    });
}

template <class T, class F>
Tensor map_unary(const Tensor& a, F f) {
    Tensor out(a.shape(), a.dtype());
    auto src = a.data<T>();
    auto dst = out.data<T>();
    const auto n = static_cast<std::int64_t>(src.size());
#pragma omp parallel for if (n > kParallelThreshold)
    for (std::int64_t i = 0; i < n; ++i) dst[i] = f(src[i]);
    return out;
}

template <class T, class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
    Tensor out(a.shape(), a.dtype());
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto dst = out.data<T>();
    const auto n = static_cast<std::int64_t>(x.size());
#pragma omp parallel for if (n > kParallelThreshold)
    for (std::int64_t i = 0; i < n; ++i) dst[i] = f(x[i], y[i]);
    return out;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::int64_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::int64_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (ea != eb && ea != 1 && eb != 1) shape_mismatch(op, a, b);
        out[i] = std::max(ea, eb);
    }
    return out;
}

// For each flat output index, the flat source index under broadcasting.
std::vector<std::int64_t> broadcast_index(const Shape& src, const Shape& dst) {
    const std::size_t rank = dst.size();
    const std::size_t lead = rank - src.size();
    std::vector<std::int64_t> stride(rank, 0);
    std::int64_t s = 1;
    for (std::size_t i = rank; i-- > lead;) {
        const std::int64_t e = src[i - lead];
        stride[i] = e == 1 ? 0 : s;
        s *= e;
    }
    const std::int64_t n = shape_numel(dst);
    std::vector<std::int64_t> map(static_cast<std::size_t>(n));
    std::vector<std::int64_t> counter(rank, 0);
    std::int64_t offset = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        map[static_cast<std::size_t>(i)] = offset;
        for (std::size_t d = rank; d-- > 0;) {
            ++counter[d];
            offset += stride[d];
            if (counter[d] < dst[d]) break;
            offset -= stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    return map;
}

// Outer/axis/inner decomposition used by reductions, concat, slice, softmax.
struct AxisSplit {
    std::int64_t outer = 1;
    std::int64_t axis = 1;
    std::int64_t inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
    AxisSplit s;
    for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    s.axis = shape[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

Tensor swap_axes(const Tensor& a, int axis0, int axis1) {
    Shape out_shape = a.shape();
    std::swap(out_shape[static_cast<std::size_t>(axis0)], out_shape[static_cast<std::size_t>(axis1)]);
    const std::size_t rank = out_shape.size();
    std::vector<std::int64_t> in_stride(rank);
    std::int64_t s = 1;
    for (std::size_t i = rank; i-- > 0;) {
        in_stride[i] = s;
        s *= a.shape()[i];
    }
    std::vector<std::int64_t> stride = in_stride;
    std::swap(stride[static_cast<std::size_t>(axis0)], stride[static_cast<std::size_t>(axis1)]);
    Tensor out(out_shape, a.dtype());
    dispatch(a.dtype(), [&]<class T>() {
        auto src = a.data<T>();
        auto dst = out.data<T>();
        std::vector<std::int64_t> counter(rank, 0);
        std::int64_t offset = 0;
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] = src[static_cast<std::size_t>(offset)];
            for (std::size_t d = rank; d-- > 0;) {
                ++counter[d];
                offset += stride[d];
                if (counter[d] < out_shape[d]) break;
                offset -= stride[d] * counter[d];
                counter[d] = 0;
            }
        }
    });
    return out;
}

// Sums g over broadcast axes back to the source shape.
Tensor unbroadcast(const Tensor& g, const Shape& src) {
    if (g.shape() == src) return g;
    const auto map = broadcast_index(src, g.shape());
    Tensor out(src, g.dtype());
    dispatch(g.dtype(), [&]<class T>() {
        auto gd = g.data<T>();
        auto od = out.data<T>();
        for (std::size_t i = 0; i < gd.size(); ++i) od[static_cast<std::size_t>(map[i])] += gd[i];
    });
    return out;
}

enum class Arith { add, sub, mul };

Var arith(const Var& a_in, const Var& b_in, Arith kind, Op op, const char* name) {
    require_same_dtype(a_in.value(), b_in.value(), name);
    const Shape out_shape = broadcast_shape(a_in.shape(), b_in.shape(), name);
    const Var a = broadcast_to(a_in, out_shape);
    const Var b = broadcast_to(b_in, out_shape);
    check_finite(a.value(), name);
    check_finite(b.value(), name);
    Tensor value = dispatch(a.dtype(), [&]<class T>() {
        switch (kind) {
            case Arith::add: return map_binary<T>(a.value(), b.value(), [](T x, T y) { return x + y; });
            case Arith::sub: return map_binary<T>(a.value(), b.value(), [](T x, T y) { return x - y; });
            default: return map_binary<T>(a.value(), b.value(), [](T x, T y) { return x * y; });
        }
    });
    return make(op, std::move(value), {&a, &b}, [kind](Node& self) {
        const Tensor& g = self.grad;
        dispatch(g.dtype(), [&]<class T>() {
            if (wants(self, 0)) {
                if (kind == Arith::mul)
                    accumulate(*self.parents[0], map_binary<T>(g, self.parents[1]->value,
                                                               [](T x, T y) { return x * y; }));
                else
                    accumulate(*self.parents[0], g);
            }
            if (wants(self, 1)) {
                if (kind == Arith::mul)
                    accumulate(*self.parents[1], map_binary<T>(g, self.parents[0]->value,
                                                               [](T x, T y) { return x * y; }));
                else if (kind == Arith::sub)
                    accumulate(*self.parents[1], map_unary<T>(g, [](T x) { return -x; }));
                else
                    accumulate(*self.parents[1], g);
            }
        });
    });
}

}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::matmul: return "matmul";
        case Op::reshape: return "reshape";
        case Op::transpose: return "transpose";
        case Op::concat: return "concat";
        case Op::slice: return "slice";
        case Op::broadcast: return "broadcast";
        case Op::sum: return "sum";
        case Op::mean: return "mean";
        case Op::softmax: return "softmax";
        case Op::tanh: return "tanh";
        case Op::sigmoid: return "sigmoid";
        case Op::silu: return "silu";
        case Op::layer_norm: return "layer_norm";
        case Op::conv2d: return "conv2d";
        case Op::conv2d_zero_init: return "conv2d_zero_init";
        case Op::avg_pool2d: return "avg_pool2d";
        case Op::upsample_nearest: return "upsample_nearest";
        case Op::embedding_lookup: return "embedding_lookup";
        case Op::linear_interp_1d: return "linear_interp_1d";
        case Op::scaled_dot_attention: return "scaled_dot_attention";
    }
    return "?";
}

Var constant(Tensor value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    return Var(std::move(node));
}

Var variable(Tensor value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
}

void set_checked(bool on) { g_checked.store(on); }
bool checked() { return g_checked.load(); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var add(const Var& a, const Var& b) { return arith(a, b, Arith::add, Op::add, "add"); }
Var sub(const Var& a, const Var& b) { return arith(a, b, Arith::sub, Op::sub, "sub"); }
Var mul(const Var& a, const Var& b) { return arith(a, b, Arith::mul, Op::mul, "mul"); }

Var scale(const Var& a, double factor) {
    return mul(a, constant(Tensor::scalar(factor, a.dtype())));
}

Var broadcast_to(const Var& a, const Shape& shape) {
    if (a.shape() == shape) return a;
    if (broadcast_shape(a.shape(), shape, "broadcast") != shape)
        shape_mismatch("broadcast", a.shape(), shape);
    const auto map = broadcast_index(a.shape(), shape);
    Tensor value(shape, a.dtype());
    dispatch(a.dtype(), [&]<class T>() {
        auto src = a.value().data<T>();
        auto dst = value.data<T>();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = src[static_cast<std::size_t>(map[i])];
    });
    return make(Op::broadcast, std::move(value), {&a}, [](Node& self) {
        accumulate(*self.parents[0], unbroadcast(self.grad, self.parents[0]->value.shape()));
    });
}

Var matmul(const Var& a, const Var& b) {
    require_same_dtype(a.value(), b.value(), "matmul");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) shape_mismatch("matmul", sa, sb);
    const std::int64_t m = sa[sa.size() - 2];
    const std::int64_t k = sa.back();
    if (sb[sb.size() - 2] != k) shape_mismatch("matmul", sa, sb);
    const std::int64_t n = sb.back();
    const bool shared = sb.size() == 2;
    if (!shared && (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())))
        shape_mismatch("matmul", sa, sb);
    check_finite(a.value(), "matmul");
    check_finite(b.value(), "matmul");
    std::int64_t batch = 1;
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
    Shape out_shape = sa;
    out_shape.back() = n;
    Tensor value(out_shape, a.dtype());
    dispatch(a.dtype(), [&]<class T>() {
        const T* pa = a.value().data<T>().data();
        const T* pb = b.value().data<T>().data();
        T* pc = value.data<T>().data();
        if (shared) {
            kernels::gemm(pa, pb, pc, batch * m, k, n, false, false, false);
        } else {
            for (std::int64_t i = 0; i < batch; ++i)
                kernels::gemm(pa + i * m * k, pb + i * k * n, pc + i * m * n, m, k, n, false, false, false);
        }
    });
    return make(Op::matmul, std::move(value), {&a, &b}, [=](Node& self) {
        const Tensor& g = self.grad;
        const Tensor& av = self.parents[0]->value;
        const Tensor& bv = self.parents[1]->value;
        dispatch(g.dtype(), [&]<class T>() {
            const T* pg = g.data<T>().data();
            const T* pa = av.data<T>().data();
            const T* pb = bv.data<T>().data();
            if (wants(self, 0)) {
                Tensor ga(av.shape(), av.dtype());
                T* out = ga.data<T>().data();
                if (shared)
                    kernels::gemm(pg, pb, out, batch * m, n, k, false, true, false);
                else
                    for (std::int64_t i = 0; i < batch; ++i)
                        kernels::gemm(pg + i * m * n, pb + i * k * n, out + i * m * k, m, n, k, false, true, false);
                accumulate(*self.parents[0], std::move(ga));
            }
            if (wants(self, 1)) {
                Tensor gb(bv.shape(), bv.dtype());
                T* out = gb.data<T>().data();
                if (shared)
                    kernels::gemm(pa, pg, out, k, batch * m, n, true, false, false);
                else
                    for (std::int64_t i = 0; i < batch; ++i)
                        kernels::gemm(pa + i * m * k, pg + i * m * n, out + i * k * n, k, m, n, true, false, false);
                accumulate(*self.parents[1], std::move(gb));
            }
        });
    });
}

Var reshape(const Var& a, Shape shape) {
    Tensor value = a.value().reshaped(std::move(shape));
    return make(Op::reshape, std::move(value), {&a}, [](Node& self) {
        accumulate(*self.parents[0], self.grad.reshaped(self.parents[0]->value.shape()));
    });
}

Var transpose(const Var& a, int axis0, int axis1) {
    axis0 = normalize_axis(axis0, a.value().rank(), "transpose");
    axis1 = normalize_axis(axis1, a.value().rank(), "transpose");
    Tensor value = swap_axes(a.value(), axis0, axis1);
    return make(Op::transpose, std::move(value), {&a}, [=](Node& self) {
        accumulate(*self.parents[0], swap_axes(self.grad, axis0, axis1));
    });
}

Var concat(std::span<const Var> parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts.front().shape();
    axis = normalize_axis(axis, static_cast<int>(first.size()), "concat");
    Shape out_shape = first;
    out_shape[static_cast<std::size_t>(axis)] = 0;
    for (const Var& p : parts) {
        require_same_dtype(p.value(), parts.front().value(), "concat");
        const Shape& s = p.shape();
        if (s.size() != first.size()) shape_mismatch("concat", first, s);
        for (std::size_t i = 0; i < s.size(); ++i)
            if (static_cast<int>(i) != axis && s[i] != first[i]) shape_mismatch("concat", first, s);
        out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
    }
    const AxisSplit out_split = split_at(out_shape, axis);
    std::vector<std::int64_t> extents;
    for (const Var& p : parts) extents.push_back(p.shape()[static_cast<std::size_t>(axis)]);
    Tensor value(out_shape, first.empty() ? DType::f32 : parts.front().dtype());
    dispatch(value.dtype(), [&]<class T>() {
        auto dst = value.data<T>();
        std::int64_t offset = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            check_finite(parts[p].value(), "concat");
            auto src = parts[p].value().data<T>();
            const std::int64_t block = extents[p] * out_split.inner;
            for (std::int64_t o = 0; o < out_split.outer; ++o)
                std::copy_n(src.begin() + o * block, block,
                            dst.begin() + o * out_split.axis * out_split.inner + offset);
            offset += block;
        }
    });
    return make_many(Op::concat, std::move(value), parts, [=](Node& self) {
        dispatch(self.grad.dtype(), [&]<class T>() {
            auto g = self.grad.data<T>();
            std::int64_t offset = 0;
            for (std::size_t p = 0; p < extents.size(); ++p) {
                const std::int64_t block = extents[p] * out_split.inner;
                if (wants(self, p)) {
                    Tensor gp(self.parents[p]->value.shape(), self.grad.dtype());
                    auto dst = gp.data<T>();
                    for (std::int64_t o = 0; o < out_split.outer; ++o)
                        std::copy_n(g.begin() + o * out_split.axis * out_split.inner + offset, block,
                                    dst.begin() + o * block);
                    accumulate(*self.parents[p], std::move(gp));
                }
                offset += block;
            }
        });
    });
}

Var slice(const Var& a, int axis, std::int64_t start, std::int64_t stop) {
    axis = normalize_axis(axis, a.value().rank(), "slice");
    const std::int64_t extent = a.shape()[static_cast<std::size_t>(axis)];
    if (start < 0 || stop > extent || start >= stop)
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(stop) +
                         ") invalid for axis extent " + std::to_string(extent) + " of " +
                         shape_str(a.shape()));
    const AxisSplit s = split_at(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape[static_cast<std::size_t>(axis)] = stop - start;
    const std::int64_t block = (stop - start) * s.inner;
    Tensor value(out_shape, a.dtype());
    dispatch(a.dtype(), [&]<class T>() {
        auto src = a.value().data<T>();
        auto dst = value.data<T>();
        for (std::int64_t o = 0; o < s.outer; ++o)
            std::copy_n(src.begin() + (o * s.axis + start) * s.inner, block, dst.begin() + o * block);
    });
    return make(Op::slice, std::move(value), {&a}, [=](Node& self) {
        Tensor ga(self.parents[0]->value.shape(), self.grad.dtype());
        dispatch(ga.dtype(), [&]<class T>() {
            auto g = self.grad.data<T>();
            auto dst = ga.data<T>();
            for (std::int64_t o = 0; o < s.outer; ++o)
                std::copy_n(g.begin() + o * block, block, dst.begin() + (o * s.axis + start) * s.inner);
        });
        accumulate(*self.parents[0], std::move(ga));
    });
}

Var sum(const Var& a) {
    check_finite(a.value(), "sum");
    Tensor value = dispatch(a.dtype(), [&]<class T>() {
        return Tensor::scalar(static_cast<double>(kernels::pairwise_sum<T>(a.value().data<T>())), a.dtype());
    });
    return make(Op::sum, std::move(value), {&a}, [](Node& self) {
        accumulate(*self.parents[0],
                   Tensor::filled(self.parents[0]->value.shape(), self.grad.dtype(), self.grad.item(0)));
    });
}

Var sum(const Var& a, int axis) {
    axis = normalize_axis(axis, a.value().rank(), "sum");
    check_finite(a.value(), "sum");
    const AxisSplit s = split_at(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + axis);
    if (out_shape.empty()) out_shape = {1};
    Tensor value(out_shape, a.dtype());
    dispatch(a.dtype(), [&]<class T>() {
        auto src = a.value().data<T>();
        auto dst = value.data<T>();
        std::vector<T> column(static_cast<std::size_t>(s.axis));
        for (std::int64_t o = 0; o < s.outer; ++o)
            for (std::int64_t i = 0; i < s.inner; ++i) {
                for (std::int64_t j = 0; j < s.axis; ++j)
                    column[static_cast<std::size_t>(j)] = src[static_cast<std::size_t>((o * s.axis + j) * s.inner + i)];
                dst[static_cast<std::size_t>(o * s.inner + i)] = kernels::pairwise_sum<T>(column);
            }
    });
    return make(Op::sum, std::move(value), {&a}, [=](Node& self) {
        Tensor ga(self.parents[0]->value.shape(), self.grad.dtype());
        dispatch(ga.dtype(), [&]<class T>() {
            auto g = self.grad.data<T>();
            auto dst = ga.data<T>();
            for (std::int64_t o = 0; o < s.outer; ++o)
                for (std::int64_t j = 0; j < s.axis; ++j)
                    for (std::int64_t i = 0; i < s.inner; ++i)
                        dst[static_cast<std::size_t>((o * s.axis + j) * s.inner + i)] =
                            g[static_cast<std::size_t>(o * s.inner + i)];
        });
        accumulate(*self.parents[0], std::move(ga));
    });
}

Var mean(const Var& a) {
    check_finite(a.value(), "mean");
    const auto n = static_cast<double>(a.value().numel());
    Tensor value = dispatch(a.dtype(), [&]<class T>() {
        const T total = kernels::pairwise_sum<T>(a.value().data<T>());
        return Tensor::scalar(static_cast<double>(total / static_cast<T>(n)), a.dtype());
    });
    return make(Op::mean, std::move(value), {&a}, [n](Node& self) {
        Tensor ga(self.parents[0]->value.shape(), self.grad.dtype());
        dispatch(ga.dtype(), [&]<class T>() {
            const T v = static_cast<T>(self.grad.item(0)) / static_cast<T>(n);
            for (auto& x : ga.data<T>()) x = v;
        });
        accumulate(*self.parents[0], std::move(ga));
    });
}

Var softmax(const Var& a, int axis) {
    axis = normalize_axis(axis, a.value().rank(), "softmax");
    check_finite(a.value(), "softmax");
    const AxisSplit s = split_at(a.shape(), axis);
    Tensor value(a.shape(), a.dtype());
    dispatch(a.dtype(), [&]<class T>() {
        auto src = a.value().data<T>();
        auto dst = value.data<T>();
#pragma omp parallel for if (a.value().numel() > kParallelThreshold)
        for (std::int64_t o = 0; o < s.outer; ++o)
            for (std::int64_t i = 0; i < s.inner; ++i) {
                const std::int64_t base = o * s.axis * s.inner + i;
                T mx = src[static_cast<std::size_t>(base)];
                for (std::int64_t j = 1; j < s.axis; ++j) mx = std::max(mx, src[static_cast<std::size_t>(base + j * s.inner)]);
                T total = T(0);
                for (std::int64_t j = 0; j < s.axis; ++j) {
                    const T e = std::exp(src[static_cast<std::size_t>(base + j * s.inner)] - mx);
                    dst[static_cast<std::size_t>(base + j * s.inner)] = e;
                    total += e;
                }
                for (std::int64_t j = 0; j < s.axis; ++j) dst[static_cast<std::size_t>(base + j * s.inner)] /= total;
            }
    });
    return make(Op::softmax, std::move(value), {&a}, [=](Node& self) {
        Tensor ga(self.value.shape(), self.value.dtype());
        dispatch(ga.dtype(), [&]<class T>() {
            auto y = self.value.data<T>();
            auto g = self.grad.data<T>();
            auto dst = ga.data<T>();
            for (std::int64_t o = 0; o < s.outer; ++o)
                for (std::int64_t i = 0; i < s.inner; ++i) {
                    const std::int64_t base = o * s.axis * s.inner + i;
                    T dot = T(0);
                    for (std::int64_t j = 0; j < s.axis; ++j) {
                        const auto idx = static_cast<std::size_t>(base + j * s.inner);
                        dot += g[idx] * y[idx];
                    }
                    for (std::int64_t j = 0; j < s.axis; ++j) {
                        const auto idx = static_cast<std::size_t>(base + j * s.inner);
                        dst[idx] = y[idx] * (g[idx] - dot);
                    }
                }
        });
        accumulate(*self.parents[0], std::move(ga));
    });
}

Var tanh(const Var& a) {
    check_finite(a.value(), "tanh");
    Tensor value = dispatch(a.dtype(), [&]<class T>() {
        return map_unary<T>(a.value(), [](T x) { return std::tanh(x); });
    });
    return make(Op::tanh, std::move(value), {&a}, [](Node& self) {
        dispatch(self.grad.dtype(), [&]<class T>() {
            accumulate(*self.parents[0], map_binary<T>(self.grad, self.value,
                                                       [](T g, T y) { return g * (T(1) - y * y); }));
        });
    });
}

Var sigmoid(const Var& a) {
    check_finite(a.value(), "sigmoid");
    Tensor value = dispatch(a.dtype(), [&]<class T>() {
        return map_unary<T>(a.value(), [](T x) { return T(1) / (T(1) + std::exp(-x)); });
    });
    return make(Op::sigmoid, std::move(value), {&a}, [](Node& self) {
        dispatch(self.grad.dtype(), [&]<class T>() {
            accumulate(*self.parents[0], map_binary<T>(self.grad, self.value,
                                                       [](T g, T y) { return g * y * (T(1) - y); }));
        });
    });
}

Var silu(const Var& a) {
    check_finite(a.value(), "silu");
    Tensor value = dispatch(a.dtype(), [&]<class T>() {
        return map_unary<T>(a.value(), [](T x) { return x / (T(1) + std::exp(-x)); });
    });
    return make(Op::silu, std::move(value), {&a}, [](Node& self) {
        dispatch(self.grad.dtype(), [&]<class T>() {
            accumulate(*self.parents[0],
                       map_binary<T>(self.grad, self.parents[0]->value, [](T g, T x) {
                           const T s = T(1) / (T(1) + std::exp(-x));
                           return g * s * (T(1) + x * (T(1) - s));
                       }));
        });
    });
}

Var layer_norm(const Var& a, double eps) {
    check_finite(a.value(), "layer_norm");
    const std::int64_t width = a.shape().back();
    const std::int64_t rows = a.value().numel() / width;
    Tensor value(a.shape(), a.dtype());
    Tensor rstd({rows}, a.dtype());
    dispatch(a.dtype(), [&]<class T>() {
        auto src = a.value().data<T>();
        auto dst = value.data<T>();
        auto rs = rstd.data<T>();
        for (std::int64_t r = 0; r < rows; ++r) {
            auto row = src.subspan(static_cast<std::size_t>(r * width), static_cast<std::size_t>(width));
            const T mu = kernels::pairwise_sum<T>(row) / static_cast<T>(width);
            T var = T(0);
            for (T x : row) var += (x - mu) * (x - mu);
            var /= static_cast<T>(width);
            const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
            rs[static_cast<std::size_t>(r)] = inv;
            for (std::int64_t j = 0; j < width; ++j)
                dst[static_cast<std::size_t>(r * width + j)] = (row[static_cast<std::size_t>(j)] - mu) * inv;
        }
    });
    return make(Op::layer_norm, std::move(value), {&a}, [=](Node& self) {
        Tensor ga(self.value.shape(), self.value.dtype());
        dispatch(ga.dtype(), [&]<class T>() {
            auto y = self.value.data<T>();
            auto g = self.grad.data<T>();
            auto rs = rstd.data<T>();
            auto dst = ga.data<T>();
            for (std::int64_t r = 0; r < rows; ++r) {
                const std::size_t base = static_cast<std::size_t>(r * width);
                T mg = T(0), mgy = T(0);
                for (std::int64_t j = 0; j < width; ++j) {
                    mg += g[base + static_cast<std::size_t>(j)];
                    mgy += g[base + static_cast<std::size_t>(j)] * y[base + static_cast<std::size_t>(j)];
                }
                mg /= static_cast<T>(width);
                mgy /= static_cast<T>(width);
                for (std::int64_t j = 0; j < width; ++j) {
                    const std::size_t i = base + static_cast<std::size_t>(j);
                    dst[i] = rs[static_cast<std::size_t>(r)] * (g[i] - mg - y[i] * mgy);
                }
            }
        });
        accumulate(*self.parents[0], std::move(ga));
    });
}

namespace {

Var conv_impl(const Var& x, const Var& w, const Var& bias, Conv2dOptions opts, Op op) {
    const char* name = op_name(op);
    require_same_dtype(x.value(), w.value(), name);
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1]) shape_mismatch(name, sx, sw);
    if (bias) {
        require_same_dtype(x.value(), bias.value(), name);
        if (bias.shape() != Shape{sw[0]}) shape_mismatch(name, sw, bias.shape());
    }
    if (opts.stride < 1 || opts.pad < 0) throw ShapeError(std::string(name) + ": invalid stride/pad");
    kernels::ConvGeometry g{sx[0], sx[1], sx[2], sx[3], sw[0], sw[2], sw[3], opts.stride, opts.pad};
    if (g.out_height() < 1 || g.out_width() < 1) shape_mismatch(name, sx, sw);
    check_finite(x.value(), name);
    check_finite(w.value(), name);
    Tensor value({g.batch, g.out_channels, g.out_height(), g.out_width()}, x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        kernels::conv2d_forward<T>(x.value().data<T>().data(), w.value().data<T>().data(),
                                   bias ? bias.value().data<T>().data() : nullptr,
                                   value.data<T>().data(), g);
    });
    return make(op, std::move(value), {&x, &w, &bias}, [g](Node& self) {
        Tensor gx, gw, gb;
        if (wants(self, 0)) gx = Tensor(self.parents[0]->value.shape(), self.grad.dtype());
        if (wants(self, 1)) gw = Tensor(self.parents[1]->value.shape(), self.grad.dtype());
        if (wants(self, 2)) gb = Tensor(self.parents[2]->value.shape(), self.grad.dtype());
        dispatch(self.grad.dtype(), [&]<class T>() {
            kernels::conv2d_backward<T>(self.parents[0]->value.data<T>().data(),
                                        self.parents[1]->value.data<T>().data(),
                                        self.grad.data<T>().data(),
                                        gx.defined() ? gx.data<T>().data() : nullptr,
                                        gw.defined() ? gw.data<T>().data() : nullptr,
                                        gb.defined() ? gb.data<T>().data() : nullptr, g);
        });
        if (gx.defined()) accumulate(*self.parents[0], std::move(gx));
        if (gw.defined()) accumulate(*self.parents[1], std::move(gw));
        if (gb.defined()) accumulate(*self.parents[2], std::move(gb));
    });
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, Conv2dOptions opts) {
    return conv_impl(x, w, bias, opts, Op::conv2d);
}

Var conv2d_zero_init(const Var& x, const Var& w, const Var& bias, Conv2dOptions opts) {
    return conv_impl(x, w, bias, opts, Op::conv2d_zero_init);
}

Var avg_pool2d(const Var& x, std::int64_t k) {
    const Shape& s = x.shape();
    if (s.size() != 4 || k < 1 || s[2] % k != 0 || s[3] % k != 0)
        throw ShapeError("avg_pool2d: kernel " + std::to_string(k) + " does not tile " + shape_str(s));
    check_finite(x.value(), "avg_pool2d");
    const std::int64_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / k, ow = w / k;
    Tensor value({s[0], s[1], oh, ow}, x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        auto src = x.value().data<T>();
        auto dst = value.data<T>();
        const T inv = T(1) / static_cast<T>(k * k);
        for (std::int64_t p = 0; p < planes; ++p)
            for (std::int64_t i = 0; i < oh; ++i)
                for (std::int64_t j = 0; j < ow; ++j) {
                    T acc = T(0);
                    for (std::int64_t a = 0; a < k; ++a)
                        for (std::int64_t b = 0; b < k; ++b)
                            acc += src[static_cast<std::size_t>((p * h + i * k + a) * w + j * k + b)];
                    dst[static_cast<std::size_t>((p * oh + i) * ow + j)] = acc * inv;
                }
    });
    return make(Op::avg_pool2d, std::move(value), {&x}, [=](Node& self) {
        Tensor gx(self.parents[0]->value.shape(), self.grad.dtype());
        dispatch(gx.dtype(), [&]<class T>() {
            auto g = self.grad.data<T>();
            auto dst = gx.data<T>();
            const T inv = T(1) / static_cast<T>(k * k);
            for (std::int64_t p = 0; p < planes; ++p)
                for (std::int64_t i = 0; i < h; ++i)
                    for (std::int64_t j = 0; j < w; ++j)
                        dst[static_cast<std::size_t>((p * h + i) * w + j)] =
                            g[static_cast<std::size_t>((p * oh + i / k) * ow + j / k)] * inv;
        });
        accumulate(*self.parents[0], std::move(gx));
    });
}

Var upsample_nearest(const Var& x, std::int64_t f) {
    const Shape& s = x.shape();
    if (s.size() != 4 || f < 1) throw ShapeError("upsample_nearest: expects NCHW input, got " + shape_str(s));
    check_finite(x.value(), "upsample_nearest");
    const std::int64_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h * f, ow = w * f;
    Tensor value({s[0], s[1], oh, ow}, x.dtype());
    dispatch(x.dtype(), [&]<class T>() {
        auto src = x.value().data<T>();
        auto dst = value.data<T>();
        for (std::int64_t p = 0; p < planes; ++p)
            for (std::int64_t i = 0; i < oh; ++i)
                for (std::int64_t j = 0; j < ow; ++j)
                    dst[static_cast<std::size_t>((p * oh + i) * ow + j)] =
                        src[static_cast<std::size_t>((p * h + i / f) * w + j / f)];
    });
    return make(Op::upsample_nearest, std::move(value), {&x}, [=](Node& self) {
        Tensor gx(self.parents[0]->value.shape(), self.grad.dtype());
        dispatch(gx.dtype(), [&]<class T>() {
            auto g = self.grad.data<T>();
            auto dst = gx.data<T>();
            for (std::int64_t p = 0; p < planes; ++p)
                for (std::int64_t i = 0; i < oh; ++i)
                    for (std::int64_t j = 0; j < ow; ++j)
                        dst[static_cast<std::size_t>((p * h + i / f) * w + j / f)] +=
                            g[static_cast<std::size_t>((p * oh + i) * ow + j)];
        });
        accumulate(*self.parents[0], std::move(gx));
    });
}

Var embedding_lookup(const Var& table, std::span<const std::int64_t> ids) {
    const Shape& s = table.shape();
    if (s.size() != 2) throw ShapeError("embedding_lookup: table must be [V,d], got " + shape_str(s));
    if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
    const std::int64_t vocab = s[0], d = s[1];
    for (auto id : ids)
        if (id < 0 || id >= vocab)
            throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                                    " outside table of " + std::to_string(vocab) + " rows");
    std::vector<std::int64_t> rows(ids.begin(), ids.end());
    Tensor value({static_cast<std::int64_t>(rows.size()), d}, table.dtype());
    dispatch(table.dtype(), [&]<class T>() {
        auto src = table.value().data<T>();
        auto dst = value.data<T>();
        for (std::size_t r = 0; r < rows.size(); ++r)
            std::copy_n(src.begin() + rows[r] * d, d, dst.begin() + static_cast<std::int64_t>(r) * d);
    });
    return make(Op::embedding_lookup, std::move(value), {&table}, [rows, d](Node& self) {
        Tensor gt(self.parents[0]->value.shape(), self.grad.dtype());
        dispatch(gt.dtype(), [&]<class T>() {
            auto g = self.grad.data<T>();
            auto dst = gt.data<T>();
            for (std::size_t r = 0; r < rows.size(); ++r)
                for (std::int64_t j = 0; j < d; ++j)
                    dst[static_cast<std::size_t>(rows[r] * d + j)] += g[r * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
        });
        accumulate(*self.parents[0], std::move(gt));
    });
}

Var linear_interp_1d(const Var& values, const Var& positions) {
    require_same_dtype(values.value(), positions.value(), "linear_interp_1d");
    const Shape& sv = values.shape();
    const Shape& sp = positions.shape();
    if (sv.size() != 2 || sp.size() != 2) shape_mismatch("linear_interp_1d", sv, sp);
    check_finite(values.value(), "linear_interp_1d");
    check_finite(positions.value(), "linear_interp_1d");
    const std::int64_t length = sv[0], d = sv[1], queries = sp[0], taps = sp[1];
    const auto upper = static_cast<double>(length - 1);
    for (std::int64_t i = 0; i < positions.value().numel(); ++i) {
        const double p = positions.value().item(i);
        if (!(p >= 0.0 && p <= upper))
            throw std::domain_error("linear_interp_1d: position " + std::to_string(p) +
                                    " outside [0," + std::to_string(length - 1) + "]");
    }
    Tensor value({queries, taps, d}, values.dtype());
    dispatch(values.dtype(), [&]<class T>() {
        auto v = values.value().data<T>();
        auto p = positions.value().data<T>();
        auto dst = value.data<T>();
        for (std::int64_t q = 0; q < queries * taps; ++q) {
            const T pos = p[static_cast<std::size_t>(q)];
            T* out = dst.data() + q * d;
            if (length == 1) {
                std::copy_n(v.data(), d, out);
                continue;
            }
            const std::int64_t i0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(pos)), length - 2);
            const T frac = pos - static_cast<T>(i0);
            const T* a = v.data() + i0 * d;
            const T* b = a + d;
            for (std::int64_t j = 0; j < d; ++j) out[j] = (T(1) - frac) * a[j] + frac * b[j];
        }
    });
    return make(Op::linear_interp_1d, std::move(value), {&values, &positions}, [=](Node& self) {
        Tensor gv, gp;
        if (wants(self, 0)) gv = Tensor(self.parents[0]->value.shape(), self.grad.dtype());
        if (wants(self, 1)) gp = Tensor(self.parents[1]->value.shape(), self.grad.dtype());
        dispatch(self.grad.dtype(), [&]<class T>() {
            auto v = self.parents[0]->value.data<T>();
            auto p = self.parents[1]->value.data<T>();
            auto g = self.grad.data<T>();
            for (std::int64_t q = 0; q < queries * taps; ++q) {
                const T* gq = g.data() + q * d;
                if (length == 1) {
                    if (gv.defined())
                        for (std::int64_t j = 0; j < d; ++j) gv.data<T>()[static_cast<std::size_t>(j)] += gq[j];
                    continue;
                }
                const T pos = p[static_cast<std::size_t>(q)];
                const std::int64_t i0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(pos)), length - 2);
                const T frac = pos - static_cast<T>(i0);
                if (gv.defined()) {
                    T* ga = gv.data<T>().data() + i0 * d;
                    for (std::int64_t j = 0; j < d; ++j) {
                        ga[j] += (T(1) - frac) * gq[j];
                        ga[d + j] += frac * gq[j];
                    }
                }
                if (gp.defined()) {
                    const T* a = v.data() + i0 * d;
                    T acc = T(0);
                    for (std::int64_t j = 0; j < d; ++j) acc += gq[j] * (a[d + j] - a[j]);
                    gp.data<T>()[static_cast<std::size_t>(q)] += acc;
                }
            }
        });
        if (gv.defined()) accumulate(*self.parents[0], std::move(gv));
        if (gp.defined()) accumulate(*self.parents[1], std::move(gp));
    });
}

Var scaled_dot_attention(const Var& q, const Var& k, const Var& v) {
    require_same_dtype(q.value(), k.value(), "scaled_dot_attention");
    require_same_dtype(q.value(), v.value(), "scaled_dot_attention");
    const Shape& sq = q.shape();
    const Shape& sk = k.shape();
    const Shape& sv = v.shape();
    if (sq.size() != 2 || sk.size() != 2 || sv.size() != 2 || sq[1] != sk[1] || sk[0] != sv[0])
        throw ShapeError("scaled_dot_attention: incompatible shapes q" + shape_str(sq) + " k" +
                         shape_str(sk) + " v" + shape_str(sv));
    check_finite(q.value(), "scaled_dot_attention");
    check_finite(k.value(), "scaled_dot_attention");
    check_finite(v.value(), "scaled_dot_attention");
    const std::int64_t tq = sq[0], tk = sk[0], d = sq[1], dv = sv[1];
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor probs({tq, tk}, q.dtype());
    Tensor value({tq, dv}, q.dtype());
    dispatch(q.dtype(), [&]<class T>() {
        T* p = probs.data<T>().data();
        kernels::gemm(q.value().data<T>().data(), k.value().data<T>().data(), p, tq, d, tk, false, true, false);
        const T sc = static_cast<T>(inv_sqrt_d);
#pragma omp parallel for if (tq * tk > kParallelThreshold)
        for (std::int64_t i = 0; i < tq; ++i) {
            T* row = p + i * tk;
            T mx = row[0] * sc;
            for (std::int64_t j = 0; j < tk; ++j) {
                row[j] *= sc;
                mx = std::max(mx, row[j]);
            }
            T total = T(0);
            for (std::int64_t j = 0; j < tk; ++j) {
                row[j] = std::exp(row[j] - mx);
                total += row[j];
            }
            for (std::int64_t j = 0; j < tk; ++j) row[j] /= total;
        }
        kernels::gemm(p, v.value().data<T>().data(), value.data<T>().data(), tq, tk, dv, false, false, false);
    });
    return make(Op::scaled_dot_attention, std::move(value), {&q, &k, &v},
                [probs, tq, tk, d, dv, inv_sqrt_d](Node& self) {
        dispatch(self.grad.dtype(), [&]<class T>() {
            const T* g = self.grad.data<T>().data();
            const T* p = probs.data<T>().data();
            const T* qd = self.parents[0]->value.data<T>().data();
            const T* kd = self.parents[1]->value.data<T>().data();
            const T* vd = self.parents[2]->value.data<T>().data();
            if (wants(self, 2)) {
                Tensor gv({tk, dv}, self.grad.dtype());
                kernels::gemm(p, g, gv.data<T>().data(), tk, tq, dv, true, false, false);
                accumulate(*self.parents[2], std::move(gv));
            }
            if (!wants(self, 0) && !wants(self, 1)) return;
            // dS = P * (dP - rowsum(dP * P)), scaled by 1/sqrt(d).
            Tensor ds({tq, tk}, self.grad.dtype());
            T* s = ds.data<T>().data();
            kernels::gemm(g, vd, s, tq, dv, tk, false, true, false);
            const T sc = static_cast<T>(inv_sqrt_d);
            for (std::int64_t i = 0; i < tq; ++i) {
                T dot = T(0);
                for (std::int64_t j = 0; j < tk; ++j) dot += s[i * tk + j] * p[i * tk + j];
                for (std::int64_t j = 0; j < tk; ++j) s[i * tk + j] = p[i * tk + j] * (s[i * tk + j] - dot) * sc;
            }
            if (wants(self, 0)) {
                Tensor gq({tq, d}, self.grad.dtype());
                kernels::gemm(s, kd, gq.data<T>().data(), tq, tk, d, false, false, false);
                accumulate(*self.parents[0], std::move(gq));
            }
            if (wants(self, 1)) {
                Tensor gk({tk, d}, self.grad.dtype());
                kernels::gemm(s, qd, gk.data<T>().data(), tk, tq, d, true, false, false);
                accumulate(*self.parents[1], std::move(gk));
            }
        });
    });
}

void backward(const Var& loss) {
    if (loss.shape() != Shape{1})
        throw ShapeError("backward: loss must have shape [1], got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent && parent->requires_grad && visited.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    accumulate(*loss.node(), Tensor::filled({1}, loss.dtype(), 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!node->grad.defined() || !node->backward) continue;
        node->backward(*node);
        node->grad = Tensor();
    }
}

}  // namespace dualdiff::ad
