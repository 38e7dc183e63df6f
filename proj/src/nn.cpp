#include "dualdiff/nn.hpp"

#include <cmath>

namespace dualdiff::nn {

ad::Var Linear::operator()(const ad::Var& x) const {
    ad::Var y = ad::matmul(x, weight);
    return bias ? ad::add(y, bias) : y;
}

Linear make_linear(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out,
                   bool with_bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    l.weight = store.add(name + "/weight", uniform_tensor({in, out}, store.dtype(), store.rng(), bound));
    if (with_bias)
        l.bias = store.add(name + "/bias", uniform_tensor({out}, store.dtype(), store.rng(), bound));
    return l;
}

Linear make_zero_linear(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out) {
    Linear l;
    l.weight = store.add(name + "/weight", Tensor({in, out}, store.dtype()));
    l.bias = store.add(name + "/bias", Tensor({out}, store.dtype()));
    return l;
}

ad::Var Conv2d::operator()(const ad::Var& x) const { return ad::conv2d(x, weight, bias, options); }

Conv2d make_conv(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out,
                 std::int64_t kernel, std::int64_t stride, std::int64_t pad) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    Conv2d c;
    c.weight = store.add(name + "/weight",
                         uniform_tensor({out, in, kernel, kernel}, store.dtype(), store.rng(), bound));
    c.bias = store.add(name + "/bias", uniform_tensor({out}, store.dtype(), store.rng(), bound));
    c.options = {stride, pad < 0 ? kernel / 2 : pad};
    return c;
}

ad::Var ZeroConv2d::operator()(const ad::Var& x) const {
    return ad::conv2d_zero_init(x, weight_, bias_, {1, 0});
}

ZeroConv2d make_zero_conv(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out) {
    ZeroConv2d z;
    z.weight_ = store.add(name + "/weight", Tensor({out, in, 1, 1}, store.dtype()));
    z.bias_ = store.add(name + "/bias", Tensor({out}, store.dtype()));
    return z;
}

ad::Var Mlp::operator()(const ad::Var& x) const { return second(ad::silu(first(x))); }

Mlp make_mlp(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t hidden,
             std::int64_t out) {
    return Mlp{make_linear(store, name + "/fc1", in, hidden), make_linear(store, name + "/fc2", hidden, out)};
}

}  // namespace dualdiff::nn
