#pragma once

#include <string>

#include "dualdiff/autodiff.hpp"
#include "dualdiff/params.hpp"

namespace dualdiff::nn {

/// y = x W + b over the last axis; W is [in, out].
struct Linear {
    ad::Var weight;
    ad::Var bias;  // may be empty

    ad::Var operator()(const ad::Var& x) const;
};

Linear make_linear(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out,
                   bool with_bias = true);
Linear make_zero_linear(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out);

struct Conv2d {
    ad::Var weight;
    ad::Var bias;
    ad::Conv2dOptions options;

    ad::Var operator()(const ad::Var& x) const;
};

Conv2d make_conv(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out,
                 std::int64_t kernel, std::int64_t stride = 1, std::int64_t pad = -1);

/// Convolution whose weights and bias are exactly zero at construction. Only
/// make_zero_conv can build one.
class ZeroConv2d {
   public:
    ad::Var operator()(const ad::Var& x) const;
    const ad::Var& weight() const { return weight_; }
    const ad::Var& bias() const { return bias_; }

   private:
    friend ZeroConv2d make_zero_conv(ParameterStore&, const std::string&, std::int64_t, std::int64_t);
    ad::Var weight_;
    ad::Var bias_;
};

ZeroConv2d make_zero_conv(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t out);

/// Two-layer perceptron with a silu between the layers.
struct Mlp {
    Linear first;
    Linear second;

    ad::Var operator()(const ad::Var& x) const;
};

Mlp make_mlp(ParameterStore& store, const std::string& name, std::int64_t in, std::int64_t hidden,
             std::int64_t out);

}  // namespace dualdiff::nn
