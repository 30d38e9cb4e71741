#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "moc/autograd.hpp"
#include "moc/ops.hpp"
#include "moc/random.hpp"

namespace moc {

template <class T>
using NamedParams = std::vector<std::pair<std::string, BasicVar<T>>>;

template <class T>
std::size_t parameter_count(const NamedParams<T>& params) {
  std::size_t n = 0;
  for (const auto& [name, p] : params) n += p.size();
  return n;
}

template <class T>
void zero_grads(const NamedParams<T>& params) {
  for (const auto& [name, p] : params) {
    BasicVar<T> v = p;
    v.zero_grad();
  }
}

/// Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in).
template <class T>
BasicTensor<T> kaiming_uniform(Shape shape, int fan_in, Rng& rng) {
  BasicTensor<T> t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.storage()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
struct Linear {
  BasicVar<T> weight;
  BasicVar<T> bias;

  Linear() = default;
  Linear(int in, int out, Rng& rng, bool with_bias = true)
      : weight(parameter(kaiming_uniform<T>({in, out}, in, rng))) {
    if (with_bias) bias = parameter(BasicTensor<T>(Shape{out}));
  }

  BasicVar<T> operator()(const BasicVar<T>& x) const { return linear(x, weight, bias); }

  int in_features() const { return weight.dim(0); }
  int out_features() const { return weight.dim(1); }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
struct Conv2d {
  BasicVar<T> weight;  // kh x kw x cin x cout
  BasicVar<T> bias;
  int stride = 1;
  int dilation = 1;
  Padding padding = Padding::kSame;

  Conv2d() = default;
  Conv2d(int cin, int cout, int kernel, Rng& rng, int stride_ = 1, int dilation_ = 1,
         Padding padding_ = Padding::kSame, bool with_bias = true)
      : weight(parameter(kaiming_uniform<T>({kernel, kernel, cin, cout}, kernel * kernel * cin, rng))),
        stride(stride_),
        dilation(dilation_),
        padding(padding_) {
    if (with_bias) bias = parameter(BasicTensor<T>(Shape{cout}));
  }

  BasicVar<T> operator()(const BasicVar<T>& x) const {
    return conv2d(x, weight, bias, stride, dilation, padding);
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
struct DepthwiseConv2d {
  BasicVar<T> weight;  // kh x kw x c
  BasicVar<T> bias;

  DepthwiseConv2d() = default;
  DepthwiseConv2d(int channels, int kernel, Rng& rng)
      : weight(parameter(kaiming_uniform<T>({kernel, kernel, channels}, kernel * kernel, rng))),
        bias(parameter(BasicTensor<T>(Shape{channels}))) {}

  BasicVar<T> operator()(const BasicVar<T>& x) const { return depthwise_conv2d(x, weight, bias); }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

template <class T>
struct LayerNorm {
  BasicVar<T> gamma;
  BasicVar<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(int width)
      : gamma(parameter(BasicTensor<T>(Shape{width}, T(1)))),
        beta(parameter(BasicTensor<T>(Shape{width}))) {}

  BasicVar<T> operator()(const BasicVar<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

}  // namespace moc
