#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "grad_check.hpp"
#include "moc/adamw.hpp"
#include "moc/nn.hpp"
#include "moc/ops.hpp"

using namespace moc;
using moc::testing::gradient_check;
using moc::testing::random_tensor;

namespace {

// Direct six-loop cross-correlation with zero padding.
Tensor conv_oracle(const Tensor& in, const Tensor& k, int stride, int dilation, int pad) {
  const int h = in.dim(0), w = in.dim(1), cin = in.dim(2);
  const int kh = k.dim(0), kw = k.dim(1), cout = k.dim(3);
  const int oh = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
  const int ow = (w + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
  Tensor out(Shape{oh, ow, cout});
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x)
      for (int co = 0; co < cout; ++co) {
        double acc = 0.0;
        for (int i = 0; i < kh; ++i)
          for (int j = 0; j < kw; ++j)
            for (int ci = 0; ci < cin; ++ci) {
              const int yy = y * stride + i * dilation - pad, xx = x * stride + j * dilation - pad;
              if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
              acc += static_cast<double>(in.at(yy, xx, ci)) * k[((i * kw + j) * cin + ci) * cout + co];
            }
        out.at(y, x, co) = static_cast<float>(acc);
      }
  return out;
}

// align_corners=false bilinear sample of a single-channel map.
double bilinear_oracle(const Tensor& in, int f, int oy, int ox) {
  const int h = in.dim(0), w = in.dim(1);
  auto src = [&](int o, int n) { return std::clamp((o + 0.5) / f - 0.5, 0.0, static_cast<double>(n - 1)); };
  const double sy = src(oy, h), sx = src(ox, w);
  const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double ty = sy - y0, tx = sx - x0;
  return (1 - ty) * ((1 - tx) * in.at(y0, x0, 0) + tx * in.at(y0, x1, 0)) +
         ty * ((1 - tx) * in.at(y1, x0, 0) + tx * in.at(y1, x1, 0));
}

}  // namespace

TEST(Tensor, ShapeAndSizeAgree) {
  Tensor t(Shape{2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor(Shape{1, 1, 1, 1, 1}), ShapeError);
}

TEST(Autograd, SumGivesOnes) {
  Rng rng(1);
  auto x = parameter(random_tensor<float>({3, 4}, rng));
  backward(sum(x));
  for (float g : x.grad().values()) EXPECT_EQ(g, 1.0f);
}

TEST(Autograd, SquareHandDerivative) {
  auto x = parameter(Tensor(Shape{3}, std::vector<float>{1, 2, 3}));
  backward(sum(mul(x, x)));
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 4.0f);
  EXPECT_FLOAT_EQ(x.grad()[2], 6.0f);
}

TEST(Autograd, NonScalarLossRejected) {
  auto x = parameter(Tensor(Shape{3}, 1.0f));
  EXPECT_THROW(backward(mul(x, x)), ArgumentError);
}

TEST(Autograd, SecondBackwardIsStateError) {
  auto x = parameter(Tensor(Shape{2}, 1.0f));
  auto loss = sum(mul(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), StateError);
}

TEST(Autograd, GradientsAccumulateAcrossGraphs) {
  auto x = parameter(Tensor(Shape{2}, 1.0f));
  backward(sum(x));
  backward(sum(x));
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
  x.zero_grad();
  EXPECT_FLOAT_EQ(x.grad()[0], 0.0f);
}

TEST(Autograd, NoGradSkipsRecording) {
  auto x = parameter(Tensor(Shape{2}, 1.0f));
  NoGradGuard guard;
  auto y = sum(mul(x, x));
  EXPECT_TRUE(y.is_leaf());
  EXPECT_FALSE(y.requires_grad());
}

TEST(Autograd, NonFiniteForwardIsNumericError) {
  auto x = constant(Tensor(Shape{1}, 1000.0f));
  EXPECT_THROW(moc::exp(x), NumericError);
}

TEST(Conv2d, OneByOneIdentity) {
  Rng rng(2);
  Tensor in = random_tensor<float>({4, 5, 3}, rng);
  Tensor k(Shape{1, 1, 3, 3});
  for (int c = 0; c < 3; ++c) k[c * 3 + c] = 1.0f;
  auto out = conv2d(constant(in), constant(k));
  EXPECT_EQ(max_abs_diff(out.value(), in), 0.0f);
}

TEST(Conv2d, ZeroInputZeroOutput) {
  Rng rng(3);
  auto out = conv2d(constant(Tensor(Shape{5, 5, 2})), constant(random_tensor<float>({3, 3, 2, 4}, rng)));
  for (float v : out.value().values()) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2d, MatchesLoopOracleDilated) {
  Rng rng(4);
  Tensor in = random_tensor<float>({5, 5, 2}, rng);
  Tensor k = random_tensor<float>({3, 3, 2, 3}, rng);
  auto out = conv2d(constant(in), constant(k), {}, 1, 2, Padding::kSame);
  ASSERT_EQ(out.shape(), (Shape{5, 5, 3}));
  EXPECT_LE(max_abs_diff(out.value(), conv_oracle(in, k, 1, 2, 2)), 1e-6f);
}

TEST(Conv2d, MatchesLoopOracleStridedValid) {
  Rng rng(5);
  Tensor in = random_tensor<float>({8, 12, 3}, rng);
  Tensor k = random_tensor<float>({4, 4, 3, 5}, rng);
  auto out = conv2d(constant(in), constant(k), {}, 4, 1, Padding::kValid);
  ASSERT_EQ(out.shape(), (Shape{2, 3, 5}));
  // 48-term float sums; allow a few ulps of reordering
  EXPECT_LE(max_abs_diff(out.value(), conv_oracle(in, k, 4, 1, 0)), 1e-5f);
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  Rng rng(6);
  EXPECT_THROW(conv2d(constant(Tensor(Shape{4, 4, 2})), constant(random_tensor<float>({3, 3, 3, 1}, rng))),
               ShapeError);
}

TEST(Conv2d, GradientCheck) {
  Rng rng(7);
  auto in = parameter(random_tensor<double>({5, 5, 2}, rng));
  auto k = parameter(random_tensor<double>({3, 3, 2, 3}, rng));
  auto b = parameter(random_tensor<double>({3}, rng));
  auto w = random_tensor<double>({5, 5, 3}, rng);
  auto r = gradient_check<double>([&] { return sum(mul(conv2d(in, k, b, 1, 2), constant(w))); }, {in, k, b}, 400,
                                  rng);
  EXPECT_GE(r.pass_fraction(), 0.95) << "worst " << r.worst;
}

TEST(DepthwiseConv, MatchesDenseWithDiagonalKernel) {
  Rng rng(8);
  Tensor in = random_tensor<float>({6, 5, 3}, rng);
  Tensor dw = random_tensor<float>({3, 3, 3}, rng);
  Tensor dense(Shape{3, 3, 3, 3});
  for (int t = 0; t < 9; ++t)
    for (int c = 0; c < 3; ++c) dense[(t * 3 + c) * 3 + c] = dw[t * 3 + c];
  auto a = depthwise_conv2d(constant(in), constant(dw));
  EXPECT_LE(max_abs_diff(a.value(), conv_oracle(in, dense, 1, 1, 1)), 1e-6f);
}

TEST(AvgPool, HandMean) {
  auto out = avgpool2d(constant(Tensor(Shape{2, 2, 1}, std::vector<float>{1, 3, 5, 7})), 2);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1}));
  EXPECT_FLOAT_EQ(out.value()[0], 4.0f);
}

TEST(AvgPool, ConstantIdentityAndMean) {
  auto c = avgpool2d(constant(Tensor(Shape{8, 8, 2}, 2.5f)), 4);
  for (float v : c.value().values()) EXPECT_FLOAT_EQ(v, 2.5f);
  Rng rng(9);
  Tensor in = random_tensor<float>({8, 4, 3}, rng);
  EXPECT_EQ(max_abs_diff(avgpool2d(constant(in), 1).value(), in), 0.0f);
  EXPECT_NEAR(avgpool2d(constant(in), 2).value().sum() / 24.0, in.sum() / 96.0, 1e-6);
  EXPECT_THROW(avgpool2d(constant(Tensor(Shape{6, 4, 1})), 4), ShapeError);
}

TEST(Upsample, ConstantAndIdentity) {
  auto c = upsample_bilinear(constant(Tensor(Shape{3, 2, 2}, -1.25f)), 4);
  ASSERT_EQ(c.shape(), (Shape{12, 8, 2}));
  for (float v : c.value().values()) EXPECT_FLOAT_EQ(v, -1.25f);
  Rng rng(10);
  Tensor in = random_tensor<float>({3, 5, 2}, rng);
  EXPECT_EQ(max_abs_diff(upsample_bilinear(constant(in), 1).value(), in), 0.0f);
  EXPECT_THROW(upsample_bilinear(constant(in), 0), ArgumentError);
}

TEST(Upsample, RampMatchesClosedForm) {
  Tensor ramp(Shape{2, 2, 1}, std::vector<float>{0, 1, 2, 3});
  auto out = upsample_bilinear(constant(ramp), 2);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_NEAR(out.value().at(y, x, 0), bilinear_oracle(ramp, 2, y, x), 1e-6);
  // spot values: corners clamp, (1,1) sits a quarter of the way in
  EXPECT_NEAR(out.value().at(0, 0, 0), 0.0, 1e-6);
  EXPECT_NEAR(out.value().at(1, 1, 0), 0.75, 1e-6);
}

TEST(Upsample, RandomMatchesClosedForm) {
  Rng rng(11);
  Tensor in = random_tensor<float>({3, 4, 1}, rng);
  auto out = upsample_bilinear(constant(in), 4);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 16; ++x) EXPECT_NEAR(out.value().at(y, x, 0), bilinear_oracle(in, 4, y, x), 1e-6);
}

TEST(Ops, CompositeGradientCheck) {
  Rng rng(12);
  auto x = parameter(random_tensor<double>({8, 8, 3}, rng));
  auto k = parameter(random_tensor<double>({3, 3, 3, 4}, rng));
  auto g = parameter(random_tensor<double>({4}, rng, 0.5, 1.5));
  auto beta = parameter(random_tensor<double>({4}, rng));
  auto w = random_tensor<double>({8, 8, 4}, rng);
  auto fn = [&] {
    auto y = conv2d(x, k);
    y = layer_norm(y, g, beta);
    y = upsample_bilinear(avgpool2d(silu(y), 2), 2);
    y = add(sigmoid(y), softplus(y));
    return sum(mul(y, constant(w)));
  };
  auto r = gradient_check<double>(fn, {x, k, g, beta}, 300, rng);
  EXPECT_GE(r.pass_fraction(), 0.95) << "worst " << r.worst;
}

TEST(Ops, ChannelPlumbingGradientCheck) {
  Rng rng(13);
  auto a = parameter(random_tensor<double>({3, 3, 2}, rng));
  auto b = parameter(random_tensor<double>({3, 3, 3}, rng));
  auto wt = parameter(random_tensor<double>({5, 4}, rng));
  auto bias = parameter(random_tensor<double>({4}, rng));
  auto w = random_tensor<double>({3, 3, 3}, rng);
  auto fn = [&] {
    auto cat = concat_channels<double>({a, b});
    auto y = slice_channels(linear(cat, wt, bias), 1, 3);
    return sum(mul(relu(y), constant(w)));
  };
  auto r = gradient_check<double>(fn, {a, b, wt, bias}, 200, rng);
  EXPECT_GE(r.pass_fraction(), 0.95) << "worst " << r.worst;
}

TEST(Ops, MseLossValue) {
  Tensor a(Shape{2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor b(Shape{2, 2}, std::vector<float>{2, 3, 4, 5});
  EXPECT_FLOAT_EQ(mse_loss(constant(a), constant(b)).item(), 1.0f);
  EXPECT_FLOAT_EQ(mse_loss(constant(a), constant(a)).item(), 0.0f);
}

TEST(Ops, ForwardIsDeterministic) {
  Rng r1(14), r2(14);
  Linear<float> l1(6, 4, r1), l2(6, 4, r2);
  Rng rng(15);
  auto x = constant(random_tensor<float>({5, 6}, rng));
  EXPECT_EQ(max_abs_diff(l1(x).value(), l2(x).value()), 0.0f);
}

TEST(Init, KaimingBoundsAndZeroBias) {
  Rng rng(16);
  Conv2d<float> conv(4, 8, 3, rng);
  const float bound = std::sqrt(6.0f / (4 * 9));
  for (float v : conv.weight.value().values()) EXPECT_LE(std::abs(v), bound);
  for (float v : conv.bias.value().values()) EXPECT_EQ(v, 0.0f);
  LayerNorm<float> ln(5);
  for (float v : ln.gamma.value().values()) EXPECT_EQ(v, 1.0f);
  for (float v : ln.beta.value().values()) EXPECT_EQ(v, 0.0f);
}

TEST(AdamW, FirstStepClosedForm) {
  std::vector<float> p{1.0f}, g{0.5f}, m{0.0f}, v{0.0f};
  adamw_update<float>(p, g, m, v, 1, AdamWOptions{});
  const double expected = 1.0 - 5e-5 * (0.5 / (0.5 + 1e-8)) - 5e-5 * 1e-4;
  EXPECT_NEAR(p[0], expected, 1e-7);
  EXPECT_NEAR(p[0], 0.99995, 1e-6);
}

TEST(AdamW, ZeroGradZeroDecayUnchanged) {
  Rng rng(17);
  auto w = parameter(random_tensor<float>({3, 3}, rng));
  const Tensor before = w.value();
  AdamWOptions o;
  o.weight_decay = 0.0f;
  AdamW<float> opt({{"w", w}}, o);
  for (int i = 0; i < 5; ++i) {
    opt.zero_grad();
    backward(sum(scale(w, 0.0f)));
    opt.step();
  }
  EXPECT_EQ(max_abs_diff(w.value(), before), 0.0f);
}

TEST(AdamW, IdenticalParamsStayIdentical) {
  auto a = parameter(Tensor(Shape{2}, std::vector<float>{0.3f, -0.7f}));
  auto b = parameter(Tensor(Shape{2}, std::vector<float>{0.3f, -0.7f}));
  AdamW<float> opt({{"a", a}, {"b", b}}, AdamWOptions{1e-2f});
  for (int i = 0; i < 20; ++i) {
    opt.zero_grad();
    backward(add(sum(mul(a, a)), sum(mul(b, b))));
    opt.step();
    ASSERT_EQ(max_abs_diff(a.value(), b.value()), 0.0f);
  }
  EXPECT_EQ(opt.step_count(), 20);
}

TEST(AdamW, ShapeMismatchAndStepGuard) {
  std::vector<float> p{1, 2}, g{1}, m{0, 0}, v{0, 0};
  EXPECT_THROW(adamw_update<float>(p, g, m, v, 1, AdamWOptions{}), ShapeError);
  std::vector<float> g2{1, 1};
  EXPECT_THROW(adamw_update<float>(p, g2, m, v, 0, AdamWOptions{}), StateError);
}

TEST(AdamW, DefaultsMatchRecipe) {
  AdamWOptions o;
  EXPECT_FLOAT_EQ(o.lr, 5e-5f);
  EXPECT_FLOAT_EQ(o.weight_decay, 1e-4f);
  EXPECT_FLOAT_EQ(o.beta1, 0.9f);
  EXPECT_FLOAT_EQ(o.beta2, 0.999f);
}
