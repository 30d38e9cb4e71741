#pragma once

#include <array>
#include <string>
#include <vector>

#include "moc/autograd.hpp"
#include "moc/nn.hpp"
#include "moc/ops.hpp"
#include "moc/selective_scan.hpp"

namespace moc {

enum class ScanDirection { kRowForward = 0, kRowBackward = 1, kColumnForward = 2, kColumnBackward = 3 };

inline constexpr std::array<ScanDirection, 4> kAllDirections = {
    ScanDirection::kRowForward, ScanDirection::kRowBackward, ScanDirection::kColumnForward,
    ScanDirection::kColumnBackward};

inline const char* direction_name(ScanDirection d) {
  switch (d) {
    case ScanDirection::kRowForward: return "row_forward";
    case ScanDirection::kRowBackward: return "row_backward";
    case ScanDirection::kColumnForward: return "column_forward";
    case ScanDirection::kColumnBackward: return "column_backward";
  }
  return "unknown";
}

/// Serialization order of an H x W grid. permutation[i] is the row-major
/// pixel index visited at sequence position i; inverse undoes it.
struct ScanOrder {
  ScanDirection direction = ScanDirection::kRowForward;
  std::vector<int> permutation;
  std::vector<int> inverse;

  static ScanOrder make(ScanDirection direction, int height, int width) {
    const int count = height * width;
    ScanOrder order;
    order.direction = direction;
    order.permutation.resize(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      int pixel = 0;
      switch (direction) {
        case ScanDirection::kRowForward: pixel = i; break;
        case ScanDirection::kRowBackward: pixel = count - 1 - i; break;
        case ScanDirection::kColumnForward: pixel = (i % height) * width + i / height; break;
        case ScanDirection::kColumnBackward: {
          const int j = count - 1 - i;
          pixel = (j % height) * width + j / height;
          break;
        }
      }
      order.permutation[static_cast<std::size_t>(i)] = pixel;
    }
    order.inverse.resize(order.permutation.size());
    for (int i = 0; i < count; ++i) order.inverse[static_cast<std::size_t>(order.permutation[static_cast<std::size_t>(i)])] = i;
    return order;
  }
};

/// Flattens an H x W x C map into the four directional (H*W) x C sequences.
template <class T>
std::array<BasicVar<T>, 4> cross_scan_2d(const BasicVar<T>& map) {
  detail::require_rank(map, 3, "cross_scan_2d");
  const int h = map.dim(0), w = map.dim(1), c = map.dim(2);
  auto flat = reshape(map, {h * w, c});
  std::array<BasicVar<T>, 4> seqs;
  for (std::size_t k = 0; k < 4; ++k) {
    seqs[k] = permute_rows(flat, ScanOrder::make(kAllDirections[k], h, w).permutation);
  }
  return seqs;
}

/// Undoes each direction's permutation and sums, back to H x W x C.
template <class T>
BasicVar<T> cross_merge(const std::array<BasicVar<T>, 4>& seqs, int height, int width) {
  BasicVar<T> total;
  for (std::size_t k = 0; k < 4; ++k) {
    auto back = permute_rows(seqs[k], ScanOrder::make(kAllDirections[k], height, width).inverse);
    total = total.defined() ? add(total, back) : back;
  }
  return reshape(total, {height, width, total.dim(1)});
}

/// Multi-scale local context of a feature map F_c (H x W x C):
///   f_ms = ReLU(conv3x3,d=1(F_c)) + ReLU(conv3x3,d=2(F_c))   H x W x N
///   q_l  = row-major flattening of f_ms                       (H*W) x N
///   f_l  = conv1x1(f_ms)                                      H x W x C
template <class T>
struct LocalContext {
  BasicVar<T> f_ms;
  BasicVar<T> q_l;
  BasicVar<T> f_l;
};

template <class T>
struct LocalContextExtractor {
  Conv2d<T> near;   // 3x3, dilation 1
  Conv2d<T> wide;   // 3x3, dilation 2
  Linear<T> proj;   // N -> C

  LocalContextExtractor() = default;
  LocalContextExtractor(int channels, int state_size, Rng& rng)
      : near(channels, state_size, 3, rng, 1, 1),
        wide(channels, state_size, 3, rng, 1, 2),
        proj(state_size, channels, rng) {}

  int channels() const { return near.weight.dim(2); }
  int state_size() const { return near.weight.dim(3); }

  LocalContext<T> operator()(const BasicVar<T>& f_c) const {
    detail::require_rank(f_c, 3, "local_context");
    if (f_c.dim(2) != channels()) {
      throw ShapeError("local_context: expected " + std::to_string(channels()) + " channels, got " +
                       shape_str(f_c.shape()));
    }
    LocalContext<T> ctx;
    ctx.f_ms = add(relu(near(f_c)), relu(wide(f_c)));
    ctx.q_l = reshape(ctx.f_ms, {f_c.dim(0) * f_c.dim(1), state_size()});
    ctx.f_l = proj(ctx.f_ms);
    return ctx;
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    near.collect(out, prefix + ".conv_d1");
    wide.collect(out, prefix + ".conv_d2");
    proj.collect(out, prefix + ".proj");
  }
};

/// One directional scan of F_c with the local query added to the output
/// vectors, returned in spatial layout H x W x C. No local feature is added.
template <class T>
BasicVar<T> cssm_scan_direction(const SelectiveSsm<T>& ssm, const BasicVar<T>& f_c,
                                const ScanOrder& order, const LocalContext<T>* ctx) {
  detail::require_rank(f_c, 3, "cssm_scan");
  const int h = f_c.dim(0), w = f_c.dim(1), c = f_c.dim(2);
  if (order.permutation.size() != static_cast<std::size_t>(h) * w) {
    throw ShapeError("cssm_scan: scan order does not match map extents");
  }
  auto seq = permute_rows(reshape(f_c, {h * w, c}), order.permutation);
  BasicVar<T> query;
  if (ctx && ctx->q_l.defined()) {
    if (ctx->q_l.value().rank() != 2 || ctx->q_l.dim(1) != ssm.state_size()) {
      throw ConfigError("cssm_scan: local query width " + shape_str(ctx->q_l.shape()) +
                        " does not match state size " + std::to_string(ssm.state_size()));
    }
    query = permute_rows(ctx->q_l, order.permutation);
  }
  auto y = ssm(seq, query);
  return reshape(permute_rows(y, order.inverse), {h, w, c});
}

/// Context scan along one order: scan with (C_t + Q_l,t), then add F_l.
template <class T>
BasicVar<T> cssm_scan(const SelectiveSsm<T>& ssm, const BasicVar<T>& f_c, const ScanOrder& order,
                      const LocalContext<T>& ctx) {
  auto y = cssm_scan_direction(ssm, f_c, order, &ctx);
  if (ctx.f_l.defined()) {
    if (ctx.f_l.shape() != y.shape()) throw ShapeError("cssm_scan: local feature shape mismatch");
    y = add(y, ctx.f_l);
  }
  return y;
}

/// Residual visual state-space block. With `with_context` the four
/// directional scans share one LocalContext of the scan input (CSS block);
/// without it this is the plain VSS block.
///
///   x, z = split(in_proj(LN(F)))
///   x    = SiLU(dwconv3x3(x))
///   y    = sum_dir scan_dir(x) [+ F_l]
///   out  = F + out_proj(LN(y) * SiLU(z))
template <class T>
class StateSpaceBlock {
 public:
  StateSpaceBlock() = default;
  StateSpaceBlock(int channels, int state_size, bool with_context, Rng& rng, int expand = 2)
      : channels_(channels),
        inner_(channels * expand),
        with_context_(with_context),
        norm_in_(channels),
        in_proj_(channels, 2 * channels * expand, rng),
        dwconv_(channels * expand, 3, rng),
        norm_out_(channels * expand),
        out_proj_(channels * expand, channels, rng) {
    for (auto& s : ssms_) s = SelectiveSsm<T>(inner_, state_size, rng);
    if (with_context_) context_ = LocalContextExtractor<T>(inner_, state_size, rng);
  }

  bool with_context() const { return with_context_; }
  int channels() const { return channels_; }
  int inner_channels() const { return inner_; }
  const SelectiveSsm<T>& ssm(std::size_t k) const { return ssms_[k]; }
  SelectiveSsm<T>& ssm(std::size_t k) { return ssms_[k]; }
  const LocalContextExtractor<T>& context() const { return context_; }
  Linear<T>& out_proj() { return out_proj_; }

  BasicVar<T> operator()(const BasicVar<T>& input) const {
    detail::require_rank(input, 3, "StateSpaceBlock");
    if (input.dim(2) != channels_) {
      throw ShapeError("StateSpaceBlock: expected " + std::to_string(channels_) + " channels, got " +
                       shape_str(input.shape()));
    }
    const int h = input.dim(0), w = input.dim(1);
    auto xz = in_proj_(norm_in_(input));
    auto x = silu(dwconv_(slice_channels(xz, 0, inner_)));
    auto z = slice_channels(xz, inner_, inner_);

    LocalContext<T> ctx;
    if (with_context_) ctx = context_(x);
    BasicVar<T> y;
    for (std::size_t k = 0; k < 4; ++k) {
      const auto order = ScanOrder::make(kAllDirections[k], h, w);
      auto part = cssm_scan_direction(ssms_[k], x, order, with_context_ ? &ctx : nullptr);
      y = y.defined() ? add(y, part) : part;
    }
    if (with_context_) y = add(y, ctx.f_l);
    y = mul(norm_out_(y), silu(z));
    return add(input, out_proj_(y));
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    norm_in_.collect(out, prefix + ".norm_in");
    in_proj_.collect(out, prefix + ".in_proj");
    dwconv_.collect(out, prefix + ".dwconv");
    for (std::size_t k = 0; k < 4; ++k) {
      ssms_[k].collect(out, prefix + ".ssm." + direction_name(kAllDirections[k]));
    }
    if (with_context_) context_.collect(out, prefix + ".context");
    norm_out_.collect(out, prefix + ".norm_out");
    out_proj_.collect(out, prefix + ".out_proj");
  }

 private:
  int channels_ = 0;
  int inner_ = 0;
  bool with_context_ = false;
  LayerNorm<T> norm_in_;
  Linear<T> in_proj_;
  DepthwiseConv2d<T> dwconv_;
  std::array<SelectiveSsm<T>, 4> ssms_;
  LocalContextExtractor<T> context_;
  LayerNorm<T> norm_out_;
  Linear<T> out_proj_;
};

}  // namespace moc
