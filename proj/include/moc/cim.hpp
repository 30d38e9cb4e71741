#pragma once

#include <array>
#include <string>

#include "moc/cssm.hpp"
#include "moc/nn.hpp"
#include "moc/ops.hpp"

namespace moc {

/// Backbone outputs at strides 4, 8, 16 with C, 2C, 4C channels.
template <class T>
struct FeaturePyramid {
  BasicVar<T> level1;
  BasicVar<T> level2;
  BasicVar<T> level3;

  const BasicVar<T>& level(std::size_t i) const { return i == 0 ? level1 : (i == 1 ? level2 : level3); }
  BasicVar<T>& level(std::size_t i) { return i == 0 ? level1 : (i == 1 ? level2 : level3); }

  int base_channels() const { return level1.dim(2); }

  void validate() const {
    for (std::size_t i = 0; i < 3; ++i) {
      if (!level(i).defined() || level(i).value().rank() != 3) {
        throw ShapeError("FeaturePyramid: level " + std::to_string(i + 1) + " is not an HWC map");
      }
    }
    for (std::size_t i = 1; i < 3; ++i) {
      const auto& fine = level(i - 1);
      const auto& coarse = level(i);
      if (fine.dim(0) != 2 * coarse.dim(0) || fine.dim(1) != 2 * coarse.dim(1) ||
          coarse.dim(2) != 2 * fine.dim(2)) {
        throw ShapeError("FeaturePyramid: levels " + std::to_string(i) + " and " +
                         std::to_string(i + 1) + " break the stride/channel doubling (" +
                         shape_str(fine.shape()) + " vs " + shape_str(coarse.shape()) + ")");
      }
    }
  }
};

/// Cross-scale interaction: pool the finer levels to stride 16, project the
/// 7C concat to 2C, fuse with a VSS block, project back to 7C, then split,
/// upsample and gate into each level:
///   G_i = sigmoid(conv1x1([F_i, U_i])),  out_i = G_i * F_i + (1 - G_i) * U_i
template <class T>
class CrossScaleInteraction {
 public:
  CrossScaleInteraction() = default;
  CrossScaleInteraction(int base_channels, int state_size, Rng& rng)
      : c_(base_channels),
        align_proj_(7 * base_channels, 2 * base_channels, rng),
        fuse_block_(2 * base_channels, state_size, false, rng),
        fuse_proj_(2 * base_channels, 7 * base_channels, rng) {
    for (std::size_t i = 0; i < 3; ++i) {
      const int width = base_channels << i;
      gates_[i] = Linear<T>(2 * width, width, rng);
    }
  }

  int base_channels() const { return c_; }
  Linear<T>& gate(std::size_t i) { return gates_[i]; }
  Linear<T>& align_proj() { return align_proj_; }
  Linear<T>& fuse_proj() { return fuse_proj_; }

  /// F_align = conv1x1(concat(avgpool4(F1), avgpool2(F2), F3)), 2C channels.
  BasicVar<T> align(const FeaturePyramid<T>& p) const {
    check(p);
    auto pooled1 = avgpool2d(p.level1, 4);
    auto pooled2 = avgpool2d(p.level2, 2);
    return align_proj_(concat_channels<T>({pooled1, pooled2, p.level3}));
  }

  /// F_fuse = conv1x1(VSS(F_align)), 7C channels.
  BasicVar<T> fuse(const BasicVar<T>& aligned) const { return fuse_proj_(fuse_block_(aligned)); }

  FeaturePyramid<T> distribute(const BasicVar<T>& fused, const FeaturePyramid<T>& p) const {
    check(p);
    if (fused.value().rank() != 3 || fused.dim(2) != 7 * c_) {
      throw ShapeError("cim_distribute: fused map must have " + std::to_string(7 * c_) +
                       " channels, got " + shape_str(fused.shape()));
    }
    FeaturePyramid<T> out;
    int offset = 0;
    for (std::size_t i = 0; i < 3; ++i) {
      const int width = c_ << i;
      auto part = slice_channels(fused, offset, width);
      offset += width;
      auto up = upsample_bilinear(part, 4 >> i);
      out.level(i) = gated_merge(gates_[i], p.level(i), up);
    }
    return out;
  }

  FeaturePyramid<T> operator()(const FeaturePyramid<T>& p) const { return distribute(fuse(align(p)), p); }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    align_proj_.collect(out, prefix + ".align_proj");
    fuse_block_.collect(out, prefix + ".fuse_block");
    fuse_proj_.collect(out, prefix + ".fuse_proj");
    for (std::size_t i = 0; i < 3; ++i) gates_[i].collect(out, prefix + ".gate" + std::to_string(i + 1));
  }

  static BasicVar<T> gated_merge(const Linear<T>& gate, const BasicVar<T>& feature,
                                 const BasicVar<T>& update) {
    if (feature.shape() != update.shape()) {
      throw ShapeError("cim gate: " + shape_str(feature.shape()) + " vs " + shape_str(update.shape()));
    }
    auto g = sigmoid(gate(concat_channels<T>({feature, update})));
    auto ones = constant(BasicTensor<T>(g.shape(), T(1)));
    return add(mul(g, feature), mul(sub(ones, g), update));
  }

 private:
  void check(const FeaturePyramid<T>& p) const {
    p.validate();
    if (p.base_channels() != c_) {
      throw ShapeError("cim: pyramid base width " + std::to_string(p.base_channels()) +
                       " != configured " + std::to_string(c_));
    }
    if (p.level1.dim(0) != 4 * p.level3.dim(0) || p.level1.dim(1) != 4 * p.level3.dim(1)) {
      throw ShapeError("cim: stride mismatch between level 1 and level 3");
    }
  }

  int c_ = 0;
  Linear<T> align_proj_;
  StateSpaceBlock<T> fuse_block_;
  Linear<T> fuse_proj_;
  std::array<Linear<T>, 3> gates_;
};

}  // namespace moc
