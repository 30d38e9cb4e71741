#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "moc/error.hpp"
#include "moc/tensor.hpp"

namespace moc {

/// One annotated object: pixel coordinates in image space and a category id.
struct PointAnnotation {
  double x = 0.0;
  double y = 0.0;
  int category = 0;

  bool operator==(const PointAnnotation&) const = default;
};

struct DensityKernel {
  int size = 15;
  double sigma = 4.0;
  // Rescale kernels clipped by the image border back to unit mass.
  bool renormalize_border = true;
};

/// Normalized size x size Gaussian, row-major.
inline std::vector<double> gaussian_kernel(const DensityKernel& k) {
  if (k.size < 1 || k.size % 2 == 0) throw ArgumentError("gaussian kernel size must be odd and >= 1");
  if (!(k.sigma > 0.0)) throw ArgumentError("gaussian kernel sigma must be > 0");
  const int r = k.size / 2;
  std::vector<double> w(static_cast<std::size_t>(k.size) * k.size);
  double total = 0.0;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * k.sigma * k.sigma));
      w[static_cast<std::size_t>(dy + r) * k.size + (dx + r)] = v;
      total += v;
    }
  }
  for (double& v : w) v /= total;
  return w;
}

/// Ground-truth density: every point splats the Gaussian kernel, centred on
/// its rounded pixel, into its category channel. Output is H x W x K.
template <class T = float>
BasicTensor<T> gt_density(std::span<const PointAnnotation> points, int height, int width,
                          int categories, const DensityKernel& kernel = {}) {
  if (height < 1 || width < 1 || categories < 1) throw ArgumentError("gt_density: empty extents");
  const auto w = gaussian_kernel(kernel);
  const int r = kernel.size / 2;
  // Accumulate in double, then narrow.
  std::vector<double> acc(static_cast<std::size_t>(height) * width * categories, 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& p = points[i];
    if (!(p.x >= 0.0 && p.x < width && p.y >= 0.0 && p.y < height)) {
      throw ArgumentError("gt_density: point " + std::to_string(i) + " at (" + std::to_string(p.x) +
                          ", " + std::to_string(p.y) + ") lies outside the " + std::to_string(width) +
                          "x" + std::to_string(height) + " image");
    }
    if (p.category < 0 || p.category >= categories) {
      throw ArgumentError("gt_density: point " + std::to_string(i) + " has category " +
                          std::to_string(p.category) + " outside [0, " + std::to_string(categories) + ")");
    }
    const int cx = std::min(static_cast<int>(std::lround(p.x)), width - 1);
    const int cy = std::min(static_cast<int>(std::lround(p.y)), height - 1);
    double inside = 0.0;
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const int yy = cy + dy, xx = cx + dx;
        if (yy >= 0 && yy < height && xx >= 0 && xx < width) {
          inside += w[static_cast<std::size_t>(dy + r) * kernel.size + (dx + r)];
        }
      }
    }
    const double norm = kernel.renormalize_border ? 1.0 / inside : 1.0;
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const int yy = cy + dy, xx = cx + dx;
        if (yy < 0 || yy >= height || xx < 0 || xx >= width) continue;
        acc[(static_cast<std::size_t>(yy) * width + xx) * categories + p.category] +=
            w[static_cast<std::size_t>(dy + r) * kernel.size + (dx + r)] * norm;
      }
    }
  }
  return BasicTensor<T>(Shape{height, width, categories}, std::vector<T>(acc.begin(), acc.end()));
}

/// Per-category count: the channel sum of an H x W x K density.
template <class T>
std::vector<double> count_from_density(const BasicTensor<T>& density) {
  if (density.rank() != 3) throw ShapeError("count_from_density: expected H x W x K map");
  const std::size_t k = static_cast<std::size_t>(density.dim(2));
  std::vector<double> counts(k, 0.0);
  for (std::size_t i = 0; i < density.size(); ++i) counts[i % k] += density[i];
  return counts;
}

/// Number of points per category.
inline std::vector<double> count_points(std::span<const PointAnnotation> points, int categories) {
  std::vector<double> counts(static_cast<std::size_t>(categories), 0.0);
  for (const auto& p : points) {
    if (p.category < 0 || p.category >= categories) throw ArgumentError("count_points: bad category");
    counts[static_cast<std::size_t>(p.category)] += 1.0;
  }
  return counts;
}

/// Rows are images, columns are categories.
using CountMatrix = std::vector<std::vector<double>>;

struct MaeRmse {
  std::vector<double> mae;
  std::vector<double> rmse;
};

inline MaeRmse mae_rmse(const CountMatrix& preds, const CountMatrix& gts) {
  if (preds.empty()) throw ArgumentError("mae_rmse: no images");
  if (preds.size() != gts.size()) throw ShapeError("mae_rmse: prediction/ground-truth image counts differ");
  const std::size_t k = preds.front().size();
  MaeRmse out{std::vector<double>(k, 0.0), std::vector<double>(k, 0.0)};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].size() != k || gts[i].size() != k) throw ShapeError("mae_rmse: ragged category counts");
    for (std::size_t c = 0; c < k; ++c) {
      const double e = preds[i][c] - gts[i][c];
      out.mae[c] += std::abs(e);
      out.rmse[c] += e * e;
    }
  }
  const double m = static_cast<double>(preds.size());
  for (std::size_t c = 0; c < k; ++c) {
    out.mae[c] /= m;
    out.rmse[c] = std::sqrt(out.rmse[c] / m);
  }
  return out;
}

/// Intercategory average: the unweighted mean of the per-category values.
inline double mse_bar(std::span<const double> per_category) {
  if (per_category.empty()) throw ArgumentError("mse_bar: empty category vector");
  double s = 0.0;
  for (double v : per_category) s += v;
  return s / static_cast<double>(per_category.size());
}

enum class WmseConvention {
  kWeightedSquares,  // sum_k w_k * rmse_k^2
  kWeightedValues,   // sum_k w_k * rmse_k
};

inline const char* wmse_convention_name(WmseConvention c) {
  return c == WmseConvention::kWeightedSquares ? "squares" : "values";
}

inline WmseConvention parse_wmse_convention(const std::string& s) {
  if (s == "squares") return WmseConvention::kWeightedSquares;
  if (s == "values") return WmseConvention::kWeightedValues;
  throw ArgumentError("unknown wmse convention '" + s + "' (expected squares|values)");
}

inline double wmse(std::span<const double> per_category, std::span<const double> weights,
                   WmseConvention convention = WmseConvention::kWeightedSquares) {
  if (per_category.empty()) throw ArgumentError("wmse: empty category vector");
  if (weights.size() != per_category.size()) throw ShapeError("wmse: weight count differs from category count");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ArgumentError("wmse: weights must be nonnegative");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw ArgumentError("wmse: weights sum to " + std::to_string(total) + ", expected 1");
  }
  double s = 0.0;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const double v = per_category[k];
    s += weights[k] * (convention == WmseConvention::kWeightedSquares ? v * v : v);
  }
  return s;
}

inline std::vector<double> uniform_weights(std::size_t k) {
  return std::vector<double>(k, 1.0 / static_cast<double>(k));
}

struct MetricReport {
  std::vector<double> mae;
  std::vector<double> rmse;
  std::vector<double> weights;
  double mse_bar = 0.0;
  double wmse = 0.0;

  /// `category,mae,rmse` rows followed by `mse_bar,<v>` and `wmse,<v>`.
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "category,mae,rmse\n";
    for (std::size_t k = 0; k < mae.size(); ++k) os << k << ',' << mae[k] << ',' << rmse[k] << '\n';
    os << "mse_bar," << mse_bar << '\n';
    os << "wmse," << wmse << '\n';
    return os.str();
  }
};

inline MetricReport evaluate_counts(const CountMatrix& preds, const CountMatrix& gts,
                                    std::vector<double> weights,
                                    WmseConvention convention = WmseConvention::kWeightedSquares) {
  const auto errors = mae_rmse(preds, gts);
  MetricReport r;
  r.mae = errors.mae;
  r.rmse = errors.rmse;
  r.weights = std::move(weights);
  r.mse_bar = mse_bar(r.rmse);
  r.wmse = wmse(r.rmse, r.weights, convention);
  return r;
}

}  // namespace moc
