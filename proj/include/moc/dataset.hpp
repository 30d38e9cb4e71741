#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "moc/annotations.hpp"
#include "moc/counting.hpp"
#include "moc/image_io.hpp"
#include "moc/model.hpp"
#include "moc/ops.hpp"
#include "moc/random.hpp"

namespace moc {

namespace fs = std::filesystem;

/// Dataset manifest (`index.json`). Entry paths are relative to `root`.
struct DatasetIndex {
  struct Entry {
    std::string image;
    std::string annotations;
  };

  fs::path root;
  int num_categories = 0;
  std::string split = "train";
  std::vector<Entry> entries;

  fs::path manifest_path() const { return root / "index.json"; }

  nlohmann::json to_json() const {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& e : entries) items.push_back({{"image", e.image}, {"annotations", e.annotations}});
    return {{"K", num_categories}, {"split", split}, {"entries", items}};
  }

  void save() const {
    std::ofstream out(manifest_path());
    if (!out) throw IoError("cannot write " + manifest_path().string());
    out << to_json().dump(2) << '\n';
  }

  /// Accepts either the manifest file or the directory holding index.json.
  static DatasetIndex load(const fs::path& path) {
    const fs::path manifest = fs::is_directory(path) ? path / "index.json" : path;
    std::ifstream in(manifest);
    if (!in) throw IoError("cannot open dataset manifest " + manifest.string());
    DatasetIndex idx;
    idx.root = manifest.parent_path();
    try {
      const auto j = nlohmann::json::parse(in);
      idx.num_categories = j.at("K").get<int>();
      idx.split = j.value("split", std::string("train"));
      for (const auto& e : j.at("entries")) {
        idx.entries.push_back({e.at("image").get<std::string>(), e.at("annotations").get<std::string>()});
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(manifest.string() + ": " + e.what());
    }
    if (idx.num_categories < 1) throw FormatError(manifest.string() + ": K must be >= 1");
    if (idx.split != "train" && idx.split != "test") {
      throw FormatError(manifest.string() + ": split must be train or test");
    }
    for (const auto& e : idx.entries) {
      for (const auto& rel : {e.image, e.annotations}) {
        if (!fs::exists(idx.root / rel)) throw IoError("dataset entry missing on disk: " + (idx.root / rel).string());
      }
    }
    return idx;
  }
};

struct Sample {
  Tensor image;
  std::vector<PointAnnotation> points;
};

inline std::vector<Sample> load_samples(const DatasetIndex& idx) {
  std::vector<Sample> out;
  out.reserve(idx.entries.size());
  for (const auto& e : idx.entries) {
    Sample s;
    s.image = load_image(idx.root / e.image);
    s.points = load_annotations(idx.root / e.annotations, idx.num_categories);
    out.push_back(std::move(s));
  }
  return out;
}

/// Stride-4 training target: full-resolution density sum-pooled 4x.
template <class T = float>
TrainSample<T> make_train_sample(const Sample& s, int categories, const DensityKernel& kernel = {}) {
  TrainSample<T> t;
  t.image = s.image.cast<T>();
  const int h = s.image.dim(0), w = s.image.dim(1);
  t.density = sum_pool2d(gt_density<T>(s.points, h, w, categories, kernel), 4);
  return t;
}

struct SynthOptions {
  std::uint64_t seed = 0;
  int n_images = 8;
  int height = 64;
  int width = 64;
  int categories = 3;
  // Poisson rate per category; a single value applies to all.
  std::vector<double> lambda = {3.0};
  std::string split = "train";
};

/// Per-category blob appearance: a fixed colour and radius.
struct BlobStyle {
  std::array<std::uint8_t, 3> color;
  double radius;
};

inline BlobStyle blob_style(int category) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 8> palette = {{
      {230, 40, 40}, {40, 90, 230}, {245, 220, 40}, {240, 240, 240},
      {20, 20, 20}, {200, 60, 210}, {40, 210, 210}, {250, 140, 20},
  }};
  const auto& base = palette[static_cast<std::size_t>(category) % palette.size()];
  std::array<std::uint8_t, 3> color = base;
  if (category >= static_cast<int>(palette.size())) {
    for (auto& c : color) c = static_cast<std::uint8_t>((c + 97 * (category / 8)) % 256);
  }
  return {color, 1.5 + 1.0 * (category % 4)};
}

/// Renders n_images scenes of Poisson-many coloured blobs per category over a
/// textured background, writing img_XXXX.ppm / img_XXXX.csv and index.json.
inline DatasetIndex synth_generate(const SynthOptions& opt, const fs::path& out_dir) {
  if (opt.height % 16 != 0 || opt.width % 16 != 0 || opt.height < 16 || opt.width < 16) {
    throw ArgumentError("synth_generate: image size must be a positive multiple of 16");
  }
  if (opt.categories < 1) throw ArgumentError("synth_generate: categories must be >= 1");
  if (opt.n_images < 0) throw ArgumentError("synth_generate: n_images must be >= 0");
  if (opt.lambda.size() != 1 && opt.lambda.size() != static_cast<std::size_t>(opt.categories)) {
    throw ArgumentError("synth_generate: lambda needs 1 or K values");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create output directory " + out_dir.string());

  DatasetIndex idx;
  idx.root = out_dir;
  idx.num_categories = opt.categories;
  idx.split = opt.split;
  Rng rng(opt.seed);
  const int h = opt.height, w = opt.width;
  for (int i = 0; i < opt.n_images; ++i) {
    std::ostringstream stem;
    stem << "img_" << std::setw(4) << std::setfill('0') << i;

    std::vector<double> bg(static_cast<std::size_t>(h) * w * 3);
    const double fx = rng.uniform(0.05, 0.25), fy = rng.uniform(0.05, 0.25);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    const std::array<double, 3> tint = {rng.uniform(0.30, 0.45), rng.uniform(0.35, 0.50), rng.uniform(0.25, 0.40)};
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double wave = 0.06 * std::sin(fx * x + fy * y + phase);
        for (int c = 0; c < 3; ++c) {
          bg[(static_cast<std::size_t>(y) * w + x) * 3 + c] = tint[c] + wave + rng.uniform(-0.03, 0.03);
        }
      }
    }

    std::vector<PointAnnotation> points;
    for (int k = 0; k < opt.categories; ++k) {
      const double lam = opt.lambda.size() == 1 ? opt.lambda[0] : opt.lambda[static_cast<std::size_t>(k)];
      const int n = rng.poisson(lam);
      for (int j = 0; j < n; ++j) {
        points.push_back({rng.uniform(0.0, static_cast<double>(w)), rng.uniform(0.0, static_cast<double>(h)), k});
      }
    }
    for (const auto& p : points) {
      const auto style = blob_style(p.category);
      const int r = static_cast<int>(std::ceil(style.radius + 1.0));
      for (int y = static_cast<int>(p.y) - r; y <= static_cast<int>(p.y) + r; ++y) {
        for (int x = static_cast<int>(p.x) - r; x <= static_cast<int>(p.x) + r; ++x) {
          if (y < 0 || y >= h || x < 0 || x >= w) continue;
          const double d = std::hypot(x + 0.5 - p.x, y + 0.5 - p.y);
          const double alpha = std::clamp(style.radius + 0.5 - d, 0.0, 1.0);
          if (alpha <= 0.0) continue;
          for (int c = 0; c < 3; ++c) {
            double& px = bg[(static_cast<std::size_t>(y) * w + x) * 3 + c];
            px = (1.0 - alpha) * px + alpha * (style.color[c] / 255.0);
          }
        }
      }
    }

    RawImage img{w, h, 3, std::vector<std::uint8_t>(bg.size())};
    for (std::size_t p = 0; p < bg.size(); ++p) {
      img.pixels[p] = static_cast<std::uint8_t>(std::lround(std::clamp(bg[p], 0.0, 1.0) * 255.0));
    }
    const std::string image_name = stem.str() + ".ppm";
    const std::string ann_name = stem.str() + ".csv";
    write_netpbm_file(out_dir / image_name, img);
    std::ofstream ann(out_dir / ann_name);
    if (!ann) throw IoError("cannot write " + (out_dir / ann_name).string());
    write_annotations(ann, points);
    idx.entries.push_back({image_name, ann_name});
  }
  idx.save();
  return idx;
}

}  // namespace moc
