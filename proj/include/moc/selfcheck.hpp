#pragma once

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "moc/checkpoint.hpp"
#include "moc/counting.hpp"
#include "moc/cssm.hpp"
#include "moc/dataset.hpp"
#include "moc/ssm.hpp"

// Quick property checks over the core kernels, usable from the CLI and from
// the acceptance suite. Each returns a verdict plus a short measurement.

namespace moc::selfcheck {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

inline CheckResult timed(const std::string& name, const std::function<CheckResult()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r;
  try {
    r = fn();
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("threw: ") + e.what();
  }
  r.name = name;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

/// kernel_conv, scan_recurrent and scan_parallel agree on random LTI systems.
inline CheckResult scan_equivalence(int trials = 100, std::uint64_t seed = 1) {
  Rng rng(seed);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int n = 1 + static_cast<int>(rng.below(8));
    const int len = 1 + static_cast<int>(rng.below(64));
    ssm::ContinuousSsm<float> cont;
    for (int i = 0; i < n; ++i) {
      cont.a.push_back(-static_cast<float>(rng.uniform(0.1, 2.0)));
      cont.b.push_back(static_cast<float>(rng.uniform(-1, 1)));
      cont.c.push_back(static_cast<float>(rng.uniform(-1, 1)));
    }
    std::vector<float> deltas(static_cast<std::size_t>(len), static_cast<float>(rng.uniform(0.01, 0.5)));
    const auto d = ssm::discretize(cont, std::span<const float>(deltas));
    std::vector<float> x(static_cast<std::size_t>(len));
    for (auto& v : x) v = static_cast<float>(rng.uniform(-1, 1));
    const auto rec = ssm::scan_recurrent(d, std::span<const float>(x));
    const auto conv = ssm::kernel_conv(d, std::span<const float>(x));
    const auto par = ssm::scan_parallel(d, std::span<const float>(x));
    for (std::size_t i = 0; i < x.size(); ++i) {
      worst = std::max({worst, static_cast<double>(std::abs(rec[i] - conv[i])),
                        static_cast<double>(std::abs(rec[i] - par[i])),
                        static_cast<double>(std::abs(conv[i] - par[i]))});
    }
  }
  return {"", worst <= 1e-5, "max abs diff " + fmt(worst) + " over " + std::to_string(trials) + " systems"};
}

/// Scalar zero-order hold against closed forms, including the small-step limit.
inline CheckResult discretization() {
  const auto z = ssm::discretize(-1.0, 2.0, std::log(2.0));
  const double e1 = std::abs(z.a_bar - 0.5), e2 = std::abs(z.b_bar - 1.0);
  double worst_rel = 0.0;
  for (double da : {5e-10, -3e-10, 1e-12}) {
    const double delta = 1e-3, a = -da / delta, b = 1.7;
    const auto lim = ssm::discretize(a, b, delta);
    worst_rel = std::max(worst_rel, std::abs(lim.b_bar - delta * b) / std::abs(delta * b));
  }
  const bool ok = e1 <= 1e-9 && e2 <= 1e-9 && worst_rel <= 1e-12;
  return {"", ok, "|a_bar-0.5| " + fmt(e1) + ", |b_bar-1| " + fmt(e2) + ", limit rel " + fmt(worst_rel)};
}

/// With the local context zeroed, the context scan is the plain selective scan, bit for bit.
inline CheckResult cssm_reduction(int trials = 20, std::uint64_t seed = 2) {
  Rng rng(seed);
  int identical = 0;
  for (int t = 0; t < trials; ++t) {
    const int h = 1 + static_cast<int>(rng.below(6)), w = 1 + static_cast<int>(rng.below(6));
    const int c = 1 + static_cast<int>(rng.below(6)), n = 1 + static_cast<int>(rng.below(6));
    SelectiveSsm<float> ssm_layer(c, n, rng);
    Tensor f(Shape{h, w, c});
    for (auto& v : f.storage()) v = static_cast<float>(rng.uniform(-2, 2));
    const auto dir = kAllDirections[rng.below(4)];
    const auto order = ScanOrder::make(dir, h, w);
    LocalContext<float> zero{constant(Tensor(Shape{h, w, n})), constant(Tensor(Shape{h * w, n})),
                             constant(Tensor(Shape{h, w, c}))};
    NoGradGuard guard;
    const auto fv = constant(f);
    const auto got = cssm_scan(ssm_layer, fv, order, zero).value();
    const auto seq = ssm_layer(permute_rows(reshape(fv, {h * w, c}), order.permutation));
    const auto ref = reshape(permute_rows(seq, order.inverse), {h, w, c}).value();
    if (got.shape() == ref.shape() && std::memcmp(got.data(), ref.data(), got.size() * sizeof(float)) == 0) {
      ++identical;
    }
  }
  return {"", identical == trials, std::to_string(identical) + "/" + std::to_string(trials) + " bitwise identical"};
}

/// Ground-truth mass equals the point count per category, border points included.
inline CheckResult density_conservation(int sets = 1000, std::uint64_t seed = 3) {
  Rng rng(seed);
  double worst = 0.0;
  for (int s = 0; s < sets; ++s) {
    const int h = 8 + static_cast<int>(rng.below(41)), w = 8 + static_cast<int>(rng.below(41));
    const int k = 1 + static_cast<int>(rng.below(4));
    std::vector<PointAnnotation> pts(rng.below(12));
    for (auto& p : pts) {
      p.x = rng.uniform(0, w);
      p.y = rng.uniform(0, h);
      // Pin a third of the points to an edge or corner.
      switch (rng.below(6)) {
        case 0: p.x = 0.0; break;
        case 1: p.y = std::nextafter(static_cast<double>(h), 0.0); break;
        default: break;
      }
      p.x = std::min(p.x, std::nextafter(static_cast<double>(w), 0.0));
      p.category = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    }
    const auto mass = count_from_density(gt_density<float>(pts, h, w, k));
    const auto want = count_points(pts, k);
    for (int c = 0; c < k; ++c) worst = std::max(worst, std::abs(mass[c] - want[c]));
  }
  return {"", worst <= 1e-3, "max |mass - count| " + fmt(worst) + " over " + std::to_string(sets) + " sets"};
}

/// Mean of the reported per-category errors reproduces the published average.
inline CheckResult metric_anchor() {
  const std::vector<double> v{4.0277, 10.5133, 6.4310, 5.5722, 30.4554, 0.4768};
  const double m = mse_bar(v);
  std::ostringstream os;
  os.precision(8);
  os << "mse_bar " << m;
  return {"", std::abs(m - 9.5794) <= 5e-5, os.str()};
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Checkpoint save/load is bitwise; same-seed synthetic datasets are byte-identical.
inline CheckResult determinism(const std::filesystem::path& scratch_root) {
  namespace fs = std::filesystem;
  // Private subdirectory; only it is removed afterwards.
  const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
  const fs::path scratch = scratch_root / ("moc-selfcheck-" + std::to_string(stamp));
  std::error_code ec;
  fs::create_directories(scratch, ec);
  if (ec) throw IoError("cannot create scratch directory " + scratch.string());
  struct Cleanup {
    fs::path dir;
    ~Cleanup() {
      std::error_code ignored;
      fs::remove_all(dir, ignored);
    }
  } cleanup{scratch};

  ModelConfig cfg;
  cfg.base_channels = 8;
  cfg.state_size = 4;
  cfg.num_categories = 3;
  cfg.depths = {1, 1, 1};
  cfg.seed = 5;
  MambaMoc<float> model(cfg);
  save_checkpoint(scratch / "a.mmoc", model);
  cfg.seed = 6;
  MambaMoc<float> other(cfg);
  load_checkpoint(scratch / "a.mmoc", other);
  const auto pa = model.named_parameters(), pb = other.named_parameters();
  std::size_t same = 0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto& a = pa[i].second.value();
    const auto& b = pb[i].second.value();
    if (a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0) ++same;
  }
  save_checkpoint(scratch / "b.mmoc", model);
  const bool ckpt_ok = same == pa.size() && slurp(scratch / "a.mmoc") == slurp(scratch / "b.mmoc");

  SynthOptions opt;
  opt.seed = 9;
  opt.n_images = 4;
  const auto ia = synth_generate(opt, scratch / "d1");
  synth_generate(opt, scratch / "d2");
  std::size_t files = 0, equal = 0;
  for (const auto& e : ia.entries) {
    for (const auto& rel : {e.image, e.annotations}) {
      ++files;
      equal += slurp(scratch / "d1" / rel) == slurp(scratch / "d2" / rel);
    }
  }
  ++files;
  equal += slurp(scratch / "d1" / "index.json") == slurp(scratch / "d2" / "index.json");
  return {"", ckpt_ok && equal == files,
          std::to_string(same) + "/" + std::to_string(pa.size()) + " tensors round-trip, " + std::to_string(equal) +
              "/" + std::to_string(files) + " dataset files identical"};
}

/// Runs the quick checks, one `PASS|FAIL name (detail)` line each.
inline bool run_all(std::ostream& out, const std::filesystem::path& scratch) {
  const std::vector<CheckResult> results = {
      timed("scan-equivalence", [] { return scan_equivalence(); }),
      timed("discretization", [] { return discretization(); }),
      timed("cssm-reduction", [] { return cssm_reduction(); }),
      timed("density-conservation", [] { return density_conservation(); }),
      timed("metric-anchor", [] { return metric_anchor(); }),
      timed("determinism", [&] { return determinism(scratch); }),
  };
  bool all = true;
  for (const auto& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ", " << fmt(r.seconds) << " s)\n";
    all = all && r.passed;
  }
  return all;
}

}  // namespace moc::selfcheck
