#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "moc/error.hpp"

// Diagonal state-space kernels on a single channel: zero-order-hold
// discretization, the sequential recurrence, its global-convolution form and
// an associative (tree) prefix-scan evaluation of the same recurrence.

namespace moc::ssm {

/// Below this |delta * a| the input gain uses its first-order limit delta.
inline constexpr double kTaylorThreshold = 1e-6;

template <class T>
struct ZohCoefficients {
  T a_bar;
  T b_bar;
};

/// Input gain (delta*a)^-1 (exp(delta*a) - 1) * delta, i.e. expm1(delta*a)/a.
template <class T>
T zoh_input_gain(T a, T delta) {
  const T da = delta * a;
  if (std::abs(da) < static_cast<T>(kTaylorThreshold)) return delta;
  return std::expm1(da) / a;
}

/// Zero-order hold of one diagonal entry: a_bar = exp(delta a),
/// b_bar = (delta a)^-1 (exp(delta a) - 1) delta b.
template <class T>
ZohCoefficients<T> discretize(T a, T b, T delta) {
  if (!(delta > T(0))) throw ArgumentError("discretize: delta must be > 0");
  return {std::exp(delta * a), zoh_input_gain(a, delta) * b};
}

/// Continuous diagonal SSM for one channel: h' = diag(a) h + b x, y = <c, h>.
template <class T>
struct ContinuousSsm {
  std::vector<T> a;
  std::vector<T> b;
  std::vector<T> c;

  int state_size() const { return static_cast<int>(a.size()); }

  void validate() const {
    if (a.empty()) throw ArgumentError("ContinuousSsm: state size must be >= 1");
    if (b.size() != a.size() || c.size() != a.size()) {
      throw ShapeError("ContinuousSsm: a, b, c lengths differ");
    }
    for (T v : a) {
      if (!(v < T(0))) throw ArgumentError("ContinuousSsm: diagonal of A must be strictly negative");
    }
  }
};

/// Per-step discrete parameters, each stored length x state_size row-major.
template <class T>
struct DiscreteSsm {
  int length = 0;
  int state_size = 0;
  std::vector<T> a_bar;
  std::vector<T> b_bar;
  std::vector<T> c;
  std::vector<T> delta;

  DiscreteSsm() = default;
  DiscreteSsm(int length_, int state_size_)
      : length(length_),
        state_size(state_size_),
        a_bar(static_cast<std::size_t>(length_) * state_size_),
        b_bar(a_bar.size()),
        c(a_bar.size()),
        delta(static_cast<std::size_t>(length_), T(1)) {}

  std::size_t index(int t, int n) const { return static_cast<std::size_t>(t) * state_size + n; }

  void validate() const {
    const std::size_t expect = static_cast<std::size_t>(length) * state_size;
    if (state_size < 1) throw ArgumentError("DiscreteSsm: state size must be >= 1");
    if (a_bar.size() != expect || b_bar.size() != expect || c.size() != expect) {
      throw ShapeError("DiscreteSsm: per-step parameter lengths do not match length x state");
    }
  }

  bool time_invariant() const {
    for (int t = 1; t < length; ++t) {
      for (int n = 0; n < state_size; ++n) {
        const std::size_t i = index(t, n);
        const std::size_t j = index(0, n);
        if (a_bar[i] != a_bar[j] || b_bar[i] != b_bar[j] || c[i] != c[j]) return false;
      }
    }
    return true;
  }
};

/// Discretizes a continuous SSM with one positive timescale per step.
template <class T>
DiscreteSsm<T> discretize(const ContinuousSsm<T>& cont, std::span<const T> deltas) {
  cont.validate();
  const int length = static_cast<int>(deltas.size());
  const int n_state = cont.state_size();
  DiscreteSsm<T> out(length, n_state);
  for (int t = 0; t < length; ++t) {
    out.delta[static_cast<std::size_t>(t)] = deltas[static_cast<std::size_t>(t)];
    for (int n = 0; n < n_state; ++n) {
      const auto z = discretize(cont.a[n], cont.b[n], deltas[static_cast<std::size_t>(t)]);
      out.a_bar[out.index(t, n)] = z.a_bar;
      out.b_bar[out.index(t, n)] = z.b_bar;
      out.c[out.index(t, n)] = cont.c[n];
    }
  }
  return out;
}

/// Hidden state of one channel; zero-initialized.
template <class T>
struct ScanState {
  std::vector<T> h;

  ScanState() = default;
  explicit ScanState(int state_size) : h(static_cast<std::size_t>(state_size), T(0)) {}
};

namespace detail {
template <class T>
void check_scan_inputs(const DiscreteSsm<T>& ssm, std::size_t x_len, const ScanState<T>* h0) {
  ssm.validate();
  if (x_len != static_cast<std::size_t>(ssm.length)) {
    throw ShapeError("scan: input length " + std::to_string(x_len) + " != parameter length " +
                     std::to_string(ssm.length));
  }
  if (h0 && !h0->h.empty() && h0->h.size() != static_cast<std::size_t>(ssm.state_size)) {
    throw ShapeError("scan: initial state size mismatch");
  }
}
}  // namespace detail

/// h_t = a_bar_t * h_{t-1} + b_bar_t * x_t;  y_t = <c_t, h_t>.
/// When `state` is given it seeds h and receives the final state.
template <class T>
std::vector<T> scan_recurrent(const DiscreteSsm<T>& ssm, std::span<const T> x,
                              ScanState<T>* state = nullptr) {
  detail::check_scan_inputs(ssm, x.size(), state);
  const int n_state = ssm.state_size;
  std::vector<T> h(static_cast<std::size_t>(n_state), T(0));
  if (state && !state->h.empty()) h = state->h;
  std::vector<T> y(x.size());
  for (int t = 0; t < ssm.length; ++t) {
    T acc = 0;
    for (int n = 0; n < n_state; ++n) {
      const std::size_t i = ssm.index(t, n);
      h[n] = ssm.a_bar[i] * h[n] + ssm.b_bar[i] * x[static_cast<std::size_t>(t)];
      acc += ssm.c[i] * h[n];
    }
    y[static_cast<std::size_t>(t)] = acc;
  }
  if (state) state->h = std::move(h);
  return y;
}

/// Structured kernel K = (C B, C A B, ..., C A^{L-1} B) of a time-invariant SSM.
template <class T>
std::vector<T> ssm_kernel(const DiscreteSsm<T>& ssm) {
  ssm.validate();
  if (!ssm.time_invariant()) throw ModeError("ssm_kernel: parameters vary over time");
  std::vector<T> k(static_cast<std::size_t>(ssm.length), T(0));
  for (int n = 0; n < ssm.state_size; ++n) {
    const T a = ssm.a_bar[ssm.index(0, n)];
    const T cb = ssm.c[ssm.index(0, n)] * ssm.b_bar[ssm.index(0, n)];
    T power = 1;
    for (int j = 0; j < ssm.length; ++j) {
      k[static_cast<std::size_t>(j)] += cb * power;
      power *= a;
    }
  }
  return k;
}

/// Causal convolution y_t = sum_k K_k x_{t-k} (zero initial state).
template <class T>
std::vector<T> kernel_conv(const DiscreteSsm<T>& ssm, std::span<const T> x) {
  detail::check_scan_inputs<T>(ssm, x.size(), nullptr);
  const auto k = ssm_kernel(ssm);
  std::vector<T> y(x.size(), T(0));
  for (std::size_t t = 0; t < x.size(); ++t) {
    T acc = 0;
    for (std::size_t j = 0; j <= t; ++j) acc += k[j] * x[t - j];
    y[t] = acc;
  }
  return y;
}

/// Element of the linear-recurrence monoid: the map h -> a h + b.
template <class T>
struct AffineStep {
  T a;
  T b;
};

/// Applies `first` then `second`: (a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2).
template <class T>
AffineStep<T> compose(const AffineStep<T>& first, const AffineStep<T>& second) {
  return {first.a * second.a, second.a * first.b + second.b};
}

/// Inclusive prefix composition by a work-efficient up-sweep/down-sweep tree.
/// The first element is passed through untouched.
template <class T>
std::vector<AffineStep<T>> prefix_compose(const std::vector<AffineStep<T>>& steps) {
  const std::size_t n = steps.size();
  if (n == 0) return {};
  std::size_t size = 1;
  while (size < n) size <<= 1;
  const AffineStep<T> identity{T(1), T(0)};
  std::vector<AffineStep<T>> tree(size, identity);
  std::copy(steps.begin(), steps.end(), tree.begin());
  for (std::size_t stride = 1; stride < size; stride <<= 1) {
    for (std::size_t i = 2 * stride - 1; i < size; i += 2 * stride) {
      tree[i] = compose(tree[i - stride], tree[i]);
    }
  }
  tree[size - 1] = identity;
  for (std::size_t stride = size >> 1; stride >= 1; stride >>= 1) {
    for (std::size_t i = 2 * stride - 1; i < size; i += 2 * stride) {
      const AffineStep<T> left = tree[i - stride];
      tree[i - stride] = tree[i];
      tree[i] = compose(tree[i], left);
    }
  }
  // tree now holds the exclusive prefix; fold in each element.
  std::vector<AffineStep<T>> out(n);
  out[0] = steps[0];
  for (std::size_t i = 1; i < n; ++i) out[i] = compose(tree[i], steps[i]);
  return out;
}

/// Same result as scan_recurrent, evaluated as an associative prefix scan over
/// (a_bar_t, b_bar_t x_t) per state dimension.
template <class T>
std::vector<T> scan_parallel(const DiscreteSsm<T>& ssm, std::span<const T> x,
                             const ScanState<T>* h0 = nullptr) {
  detail::check_scan_inputs(ssm, x.size(), h0);
  const int length = ssm.length;
  const int n_state = ssm.state_size;
  std::vector<T> y(static_cast<std::size_t>(length), T(0));
  if (length == 0) return y;
  std::vector<T> h(static_cast<std::size_t>(length) * n_state);
  std::vector<AffineStep<T>> steps(static_cast<std::size_t>(length));
  for (int n = 0; n < n_state; ++n) {
    for (int t = 0; t < length; ++t) {
      const std::size_t i = ssm.index(t, n);
      steps[static_cast<std::size_t>(t)] = {ssm.a_bar[i], ssm.b_bar[i] * x[static_cast<std::size_t>(t)]};
    }
    const T start = (h0 && !h0->h.empty()) ? h0->h[static_cast<std::size_t>(n)] : T(0);
    steps[0].b = ssm.a_bar[ssm.index(0, n)] * start + ssm.b_bar[ssm.index(0, n)] * x[0];
    const auto prefix = prefix_compose(steps);
    for (int t = 0; t < length; ++t) h[ssm.index(t, n)] = prefix[static_cast<std::size_t>(t)].b;
  }
  for (int t = 0; t < length; ++t) {
    T acc = 0;
    for (int n = 0; n < n_state; ++n) acc += ssm.c[ssm.index(t, n)] * h[ssm.index(t, n)];
    y[static_cast<std::size_t>(t)] = acc;
  }
  return y;
}

}  // namespace moc::ssm
