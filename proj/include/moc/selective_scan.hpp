#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "moc/autograd.hpp"
#include "moc/nn.hpp"
#include "moc/ops.hpp"
#include "moc/ssm.hpp"

namespace moc {

/// Differentiable input-dependent scan over D channels with an N-dim diagonal
/// state per channel.
///
///   u:      L x D   input sequence
///   delta:  L x D   positive timescales
///   a:      D x N   continuous diagonal (negative)
///   b, c:   L x N   per-step input / output vectors, shared across channels
///   d_skip: D       optional direct feed-through
///
/// Per step: a_bar = exp(delta a), b_bar = zoh_gain(a, delta) b,
/// h_t = a_bar h_{t-1} + b_bar u_t, y_t = <c_t, h_t> + d_skip u_t.
template <class T>
BasicVar<T> selective_scan(const BasicVar<T>& u, const BasicVar<T>& delta, const BasicVar<T>& a,
                           const BasicVar<T>& b, const BasicVar<T>& c, const BasicVar<T>& d_skip = {}) {
  detail::require_rank(u, 2, "selective_scan u");
  detail::require_rank(a, 2, "selective_scan a");
  const int length = u.dim(0);
  const int channels = u.dim(1);
  const int n_state = a.dim(1);
  if (delta.shape() != u.shape()) throw ShapeError("selective_scan: delta must match u");
  if (a.dim(0) != channels) throw ShapeError("selective_scan: a rows must equal channels");
  const Shape seq_state{length, n_state};
  if (b.shape() != seq_state || c.shape() != seq_state) {
    throw ShapeError("selective_scan: b and c must be " + shape_str(seq_state) + ", got " +
                     shape_str(b.shape()) + " and " + shape_str(c.shape()));
  }
  if (d_skip.defined() && d_skip.size() != static_cast<std::size_t>(channels)) {
    throw ShapeError("selective_scan: d_skip width mismatch");
  }

  const std::size_t cells = static_cast<std::size_t>(length) * channels * n_state;
  std::vector<T> hist(cells);
  std::vector<T> abar(cells);
  std::vector<T> gain(cells);
  BasicTensor<T> out(Shape{length, channels});
  const T* uv = u.value().data();
  const T* dv = delta.value().data();
  const T* av = a.value().data();
  const T* bv = b.value().data();
  const T* cv = c.value().data();
  std::vector<T> h(static_cast<std::size_t>(channels) * n_state, T(0));
  for (int t = 0; t < length; ++t) {
    for (int d = 0; d < channels; ++d) {
      const std::size_t td = static_cast<std::size_t>(t) * channels + d;
      const T dt = dv[td];
      if (!(dt > T(0))) throw NumericError("selective_scan: non-positive timescale");
      const T x = uv[td];
      T acc = d_skip.defined() ? d_skip.value()[static_cast<std::size_t>(d)] * x : T(0);
      for (int n = 0; n < n_state; ++n) {
        const std::size_t dn = static_cast<std::size_t>(d) * n_state + n;
        const std::size_t tn = static_cast<std::size_t>(t) * n_state + n;
        const std::size_t cell = td * n_state + n;
        const T an = av[dn];
        const T ab = std::exp(dt * an);
        const T g = ssm::zoh_input_gain(an, dt);
        h[dn] = ab * h[dn] + (g * bv[tn]) * x;
        abar[cell] = ab;
        gain[cell] = g;
        hist[cell] = h[dn];
        acc += cv[tn] * h[dn];
      }
      out[td] = acc;
    }
  }

  return detail::make_result<T>(
      std::move(out), {u, delta, a, b, c, d_skip}, "selective_scan",
      [length, channels, n_state, hist = std::move(hist), abar = std::move(abar),
       gain = std::move(gain)](Node<T>& self) {
        const T* uv = self.parents[0]->value.data();
        const T* dv = self.parents[1]->value.data();
        const T* av = self.parents[2]->value.data();
        const T* bv = self.parents[3]->value.data();
        const T* cv = self.parents[4]->value.data();
        const bool has_skip = static_cast<bool>(self.parents[5]);
        const T* sv = has_skip ? self.parents[5]->value.data() : nullptr;
        const T* gy = self.grad.data();

        std::vector<T> gu(static_cast<std::size_t>(length) * channels, T(0));
        std::vector<T> gdelta(gu.size(), T(0));
        std::vector<T> ga(static_cast<std::size_t>(channels) * n_state, T(0));
        std::vector<T> gb(static_cast<std::size_t>(length) * n_state, T(0));
        std::vector<T> gc(gb.size(), T(0));
        std::vector<T> gskip(static_cast<std::size_t>(channels), T(0));
        // Adjoint of h_t carried backwards, already multiplied by a_bar_{t+1}.
        std::vector<T> carry(static_cast<std::size_t>(channels) * n_state, T(0));
        const T taylor = static_cast<T>(ssm::kTaylorThreshold);

        for (int t = length - 1; t >= 0; --t) {
          for (int d = 0; d < channels; ++d) {
            const std::size_t td = static_cast<std::size_t>(t) * channels + d;
            const T go = gy[td];
            const T x = uv[td];
            const T dt = dv[td];
            T gx = has_skip ? sv[d] * go : T(0);
            if (has_skip) gskip[static_cast<std::size_t>(d)] += go * x;
            T gdt = 0;
            for (int n = 0; n < n_state; ++n) {
              const std::size_t dn = static_cast<std::size_t>(d) * n_state + n;
              const std::size_t tn = static_cast<std::size_t>(t) * n_state + n;
              const std::size_t cell = td * n_state + n;
              const T an = av[dn];
              const T ab = abar[cell];
              const T g = gain[cell];
              const T h_prev = t > 0 ? hist[cell - static_cast<std::size_t>(channels) * n_state] : T(0);
              const T gh = carry[dn] + cv[tn] * go;
              gc[tn] += go * hist[cell];
              const T g_abar = gh * h_prev;
              const T g_bbar = gh * x;
              gx += gh * g * bv[tn];
              gb[tn] += g_bbar * g;
              const T g_gain = g_bbar * bv[tn];
              const bool linear_branch = std::abs(dt * an) < taylor;
              const T dgain_ddt = linear_branch ? T(1) : ab;
              const T dgain_da = linear_branch ? T(0) : (dt * ab - g) / an;
              gdt += g_abar * an * ab + g_gain * dgain_ddt;
              ga[dn] += g_abar * dt * ab + g_gain * dgain_da;
              carry[dn] = gh * ab;
            }
            gu[td] += gx;
            gdelta[td] += gdt;
          }
        }

        auto flush = [&self](std::size_t i, const std::vector<T>& g) {
          if (!detail::wants_grad(self, i)) return;
          auto& dst = detail::parent_grad(self, i);
          for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
        };
        flush(0, gu);
        flush(1, gdelta);
        flush(2, ga);
        flush(3, gb);
        flush(4, gc);
        flush(5, gskip);
      });
}

/// Selective SSM layer: the timescale, input and output vectors are
/// projections of the current token, A = -exp(a_log) stays negative.
template <class T>
struct SelectiveSsm {
  BasicVar<T> a_log;   // D x N
  Linear<T> b_proj;    // D -> N, no bias
  Linear<T> c_proj;    // D -> N, no bias
  Linear<T> delta_proj;  // D -> D
  BasicVar<T> d_skip;  // D

  SelectiveSsm() = default;
  SelectiveSsm(int channels, int state_size, Rng& rng)
      : b_proj(channels, state_size, rng, false),
        c_proj(channels, state_size, rng, false),
        delta_proj(channels, channels, rng, true) {
    if (channels < 1 || state_size < 1) throw ConfigError("SelectiveSsm: channels and state size must be >= 1");
    BasicTensor<T> alog(Shape{channels, state_size});
    for (int d = 0; d < channels; ++d) {
      for (int n = 0; n < state_size; ++n) {
        alog[static_cast<std::size_t>(d) * state_size + n] = static_cast<T>(std::log(n + 1.0));
      }
    }
    a_log = parameter(std::move(alog));
    d_skip = parameter(BasicTensor<T>(Shape{channels}, T(1)));
  }

  int channels() const { return a_log.dim(0); }
  int state_size() const { return a_log.dim(1); }

  BasicVar<T> a_matrix() const { return scale(exp(a_log), T(-1)); }

  /// x: L x D. `c_offset` (L x N), when given, is added to the projected
  /// output vectors before the scan.
  BasicVar<T> operator()(const BasicVar<T>& x, const BasicVar<T>& c_offset = {}) const {
    if (x.value().rank() != 2 || x.dim(1) != channels()) {
      throw ShapeError("SelectiveSsm: expected L x " + std::to_string(channels()) + " input, got " +
                       shape_str(x.shape()));
    }
    auto delta = softplus(delta_proj(x));
    auto b = b_proj(x);
    auto c = c_proj(x);
    if (c_offset.defined()) {
      if (c_offset.shape() != c.shape()) {
        throw ConfigError("SelectiveSsm: output-matrix offset " + shape_str(c_offset.shape()) +
                          " does not match state size " + std::to_string(state_size()));
      }
      c = add(c, c_offset);
    }
    return selective_scan(x, delta, a_matrix(), b, c, d_skip);
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(prefix + ".a_log", a_log);
    b_proj.collect(out, prefix + ".b_proj");
    c_proj.collect(out, prefix + ".c_proj");
    delta_proj.collect(out, prefix + ".delta_proj");
    out.emplace_back(prefix + ".d_skip", d_skip);
  }
};

}  // namespace moc
