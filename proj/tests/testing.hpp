#pragma once

// Shared oracles for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "qens/autodiff.hpp"
#include "qens/tensor.hpp"

namespace qtest {

using qens::Shape;
using qens::Tensor;
using qens::TensorD;

inline TensorD random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  TensorD t(s);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

/// Values bounded away from zero by `gap`, for kinked functions.
inline TensorD away_from_zero(const Shape& s, std::mt19937_64& rng, double gap = 1e-2) {
  std::uniform_real_distribution<double> u(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  TensorD t(s);
  for (auto& v : t.values()) v = sign(rng) ? u(rng) : -u(rng);
  return t;
}

/// Direct-loop dilated "same" convolution. x: [N, Cin, S...], w: [Cout, Cin, K...].
inline TensorD naive_conv(const TensorD& x, const TensorD& w, int dil, int sr) {
  const std::size_t N = x.dim(0), Ci = x.dim(1), Co = w.dim(0);
  std::vector<std::size_t> S(3, 1), K(3, 1);
  for (int a = 0; a < sr; ++a) {
    S[3 - sr + a] = x.dim(2 + a);
    K[3 - sr + a] = w.dim(2 + a);
  }
  Shape os{N, Co};
  for (int a = 0; a < sr; ++a) os.push_back(x.dim(2 + a));
  TensorD out(os);
  const std::size_t P = S[0] * S[1] * S[2];
  const std::size_t KK = K[0] * K[1] * K[2];
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < Co; ++o)
      for (std::size_t z = 0; z < S[0]; ++z)
        for (std::size_t y = 0; y < S[1]; ++y)
          for (std::size_t xx = 0; xx < S[2]; ++xx) {
            double acc = 0.0;
            for (std::size_t i = 0; i < Ci; ++i)
              for (std::size_t kz = 0; kz < K[0]; ++kz)
                for (std::size_t ky = 0; ky < K[1]; ++ky)
                  for (std::size_t kx = 0; kx < K[2]; ++kx) {
                    const long iz = static_cast<long>(z) + (static_cast<long>(kz) - static_cast<long>(K[0] / 2)) * dil;
                    const long iy = static_cast<long>(y) + (static_cast<long>(ky) - static_cast<long>(K[1] / 2)) * dil;
                    const long ix = static_cast<long>(xx) + (static_cast<long>(kx) - static_cast<long>(K[2] / 2)) * dil;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<long>(S[0]) || iy >= static_cast<long>(S[1]) ||
                        ix >= static_cast<long>(S[2]))
                      continue;
                    const double xv = x[((n * Ci + i) * S[0] + static_cast<std::size_t>(iz)) * S[1] * S[2] +
                                        static_cast<std::size_t>(iy) * S[2] + static_cast<std::size_t>(ix)];
                    const double wv = w[(o * Ci + i) * KK + (kz * K[1] + ky) * K[2] + kx];
                    acc += xv * wv;
                  }
            out[(n * Co + o) * P + (z * S[1] + y) * S[2] + xx] = acc;
          }
  return out;
}

/// Builds a scalar from parameters on a tape.
using ScalarFn = std::function<qens::Var<double>(qens::Tape<double>&, std::vector<qens::Var<double>>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t probes = 0;
};

/// Compares tape gradients of f with central differences (step h) on up to
/// `max_probes` elements per parameter. The error per parameter is
/// ||g_tape - g_fd|| / max(||g_tape||, ||g_fd||, floor) over probed entries.
inline GradCheck grad_check(std::vector<TensorD> params, const ScalarFn& f, std::mt19937_64& rng,
                            std::size_t max_probes = 64, double h = 1e-6) {
  std::vector<qens::Parameter<double>> ps;
  for (std::size_t i = 0; i < params.size(); ++i) ps.emplace_back("p" + std::to_string(i), params[i]);
  auto eval = [&](bool backward) {
    qens::Tape<double> tape;
    std::vector<qens::Var<double>> vs;
    for (auto& p : ps) vs.push_back(tape.param(p));
    auto loss = f(tape, vs);
    const double v = loss.value()[0];
    if (backward) tape.backward(loss);
    return v;
  };
  for (auto& p : ps) p.zero_grad();
  eval(true);
  GradCheck out;
  for (auto& p : ps) {
    std::vector<std::size_t> idx(p.value.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > max_probes) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_probes);
    }
    const TensorD analytic = p.grad;
    double num = 0.0, na = 0.0, nf = 0.0;
    for (auto i : idx) {
      const double keep = p.value[i];
      p.value[i] = keep + h;
      const double up = eval(false);
      p.value[i] = keep - h;
      const double dn = eval(false);
      p.value[i] = keep;
      const double fd = (up - dn) / (2 * h);
      num += (analytic[i] - fd) * (analytic[i] - fd);
      na += analytic[i] * analytic[i];
      nf += fd * fd;
      ++out.probes;
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nf), 1e-3});
    out.max_rel_error = std::max(out.max_rel_error, std::sqrt(num) / denom);
  }
  return out;
}

}  // namespace qtest
