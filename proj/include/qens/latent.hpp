#pragma once

// Latent-space tokenization: stacked ensemble latents, chunked randomized
// SVD, per-block partial projectors, k-means token maps and
// token-conditioned histograms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "qens/error.hpp"
#include "qens/rng.hpp"
#include "qens/tensor.hpp"

namespace qens::latent {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Block {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

/// Member latent channels as rows, spatial positions as columns.
struct LatentStack {
  Matrix X;                  // d_total x T
  std::vector<Block> blocks;  // member -> row range, in member order
  Shape spatial;             // extents flattened into the columns
  std::size_t chunk_cols = 4096;

  std::size_t rows() const { return static_cast<std::size_t>(X.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(X.cols()); }
};

/// Stacks per-member latent maps shaped [d_j, spatial...].
template <typename T>
LatentStack stack_latents(const std::vector<Tensor<T>>& maps) {
  if (maps.empty()) throw ValueError("stack_latents: no latent maps");
  LatentStack s;
  s.spatial.assign(maps[0].shape().begin() + 1, maps[0].shape().end());
  std::size_t d_total = 0;
  for (std::size_t m = 0; m < maps.size(); ++m) {
    if (maps[m].rank() < 2) throw ShapeError("stack_latents: member " + std::to_string(m) + " map must be [d, spatial...]");
    const Shape sp(maps[m].shape().begin() + 1, maps[m].shape().end());
    if (sp != s.spatial)
      throw ShapeError("stack_latents: member " + std::to_string(m) + " has spatial extents " + shape_str(sp) +
                       ", expected " + shape_str(s.spatial));
    s.blocks.push_back({d_total, d_total + maps[m].dim(0)});
    d_total += maps[m].dim(0);
  }
  const std::size_t T_ = shape_numel(s.spatial);
  s.X.resize(static_cast<Eigen::Index>(d_total), static_cast<Eigen::Index>(T_));
  for (std::size_t m = 0; m < maps.size(); ++m)
    for (std::size_t c = 0; c < maps[m].dim(0); ++c)
      for (std::size_t t = 0; t < T_; ++t)
        s.X(static_cast<Eigen::Index>(s.blocks[m].begin + c), static_cast<Eigen::Index>(t)) =
            static_cast<double>(maps[m][c * T_ + t]);
  return s;
}

/// Column-chunk access to a rows x cols matrix that need not live in memory.
struct ColumnSource {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t chunk_cols = 4096;
  std::function<Matrix(std::size_t begin, std::size_t end)> chunk;
};

inline ColumnSource column_source(const Matrix& X, std::size_t chunk_cols) {
  return {static_cast<std::size_t>(X.rows()), static_cast<std::size_t>(X.cols()), chunk_cols,
          [&X](std::size_t b, std::size_t e) -> Matrix {
            return X.middleCols(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b));
          }};
}

inline ColumnSource column_source(const LatentStack& s) { return column_source(s.X, s.chunk_cols); }

struct SvdOptions {
  std::size_t rank = 20;
  std::size_t oversample = 10;
  int power_iters = 2;
  std::uint64_t seed = 0;
};

struct SvdResult {
  Matrix U;  // rows x r
  Vector S;  // r, nonincreasing
  Matrix V;  // cols x r
};

namespace detail {

inline Matrix orthonormal_basis(const Matrix& Y) {
  const Eigen::Index k = std::min(Y.rows(), Y.cols());
  Eigen::HouseholderQR<Matrix> qr(Y);
  return qr.householderQ() * Matrix::Identity(Y.rows(), k);
}

template <typename Fn>
void for_each_chunk(const ColumnSource& src, Fn&& fn) {
  const std::size_t step = std::max<std::size_t>(1, src.chunk_cols);
  for (std::size_t b = 0; b < src.cols; b += step) {
    const std::size_t e = std::min(src.cols, b + step);
    const Matrix C = src.chunk(b, e);
    if (static_cast<std::size_t>(C.rows()) != src.rows || static_cast<std::size_t>(C.cols()) != e - b)
      throw ShapeError("randomized_svd: chunk [" + std::to_string(b) + "," + std::to_string(e) + ") has wrong shape");
    fn(b, e, C);
  }
}

}  // namespace detail

/// Truncated randomized SVD with a Gaussian range finder and power
/// iterations. X is only touched one column chunk at a time; the outputs
/// and the n x l sketch are the only cols-sized allocations.
inline SvdResult randomized_svd(const ColumnSource& src, const SvdOptions& opt) {
  const std::size_t m = src.rows, n = src.cols;
  if (opt.rank == 0) throw ValueError("randomized_svd: rank must be >= 1");
  if (opt.rank > std::min(m, n))
    throw ValueError("randomized_svd: rank " + std::to_string(opt.rank) + " exceeds min(rows, cols) = " +
                     std::to_string(std::min(m, n)));
  const auto l = static_cast<Eigen::Index>(std::min(opt.rank + opt.oversample, std::min(m, n)));
  Rng rng = make_rng(substream(opt.seed, "svd"));
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix omega(static_cast<Eigen::Index>(n), l);
  for (Eigen::Index i = 0; i < omega.rows(); ++i)
    for (Eigen::Index j = 0; j < l; ++j) omega(i, j) = nd(rng);

  auto times = [&](const Matrix& Z) {  // X * Z
    Matrix Y = Matrix::Zero(static_cast<Eigen::Index>(m), Z.cols());
    detail::for_each_chunk(src, [&](std::size_t b, std::size_t e, const Matrix& C) {
      Y.noalias() += C * Z.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b));
    });
    return Y;
  };
  auto times_t = [&](const Matrix& Q) {  // X^T * Q
    Matrix Z(static_cast<Eigen::Index>(n), Q.cols());
    detail::for_each_chunk(src, [&](std::size_t b, std::size_t e, const Matrix& C) {
      Z.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(e - b)).noalias() = C.transpose() * Q;
    });
    return Z;
  };

  Matrix Q = detail::orthonormal_basis(times(omega));
  for (int it = 0; it < opt.power_iters; ++it) {
    const Matrix Z = detail::orthonormal_basis(times_t(Q));
    Q = detail::orthonormal_basis(times(Z));
  }
  const Matrix Bt = times_t(Q);  // (Q^T X)^T, n x l
  Eigen::BDCSVD<Matrix> svd(Bt, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto r = static_cast<Eigen::Index>(opt.rank);
  SvdResult out;
  out.S = svd.singularValues().head(r);
  out.V = svd.matrixU().leftCols(r);
  out.U = Q * svd.matrixV().leftCols(r);
  return out;
}

inline SvdResult randomized_svd(const LatentStack& s, const SvdOptions& opt) {
  return randomized_svd(column_source(s), opt);
}

inline SvdResult randomized_svd(const Matrix& X, const SvdOptions& opt, std::size_t chunk_cols) {
  return randomized_svd(column_source(X, chunk_cols), opt);
}

/// P_j = M_j diag(S)^-1 for each row block M_j of M.
///
/// With X = U S V^T and X's columns split into blocks X_j, passing V gives
/// sum_j X_j P_j = U. For a LatentStack (blocks over rows) pass U instead:
/// sum_j X_j^T P_j = V, the per-position coordinates.
inline std::vector<Matrix> partial_projectors(const Matrix& M, const Vector& S, const std::vector<Block>& blocks) {
  if (M.cols() != S.size()) throw ShapeError("partial_projectors: basis has " + std::to_string(M.cols()) +
                                             " columns for " + std::to_string(S.size()) + " singular values");
  for (Eigen::Index i = 0; i < S.size(); ++i)
    if (!(S(i) > 0.0))
      throw NumericError("partial_projectors: singular value " + std::to_string(i) +
                         " is zero; drop trailing zero modes by lowering the rank");
  std::size_t expect = 0;
  for (const auto& b : blocks) {
    if (b.begin != expect || b.end < b.begin) throw ValueError("partial_projectors: blocks must tile the rows in order");
    expect = b.end;
  }
  if (expect != static_cast<std::size_t>(M.rows()))
    throw ValueError("partial_projectors: blocks cover " + std::to_string(expect) + " of " +
                     std::to_string(M.rows()) + " rows");
  const Vector inv = S.cwiseInverse();
  std::vector<Matrix> P;
  for (const auto& b : blocks)
    P.push_back(M.middleRows(static_cast<Eigen::Index>(b.begin), static_cast<Eigen::Index>(b.size())) * inv.asDiagonal());
  return P;
}

/// sum_j X_j^T P_j over the row blocks of the stack: the r-dimensional
/// coordinates of every position (T x r).
inline Matrix project_stack(const LatentStack& s, const std::vector<Matrix>& P) {
  if (P.size() != s.blocks.size()) throw ShapeError("project_stack: projector count does not match block count");
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(s.cols()), P.empty() ? 0 : P[0].cols());
  for (std::size_t j = 0; j < P.size(); ++j)
    out.noalias() += s.X.middleRows(static_cast<Eigen::Index>(s.blocks[j].begin),
                                    static_cast<Eigen::Index>(s.blocks[j].size())).transpose() * P[j];
  return out;
}

/// Per-column zero mean and unit variance; constant columns are centered only.
inline Matrix standardize(const Matrix& F) {
  Matrix out = F;
  for (Eigen::Index c = 0; c < F.cols(); ++c) {
    const double mean = F.col(c).mean();
    out.col(c).array() -= mean;
    const double sd = std::sqrt(out.col(c).squaredNorm() / static_cast<double>(F.rows()));
    if (sd > 0.0) out.col(c) /= sd;
  }
  return out;
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

struct TokenMap {
  std::vector<std::int32_t> labels;  // one per position
  Matrix centroids;                  // r x k
  std::size_t rank = 0;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> inertia;  // after each Lloyd iteration
  Shape spatial;
};

struct KMeansOptions {
  std::size_t k = 20;
  std::uint64_t seed = 0;
  int max_iters = 100;
};

/// k-means++ seeding then Lloyd iterations until the assignment stops
/// changing. An empty cluster is re-seeded at the point farthest from its
/// current centroid (lowest index on ties).
inline TokenMap kmeans(const Matrix& F, const KMeansOptions& opt) {
  const auto n = static_cast<std::size_t>(F.rows());
  const auto r = F.cols();
  if (opt.k == 0) throw ValueError("kmeans: k must be >= 1");
  if (opt.k > n) throw ValueError("kmeans: k = " + std::to_string(opt.k) + " exceeds " + std::to_string(n) + " points");
  if (!F.allFinite()) throw NumericError("kmeans: non-finite features");
  const RowMatrix X = F;
  const auto k = static_cast<Eigen::Index>(opt.k);
  RowMatrix C(k, r);
  Rng rng = make_rng(substream(opt.seed, "kmeans"));

  auto sqdist = [&](std::size_t i, Eigen::Index c) { return (X.row(static_cast<Eigen::Index>(i)) - C.row(c)).squaredNorm(); };

  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
  C.row(0) = X.row(static_cast<Eigen::Index>(std::min(first, n - 1)));
  for (Eigen::Index c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sqdist(i, c - 1));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      const double u = uniform01(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        pick = i;
        acc += d2[i];
        if (u < acc) break;
      }
    } else {
      pick = std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
    }
    C.row(c) = X.row(static_cast<Eigen::Index>(pick));
  }

  TokenMap tm;
  tm.rank = static_cast<std::size_t>(r);
  tm.k = opt.k;
  tm.seed = opt.seed;
  tm.labels.assign(n, -1);
  std::vector<double> dist(n, 0.0);
  for (int it = 0; it < opt.max_iters; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      double bd = sqdist(i, 0);
      for (Eigen::Index c = 1; c < k; ++c) {
        const double d = sqdist(i, c);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (tm.labels[i] != static_cast<std::int32_t>(best)) changed = true;
      tm.labels[i] = static_cast<std::int32_t>(best);
      dist[i] = bd;
    }
    // Re-seed empty clusters one at a time from the farthest point.
    std::vector<std::size_t> counts(opt.k, 0);
    for (auto l : tm.labels) ++counts[static_cast<std::size_t>(l)];
    for (Eigen::Index c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i)
        if (counts[static_cast<std::size_t>(tm.labels[i])] > 1 && (far == n || dist[i] > dist[far])) far = i;
      if (far == n) break;
      --counts[static_cast<std::size_t>(tm.labels[far])];
      ++counts[static_cast<std::size_t>(c)];
      tm.labels[far] = static_cast<std::int32_t>(c);
      dist[far] = 0.0;
      C.row(c) = X.row(static_cast<Eigen::Index>(far));
      changed = true;
    }
    RowMatrix sum = RowMatrix::Zero(k, r);
    for (std::size_t i = 0; i < n; ++i) sum.row(tm.labels[i]) += X.row(static_cast<Eigen::Index>(i));
    for (Eigen::Index c = 0; c < k; ++c)
      if (counts[static_cast<std::size_t>(c)] > 0) C.row(c) = sum.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) inertia += sqdist(i, tm.labels[i]);
    if (!tm.inertia.empty() && inertia > tm.inertia.back() * (1.0 + 1e-10) + 1e-300)
      throw NumericError("kmeans: inertia increased at iteration " + std::to_string(it));
    tm.inertia.push_back(inertia);
    tm.iterations = it + 1;
    if (!changed && it > 0) {
      tm.converged = true;
      break;
    }
  }
  tm.centroids = C.transpose();
  return tm;
}

struct TokenizeOptions {
  SvdOptions svd;
  KMeansOptions kmeans;
};

struct TokenizeResult {
  SvdResult svd;
  std::vector<Matrix> projectors;
  Matrix features;  // standardized T x r
  TokenMap tokens;
};

/// stack -> randomized SVD -> partial projectors -> standardized
/// coordinates -> k-means.
inline TokenizeResult tokenize(const LatentStack& s, const TokenizeOptions& opt) {
  if (opt.svd.rank > s.rows())
    throw ValueError("tokenize: rank " + std::to_string(opt.svd.rank) + " exceeds the stacked latent dimension " +
                     std::to_string(s.rows()));
  TokenizeResult r;
  r.svd = randomized_svd(s, opt.svd);
  r.projectors = partial_projectors(r.svd.U, r.svd.S, s.blocks);
  r.features = standardize(project_stack(s, r.projectors));
  r.tokens = kmeans(r.features, opt.kmeans);
  r.tokens.spatial = s.spatial;
  return r;
}

// ---------------------------------------------------------------------------
// Token-conditioned histograms
// ---------------------------------------------------------------------------

struct TokenHistogram {
  std::int32_t token = 0;
  std::size_t population = 0;
  double mean = 0.0;
  std::vector<std::size_t> counts;
};

struct HistogramSet {
  std::vector<double> edges;  // nbins + 1
  std::vector<TokenHistogram> tokens;  // sorted by decreasing mean; empty tokens last
};

/// Histograms over `bins` equal-width bins spanning [lo, hi]; when lo == hi
/// the data range is used (widened by 0.5 for constant data). Values on the
/// top edge fall in the last bin; values outside are not counted.
template <typename T>
HistogramSet token_histogram(const TokenMap& tm, const Tensor<T>& intensity, std::size_t bins, double lo = 0.0,
                             double hi = 0.0) {
  if (intensity.size() != tm.labels.size())
    throw ShapeError("token_histogram: " + std::to_string(intensity.size()) + " intensities for " +
                     std::to_string(tm.labels.size()) + " positions");
  if (bins == 0) throw ValueError("token_histogram: bins must be >= 1");
  if (lo == hi) {
    const auto [mn, mx] = std::minmax_element(intensity.values().begin(), intensity.values().end());
    lo = static_cast<double>(*mn);
    hi = static_cast<double>(*mx);
    if (lo == hi) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
  if (!(hi > lo)) throw ValueError("token_histogram: empty range");
  HistogramSet hs;
  for (std::size_t b = 0; b <= bins; ++b) hs.edges.push_back(lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins));
  std::vector<TokenHistogram> h(tm.k);
  std::vector<double> sums(tm.k, 0.0);
  for (std::size_t t = 0; t < tm.k; ++t) {
    h[t].token = static_cast<std::int32_t>(t);
    h[t].counts.assign(bins, 0);
  }
  for (std::size_t i = 0; i < tm.labels.size(); ++i) {
    const auto t = static_cast<std::size_t>(tm.labels[i]);
    const double v = static_cast<double>(intensity[i]);
    ++h[t].population;
    sums[t] += v;
    if (v < lo || v > hi) continue;
    auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
    h[t].counts[std::min(b, bins - 1)]++;
  }
  for (std::size_t t = 0; t < tm.k; ++t)
    h[t].mean = h[t].population ? sums[t] / static_cast<double>(h[t].population) : std::numeric_limits<double>::quiet_NaN();
  std::stable_sort(h.begin(), h.end(), [](const TokenHistogram& a, const TokenHistogram& b) {
    if (a.population == 0 || b.population == 0) return a.population > b.population;
    return a.mean > b.mean;
  });
  hs.tokens = std::move(h);
  return hs;
}

inline Tensor<std::int32_t> label_tensor(const TokenMap& tm) {
  Tensor<std::int32_t> t(tm.spatial.empty() ? Shape{tm.labels.size()} : tm.spatial);
  std::copy(tm.labels.begin(), tm.labels.end(), t.data());
  return t;
}

inline nlohmann::json to_json(const TokenMap& tm) {
  nlohmann::json c = nlohmann::json::array();
  for (Eigen::Index j = 0; j < tm.centroids.cols(); ++j) {
    std::vector<double> col(tm.centroids.col(j).data(), tm.centroids.col(j).data() + tm.centroids.rows());
    c.push_back(col);
  }
  return {{"rank", tm.rank},           {"k", tm.k},         {"seed", tm.seed}, {"iterations", tm.iterations},
          {"converged", tm.converged}, {"inertia", tm.inertia}, {"spatial", tm.spatial}, {"centroids", c}};
}

}  // namespace qens::latent
