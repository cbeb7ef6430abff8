#pragma once

// Differentiable operations over BasicTensor. All ops copy their outputs;
// backward closures read the (immutable) parent values directly.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tmoe/error.hpp"
#include "tmoe/rng.hpp"
#include "tmoe/tensor.hpp"

namespace tmoe {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMatrix<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMatrix<T>, 0, Eigen::OuterStride<>>;

namespace detail {

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  require(a == b, ErrorCategory::kDimension,
          std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void check_rank(std::int64_t rank, std::int64_t expected, const Shape& s, const char* op) {
  require(rank == expected, ErrorCategory::kDimension,
          std::string(op) + ": expected rank " + std::to_string(expected) + ", got " +
              shape_str(s));
}

template <class T>
ConstMatrixMap<T> cmat(const Node<T>* n, std::int64_t rows, std::int64_t cols) {
  return ConstMatrixMap<T>(n->data.data(), rows, cols);
}

template <class T>
MatrixMap<T> gmat(Node<T>* n, std::int64_t rows, std::int64_t cols) {
  return MatrixMap<T>(n->ensure_grad().data(), rows, cols);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), ErrorCategory::kDimension,
          "matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Storage<T> out(static_cast<std::size_t>(m * n));
  MatrixMap<T>(out.data(), m, n).noalias() =
      detail::cmat(a.node().get(), m, k) * detail::cmat(b.node().get(), k, n);
  Node<T>* pa = a.node().get();
  Node<T>* pb = b.node().get();
  return detail::make_result<T>({m, n}, std::move(out), {&a, &b}, [pa, pb, m, k, n](Node<T>& o) {
    ConstMatrixMap<T> dc(o.grad.data(), m, n);
    if (pa->requires_grad)
      detail::gmat(pa, m, k).noalias() += dc * detail::cmat(pb, k, n).transpose();
    if (pb->requires_grad)
      detail::gmat(pb, k, n).noalias() += detail::cmat(pa, m, k).transpose() * dc;
  });
}

// x[r, in] * w[in, out] (+ bias[out] broadcast over rows).
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>* bias = nullptr) {
  require(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(0), ErrorCategory::kDimension,
          "linear: cannot apply weight " + shape_str(w.shape()) + " to input " +
              shape_str(x.shape()));
  const auto r = x.dim(0), in = x.dim(1), outd = w.dim(1);
  if (bias) {
    require(bias->rank() == 1 && bias->dim(0) == outd, ErrorCategory::kDimension,
            "linear: bias " + shape_str(bias->shape()) + " does not match weight " +
                shape_str(w.shape()));
  }
  Storage<T> out(static_cast<std::size_t>(r * outd));
  MatrixMap<T> y(out.data(), r, outd);
  y.noalias() = detail::cmat(x.node().get(), r, in) * detail::cmat(w.node().get(), in, outd);
  Node<T>* pb = nullptr;
  if (bias) {
    pb = bias->node().get();
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(pb->data.data(), outd);
  }
  Node<T>* px = x.node().get();
  Node<T>* pw = w.node().get();
  return detail::make_result<T>(
      {r, outd}, std::move(out), {&x, &w, bias}, [px, pw, pb, r, in, outd](Node<T>& o) {
        ConstMatrixMap<T> dy(o.grad.data(), r, outd);
        if (px->requires_grad)
          detail::gmat(px, r, in).noalias() += dy * detail::cmat(pw, in, outd).transpose();
        if (pw->requires_grad)
          detail::gmat(pw, in, outd).noalias() += detail::cmat(px, r, in).transpose() * dy;
        if (pb && pb->requires_grad) {
          Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(pb->ensure_grad().data(), outd) +=
              dy.colwise().sum();
        }
      });
}

template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b) {
  return linear(x, w, &b);
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::check_rank(a.rank(), 2, a.shape(), "transpose");
  const auto m = a.dim(0), n = a.dim(1);
  Storage<T> out(static_cast<std::size_t>(m * n));
  MatrixMap<T>(out.data(), n, m) = detail::cmat(a.node().get(), m, n).transpose();
  Node<T>* pa = a.node().get();
  return detail::make_result<T>({n, m}, std::move(out), {&a}, [pa, m, n](Node<T>& o) {
    detail::gmat(pa, m, n) += ConstMatrixMap<T>(o.grad.data(), n, m).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  Storage<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  Node<T>* pa = a.node().get();
  Node<T>* pb = b.node().get();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [pa, pb](Node<T>& o) {
    for (Node<T>* p : {pa, pb}) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  Storage<T> out(a.data().begin(), a.data().end());
  const auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  Node<T>* pa = a.node().get();
  Node<T>* pb = b.node().get();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, [pa, pb](Node<T>& o) {
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * pa->data[i];
    }
  });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
  Storage<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  Node<T>* pa = a.node().get();
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, [pa, factor](Node<T>& o) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

// Subgradient 0 at the kink.
template <class T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  Storage<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  Node<T>* pa = a.node().get();
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, [pa](Node<T>& o) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (pa->data[i] > T(0)) g[i] += o.grad[i];
    }
  });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  T total = 0;
  for (auto v : a.data()) total += v;
  Node<T>* pa = a.node().get();
  return detail::make_result<T>({1}, {total}, {&a}, [pa](Node<T>& o) {
    auto& g = pa->ensure_grad();
    for (auto& v : g) v += o.grad[0];
  });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Same values, new shape.
template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), ErrorCategory::kDimension,
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Storage<T> out(a.data().begin(), a.data().end());
  Node<T>* pa = a.node().get();
  return detail::make_result<T>(std::move(shape), std::move(out), {&a}, [pa](Node<T>& o) {
    auto& g = pa->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

// Layer normalisation over the last axis, with optional affine parameters.
template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>* gamma,
                          const BasicTensor<T>* beta, T eps = T(1e-5)) {
  const auto c = x.dim(-1);
  const auto rows = x.numel() / c;
  if (gamma) detail::check_same_shape(gamma->shape(), Shape{c}, "layer_norm(gamma)");
  if (beta) detail::check_same_shape(beta->shape(), Shape{c}, "layer_norm(beta)");
  auto xhat = std::make_shared<Storage<T>>(static_cast<std::size_t>(x.numel()));
  auto rstd = std::make_shared<Storage<T>>(static_cast<std::size_t>(rows));
  Storage<T> out(static_cast<std::size_t>(x.numel()));
  const auto xd = x.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xd.data() + r * c;
    T mu = 0;
    for (std::int64_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    for (std::int64_t j = 0; j < c; ++j) {
      const T h = (row[j] - mu) * rs;
      (*xhat)[static_cast<std::size_t>(r * c + j)] = h;
      T y = h;
      if (gamma) y *= gamma->data()[static_cast<std::size_t>(j)];
      if (beta) y += beta->data()[static_cast<std::size_t>(j)];
      out[static_cast<std::size_t>(r * c + j)] = y;
    }
  }
  Node<T>* px = x.node().get();
  Node<T>* pg = gamma ? gamma->node().get() : nullptr;
  Node<T>* pb = beta ? beta->node().get() : nullptr;
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, gamma, beta},
      [px, pg, pb, xhat, rstd, rows, c](Node<T>& o) {
        Storage<T> dh(static_cast<std::size_t>(c));
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* dy = o.grad.data() + r * c;
          const T* h = xhat->data() + r * c;
          if (pg && pg->requires_grad) {
            auto& gg = pg->ensure_grad();
            for (std::int64_t j = 0; j < c; ++j) gg[static_cast<std::size_t>(j)] += dy[j] * h[j];
          }
          if (pb && pb->requires_grad) {
            auto& gb = pb->ensure_grad();
            for (std::int64_t j = 0; j < c; ++j) gb[static_cast<std::size_t>(j)] += dy[j];
          }
          if (!px->requires_grad) continue;
          T mean_dh = 0, mean_dh_h = 0;
          for (std::int64_t j = 0; j < c; ++j) {
            dh[static_cast<std::size_t>(j)] = pg ? dy[j] * pg->data[static_cast<std::size_t>(j)] : dy[j];
            mean_dh += dh[static_cast<std::size_t>(j)];
            mean_dh_h += dh[static_cast<std::size_t>(j)] * h[j];
          }
          mean_dh /= static_cast<T>(c);
          mean_dh_h /= static_cast<T>(c);
          auto& gx = px->ensure_grad();
          const T rs = (*rstd)[static_cast<std::size_t>(r)];
          for (std::int64_t j = 0; j < c; ++j) {
            gx[static_cast<std::size_t>(r * c + j)] +=
                rs * (dh[static_cast<std::size_t>(j)] - mean_dh - h[j] * mean_dh_h);
          }
        }
      });
}

template <class T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5)) {
  return layer_norm(x, &gamma, &beta, eps);
}

// Identity in evaluation mode. The keep-mask of element i is a pure function
// of (seed, layer, step, i).
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t layer = 0;
  std::uint64_t step = 0;
};

template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, DropoutKey key, bool training) {
  require(rate >= 0.0 && rate < 1.0, ErrorCategory::kConfig,
          "dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const auto rng = CounterRng::keyed(key.seed, key.layer, key.step);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<Storage<T>>(static_cast<std::size_t>(x.numel()));
  Storage<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T m = rng.uniform(i) >= rate ? keep_scale : T(0);
    (*mask)[i] = m;
    out[i] *= m;
  }
  Node<T>* px = x.node().get();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, [px, mask](Node<T>& o) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * (*mask)[i];
  });
}

// ---------------------------------------------------------------------------
// Structural

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::int64_t axis) {
  require(!parts.empty(), ErrorCategory::kContract, "concat: no inputs");
  const auto rank = parts[0].rank();
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, ErrorCategory::kDimension,
          "concat: axis out of range for " + shape_str(parts[0].shape()));
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == rank;
    for (std::int64_t d = 0; ok && d < rank; ++d) {
      if (d != axis && p.dim(d) != parts[0].dim(d)) ok = false;
    }
    require(ok, ErrorCategory::kDimension,
            "concat: incompatible shapes " + shape_str(parts[0].shape()) + " and " +
                shape_str(p.shape()));
    out_shape[static_cast<std::size_t>(axis)] += p.dim(axis);
  }
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (std::int64_t d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<std::size_t>(d)];
  const auto out_row = out_shape[static_cast<std::size_t>(axis)] * inner;
  Storage<T> out(static_cast<std::size_t>(outer * out_row));
  std::vector<std::int64_t> widths, offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const auto w = p.dim(axis) * inner;
    const auto pd = p.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(pd.begin() + o * w, pd.begin() + (o + 1) * w, out.begin() + o * out_row + off);
    }
    widths.push_back(w);
    offsets.push_back(off);
    off += w;
  }
  std::vector<const BasicTensor<T>*> inputs;
  std::vector<Node<T>*> nodes;
  for (const auto& p : parts) {
    inputs.push_back(&p);
    nodes.push_back(p.node().get());
  }
  return detail::make_result_n<T>(
      std::move(out_shape), std::move(out), inputs,
      [nodes, widths, offsets, outer, out_row](Node<T>& o) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          if (!nodes[i]->requires_grad) continue;
          auto& g = nodes[i]->ensure_grad();
          const auto w = widths[i];
          for (std::int64_t r = 0; r < outer; ++r) {
            const T* src = o.grad.data() + r * out_row + offsets[i];
            T* dst = g.data() + r * w;
            for (std::int64_t j = 0; j < w; ++j) dst[j] += src[j];
          }
        }
      });
}

// Row lookup; the index path is not differentiable.
template <class T>
BasicTensor<T> embedding_lookup(const BasicTensor<T>& table, std::span<const std::int64_t> indices) {
  detail::check_rank(table.rank(), 2, table.shape(), "embedding_lookup");
  require(!indices.empty(), ErrorCategory::kContract, "embedding_lookup: no indices");
  const auto v = table.dim(0), d = table.dim(1);
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  Storage<T> out(idx.size() * static_cast<std::size_t>(d));
  const auto td = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < v, ErrorCategory::kIndex,
            "embedding_lookup: index " + std::to_string(idx[i]) + " outside table of " +
                std::to_string(v) + " rows");
    std::copy(td.begin() + idx[i] * d, td.begin() + (idx[i] + 1) * d,
              out.begin() + static_cast<std::int64_t>(i) * d);
  }
  Node<T>* pt = table.node().get();
  const auto n = static_cast<std::int64_t>(idx.size());
  return detail::make_result<T>({n, d}, std::move(out), {&table},
                                [pt, idx = std::move(idx), d](Node<T>& o) {
                                  auto& g = pt->ensure_grad();
                                  for (std::size_t i = 0; i < idx.size(); ++i) {
                                    const T* src = o.grad.data() + static_cast<std::int64_t>(i) * d;
                                    T* dst = g.data() + idx[i] * d;
                                    for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                                  }
                                });
}

template <class T>
BasicTensor<T> gather_rows(const BasicTensor<T>& x, std::span<const std::int64_t> rows) {
  return embedding_lookup(x, rows);
}

// Shape without `axis`; a rank-1 input reduces to shape {1}.
template <class T>
BasicTensor<T> mean_pool(const BasicTensor<T>& x, std::int64_t axis) {
  const auto rank = x.rank();
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, ErrorCategory::kDimension,
          "mean_pool: axis out of range for " + shape_str(x.shape()));
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::int64_t d = axis + 1; d < rank; ++d) inner *= x.dim(d);
  const auto n = x.dim(axis);
  Shape out_shape;
  for (std::int64_t d = 0; d < rank; ++d) {
    if (d != axis) out_shape.push_back(x.dim(d));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Storage<T> out(static_cast<std::size_t>(outer * inner), T(0));
  const auto xd = x.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t a = 0; a < n; ++a) {
      const T* src = xd.data() + (o * n + a) * inner;
      T* dst = out.data() + o * inner;
      for (std::int64_t j = 0; j < inner; ++j) dst[j] += src[j];
    }
  }
  const T inv = T(1) / static_cast<T>(n);
  for (auto& v : out) v *= inv;
  Node<T>* px = x.node().get();
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x},
                                [px, outer, inner, n, inv](Node<T>& o) {
                                  auto& g = px->ensure_grad();
                                  for (std::int64_t oo = 0; oo < outer; ++oo) {
                                    const T* src = o.grad.data() + oo * inner;
                                    for (std::int64_t a = 0; a < n; ++a) {
                                      T* dst = g.data() + (oo * n + a) * inner;
                                      for (std::int64_t j = 0; j < inner; ++j) dst[j] += src[j] * inv;
                                    }
                                  }
                                });
}

// Mean of the rows of x[r, d] sharing a segment id; ids < 0 are skipped.
// Every segment in [0, n_segments) must own at least one row.
template <class T>
BasicTensor<T> segment_mean(const BasicTensor<T>& x, std::span<const std::int64_t> segment_ids,
                            std::int64_t n_segments) {
  detail::check_rank(x.rank(), 2, x.shape(), "segment_mean");
  require(static_cast<std::int64_t>(segment_ids.size()) == x.dim(0), ErrorCategory::kDimension,
          "segment_mean: " + std::to_string(segment_ids.size()) + " ids for " +
              shape_str(x.shape()));
  const auto d = x.dim(1);
  std::vector<std::int64_t> ids(segment_ids.begin(), segment_ids.end());
  Storage<T> counts(static_cast<std::size_t>(n_segments), T(0));
  for (auto s : ids) {
    require(s < n_segments, ErrorCategory::kIndex, "segment_mean: segment id out of range");
    if (s >= 0) counts[static_cast<std::size_t>(s)] += T(1);
  }
  for (auto c : counts) {
    require(c > T(0), ErrorCategory::kContract, "segment_mean: empty segment");
  }
  Storage<T> out(static_cast<std::size_t>(n_segments * d), T(0));
  const auto xd = x.data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0) continue;
    const T* src = xd.data() + static_cast<std::int64_t>(r) * d;
    T* dst = out.data() + ids[r] * d;
    for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
  }
  for (std::int64_t s = 0; s < n_segments; ++s) {
    for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(s * d + j)] /= counts[static_cast<std::size_t>(s)];
  }
  Node<T>* px = x.node().get();
  return detail::make_result<T>({n_segments, d}, std::move(out), {&x},
                                [px, ids = std::move(ids), counts = std::move(counts), d](Node<T>& o) {
                                  auto& g = px->ensure_grad();
                                  for (std::size_t r = 0; r < ids.size(); ++r) {
                                    if (ids[r] < 0) continue;
                                    const T inv = T(1) / counts[static_cast<std::size_t>(ids[r])];
                                    const T* src = o.grad.data() + ids[r] * d;
                                    T* dst = g.data() + static_cast<std::int64_t>(r) * d;
                                    for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j] * inv;
                                  }
                                });
}

// Elements at flat positions, as a rank-1 tensor.
template <class T>
BasicTensor<T> take(const BasicTensor<T>& x, std::span<const std::int64_t> positions) {
  require(!positions.empty(), ErrorCategory::kContract, "take: no positions");
  std::vector<std::int64_t> pos(positions.begin(), positions.end());
  Storage<T> out(pos.size());
  for (std::size_t i = 0; i < pos.size(); ++i) {
    require(pos[i] >= 0 && pos[i] < x.numel(), ErrorCategory::kIndex, "take: position out of range");
    out[i] = x.data()[static_cast<std::size_t>(pos[i])];
  }
  Node<T>* px = x.node().get();
  const auto n = static_cast<std::int64_t>(pos.size());
  return detail::make_result<T>({n}, std::move(out), {&x}, [px, pos = std::move(pos)](Node<T>& o) {
    auto& g = px->ensure_grad();
    for (std::size_t i = 0; i < pos.size(); ++i) g[static_cast<std::size_t>(pos[i])] += o.grad[i];
  });
}

// y[i, :] = x[i, :] * w[i].
template <class T>
BasicTensor<T> scale_rows(const BasicTensor<T>& x, const BasicTensor<T>& w) {
  detail::check_rank(x.rank(), 2, x.shape(), "scale_rows");
  require(w.rank() == 1 && w.dim(0) == x.dim(0), ErrorCategory::kDimension,
          "scale_rows: weights " + shape_str(w.shape()) + " for rows of " + shape_str(x.shape()));
  const auto r = x.dim(0), c = x.dim(1);
  Storage<T> out(x.data().begin(), x.data().end());
  const auto wd = w.data();
  for (std::int64_t i = 0; i < r; ++i) {
    for (std::int64_t j = 0; j < c; ++j) out[static_cast<std::size_t>(i * c + j)] *= wd[static_cast<std::size_t>(i)];
  }
  Node<T>* px = x.node().get();
  Node<T>* pw = w.node().get();
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &w}, [px, pw, r, c](Node<T>& o) {
    if (px->requires_grad) {
      auto& g = px->ensure_grad();
      for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
          g[static_cast<std::size_t>(i * c + j)] += o.grad[static_cast<std::size_t>(i * c + j)] * pw->data[static_cast<std::size_t>(i)];
        }
      }
    }
    if (pw->requires_grad) {
      auto& g = pw->ensure_grad();
      for (std::int64_t i = 0; i < r; ++i) {
        T acc = 0;
        for (std::int64_t j = 0; j < c; ++j) acc += o.grad[static_cast<std::size_t>(i * c + j)] * px->data[static_cast<std::size_t>(i * c + j)];
        g[static_cast<std::size_t>(i)] += acc;
      }
    }
  });
}

// Builds a [rows, cols] tensor where rows listed in indices[p] receive the
// rows of parts[p]. A row hit once takes the part's value verbatim; rows hit
// several times are summed; untouched rows are zero.
template <class T>
BasicTensor<T> combine_rows(std::int64_t rows, std::int64_t cols,
                            const std::vector<BasicTensor<T>>& parts,
                            const std::vector<std::vector<std::int64_t>>& indices) {
  require(parts.size() == indices.size(), ErrorCategory::kContract,
          "combine_rows: parts and index lists differ in count");
  Storage<T> out(static_cast<std::size_t>(rows * cols), T(0));
  std::vector<std::uint8_t> touched(static_cast<std::size_t>(rows), 0);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    require(parts[p].rank() == 2 && parts[p].dim(1) == cols &&
                parts[p].dim(0) == static_cast<std::int64_t>(indices[p].size()),
            ErrorCategory::kDimension,
            "combine_rows: part " + shape_str(parts[p].shape()) + " does not match " +
                std::to_string(indices[p].size()) + " target rows of width " + std::to_string(cols));
    const auto pd = parts[p].data();
    for (std::size_t i = 0; i < indices[p].size(); ++i) {
      const auto r = indices[p][i];
      require(r >= 0 && r < rows, ErrorCategory::kIndex, "combine_rows: row out of range");
      T* dst = out.data() + r * cols;
      const T* src = pd.data() + static_cast<std::int64_t>(i) * cols;
      if (touched[static_cast<std::size_t>(r)]) {
        for (std::int64_t j = 0; j < cols; ++j) dst[j] += src[j];
      } else {
        std::copy(src, src + cols, dst);
        touched[static_cast<std::size_t>(r)] = 1;
      }
    }
  }
  std::vector<const BasicTensor<T>*> inputs;
  std::vector<Node<T>*> nodes;
  for (const auto& p : parts) {
    inputs.push_back(&p);
    nodes.push_back(p.node().get());
  }
  if (parts.empty()) return BasicTensor<T>::from_data({rows, cols}, std::move(out));
  return detail::make_result_n<T>({rows, cols}, std::move(out), inputs,
                                  [nodes, indices, cols](Node<T>& o) {
                                    for (std::size_t p = 0; p < nodes.size(); ++p) {
                                      if (!nodes[p]->requires_grad) continue;
                                      auto& g = nodes[p]->ensure_grad();
                                      for (std::size_t i = 0; i < indices[p].size(); ++i) {
                                        const T* src = o.grad.data() + indices[p][i] * cols;
                                        T* dst = g.data() + static_cast<std::int64_t>(i) * cols;
                                        for (std::int64_t j = 0; j < cols; ++j) dst[j] += src[j];
                                      }
                                    }
                                  });
}

// ---------------------------------------------------------------------------
// Normalisation and losses

// Softmax along the last axis, stabilised by max subtraction.
template <class T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  const auto n = x.dim(-1);
  const auto rows = x.numel() / n;
  Storage<T> out(x.data().begin(), x.data().end());
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T z = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      row[j] = std::exp(row[j] - mx);
      z += row[j];
    }
    for (std::int64_t j = 0; j < n; ++j) row[j] /= z;
  }
  Node<T>* px = x.node().get();
  auto result = detail::make_result<T>(x.shape(), std::move(out), {&x}, [px, rows, n](Node<T>& o) {
    auto& g = px->ensure_grad();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* y = o.data.data() + r * n;
      const T* dy = o.grad.data() + r * n;
      T dot = 0;
      for (std::int64_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (std::int64_t j = 0; j < n; ++j) g[static_cast<std::size_t>(r * n + j)] += y[j] * (dy[j] - dot);
    }
  });
  return result;
}

// Mean negative log-likelihood over positions whose target is not pad.
template <class T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const std::int64_t> targets,
                             std::int64_t pad_index) {
  detail::check_rank(logits.rank(), 2, logits.shape(), "cross_entropy");
  const auto b = logits.dim(0), v = logits.dim(1);
  require(static_cast<std::int64_t>(targets.size()) == b, ErrorCategory::kDimension,
          "cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
              shape_str(logits.shape()));
  std::vector<std::int64_t> tgt(targets.begin(), targets.end());
  std::int64_t count = 0;
  for (auto t : tgt) {
    if (t == pad_index) continue;
    require(t >= 0 && t < v, ErrorCategory::kIndex,
            "cross_entropy: target " + std::to_string(t) + " outside vocabulary of " + std::to_string(v));
    ++count;
  }
  require(count > 0, ErrorCategory::kDegenerateBatch, "cross_entropy: every position is padding");
  auto probs = std::make_shared<Storage<T>>(logits.data().begin(), logits.data().end());
  T total = 0;
  for (std::int64_t r = 0; r < b; ++r) {
    T* row = probs->data() + r * v;
    const T mx = *std::max_element(row, row + v);
    T z = 0;
    for (std::int64_t j = 0; j < v; ++j) z += std::exp(row[j] - mx);
    const T log_z = std::log(z) + mx;
    if (tgt[static_cast<std::size_t>(r)] != pad_index) total += log_z - row[tgt[static_cast<std::size_t>(r)]];
    for (std::int64_t j = 0; j < v; ++j) row[j] = std::exp(row[j] - log_z);
  }
  const T inv = T(1) / static_cast<T>(count);
  Node<T>* pl = logits.node().get();
  return detail::make_result<T>({1}, {total * inv}, {&logits},
                                [pl, probs, tgt = std::move(tgt), pad_index, b, v, inv](Node<T>& o) {
                                  auto& g = pl->ensure_grad();
                                  const T upstream = o.grad[0] * inv;
                                  for (std::int64_t r = 0; r < b; ++r) {
                                    const auto t = tgt[static_cast<std::size_t>(r)];
                                    if (t == pad_index) continue;
                                    const T* p = probs->data() + r * v;
                                    T* dst = g.data() + r * v;
                                    for (std::int64_t j = 0; j < v; ++j) dst[j] += upstream * p[j];
                                    dst[t] -= upstream;
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Routing weights

// For each routing unit u with a non-empty selection S_u over the columns of
// probs[u, :], outputs w = p[u, j] / sum_{i in S_u} p[u, i] for j in S_u,
// flattened in selection order. With `detach_denominator`, the sum is treated
// as a constant in backward; `fixed_denominators`, when given, replaces it
// (used to replay frozen routing).
template <class T>
BasicTensor<T> renormalize_selected(const BasicTensor<T>& probs,
                                    const std::vector<std::vector<std::int64_t>>& selection,
                                    bool detach_denominator,
                                    const Storage<T>* fixed_denominators = nullptr) {
  detail::check_rank(probs.rank(), 2, probs.shape(), "renormalize_selected");
  const auto units = probs.dim(0), n = probs.dim(1);
  require(static_cast<std::int64_t>(selection.size()) == units, ErrorCategory::kDimension,
          "renormalize_selected: selection count does not match " + shape_str(probs.shape()));
  if (fixed_denominators) {
    require(static_cast<std::int64_t>(fixed_denominators->size()) == units,
            ErrorCategory::kDimension, "renormalize_selected: denominator count mismatch");
  }
  Storage<T> out;
  auto denoms = std::make_shared<Storage<T>>(static_cast<std::size_t>(units), T(0));
  const auto pd = probs.data();
  for (std::int64_t u = 0; u < units; ++u) {
    T s = 0;
    for (auto j : selection[static_cast<std::size_t>(u)]) {
      require(j >= 0 && j < n, ErrorCategory::kIndex, "renormalize_selected: column out of range");
      s += pd[static_cast<std::size_t>(u * n + j)];
    }
    if (fixed_denominators) s = (*fixed_denominators)[static_cast<std::size_t>(u)];
    (*denoms)[static_cast<std::size_t>(u)] = s;
    for (auto j : selection[static_cast<std::size_t>(u)]) out.push_back(pd[static_cast<std::size_t>(u * n + j)] / s);
  }
  require(!out.empty(), ErrorCategory::kContract, "renormalize_selected: empty selection");
  const auto total = static_cast<std::int64_t>(out.size());
  const bool frozen = detach_denominator || fixed_denominators != nullptr;
  Node<T>* pp = probs.node().get();
  return detail::make_result<T>(
      {total}, std::move(out), {&probs}, [pp, selection, denoms, frozen, n](Node<T>& o) {
        auto& g = pp->ensure_grad();
        std::size_t k = 0;
        for (std::size_t u = 0; u < selection.size(); ++u) {
          const T s = (*denoms)[u];
          const auto& sel = selection[u];
          T dot = 0;
          if (!frozen) {
            for (std::size_t i = 0; i < sel.size(); ++i) dot += o.grad[k + i] * o.data[k + i];
          }
          for (std::size_t i = 0; i < sel.size(); ++i) {
            g[static_cast<std::size_t>(static_cast<std::int64_t>(u) * n + sel[i])] += (o.grad[k + i] - dot) / s;
          }
          k += sel.size();
        }
      });
}

// ---------------------------------------------------------------------------
// Attention

struct AttentionMask {
  std::int64_t batch = 1;
  std::int64_t query_len = 0;
  std::int64_t key_len = 0;
  bool causal = false;
  std::vector<std::uint8_t> key_valid;  // batch * key_len; empty means all valid
};

// Scaled dot-product multi-head attention over packed rows: q is
// [batch * query_len, d], k and v are [batch * key_len, d]; head h owns the
// column block [h * d / heads, (h + 1) * d / heads). Masked keys receive
// exactly zero weight.
template <class T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                         std::int64_t heads, const AttentionMask& mask) {
  const auto bsz = mask.batch, tq = mask.query_len, tk = mask.key_len;
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2 && q.dim(0) == bsz * tq &&
              k.dim(0) == bsz * tk && v.dim(0) == bsz * tk && q.dim(1) == k.dim(1) &&
              k.dim(1) == v.dim(1),
          ErrorCategory::kDimension,
          "attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
              shape_str(v.shape()) + " inconsistent with batch " + std::to_string(bsz) +
              " x (" + std::to_string(tq) + ", " + std::to_string(tk) + ")");
  const auto d = q.dim(1);
  require(heads > 0 && d % heads == 0, ErrorCategory::kConfig,
          "attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  require(!mask.causal || tq == tk, ErrorCategory::kContract, "attention: causal mask needs square scores");
  require(mask.key_valid.empty() || static_cast<std::int64_t>(mask.key_valid.size()) == bsz * tk,
          ErrorCategory::kDimension, "attention: key mask size mismatch");
  const auto dh = d / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<Storage<T>>(static_cast<std::size_t>(bsz * heads * tq * tk));
  Storage<T> out(static_cast<std::size_t>(bsz * tq * d), T(0));
  const T neg_inf = -std::numeric_limits<T>::infinity();
  RowMatrix<T> scores(tq, tk);
  for (std::int64_t b = 0; b < bsz; ++b) {
    for (std::int64_t h = 0; h < heads; ++h) {
      ConstStridedMap<T> qm(q.data().data() + b * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> km(k.data().data() + b * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
      ConstStridedMap<T> vm(v.data().data() + b * tk * d + h * dh, tk, dh, Eigen::OuterStride<>(d));
      scores.noalias() = (qm * km.transpose()) * scale_factor;
      MatrixMap<T> pm(probs->data() + (b * heads + h) * tq * tk, tq, tk);
      for (std::int64_t i = 0; i < tq; ++i) {
        T mx = neg_inf;
        for (std::int64_t j = 0; j < tk; ++j) {
          const bool valid = (mask.key_valid.empty() || mask.key_valid[static_cast<std::size_t>(b * tk + j)]) &&
                             (!mask.causal || j <= i);
          if (!valid) scores(i, j) = neg_inf;
          mx = std::max(mx, scores(i, j));
        }
        if (mx == neg_inf) {
          pm.row(i).setZero();
          continue;
        }
        T z = 0;
        for (std::int64_t j = 0; j < tk; ++j) {
          const T e = scores(i, j) == neg_inf ? T(0) : std::exp(scores(i, j) - mx);
          pm(i, j) = e;
          z += e;
        }
        pm.row(i) /= z;
      }
      StridedMap<T> om(out.data() + b * tq * d + h * dh, tq, dh, Eigen::OuterStride<>(d));
      om.noalias() = pm * vm;
    }
  }
  Node<T>* pq = q.node().get();
  Node<T>* pk = k.node().get();
  Node<T>* pv = v.node().get();
  return detail::make_result<T>(
      {bsz * tq, d}, std::move(out), {&q, &k, &v},
      [pq, pk, pv, probs, bsz, tq, tk, d, dh, heads, scale_factor](Node<T>& o) {
        if (pq->requires_grad) pq->ensure_grad();
        if (pk->requires_grad) pk->ensure_grad();
        if (pv->requires_grad) pv->ensure_grad();
        RowMatrix<T> dp(tq, tk);
        for (std::int64_t b = 0; b < bsz; ++b) {
          for (std::int64_t h = 0; h < heads; ++h) {
            const auto qoff = b * tq * d + h * dh;
            const auto koff = b * tk * d + h * dh;
            ConstStridedMap<T> dom(o.grad.data() + qoff, tq, dh, Eigen::OuterStride<>(d));
            ConstStridedMap<T> qm(pq->data.data() + qoff, tq, dh, Eigen::OuterStride<>(d));
            ConstStridedMap<T> km(pk->data.data() + koff, tk, dh, Eigen::OuterStride<>(d));
            ConstStridedMap<T> vm(pv->data.data() + koff, tk, dh, Eigen::OuterStride<>(d));
            ConstMatrixMap<T> pm(probs->data() + (b * heads + h) * tq * tk, tq, tk);
            if (pv->requires_grad) {
              StridedMap<T> dv(pv->grad.data() + koff, tk, dh, Eigen::OuterStride<>(d));
              dv.noalias() += pm.transpose() * dom;
            }
            if (!pq->requires_grad && !pk->requires_grad) continue;
            dp.noalias() = dom * vm.transpose();
            for (std::int64_t i = 0; i < tq; ++i) {
              const T dot = (dp.row(i).array() * pm.row(i).array()).sum();
              dp.row(i) = (pm.row(i).array() * (dp.row(i).array() - dot)).matrix();
            }
            if (pq->requires_grad) {
              StridedMap<T> dq(pq->grad.data() + qoff, tq, dh, Eigen::OuterStride<>(d));
              dq.noalias() += (dp * km) * scale_factor;
            }
            if (pk->requires_grad) {
              StridedMap<T> dk(pk->grad.data() + koff, tk, dh, Eigen::OuterStride<>(d));
              dk.noalias() += (dp.transpose() * qm) * scale_factor;
            }
          }
        }
      });
}

}  // namespace tmoe
