#include "sala/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace sala::ops {
namespace {

template <class Real>
using T = BasicTensor<Real>;

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  return h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a) + " and " + shape_string(b) +
                         " differ");
  }
}

// (N, k, C) view of a neighbor tensor.
struct NeighborDims {
  std::size_t n, k, c;
};

NeighborDims neighbor_dims(const Shape& s, std::size_t mask_size, const char* op) {
  if (s.size() != 3) throw DimensionError(std::string(op) + ": expected (N,k,C), got " + shape_string(s));
  if (mask_size != s[0] * s[1]) {
    throw DimensionError(std::string(op) + ": mask of " + std::to_string(mask_size) +
                         " entries for shape " + shape_string(s));
  }
  return {s[0], s[1], s[2]};
}

// Slot visiting order per center: ascending key, then slot.
std::vector<std::uint32_t> key_order(std::size_t n, std::size_t k, std::span<const std::int32_t> keys) {
  std::vector<std::uint32_t> order(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    auto* o = order.data() + i * k;
    std::iota(o, o + k, 0u);
    if (!keys.empty()) {
      const auto* kk = keys.data() + i * k;
      std::stable_sort(o, o + k, [kk](std::uint32_t a, std::uint32_t b) { return kk[a] < kk[b]; });
    }
  }
  return order;
}

}  // namespace

template <class Real>
V<Real> linear(V<Real> x, V<Real> w) {
  const T<Real>& xv = x.value();
  const T<Real>& wv = w.value();
  if (wv.rank() != 2 || xv.cols() != wv.extent(0)) {
    throw DimensionError("linear: input " + shape_string(xv.shape()) + " vs weight " +
                         shape_string(wv.shape()));
  }
  const std::size_t rows = xv.rows(), cin = wv.extent(0), cout = wv.extent(1);
  Shape out_shape = xv.shape();
  if (out_shape.empty()) out_shape.push_back(cout);
  else out_shape.back() = cout;
  T<Real> y(out_shape);
  const Real* xp = xv.data().data();
  const Real* wp = wv.data().data();
  Real* yp = y.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    Real* yr = yp + r * cout;
    const Real* xr = xp + r * cin;
    for (std::size_t i = 0; i < cin; ++i) {
      const Real a = xr[i];
      if (a == Real(0)) continue;
      const Real* wr = wp + i * cout;
      for (std::size_t c = 0; c < cout; ++c) yr[c] += a * wr[c];
    }
  }
  return x.tape().record(std::move(y), {x, w}, [x, w, rows, cin, cout](BasicTape<Real>& tape, const T<Real>& dy) {
    const Real* dyp = dy.data().data();
    const Real* xp = tape.value(x).data().data();
    const Real* wp = tape.value(w).data().data();
    if (tape.requires_grad(x)) {
      Real* dxp = tape.grad_buffer(x).data().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* dyr = dyp + r * cout;
        for (std::size_t i = 0; i < cin; ++i) {
          const Real* wr = wp + i * cout;
          Real acc = 0;
          for (std::size_t c = 0; c < cout; ++c) acc += dyr[c] * wr[c];
          dxp[r * cin + i] += acc;
        }
      }
    }
    if (tape.requires_grad(w)) {
      Real* dwp = tape.grad_buffer(w).data().data();
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* dyr = dyp + r * cout;
        for (std::size_t i = 0; i < cin; ++i) {
          const Real a = xp[r * cin + i];
          if (a == Real(0)) continue;
          Real* dwr = dwp + i * cout;
          for (std::size_t c = 0; c < cout; ++c) dwr[c] += a * dyr[c];
        }
      }
    }
  });
}

template <class Real>
V<Real> linear(V<Real> x, V<Real> w, V<Real> b) {
  const T<Real>& bv = b.value();
  if (bv.rank() != 1 || w.value().rank() != 2 || bv.extent(0) != w.value().extent(1)) {
    throw DimensionError("linear: bias " + shape_string(bv.shape()) + " vs weight " +
                         shape_string(w.value().shape()));
  }
  V<Real> xw = linear(x, w);
  T<Real> y = xw.value();
  const std::size_t cout = bv.extent(0), rows = y.rows();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cout; ++c) y[r * cout + c] += bv[c];
  return x.tape().record(std::move(y), {xw, b}, [xw, b, rows, cout](BasicTape<Real>& tape, const T<Real>& dy) {
    if (tape.requires_grad(xw)) {
      T<Real>& g = tape.grad_buffer(xw);
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
    }
    if (tape.requires_grad(b)) {
      T<Real>& g = tape.grad_buffer(b);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cout; ++c) g[c] += dy[r * cout + c];
    }
  });
}

template <class Real>
V<Real> add(V<Real> a, V<Real> b) {
  require_same(a.shape(), b.shape(), "add");
  T<Real> y = a.value();
  const T<Real>& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return a.tape().record(std::move(y), {a, b}, [a, b](BasicTape<Real>& tape, const T<Real>& dy) {
    for (V<Real> v : {a, b}) {
      if (!tape.requires_grad(v)) continue;
      T<Real>& g = tape.grad_buffer(v);
      for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
    }
  });
}

template <class Real>
V<Real> scale(V<Real> x, Real factor) {
  T<Real> y = x.value();
  for (auto& v : y.storage()) v *= factor;
  return x.tape().record(std::move(y), {x}, [x, factor](BasicTape<Real>& tape, const T<Real>& dy) {
    T<Real>& g = tape.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) g[i] += factor * dy[i];
  });
}

template <class Real>
V<Real> leaky_relu(V<Real> x, Real slope) {
  T<Real> y = x.value();
  std::uint64_t h = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] < Real(0)) {
      y[i] *= slope;
      h = mix(h, i);
    }
  }
  x.tape().note_branch(h);
  return x.tape().record(std::move(y), {x}, [x, slope](BasicTape<Real>& tape, const T<Real>& dy) {
    const T<Real>& xv = tape.value(x);
    T<Real>& g = tape.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) g[i] += xv[i] < Real(0) ? slope * dy[i] : dy[i];
  });
}

template <class Real>
V<Real> relu(V<Real> x) {
  return leaky_relu(x, Real(0));
}

template <class Real>
V<Real> batch_norm(V<Real> x, V<Real> gamma, V<Real> beta, RunningStats<Real>& stats, BatchNormOptions opts) {
  const T<Real>& xv = x.value();
  const std::size_t c = xv.cols(), rows = xv.rows();
  if (gamma.value().size() != c || beta.value().size() != c || stats.mean.size() != c) {
    throw DimensionError("batch_norm: input " + shape_string(xv.shape()) + " vs affine " +
                         shape_string(gamma.value().shape()));
  }
  std::vector<double> mean(c, 0.0), var(c, 0.0);
  const bool use_batch = x.tape().training();
  if (use_batch) {
    if (rows == 0) throw ValidationError("batch_norm: empty batch");
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) mean[j] += xv[r * c + j];
    for (auto& m : mean) m /= double(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = xv[r * c + j] - mean[j];
        var[j] += d * d;
      }
    for (auto& v : var) v /= double(rows);
    x.tape().defer([&stats, mean, var, momentum = opts.momentum]() {
      const double m = std::min(momentum, double(stats.updates) / double(stats.updates + 1));
      ++stats.updates;
      for (std::size_t j = 0; j < mean.size(); ++j) {
        stats.mean[j] = Real(m * stats.mean[j] + (1.0 - m) * mean[j]);
        stats.var[j] = Real(m * stats.var[j] + (1.0 - m) * var[j]);
      }
    });
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      mean[j] = stats.mean[j];
      var[j] = stats.var[j];
    }
  }
  std::vector<Real> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) inv_std[j] = Real(1.0 / std::sqrt(var[j] + opts.eps));
  T<Real> xhat(xv.shape());
  T<Real> y(xv.shape());
  const T<Real>& gv = gamma.value();
  const T<Real>& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c; ++j) {
      const std::size_t i = r * c + j;
      xhat[i] = Real((xv[i] - mean[j]) * inv_std[j]);
      y[i] = gv[j] * xhat[i] + bv[j];
    }
  return x.tape().record(std::move(y), {x, gamma, beta},
                         [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), use_batch, rows,
                          c](BasicTape<Real>& tape, const T<Real>& dy) {
    const T<Real>& gv = tape.value(gamma);
    if (tape.requires_grad(gamma) || tape.requires_grad(beta)) {
      T<Real>& dg = tape.grad_buffer(gamma);
      T<Real>& db = tape.grad_buffer(beta);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          dg[j] += dy[r * c + j] * xhat[r * c + j];
          db[j] += dy[r * c + j];
        }
    }
    if (!tape.requires_grad(x)) return;
    T<Real>& dx = tape.grad_buffer(x);
    if (!use_batch) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) dx[r * c + j] += dy[r * c + j] * gv[j] * inv_std[j];
      return;
    }
    std::vector<double> sum_d(c, 0.0), sum_dx(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = double(dy[r * c + j]) * gv[j];
        sum_d[j] += d;
        sum_dx[j] += d * xhat[r * c + j];
      }
    const double inv_n = 1.0 / double(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double d = double(dy[r * c + j]) * gv[j];
        dx[r * c + j] += Real(inv_std[j] * (d - inv_n * sum_d[j] - xhat[r * c + j] * inv_n * sum_dx[j]));
      }
  });
}

template <class Real>
V<Real> softmax_lastdim(V<Real> x) {
  const T<Real>& xv = x.value();
  const std::size_t s = xv.cols(), rows = xv.rows();
  if (s == 0) throw DimensionError("softmax_lastdim: empty last axis " + shape_string(xv.shape()));
  T<Real> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* in = xv.data().data() + r * s;
    Real* out = y.data().data() + r * s;
    const Real mx = *std::max_element(in, in + s);
    Real total = 0;
    for (std::size_t g = 0; g < s; ++g) {
      out[g] = std::exp(in[g] - mx);
      total += out[g];
    }
    for (std::size_t g = 0; g < s; ++g) out[g] /= total;
  }
  T<Real> saved = y;
  return x.tape().record(std::move(y), {x}, [x, saved = std::move(saved), s, rows](BasicTape<Real>& tape, const T<Real>& dy) {
    T<Real>& g = tape.grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const Real* yr = saved.data().data() + r * s;
      const Real* dyr = dy.data().data() + r * s;
      Real dot = 0;
      for (std::size_t j = 0; j < s; ++j) dot += dyr[j] * yr[j];
      for (std::size_t j = 0; j < s; ++j) g[r * s + j] += yr[j] * (dyr[j] - dot);
    }
  });
}

template <class Real>
MaxReduceResult<Real> max_reduce_neighbors(V<Real> x, std::span<const std::uint8_t> mask,
                                           std::span<const std::int32_t> keys) {
  const T<Real>& xv = x.value();
  const auto [n, k, c] = neighbor_dims(xv.shape(), mask.size(), "max_reduce_neighbors");
  if (!keys.empty() && keys.size() != mask.size()) throw DimensionError("max_reduce_neighbors: keys size");
  T<Real> y(Shape{n, c});
  std::vector<std::uint32_t> arg(n * c, 0);
  std::uint64_t h = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (!mask[i * k + j]) continue;
      const Real* row = xv.data().data() + (i * k + j) * c;
      Real* out = y.data().data() + i * c;
      std::uint32_t* a = arg.data() + i * c;
      if (!any) {
        std::copy(row, row + c, out);
        std::fill(a, a + c, std::uint32_t(j));
        any = true;
        continue;
      }
      for (std::size_t ch = 0; ch < c; ++ch) {
        if (row[ch] > out[ch] ||
            (row[ch] == out[ch] && !keys.empty() && keys[i * k + j] < keys[i * k + a[ch]])) {
          out[ch] = row[ch];
          a[ch] = std::uint32_t(j);
        }
      }
    }
    if (!any) throw EmptyNeighborhoodError(i);
  }
  for (std::size_t i = 0; i < arg.size(); ++i) h = mix(h, arg[i]);
  x.tape().note_branch(h);
  V<Real> out = x.tape().record(std::move(y), {x}, [x, arg, k, c, n](BasicTape<Real>& tape, const T<Real>& dy) {
    T<Real>& g = tape.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) g[(i * k + arg[i * c + ch]) * c + ch] += dy[i * c + ch];
  });
  return {out, std::move(arg)};
}

template <class Real>
V<Real> sum_reduce_neighbors(V<Real> x, std::span<const std::uint8_t> mask, std::span<const std::int32_t> keys) {
  const T<Real>& xv = x.value();
  const auto [n, k, c] = neighbor_dims(xv.shape(), mask.size(), "sum_reduce_neighbors");
  if (!keys.empty() && keys.size() != mask.size()) throw DimensionError("sum_reduce_neighbors: keys size");
  const auto order = key_order(n, k, keys);
  T<Real> y(Shape{n, c});
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    Real* out = y.data().data() + i * c;
    for (std::size_t t = 0; t < k; ++t) {
      const std::size_t j = order[i * k + t];
      if (!mask[i * k + j]) continue;
      any = true;
      const Real* row = xv.data().data() + (i * k + j) * c;
      for (std::size_t ch = 0; ch < c; ++ch) out[ch] += row[ch];
    }
    if (!any) throw EmptyNeighborhoodError(i);
  }
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return x.tape().record(std::move(y), {x}, [x, m = std::move(m), n, k, c](BasicTape<Real>& tape, const T<Real>& dy) {
    T<Real>& g = tape.grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        if (!m[i * k + j]) continue;
        for (std::size_t ch = 0; ch < c; ++ch) g[(i * k + j) * c + ch] += dy[i * c + ch];
      }
  });
}

template <class Real>
V<Real> concat_lastdim(V<Real> a, V<Real> b) {
  const T<Real>& av = a.value();
  const T<Real>& bv = b.value();
  Shape sa = av.shape(), sb = bv.shape();
  if (sa.empty() || sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin())) {
    throw DimensionError("concat_lastdim: shapes " + shape_string(sa) + " and " + shape_string(sb));
  }
  const std::size_t ca = sa.back(), cb = sb.back(), rows = av.rows();
  Shape so = sa;
  so.back() = ca + cb;
  T<Real> y(so);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.data().data() + r * ca, ca, y.data().data() + r * (ca + cb));
    std::copy_n(bv.data().data() + r * cb, cb, y.data().data() + r * (ca + cb) + ca);
  }
  return a.tape().record(std::move(y), {a, b}, [a, b, ca, cb, rows](BasicTape<Real>& tape, const T<Real>& dy) {
    if (tape.requires_grad(a)) {
      T<Real>& g = tape.grad_buffer(a);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < ca; ++j) g[r * ca + j] += dy[r * (ca + cb) + j];
    }
    if (tape.requires_grad(b)) {
      T<Real>& g = tape.grad_buffer(b);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cb; ++j) g[r * cb + j] += dy[r * (ca + cb) + ca + j];
    }
  });
}

template <class Real>
V<Real> gather_rows(V<Real> x, std::span<const std::int32_t> index, Shape prefix) {
  const T<Real>& xv = x.value();
  const std::size_t c = xv.cols(), m = xv.rows();
  if (shape_size(prefix) != index.size()) {
    throw DimensionError("gather_rows: prefix " + shape_string(prefix) + " for " + std::to_string(index.size()) +
                         " indices");
  }
  prefix.push_back(c);
  T<Real> y(prefix);
  for (std::size_t r = 0; r < index.size(); ++r) {
    const auto src = index[r];
    if (src < 0 || std::size_t(src) >= m) {
      throw DimensionError("gather_rows: index " + std::to_string(src) + " outside " + std::to_string(m) + " rows");
    }
    std::copy_n(xv.data().data() + std::size_t(src) * c, c, y.data().data() + r * c);
  }
  std::vector<std::int32_t> idx(index.begin(), index.end());
  return x.tape().record(std::move(y), {x}, [x, idx = std::move(idx), c](BasicTape<Real>& tape, const T<Real>& dy) {
    T<Real>& g = tape.grad_buffer(x);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      Real* dst = g.data().data() + std::size_t(idx[r]) * c;
      const Real* src = dy.data().data() + r * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

template <class Real>
V<Real> scatter_mean(V<Real> x, std::span<const std::int32_t> target, std::size_t out_rows) {
  const T<Real>& xv = x.value();
  const std::size_t c = xv.cols(), rows = xv.rows();
  if (target.size() != rows) {
    throw DimensionError("scatter_mean: " + std::to_string(target.size()) + " targets for input " +
                         shape_string(xv.shape()));
  }
  std::vector<std::size_t> count(out_rows, 0);
  for (auto t : target) {
    if (t < 0 || std::size_t(t) >= out_rows) throw DimensionError("scatter_mean: target out of range");
    ++count[std::size_t(t)];
  }
  T<Real> y(Shape{out_rows, c});
  for (std::size_t r = 0; r < rows; ++r) {
    Real* dst = y.data().data() + std::size_t(target[r]) * c;
    for (std::size_t j = 0; j < c; ++j) dst[j] += xv[r * c + j];
  }
  for (std::size_t o = 0; o < out_rows; ++o)
    if (count[o] > 1)
      for (std::size_t j = 0; j < c; ++j) y[o * c + j] /= Real(count[o]);
  std::vector<std::int32_t> tg(target.begin(), target.end());
  return x.tape().record(std::move(y), {x}, [x, tg = std::move(tg), count = std::move(count), c](BasicTape<Real>& tape, const T<Real>& dy) {
    T<Real>& g = tape.grad_buffer(x);
    for (std::size_t r = 0; r < tg.size(); ++r) {
      const std::size_t o = std::size_t(tg[r]);
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += dy[o * c + j] / Real(count[o]);
    }
  });
}

template <class Real>
V<Real> apply_mask(V<Real> x, std::span<const std::uint8_t> mask) {
  const auto [n, k, c] = neighbor_dims(x.value().shape(), mask.size(), "apply_mask");
  (void)n;
  (void)k;
  T<Real> y = x.value();
  for (std::size_t s = 0; s < mask.size(); ++s)
    if (!mask[s]) std::fill_n(y.data().data() + s * c, c, Real(0));
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return x.tape().record(std::move(y), {x}, [x, m = std::move(m), c](BasicTape<Real>& tape, const T<Real>& dy) {
    T<Real>& g = tape.grad_buffer(x);
    for (std::size_t s = 0; s < m.size(); ++s)
      if (m[s])
        for (std::size_t j = 0; j < c; ++j) g[s * c + j] += dy[s * c + j];
  });
}

template <class Real>
V<Real> group_scale(V<Real> z, V<Real> q) {
  const T<Real>& zv = z.value();
  const T<Real>& qv = q.value();
  const std::size_t s = qv.cols(), rows = zv.rows();
  if (qv.rows() != rows || s == 0 || zv.cols() % s != 0) {
    throw DimensionError("group_scale: features " + shape_string(zv.shape()) + " vs assignment " +
                         shape_string(qv.shape()));
  }
  const std::size_t c = zv.cols() / s;
  T<Real> y(zv.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t g = 0; g < s; ++g) {
      const Real w = qv[r * s + g];
      const Real* in = zv.data().data() + r * s * c + g * c;
      Real* out = y.data().data() + r * s * c + g * c;
      for (std::size_t j = 0; j < c; ++j) out[j] = w * in[j];
    }
  return z.tape().record(std::move(y), {z, q}, [z, q, s, c, rows](BasicTape<Real>& tape, const T<Real>& dy) {
    const T<Real>& zv = tape.value(z);
    const T<Real>& qv = tape.value(q);
    if (tape.requires_grad(z)) {
      T<Real>& g = tape.grad_buffer(z);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t gr = 0; gr < s; ++gr) {
          const Real w = qv[r * s + gr];
          const std::size_t base = r * s * c + gr * c;
          for (std::size_t j = 0; j < c; ++j) g[base + j] += w * dy[base + j];
        }
    }
    if (tape.requires_grad(q)) {
      T<Real>& g = tape.grad_buffer(q);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t gr = 0; gr < s; ++gr) {
          const std::size_t base = r * s * c + gr * c;
          Real acc = 0;
          for (std::size_t j = 0; j < c; ++j) acc += dy[base + j] * zv[base + j];
          g[r * s + gr] += acc;
        }
    }
  });
}

template <class Real>
V<Real> sum_groups(V<Real> x, std::size_t groups) {
  const T<Real>& xv = x.value();
  if (groups == 0 || xv.cols() % groups != 0) {
    throw DimensionError("sum_groups: " + shape_string(xv.shape()) + " not divisible into " +
                         std::to_string(groups) + " groups");
  }
  const std::size_t c = xv.cols() / groups, rows = xv.rows();
  Shape so = xv.shape();
  so.back() = c;
  T<Real> y(so);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t j = 0; j < c; ++j) y[r * c + j] += xv[r * groups * c + g * c + j];
  return x.tape().record(std::move(y), {x}, [x, groups, c, rows](BasicTape<Real>& tape, const T<Real>& dy) {
    T<Real>& g = tape.grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t gr = 0; gr < groups; ++gr)
        for (std::size_t j = 0; j < c; ++j) g[r * groups * c + gr * c + j] += dy[r * c + j];
  });
}

template <class Real>
V<Real> threshold_straight_through(V<Real> q, Real threshold) {
  T<Real> y = q.value();
  std::uint64_t h = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool on = y[i] >= threshold;
    y[i] = on ? Real(1) : Real(0);
    if (on) h = mix(h, i);
  }
  q.tape().note_branch(h);
  return q.tape().record(std::move(y), {q}, [q](BasicTape<Real>& tape, const T<Real>& dy) {
    T<Real>& g = tape.grad_buffer(q);
    for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
  });
}

template <class Real>
V<Real> reshape(V<Real> x, Shape shape) {
  T<Real> y = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(y), {x}, [x](BasicTape<Real>& tape, const T<Real>& dy) {
    T<Real>& g = tape.grad_buffer(x);
    for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
  });
}

template <class Real>
V<Real> sum_all(V<Real> x) {
  Real total = 0;
  for (Real v : x.value().data()) total += v;
  return x.tape().record(T<Real>(Shape{}, std::vector<Real>{total}), {x}, [x](BasicTape<Real>& tape, const T<Real>& dy) {
    T<Real>& g = tape.grad_buffer(x);
    for (auto& v : g.storage()) v += dy[0];
  });
}

template <class Real>
V<Real> squared_norm(V<Real> x) {
  Real total = 0;
  for (Real v : x.value().data()) total += v * v;
  return x.tape().record(T<Real>(Shape{}, std::vector<Real>{total}), {x}, [x](BasicTape<Real>& tape, const T<Real>& dy) {
    const T<Real>& xv = tape.value(x);
    T<Real>& g = tape.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += Real(2) * xv[i] * dy[0];
  });
}

template <class Real>
V<Real> softmax_cross_entropy(V<Real> logits, std::span<const std::uint32_t> labels) {
  const T<Real>& lv = logits.value();
  const std::size_t kcls = lv.cols(), rows = lv.rows();
  if (rows == 0) throw ValidationError("softmax_cross_entropy: empty batch");
  if (labels.size() != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_string(lv.shape()));
  }
  T<Real> prob(lv.shape());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= kcls) {
      throw ValidationError("softmax_cross_entropy: label " + std::to_string(labels[r]) + " >= " +
                            std::to_string(kcls) + " classes");
    }
    const Real* in = lv.data().data() + r * kcls;
    const Real mx = *std::max_element(in, in + kcls);
    double z = 0.0;
    for (std::size_t j = 0; j < kcls; ++j) z += std::exp(double(in[j] - mx));
    for (std::size_t j = 0; j < kcls; ++j) prob[r * kcls + j] = Real(std::exp(double(in[j] - mx)) / z);
    total += std::log(z) - double(in[labels[r]] - mx);
  }
  std::vector<std::uint32_t> lab(labels.begin(), labels.end());
  T<Real> y(Shape{}, std::vector<Real>{Real(total / double(rows))});
  return logits.tape().record(std::move(y), {logits}, [logits, prob = std::move(prob), lab = std::move(lab), kcls, rows](BasicTape<Real>& tape, const T<Real>& dy) {
    T<Real>& g = tape.grad_buffer(logits);
    const Real s = dy[0] / Real(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < kcls; ++j)
        g[r * kcls + j] += s * (prob[r * kcls + j] - (j == lab[r] ? Real(1) : Real(0)));
  });
}

#define SALA_INSTANTIATE_OPS(R)                                                                                  \
  template V<R> linear<R>(V<R>, V<R>);                                                                           \
  template V<R> linear<R>(V<R>, V<R>, V<R>);                                                                     \
  template V<R> add<R>(V<R>, V<R>);                                                                              \
  template V<R> scale<R>(V<R>, R);                                                                               \
  template V<R> relu<R>(V<R>);                                                                                   \
  template V<R> leaky_relu<R>(V<R>, R);                                                                          \
  template V<R> batch_norm<R>(V<R>, V<R>, V<R>, RunningStats<R>&, BatchNormOptions);                             \
  template V<R> softmax_lastdim<R>(V<R>);                                                                        \
  template MaxReduceResult<R> max_reduce_neighbors<R>(V<R>, std::span<const std::uint8_t>,                       \
                                                      std::span<const std::int32_t>);                            \
  template V<R> sum_reduce_neighbors<R>(V<R>, std::span<const std::uint8_t>, std::span<const std::int32_t>);     \
  template V<R> concat_lastdim<R>(V<R>, V<R>);                                                                   \
  template V<R> gather_rows<R>(V<R>, std::span<const std::int32_t>, Shape);                                      \
  template V<R> scatter_mean<R>(V<R>, std::span<const std::int32_t>, std::size_t);                               \
  template V<R> apply_mask<R>(V<R>, std::span<const std::uint8_t>);                                              \
  template V<R> group_scale<R>(V<R>, V<R>);                                                                      \
  template V<R> sum_groups<R>(V<R>, std::size_t);                                                                \
  template V<R> threshold_straight_through<R>(V<R>, R);                                                          \
  template V<R> reshape<R>(V<R>, Shape);                                                                         \
  template V<R> sum_all<R>(V<R>);                                                                                \
  template V<R> squared_norm<R>(V<R>);                                                                           \
  template V<R> softmax_cross_entropy<R>(V<R>, std::span<const std::uint32_t>);

SALA_INSTANTIATE_OPS(float)
SALA_INSTANTIATE_OPS(double)

}  // namespace sala::ops
