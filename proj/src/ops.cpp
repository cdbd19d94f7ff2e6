#include "icmlm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "icmlm/simd/kernels.hpp"

namespace icmlm::ag {
namespace {

template <class T>
int rows_of(const Tensor<T>& t) {
  return t.rank() == 0 ? 1 : static_cast<int>(t.size() / static_cast<std::size_t>(t.dim(-1)));
}

template <class T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  ICMLM_REQUIRE(a.shape() == b.shape(),
                std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
}

}  // namespace

template <class T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  const T mx = *std::max_element(row.begin(), row.end());
  T total = T(0);
  for (T& v : row) {
    v = std::exp(v - mx);
    total += v;
  }
  const T inv = T(1) / total;
  for (T& v : row) v *= inv;
}

template <class T>
T logsumexp_value(std::span<const T> row) {
  if (row.empty()) return -std::numeric_limits<T>::infinity();
  const T mx = *std::max_element(row.begin(), row.end());
  if (std::isinf(mx)) return mx;
  T total = T(0);
  for (T v : row) total += std::exp(v - mx);
  return mx + std::log(total);
}

template <class T>
Var<T> matmul(Var<T> a, Var<T> b, bool trans_a, bool trans_b) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  ICMLM_REQUIRE(av.rank() == 2 && bv.rank() == 2, "matmul expects rank-2 operands");
  const int m = trans_a ? av.dim(1) : av.dim(0);
  const int k = trans_a ? av.dim(0) : av.dim(1);
  const int kb = trans_b ? bv.dim(1) : bv.dim(0);
  const int n = trans_b ? bv.dim(0) : bv.dim(1);
  ICMLM_REQUIRE(k == kb, "matmul inner dimension mismatch " + shape_str(av.shape()) + " x " +
                             shape_str(bv.shape()));
  Tensor<T> out({m, n});
  const int lda = av.dim(1);
  const int ldb = bv.dim(1);
  simd::gemm<T>(trans_a, trans_b, m, n, k, T(1), av.data(), lda, bv.data(), ldb, T(0), out.data(),
                n);
  return g.emit(
      std::move(out),
      [a, b, trans_a, trans_b, m, n, k, lda, ldb](Graph<T>& g, const Tensor<T>&,
                                                  const Tensor<T>& dc) {
        const Tensor<T>& av = g.value(a);
        const Tensor<T>& bv = g.value(b);
        if (g.requires_grad(a)) {
          Tensor<T>& da = g.grad(a);
          if (!trans_a) {
            simd::gemm<T>(false, !trans_b, m, k, n, T(1), dc.data(), n, bv.data(), ldb, T(1),
                          da.data(), k);
          } else {
            simd::gemm<T>(trans_b, true, k, m, n, T(1), bv.data(), ldb, dc.data(), n, T(1),
                          da.data(), m);
          }
        }
        if (g.requires_grad(b)) {
          Tensor<T>& db = g.grad(b);
          if (!trans_b) {
            simd::gemm<T>(!trans_a, false, k, n, m, T(1), av.data(), lda, dc.data(), n, T(1),
                          db.data(), n);
          } else {
            simd::gemm<T>(true, trans_a, n, k, m, T(1), dc.data(), n, av.data(), lda, T(1),
                          db.data(), k);
          }
        }
      },
      a, b);
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return add_scaled(a, b, T(1));
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  return add_scaled(a, b, T(-1));
}

template <class T>
Var<T> add_scaled(Var<T> a, Var<T> b, T alpha) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_same(av, bv, "add");
  Tensor<T> out = av;
  simd::axpy<T>(out.size(), alpha, bv.data(), out.data());
  return g.emit(
      std::move(out),
      [a, b, alpha](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        if (g.requires_grad(a)) g.grad(a) += dy;
        if (g.requires_grad(b)) {
          Tensor<T>& db = g.grad(b);
          simd::axpy<T>(db.size(), alpha, dy.data(), db.data());
        }
      },
      a, b);
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_same(av, bv, "mul");
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return g.emit(
      std::move(out),
      [a, b](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        const Tensor<T>& av = g.value(a);
        const Tensor<T>& bv = g.value(b);
        if (g.requires_grad(a)) {
          Tensor<T>& da = g.grad(a);
          for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
        }
        if (g.requires_grad(b)) {
          Tensor<T>& db = g.grad(b);
          for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
        }
      },
      a, b);
}

template <class T>
Var<T> scale(Var<T> x, T alpha) {
  Graph<T>& g = *x.graph;
  Tensor<T> out = x.value();
  simd::scale<T>(out.size(), alpha, out.data());
  return g.emit(
      std::move(out),
      [x, alpha](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(x);
        simd::axpy<T>(dx.size(), alpha, dy.data(), dx.data());
      },
      x);
}

template <class T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& bv = bias.value();
  const int f = xv.dim(-1);
  const bool broadcast_one = bv.size() == 1;
  ICMLM_REQUIRE(broadcast_one || static_cast<int>(bv.size()) == f,
                "add_bias: bias size " + std::to_string(bv.size()) + " vs feature width " +
                    std::to_string(f));
  Tensor<T> out = xv;
  const int rows = rows_of(xv);
  for (int r = 0; r < rows; ++r) {
    T* o = out.data() + static_cast<std::size_t>(r) * f;
    for (int j = 0; j < f; ++j) o[j] += broadcast_one ? bv[0] : bv[j];
  }
  return g.emit(
      std::move(out),
      [x, bias, rows, f, broadcast_one](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        if (g.requires_grad(x)) g.grad(x) += dy;
        if (g.requires_grad(bias)) {
          Tensor<T>& db = g.grad(bias);
          for (int r = 0; r < rows; ++r) {
            const T* d = dy.data() + static_cast<std::size_t>(r) * f;
            for (int j = 0; j < f; ++j) db[broadcast_one ? 0 : j] += d[j];
          }
        }
      },
      x, bias);
}

template <class T>
Var<T> relu(Var<T> x) {
  Graph<T>& g = *x.graph;
  Tensor<T> out = x.value();
  for (T& v : out.values()) v = v > T(0) ? v : T(0);
  return g.emit(
      std::move(out),
      [x](Graph<T>& g, const Tensor<T>& y, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(x);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          if (y[i] > T(0)) dx[i] += dy[i];
        }
      },
      x);
}

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  const int f = xv.dim(-1);
  ICMLM_REQUIRE(groups >= 1 && f % groups == 0, "layer_norm: width not divisible by groups");
  ICMLM_REQUIRE(static_cast<int>(gamma.value().size()) == f &&
                    static_cast<int>(beta.value().size()) == f,
                "layer_norm: affine width mismatch");
  const int d = f / groups;
  const int segments = rows_of(xv) * groups;
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(segments));
  Tensor<T> out(xv.shape());
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  for (int s = 0; s < segments; ++s) {
    const T* xs = xv.data() + static_cast<std::size_t>(s) * d;
    T mu = T(0);
    for (int j = 0; j < d; ++j) mu += xs[j];
    mu /= T(d);
    T var = T(0);
    for (int j = 0; j < d; ++j) var += (xs[j] - mu) * (xs[j] - mu);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[s] = is;
    const int off = (s % groups) * d;
    T* xh = xhat->data() + static_cast<std::size_t>(s) * d;
    T* o = out.data() + static_cast<std::size_t>(s) * d;
    for (int j = 0; j < d; ++j) {
      xh[j] = (xs[j] - mu) * is;
      o[j] = gm[off + j] * xh[j] + bt[off + j];
    }
  }
  return g.emit(
      std::move(out),
      [x, gamma, beta, groups, d, segments, xhat, inv_std](Graph<T>& g, const Tensor<T>&,
                                                          const Tensor<T>& dy) {
        const T* gm = g.value(gamma).data();
        const bool need_x = g.requires_grad(x);
        T* dgm = g.requires_grad(gamma) ? g.grad(gamma).data() : nullptr;
        T* dbt = g.requires_grad(beta) ? g.grad(beta).data() : nullptr;
        T* dx = need_x ? g.grad(x).data() : nullptr;
        std::vector<T> dxh(static_cast<std::size_t>(d));
        for (int s = 0; s < segments; ++s) {
          const int off = (s % groups) * d;
          const T* dys = dy.data() + static_cast<std::size_t>(s) * d;
          const T* xh = xhat->data() + static_cast<std::size_t>(s) * d;
          T mean_d = T(0);
          T mean_dx = T(0);
          for (int j = 0; j < d; ++j) {
            if (dgm) dgm[off + j] += dys[j] * xh[j];
            if (dbt) dbt[off + j] += dys[j];
            dxh[j] = dys[j] * gm[off + j];
            mean_d += dxh[j];
            mean_dx += dxh[j] * xh[j];
          }
          if (!need_x) continue;
          mean_d /= T(d);
          mean_dx /= T(d);
          const T is = (*inv_std)[s];
          T* dxs = dx + static_cast<std::size_t>(s) * d;
          for (int j = 0; j < d; ++j) dxs[j] += is * (dxh[j] - mean_d - xh[j] * mean_dx);
        }
      },
      x, gamma, beta);
}

template <class T>
Var<T> sample_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  ICMLM_REQUIRE(xv.rank() == 4, "sample_norm expects [B, C, H, W]");
  const int batch = xv.dim(0);
  const int channels = xv.dim(1);
  const int plane = xv.dim(2) * xv.dim(3);
  ICMLM_REQUIRE(static_cast<int>(gamma.value().size()) == channels &&
                    static_cast<int>(beta.value().size()) == channels,
                "sample_norm: affine size mismatch");
  const std::size_t per = static_cast<std::size_t>(channels) * plane;
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(batch));
  Tensor<T> out(xv.shape());
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  for (int b = 0; b < batch; ++b) {
    const T* xs = xv.data() + b * per;
    T mu = T(0);
    for (std::size_t i = 0; i < per; ++i) mu += xs[i];
    mu /= T(per);
    T var = T(0);
    for (std::size_t i = 0; i < per; ++i) var += (xs[i] - mu) * (xs[i] - mu);
    var /= T(per);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[b] = is;
    T* xh = xhat->data() + b * per;
    T* o = out.data() + b * per;
    for (int c = 0; c < channels; ++c) {
      for (int p = 0; p < plane; ++p) {
        const std::size_t i = static_cast<std::size_t>(c) * plane + p;
        xh[i] = (xs[i] - mu) * is;
        o[i] = gm[c] * xh[i] + bt[c];
      }
    }
  }
  return g.emit(
      std::move(out),
      [x, gamma, beta, batch, channels, plane, per, xhat, inv_std](
          Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        const T* gm = g.value(gamma).data();
        T* dgm = g.requires_grad(gamma) ? g.grad(gamma).data() : nullptr;
        T* dbt = g.requires_grad(beta) ? g.grad(beta).data() : nullptr;
        const bool need_x = g.requires_grad(x);
        T* dx = need_x ? g.grad(x).data() : nullptr;
        std::vector<T> dxh(per);
        for (int b = 0; b < batch; ++b) {
          const T* dys = dy.data() + b * per;
          const T* xh = xhat->data() + b * per;
          T mean_d = T(0);
          T mean_dx = T(0);
          for (int c = 0; c < channels; ++c) {
            for (int p = 0; p < plane; ++p) {
              const std::size_t i = static_cast<std::size_t>(c) * plane + p;
              if (dgm) dgm[c] += dys[i] * xh[i];
              if (dbt) dbt[c] += dys[i];
              dxh[i] = dys[i] * gm[c];
              mean_d += dxh[i];
              mean_dx += dxh[i] * xh[i];
            }
          }
          if (!need_x) continue;
          mean_d /= T(per);
          mean_dx /= T(per);
          const T is = (*inv_std)[b];
          T* dxs = dx + b * per;
          for (std::size_t i = 0; i < per; ++i) dxs[i] += is * (dxh[i] - mean_d - xh[i] * mean_dx);
        }
      },
      x, gamma, beta);
}

namespace {

// cols[(c*9 + ky*3 + kx), oy*ow + ox] = x[c, oy*stride + ky - 1, ox*stride + kx - 1]
template <class T>
void im2col3x3(const T* x, int channels, int h, int w, int stride, int oh, int ow, T* cols) {
  const int plane = oh * ow;
  for (int c = 0; c < channels; ++c) {
    const T* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = cols + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - 1;
          T* drow = dst + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(drow, drow + ow, T(0));
            continue;
          }
          const T* srow = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - 1;
            drow[ox] = (ix >= 0 && ix < w) ? srow[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im3x3(const T* cols, int channels, int h, int w, int stride, int oh, int ow, T* dx) {
  const int plane = oh * ow;
  for (int c = 0; c < channels; ++c) {
    T* xc = dx + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = cols + static_cast<std::size_t>(c * 9 + ky * 3 + kx) * plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= h) continue;
          T* drow = xc + static_cast<std::size_t>(iy) * w;
          const T* srow = src + static_cast<std::size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix >= 0 && ix < w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <class T>
Var<T> conv3x3(Var<T> x, Var<T> weight, Var<T> bias, int stride) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  ICMLM_REQUIRE(xv.rank() == 4, "conv3x3 expects [B, C, H, W]");
  ICMLM_REQUIRE(stride == 1 || stride == 2, "conv3x3 stride must be 1 or 2");
  const int batch = xv.dim(0);
  const int cin = xv.dim(1);
  const int h = xv.dim(2);
  const int w = xv.dim(3);
  ICMLM_REQUIRE(wv.rank() == 2 && wv.dim(1) == cin * 9,
                "conv3x3 weight must be [O, C*9], got " + shape_str(wv.shape()));
  const int cout = wv.dim(0);
  ICMLM_REQUIRE(static_cast<int>(bias.value().size()) == cout, "conv3x3 bias size mismatch");
  const int oh = (h - 1) / stride + 1;
  const int ow = (w - 1) / stride + 1;
  const int plane = oh * ow;
  const int kdim = cin * 9;
  const std::size_t col_size = static_cast<std::size_t>(kdim) * plane;
  const bool keep_cols = g.recording() && g.requires_grad(weight);
  auto cols_all = std::make_shared<std::vector<T>>(keep_cols ? col_size * batch : col_size);
  Tensor<T> out({batch, cout, oh, ow});
  const T* bv = bias.value().data();
  for (int b = 0; b < batch; ++b) {
    T* cols = cols_all->data() + (keep_cols ? col_size * b : 0);
    im2col3x3(xv.data() + static_cast<std::size_t>(b) * cin * h * w, cin, h, w, stride, oh, ow,
              cols);
    T* ob = out.data() + static_cast<std::size_t>(b) * cout * plane;
    simd::gemm<T>(false, false, cout, plane, kdim, T(1), wv.data(), kdim, cols, plane, T(0), ob,
                  plane);
    for (int o = 0; o < cout; ++o) {
      T* orow = ob + static_cast<std::size_t>(o) * plane;
      for (int p = 0; p < plane; ++p) orow[p] += bv[o];
    }
  }
  if (!keep_cols) cols_all.reset();
  return g.emit(
      std::move(out),
      [x, weight, bias, stride, batch, cin, h, w, cout, oh, ow, plane, kdim, col_size, cols_all](
          Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        const Tensor<T>& wv = g.value(weight);
        const Tensor<T>& xv = g.value(x);
        const bool need_x = g.requires_grad(x);
        const bool need_w = g.requires_grad(weight);
        T* dw = need_w ? g.grad(weight).data() : nullptr;
        T* db = g.requires_grad(bias) ? g.grad(bias).data() : nullptr;
        T* dx = need_x ? g.grad(x).data() : nullptr;
        std::vector<T> scratch;
        std::vector<T> dcols(need_x ? col_size : 0);
        for (int b = 0; b < batch; ++b) {
          const T* dyb = dy.data() + static_cast<std::size_t>(b) * cout * plane;
          if (db) {
            for (int o = 0; o < cout; ++o) {
              const T* drow = dyb + static_cast<std::size_t>(o) * plane;
              T s = T(0);
              for (int p = 0; p < plane; ++p) s += drow[p];
              db[o] += s;
            }
          }
          if (dw) {
            const T* cols;
            if (cols_all) {
              cols = cols_all->data() + col_size * b;
            } else {
              scratch.resize(col_size);
              im2col3x3(xv.data() + static_cast<std::size_t>(b) * cin * h * w, cin, h, w, stride,
                        oh, ow, scratch.data());
              cols = scratch.data();
            }
            simd::gemm<T>(false, true, cout, kdim, plane, T(1), dyb, plane, cols, plane, T(1), dw,
                          kdim);
          }
          if (need_x) {
            simd::gemm<T>(true, false, kdim, plane, cout, T(1), wv.data(), kdim, dyb, plane, T(0),
                          dcols.data(), plane);
            col2im3x3(dcols.data(), cin, h, w, stride, oh, ow,
                      dx + static_cast<std::size_t>(b) * cin * h * w);
          }
        }
      },
      x, weight, bias);
}

template <class T>
Var<T> global_avg_pool(Var<T> x) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  ICMLM_REQUIRE(xv.rank() == 4, "global_avg_pool expects [B, C, H, W]");
  const int batch = xv.dim(0);
  const int channels = xv.dim(1);
  const int plane = xv.dim(2) * xv.dim(3);
  Tensor<T> out({batch, channels});
  for (int i = 0; i < batch * channels; ++i) {
    const T* src = xv.data() + static_cast<std::size_t>(i) * plane;
    T s = T(0);
    for (int p = 0; p < plane; ++p) s += src[p];
    out[i] = s / T(plane);
  }
  return g.emit(
      std::move(out),
      [x, batch, channels, plane](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(x);
        for (int i = 0; i < batch * channels; ++i) {
          const T v = dy[i] / T(plane);
          T* dst = dx.data() + static_cast<std::size_t>(i) * plane;
          for (int p = 0; p < plane; ++p) dst[p] += v;
        }
      },
      x);
}

template <class T>
Var<T> grid_rows(Var<T> x) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  ICMLM_REQUIRE(xv.rank() == 4, "grid_rows expects [B, C, H, W]");
  const int batch = xv.dim(0);
  const int channels = xv.dim(1);
  const int plane = xv.dim(2) * xv.dim(3);
  Tensor<T> out({batch * plane, channels});
  for (int b = 0; b < batch; ++b) {
    for (int c = 0; c < channels; ++c) {
      const T* src = xv.data() + (static_cast<std::size_t>(b) * channels + c) * plane;
      for (int p = 0; p < plane; ++p) {
        out[(static_cast<std::size_t>(b) * plane + p) * channels + c] = src[p];
      }
    }
  }
  return g.emit(
      std::move(out),
      [x, batch, channels, plane](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(x);
        for (int b = 0; b < batch; ++b) {
          for (int c = 0; c < channels; ++c) {
            T* dst = dx.data() + (static_cast<std::size_t>(b) * channels + c) * plane;
            for (int p = 0; p < plane; ++p) {
              dst[p] += dy[(static_cast<std::size_t>(b) * plane + p) * channels + c];
            }
          }
        }
      },
      x);
}

template <class T>
Var<T> slice_rows(Var<T> x, int begin, int end) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  ICMLM_REQUIRE(xv.rank() == 2, "slice_rows expects rank 2");
  ICMLM_REQUIRE(0 <= begin && begin <= end && end <= xv.dim(0), "slice_rows out of range");
  const int f = xv.dim(1);
  Tensor<T> out({end - begin, f});
  std::copy(xv.data() + static_cast<std::size_t>(begin) * f,
            xv.data() + static_cast<std::size_t>(end) * f, out.data());
  return g.emit(
      std::move(out),
      [x, begin, f](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(x);
        simd::axpy<T>(dy.size(), T(1), dy.data(), dx.data() + static_cast<std::size_t>(begin) * f);
      },
      x);
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  ICMLM_REQUIRE(!parts.empty(), "concat_rows of nothing");
  Graph<T>& g = *parts.front().graph;
  const int f = parts.front().value().dim(1);
  int rows = 0;
  bool any_req = false;
  for (const Var<T>& p : parts) {
    ICMLM_REQUIRE(p.value().rank() == 2 && p.value().dim(1) == f, "concat_rows width mismatch");
    rows += p.value().dim(0);
    any_req = any_req || g.requires_grad(p);
  }
  Tensor<T> out({rows, f});
  std::size_t off = 0;
  for (const Var<T>& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off);
    off += p.value().size();
  }
  return g.emit_many(
      std::move(out),
      [parts](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        std::size_t off = 0;
        for (const Var<T>& p : parts) {
          const std::size_t n = g.value(p).size();
          if (g.requires_grad(p)) {
            Tensor<T>& dp = g.grad(p);
            simd::axpy<T>(n, T(1), dy.data() + off, dp.data());
          }
          off += n;
        }
      },
      any_req);
}

template <class T>
Var<T> gather_rows(Var<T> table, std::span<const int> ids) {
  Graph<T>& g = *table.graph;
  const Tensor<T>& tv = table.value();
  ICMLM_REQUIRE(tv.rank() == 2, "gather_rows expects a rank-2 table");
  const int d = tv.dim(1);
  const int n = static_cast<int>(ids.size());
  Tensor<T> out({n, d});
  for (int i = 0; i < n; ++i) {
    ICMLM_REQUIRE(ids[i] >= 0 && ids[i] < tv.dim(0), "gather_rows id out of range");
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data() + static_cast<std::size_t>(i) * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return g.emit(
      std::move(out),
      [table, idv, d](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        Tensor<T>& dt = g.grad(table);
        for (std::size_t i = 0; i < idv.size(); ++i) {
          simd::axpy<T>(d, T(1), dy.data() + i * d, dt.data() + static_cast<std::size_t>(idv[i]) * d);
        }
      },
      table);
}

template <class T>
Var<T> grouped_matmul_nt(Var<T> a, Var<T> b, int groups, T alpha) {
  Graph<T>& g = *a.graph;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  ICMLM_REQUIRE(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(1),
                "grouped_matmul_nt shape mismatch");
  ICMLM_REQUIRE(groups >= 1 && av.dim(1) % groups == 0, "grouped_matmul_nt bad group count");
  const int m = av.dim(0);
  const int n = bv.dim(0);
  const int width = av.dim(1);
  const int d = width / groups;
  Tensor<T> out({groups, m, n});
  for (int gi = 0; gi < groups; ++gi) {
    simd::gemm<T>(false, true, m, n, d, alpha, av.data() + gi * d, width, bv.data() + gi * d, width,
                  T(0), out.data() + static_cast<std::size_t>(gi) * m * n, n);
  }
  return g.emit(
      std::move(out),
      [a, b, groups, m, n, width, d, alpha](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        const Tensor<T>& av = g.value(a);
        const Tensor<T>& bv = g.value(b);
        T* da = g.requires_grad(a) ? g.grad(a).data() : nullptr;
        T* db = g.requires_grad(b) ? g.grad(b).data() : nullptr;
        for (int gi = 0; gi < groups; ++gi) {
          const T* dg = dy.data() + static_cast<std::size_t>(gi) * m * n;
          if (da) {
            simd::gemm<T>(false, false, m, d, n, alpha, dg, n, bv.data() + gi * d, width, T(1),
                          da + gi * d, width);
          }
          if (db) {
            simd::gemm<T>(true, false, n, d, m, alpha, dg, n, av.data() + gi * d, width, T(1),
                          db + gi * d, width);
          }
        }
      },
      a, b);
}

template <class T>
Var<T> grouped_matmul(Var<T> p, Var<T> v, int groups) {
  Graph<T>& g = *p.graph;
  const Tensor<T>& pv = p.value();
  const Tensor<T>& vv = v.value();
  ICMLM_REQUIRE(pv.rank() == 3 && pv.dim(0) == groups && vv.rank() == 2 && pv.dim(2) == vv.dim(0),
                "grouped_matmul shape mismatch");
  ICMLM_REQUIRE(vv.dim(1) % groups == 0, "grouped_matmul bad group count");
  const int m = pv.dim(1);
  const int n = pv.dim(2);
  const int width = vv.dim(1);
  const int d = width / groups;
  Tensor<T> out({m, width});
  for (int gi = 0; gi < groups; ++gi) {
    simd::gemm<T>(false, false, m, d, n, T(1), pv.data() + static_cast<std::size_t>(gi) * m * n, n,
                  vv.data() + gi * d, width, T(0), out.data() + gi * d, width);
  }
  return g.emit(
      std::move(out),
      [p, v, groups, m, n, width, d](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        const Tensor<T>& pv = g.value(p);
        const Tensor<T>& vv = g.value(v);
        T* dp = g.requires_grad(p) ? g.grad(p).data() : nullptr;
        T* dv = g.requires_grad(v) ? g.grad(v).data() : nullptr;
        for (int gi = 0; gi < groups; ++gi) {
          const std::size_t po = static_cast<std::size_t>(gi) * m * n;
          if (dp) {
            simd::gemm<T>(false, true, m, n, d, T(1), dy.data() + gi * d, width, vv.data() + gi * d,
                          width, T(1), dp + po, n);
          }
          if (dv) {
            simd::gemm<T>(true, false, n, d, m, T(1), pv.data() + po, n, dy.data() + gi * d, width,
                          T(1), dv + gi * d, width);
          }
        }
      },
      p, v);
}

template <class T>
Var<T> softmax(Var<T> x) {
  Graph<T>& g = *x.graph;
  Tensor<T> out = x.value();
  const int f = out.dim(-1);
  const int rows = rows_of(out);
  for (int r = 0; r < rows; ++r) {
    softmax_inplace<T>(std::span<T>(out.data() + static_cast<std::size_t>(r) * f, f));
  }
  return g.emit(
      std::move(out),
      [x, rows, f](Graph<T>& g, const Tensor<T>& y, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(x);
        for (int r = 0; r < rows; ++r) {
          const std::size_t o = static_cast<std::size_t>(r) * f;
          T s = T(0);
          for (int j = 0; j < f; ++j) s += dy[o + j] * y[o + j];
          for (int j = 0; j < f; ++j) dx[o + j] += y[o + j] * (dy[o + j] - s);
        }
      },
      x);
}

template <class T>
Var<T> log_softmax(Var<T> x) {
  Graph<T>& g = *x.graph;
  Tensor<T> out = x.value();
  const int f = out.dim(-1);
  const int rows = rows_of(out);
  for (int r = 0; r < rows; ++r) {
    T* o = out.data() + static_cast<std::size_t>(r) * f;
    const T lse = logsumexp_value<T>(std::span<const T>(o, f));
    for (int j = 0; j < f; ++j) o[j] -= lse;
  }
  return g.emit(
      std::move(out),
      [x, rows, f](Graph<T>& g, const Tensor<T>& y, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(x);
        for (int r = 0; r < rows; ++r) {
          const std::size_t o = static_cast<std::size_t>(r) * f;
          T s = T(0);
          for (int j = 0; j < f; ++j) s += dy[o + j];
          for (int j = 0; j < f; ++j) dx[o + j] += dy[o + j] - std::exp(y[o + j]) * s;
        }
      },
      x);
}

template <class T>
Var<T> logsumexp(Var<T> x) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  const int f = xv.dim(-1);
  const int rows = rows_of(xv);
  Shape shape(xv.shape().begin(), xv.shape().end() - 1);
  if (shape.empty()) shape = {1};
  Tensor<T> out(shape);
  for (int r = 0; r < rows; ++r) {
    out[r] = logsumexp_value<T>(std::span<const T>(xv.data() + static_cast<std::size_t>(r) * f, f));
  }
  return g.emit(
      std::move(out),
      [x, rows, f](Graph<T>& g, const Tensor<T>& y, const Tensor<T>& dy) {
        const Tensor<T>& xv = g.value(x);
        Tensor<T>& dx = g.grad(x);
        for (int r = 0; r < rows; ++r) {
          const std::size_t o = static_cast<std::size_t>(r) * f;
          for (int j = 0; j < f; ++j) dx[o + j] += dy[r] * std::exp(xv[o + j] - y[r]);
        }
      },
      x);
}

template <class T>
Var<T> transpose(Var<T> x) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  ICMLM_REQUIRE(xv.rank() == 2, "transpose expects rank 2");
  const int r = xv.dim(0);
  const int c = xv.dim(1);
  Tensor<T> out({c, r});
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) out.at(j, i) = xv.at(i, j);
  }
  return g.emit(
      std::move(out),
      [x, r, c](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(x);
        for (int i = 0; i < r; ++i) {
          for (int j = 0; j < c; ++j) dx.at(i, j) += dy.at(j, i);
        }
      },
      x);
}

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Graph<T>& g = *x.graph;
  Tensor<T> out = x.value();
  out.reshape(std::move(shape));
  return g.emit(
      std::move(out),
      [x](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(x);
        simd::axpy<T>(dy.size(), T(1), dy.data(), dx.data());
      },
      x);
}

template <class T>
Var<T> dropout(Var<T> x, T p, Rng& rng) {
  if (p <= T(0) || !x.graph->recording()) return x;
  ICMLM_REQUIRE(p < T(1), "dropout probability must be < 1");
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  auto mask = std::make_shared<std::vector<T>>(xv.size());
  const T keep_scale = T(1) / (T(1) - p);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = rng.uniform() < static_cast<double>(p) ? T(0) : keep_scale;
    out[i] = xv[i] * (*mask)[i];
  }
  return g.emit(
      std::move(out),
      [x, mask](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(x);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (*mask)[i];
      },
      x);
}

template <class T>
Var<T> sum(Var<T> x) {
  Graph<T>& g = *x.graph;
  const Tensor<T>& xv = x.value();
  T s = T(0);
  for (T v : xv.values()) s += v;
  return g.emit(
      Tensor<T>({1}, std::vector<T>{s}),
      [x](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(x);
        for (T& v : dx.values()) v += dy[0];
      },
      x);
}

template <class T>
Var<T> mean(Var<T> x) {
  const std::size_t n = x.value().size();
  return scale(sum(x), T(1) / static_cast<T>(n));
}

template <class T>
Var<T> sparse_cross_entropy(Var<T> logits, std::span<const int> targets) {
  Graph<T>& g = *logits.graph;
  const Tensor<T>& lv = logits.value();
  ICMLM_REQUIRE(lv.rank() == 2, "sparse_cross_entropy expects [B, V] logits");
  const int rows = lv.dim(0);
  const int f = lv.dim(1);
  ICMLM_REQUIRE(static_cast<int>(targets.size()) == rows, "sparse_cross_entropy target count");
  ICMLM_REQUIRE(rows > 0, "sparse_cross_entropy on an empty batch");
  auto probs = std::make_shared<Tensor<T>>(lv);
  std::vector<int> tv(targets.begin(), targets.end());
  T total = T(0);
  for (int r = 0; r < rows; ++r) {
    ICMLM_REQUIRE(tv[r] >= 0 && tv[r] < f, "target id out of range");
    std::span<T> row(probs->data() + static_cast<std::size_t>(r) * f, f);
    const T lse = logsumexp_value<T>(std::span<const T>(row.data(), row.size()));
    total += lse - row[tv[r]];
    softmax_inplace<T>(row);
  }
  return g.emit(
      Tensor<T>({1}, std::vector<T>{total / T(rows)}),
      [logits, probs, tv, rows, f](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(logits);
        const T w = dy[0] / T(rows);
        for (int r = 0; r < rows; ++r) {
          const std::size_t o = static_cast<std::size_t>(r) * f;
          for (int j = 0; j < f; ++j) dx[o + j] += w * (*probs)[o + j];
          dx[o + tv[r]] -= w;
        }
      },
      logits);
}

template <class T>
Var<T> soft_cross_entropy(Var<T> logits, const Tensor<T>& labels) {
  Graph<T>& g = *logits.graph;
  const Tensor<T>& lv = logits.value();
  ICMLM_REQUIRE(lv.rank() == 2 && labels.shape() == lv.shape(),
                "soft_cross_entropy expects matching [B, K] logits and labels");
  const int rows = lv.dim(0);
  const int f = lv.dim(1);
  ICMLM_REQUIRE(rows > 0, "soft_cross_entropy on an empty batch");
  auto probs = std::make_shared<Tensor<T>>(lv);
  auto lab = std::make_shared<Tensor<T>>(labels);
  T total = T(0);
  for (int r = 0; r < rows; ++r) {
    std::span<T> row(probs->data() + static_cast<std::size_t>(r) * f, f);
    const T lse = logsumexp_value<T>(std::span<const T>(row.data(), row.size()));
    for (int j = 0; j < f; ++j) {
      const T y = labels[static_cast<std::size_t>(r) * f + j];
      if (y != T(0)) total -= y * (row[j] - lse);
    }
    softmax_inplace<T>(row);
  }
  return g.emit(
      Tensor<T>({1}, std::vector<T>{total / T(rows)}),
      [logits, probs, lab, rows, f](Graph<T>& g, const Tensor<T>&, const Tensor<T>& dy) {
        Tensor<T>& dx = g.grad(logits);
        const T w = dy[0] / T(rows);
        for (int r = 0; r < rows; ++r) {
          const std::size_t o = static_cast<std::size_t>(r) * f;
          T label_sum = T(0);
          for (int j = 0; j < f; ++j) label_sum += (*lab)[o + j];
          for (int j = 0; j < f; ++j) dx[o + j] += w * (label_sum * (*probs)[o + j] - (*lab)[o + j]);
        }
      },
      logits);
}

#define ICMLM_INSTANTIATE_OPS(T)                                                    \
  template void softmax_inplace<T>(std::span<T>);                                   \
  template T logsumexp_value<T>(std::span<const T>);                                \
  template Var<T> matmul<T>(Var<T>, Var<T>, bool, bool);                            \
  template Var<T> add<T>(Var<T>, Var<T>);                                           \
  template Var<T> sub<T>(Var<T>, Var<T>);                                           \
  template Var<T> mul<T>(Var<T>, Var<T>);                                           \
  template Var<T> add_scaled<T>(Var<T>, Var<T>, T);                                 \
  template Var<T> scale<T>(Var<T>, T);                                              \
  template Var<T> add_bias<T>(Var<T>, Var<T>);                                      \
  template Var<T> relu<T>(Var<T>);                                                  \
  template Var<T> layer_norm<T>(Var<T>, Var<T>, Var<T>, int, T);                    \
  template Var<T> sample_norm<T>(Var<T>, Var<T>, Var<T>, T);                        \
  template Var<T> conv3x3<T>(Var<T>, Var<T>, Var<T>, int);                          \
  template Var<T> global_avg_pool<T>(Var<T>);                                       \
  template Var<T> grid_rows<T>(Var<T>);                                             \
  template Var<T> slice_rows<T>(Var<T>, int, int);                                  \
  template Var<T> concat_rows<T>(const std::vector<Var<T>>&);                       \
  template Var<T> gather_rows<T>(Var<T>, std::span<const int>);                     \
  template Var<T> grouped_matmul_nt<T>(Var<T>, Var<T>, int, T);                     \
  template Var<T> grouped_matmul<T>(Var<T>, Var<T>, int);                           \
  template Var<T> softmax<T>(Var<T>);                                               \
  template Var<T> log_softmax<T>(Var<T>);                                           \
  template Var<T> logsumexp<T>(Var<T>);                                             \
  template Var<T> transpose<T>(Var<T>);                                             \
  template Var<T> reshape<T>(Var<T>, Shape);                                        \
  template Var<T> dropout<T>(Var<T>, T, Rng&);                                      \
  template Var<T> sum<T>(Var<T>);                                                   \
  template Var<T> mean<T>(Var<T>);                                                  \
  template Var<T> sparse_cross_entropy<T>(Var<T>, std::span<const int>);            \
  template Var<T> soft_cross_entropy<T>(Var<T>, const Tensor<T>&);

ICMLM_INSTANTIATE_OPS(float)
ICMLM_INSTANTIATE_OPS(double)

}  // namespace icmlm::ag
