#include "kernels.hpp"

#include <algorithm>
#include <cstddef>
#include <string>

#include "nsd/error.hpp"

namespace nsd::ad::kernels {

std::tuple<std::size_t, std::size_t, std::size_t> split_at(const Shape& shape,
                                                           std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
  return {outer, shape[axis], inner};
}

NdArray mode_product(const NdArray& t, const NdArray& k, std::size_t mode,
                     bool transpose_kernel) {
  auto [outer, n_in, inner] = split_at(t.shape(), mode);
  const std::size_t n_out = transpose_kernel ? k.dim(0) : k.dim(1);
  const std::size_t kcols = k.dim(1);
  Shape out_shape = t.shape();
  out_shape[mode] = n_out;
  NdArray out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < n_in; ++i) {
      const double* src = &t[(o * n_in + i) * inner];
      for (std::size_t j = 0; j < n_out; ++j) {
        const double kij = transpose_kernel ? k[j * kcols + i] : k[i * kcols + j];
        if (kij == 0.0) continue;
        double* dst = &out[(o * n_out + j) * inner];
        for (std::size_t q = 0; q < inner; ++q) dst[q] += kij * src[q];
      }
    }
  }
  return out;
}

NdArray mode_gram(const NdArray& a, const NdArray& b, std::size_t mode) {
  auto [outer, na, inner] = split_at(a.shape(), mode);
  const std::size_t nb = b.dim(mode);
  NdArray out(Shape{na, nb});
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < na; ++i) {
      const double* pa = &a[(o * na + i) * inner];
      for (std::size_t j = 0; j < nb; ++j) {
        const double* pb = &b[(o * nb + j) * inner];
        double s = 0.0;
        for (std::size_t q = 0; q < inner; ++q) s += pa[q] * pb[q];
        out[i * nb + j] += s;
      }
    }
  }
  return out;
}

void check_conv(const char* op, const Shape& x, const Shape& w,
                bool input_is_grad) {
  const std::size_t channel = input_is_grad ? 0 : 1;
  if (x.size() != 4 || w.size() != 4 || w[2] != 3 || w[3] != 3 ||
      x[1] != w[channel]) {
    throw DimensionError(std::string(op) + ": incompatible shapes " +
                         shape_str(x) + " and weight " + shape_str(w));
  }
}

namespace {

// Accumulates one 3x3 correlation tap pattern between two HxW planes:
// dst[h, w] += coef * src[h + kh - 1, w + kw - 1] over valid positions.
inline void tap(double* dst, const double* src, double coef, std::size_t H,
                std::size_t W, std::size_t kh, std::size_t kw) {
  const std::size_t h_lo = kh == 0 ? 1 : 0;
  const std::size_t h_hi = kh == 2 ? H - 1 : H;
  const std::size_t w_lo = kw == 0 ? 1 : 0;
  const std::size_t w_hi = kw == 2 ? W - 1 : W;
  for (std::size_t h = h_lo; h < h_hi; ++h) {
    double* d = dst + h * W;
    const double* s = src + (h + kh - 1) * W + (static_cast<std::ptrdiff_t>(kw) - 1);
    for (std::size_t c = w_lo; c < w_hi; ++c) d[c] += coef * s[c];
  }
}

// Transposed tap: dst[h + kh - 1, w + kw - 1] += coef * src[h, w].
inline void tap_t(double* dst, const double* src, double coef, std::size_t H,
                  std::size_t W, std::size_t kh, std::size_t kw) {
  const std::size_t h_lo = kh == 0 ? 1 : 0;
  const std::size_t h_hi = kh == 2 ? H - 1 : H;
  const std::size_t w_lo = kw == 0 ? 1 : 0;
  const std::size_t w_hi = kw == 2 ? W - 1 : W;
  for (std::size_t h = h_lo; h < h_hi; ++h) {
    double* d = dst + (h + kh - 1) * W + (static_cast<std::ptrdiff_t>(kw) - 1);
    const double* s = src + h * W;
    for (std::size_t c = w_lo; c < w_hi; ++c) d[c] += coef * s[c];
  }
}

inline double tap_dot(const double* x, const double* g, std::size_t H,
                      std::size_t W, std::size_t kh, std::size_t kw) {
  const std::size_t h_lo = kh == 0 ? 1 : 0;
  const std::size_t h_hi = kh == 2 ? H - 1 : H;
  const std::size_t w_lo = kw == 0 ? 1 : 0;
  const std::size_t w_hi = kw == 2 ? W - 1 : W;
  double s = 0.0;
  for (std::size_t h = h_lo; h < h_hi; ++h) {
    const double* xs = x + (h + kh - 1) * W + (static_cast<std::ptrdiff_t>(kw) - 1);
    const double* gs = g + h * W;
    for (std::size_t c = w_lo; c < w_hi; ++c) s += xs[c] * gs[c];
  }
  return s;
}

}  // namespace

NdArray conv2d(const NdArray& x, const NdArray& w) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0);
  const std::size_t plane = H * W;
  NdArray out(Shape{B, Co, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co) {
      double* dst = &out[(b * Co + co) * plane];
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* src = &x[(b * Ci + ci) * plane];
        const double* k = &w[(co * Ci + ci) * 9];
        for (std::size_t kh = 0; kh < 3; ++kh)
          for (std::size_t kw = 0; kw < 3; ++kw)
            tap(dst, src, k[kh * 3 + kw], H, W, kh, kw);
      }
    }
  return out;
}

NdArray conv2d_input_grad(const NdArray& g, const NdArray& w) {
  const std::size_t B = g.dim(0), Co = g.dim(1), H = g.dim(2), W = g.dim(3);
  const std::size_t Ci = w.dim(1);
  const std::size_t plane = H * W;
  NdArray out(Shape{B, Ci, H, W});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      double* dst = &out[(b * Ci + ci) * plane];
      for (std::size_t co = 0; co < Co; ++co) {
        const double* src = &g[(b * Co + co) * plane];
        const double* k = &w[(co * Ci + ci) * 9];
        for (std::size_t kh = 0; kh < 3; ++kh)
          for (std::size_t kw = 0; kw < 3; ++kw)
            tap_t(dst, src, k[kh * 3 + kw], H, W, kh, kw);
      }
    }
  return out;
}

NdArray conv2d_weight_grad(const NdArray& x, const NdArray& g) {
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = g.dim(1);
  const std::size_t plane = H * W;
  NdArray out(Shape{Co, Ci, 3, 3});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co) {
      const double* gp = &g[(b * Co + co) * plane];
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* xp = &x[(b * Ci + ci) * plane];
        double* k = &out[(co * Ci + ci) * 9];
        for (std::size_t kh = 0; kh < 3; ++kh)
          for (std::size_t kw = 0; kw < 3; ++kw)
            k[kh * 3 + kw] += tap_dot(xp, gp, H, W, kh, kw);
      }
    }
  return out;
}

NdArray avg_pool2(const NdArray& x) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t h2 = H / 2, w2 = W / 2;
  NdArray out(Shape{B, C, h2, w2});
  for (std::size_t p = 0; p < B * C; ++p) {
    const double* src = &x[p * H * W];
    double* dst = &out[p * h2 * w2];
    for (std::size_t h = 0; h < h2; ++h)
      for (std::size_t c = 0; c < w2; ++c) {
        const double* s = src + 2 * h * W + 2 * c;
        dst[h * w2 + c] = 0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
      }
  }
  return out;
}

NdArray avg_unpool2(const NdArray& g) {
  const std::size_t B = g.dim(0), C = g.dim(1), h2 = g.dim(2), w2 = g.dim(3);
  const std::size_t H = 2 * h2, W = 2 * w2;
  NdArray out(Shape{B, C, H, W});
  for (std::size_t p = 0; p < B * C; ++p) {
    const double* src = &g[p * h2 * w2];
    double* dst = &out[p * H * W];
    for (std::size_t h = 0; h < h2; ++h)
      for (std::size_t c = 0; c < w2; ++c) {
        const double v = 0.25 * src[h * w2 + c];
        double* d = dst + 2 * h * W + 2 * c;
        d[0] = d[1] = d[W] = d[W + 1] = v;
      }
  }
  return out;
}

}  // namespace nsd::ad::kernels
