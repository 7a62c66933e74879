#include "tap/kernels.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace tap::kernels {
namespace {

// Upper bound on im2col scratch, in floats; larger batches are processed in
// image chunks.
constexpr std::int64_t kMaxColumnFloats = std::int64_t{1} << 25;

int images_per_chunk(const ConvGeometry& g) {
  const std::int64_t per_image = g.patch_size() * g.out_height() * g.out_width();
  return static_cast<int>(std::clamp<std::int64_t>(kMaxColumnFloats / std::max<std::int64_t>(per_image, 1), 1, g.batch));
}

// Output columns [lo, hi) whose input column ox * stride - pad + kx lies
// inside [0, width).
std::pair<int, int> valid_columns(int out_width, int width, int stride, int pad, int kx) {
  const int first = pad - kx;
  const int lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  const int last = width - 1 + pad - kx;
  const int hi = last < 0 ? 0 : std::min(out_width, last / stride + 1);
  return {std::min(lo, hi), hi};
}

// Kernel taps that read at least one in-bounds input pixel. Taps that only
// ever see padding contribute nothing and are skipped in the GEMMs, which
// matters for 3x3 convolutions over the tiny late-stage maps.
std::vector<int> live_taps(const ConvGeometry& g) {
  std::vector<int> taps;
  const int oh = g.out_height();
  const int ow = g.out_width();
  for (int ky = 0; ky < g.kernel; ++ky) {
    bool row_live = false;
    for (int oy = 0; oy < oh && !row_live; ++oy) {
      const int iy = oy * g.stride - g.pad + ky;
      row_live = iy >= 0 && iy < g.in_height;
    }
    for (int kx = 0; kx < g.kernel; ++kx) {
      const auto [lo, hi] = valid_columns(ow, g.in_width, g.stride, g.pad, kx);
      if (row_live && hi > lo) taps.push_back(ky * g.kernel + kx);
    }
  }
  return taps;
}

// Rows of the column matrix are (input channel, live tap) pairs.
void im2col(const ConvGeometry& g, const std::vector<int>& taps, const float* x, int n0, int n1, float* col) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const std::int64_t plane = static_cast<std::int64_t>(g.in_height) * g.in_width;
  const std::int64_t cols = static_cast<std::int64_t>(n1 - n0) * oh * ow;
  const int nt = static_cast<int>(taps.size());
  const std::int64_t rows = static_cast<std::int64_t>(g.in_channels) * nt;
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < rows; ++r) {
    const int c = static_cast<int>(r / nt);
    const int tap = taps[static_cast<std::size_t>(r % nt)];
    const int ky = tap / g.kernel;
    const int kx = tap % g.kernel;
    const auto [lo, hi] = valid_columns(ow, g.in_width, g.stride, g.pad, kx);
    float* out = col + r * cols;
    for (int n = n0; n < n1; ++n) {
      const float* src = x + (static_cast<std::int64_t>(c) * g.batch + n) * plane;
      for (int oy = 0; oy < oh; ++oy, out += ow) {
        const int iy = oy * g.stride - g.pad + ky;
        if (iy < 0 || iy >= g.in_height) {
          std::fill_n(out, ow, 0.0f);
          continue;
        }
        const float* row = src + static_cast<std::int64_t>(iy) * g.in_width + kx - g.pad;
        std::fill_n(out, lo, 0.0f);
        if (g.stride == 1) {
          std::copy(row + lo, row + hi, out + lo);
        } else {
          for (int ox = lo; ox < hi; ++ox) out[ox] = row[ox * g.stride];
        }
        std::fill(out + hi, out + ow, 0.0f);
      }
    }
  }
}

void col2im_accumulate(const ConvGeometry& g, const std::vector<int>& taps, const float* col, int n0, int n1,
                       float* dx) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const std::int64_t plane = static_cast<std::int64_t>(g.in_height) * g.in_width;
  const std::int64_t cols = static_cast<std::int64_t>(n1 - n0) * oh * ow;
  const int nt = static_cast<int>(taps.size());
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.in_channels; ++c) {
    for (int t = 0; t < nt; ++t) {
      const int ky = taps[static_cast<std::size_t>(t)] / g.kernel;
      const int kx = taps[static_cast<std::size_t>(t)] % g.kernel;
      const auto [lo, hi] = valid_columns(ow, g.in_width, g.stride, g.pad, kx);
      const float* in = col + (static_cast<std::int64_t>(c) * nt + t) * cols;
      for (int n = n0; n < n1; ++n) {
        float* dst = dx + (static_cast<std::int64_t>(c) * g.batch + n) * plane;
        for (int oy = 0; oy < oh; ++oy, in += ow) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_height) continue;
          float* row = dst + static_cast<std::int64_t>(iy) * g.in_width + kx - g.pad;
          if (g.stride == 1) {
            for (int ox = lo; ox < hi; ++ox) row[ox] += in[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) row[ox * g.stride] += in[ox];
          }
        }
      }
    }
  }
}

// Weight columns restricted to the live taps, [out_channels][in_channels * taps].
std::vector<float> gather_weight(const ConvGeometry& g, const std::vector<int>& taps, std::span<const float> weight) {
  const int kk = g.kernel * g.kernel;
  const int nt = static_cast<int>(taps.size());
  std::vector<float> out(static_cast<std::size_t>(g.out_channels) * g.in_channels * nt);
#pragma omp parallel for schedule(static)
  for (int o = 0; o < g.out_channels; ++o) {
    for (int c = 0; c < g.in_channels; ++c) {
      const float* src = weight.data() + (static_cast<std::int64_t>(o) * g.in_channels + c) * kk;
      float* dst = out.data() + (static_cast<std::int64_t>(o) * g.in_channels + c) * nt;
      for (int t = 0; t < nt; ++t) dst[t] = src[taps[static_cast<std::size_t>(t)]];
    }
  }
  return out;
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
  using Matrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using ConstMap = Eigen::Map<const Matrix, 0, Eigen::OuterStride<>>;
  using Map = Eigen::Map<Matrix, 0, Eigen::OuterStride<>>;
  Map out(c, m, n, Eigen::OuterStride<>(ldc));
  if (beta == 0.0f) {
    out.setZero();
  } else if (beta != 1.0f) {
    out *= beta;
  }
  const ConstMap a_map(a, trans_a ? k : m, trans_a ? m : k, Eigen::OuterStride<>(lda));
  const ConstMap b_map(b, trans_b ? n : k, trans_b ? k : n, Eigen::OuterStride<>(ldb));
  if (trans_a && trans_b) {
    out.noalias() += alpha * (a_map.transpose() * b_map.transpose());
  } else if (trans_a) {
    out.noalias() += alpha * (a_map.transpose() * b_map);
  } else if (trans_b) {
    out.noalias() += alpha * (a_map * b_map.transpose());
  } else {
    out.noalias() += alpha * (a_map * b_map);
  }
}

void conv2d_forward(const ConvGeometry& g, std::span<const float> x, std::span<const float> weight,
                    std::span<float> y) {
  const std::vector<int> taps = live_taps(g);
  const bool pruned = static_cast<int>(taps.size()) != g.kernel * g.kernel;
  const std::vector<float> gathered = pruned ? gather_weight(g, taps, weight) : std::vector<float>{};
  const float* w = pruned ? gathered.data() : weight.data();
  const int k = g.in_channels * static_cast<int>(taps.size());
  const std::int64_t spatial = static_cast<std::int64_t>(g.out_height()) * g.out_width();
  const int ldy = static_cast<int>(g.batch * spatial);
  const int chunk = images_per_chunk(g);
  std::vector<float> col;
  for (int n0 = 0; n0 < g.batch; n0 += chunk) {
    const int n1 = std::min(g.batch, n0 + chunk);
    const int cols = static_cast<int>((n1 - n0) * spatial);
    col.resize(static_cast<std::size_t>(k) * cols);
    im2col(g, taps, x.data(), n0, n1, col.data());
    gemm(false, false, g.out_channels, cols, k, 1.0f, w, k, col.data(), cols, 0.0f, y.data() + n0 * spatial, ldy);
  }
}

void conv2d_backward_data(const ConvGeometry& g, std::span<const float> dy,
                          std::span<const float> weight, std::span<float> dx) {
  std::fill(dx.begin(), dx.end(), 0.0f);
  const std::vector<int> taps = live_taps(g);
  const bool pruned = static_cast<int>(taps.size()) != g.kernel * g.kernel;
  const std::vector<float> gathered = pruned ? gather_weight(g, taps, weight) : std::vector<float>{};
  const float* w = pruned ? gathered.data() : weight.data();
  const int k = g.in_channels * static_cast<int>(taps.size());
  const std::int64_t spatial = static_cast<std::int64_t>(g.out_height()) * g.out_width();
  const int ldy = static_cast<int>(g.batch * spatial);
  const int chunk = images_per_chunk(g);
  std::vector<float> col;
  for (int n0 = 0; n0 < g.batch; n0 += chunk) {
    const int n1 = std::min(g.batch, n0 + chunk);
    const int cols = static_cast<int>((n1 - n0) * spatial);
    col.resize(static_cast<std::size_t>(k) * cols);
    gemm(true, false, k, cols, g.out_channels, 1.0f, w, k, dy.data() + n0 * spatial, ldy, 0.0f, col.data(), cols);
    col2im_accumulate(g, taps, col.data(), n0, n1, dx.data());
  }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const float> x,
                            std::span<const float> dy, std::span<float> dweight) {
  const std::vector<int> taps = live_taps(g);
  const int nt = static_cast<int>(taps.size());
  const int kk = g.kernel * g.kernel;
  const bool pruned = nt != kk;
  const int k = g.in_channels * nt;
  std::vector<float> gathered(pruned ? static_cast<std::size_t>(g.out_channels) * k : 0, 0.0f);
  float* dw = pruned ? gathered.data() : dweight.data();
  const std::int64_t spatial = static_cast<std::int64_t>(g.out_height()) * g.out_width();
  const int ldy = static_cast<int>(g.batch * spatial);
  const int chunk = images_per_chunk(g);
  std::vector<float> col;
  for (int n0 = 0; n0 < g.batch; n0 += chunk) {
    const int n1 = std::min(g.batch, n0 + chunk);
    const int cols = static_cast<int>((n1 - n0) * spatial);
    col.resize(static_cast<std::size_t>(k) * cols);
    im2col(g, taps, x.data(), n0, n1, col.data());
    gemm(false, true, g.out_channels, k, cols, 1.0f, dy.data() + n0 * spatial, ldy, col.data(), cols, 1.0f, dw, k);
  }
  if (pruned) {
#pragma omp parallel for schedule(static)
    for (int o = 0; o < g.out_channels; ++o) {
      for (int c = 0; c < g.in_channels; ++c) {
        float* dst = dweight.data() + (static_cast<std::int64_t>(o) * g.in_channels + c) * kk;
        const float* src = gathered.data() + (static_cast<std::int64_t>(o) * g.in_channels + c) * nt;
        for (int t = 0; t < nt; ++t) dst[taps[static_cast<std::size_t>(t)]] += src[t];
      }
    }
  }
}

void batchnorm_forward_train(int channels, std::int64_t per_channel, std::span<const float> x,
                             std::span<const float> gamma, std::span<const float> beta, float eps,
                             std::span<float> y, std::span<float> mean, std::span<float> inv_std,
                             std::span<float> variance) {
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    const float* xc = x.data() + c * per_channel;
    float* yc = y.data() + c * per_channel;
    double sum = 0.0;
    for (std::int64_t i = 0; i < per_channel; ++i) sum += xc[i];
    const double mu = sum / static_cast<double>(per_channel);
    double sq = 0.0;
    for (std::int64_t i = 0; i < per_channel; ++i) {
      const double d = xc[i] - mu;
      sq += d * d;
    }
    const double var = sq / static_cast<double>(per_channel);
    const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
    const float m = static_cast<float>(mu);
    mean[c] = m;
    inv_std[c] = is;
    variance[c] = static_cast<float>(var);
    const float scale = gamma[c] * is;
    const float shift = beta[c] - m * scale;
    for (std::int64_t i = 0; i < per_channel; ++i) yc[i] = xc[i] * scale + shift;
  }
}

void batchnorm_forward_affine(int channels, std::int64_t per_channel, std::span<const float> x,
                              std::span<const float> gamma, std::span<const float> beta,
                              std::span<const float> mean, std::span<const float> inv_std,
                              std::span<float> y) {
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    const float scale = gamma[c] * inv_std[c];
    const float shift = beta[c] - mean[c] * scale;
    const float* xc = x.data() + c * per_channel;
    float* yc = y.data() + c * per_channel;
    for (std::int64_t i = 0; i < per_channel; ++i) yc[i] = xc[i] * scale + shift;
  }
}

void batchnorm_backward_train(int channels, std::int64_t per_channel, std::span<const float> x,
                              std::span<const float> dy, std::span<const float> gamma,
                              std::span<const float> mean, std::span<const float> inv_std,
                              std::span<float> dx, std::span<float> dgamma, std::span<float> dbeta) {
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    const float* xc = x.data() + c * per_channel;
    const float* dyc = dy.data() + c * per_channel;
    float* dxc = dx.data() + c * per_channel;
    const float m = mean[c];
    const float is = inv_std[c];
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::int64_t i = 0; i < per_channel; ++i) {
      sum_dy += dyc[i];
      sum_dy_xhat += static_cast<double>(dyc[i]) * ((xc[i] - m) * is);
    }
    dgamma[c] += static_cast<float>(sum_dy_xhat);
    dbeta[c] += static_cast<float>(sum_dy);
    const float inv_n = 1.0f / static_cast<float>(per_channel);
    const float a = gamma[c] * is;
    const float mean_dy = static_cast<float>(sum_dy) * inv_n;
    const float mean_dy_xhat = static_cast<float>(sum_dy_xhat) * inv_n;
    for (std::int64_t i = 0; i < per_channel; ++i) {
      const float xhat = (xc[i] - m) * is;
      dxc[i] = a * (dyc[i] - mean_dy - xhat * mean_dy_xhat);
    }
  }
}

void batchnorm_backward_affine(int channels, std::int64_t per_channel, std::span<const float> x,
                               std::span<const float> dy, std::span<const float> gamma,
                               std::span<const float> mean, std::span<const float> inv_std,
                               std::span<float> dx, std::span<float> dgamma,
                               std::span<float> dbeta) {
  const bool want_params = !dgamma.empty();
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    const float* xc = x.data() + c * per_channel;
    const float* dyc = dy.data() + c * per_channel;
    float* dxc = dx.data() + c * per_channel;
    const float a = gamma[c] * inv_std[c];
    if (want_params) {
      double sum_dy = 0.0;
      double sum_dy_xhat = 0.0;
      for (std::int64_t i = 0; i < per_channel; ++i) {
        sum_dy += dyc[i];
        sum_dy_xhat += static_cast<double>(dyc[i]) * ((xc[i] - mean[c]) * inv_std[c]);
      }
      dgamma[c] += static_cast<float>(sum_dy_xhat);
      dbeta[c] += static_cast<float>(sum_dy);
    }
    for (std::int64_t i = 0; i < per_channel; ++i) dxc[i] = a * dyc[i];
  }
}

void relu_inplace(std::span<float> x) {
  float* p = x.data();
  const std::int64_t n = static_cast<std::int64_t>(x.size());
#pragma omp parallel for simd schedule(static)
  for (std::int64_t i = 0; i < n; ++i) p[i] = p[i] > 0.0f ? p[i] : 0.0f;
}

void relu_backward(std::span<const float> y, std::span<const float> dy, std::span<float> dx) {
  const std::int64_t n = static_cast<std::int64_t>(y.size());
#pragma omp parallel for simd schedule(static)
  for (std::int64_t i = 0; i < n; ++i) dx[i] = y[i] > 0.0f ? dy[i] : 0.0f;
}

void add_inplace(std::span<float> y, std::span<const float> x) {
  const std::int64_t n = static_cast<std::int64_t>(y.size());
#pragma omp parallel for simd schedule(static)
  for (std::int64_t i = 0; i < n; ++i) y[i] += x[i];
}

void maxpool_forward(const PoolGeometry& g, std::span<const float> x, std::span<float> y,
                     std::span<std::int32_t> argmax) {
  const int oh = g.out_height();
  const int ow = g.out_width();
  const std::int64_t in_plane = static_cast<std::int64_t>(g.in_height) * g.in_width;
  const std::int64_t out_plane = static_cast<std::int64_t>(oh) * ow;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < g.planes(); ++p) {
    const float* src = x.data() + p * in_plane;
    float* dst = y.data() + p * out_plane;
    std::int32_t* arg = argmax.data() + p * out_plane;
    for (int oy = 0; oy < oh; ++oy) {
      const int y0 = std::max(0, oy * g.stride - g.pad);
      const int y1 = std::min(g.in_height, oy * g.stride - g.pad + g.kernel);
      for (int ox = 0; ox < ow; ++ox) {
        const int x0 = std::max(0, ox * g.stride - g.pad);
        const int x1 = std::min(g.in_width, ox * g.stride - g.pad + g.kernel);
        float best = -std::numeric_limits<float>::infinity();
        std::int32_t best_index = y0 * g.in_width + x0;
        for (int iy = y0; iy < y1; ++iy) {
          for (int ix = x0; ix < x1; ++ix) {
            const float v = src[iy * g.in_width + ix];
            if (v > best) {
              best = v;
              best_index = iy * g.in_width + ix;
            }
          }
        }
        dst[oy * ow + ox] = best;
        arg[oy * ow + ox] = best_index;
      }
    }
  }
}

void maxpool_backward(const PoolGeometry& g, std::span<const float> dy,
                      std::span<const std::int32_t> argmax, std::span<float> dx) {
  const std::int64_t in_plane = static_cast<std::int64_t>(g.in_height) * g.in_width;
  const std::int64_t out_plane = static_cast<std::int64_t>(g.out_height()) * g.out_width();
  std::fill(dx.begin(), dx.end(), 0.0f);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < g.planes(); ++p) {
    float* dst = dx.data() + p * in_plane;
    const float* src = dy.data() + p * out_plane;
    const std::int32_t* arg = argmax.data() + p * out_plane;
    for (std::int64_t i = 0; i < out_plane; ++i) dst[arg[i]] += src[i];
  }
}

void global_avgpool_forward(int channels, int batch, std::int64_t plane, std::span<const float> x,
                            std::span<float> y) {
  const std::int64_t planes = static_cast<std::int64_t>(channels) * batch;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const float* src = x.data() + p * plane;
    double sum = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) sum += src[i];
    y[p] = static_cast<float>(sum / static_cast<double>(plane));
  }
}

void global_avgpool_backward(int channels, int batch, std::int64_t plane, std::span<const float> dy,
                             std::span<float> dx) {
  const std::int64_t planes = static_cast<std::int64_t>(channels) * batch;
  const float inv = 1.0f / static_cast<float>(plane);
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    std::fill_n(dx.data() + p * plane, plane, dy[p] * inv);
  }
}

void pool_interleaved_to_cnhw(std::span<const float> image, int height, int width, int channels,
                              int factor, int batch, int index, std::span<float> out) {
  const int ph = height / factor;
  const int pw = width / factor;
  const std::int64_t plane = static_cast<std::int64_t>(ph) * pw;
  const float inv = 1.0f / static_cast<float>(factor * factor);
#pragma omp parallel for schedule(static)
  for (int py = 0; py < ph; ++py) {
    std::vector<double> acc(static_cast<std::size_t>(pw) * channels);
    for (int dy = 0; dy < factor; ++dy) {
      const float* row = image.data() + static_cast<std::int64_t>(py * factor + dy) * width * channels;
      for (int px = 0; px < pw; ++px) {
        double* a = acc.data() + static_cast<std::size_t>(px) * channels;
        const float* cell = row + static_cast<std::int64_t>(px) * factor * channels;
        for (int dx = 0; dx < factor; ++dx) {
          for (int c = 0; c < channels; ++c) a[c] += cell[dx * channels + c];
        }
      }
    }
    for (int c = 0; c < channels; ++c) {
      float* dst = out.data() + (static_cast<std::int64_t>(c) * batch + index) * plane +
                   static_cast<std::int64_t>(py) * pw;
      for (int px = 0; px < pw; ++px) {
        dst[px] = static_cast<float>(acc[static_cast<std::size_t>(px) * channels + c]) * inv;
      }
    }
  }
}

void unpool_cnhw_to_interleaved(std::span<const float> pooled, int height, int width, int channels,
                                int factor, int batch, int index, std::span<float> image) {
  const int ph = height / factor;
  const int pw = width / factor;
  const std::int64_t plane = static_cast<std::int64_t>(ph) * pw;
  const float inv = 1.0f / static_cast<float>(factor * factor);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < height; ++y) {
    const int py = y / factor;
    float* row = image.data() + static_cast<std::int64_t>(y) * width * channels;
    for (int x = 0; x < width; ++x) {
      const int px = x / factor;
      for (int c = 0; c < channels; ++c) {
        row[x * channels + c] =
            pooled[(static_cast<std::int64_t>(c) * batch + index) * plane + static_cast<std::int64_t>(py) * pw + px] * inv;
      }
    }
  }
}

void squared_distances(std::span<const float> matrix, int rows, int dim, std::span<const float> query,
                       std::span<double> out) {
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const float* v = matrix.data() + static_cast<std::int64_t>(r) * dim;
    double acc = 0.0;
    for (int d = 0; d < dim; ++d) {
      const double diff = static_cast<double>(v[d]) - static_cast<double>(query[d]);
      acc += diff * diff;
    }
    out[r] = acc;
  }
}

}  // namespace tap::kernels
