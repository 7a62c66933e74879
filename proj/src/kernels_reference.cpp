#include <algorithm>
#include <cmath>
#include <limits>

#include "tap/kernels.hpp"

namespace tap::kernels::reference {
namespace {

std::int64_t cnhw(const ConvGeometry& g, int c, int n, int y, int x) {
  return ((static_cast<std::int64_t>(c) * g.batch + n) * g.in_height + y) * g.in_width + x;
}

std::int64_t out_cnhw(const ConvGeometry& g, int c, int n, int y, int x) {
  return ((static_cast<std::int64_t>(c) * g.batch + n) * g.out_height() + y) * g.out_width() + x;
}

std::int64_t weight_index(const ConvGeometry& g, int o, int c, int ky, int kx) {
  return ((static_cast<std::int64_t>(o) * g.in_channels + c) * g.kernel + ky) * g.kernel + kx;
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) {
        const float av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const float bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += static_cast<double>(av) * bv;
      }
      float& out = c[i * ldc + j];
      out = static_cast<float>(alpha * acc + (beta == 0.0f ? 0.0 : beta * out));
    }
  }
}

void conv2d_forward(const ConvGeometry& g, std::span<const float> x, std::span<const float> weight,
                    std::span<float> y) {
  for (int o = 0; o < g.out_channels; ++o)
    for (int n = 0; n < g.batch; ++n)
      for (int oy = 0; oy < g.out_height(); ++oy)
        for (int ox = 0; ox < g.out_width(); ++ox) {
          double acc = 0.0;
          for (int c = 0; c < g.in_channels; ++c)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int iy = oy * g.stride - g.pad + ky;
                const int ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
                acc += static_cast<double>(x[cnhw(g, c, n, iy, ix)]) * weight[weight_index(g, o, c, ky, kx)];
              }
          y[out_cnhw(g, o, n, oy, ox)] = static_cast<float>(acc);
        }
}

void conv2d_backward_data(const ConvGeometry& g, std::span<const float> dy,
                          std::span<const float> weight, std::span<float> dx) {
  std::fill(dx.begin(), dx.end(), 0.0f);
  for (int o = 0; o < g.out_channels; ++o)
    for (int n = 0; n < g.batch; ++n)
      for (int oy = 0; oy < g.out_height(); ++oy)
        for (int ox = 0; ox < g.out_width(); ++ox) {
          const float d = dy[out_cnhw(g, o, n, oy, ox)];
          for (int c = 0; c < g.in_channels; ++c)
            for (int ky = 0; ky < g.kernel; ++ky)
              for (int kx = 0; kx < g.kernel; ++kx) {
                const int iy = oy * g.stride - g.pad + ky;
                const int ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
                dx[cnhw(g, c, n, iy, ix)] += d * weight[weight_index(g, o, c, ky, kx)];
              }
        }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const float> x,
                            std::span<const float> dy, std::span<float> dweight) {
  for (int o = 0; o < g.out_channels; ++o)
    for (int c = 0; c < g.in_channels; ++c)
      for (int ky = 0; ky < g.kernel; ++ky)
        for (int kx = 0; kx < g.kernel; ++kx) {
          double acc = 0.0;
          for (int n = 0; n < g.batch; ++n)
            for (int oy = 0; oy < g.out_height(); ++oy)
              for (int ox = 0; ox < g.out_width(); ++ox) {
                const int iy = oy * g.stride - g.pad + ky;
                const int ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
                acc += static_cast<double>(x[cnhw(g, c, n, iy, ix)]) * dy[out_cnhw(g, o, n, oy, ox)];
              }
          dweight[weight_index(g, o, c, ky, kx)] += static_cast<float>(acc);
        }
}

void batchnorm_forward_train(int channels, std::int64_t per_channel, std::span<const float> x,
                             std::span<const float> gamma, std::span<const float> beta, float eps,
                             std::span<float> y, std::span<float> mean, std::span<float> inv_std,
                             std::span<float> variance) {
  for (int c = 0; c < channels; ++c) {
    double sum = 0.0;
    for (std::int64_t i = 0; i < per_channel; ++i) sum += x[c * per_channel + i];
    const double mu = sum / per_channel;
    double sq = 0.0;
    for (std::int64_t i = 0; i < per_channel; ++i) {
      const double d = x[c * per_channel + i] - mu;
      sq += d * d;
    }
    const double var = sq / per_channel;
    const double is = 1.0 / std::sqrt(var + eps);
    mean[c] = static_cast<float>(mu);
    inv_std[c] = static_cast<float>(is);
    variance[c] = static_cast<float>(var);
    for (std::int64_t i = 0; i < per_channel; ++i) {
      y[c * per_channel + i] = static_cast<float>(gamma[c] * (x[c * per_channel + i] - mu) * is + beta[c]);
    }
  }
}

void batchnorm_backward_train(int channels, std::int64_t per_channel, std::span<const float> x,
                              std::span<const float> dy, std::span<const float> gamma,
                              std::span<const float> mean, std::span<const float> inv_std,
                              std::span<float> dx, std::span<float> dgamma, std::span<float> dbeta) {
  // Textbook form: dx = gamma*is/N * (N*dy - sum(dy) - xhat*sum(dy*xhat)).
  for (int c = 0; c < channels; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::int64_t i = 0; i < per_channel; ++i) {
      const double xhat = (x[c * per_channel + i] - mean[c]) * static_cast<double>(inv_std[c]);
      sum_dy += dy[c * per_channel + i];
      sum_dy_xhat += dy[c * per_channel + i] * xhat;
    }
    dgamma[c] += static_cast<float>(sum_dy_xhat);
    dbeta[c] += static_cast<float>(sum_dy);
    const double n = static_cast<double>(per_channel);
    for (std::int64_t i = 0; i < per_channel; ++i) {
      const double xhat = (x[c * per_channel + i] - mean[c]) * static_cast<double>(inv_std[c]);
      dx[c * per_channel + i] = static_cast<float>(
          gamma[c] * inv_std[c] / n * (n * dy[c * per_channel + i] - sum_dy - xhat * sum_dy_xhat));
    }
  }
}

void maxpool_forward(const PoolGeometry& g, std::span<const float> x, std::span<float> y,
                     std::span<std::int32_t> argmax) {
  std::int64_t out = 0;
  for (std::int64_t p = 0; p < g.planes(); ++p) {
    const float* src = x.data() + p * g.in_height * g.in_width;
    for (int oy = 0; oy < g.out_height(); ++oy) {
      for (int ox = 0; ox < g.out_width(); ++ox, ++out) {
        float best = -std::numeric_limits<float>::infinity();
        std::int32_t best_index = -1;
        for (int ky = 0; ky < g.kernel; ++ky) {
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int iy = oy * g.stride - g.pad + ky;
            const int ix = ox * g.stride - g.pad + kx;
            if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
            if (best_index < 0 || src[iy * g.in_width + ix] > best) {
              best = src[iy * g.in_width + ix];
              best_index = iy * g.in_width + ix;
            }
          }
        }
        y[out] = best;
        argmax[out] = best_index;
      }
    }
  }
}

void pool_interleaved_to_cnhw(std::span<const float> image, int height, int width, int channels,
                              int factor, int batch, int index, std::span<float> out) {
  const int ph = height / factor;
  const int pw = width / factor;
  for (int c = 0; c < channels; ++c)
    for (int py = 0; py < ph; ++py)
      for (int px = 0; px < pw; ++px) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) {
            const int y = py * factor + dy;
            const int x = px * factor + dx;
            acc += image[(static_cast<std::int64_t>(y) * width + x) * channels + c];
          }
        out[((static_cast<std::int64_t>(c) * batch + index) * ph + py) * pw + px] =
            static_cast<float>(acc / (factor * factor));
      }
}

void squared_distances(std::span<const float> matrix, int rows, int dim, std::span<const float> query,
                       std::span<double> out) {
  for (int r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int d = 0; d < dim; ++d) {
      const double diff = static_cast<double>(matrix[static_cast<std::int64_t>(r) * dim + d]) - query[d];
      acc += diff * diff;
    }
    out[r] = acc;
  }
}

}  // namespace tap::kernels::reference
