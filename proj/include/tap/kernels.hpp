#pragma once

// Dense kernels behind the classifier. Activations use channel-major CNHW
// layout ([channels][batch][height][width]) so that a convolution over a
// whole batch is a single GEMM and batch-norm statistics are contiguous.
//
// tap::kernels holds the OpenMP-parallel versions used at run time;
// tap::kernels::reference holds direct serial loops with the same
// signatures, kept for tests and benchmarks.

#include <cstdint>
#include <span>

namespace tap::kernels {

struct ConvGeometry {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int batch = 1;
  int in_height = 0;
  int in_width = 0;

  int out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
  std::int64_t patch_size() const { return static_cast<std::int64_t>(in_channels) * kernel * kernel; }
  std::int64_t input_size() const {
    return static_cast<std::int64_t>(in_channels) * batch * in_height * in_width;
  }
  std::int64_t output_size() const {
    return static_cast<std::int64_t>(out_channels) * batch * out_height() * out_width();
  }
  std::int64_t weight_size() const { return out_channels * patch_size(); }
};

struct PoolGeometry {
  int channels = 0;
  int batch = 1;
  int in_height = 0;
  int in_width = 0;
  int kernel = 3;
  int stride = 2;
  int pad = 1;

  int out_height() const { return (in_height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (in_width + 2 * pad - kernel) / stride + 1; }
  std::int64_t planes() const { return static_cast<std::int64_t>(channels) * batch; }
  std::int64_t output_size() const { return planes() * out_height() * out_width(); }
};

// Row-major C = alpha * op(A) * op(B) + beta * C.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);

// weight is [out_channels][in_channels * k * k].
void conv2d_forward(const ConvGeometry& g, std::span<const float> x, std::span<const float> weight,
                    std::span<float> y);
// Overwrites dx.
void conv2d_backward_data(const ConvGeometry& g, std::span<const float> dy,
                          std::span<const float> weight, std::span<float> dx);
// Accumulates into dweight.
void conv2d_backward_weight(const ConvGeometry& g, std::span<const float> x,
                            std::span<const float> dy, std::span<float> dweight);

// Batch statistics over each contiguous channel slab of `per_channel` values.
// Writes the per-channel mean and inverse standard deviation (biased
// variance) for the backward pass, and the biased variance itself.
void batchnorm_forward_train(int channels, std::int64_t per_channel, std::span<const float> x,
                             std::span<const float> gamma, std::span<const float> beta, float eps,
                             std::span<float> y, std::span<float> mean, std::span<float> inv_std,
                             std::span<float> variance);
// Affine normalization with fixed statistics (inference). inv_std supplied.
void batchnorm_forward_affine(int channels, std::int64_t per_channel, std::span<const float> x,
                              std::span<const float> gamma, std::span<const float> beta,
                              std::span<const float> mean, std::span<const float> inv_std,
                              std::span<float> y);
// Gradient through batch statistics. Accumulates dgamma/dbeta, overwrites dx.
void batchnorm_backward_train(int channels, std::int64_t per_channel, std::span<const float> x,
                              std::span<const float> dy, std::span<const float> gamma,
                              std::span<const float> mean, std::span<const float> inv_std,
                              std::span<float> dx, std::span<float> dgamma, std::span<float> dbeta);
// Gradient with statistics held fixed. dgamma/dbeta may be empty.
void batchnorm_backward_affine(int channels, std::int64_t per_channel, std::span<const float> x,
                               std::span<const float> dy, std::span<const float> gamma,
                               std::span<const float> mean, std::span<const float> inv_std,
                               std::span<float> dx, std::span<float> dgamma,
                               std::span<float> dbeta);

void relu_inplace(std::span<float> x);
// dx = dy where y > 0 else 0. dx may alias dy.
void relu_backward(std::span<const float> y, std::span<const float> dy, std::span<float> dx);
void add_inplace(std::span<float> y, std::span<const float> x);

// Max pooling with argmax indices into each input plane.
void maxpool_forward(const PoolGeometry& g, std::span<const float> x, std::span<float> y,
                     std::span<std::int32_t> argmax);
void maxpool_backward(const PoolGeometry& g, std::span<const float> dy,
                      std::span<const std::int32_t> argmax, std::span<float> dx);

// x is [channels][batch][plane], y is [channels][batch].
void global_avgpool_forward(int channels, int batch, std::int64_t plane, std::span<const float> x,
                            std::span<float> y);
void global_avgpool_backward(int channels, int batch, std::int64_t plane, std::span<const float> dy,
                             std::span<float> dx);

// Average pooling of one interleaved height x width x channels image by an
// integer factor, written into sample `index` of a CNHW tensor holding
// `batch` samples.
void pool_interleaved_to_cnhw(std::span<const float> image, int height, int width, int channels,
                              int factor, int batch, int index, std::span<float> out);
// Adjoint of pool_interleaved_to_cnhw: spreads sample `index` of a pooled
// CNHW gradient back over the interleaved full-resolution grid (overwrites).
void unpool_cnhw_to_interleaved(std::span<const float> pooled, int height, int width, int channels,
                                int factor, int batch, int index, std::span<float> image);

// Squared Euclidean distance from query to each row of a rows x dim matrix,
// accumulated in double in index order.
void squared_distances(std::span<const float> matrix, int rows, int dim, std::span<const float> query,
                       std::span<double> out);

namespace reference {

void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);
void conv2d_forward(const ConvGeometry& g, std::span<const float> x, std::span<const float> weight,
                    std::span<float> y);
void conv2d_backward_data(const ConvGeometry& g, std::span<const float> dy,
                          std::span<const float> weight, std::span<float> dx);
void conv2d_backward_weight(const ConvGeometry& g, std::span<const float> x,
                            std::span<const float> dy, std::span<float> dweight);
void batchnorm_forward_train(int channels, std::int64_t per_channel, std::span<const float> x,
                             std::span<const float> gamma, std::span<const float> beta, float eps,
                             std::span<float> y, std::span<float> mean, std::span<float> inv_std,
                             std::span<float> variance);
void batchnorm_backward_train(int channels, std::int64_t per_channel, std::span<const float> x,
                              std::span<const float> dy, std::span<const float> gamma,
                              std::span<const float> mean, std::span<const float> inv_std,
                              std::span<float> dx, std::span<float> dgamma, std::span<float> dbeta);
void maxpool_forward(const PoolGeometry& g, std::span<const float> x, std::span<float> y,
                     std::span<std::int32_t> argmax);
void pool_interleaved_to_cnhw(std::span<const float> image, int height, int width, int channels,
                              int factor, int batch, int index, std::span<float> out);
void squared_distances(std::span<const float> matrix, int rows, int dim, std::span<const float> query,
                       std::span<double> out);

}  // namespace reference
}  // namespace tap::kernels
