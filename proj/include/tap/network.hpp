#pragma once

// Residual network used by the tappability classifier: a fixed input
// average-pool, a 7x7 stem convolution with max pooling, four stages of two
// basic residual blocks (18 weighted layers including the head), global
// average pooling to the embedding, and a linear two-class head.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tap/kernels.hpp"

namespace tap::nn {

/// Dense float tensor in CNHW layout.
struct Tensor {
  int channels = 0;
  int batch = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int c, int n, int h, int w)
      : channels(c), batch(n), height(h), width(w), data(static_cast<std::size_t>(c) * n * h * w, 0.0f) {}

  std::int64_t plane() const { return static_cast<std::int64_t>(height) * width; }
  std::int64_t per_channel() const { return plane() * batch; }
  std::size_t size() const { return data.size(); }
  std::span<float> span() { return data; }
  std::span<const float> span() const { return data; }
  float& at(int c, int n, int y, int x) {
    return data[static_cast<std::size_t>(((static_cast<std::int64_t>(c) * batch + n) * height + y) * width + x)];
  }
  float at(int c, int n, int y, int x) const {
    return data[static_cast<std::size_t>(((static_cast<std::int64_t>(c) * batch + n) * height + y) * width + x)];
  }
};

struct ArchConfig {
  int input_height = 960;
  int input_width = 540;
  int input_channels = 4;
  // Fixed (parameter-free) average pooling applied to the input first.
  int input_pool = 1;
  std::array<int, 4> widths{64, 128, 256, 512};
  int stem_kernel = 7;
  int blocks_per_stage = 2;
  int classes = 2;

  // Full-resolution ResNet-18 widths.
  static ArchConfig paper();
  // 20x input pooling and narrow early stages; the final stage keeps 512
  // channels so embeddings stay 512-dimensional.
  static ArchConfig desk();

  int pooled_height() const { return input_height / input_pool; }
  int pooled_width() const { return input_width / input_pool; }
  int embedding_dim() const { return widths[3]; }
  // Throws tap::Error on inconsistent settings.
  void validate() const;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

enum class Mode { kTrain, kInference };

struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<float> value;
};

struct BatchStats {
  std::vector<float> mean;
  std::vector<float> inv_std;
  std::vector<float> variance;
};

struct ConvBnTape {
  Tensor conv;
  BatchStats stats;
};

struct BlockTape {
  ConvBnTape a;
  Tensor act_a;
  ConvBnTape b;
  ConvBnTape down;
  Tensor out;
};

// Intermediate activations of one forward pass, consumed by backward().
struct Tape {
  Mode mode = Mode::kInference;
  Tensor input;
  ConvBnTape stem;
  Tensor stem_act;
  Tensor stem_pool;
  std::vector<std::int32_t> pool_argmax;
  std::vector<BlockTape> blocks;
  Tensor embedding;
};

using Gradients = std::vector<std::vector<float>>;

class ResNet {
 public:
  struct Output {
    Tensor logits;     // [classes, N, 1, 1]
    Tensor embedding;  // [embedding_dim, N, 1, 1]
  };

  ResNet(const ArchConfig& arch, std::uint64_t seed);

  const ArchConfig& arch() const { return arch_; }

  // pooled_input is [input_channels, N, pooled_height, pooled_width]. When
  // tape is non-null it receives everything backward() needs.
  Output forward(const Tensor& pooled_input, Mode mode, Tape* tape) const;

  // Propagates d_logits (and optionally d_embedding) back through the
  // recorded pass. Parameter gradients are accumulated into *grads when
  // given; the pooled-input gradient is written to *d_input when given.
  void backward(const Tape& tape, const Tensor& d_logits, const Tensor* d_embedding, Gradients* grads,
                Tensor* d_input) const;

  // Folds the batch statistics of a training-mode tape into the running
  // statistics.
  void update_running_stats(const Tape& tape, float momentum);

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  std::vector<Param>& buffers() { return buffers_; }
  const std::vector<Param>& buffers() const { return buffers_; }
  Gradients zero_gradients() const;
  std::int64_t parameter_count() const;

 private:
  struct ConvBn {
    kernels::ConvGeometry geometry;  // batch and spatial size filled per call
    int weight = -1;
    int gamma = -1;
    int beta = -1;
    int running_mean = -1;
    int running_var = -1;
  };
  struct Block {
    ConvBn a;
    ConvBn b;
    bool has_down = false;
    ConvBn down;
  };

  ConvBn make_conv_bn(const std::string& name, int in, int out, int kernel, int stride, int pad);
  int add_param(std::string name, std::vector<int> shape, std::vector<float> value);
  int add_buffer(std::string name, std::vector<int> shape, float fill);

  Tensor conv_bn_forward(const ConvBn& unit, const Tensor& x, Mode mode, ConvBnTape* tape) const;
  // Returns dL/dx for the unit input; accumulates parameter grads.
  Tensor conv_bn_backward(const ConvBn& unit, const Tensor& x, const ConvBnTape& record, Mode mode,
                          Tensor d_bn_out, Gradients* grads) const;

  ArchConfig arch_;
  std::vector<Param> params_;
  std::vector<Param> buffers_;
  ConvBn stem_;
  std::vector<Block> blocks_;
  int fc_weight_ = -1;
  int fc_bias_ = -1;
};

}  // namespace tap::nn
