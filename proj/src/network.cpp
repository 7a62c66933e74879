#include "tap/network.hpp"

#include <cmath>

#include "tap/common.hpp"

namespace tap::nn {
namespace {

constexpr float kBnEps = 1e-5f;

Tensor like(const Tensor& t) { return Tensor(t.channels, t.batch, t.height, t.width); }

}  // namespace

ArchConfig ArchConfig::paper() { return ArchConfig{}; }

ArchConfig ArchConfig::desk() {
  ArchConfig arch;
  arch.input_pool = 20;
  arch.widths = {16, 32, 64, 512};
  return arch;
}

void ArchConfig::validate() const {
  if (input_pool < 1 || input_height % input_pool != 0 || input_width % input_pool != 0) {
    throw Error("invalid_arch", "input_pool must divide the input height and width");
  }
  if (input_channels != 4) throw Error("invalid_arch", "the classifier consumes RGB plus mask (4 channels)");
  for (int w : widths) {
    if (w < 1) throw Error("invalid_arch", "stage widths must be positive");
  }
  if (stem_kernel < 1 || stem_kernel % 2 == 0) throw Error("invalid_arch", "stem kernel must be odd");
  if (blocks_per_stage < 1 || classes < 2) throw Error("invalid_arch", "invalid block or class count");
}

ResNet::ResNet(const ArchConfig& arch, std::uint64_t seed) : arch_(arch) {
  arch_.validate();
  stem_ = make_conv_bn("stem", arch_.input_channels, arch_.widths[0], arch_.stem_kernel, 2,
                       arch_.stem_kernel / 2);
  int in = arch_.widths[0];
  for (int stage = 0; stage < 4; ++stage) {
    const int out = arch_.widths[static_cast<std::size_t>(stage)];
    for (int b = 0; b < arch_.blocks_per_stage; ++b) {
      const int stride = (stage > 0 && b == 0) ? 2 : 1;
      const std::string name = "stage" + std::to_string(stage + 1) + ".block" + std::to_string(b);
      Block block;
      block.a = make_conv_bn(name + ".a", in, out, 3, stride, 1);
      block.b = make_conv_bn(name + ".b", out, out, 3, 1, 1);
      if (stride != 1 || in != out) {
        block.has_down = true;
        block.down = make_conv_bn(name + ".down", in, out, 1, stride, 0);
      }
      blocks_.push_back(block);
      in = out;
    }
  }
  fc_weight_ = add_param("head.fc.weight", {arch_.classes, in},
                         std::vector<float>(static_cast<std::size_t>(arch_.classes) * in));
  fc_bias_ = add_param("head.fc.bias", {arch_.classes}, std::vector<float>(static_cast<std::size_t>(arch_.classes)));

  // Kaiming-normal (fan-out) convolutions, unit BN scale, uniform head.
  Rng rng(seed);
  for (Param& p : params_) {
    if (p.name.ends_with(".conv")) {
      const int fan_out = p.shape[0] * p.shape[2] * p.shape[3];
      const double stddev = std::sqrt(2.0 / fan_out);
      for (float& v : p.value) v = static_cast<float>(stddev * rng.normal());
    } else if (p.name.ends_with(".gamma")) {
      for (float& v : p.value) v = 1.0f;
    } else if (p.name.starts_with("head.fc")) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      for (float& v : p.value) v = static_cast<float>(rng.uniform(-bound, bound));
    }
  }
}

int ResNet::add_param(std::string name, std::vector<int> shape, std::vector<float> value) {
  params_.push_back(Param{std::move(name), std::move(shape), std::move(value)});
  return static_cast<int>(params_.size()) - 1;
}

int ResNet::add_buffer(std::string name, std::vector<int> shape, float fill) {
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  buffers_.push_back(Param{std::move(name), std::move(shape), std::vector<float>(n, fill)});
  return static_cast<int>(buffers_.size()) - 1;
}

ResNet::ConvBn ResNet::make_conv_bn(const std::string& name, int in, int out, int kernel, int stride,
                                    int pad) {
  ConvBn unit;
  unit.geometry.in_channels = in;
  unit.geometry.out_channels = out;
  unit.geometry.kernel = kernel;
  unit.geometry.stride = stride;
  unit.geometry.pad = pad;
  unit.weight = add_param(name + ".conv", {out, in, kernel, kernel},
                          std::vector<float>(static_cast<std::size_t>(out) * in * kernel * kernel));
  unit.gamma = add_param(name + ".gamma", {out}, std::vector<float>(static_cast<std::size_t>(out)));
  unit.beta = add_param(name + ".beta", {out}, std::vector<float>(static_cast<std::size_t>(out)));
  unit.running_mean = add_buffer(name + ".running_mean", {out}, 0.0f);
  unit.running_var = add_buffer(name + ".running_var", {out}, 1.0f);
  return unit;
}

Gradients ResNet::zero_gradients() const {
  Gradients grads;
  grads.reserve(params_.size());
  for (const Param& p : params_) grads.emplace_back(p.value.size(), 0.0f);
  return grads;
}

std::int64_t ResNet::parameter_count() const {
  std::int64_t n = 0;
  for (const Param& p : params_) n += static_cast<std::int64_t>(p.value.size());
  return n;
}

Tensor ResNet::conv_bn_forward(const ConvBn& unit, const Tensor& x, Mode mode, ConvBnTape* tape) const {
  kernels::ConvGeometry g = unit.geometry;
  g.batch = x.batch;
  g.in_height = x.height;
  g.in_width = x.width;
  Tensor conv(g.out_channels, g.batch, g.out_height(), g.out_width());
  kernels::conv2d_forward(g, x.span(), params_[static_cast<std::size_t>(unit.weight)].value, conv.span());

  const int channels = g.out_channels;
  const auto& gamma = params_[static_cast<std::size_t>(unit.gamma)].value;
  const auto& beta = params_[static_cast<std::size_t>(unit.beta)].value;
  BatchStats stats;
  stats.mean.resize(static_cast<std::size_t>(channels));
  stats.inv_std.resize(static_cast<std::size_t>(channels));
  stats.variance.resize(static_cast<std::size_t>(channels));
  Tensor y = like(conv);
  if (mode == Mode::kTrain) {
    kernels::batchnorm_forward_train(channels, conv.per_channel(), conv.span(), gamma, beta, kBnEps, y.span(),
                                     stats.mean, stats.inv_std, stats.variance);
  } else {
    const auto& rm = buffers_[static_cast<std::size_t>(unit.running_mean)].value;
    const auto& rv = buffers_[static_cast<std::size_t>(unit.running_var)].value;
    for (int c = 0; c < channels; ++c) {
      stats.mean[static_cast<std::size_t>(c)] = rm[static_cast<std::size_t>(c)];
      stats.variance[static_cast<std::size_t>(c)] = rv[static_cast<std::size_t>(c)];
      stats.inv_std[static_cast<std::size_t>(c)] = 1.0f / std::sqrt(rv[static_cast<std::size_t>(c)] + kBnEps);
    }
    kernels::batchnorm_forward_affine(channels, conv.per_channel(), conv.span(), gamma, beta, stats.mean,
                                      stats.inv_std, y.span());
  }
  if (tape != nullptr) {
    tape->conv = std::move(conv);
    tape->stats = std::move(stats);
  }
  return y;
}

Tensor ResNet::conv_bn_backward(const ConvBn& unit, const Tensor& x, const ConvBnTape& record, Mode mode,
                                Tensor d_bn_out, Gradients* grads) const {
  kernels::ConvGeometry g = unit.geometry;
  g.batch = x.batch;
  g.in_height = x.height;
  g.in_width = x.width;
  const int channels = g.out_channels;
  const auto& gamma = params_[static_cast<std::size_t>(unit.gamma)].value;
  Tensor d_conv = like(record.conv);
  std::span<float> dgamma;
  std::span<float> dbeta;
  if (grads != nullptr) {
    dgamma = (*grads)[static_cast<std::size_t>(unit.gamma)];
    dbeta = (*grads)[static_cast<std::size_t>(unit.beta)];
  }
  if (mode == Mode::kTrain) {
    kernels::batchnorm_backward_train(channels, record.conv.per_channel(), record.conv.span(), d_bn_out.span(),
                                      gamma, record.stats.mean, record.stats.inv_std, d_conv.span(), dgamma,
                                      dbeta);
  } else {
    kernels::batchnorm_backward_affine(channels, record.conv.per_channel(), record.conv.span(), d_bn_out.span(),
                                       gamma, record.stats.mean, record.stats.inv_std, d_conv.span(), dgamma,
                                       dbeta);
  }
  if (grads != nullptr) {
    kernels::conv2d_backward_weight(g, x.span(), d_conv.span(), (*grads)[static_cast<std::size_t>(unit.weight)]);
  }
  Tensor dx = like(x);
  kernels::conv2d_backward_data(g, d_conv.span(), params_[static_cast<std::size_t>(unit.weight)].value, dx.span());
  return dx;
}

ResNet::Output ResNet::forward(const Tensor& input, Mode mode, Tape* tape) const {
  if (input.channels != arch_.input_channels || input.height != arch_.pooled_height() ||
      input.width != arch_.pooled_width()) {
    throw Error("shape_mismatch", "network input does not match the architecture's pooled input shape");
  }
  Tape scratch;
  Tape& t = tape != nullptr ? *tape : scratch;
  t.mode = mode;
  t.blocks.assign(blocks_.size(), BlockTape{});
  if (tape != nullptr) t.input = input;

  Tensor stem = conv_bn_forward(stem_, input, mode, &t.stem);
  kernels::relu_inplace(stem.span());
  kernels::PoolGeometry pg{stem.channels, stem.batch, stem.height, stem.width, 3, 2, 1};
  Tensor pooled(stem.channels, stem.batch, pg.out_height(), pg.out_width());
  std::vector<std::int32_t> argmax(pooled.size());
  kernels::maxpool_forward(pg, stem.span(), pooled.span(), argmax);
  if (tape != nullptr) {
    t.stem_act = std::move(stem);
    t.pool_argmax = std::move(argmax);
    t.stem_pool = pooled;
  } else {
    t.stem = {};
  }

  Tensor x = std::move(pooled);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const Block& block = blocks_[i];
    BlockTape& bt = t.blocks[i];
    Tensor a = conv_bn_forward(block.a, x, mode, tape != nullptr ? &bt.a : nullptr);
    kernels::relu_inplace(a.span());
    Tensor out = conv_bn_forward(block.b, a, mode, tape != nullptr ? &bt.b : nullptr);
    if (block.has_down) {
      Tensor shortcut = conv_bn_forward(block.down, x, mode, tape != nullptr ? &bt.down : nullptr);
      kernels::add_inplace(out.span(), shortcut.span());
    } else {
      kernels::add_inplace(out.span(), x.span());
    }
    kernels::relu_inplace(out.span());
    if (tape != nullptr) {
      bt.act_a = std::move(a);
      bt.out = out;
    }
    x = std::move(out);
  }

  Output result;
  result.embedding = Tensor(x.channels, x.batch, 1, 1);
  kernels::global_avgpool_forward(x.channels, x.batch, x.plane(), x.span(), result.embedding.span());
  result.logits = Tensor(arch_.classes, x.batch, 1, 1);
  const auto& w = params_[static_cast<std::size_t>(fc_weight_)].value;
  const auto& bias = params_[static_cast<std::size_t>(fc_bias_)].value;
  for (int k = 0; k < arch_.classes; ++k) {
    for (int n = 0; n < x.batch; ++n) result.logits.data[static_cast<std::size_t>(k * x.batch + n)] = bias[static_cast<std::size_t>(k)];
  }
  kernels::gemm(false, false, arch_.classes, x.batch, x.channels, 1.0f, w.data(), x.channels,
                result.embedding.data.data(), x.batch, 1.0f, result.logits.data.data(), x.batch);
  if (tape != nullptr) t.embedding = result.embedding;
  return result;
}

void ResNet::backward(const Tape& tape, const Tensor& d_logits, const Tensor* d_embedding, Gradients* grads,
                      Tensor* d_input) const {
  const int batch = d_logits.batch;
  const int dim = arch_.embedding_dim();
  const auto& w = params_[static_cast<std::size_t>(fc_weight_)].value;
  Tensor d_emb(dim, batch, 1, 1);
  if (d_embedding != nullptr) d_emb.data = d_embedding->data;
  kernels::gemm(true, false, dim, batch, arch_.classes, 1.0f, w.data(), dim, d_logits.data.data(), batch, 1.0f,
                d_emb.data.data(), batch);
  if (grads != nullptr) {
    kernels::gemm(false, true, arch_.classes, dim, batch, 1.0f, d_logits.data.data(), batch,
                  tape.embedding.data.data(), batch, 1.0f, (*grads)[static_cast<std::size_t>(fc_weight_)].data(), dim);
    auto& db = (*grads)[static_cast<std::size_t>(fc_bias_)];
    for (int k = 0; k < arch_.classes; ++k) {
      for (int n = 0; n < batch; ++n) db[static_cast<std::size_t>(k)] += d_logits.data[static_cast<std::size_t>(k * batch + n)];
    }
  }

  const Tensor& last = tape.blocks.back().out;
  Tensor d_x = like(last);
  kernels::global_avgpool_backward(last.channels, last.batch, last.plane(), d_emb.span(), d_x.span());

  for (std::size_t i = blocks_.size(); i-- > 0;) {
    const Block& block = blocks_[i];
    const BlockTape& bt = tape.blocks[i];
    const Tensor& block_input = i == 0 ? tape.stem_pool : tape.blocks[i - 1].out;
    Tensor d_sum = like(bt.out);
    kernels::relu_backward(bt.out.span(), d_x.span(), d_sum.span());

    Tensor d_act_a = conv_bn_backward(block.b, bt.act_a, bt.b, tape.mode, d_sum, grads);
    kernels::relu_backward(bt.act_a.span(), d_act_a.span(), d_act_a.span());
    Tensor d_in = conv_bn_backward(block.a, block_input, bt.a, tape.mode, std::move(d_act_a), grads);
    if (block.has_down) {
      Tensor d_short = conv_bn_backward(block.down, block_input, bt.down, tape.mode, std::move(d_sum), grads);
      kernels::add_inplace(d_in.span(), d_short.span());
    } else {
      kernels::add_inplace(d_in.span(), d_sum.span());
    }
    d_x = std::move(d_in);
  }

  Tensor d_act = like(tape.stem_act);
  kernels::PoolGeometry pg{d_act.channels, d_act.batch, d_act.height, d_act.width, 3, 2, 1};
  kernels::maxpool_backward(pg, d_x.span(), tape.pool_argmax, d_act.span());
  kernels::relu_backward(tape.stem_act.span(), d_act.span(), d_act.span());
  Tensor d_in = conv_bn_backward(stem_, tape.input, tape.stem, tape.mode, std::move(d_act), grads);
  if (d_input != nullptr) *d_input = std::move(d_in);
}

void ResNet::update_running_stats(const Tape& tape, float momentum) {
  if (tape.mode != Mode::kTrain) return;
  auto fold = [&](const ConvBn& unit, const ConvBnTape& record) {
    auto& rm = buffers_[static_cast<std::size_t>(unit.running_mean)].value;
    auto& rv = buffers_[static_cast<std::size_t>(unit.running_var)].value;
    const double count = static_cast<double>(record.conv.per_channel());
    const double unbias = count > 1 ? count / (count - 1) : 1.0;
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = (1.0f - momentum) * rm[c] + momentum * record.stats.mean[c];
      rv[c] = (1.0f - momentum) * rv[c] + momentum * static_cast<float>(record.stats.variance[c] * unbias);
    }
  };
  fold(stem_, tape.stem);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    fold(blocks_[i].a, tape.blocks[i].a);
    fold(blocks_[i].b, tape.blocks[i].b);
    if (blocks_[i].has_down) fold(blocks_[i].down, tape.blocks[i].down);
  }
}

}  // namespace tap::nn
