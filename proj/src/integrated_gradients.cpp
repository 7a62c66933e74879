#include <cmath>

#include "tap/attribution.hpp"
#include "tap/kernels.hpp"

namespace tap::attr {

ClassifierTarget::ClassifierTarget(const model::Classifier& model, int target_class)
    : model_(model), target_(target_class) {
  if (target_class < 0 || target_class >= model.arch().classes) {
    throw Error("invalid_target", "target class " + std::to_string(target_class) + " out of range");
  }
}

void ClassifierTarget::evaluate(std::span<const float> rgb, int batch, std::span<const float> mask,
                                std::span<double> values, std::span<float> grad) const {
  const std::size_t image = static_cast<std::size_t>(model::kInputHeight) * model::kInputWidth * 3;
  const int ph = model_.arch().pooled_height();
  const int pw = model_.arch().pooled_width();
  nn::Tensor pooled(4, batch, ph, pw);
  for (int b = 0; b < batch; ++b) model_.pool_into(rgb.subspan(b * image, image), mask, pooled, b);

  const bool want_grad = !grad.empty();
  nn::Tape tape;
  const auto out = model_.network().forward(pooled, nn::Mode::kInference, want_grad ? &tape : nullptr);
  for (int b = 0; b < batch; ++b) values[b] = out.logits.data[static_cast<std::size_t>(target_ * batch + b)];
  if (!want_grad) return;

  nn::Tensor d_logits(model_.arch().classes, batch, 1, 1);
  for (int b = 0; b < batch; ++b) d_logits.data[static_cast<std::size_t>(target_ * batch + b)] = 1.0f;
  nn::Tensor d_input;
  model_.network().backward(tape, d_logits, nullptr, nullptr, &d_input);
  const auto rgb_grad = std::span<const float>(d_input.data).first(static_cast<std::size_t>(3 * d_input.per_channel()));
  for (int b = 0; b < batch; ++b) {
    kernels::unpool_cnhw_to_interleaved(rgb_grad, model::kInputHeight, model::kInputWidth, 3,
                                        model_.arch().input_pool, batch, b, grad.subspan(b * image, image));
  }
}

double PixelAttribution::total() const {
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

double PixelAttribution::completeness_error() const {
  const double diff = input_value - baseline_value;
  const double gap = std::abs(total() - diff);
  return diff != 0.0 ? gap / std::abs(diff) : gap;
}

PixelAttribution integrated_gradients(const Differentiable& f, std::span<const float> input,
                                      std::span<const float> baseline, std::span<const float> mask, int steps) {
  if (steps < 1) throw Error("invalid_steps", "steps must be at least 1, got " + std::to_string(steps), "steps");
  const int h = f.height();
  const int w = f.width();
  const std::size_t n = static_cast<std::size_t>(h) * w * 3;
  if (input.size() != n || baseline.size() != n) {
    throw Error("shape_mismatch", "input and baseline must be " + std::to_string(h) + "x" + std::to_string(w) + "x3");
  }
  if (mask.size() != n / 3) throw Error("shape_mismatch", "mask must be " + std::to_string(h) + "x" + std::to_string(w));

  PixelAttribution out;
  out.height = h;
  out.width = w;
  out.steps = steps;

  {
    std::vector<float> ends(2 * n);
    std::copy(input.begin(), input.end(), ends.begin());
    std::copy(baseline.begin(), baseline.end(), ends.begin() + static_cast<std::ptrdiff_t>(n));
    double v[2];
    f.evaluate(ends, 2, mask, v, {});
    out.input_value = v[0];
    out.baseline_value = v[1];
  }

  const std::int64_t total = static_cast<std::int64_t>(n);
  std::vector<double> sum(n, 0.0);
  const int chunk = std::max(1, f.max_batch());
  std::vector<float> points(static_cast<std::size_t>(chunk) * n);
  std::vector<float> grad(points.size());
  std::vector<double> values(static_cast<std::size_t>(chunk));
  for (int k0 = 0; k0 < steps; k0 += chunk) {
    const int batch = std::min(chunk, steps - k0);
    for (int b = 0; b < batch; ++b) {
      const float alpha = static_cast<float>((k0 + b + 0.5) / steps);
      float* p = points.data() + static_cast<std::size_t>(b) * n;
#pragma omp parallel for simd schedule(static)
      for (std::int64_t i = 0; i < total; ++i) p[i] = baseline[i] + alpha * (input[i] - baseline[i]);
    }
    const auto used = static_cast<std::size_t>(batch) * n;
    f.evaluate(std::span<const float>(points).first(used), batch, mask, std::span<double>(values).first(batch),
               std::span<float>(grad).first(used));
    bool finite = true;
#pragma omp parallel for schedule(static) reduction(&& : finite)
    for (std::int64_t i = 0; i < total; ++i) {
      double acc = 0.0;
      for (int b = 0; b < batch; ++b) acc += grad[static_cast<std::size_t>(b) * n + i];
      finite = finite && std::isfinite(acc);
      sum[i] += acc;
    }
    if (!finite) {
      throw Error("non_finite_gradient", "non-finite gradient between path steps " + std::to_string(k0 + 1) + " and " +
                                             std::to_string(k0 + batch) + " of " + std::to_string(steps));
    }
  }

  out.channels.resize(n);
  out.values.assign(n / 3, 0.0);
  const std::int64_t pixels = total / 3;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < pixels; ++p) {
    double s = 0.0;
    for (int c = 0; c < 3; ++c) {
      const std::int64_t i = 3 * p + c;
      const double a = (static_cast<double>(input[i]) - baseline[i]) * sum[i] / steps;
      out.channels[i] = a;
      s += a;
    }
    out.values[p] = s;
  }
  return out;
}

std::vector<float> constant_baseline(const model::ModelInput& input, float level) {
  std::vector<float> b(input.rgb.size(), 0.0f);
  const BoundingBox content = input.transform.content_box();
  for (int y = content.y_min; y < content.y_max; ++y) {
    const auto row = static_cast<std::size_t>(y) * model::kInputWidth;
    std::fill(b.begin() + static_cast<std::ptrdiff_t>((row + content.x_min) * 3),
              b.begin() + static_cast<std::ptrdiff_t>((row + content.x_max) * 3), level);
  }
  return b;
}

PixelAttribution dual_baseline_attribution(const Differentiable& f, const model::ModelInput& input, int steps) {
  const auto mask = input.mask_values();
  PixelAttribution black = integrated_gradients(f, input.rgb, constant_baseline(input, 0.0f), mask, steps);
  const PixelAttribution white = integrated_gradients(f, input.rgb, constant_baseline(input, 1.0f), mask, steps);
  for (std::size_t i = 0; i < black.channels.size(); ++i) black.channels[i] = 0.5 * (black.channels[i] + white.channels[i]);
  for (std::size_t i = 0; i < black.values.size(); ++i) black.values[i] = 0.5 * (black.values[i] + white.values[i]);
  black.baseline_value = 0.5 * (black.baseline_value + white.baseline_value);
  return black;
}

}  // namespace tap::attr
