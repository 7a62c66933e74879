#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tap/common.hpp"
#include "tap/image.hpp"
#include "tap/network.hpp"

namespace tap::model {

inline constexpr int kInputHeight = 960;
inline constexpr int kInputWidth = 540;
// Class index of "tappable" in the two-way head.
inline constexpr int kTappableClass = 1;
inline constexpr int kSchemaVersion = 1;

/// Indicator of the half-open rectangle [y_min, y_max) x [x_min, x_max).
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;  // row-major

  std::uint8_t at(int row, int col) const { return values[static_cast<std::size_t>(row) * width + col]; }
  std::int64_t popcount() const;
};

// Throws Error{"degenerate_bbox" | "bbox_out_of_bounds"}.
BinaryMask build_mask(const BoundingBox& box, int height, int width);

// Aspect-preserving fit of a src_width x src_height screenshot into the
// model canvas, centered, with zero padding around the content.
struct TransformRecord {
  int src_width = 0;
  int src_height = 0;
  double scale_x = 1.0;  // content_width / src_width
  double scale_y = 1.0;  // content_height / src_height
  int offset_x = 0;
  int offset_y = 0;
  int content_width = kInputWidth;
  int content_height = kInputHeight;

  bool is_identity() const;
  // The content area in model coordinates.
  BoundingBox content_box() const;
  // Maps native corners to model coordinates: offset + round(v * content / src).
  // The result may be degenerate.
  BoundingBox map_box(const BoundingBox& native) const;

  friend bool operator==(const TransformRecord&, const TransformRecord&) = default;
};

TransformRecord letterbox_transform(int src_width, int src_height);

// A screenshot resampled into the model canvas; RGB in [0, 1], interleaved,
// kInputHeight x kInputWidth x 3.
struct LetterboxedScreen {
  TransformRecord transform;
  std::vector<float> rgb;
};

LetterboxedScreen letterbox(const RgbImage& image);

struct ModelInput {
  TransformRecord transform;
  BoundingBox model_box;
  std::vector<float> rgb;  // kInputHeight x kInputWidth x 3
  BinaryMask mask;         // kInputHeight x kInputWidth

  // The 960 x 540 x 4 tensor with the mask as the last channel.
  std::vector<float> tensor() const;
  // The mask as floats, for attribution.
  std::vector<float> mask_values() const;
};

// Throws Error{"element_vanishes"} when the mapped box has no area.
ModelInput encode_input(const RgbImage& image, const BoundingBox& box);
ModelInput encode_input(const LetterboxedScreen& screen, const BoundingBox& box);

struct TrainConfig {
  std::string preset = "desk";
  double learning_rate = 0.01;
  int batch_size = 32;
  int epochs = 100;
  std::vector<int> decay_epochs{50, 80};
  double decay_factor = 10.0;
  bool nesterov = true;
  double momentum = 0.9;
  double bn_momentum = 0.1;
  std::uint64_t seed = 0;

  static TrainConfig paper();
  static TrainConfig desk();
  // Capacity check: a handful of elements memorized in 50 epochs.
  static TrainConfig overfit();
  static TrainConfig preset_named(const std::string& name);

  // Throws Error{"invalid_config"}.
  void validate() const;
  // Learning rate in effect during the given 0-based epoch.
  double learning_rate_at(int epoch) const;
};

struct ModelCard {
  std::string training_data;
  int epochs_run = 0;
  std::optional<double> best_validation_auc;
  int best_epoch = -1;
};

struct PredictionResult {
  double tap_probability = 0.0;
  bool decision = false;
  std::vector<float> embedding;
  std::array<float, 2> logits{};
};

class Classifier {
 public:
  Classifier(const nn::ArchConfig& arch, std::uint64_t seed);

  static Classifier from_bytes(const std::string& bytes);
  static Classifier load(const std::string& path);
  // Byte-stable serialization: identical weights and metadata give
  // identical bytes.
  std::string to_bytes() const;
  void save(const std::string& path) const;
  // SHA-256 of to_bytes(), which equals the hash of the saved file.
  std::string fingerprint() const;

  const nn::ArchConfig& arch() const { return net_.arch(); }
  nn::ResNet& network() { return net_; }
  const nn::ResNet& network() const { return net_; }

  std::optional<TrainConfig> train_config;
  ModelCard card;

  // Pools one input into sample `index` of a [4, batch, ph, pw] tensor.
  void pool_into(std::span<const float> rgb, std::span<const float> mask, nn::Tensor& out, int index) const;
  nn::Tensor pooled_input(const ModelInput& input) const;

  // Inference-mode forward over pooled inputs.
  nn::ResNet::Output infer(const nn::Tensor& pooled) const;

  PredictionResult predict(const ModelInput& input, double threshold = 0.5) const;
  PredictionResult predict(const RgbImage& image, const BoundingBox& box, double threshold = 0.5) const;
  std::vector<float> embed(const RgbImage& image, const BoundingBox& box) const;

 private:
  nn::ResNet net_;
};

// Softmax probability of the tappable class from two logits.
double tap_probability(float not_tap_logit, float tap_logit);

}  // namespace tap::model
