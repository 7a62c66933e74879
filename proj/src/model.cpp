#include "tap/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "json.hpp"
#include "tap/codec.hpp"

namespace tap::model {
namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'T', 'A', 'P', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// round(v * num / den) for non-negative integers, halves rounded up.
int scale_round(int v, int num, int den) {
  return static_cast<int>((2 * static_cast<std::int64_t>(v) * num + den) / (2 * static_cast<std::int64_t>(den)));
}

json arch_to_json(const nn::ArchConfig& a) {
  return {{"input_height", a.input_height}, {"input_width", a.input_width},
          {"input_channels", a.input_channels}, {"input_pool", a.input_pool},
          {"widths", a.widths}, {"stem_kernel", a.stem_kernel},
          {"blocks_per_stage", a.blocks_per_stage}, {"classes", a.classes}};
}

nn::ArchConfig arch_from_json(const json& j) {
  nn::ArchConfig a;
  a.input_height = j.at("input_height");
  a.input_width = j.at("input_width");
  a.input_channels = j.at("input_channels");
  a.input_pool = j.at("input_pool");
  a.widths = j.at("widths").get<std::array<int, 4>>();
  a.stem_kernel = j.at("stem_kernel");
  a.blocks_per_stage = j.at("blocks_per_stage");
  a.classes = j.at("classes");
  return a;
}

json config_to_json(const TrainConfig& c) {
  return {{"preset", c.preset},         {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"epochs", c.epochs},         {"decay_epochs", c.decay_epochs},   {"decay_factor", c.decay_factor},
          {"nesterov", c.nesterov},     {"momentum", c.momentum},           {"bn_momentum", c.bn_momentum},
          {"seed", c.seed},             {"augmentation", "none"},           {"weight_decay", 0.0},
          {"initialization", "random"}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.preset = j.at("preset");
  c.learning_rate = j.at("learning_rate");
  c.batch_size = j.at("batch_size");
  c.epochs = j.at("epochs");
  c.decay_epochs = j.at("decay_epochs").get<std::vector<int>>();
  c.decay_factor = j.at("decay_factor");
  c.nesterov = j.at("nesterov");
  c.momentum = j.at("momentum");
  c.bn_momentum = j.at("bn_momentum");
  c.seed = j.at("seed");
  return c;
}

void append_floats(std::string& out, const std::vector<float>& v) {
  const std::size_t at = out.size();
  out.resize(at + v.size() * sizeof(float));
  std::memcpy(out.data() + at, v.data(), v.size() * sizeof(float));
}

}  // namespace

std::int64_t BinaryMask::popcount() const { return std::count(values.begin(), values.end(), std::uint8_t{1}); }

BinaryMask build_mask(const BoundingBox& box, int height, int width) {
  require_valid_bbox(box, width, height);
  BinaryMask m;
  m.height = height;
  m.width = width;
  m.values.assign(static_cast<std::size_t>(height) * width, 0);
  for (int i = box.y_min; i < box.y_max; ++i) {
    std::fill_n(m.values.begin() + static_cast<std::ptrdiff_t>(i) * width + box.x_min, box.width(), std::uint8_t{1});
  }
  return m;
}

bool TransformRecord::is_identity() const {
  return offset_x == 0 && offset_y == 0 && content_width == src_width && content_height == src_height;
}

BoundingBox TransformRecord::content_box() const {
  return {offset_x, offset_y, offset_x + content_width, offset_y + content_height};
}

BoundingBox TransformRecord::map_box(const BoundingBox& b) const {
  return {offset_x + scale_round(b.x_min, content_width, src_width),
          offset_y + scale_round(b.y_min, content_height, src_height),
          offset_x + scale_round(b.x_max, content_width, src_width),
          offset_y + scale_round(b.y_max, content_height, src_height)};
}

TransformRecord letterbox_transform(int src_width, int src_height) {
  if (src_width < 1 || src_height < 1) throw Error("malformed_image", "image has no pixels", "image");
  TransformRecord t;
  t.src_width = src_width;
  t.src_height = src_height;
  const std::int64_t lhs = static_cast<std::int64_t>(kInputWidth) * src_height;
  const std::int64_t rhs = static_cast<std::int64_t>(kInputHeight) * src_width;
  if (lhs < rhs) {  // width-limited
    t.content_width = kInputWidth;
    t.content_height = std::max(1, scale_round(src_height, kInputWidth, src_width));
  } else if (lhs > rhs) {
    t.content_height = kInputHeight;
    t.content_width = std::max(1, scale_round(src_width, kInputHeight, src_height));
  }
  t.offset_x = (kInputWidth - t.content_width) / 2;
  t.offset_y = (kInputHeight - t.content_height) / 2;
  t.scale_x = static_cast<double>(t.content_width) / src_width;
  t.scale_y = static_cast<double>(t.content_height) / src_height;
  return t;
}

LetterboxedScreen letterbox(const RgbImage& image) {
  LetterboxedScreen s;
  s.transform = letterbox_transform(image.width, image.height);
  const auto& t = s.transform;
  s.rgb.assign(static_cast<std::size_t>(kInputHeight) * kInputWidth * 3, 0.0f);
  const std::vector<float> content = resample_area(image, t.content_width, t.content_height);
  for (int y = 0; y < t.content_height; ++y) {
    std::copy_n(content.begin() + static_cast<std::ptrdiff_t>(y) * t.content_width * 3, t.content_width * 3,
                s.rgb.begin() + (static_cast<std::ptrdiff_t>(y + t.offset_y) * kInputWidth + t.offset_x) * 3);
  }
  return s;
}

std::vector<float> ModelInput::tensor() const {
  const std::size_t n = static_cast<std::size_t>(kInputHeight) * kInputWidth;
  std::vector<float> out(n * 4);
  for (std::size_t i = 0; i < n; ++i) {
    out[4 * i] = rgb[3 * i];
    out[4 * i + 1] = rgb[3 * i + 1];
    out[4 * i + 2] = rgb[3 * i + 2];
    out[4 * i + 3] = mask.values[i];
  }
  return out;
}

std::vector<float> ModelInput::mask_values() const { return {mask.values.begin(), mask.values.end()}; }

ModelInput encode_input(const LetterboxedScreen& screen, const BoundingBox& box) {
  require_valid_bbox(box, screen.transform.src_width, screen.transform.src_height);
  ModelInput in;
  in.transform = screen.transform;
  in.model_box = screen.transform.map_box(box);
  if (in.model_box.width() <= 0 || in.model_box.height() <= 0) {
    throw Error("element_vanishes", "element vanishes at model resolution", "bbox");
  }
  in.rgb = screen.rgb;
  in.mask = build_mask(in.model_box, kInputHeight, kInputWidth);
  return in;
}

ModelInput encode_input(const RgbImage& image, const BoundingBox& box) {
  require_valid_bbox(box, image.width, image.height);
  return encode_input(letterbox(image), box);
}

// --- training configuration ------------------------------------------------

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.preset = "paper";
  c.learning_rate = 0.05;
  c.batch_size = 1024;
  c.epochs = 1500;
  c.decay_epochs = {100, 500, 1000, 1300};
  return c;
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::overfit() {
  TrainConfig c;
  c.preset = "overfit";
  c.learning_rate = 0.01;
  c.batch_size = 8;
  c.epochs = 50;
  c.decay_epochs = {};
  return c;
}

TrainConfig TrainConfig::preset_named(const std::string& name) {
  if (name == "paper") return paper();
  if (name == "desk") return desk();
  if (name == "overfit") return overfit();
  throw Error("invalid_config", "unknown preset " + name + " (paper, desk, overfit)", "preset");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0) || batch_size < 1 || epochs < 1 || !(decay_factor > 0) || momentum < 0 ||
      momentum >= 1 || bn_momentum < 0 || bn_momentum > 1) {
    throw Error("invalid_config", "training hyperparameters out of range");
  }
  for (std::size_t i = 0; i < decay_epochs.size(); ++i) {
    if ((i > 0 && decay_epochs[i] <= decay_epochs[i - 1]) || decay_epochs[i] >= epochs || decay_epochs[i] < 1) {
      throw Error("invalid_config", "decay epochs must be strictly increasing and below the epoch count",
                  "decay_epochs");
    }
  }
}

double TrainConfig::learning_rate_at(int epoch) const {
  double lr = learning_rate;
  for (int d : decay_epochs) {
    if (epoch >= d) lr /= decay_factor;
  }
  return lr;
}

// --- classifier --------------------------------------------------------------

double tap_probability(float not_tap_logit, float tap_logit) {
  return 1.0 / (1.0 + std::exp(static_cast<double>(not_tap_logit) - static_cast<double>(tap_logit)));
}

Classifier::Classifier(const nn::ArchConfig& arch, std::uint64_t seed) : net_(arch, seed) {
  if (arch.input_height != kInputHeight || arch.input_width != kInputWidth) {
    throw Error("invalid_arch", "classifier input must be 960 x 540");
  }
}

std::string Classifier::to_bytes() const {
  json header;
  header["format"] = "tap-classifier";
  header["schema_version"] = kSchemaVersion;
  header["arch"] = arch_to_json(arch());
  header["train_config"] = train_config ? config_to_json(*train_config) : json(nullptr);
  header["normalization"] = {{"rgb", "8-bit values divided by 255"},
                             {"mask", "binary indicator, fourth channel"},
                             {"resize", "aspect-preserving area resampling into 960x540, centered, zero padding"}};
  json card_json = {{"training_data", card.training_data}, {"epochs_run", card.epochs_run},
                    {"best_epoch", card.best_epoch}};
  card_json["best_validation_auc"] = card.best_validation_auc ? json(*card.best_validation_auc) : json(nullptr);
  card_json["augmentation"] = "none";
  card_json["weight_decay"] = "none";
  card_json["pretrained"] = false;
  header["model_card"] = card_json;
  json tensors = json::array();
  for (const auto& p : net_.params()) tensors.push_back({{"name", p.name}, {"shape", p.shape}, {"kind", "param"}});
  for (const auto& b : net_.buffers()) tensors.push_back({{"name", b.name}, {"shape", b.shape}, {"kind", "buffer"}});
  header["tensors"] = tensors;
  const std::string text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  const std::uint64_t len = text.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof len);
  out += text;
  for (const auto& p : net_.params()) append_floats(out, p.value);
  for (const auto& b : net_.buffers()) append_floats(out, b.value);
  return out;
}

Classifier Classifier::from_bytes(const std::string& bytes) {
  auto fail = [](const std::string& why) { return Error("malformed_checkpoint", "checkpoint: " + why, "checkpoint"); };
  if (bytes.size() < sizeof kMagic + 8 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw fail("bad magic");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + sizeof kMagic, sizeof len);
  const std::size_t body = sizeof kMagic + sizeof len;
  if (len > bytes.size() - body) throw fail("truncated header");
  const json header = json::parse(bytes.substr(body, len), nullptr, false);
  if (header.is_discarded() || !header.is_object()) throw fail("unreadable header");
  if (header.value("schema_version", -1) != kSchemaVersion) throw fail("unsupported schema version");

  try {
    Classifier model(arch_from_json(header.at("arch")), 0);
    if (!header.at("train_config").is_null()) model.train_config = config_from_json(header["train_config"]);
    const json& card = header.at("model_card");
    model.card.training_data = card.value("training_data", std::string{});
    model.card.epochs_run = card.value("epochs_run", 0);
    model.card.best_epoch = card.value("best_epoch", -1);
    if (card.contains("best_validation_auc") && !card["best_validation_auc"].is_null()) {
      model.card.best_validation_auc = card["best_validation_auc"].get<double>();
    }

    std::vector<nn::Param*> slots;
    for (auto& p : model.net_.params()) slots.push_back(&p);
    for (auto& b : model.net_.buffers()) slots.push_back(&b);
    const json& tensors = header.at("tensors");
    if (tensors.size() != slots.size()) throw fail("tensor count mismatch");
    std::size_t offset = body + len;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (tensors[i].at("name") != slots[i]->name || tensors[i].at("shape").get<std::vector<int>>() != slots[i]->shape) {
        throw fail("unexpected tensor " + tensors[i].at("name").get<std::string>());
      }
      const std::size_t n = slots[i]->value.size() * sizeof(float);
      if (offset + n > bytes.size()) throw fail("truncated tensor data");
      std::memcpy(slots[i]->value.data(), bytes.data() + offset, n);
      offset += n;
    }
    if (offset != bytes.size()) throw fail("trailing bytes");
    return model;
  } catch (const json::exception& e) {
    throw fail(e.what());
  }
}

Classifier Classifier::load(const std::string& path) { return from_bytes(codec::read_file(path)); }

void Classifier::save(const std::string& path) const { codec::write_file_atomic(path, to_bytes()); }

std::string Classifier::fingerprint() const { return codec::sha256_hex(to_bytes()); }

void Classifier::pool_into(std::span<const float> rgb, std::span<const float> mask, nn::Tensor& out,
                           int index) const {
  const int f = arch().input_pool;
  const std::int64_t per_channel = out.per_channel();
  kernels::pool_interleaved_to_cnhw(rgb, kInputHeight, kInputWidth, 3, f, out.batch, index,
                                    std::span<float>(out.data).first(static_cast<std::size_t>(3 * per_channel)));
  kernels::pool_interleaved_to_cnhw(mask, kInputHeight, kInputWidth, 1, f, out.batch, index,
                                    std::span<float>(out.data).subspan(static_cast<std::size_t>(3 * per_channel)));
}

nn::Tensor Classifier::pooled_input(const ModelInput& input) const {
  nn::Tensor t(4, 1, arch().pooled_height(), arch().pooled_width());
  pool_into(input.rgb, input.mask_values(), t, 0);
  return t;
}

nn::ResNet::Output Classifier::infer(const nn::Tensor& pooled) const {
  return net_.forward(pooled, nn::Mode::kInference, nullptr);
}

PredictionResult Classifier::predict(const ModelInput& input, double threshold) const {
  const auto out = infer(pooled_input(input));
  PredictionResult r;
  r.logits = {out.logits.data[0], out.logits.data[1]};
  r.tap_probability = tap_probability(r.logits[0], r.logits[1]);
  r.decision = r.tap_probability >= threshold;
  r.embedding = out.embedding.data;
  return r;
}

PredictionResult Classifier::predict(const RgbImage& image, const BoundingBox& box, double threshold) const {
  return predict(encode_input(image, box), threshold);
}

std::vector<float> Classifier::embed(const RgbImage& image, const BoundingBox& box) const {
  return predict(image, box).embedding;
}

}  // namespace tap::model
