#include "tap/service.hpp"

#include <cmath>
#include <cstring>

#include "json.hpp"
#include "tap/codec.hpp"

namespace tap::service {
namespace {

using nlohmann::json;

struct HttpError {
  int status;
  std::string code;
  std::string message;
  std::string field;
};

[[noreturn]] void fail(int status, std::string code, std::string message, std::string field = {}) {
  throw HttpError{status, std::move(code), std::move(message), std::move(field)};
}

Response json_response(const json& j) { return {200, "application/json", j.dump()}; }

// Width and height from the IHDR chunk, without decoding pixels.
std::optional<ImageSize> png_dimensions(const std::string& bytes) {
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() < 24 || std::memcmp(bytes.data(), sig, 8) != 0 || bytes.compare(12, 4, "IHDR") != 0) {
    return std::nullopt;
  }
  const auto u32 = [&](std::size_t at) {
    return (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at])) << 24) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 1])) << 16) |
           (static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 2])) << 8) |
           static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + 3]));
  };
  const std::uint32_t w = u32(16), h = u32(20);
  if (w > (1u << 30) || h > (1u << 30)) return ImageSize{1 << 30, 1 << 30};
  return ImageSize{static_cast<int>(w), static_cast<int>(h)};
}

BoundingBox parse_box(const json& j, const std::string& field) {
  if (!j.is_array() || j.size() != 4) fail(400, "malformed_bbox", "malformed bbox", field);
  int v[4];
  for (int i = 0; i < 4; ++i) {
    if (!j[static_cast<std::size_t>(i)].is_number_integer()) fail(400, "malformed_bbox", "malformed bbox", field);
    const auto x = j[static_cast<std::size_t>(i)].get<std::int64_t>();
    if (x < -(1 << 30) || x > (1 << 30)) fail(400, "malformed_bbox", "malformed bbox", field);
    v[i] = static_cast<int>(x);
  }
  return {v[0], v[1], v[2], v[3]};
}

void check_box(const BoundingBox& box, const RgbImage& image, const std::string& field) {
  if (auto problem = bbox_problem(box, image.width, image.height)) {
    fail(400, *problem == "degenerate bbox" ? "degenerate_bbox" : "bbox_out_of_bounds", *problem, field);
  }
}

int int_option(const json& options, const char* key, int fallback, int lo, int hi) {
  if (!options.contains(key)) return fallback;
  const json& v = options.at(key);
  const std::string field = std::string("options.") + key;
  if (!v.is_number_integer()) fail(400, "invalid_option", std::string(key) + " must be an integer", field);
  const auto x = v.get<std::int64_t>();
  if (x < lo || x > hi) {
    fail(400, "invalid_option", std::string(key) + " must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]",
         field);
  }
  return static_cast<int>(x);
}

struct Request {
  RgbImage image;
  BoundingBox bbox;
  json options = json::object();
};

Request parse_request(const std::string& body, const ServiceConfig& config) {
  const json j = json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) fail(400, "malformed_request", "request body is not a JSON object");
  if (!j.contains("image") || !j.at("image").is_string()) {
    fail(400, "malformed_image", "image must be a base64 PNG string", "image");
  }
  const std::string& text = j.at("image").get_ref<const std::string&>();
  if (text.size() / 4 * 3 > config.max_image_bytes + 3) {
    fail(413, "image_too_large", "image exceeds " + std::to_string(config.max_image_bytes) + " bytes", "image");
  }
  std::string png;
  try {
    png = codec::base64_decode(text);
  } catch (const Error& e) {
    fail(400, "malformed_image", e.what(), "image");
  }
  if (png.size() > config.max_image_bytes) {
    fail(413, "image_too_large", "image exceeds " + std::to_string(config.max_image_bytes) + " bytes", "image");
  }
  const auto dims = png_dimensions(png);
  if (!dims) fail(400, "malformed_image", "image is not a PNG", "image");
  if (dims->width > config.max_image_side || dims->height > config.max_image_side) {
    fail(413, "image_too_large",
         "image exceeds " + std::to_string(config.max_image_side) + "x" + std::to_string(config.max_image_side),
         "image");
  }
  Request r;
  try {
    r.image = decode_png(png);
  } catch (const Error& e) {
    fail(400, "malformed_image", e.what(), "image");
  }
  if (r.image.empty()) fail(400, "malformed_image", "image has no pixels", "image");
  if (!j.contains("bbox")) fail(400, "malformed_bbox", "malformed bbox", "bbox");
  r.bbox = parse_box(j.at("bbox"), "bbox");
  check_box(r.bbox, r.image, "bbox");
  if (j.contains("options")) {
    if (!j.at("options").is_object()) fail(400, "invalid_option", "options must be an object", "options");
    r.options = j.at("options");
  }
  return r;
}

std::vector<data::ElementAnnotation> parse_regions(const json& options, const RgbImage& image) {
  std::vector<data::ElementAnnotation> out;
  if (!options.contains("regions") || options.at("regions").is_null()) return out;
  const json& list = options.at("regions");
  if (!list.is_array()) fail(400, "invalid_option", "regions must be a list", "options.regions");
  for (std::size_t i = 0; i < list.size(); ++i) {
    const std::string field = "options.regions[" + std::to_string(i) + "]";
    const json& r = list[i];
    if (!r.is_object() || !r.contains("bbox")) fail(400, "invalid_option", "region needs a bbox", field);
    data::ElementAnnotation a;
    a.bbox = parse_box(r.at("bbox"), field + ".bbox");
    check_box(a.bbox, image, field + ".bbox");
    a.element_id = "region" + std::to_string(i);
    if (r.contains("element_id")) {
      if (!r.at("element_id").is_string()) fail(400, "invalid_option", "element_id must be a string", field);
      a.element_id = r.at("element_id").get<std::string>();
    }
    if (r.contains("view_type") && r.at("view_type").is_string()) a.view_type = r.at("view_type").get<std::string>();
    out.push_back(std::move(a));
  }
  return out;
}

const char* source_name(attr::RegionSource s) { return s == attr::RegionSource::kUiBbox ? "ui_bbox" : "felzenszwalb"; }

// Region geometry in heatmap pixels (the content crop at model resolution).
json region_geometry(const attr::Region& r, const BoundingBox& content) {
  json j;
  if (auto box = r.as_box()) {
    j["bbox"] = {box->x_min - content.x_min, box->y_min - content.y_min, box->x_max - content.x_min,
                 box->y_max - content.y_min};
  } else {
    const BoundingBox b = r.bounds();
    j["bounds"] = {b.x_min - content.x_min, b.y_min - content.y_min, b.x_max - content.x_min,
                   b.y_max - content.y_min};
    std::vector<int> rle;
    rle.reserve(r.runs.size() * 3);
    for (const auto& run : r.runs) {
      rle.push_back(run.y - content.y_min);
      rle.push_back(run.x_begin - content.x_min);
      rle.push_back(run.x_end - content.x_min);
    }
    j["rle"] = std::move(rle);
  }
  return j;
}

json transform_json(const model::TransformRecord& t) {
  return {{"src_width", t.src_width},         {"src_height", t.src_height},       {"scale_x", t.scale_x},
          {"scale_y", t.scale_y},             {"offset_x", t.offset_x},           {"offset_y", t.offset_y},
          {"content_width", t.content_width}, {"content_height", t.content_height}};
}

json neighbors_json(const std::vector<retrieval::Neighbor>& list) {
  json out = json::array();
  for (const auto& n : list) {
    const auto& r = n.record;
    out.push_back({{"screenshot_id", r.ref.screenshot_id},
                   {"element_id", r.ref.element_id},
                   {"bbox", {r.bbox.x_min, r.bbox.y_min, r.bbox.x_max, r.bbox.y_max}},
                   {"tap_probability", r.tap_probability},
                   {"distance", n.distance},
                   {"thumbnails", {{"screenshot", r.thumbnails.screenshot}, {"region", r.thumbnails.region}}}});
  }
  return out;
}

class Slot {
 public:
  explicit Slot(std::counting_semaphore<>& s) : s_(s) { s_.acquire(); }
  ~Slot() { s_.release(); }
  Slot(const Slot&) = delete;
  Slot& operator=(const Slot&) = delete;

 private:
  std::counting_semaphore<>& s_;
};

template <typename F>
Response guarded(F&& f) {
  try {
    return f();
  } catch (const HttpError& e) {
    return error_response(e.status, e.code, e.message, e.field);
  } catch (const Error& e) {
    return error_response(400, e.code(), e.what(), e.field());
  }
}

}  // namespace

void ServiceConfig::validate() const {
  const auto bad = [](const std::string& why) { return Error("invalid_config", why, "config"); };
  if (max_steps < 1 || default_steps < 1 || default_steps > max_steps) throw bad("steps: need 1 <= default <= max");
  if (max_k < 1 || default_k < 1 || default_k > max_k) throw bad("k: need 1 <= default <= max");
  if (!(default_area_fraction > 0.0 && default_area_fraction <= 1.0)) throw bad("area_fraction must be in (0, 1]");
  if (max_regions < 1) throw bad("max_regions must be positive");
  if (max_image_side < 1 || max_image_bytes < 1) throw bad("image caps must be positive");
  if (attribution_workers < 1) throw bad("attribution_workers must be positive");
  cuts.validate();
  attr::colormap_named(colormap);
}

Response error_response(int status, const std::string& code, const std::string& message, const std::string& field) {
  return {status, "application/json", json{{"code", code}, {"message", message}, {"field", field}}.dump()};
}

Service::Service(ServiceConfig config) : config_(std::move(config)) {
  config_.validate();
  colormap_ = attr::colormap_named(config_.colormap);
  slots_ = std::make_unique<std::counting_semaphore<>>(config_.attribution_workers);
}

void Service::set_model(std::shared_ptr<const model::Classifier> model) {
  model_ = std::move(model);
  fingerprint_ = model_ ? model_->fingerprint() : std::string();
}

void Service::set_index(std::shared_ptr<const retrieval::EmbeddingIndex> index) { index_ = std::move(index); }

void Service::set_corpus(std::shared_ptr<const data::Corpus> corpus) {
  corpus_ = std::move(corpus);
  std::lock_guard lock(cache_mutex_);
  thumbnails_.clear();
}

Response Service::info() const {
  json j;
  j["model_loaded"] = has_model();
  j["fingerprint"] = fingerprint_;
  if (model_) {
    j["arch"] = {{"input_pool", model_->arch().input_pool},
                 {"widths", model_->arch().widths},
                 {"embedding_dim", model_->arch().embedding_dim()}};
  }
  j["index"] = {{"loaded", index_ != nullptr}};
  if (index_) {
    j["index"]["tappable"] = index_->tappable().size();
    j["index"]["non_tappable"] = index_->non_tappable().size();
    j["index"]["cuts"] = {index_->cuts().lower, index_->cuts().upper};
    j["index"]["fingerprint_matches"] = index_->fingerprint() == fingerprint_;
  }
  j["corpus"] = {{"loaded", corpus_ != nullptr}};
  if (corpus_) {
    j["corpus"]["screens"] = corpus_->screens.size();
    j["corpus"]["elements"] = corpus_->element_count();
  }
  j["defaults"] = {{"steps", config_.default_steps},
                   {"k", config_.default_k},
                   {"area_fraction", config_.default_area_fraction},
                   {"max_regions", config_.max_regions},
                   {"colormap", config_.colormap}};
  j["limits"] = {{"max_steps", config_.max_steps},
                 {"max_k", config_.max_k},
                 {"max_image_side", config_.max_image_side},
                 {"max_image_bytes", config_.max_image_bytes}};
  return json_response(j);
}

Response Service::predict(const std::string& body) const {
  return guarded([&] {
    if (!model_) fail(503, "model_not_loaded", "no checkpoint loaded");
    const Request req = parse_request(body, config_);
    const auto pred = model_->predict(req.image, req.bbox);
    return json_response({{"tap_probability", pred.tap_probability}, {"decision", pred.decision}});
  });
}

Response Service::explain(const std::string& body) const {
  return guarded([&] {
    if (!model_) fail(503, "model_not_loaded", "no checkpoint loaded");
    if (index_ && index_->fingerprint() != fingerprint_) {
      fail(409, "fingerprint_mismatch", "index built by different model", "index");
    }
    const Request req = parse_request(body, config_);
    const int steps = int_option(req.options, "steps", config_.default_steps, 1, config_.max_steps);
    const int k = int_option(req.options, "k", config_.default_k, 1, config_.max_k);
    double fraction = config_.default_area_fraction;
    if (req.options.contains("area_fraction")) {
      const json& v = req.options.at("area_fraction");
      if (!v.is_number() || !(v.get<double>() > 0.0 && v.get<double>() <= 1.0)) {
        fail(400, "invalid_option", "area_fraction must be in (0, 1]", "options.area_fraction");
      }
      fraction = v.get<double>();
    }
    const auto annotations = parse_regions(req.options, req.image);
    std::string mode = annotations.empty() ? "felzenszwalb" : "ui_bbox";
    if (req.options.contains("region_mode")) {
      const json& v = req.options.at("region_mode");
      if (!v.is_string() || (v != "ui_bbox" && v != "felzenszwalb")) {
        fail(400, "invalid_option", "region_mode must be ui_bbox or felzenszwalb", "options.region_mode");
      }
      mode = v.get<std::string>();
    }

    const model::LetterboxedScreen boxed = model::letterbox(req.image);
    const model::ModelInput input = model::encode_input(boxed, req.bbox);
    const auto pred = model_->predict(input);

    json warnings = json::array();
    std::vector<attr::Region> regions;
    if (mode == "ui_bbox") {
      if (annotations.empty()) {
        warnings.push_back("no annotation regions given; used felzenszwalb segmentation");
      } else {
        auto set = attr::regions_from_annotations(annotations, boxed.transform);
        for (auto& w : set.warnings) warnings.push_back(std::move(w));
        regions = std::move(set.regions);
        if (regions.empty()) warnings.push_back("every annotation region collapsed; used felzenszwalb segmentation");
      }
    }
    const bool fallback = regions.empty();
    if (fallback) {
      regions = attr::felzenszwalb_segments(boxed.rgb, model::kInputHeight, model::kInputWidth, {},
                                            boxed.transform.content_box());
    }

    attr::PixelAttribution pixels;
    {
      Slot slot(*slots_);
      pixels = attr::dual_baseline_attribution(attr::ClassifierTarget(*model_), input, steps);
    }
    const auto ranked = attr::aggregate_regions(pixels, regions);
    const auto merged = attr::merge_to_threshold(ranked, fraction);
    const auto heat = attr::render_heatmap(ranked, boxed, colormap_);
    const BoundingBox content = boxed.transform.content_box();

    json out;
    out["tap_probability"] = pred.tap_probability;
    out["decision"] = pred.decision;
    out["transform"] = transform_json(boxed.transform);
    out["region_mode"] = fallback ? "felzenszwalb" : "ui_bbox";
    out["steps"] = steps;
    out["attribution"] = {{"total", pixels.total()},
                          {"input_value", pixels.input_value},
                          {"baseline_value", pixels.baseline_value},
                          {"completeness_error", pixels.completeness_error()}};
    out["heatmap_overlay_png"] = codec::base64_encode(encode_png(heat.overlay));
    out["filtered_png"] = codec::base64_encode(encode_png(heat.filtered));
    json list = json::array();
    const std::size_t shown = std::min(ranked.ranked.size(), static_cast<std::size_t>(config_.max_regions));
    for (std::size_t i = 0; i < shown; ++i) {
      const auto& rr = ranked.ranked[i];
      json r = region_geometry(rr.region, content);
      r["rank"] = rr.rank;
      r["label"] = rr.region.label;
      r["source"] = source_name(rr.region.source);
      r["area"] = rr.region.area();
      r["total"] = rr.total;
      r["density"] = rr.density;
      list.push_back(std::move(r));
    }
    out["ranked_regions"] = std::move(list);
    out["region_count"] = ranked.ranked.size();
    json m = region_geometry(merged.region, content);
    m["regions_used"] = merged.regions_used;
    m["coverage"] = merged.coverage;
    m["area_fraction"] = fraction;
    out["merged_region"] = std::move(m);

    out["neighbors_available"] = index_ != nullptr;
    if (index_) {
      const auto n = retrieval::contrasting_neighbors(*index_, pred.embedding, fingerprint_, k);
      out["neighbors"] = {{"tappable", neighbors_json(n.tappable)},
                          {"non_tappable", neighbors_json(n.non_tappable)},
                          {"tappable_empty", n.tappable_empty},
                          {"non_tappable_empty", n.non_tappable_empty},
                          {"k", k}};
    } else {
      out["neighbors"] = {{"tappable", json::array()}, {"non_tappable", json::array()}, {"k", k}};
      warnings.push_back("no embedding index loaded; neighbors omitted");
    }
    out["warnings"] = std::move(warnings);
    return json_response(out);
  });
}

Response Service::thumbnail(const std::string& id, const std::optional<std::string>& element) const {
  return guarded([&] {
    if (!corpus_) fail(404, "no_corpus", "no corpus mounted", "id");
    const std::string key = id + '\x1f' + element.value_or("");
    {
      std::lock_guard lock(cache_mutex_);
      if (auto it = thumbnails_.find(key); it != thumbnails_.end()) return Response{200, "image/png", it->second};
    }
    const data::ScreenRecord* screen = corpus_->find_screen(id);
    if (!screen) fail(404, "unknown_screenshot", "no screenshot " + id, "id");
    RgbImage image;
    if (element) {
      const data::ElementAnnotation* found = nullptr;
      for (const auto& a : screen->annotations) {
        if (a.element_id == *element) found = &a;
      }
      if (!found) fail(404, "unknown_element", "no element " + *element + " on " + id, "element");
      image = crop(*data::load_pixels(screen->screenshot), found->bbox);
    } else {
      image = *data::load_pixels(screen->screenshot);
    }
    std::string png = encode_png(image);
    std::lock_guard lock(cache_mutex_);
    auto [it, inserted] = thumbnails_.emplace(key, std::move(png));
    return Response{200, "image/png", it->second};
  });
}

}  // namespace tap::service
