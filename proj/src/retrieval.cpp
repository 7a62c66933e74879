#include "tap/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <sstream>

#include "json.hpp"
#include "tap/codec.hpp"
#include "tap/kernels.hpp"

namespace tap::retrieval {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kFormat = "tap-embedding-index";

std::string url_escape(const std::string& s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += hex[c >> 4];
      out += hex[c & 15];
    }
  }
  return out;
}

json record_json(const EmbeddingRecord& r, Side side) {
  return {{"side", side == Side::kTappable ? "tappable" : "non_tappable"},
          {"screenshot_id", r.ref.screenshot_id},
          {"element_id", r.ref.element_id},
          {"bbox", {r.bbox.x_min, r.bbox.y_min, r.bbox.x_max, r.bbox.y_max}},
          {"tap_probability", r.tap_probability},
          {"thumbnails", {{"screenshot", r.thumbnails.screenshot}, {"region", r.thumbnails.region}}}};
}

void append_floats(std::string& out, std::span<const float> v) {
  static_assert(std::endian::native == std::endian::little, "index files are little endian");
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
}

// Keeps the k best (distance, ref) pairs of one side.
std::vector<Neighbor> nearest(const EmbeddingIndex& index, Side side, std::span<const float> query, int k,
                              const std::optional<ElementRef>& self) {
  const auto& records = index.side(side);
  std::vector<double> dist(records.size());
  kernels::squared_distances(index.matrix(side), static_cast<int>(records.size()), index.dim(), query, dist);
  std::vector<std::size_t> order;
  order.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (self && records[i].ref == *self) continue;
    if (dist[i] == 0.0 && std::equal(query.begin(), query.end(), records[i].vector.begin())) continue;
    order.push_back(i);
  }
  const auto less = [&](std::size_t a, std::size_t b) {
    if (dist[a] != dist[b]) return dist[a] < dist[b];
    return records[a].ref < records[b].ref;
  };
  const std::size_t take = std::min(order.size(), static_cast<std::size_t>(k));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(), less);
  std::vector<Neighbor> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back({records[order[i]], std::sqrt(dist[order[i]])});
  return out;
}

}  // namespace

void Cuts::validate() const {
  if (!(lower >= 0.0 && lower <= upper && upper <= 1.0)) {
    throw Error("invalid_cuts", "cuts must satisfy 0 <= lower <= upper <= 1", "cuts");
  }
}

ThumbnailRefs thumbnail_refs(const ElementRef& ref) {
  const std::string base = "/api/corpus/thumbnail?id=" + url_escape(ref.screenshot_id);
  return {base, base + "&element=" + url_escape(ref.element_id)};
}

EmbeddingIndex::EmbeddingIndex(Cuts cuts, std::string fingerprint, int dim)
    : cuts_(cuts), fingerprint_(std::move(fingerprint)), dim_(dim) {
  cuts_.validate();
  if (dim < 1) throw Error("dimension_mismatch", "embedding dimension must be positive");
}

bool EmbeddingIndex::add(EmbeddingRecord record) {
  if (static_cast<int>(record.vector.size()) != dim_) {
    throw Error("dimension_mismatch", "record has " + std::to_string(record.vector.size()) + " dimensions, index " +
                                          std::to_string(dim_));
  }
  if (!(record.tap_probability >= 0.0 && record.tap_probability <= 1.0)) {
    throw Error("invalid_record", "tap probability outside [0, 1]");
  }
  for (float v : record.vector) {
    if (!std::isfinite(v)) throw Error("invalid_record", "non-finite embedding");
  }
  if (record.tap_probability > cuts_.upper) {
    tappable_matrix_.insert(tappable_matrix_.end(), record.vector.begin(), record.vector.end());
    tappable_.push_back(std::move(record));
    return true;
  }
  if (record.tap_probability < cuts_.lower) {
    non_tappable_matrix_.insert(non_tappable_matrix_.end(), record.vector.begin(), record.vector.end());
    non_tappable_.push_back(std::move(record));
    return true;
  }
  ++excluded_;
  return false;
}

std::span<const float> EmbeddingIndex::matrix(Side s) const {
  return s == Side::kTappable ? tappable_matrix_ : non_tappable_matrix_;
}

void EmbeddingIndex::save(const std::string& dir) const {
  fs::create_directories(dir);
  std::string vectors;
  std::string records;
  append_floats(vectors, tappable_matrix_);
  append_floats(vectors, non_tappable_matrix_);
  for (const auto& r : tappable_) records += record_json(r, Side::kTappable).dump() + "\n";
  for (const auto& r : non_tappable_) records += record_json(r, Side::kNonTappable).dump() + "\n";
  const json meta = {{"format", kFormat},
                     {"dim", dim_},
                     {"cuts", {{"lower", cuts_.lower}, {"upper", cuts_.upper}}},
                     {"checkpoint_fingerprint", fingerprint_},
                     {"tappable", tappable_.size()},
                     {"non_tappable", non_tappable_.size()},
                     {"excluded_mid_band", excluded_},
                     {"skipped", skipped}};
  codec::write_file_atomic((fs::path(dir) / "vectors.bin").string(), vectors);
  codec::write_file_atomic((fs::path(dir) / "records.jsonl").string(), records);
  codec::write_file_atomic((fs::path(dir) / "index.json").string(), meta.dump(2) + "\n");
}

EmbeddingIndex EmbeddingIndex::load(const std::string& dir) {
  const auto fail = [&](const std::string& why) { return Error("malformed_index", "index " + dir + ": " + why, "index"); };
  json meta;
  try {
    meta = json::parse(codec::read_file((fs::path(dir) / "index.json").string()));
  } catch (const json::exception&) {
    throw fail("unreadable index.json");
  }
  if (meta.value("format", "") != kFormat) throw fail("not an embedding index");
  EmbeddingIndex index({meta.at("cuts").at("lower").get<double>(), meta.at("cuts").at("upper").get<double>()},
                       meta.at("checkpoint_fingerprint").get<std::string>(), meta.at("dim").get<int>());
  index.excluded_ = meta.value("excluded_mid_band", std::size_t{0});
  index.skipped = meta.value("skipped", std::vector<std::string>{});

  const std::string vectors = codec::read_file((fs::path(dir) / "vectors.bin").string());
  std::istringstream lines(codec::read_file((fs::path(dir) / "records.jsonl").string()));
  const std::size_t row_bytes = static_cast<std::size_t>(index.dim_) * sizeof(float);
  std::size_t offset = 0;
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw fail("unreadable record");
    if (offset + row_bytes > vectors.size()) throw fail("vectors.bin is shorter than records.jsonl");
    EmbeddingRecord r;
    r.ref = {j.at("screenshot_id").get<std::string>(), j.at("element_id").get<std::string>()};
    const auto& b = j.at("bbox");
    r.bbox = {b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
    r.tap_probability = j.at("tap_probability").get<double>();
    r.thumbnails = {j.at("thumbnails").at("screenshot").get<std::string>(),
                    j.at("thumbnails").at("region").get<std::string>()};
    r.vector.resize(static_cast<std::size_t>(index.dim_));
    std::memcpy(r.vector.data(), vectors.data() + offset, row_bytes);
    offset += row_bytes;
    const bool tappable = j.at("side").get<std::string>() == "tappable";
    if (tappable != (r.tap_probability > index.cuts_.upper) ||
        (!tappable && !(r.tap_probability < index.cuts_.lower))) {
      throw fail("record " + r.ref.screenshot_id + "/" + r.ref.element_id + " is on the wrong side of the cuts");
    }
    index.add(std::move(r));
  }
  if (offset != vectors.size()) throw fail("vectors.bin is longer than records.jsonl");
  if (index.tappable_.size() != meta.value("tappable", std::size_t{0}) ||
      index.non_tappable_.size() != meta.value("non_tappable", std::size_t{0})) {
    throw fail("record counts disagree with index.json");
  }
  return index;
}

EmbeddingIndex build_index(const model::Classifier& model, const data::Corpus& corpus, const Cuts& cuts) {
  return build_index(model, model.fingerprint(), corpus, cuts);
}

EmbeddingIndex build_index(const model::Classifier& model, const std::string& fingerprint,
                           const data::Corpus& corpus, const Cuts& cuts) {
  if (corpus.element_count() == 0) throw Error("empty_corpus", "index needs at least one element", "corpus");
  EmbeddingIndex index(cuts, fingerprint, model.arch().embedding_dim());
  for (const auto& screen : corpus.screens) {
    const model::LetterboxedScreen boxed = model::letterbox(*data::load_pixels(screen.screenshot));
    for (const auto& a : screen.annotations) {
      if (a.bbox.x_max > screen.screenshot.width || a.bbox.y_max > screen.screenshot.height) {
        throw Error("resolution_mismatch", "element " + a.screenshot_id + "/" + a.element_id +
                                               " lies outside its screenshot");
      }
      if (model::letterbox_transform(screen.screenshot.width, screen.screenshot.height).map_box(a.bbox).area() <= 0) {
        index.skipped.push_back(a.screenshot_id + "/" + a.element_id);
        continue;
      }
      const auto pred = model.predict(model::encode_input(boxed, a.bbox));
      EmbeddingRecord r;
      r.ref = a.ref();
      r.bbox = a.bbox;
      r.tap_probability = pred.tap_probability;
      r.vector = pred.embedding;
      r.thumbnails = thumbnail_refs(r.ref);
      index.add(std::move(r));
    }
  }
  return index;
}

NeighborResult contrasting_neighbors(const EmbeddingIndex& index, std::span<const float> query,
                                     const std::string& model_fingerprint, int k,
                                     const std::optional<ElementRef>& self) {
  if (index.fingerprint() != model_fingerprint) {
    throw Error("fingerprint_mismatch", "index built by different model", "index");
  }
  if (k < 1) throw Error("invalid_k", "k must be at least 1", "k");
  if (static_cast<int>(query.size()) != index.dim()) {
    throw Error("dimension_mismatch", "query has " + std::to_string(query.size()) + " dimensions, index " +
                                          std::to_string(index.dim()));
  }
  if (index.tappable().empty() && index.non_tappable().empty()) {
    throw Error("empty_index", "index holds no records on either side", "index");
  }
  NeighborResult out;
  out.tappable = nearest(index, Side::kTappable, query, k, self);
  out.non_tappable = nearest(index, Side::kNonTappable, query, k, self);
  out.tappable_empty = index.tappable().empty();
  out.non_tappable_empty = index.non_tappable().empty();
  return out;
}

ExampleExplanation explain_with_examples(const model::Classifier& model, const std::string& model_fingerprint,
                                         const EmbeddingIndex& index, const RgbImage& screenshot,
                                         const BoundingBox& bbox, int k) {
  ExampleExplanation out;
  out.prediction = model.predict(screenshot, bbox);
  out.neighbors = contrasting_neighbors(index, out.prediction.embedding, model_fingerprint, k);
  return out;
}

}  // namespace tap::retrieval
