#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tap/dataset.hpp"
#include "tap/model.hpp"

namespace tap::retrieval {

// Records strictly above `upper` go to the tappable side, strictly below
// `lower` to the non-tappable side; the band between is left out.
struct Cuts {
  double lower = 0.35;
  double upper = 0.65;

  // Throws Error{"invalid_cuts"} unless 0 <= lower <= upper <= 1.
  void validate() const;
};

// Relative URLs served by the thumbnail endpoint.
struct ThumbnailRefs {
  std::string screenshot;
  std::string region;
};

ThumbnailRefs thumbnail_refs(const ElementRef& ref);

struct EmbeddingRecord {
  ElementRef ref;
  BoundingBox bbox;  // native screenshot coordinates
  double tap_probability = 0.0;
  std::vector<float> vector;
  ThumbnailRefs thumbnails;
};

enum class Side { kTappable, kNonTappable };

class EmbeddingIndex {
 public:
  EmbeddingIndex(Cuts cuts, std::string fingerprint, int dim);

  // Places a record by its probability; returns false for the mid band.
  // Throws Error{"dimension_mismatch"} and Error{"invalid_record"}.
  bool add(EmbeddingRecord record);

  const Cuts& cuts() const { return cuts_; }
  const std::string& fingerprint() const { return fingerprint_; }
  int dim() const { return dim_; }
  const std::vector<EmbeddingRecord>& side(Side s) const { return s == Side::kTappable ? tappable_ : non_tappable_; }
  const std::vector<EmbeddingRecord>& tappable() const { return tappable_; }
  const std::vector<EmbeddingRecord>& non_tappable() const { return non_tappable_; }
  std::size_t excluded() const { return excluded_; }
  std::vector<std::string> skipped;  // elements that vanish at model resolution

  // dir/index.json, dir/records.jsonl and dir/vectors.bin (float32 little
  // endian, tappable side first).
  void save(const std::string& dir) const;
  static EmbeddingIndex load(const std::string& dir);

  // Row-major vectors of one side, for scanning.
  std::span<const float> matrix(Side s) const;

 private:
  Cuts cuts_;
  std::string fingerprint_;
  int dim_;
  std::size_t excluded_ = 0;
  std::vector<EmbeddingRecord> tappable_;
  std::vector<EmbeddingRecord> non_tappable_;
  std::vector<float> tappable_matrix_;
  std::vector<float> non_tappable_matrix_;
};

// Embeds every annotated element of the corpus once with the model's own
// prediction. Elements that collapse at model resolution are listed in
// `skipped`.
EmbeddingIndex build_index(const model::Classifier& model, const data::Corpus& corpus, const Cuts& cuts = {});
// Same, with a fingerprint already computed for the model.
EmbeddingIndex build_index(const model::Classifier& model, const std::string& fingerprint,
                           const data::Corpus& corpus, const Cuts& cuts = {});

struct Neighbor {
  EmbeddingRecord record;
  double distance = 0.0;
};

struct NeighborResult {
  std::vector<Neighbor> tappable;      // ascending distance
  std::vector<Neighbor> non_tappable;  // ascending distance
  bool tappable_empty = false;         // that side of the index holds no records
  bool non_tappable_empty = false;
};

// k nearest records by Euclidean distance on each side independently. Ties
// order by element ref. Records whose vector equals the query exactly, or
// whose ref equals `self`, are skipped. Throws Error{"fingerprint_mismatch"}
// ("index built by different model"), Error{"empty_index"},
// Error{"dimension_mismatch"} and Error{"invalid_k"}.
NeighborResult contrasting_neighbors(const EmbeddingIndex& index, std::span<const float> query,
                                     const std::string& model_fingerprint, int k = 5,
                                     const std::optional<ElementRef>& self = std::nullopt);

struct ExampleExplanation {
  model::PredictionResult prediction;
  NeighborResult neighbors;
};

ExampleExplanation explain_with_examples(const model::Classifier& model, const std::string& model_fingerprint,
                                         const EmbeddingIndex& index, const RgbImage& screenshot,
                                         const BoundingBox& bbox, int k = 5);

}  // namespace tap::retrieval
