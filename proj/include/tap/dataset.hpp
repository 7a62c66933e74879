#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tap/common.hpp"
#include "tap/image.hpp"

namespace tap::data {

struct Screenshot {
  std::string id;
  std::optional<std::string> source_app;
  // Empty for in-memory screenshots.
  std::string path;
  int width = 0;
  int height = 0;
  // Decoded pixels when the screenshot is held in memory; file-backed
  // screenshots leave this null and are decoded on demand.
  std::shared_ptr<const RgbImage> pixels;
};

// Returns the stored raster or decodes it from path.
std::shared_ptr<const RgbImage> load_pixels(const Screenshot& screenshot);

struct ElementAnnotation {
  std::string screenshot_id;
  std::string element_id;
  BoundingBox bbox;
  std::string view_type;
  bool is_leaf = true;
  bool declared_clickable = false;
  // View-hierarchy parent, used only by candidate selection.
  std::optional<std::string> parent_id;

  ElementRef ref() const { return {screenshot_id, element_id}; }
};

struct RaterLabelSet {
  ElementRef element;
  std::vector<bool> votes;
};

struct LabeledElement {
  ElementAnnotation annotation;
  bool majority_tappable = false;
  int agreement = 0;
  int positive_votes = 0;
  double positive_fraction = 0.0;

  ElementRef ref() const { return annotation.ref(); }
};

struct ScreenRecord {
  Screenshot screenshot;
  std::vector<ElementAnnotation> annotations;
  std::vector<RaterLabelSet> labels;
};

struct Rejection {
  int line = 0;  // 1-based manifest line, 0 when not line-specific
  std::string screenshot_id;
  std::string element_id;
  std::string reason;
};

struct Corpus {
  std::vector<ScreenRecord> screens;
  std::vector<Rejection> rejections;

  std::size_t element_count() const;
  const ScreenRecord* find_screen(const std::string& id) const;
};

class ViewTypeVocabulary {
 public:
  // The 24 Android widget classes accepted by default.
  static ViewTypeVocabulary android_default();
  // One type name per line; blank lines and '#' comments ignored.
  static ViewTypeVocabulary load(const std::string& path);

  explicit ViewTypeVocabulary(std::vector<std::string> types);
  bool contains(const std::string& type) const;
  const std::vector<std::string>& types() const { return types_; }

 private:
  std::vector<std::string> types_;
};

// Reads root/<manifest> (JSON Lines, one element per row). Images resolve to
// the row's "image" field relative to root, or root/screenshots/<id>.png.
// Invalid rows are dropped and listed in Corpus::rejections.
Corpus ingest_corpus(const std::string& root, const std::string& manifest = "manifest.jsonl",
                     const ViewTypeVocabulary& vocabulary = ViewTypeVocabulary::android_default());

// Writes screenshots/<id>.png for in-memory screens plus manifest.jsonl.
void write_corpus(const Corpus& corpus, const std::string& root);
// Manifest rows only. File-backed screenshots carry their image path.
std::string manifest_jsonl(const Corpus& corpus);

// Candidates among a screen's view hierarchy: topmost clickable nodes on
// leaf-to-root paths, and non-clickable non-root nodes outside any
// clickable subtree. Candidates are visited in seeded random order and
// accepted unless that would pair a non-clickable element with one of its
// descendants, until max_count are chosen.
std::vector<ElementAnnotation> select_elements_for_labeling(const std::vector<ElementAnnotation>& tree,
                                                            std::uint64_t seed, int max_count = 5);

// Incremental form of the acceptance rule above.
class LabelingSelector {
 public:
  explicit LabelingSelector(const std::vector<ElementAnnotation>& tree);

  // Accepts the element when it is compatible with everything accepted so
  // far. Unknown ids throw.
  bool try_add(const std::string& element_id);
  const std::vector<std::string>& accepted() const { return accepted_; }
  bool is_ancestor(int ancestor, int node) const;
  int index_of(const std::string& element_id) const;

 private:
  const std::vector<ElementAnnotation>& tree_;
  std::vector<int> parent_;
  std::vector<bool> taken_;
  std::vector<std::string> accepted_;
};

struct Aggregate {
  bool majority_tappable = false;
  int agreement = 0;
  int positive_votes = 0;
  double positive_fraction = 0.0;
};

// Throws Error{"incomplete_label_set"} unless there are exactly 5 votes.
Aggregate aggregate_labels(const RaterLabelSet& votes);

// Elements with complete label sets, in corpus order.
std::vector<LabeledElement> labeled_elements(const Corpus& corpus);

struct AgreementTable {
  std::int64_t count[3] = {0, 0, 0};  // agreement 3, 4, 5

  std::int64_t total() const { return count[0] + count[1] + count[2]; }
  // Percentage of elements at the given agreement level (3..5).
  double percent(int agreement) const;
};

AgreementTable agreement_table(const std::vector<LabeledElement>& elements);

enum class SplitMode { kElement, kScreen };

struct DatasetSplit {
  std::vector<ElementRef> train;
  std::vector<ElementRef> validation;
  std::vector<ElementRef> test;
  std::uint64_t seed = 0;
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t validation = 0;
  std::size_t test = 0;
};

// train = round(0.8 n); the remainder is halved, validation taking the
// smaller half. Every part is within one element of 80/10/10.
SplitSizes split_sizes(std::size_t n);

// Shuffles element refs (sorted first, so input order does not matter)
// with the seed and cuts them 80/10/10. kScreen keeps each screen's
// elements together; part sizes then only approximate the proportions.
// Throws Error{"too_small_to_split"} below 10 elements.
DatasetSplit make_split(const std::vector<LabeledElement>& elements, std::uint64_t seed,
                        SplitMode mode = SplitMode::kElement);

std::string split_to_json(const DatasetSplit& split);
DatasetSplit split_from_json(const std::string& text);

}  // namespace tap::data
