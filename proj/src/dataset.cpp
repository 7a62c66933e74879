#include "tap/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "json.hpp"
#include "tap/codec.hpp"

namespace tap::data {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string image_path_for(const std::string& root, const json& row, const std::string& screenshot_id) {
  if (row.contains("image") && row["image"].is_string()) {
    const fs::path p = row["image"].get<std::string>();
    return p.is_absolute() ? p.string() : (fs::path(root) / p).string();
  }
  return (fs::path(root) / "screenshots" / (screenshot_id + ".png")).string();
}

std::optional<BoundingBox> bbox_from_json(const json& value) {
  if (!value.is_array() || value.size() != 4) return std::nullopt;
  int v[4];
  for (int i = 0; i < 4; ++i) {
    if (!value[i].is_number_integer()) return std::nullopt;
    v[i] = value[i].get<int>();
  }
  return BoundingBox{v[0], v[1], v[2], v[3]};
}

json annotation_row(const ElementAnnotation& a, const std::vector<bool>* votes, const Screenshot& screen) {
  json row;
  row["screenshot_id"] = a.screenshot_id;
  row["element_id"] = a.element_id;
  row["bbox"] = {a.bbox.x_min, a.bbox.y_min, a.bbox.x_max, a.bbox.y_max};
  row["view_type"] = a.view_type;
  row["is_leaf"] = a.is_leaf;
  row["declared_clickable"] = a.declared_clickable;
  if (a.parent_id) row["parent_id"] = *a.parent_id;
  if (screen.source_app) row["source_app"] = *screen.source_app;
  json v = json::array();
  if (votes) {
    for (bool b : *votes) v.push_back(b);
  }
  row["votes"] = v;
  return row;
}

}  // namespace

std::shared_ptr<const RgbImage> load_pixels(const Screenshot& screenshot) {
  if (screenshot.pixels) return screenshot.pixels;
  if (screenshot.path.empty()) throw Error("missing_image", "screenshot " + screenshot.id + " has no pixels");
  return std::make_shared<const RgbImage>(load_png(screenshot.path));
}

std::size_t Corpus::element_count() const {
  std::size_t n = 0;
  for (const auto& s : screens) n += s.annotations.size();
  return n;
}

const ScreenRecord* Corpus::find_screen(const std::string& id) const {
  for (const auto& s : screens) {
    if (s.screenshot.id == id) return &s;
  }
  return nullptr;
}

ViewTypeVocabulary ViewTypeVocabulary::android_default() {
  return ViewTypeVocabulary({"Button", "CheckBox", "CheckedTextView", "EditText", "FrameLayout", "GridView",
                             "HorizontalScrollView", "ImageButton", "ImageView", "LinearLayout", "ListView",
                             "ProgressBar", "RadioButton", "RatingBar", "RecyclerView", "RelativeLayout",
                             "ScrollView", "SeekBar", "Spinner", "Switch", "TextView", "ToggleButton", "View",
                             "WebView"});
}

ViewTypeVocabulary ViewTypeVocabulary::load(const std::string& path) {
  std::istringstream in(codec::read_file(path));
  std::vector<std::string> types;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    types.push_back(line.substr(b, e - b + 1));
  }
  if (types.empty()) throw Error("empty_vocabulary", "no view types in " + path);
  return ViewTypeVocabulary(std::move(types));
}

ViewTypeVocabulary::ViewTypeVocabulary(std::vector<std::string> types) : types_(std::move(types)) {
  std::sort(types_.begin(), types_.end());
  types_.erase(std::unique(types_.begin(), types_.end()), types_.end());
}

bool ViewTypeVocabulary::contains(const std::string& type) const {
  return std::binary_search(types_.begin(), types_.end(), type);
}

Corpus ingest_corpus(const std::string& root, const std::string& manifest, const ViewTypeVocabulary& vocabulary) {
  const fs::path manifest_path = fs::path(manifest).is_absolute() ? fs::path(manifest) : fs::path(root) / manifest;
  std::istringstream in(codec::read_file(manifest_path.string()));

  Corpus corpus;
  std::map<std::string, std::size_t> screen_index;
  std::map<std::string, std::optional<ImageSize>> probed;
  std::set<ElementRef> seen;

  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto reject = [&](std::string sid, std::string eid, std::string reason) {
      corpus.rejections.push_back({line_no, std::move(sid), std::move(eid), std::move(reason)});
    };

    json row = json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.is_object() || !row.contains("screenshot_id") || !row.contains("element_id") ||
        !row["screenshot_id"].is_string() || !row["element_id"].is_string()) {
      reject("", "", "malformed row");
      continue;
    }
    const std::string sid = row["screenshot_id"];
    const std::string eid = row["element_id"];

    const std::string image = image_path_for(root, row, sid);
    auto it = probed.find(image);
    if (it == probed.end()) {
      std::optional<ImageSize> size;
      if (fs::is_regular_file(image)) {
        try {
          size = probe_png(image);
        } catch (const Error&) {
        }
      }
      it = probed.emplace(image, size).first;
    }
    if (!it->second) {
      reject(sid, eid, "missing image");
      continue;
    }

    const auto box = row.contains("bbox") ? bbox_from_json(row["bbox"]) : std::nullopt;
    if (!box) {
      reject(sid, eid, "malformed bbox");
      continue;
    }
    if (auto problem = bbox_problem(*box, it->second->width, it->second->height)) {
      reject(sid, eid, *problem);
      continue;
    }

    const std::string view_type = row.value("view_type", std::string{});
    if (!vocabulary.contains(view_type)) {
      reject(sid, eid, "unknown view_type");
      continue;
    }

    std::vector<bool> votes;
    if (row.contains("votes") && row["votes"].is_array()) {
      bool ok = true;
      for (const auto& v : row["votes"]) {
        if (!v.is_boolean()) ok = false;
        else votes.push_back(v.get<bool>());
      }
      if (!ok) votes.clear();
    }
    if (votes.empty() || votes.size() > 5) {
      reject(sid, eid, "invalid vote count");
      continue;
    }

    if (!seen.insert({sid, eid}).second) {
      reject(sid, eid, "duplicate element_id");
      continue;
    }

    auto [pos, inserted] = screen_index.try_emplace(sid, corpus.screens.size());
    if (inserted) {
      ScreenRecord record;
      record.screenshot.id = sid;
      record.screenshot.path = image;
      record.screenshot.width = it->second->width;
      record.screenshot.height = it->second->height;
      if (row.contains("source_app") && row["source_app"].is_string()) {
        record.screenshot.source_app = row["source_app"].get<std::string>();
      }
      corpus.screens.push_back(std::move(record));
    }
    ScreenRecord& record = corpus.screens[pos->second];

    ElementAnnotation a;
    a.screenshot_id = sid;
    a.element_id = eid;
    a.bbox = *box;
    a.view_type = view_type;
    a.is_leaf = row.value("is_leaf", true);
    a.declared_clickable = row.value("declared_clickable", false);
    if (row.contains("parent_id") && row["parent_id"].is_string()) a.parent_id = row["parent_id"].get<std::string>();
    record.annotations.push_back(std::move(a));
    record.labels.push_back({{sid, eid}, std::move(votes)});
  }
  return corpus;
}

std::string manifest_jsonl(const Corpus& corpus) {
  std::string out;
  for (const auto& screen : corpus.screens) {
    std::map<ElementRef, const std::vector<bool>*> votes;
    for (const auto& l : screen.labels) votes[l.element] = &l.votes;
    for (const auto& a : screen.annotations) {
      auto it = votes.find(a.ref());
      json row = annotation_row(a, it == votes.end() ? nullptr : it->second, screen.screenshot);
      if (!screen.screenshot.path.empty() && !screen.screenshot.pixels) row["image"] = screen.screenshot.path;
      out += row.dump();
      out += '\n';
    }
  }
  return out;
}

void write_corpus(const Corpus& corpus, const std::string& root) {
  fs::create_directories(fs::path(root) / "screenshots");
  Corpus relocated = corpus;
  for (auto& screen : relocated.screens) {
    auto pixels = load_pixels(screen.screenshot);
    save_png((fs::path(root) / "screenshots" / (screen.screenshot.id + ".png")).string(), *pixels);
    // Rows without a path use the default image location.
    screen.screenshot.path.clear();
    screen.screenshot.pixels.reset();
  }
  codec::write_file_atomic((fs::path(root) / "manifest.jsonl").string(), manifest_jsonl(relocated));
}

// --- candidate selection -------------------------------------------------

LabelingSelector::LabelingSelector(const std::vector<ElementAnnotation>& tree) : tree_(tree) {
  std::unordered_map<std::string, int> index;
  for (int i = 0; i < static_cast<int>(tree.size()); ++i) {
    if (!index.emplace(tree[i].element_id, i).second) {
      throw Error("duplicate_element_id", "duplicate element_id " + tree[i].element_id, "element_id");
    }
  }
  parent_.assign(tree.size(), -1);
  for (int i = 0; i < static_cast<int>(tree.size()); ++i) {
    if (!tree[i].parent_id) continue;
    auto it = index.find(*tree[i].parent_id);
    if (it == index.end()) {
      throw Error("unknown_parent", "element " + tree[i].element_id + " has unknown parent " + *tree[i].parent_id,
                  "parent_id");
    }
    parent_[i] = it->second;
  }
  for (int i = 0; i < static_cast<int>(tree.size()); ++i) {
    int steps = 0;
    for (int p = parent_[i]; p >= 0; p = parent_[p]) {
      if (++steps > static_cast<int>(tree.size())) {
        throw Error("cyclic_hierarchy", "parent links form a cycle through " + tree[i].element_id, "parent_id");
      }
    }
  }
  taken_.assign(tree.size(), false);
}

int LabelingSelector::index_of(const std::string& element_id) const {
  for (int i = 0; i < static_cast<int>(tree_.size()); ++i) {
    if (tree_[i].element_id == element_id) return i;
  }
  throw Error("unknown_element", "no element " + element_id, "element_id");
}

bool LabelingSelector::is_ancestor(int ancestor, int node) const {
  for (int p = parent_[node]; p >= 0; p = parent_[p]) {
    if (p == ancestor) return true;
  }
  return false;
}

bool LabelingSelector::try_add(const std::string& element_id) {
  const int node = index_of(element_id);
  if (taken_[node]) return false;
  for (int other = 0; other < static_cast<int>(tree_.size()); ++other) {
    if (!taken_[other]) continue;
    if (!tree_[other].declared_clickable && is_ancestor(other, node)) return false;
    if (!tree_[node].declared_clickable && is_ancestor(node, other)) return false;
  }
  taken_[node] = true;
  accepted_.push_back(element_id);
  return true;
}

std::vector<ElementAnnotation> select_elements_for_labeling(const std::vector<ElementAnnotation>& tree,
                                                            std::uint64_t seed, int max_count) {
  if (tree.empty()) return {};
  LabelingSelector selector(tree);
  const int n = static_cast<int>(tree.size());

  std::vector<int> parent(n, -1);
  for (int i = 0; i < n; ++i) {
    if (tree[i].parent_id) parent[i] = selector.index_of(*tree[i].parent_id);
  }
  auto clickable_ancestor = [&](int i) {
    for (int p = parent[i]; p >= 0; p = parent[p]) {
      if (tree[p].declared_clickable) return true;
    }
    return false;
  };

  // Walking up from each leaf, the last clickable node seen is the topmost
  // one; nodes with no clickable ancestor are the only such candidates.
  std::vector<int> candidates;
  for (int i = 0; i < n; ++i) {
    if (clickable_ancestor(i)) continue;
    if (tree[i].declared_clickable || parent[i] >= 0) candidates.push_back(i);
  }

  Rng rng(seed);
  rng.shuffle(std::span<int>(candidates));
  std::vector<ElementAnnotation> chosen;
  for (int c : candidates) {
    if (static_cast<int>(chosen.size()) >= max_count) break;
    if (selector.try_add(tree[c].element_id)) chosen.push_back(tree[c]);
  }
  return chosen;
}

// --- labels ----------------------------------------------------------------

Aggregate aggregate_labels(const RaterLabelSet& votes) {
  if (votes.votes.size() != 5) {
    throw Error("incomplete_label_set", "incomplete label set", "votes");
  }
  const int yes = static_cast<int>(std::count(votes.votes.begin(), votes.votes.end(), true));
  Aggregate a;
  a.positive_votes = yes;
  a.majority_tappable = yes >= 3;
  a.agreement = std::max(yes, 5 - yes);
  a.positive_fraction = yes / 5.0;
  return a;
}

std::vector<LabeledElement> labeled_elements(const Corpus& corpus) {
  std::vector<LabeledElement> out;
  for (const auto& screen : corpus.screens) {
    std::map<ElementRef, const RaterLabelSet*> by_ref;
    for (const auto& l : screen.labels) by_ref[l.element] = &l;
    for (const auto& a : screen.annotations) {
      auto it = by_ref.find(a.ref());
      if (it == by_ref.end() || it->second->votes.size() != 5) continue;
      const Aggregate agg = aggregate_labels(*it->second);
      out.push_back({a, agg.majority_tappable, agg.agreement, agg.positive_votes, agg.positive_fraction});
    }
  }
  return out;
}

double AgreementTable::percent(int agreement) const {
  if (agreement < 3 || agreement > 5) throw Error("invalid_agreement", "agreement must be 3, 4 or 5");
  const auto t = total();
  return t == 0 ? 0.0 : 100.0 * static_cast<double>(count[agreement - 3]) / static_cast<double>(t);
}

AgreementTable agreement_table(const std::vector<LabeledElement>& elements) {
  AgreementTable table;
  for (const auto& e : elements) {
    if (e.agreement < 3 || e.agreement > 5) throw Error("invalid_agreement", "agreement outside 3..5");
    ++table.count[e.agreement - 3];
  }
  return table;
}

// --- splits ----------------------------------------------------------------

SplitSizes split_sizes(std::size_t n) {
  SplitSizes s;
  s.train = (8 * n + 5) / 10;
  s.validation = (n - s.train) / 2;
  s.test = n - s.train - s.validation;
  return s;
}

DatasetSplit make_split(const std::vector<LabeledElement>& elements, std::uint64_t seed, SplitMode mode) {
  if (elements.size() < 10) throw Error("too_small_to_split", "too small to split");
  std::vector<ElementRef> refs;
  refs.reserve(elements.size());
  for (const auto& e : elements) refs.push_back(e.ref());
  std::sort(refs.begin(), refs.end());
  if (std::adjacent_find(refs.begin(), refs.end()) != refs.end()) {
    throw Error("duplicate_element_id", "element listed twice in split input");
  }

  const SplitSizes sizes = split_sizes(refs.size());
  DatasetSplit split;
  split.seed = seed;
  Rng rng(seed);

  if (mode == SplitMode::kElement) {
    rng.shuffle(std::span<ElementRef>(refs));
    split.train.assign(refs.begin(), refs.begin() + sizes.train);
    split.validation.assign(refs.begin() + sizes.train, refs.begin() + sizes.train + sizes.validation);
    split.test.assign(refs.begin() + sizes.train + sizes.validation, refs.end());
    return split;
  }

  std::map<std::string, std::vector<ElementRef>> groups;
  for (auto& r : refs) groups[r.screenshot_id].push_back(r);
  std::vector<std::string> screens;
  for (const auto& [id, _] : groups) screens.push_back(id);
  rng.shuffle(std::span<std::string>(screens));
  for (const auto& id : screens) {
    auto& members = groups[id];
    std::vector<ElementRef>* target = &split.test;
    if (split.train.size() < sizes.train) target = &split.train;
    else if (split.validation.size() < sizes.validation) target = &split.validation;
    target->insert(target->end(), members.begin(), members.end());
  }
  return split;
}

std::string split_to_json(const DatasetSplit& split) {
  auto refs = [](const std::vector<ElementRef>& list) {
    json a = json::array();
    for (const auto& r : list) a.push_back({r.screenshot_id, r.element_id});
    return a;
  };
  json j;
  j["seed"] = split.seed;
  j["train"] = refs(split.train);
  j["validation"] = refs(split.validation);
  j["test"] = refs(split.test);
  return j.dump(1);
}

DatasetSplit split_from_json(const std::string& text) {
  const json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw Error("malformed_split", "split file is not a JSON object");
  auto refs = [&](const char* key) {
    std::vector<ElementRef> out;
    if (!j.contains(key) || !j[key].is_array()) throw Error("malformed_split", std::string("missing ") + key);
    for (const auto& r : j[key]) {
      if (!r.is_array() || r.size() != 2 || !r[0].is_string() || !r[1].is_string()) {
        throw Error("malformed_split", std::string("bad element reference in ") + key);
      }
      out.push_back({r[0].get<std::string>(), r[1].get<std::string>()});
    }
    return out;
  };
  DatasetSplit s;
  s.seed = j.value("seed", std::uint64_t{0});
  s.train = refs("train");
  s.validation = refs("validation");
  s.test = refs("test");
  return s;
}

}  // namespace tap::data
