#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "tap/codec.hpp"
#include "tap/retrieval.hpp"
#include "tap/synthetic.hpp"
#include "tap/train.hpp"

namespace tap::retrieval {
namespace {

namespace fs = std::filesystem;

EmbeddingRecord record(const std::string& id, double p, std::vector<float> v) {
  EmbeddingRecord r;
  r.ref = {"s", id};
  r.tap_probability = p;
  r.vector = std::move(v);
  r.thumbnails = thumbnail_refs(r.ref);
  return r;
}

TEST(Index, CutSemantics) {
  EmbeddingIndex index({}, "fp", 2);
  EXPECT_TRUE(index.add(record("a", 0.9, {0, 0})));
  EXPECT_FALSE(index.add(record("b", 0.5, {0, 1})));
  EXPECT_TRUE(index.add(record("c", 0.1, {1, 0})));
  EXPECT_EQ(index.tappable().size(), 1u);
  EXPECT_EQ(index.non_tappable().size(), 1u);
  EXPECT_EQ(index.excluded(), 1u);
  EXPECT_FALSE(index.add(record("edge", 0.65, {0, 0})));
  EXPECT_FALSE(index.add(record("edge2", 0.35, {0, 0})));

  EmbeddingIndex half({0.5, 0.5}, "fp", 1);
  for (double p : {0.0, 0.2, 0.49, 0.5, 0.51, 1.0}) half.add(record(std::to_string(p), p, {0}));
  EXPECT_EQ(half.tappable().size(), 2u);
  EXPECT_EQ(half.non_tappable().size(), 3u);
  EXPECT_EQ(half.excluded(), 1u);

  EXPECT_THROW(EmbeddingIndex({0.7, 0.3}, "fp", 2), Error);
  EXPECT_THROW(index.add(record("d", 0.9, {0, 0, 0})), Error);
  EXPECT_THROW(index.add(record("e", 1.5, {0, 0})), Error);
}

TEST(Index, SingleRecordEachSide) {
  EmbeddingIndex index({}, "fp", 2);
  index.add(record("t", 0.9, {1, 1}));
  index.add(record("n", 0.1, {-1, -1}));
  const auto r = contrasting_neighbors(index, std::vector<float>{0, 0}, "fp");
  ASSERT_EQ(r.tappable.size(), 1u);
  ASSERT_EQ(r.non_tappable.size(), 1u);
  EXPECT_EQ(r.tappable[0].record.ref.element_id, "t");
  EXPECT_DOUBLE_EQ(r.non_tappable[0].distance, std::sqrt(2.0));
}

EmbeddingIndex random_index(Rng& rng, int per_side, int dim) {
  EmbeddingIndex index({}, "fp", dim);
  std::vector<float> v(static_cast<std::size_t>(dim));
  for (int i = 0; i < 2 * per_side; ++i) {
    // Coarse values make exact distance ties common; every fifth record
    // repeats an earlier vector.
    if (i % 5 != 4) {
      for (auto& x : v) x = static_cast<float>(rng.uniform_int(-2, 2));
    }
    const double p = i % 2 ? rng.uniform(0.0, 0.3) : rng.uniform(0.7, 1.0);
    char id[16];
    std::snprintf(id, sizeof id, "e%03d", (i * 37) % (2 * per_side));
    index.add(record(id, p, v));
  }
  return index;
}

std::vector<std::pair<double, ElementRef>> brute(const std::vector<EmbeddingRecord>& side,
                                                 const std::vector<float>& q, int k) {
  std::vector<std::pair<double, ElementRef>> all;
  for (const auto& r : side) {
    double d = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) {
      const double t = static_cast<double>(r.vector[i]) - q[i];
      d += t * t;
    }
    if (r.vector == q) continue;
    all.push_back({std::sqrt(d), r.ref});
  }
  std::sort(all.begin(), all.end());
  all.resize(std::min(all.size(), static_cast<std::size_t>(k)));
  return all;
}

TEST(Neighbors, MatchesExhaustiveScanIncludingTies) {
  Rng rng(12);
  const auto index = random_index(rng, 200, 16);
  ASSERT_EQ(index.tappable().size(), 200u);
  for (int q = 0; q < 50; ++q) {
    std::vector<float> query(16);
    if (q % 4 == 0) {
      query = index.tappable()[static_cast<std::size_t>(q)].vector;
    } else {
      for (auto& x : query) x = static_cast<float>(rng.uniform_int(-2, 2));
    }
    const auto r = contrasting_neighbors(index, query, "fp", 5);
    for (Side side : {Side::kTappable, Side::kNonTappable}) {
      const auto& got = side == Side::kTappable ? r.tappable : r.non_tappable;
      const auto want = brute(index.side(side), query, 5);
      ASSERT_EQ(got.size(), want.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        EXPECT_EQ(got[i].distance, want[i].first);
        EXPECT_EQ(got[i].record.ref, want[i].second);
        if (i) EXPECT_LE(got[i - 1].distance, got[i].distance);
      }
    }
  }
}

TEST(Neighbors, SelfExclusionAndSmallSides) {
  EmbeddingIndex index({}, "fp", 1);
  index.add(record("a", 0.9, {0}));
  index.add(record("b", 0.9, {1}));
  index.add(record("c", 0.9, {3}));
  const auto r = contrasting_neighbors(index, std::vector<float>{0}, "fp", 5);
  ASSERT_EQ(r.tappable.size(), 2u);
  EXPECT_EQ(r.tappable[0].record.ref.element_id, "b");
  EXPECT_TRUE(r.non_tappable.empty());
  EXPECT_TRUE(r.non_tappable_empty);
  EXPECT_FALSE(r.tappable_empty);
  const auto by_ref = contrasting_neighbors(index, std::vector<float>{0.9f}, "fp", 5, ElementRef{"s", "b"});
  ASSERT_EQ(by_ref.tappable.size(), 2u);
  EXPECT_EQ(by_ref.tappable[0].record.ref.element_id, "a");
}

TEST(Neighbors, Errors) {
  EmbeddingIndex index({}, "fp", 1);
  EXPECT_THROW(contrasting_neighbors(index, std::vector<float>{0}, "fp"), Error);
  index.add(record("a", 0.9, {0}));
  try {
    contrasting_neighbors(index, std::vector<float>{0}, "other");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "fingerprint_mismatch");
    EXPECT_STREQ(e.what(), "index built by different model");
  }
  EXPECT_THROW(contrasting_neighbors(index, std::vector<float>{0, 1}, "fp"), Error);
  EXPECT_THROW(contrasting_neighbors(index, std::vector<float>{0}, "fp", 0), Error);
}

TEST(Index, ThumbnailRefsAreEscaped) {
  const auto t = thumbnail_refs({"a b", "x&y"});
  EXPECT_EQ(t.screenshot, "/api/corpus/thumbnail?id=a%20b");
  EXPECT_EQ(t.region, "/api/corpus/thumbnail?id=a%20b&element=x%26y");
}

class Built : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    corpus_ = new data::Corpus(data::generate_synthetic_corpus(100, 77));
    model_ = new model::Classifier(nn::ArchConfig::desk(), 5);
    const auto elements = data::labeled_elements(*corpus_);
    data::DatasetSplit split = data::make_split(elements, 1);
    model::TrainConfig config = model::TrainConfig::desk();
    config.epochs = 12;
    config.decay_epochs = {8};
    model::train(*model_, *corpus_, split, config);
    fingerprint_ = new std::string(model_->fingerprint());
    index_ = new EmbeddingIndex(build_index(*model_, *fingerprint_, *corpus_));
  }
  static void TearDownTestSuite() {
    delete index_;
    delete fingerprint_;
    delete model_;
    delete corpus_;
  }
  static data::Corpus* corpus_;
  static model::Classifier* model_;
  static std::string* fingerprint_;
  static EmbeddingIndex* index_;
};

std::string* Built::fingerprint_ = nullptr;
EmbeddingIndex* Built::index_ = nullptr;

data::Corpus* Built::corpus_ = nullptr;
model::Classifier* Built::model_ = nullptr;

TEST_F(Built, EveryElementOnceAndDeterministic) {
  const std::string& fp = *fingerprint_;
  const auto& a = *index_;
  EXPECT_EQ(a.tappable().size() + a.non_tappable().size() + a.excluded() + a.skipped.size(),
            corpus_->element_count());
  for (const auto& r : a.tappable()) EXPECT_GT(r.tap_probability, 0.65);
  for (const auto& r : a.non_tappable()) EXPECT_LT(r.tap_probability, 0.35);

  const fs::path d1 = fs::temp_directory_path() / "tap_index_a";
  const fs::path d2 = fs::temp_directory_path() / "tap_index_b";
  a.save(d1.string());
  build_index(*model_, fp, *corpus_).save(d2.string());
  for (const char* f : {"vectors.bin", "records.jsonl", "index.json"}) {
    EXPECT_EQ(codec::read_file((d1 / f).string()), codec::read_file((d2 / f).string())) << f;
  }
  const auto loaded = EmbeddingIndex::load(d1.string());
  EXPECT_EQ(loaded.fingerprint(), fp);
  ASSERT_EQ(loaded.tappable().size(), a.tappable().size());
  EXPECT_EQ(loaded.tappable()[0].vector, a.tappable()[0].vector);
  EXPECT_EQ(loaded.non_tappable().back().ref, a.non_tappable().back().ref);
}

TEST_F(Built, ButtonQueryFindsButtons) {
  const std::string& fp = *fingerprint_;
  const auto& index = *index_;
  std::map<ElementRef, std::string> kinds;
  for (const auto& s : corpus_->screens) {
    for (const auto& a : s.annotations) kinds[a.ref()] = a.view_type;
  }
  const auto fresh = data::generate_synthetic_corpus(3, 4242);
  int checked = 0;
  for (const auto& s : fresh.screens) {
    for (const auto& a : s.annotations) {
      if (a.view_type != "Button") continue;
      const auto ex = explain_with_examples(*model_, fp, index, *data::load_pixels(s.screenshot), a.bbox);
      EXPECT_LE(ex.neighbors.tappable.size(), 5u);
      for (const auto& n : ex.neighbors.tappable) EXPECT_EQ(kinds[n.record.ref], "Button");
      ++checked;
    }
  }
  EXPECT_GT(checked, 0);
}

TEST_F(Built, QueryFromCorpusExcludesItself) {
  const std::string& fp = *fingerprint_;
  const auto& index = *index_;
  const auto& r = index.tappable().front();
  const data::ScreenRecord* s = corpus_->find_screen(r.ref.screenshot_id);
  const auto pred = model_->predict(*data::load_pixels(s->screenshot), r.bbox);
  EXPECT_EQ(pred.embedding, r.vector);
  const auto n = contrasting_neighbors(index, pred.embedding, fp);
  for (const auto& nb : n.tappable) EXPECT_NE(nb.record.ref, r.ref);
  EXPECT_THROW(contrasting_neighbors(index, pred.embedding, model::Classifier(nn::ArchConfig::desk(), 1).fingerprint()),
               Error);
}

}  // namespace
}  // namespace tap::retrieval
