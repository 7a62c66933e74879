#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "tap/codec.hpp"
#include "tap/dataset.hpp"
#include "tap/synthetic.hpp"

namespace tap::data {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("tap_dataset_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir / "screenshots");
  return dir;
}

void write_manifest(const fs::path& dir, const std::string& text) {
  std::ofstream(dir / "manifest.jsonl") << text;
}

std::string row(const std::string& sid, const std::string& eid, const std::string& bbox,
                const std::string& votes = "[true,true,true,false,false]", const std::string& type = "Button") {
  return R"({"screenshot_id":")" + sid + R"(","element_id":")" + eid + R"(","bbox":)" + bbox +
         R"(,"view_type":")" + type + R"(","is_leaf":true,"declared_clickable":true,"votes":)" + votes + "}\n";
}

TEST(Ingest, SingleValidRow) {
  const auto dir = scratch_dir("single");
  save_png((dir / "screenshots" / "s1.png").string(), RgbImage(20, 30, 128));
  write_manifest(dir, row("s1", "a", "[1,2,10,20]"));
  const Corpus c = ingest_corpus(dir.string());
  ASSERT_EQ(c.screens.size(), 1u);
  EXPECT_TRUE(c.rejections.empty());
  EXPECT_EQ(c.screens[0].screenshot.width, 20);
  EXPECT_EQ(c.screens[0].screenshot.height, 30);
  EXPECT_EQ(c.screens[0].annotations[0].bbox, (BoundingBox{1, 2, 10, 20}));
}

TEST(Ingest, RejectionReasons) {
  const auto dir = scratch_dir("reject");
  save_png((dir / "screenshots" / "s1.png").string(), RgbImage(20, 30, 128));
  write_manifest(dir, row("s1", "ok", "[0,0,5,5]") +            //
                          row("s1", "flat", "[3,0,3,5]") +      // x_min = x_max
                          row("s1", "out", "[0,0,21,5]") +      //
                          row("s2", "nofile", "[0,0,5,5]") +    //
                          row("s1", "ok", "[1,1,5,5]") +        // duplicate
                          row("s1", "bad", "[0,0,5]") +         //
                          row("s1", "novotes", "[0,0,5,5]", "[]") +
                          row("s1", "sixvotes", "[0,0,5,5]", "[true,true,true,true,true,true]") +
                          row("s1", "weird", "[0,0,5,5]", "[true]", "Hologram") + "not json\n");
  const Corpus c = ingest_corpus(dir.string());
  ASSERT_EQ(c.element_count(), 1u);
  std::vector<std::string> reasons;
  for (const auto& r : c.rejections) reasons.push_back(r.reason);
  EXPECT_EQ(reasons, (std::vector<std::string>{"degenerate bbox", "bbox out of bounds", "missing image",
                                               "duplicate element_id", "malformed bbox", "invalid vote count",
                                               "invalid vote count", "unknown view_type", "malformed row"}));
  EXPECT_EQ(c.rejections[0].line, 2);
  EXPECT_EQ(c.rejections[0].element_id, "flat");
}

TEST(Ingest, PartialVotesAcceptedButNotLabeled) {
  const auto dir = scratch_dir("partial");
  save_png((dir / "screenshots" / "s1.png").string(), RgbImage(8, 8, 0));
  write_manifest(dir, row("s1", "a", "[0,0,4,4]", "[true,false]") + row("s1", "b", "[0,0,4,4]"));
  const Corpus c = ingest_corpus(dir.string());
  EXPECT_EQ(c.element_count(), 2u);
  const auto labeled = labeled_elements(c);
  ASSERT_EQ(labeled.size(), 1u);
  EXPECT_EQ(labeled[0].annotation.element_id, "b");
}

TEST(Ingest, CustomVocabulary) {
  const auto dir = scratch_dir("vocab");
  save_png((dir / "screenshots" / "s1.png").string(), RgbImage(8, 8, 0));
  write_manifest(dir, row("s1", "a", "[0,0,4,4]", "[true]", "Chip"));
  std::ofstream(dir / "types.txt") << "# custom\nChip\n\n";
  EXPECT_EQ(ingest_corpus(dir.string()).element_count(), 0u);
  EXPECT_EQ(ingest_corpus(dir.string(), "manifest.jsonl", ViewTypeVocabulary::load((dir / "types.txt").string()))
                .element_count(),
            1u);
  EXPECT_EQ(ViewTypeVocabulary::android_default().types().size(), 24u);
}

TEST(Synthetic, RoundTripsThroughDisk) {
  const Corpus original = generate_synthetic_corpus(6, 99);
  const auto dir = scratch_dir("roundtrip");
  write_corpus(original, dir.string());
  const Corpus back = ingest_corpus(dir.string());
  EXPECT_TRUE(back.rejections.empty());
  ASSERT_EQ(back.screens.size(), original.screens.size());
  for (std::size_t i = 0; i < back.screens.size(); ++i) {
    const auto& a = original.screens[i];
    const auto& b = back.screens[i];
    EXPECT_EQ(a.screenshot.id, b.screenshot.id);
    EXPECT_EQ(a.screenshot.source_app, b.screenshot.source_app);
    EXPECT_EQ(*load_pixels(a.screenshot), *load_pixels(b.screenshot));
    ASSERT_EQ(a.annotations.size(), b.annotations.size());
    for (std::size_t k = 0; k < a.annotations.size(); ++k) {
      EXPECT_EQ(a.annotations[k].element_id, b.annotations[k].element_id);
      EXPECT_EQ(a.annotations[k].bbox, b.annotations[k].bbox);
      EXPECT_EQ(a.annotations[k].view_type, b.annotations[k].view_type);
      EXPECT_EQ(a.annotations[k].declared_clickable, b.annotations[k].declared_clickable);
      EXPECT_EQ(a.labels[k].votes, b.labels[k].votes);
    }
  }
  const auto again = scratch_dir("roundtrip_again");
  write_corpus(back, again.string());
  EXPECT_EQ(codec::read_file((again / "manifest.jsonl").string()), codec::read_file((dir / "manifest.jsonl").string()));
}

TEST(Synthetic, EachScreenHasBothClasses) {
  const Corpus c = generate_synthetic_corpus(1, 3);
  ASSERT_EQ(c.screens.size(), 1u);
  int tappable = 0, other = 0;
  for (const auto& e : labeled_elements(c)) (e.majority_tappable ? tappable : other)++;
  EXPECT_GE(tappable, 1);
  EXPECT_GE(other, 1);
  for (int seed = 0; seed < 50; ++seed) {
    const auto labels = labeled_elements(generate_synthetic_corpus(1, seed));
    EXPECT_TRUE(std::any_of(labels.begin(), labels.end(), [](auto& e) { return e.majority_tappable; }));
    EXPECT_TRUE(std::any_of(labels.begin(), labels.end(), [](auto& e) { return !e.majority_tappable; }));
  }
}

TEST(Synthetic, ClassBalance) {
  const auto labels = labeled_elements(generate_synthetic_corpus(200, 11));
  const double share =
      std::count_if(labels.begin(), labels.end(), [](auto& e) { return e.majority_tappable; }) /
      static_cast<double>(labels.size());
  EXPECT_GE(share, 0.4);
  EXPECT_LE(share, 0.6);
  for (const auto& e : labels) EXPECT_EQ(e.agreement, 5);
}

TEST(Synthetic, Deterministic) {
  const Corpus a = generate_synthetic_corpus(5, 21);
  const Corpus b = generate_synthetic_corpus(5, 21);
  const Corpus c = generate_synthetic_corpus(5, 22);
  for (std::size_t i = 0; i < a.screens.size(); ++i) EXPECT_EQ(*a.screens[i].screenshot.pixels, *b.screens[i].screenshot.pixels);
  EXPECT_NE(*a.screens[0].screenshot.pixels, *c.screens[0].screenshot.pixels);
  EXPECT_EQ(manifest_jsonl(a), manifest_jsonl(b));
}

TEST(Synthetic, ElementsDoNotOverlapAndStayInBounds) {
  for (const auto& s : generate_synthetic_corpus(50, 5).screens) {
    for (std::size_t i = 0; i < s.annotations.size(); ++i) {
      EXPECT_FALSE(bbox_problem(s.annotations[i].bbox, s.screenshot.width, s.screenshot.height));
      for (std::size_t j = i + 1; j < s.annotations.size(); ++j) {
        const auto& p = s.annotations[i].bbox;
        const auto& q = s.annotations[j].bbox;
        EXPECT_TRUE(p.y_max <= q.y_min || q.y_max <= p.y_min);
      }
    }
  }
}

TEST(Aggregate, Examples) {
  auto agg = [](std::vector<bool> v) { return aggregate_labels({{"s", "e"}, std::move(v)}); };
  const auto all = agg({true, true, true, true, true});
  EXPECT_TRUE(all.majority_tappable);
  EXPECT_EQ(all.agreement, 5);
  EXPECT_DOUBLE_EQ(all.positive_fraction, 1.0);
  const auto three = agg({true, true, true, false, false});
  EXPECT_TRUE(three.majority_tappable);
  EXPECT_EQ(three.agreement, 3);
  EXPECT_DOUBLE_EQ(three.positive_fraction, 0.6);
  const auto no = agg({false, true, false, false, false});
  EXPECT_FALSE(no.majority_tappable);
  EXPECT_EQ(no.agreement, 4);
  try {
    agg({true, true, true, true});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()), "incomplete label set");
  }
}

TEST(Aggregate, AllThirtyTwoVotePatterns) {
  for (int mask = 0; mask < 32; ++mask) {
    std::vector<bool> v;
    int yes = 0;
    for (int b = 0; b < 5; ++b) {
      v.push_back((mask >> b) & 1);
      yes += (mask >> b) & 1;
    }
    const auto a = aggregate_labels({{"s", "e"}, v});
    EXPECT_EQ(a.majority_tappable, yes >= 3);
    EXPECT_EQ(a.agreement, yes >= 3 ? yes : 5 - yes);
    EXPECT_GE(a.agreement, 3);
    EXPECT_EQ(a.majority_tappable, a.positive_fraction >= 0.6);
  }
}

TEST(Aggregate, TableRatios) {
  std::vector<LabeledElement> elements;
  auto add = [&](int n, int agreement) {
    for (int i = 0; i < n; ++i) {
      LabeledElement e;
      e.agreement = agreement;
      elements.push_back(e);
    }
  };
  add(4508, 3);
  add(5872, 4);
  add(8287, 5);
  const auto t = agreement_table(elements);
  EXPECT_EQ(t.total(), 18667);
  EXPECT_NEAR(t.percent(3), 24.1, 0.05);
  EXPECT_NEAR(t.percent(4), 31.5, 0.05);
  EXPECT_NEAR(t.percent(5), 44.4, 0.05);
}

std::vector<LabeledElement> fake_elements(int n, int per_screen = 1) {
  std::vector<LabeledElement> out;
  for (int i = 0; i < n; ++i) {
    LabeledElement e;
    e.annotation.screenshot_id = "s" + std::to_string(i / per_screen);
    e.annotation.element_id = "e" + std::to_string(i);
    out.push_back(e);
  }
  return out;
}

TEST(Split, Sizes) {
  const auto ten = split_sizes(10);
  EXPECT_EQ(ten.train, 8u);
  EXPECT_EQ(ten.validation, 1u);
  EXPECT_EQ(ten.test, 1u);
  const auto full = split_sizes(18667);
  EXPECT_EQ(full.train, 14934u);
  EXPECT_EQ(full.validation, 1866u);
  EXPECT_EQ(full.test, 1867u);
  for (std::size_t n = 10; n < 500; ++n) {
    const auto s = split_sizes(n);
    EXPECT_EQ(s.train + s.validation + s.test, n);
    EXPECT_LE(std::abs(static_cast<double>(s.train) - 0.8 * n), 1.0);
    EXPECT_LE(std::abs(static_cast<double>(s.validation) - 0.1 * n), 1.0);
    EXPECT_LE(std::abs(static_cast<double>(s.test) - 0.1 * n), 1.0);
  }
}

TEST(Split, PartitionAndDeterminism) {
  const auto elements = fake_elements(137);
  const auto a = make_split(elements, 5);
  const auto b = make_split(elements, 5);
  EXPECT_EQ(split_to_json(a), split_to_json(b));
  auto reversed = elements;
  std::reverse(reversed.begin(), reversed.end());
  EXPECT_EQ(split_to_json(make_split(reversed, 5)), split_to_json(a));
  EXPECT_NE(split_to_json(make_split(elements, 6)), split_to_json(a));

  std::set<ElementRef> all;
  for (const auto* part : {&a.train, &a.validation, &a.test}) {
    for (const auto& r : *part) EXPECT_TRUE(all.insert(r).second);
  }
  EXPECT_EQ(all.size(), elements.size());
  EXPECT_EQ(a.train.size(), 110u);

  const auto back = split_from_json(split_to_json(a));
  EXPECT_EQ(back.train, a.train);
  EXPECT_EQ(back.test, a.test);
  EXPECT_EQ(back.seed, 5u);
}

TEST(Split, TooSmall) {
  try {
    make_split(fake_elements(9), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()), "too small to split");
  }
}

TEST(Split, ScreenModeKeepsScreensTogether) {
  const auto split = make_split(fake_elements(200, 4), 3, SplitMode::kScreen);
  std::map<std::string, int> part_of;
  int idx = 0;
  for (const auto* part : {&split.train, &split.validation, &split.test}) {
    for (const auto& r : *part) {
      auto [it, inserted] = part_of.emplace(r.screenshot_id, idx);
      EXPECT_EQ(it->second, idx);
    }
    ++idx;
  }
  EXPECT_EQ(split.train.size() + split.validation.size() + split.test.size(), 200u);
  EXPECT_EQ(split.train.size(), 160u);
}

ElementAnnotation node(const std::string& id, std::optional<std::string> parent, bool clickable) {
  ElementAnnotation a;
  a.screenshot_id = "s";
  a.element_id = id;
  a.parent_id = std::move(parent);
  a.declared_clickable = clickable;
  a.bbox = {0, 0, 1, 1};
  return a;
}

std::vector<std::string> ids(const std::vector<ElementAnnotation>& list) {
  std::vector<std::string> out;
  for (const auto& a : list) out.push_back(a.element_id);
  return out;
}

TEST(Selection, SingleClickableLeaf) {
  EXPECT_EQ(ids(select_elements_for_labeling({node("leaf", std::nullopt, true)}, 1)),
            (std::vector<std::string>{"leaf"}));
  EXPECT_TRUE(select_elements_for_labeling({}, 1).empty());
}

TEST(Selection, ChildOfChosenNonClickableExcluded) {
  const std::vector<ElementAnnotation> tree{node("root", std::nullopt, false), node("card", "root", false),
                                            node("btn", "card", true)};
  LabelingSelector selector(tree);
  EXPECT_TRUE(selector.try_add("card"));
  EXPECT_FALSE(selector.try_add("btn"));

  LabelingSelector reverse(tree);
  EXPECT_TRUE(reverse.try_add("btn"));
  EXPECT_FALSE(reverse.try_add("card"));
}

TEST(Selection, TopmostClickableOnly) {
  // A clickable row containing a clickable icon: only the row is eligible.
  const std::vector<ElementAnnotation> tree{node("root", std::nullopt, false), node("row", "root", true),
                                            node("icon", "row", true), node("label", "row", false)};
  for (int seed = 0; seed < 20; ++seed) {
    EXPECT_EQ(ids(select_elements_for_labeling(tree, seed)), (std::vector<std::string>{"row"}));
  }
}

// root
//  +- header (n)          +- list (n)
//  |   +- title (n)       |   +- item1 (c) +- icon1 (c)
//  |   +- menu (c)        |   +- item2 (c)
//  +- fab (c)             |   +- item3 (c)
//  +- footer (n)
std::vector<ElementAnnotation> nine_eligible_tree() {
  return {node("root", std::nullopt, false), node("header", "root", false), node("title", "header", false),
          node("menu", "header", true),     node("list", "root", false),     node("item1", "list", true),
          node("icon1", "item1", true),     node("item2", "list", true),     node("item3", "list", true),
          node("fab", "root", true),        node("footer", "root", false),   node("ad", "list", false)};
}

TEST(Selection, NineEligibleGivesFiveDeterministically) {
  const auto tree = nine_eligible_tree();
  // Eligible: header title menu list item1 item2 item3 fab footer. icon1
  // sits under clickable item1 and root is the root. Conflicts between a
  // container and its children can leave fewer than five.
  for (int seed = 0; seed < 30; ++seed) {
    const auto chosen = select_elements_for_labeling(tree, seed);
    EXPECT_LE(chosen.size(), 5u);
    EXPECT_EQ(ids(chosen), ids(select_elements_for_labeling(tree, seed)));
    LabelingSelector check(tree);
    for (const auto& a : chosen) {
      EXPECT_NE(a.element_id, "icon1");
      EXPECT_NE(a.element_id, "root");
    }
    for (std::size_t i = 0; i < chosen.size(); ++i) {
      for (std::size_t j = 0; j < chosen.size(); ++j) {
        if (i == j) continue;
        const int a = check.index_of(chosen[i].element_id);
        const int b = check.index_of(chosen[j].element_id);
        if (!chosen[i].declared_clickable) EXPECT_FALSE(check.is_ancestor(a, b));
      }
    }
  }
}

TEST(Selection, NineIndependentCandidatesGiveExactlyFive) {
  std::vector<ElementAnnotation> tree{node("root", std::nullopt, false)};
  for (int i = 0; i < 9; ++i) tree.push_back(node("c" + std::to_string(i), "root", i % 2 == 0));
  const auto a = select_elements_for_labeling(tree, 42);
  EXPECT_EQ(a.size(), 5u);
  EXPECT_EQ(ids(a), ids(select_elements_for_labeling(tree, 42)));
}

TEST(Selection, RandomTreesNeverPairNonClickableAncestor) {
  Rng rng(17);
  for (int t = 0; t < 200; ++t) {
    const int n = rng.uniform_int(1, 25);
    std::vector<ElementAnnotation> tree;
    for (int i = 0; i < n; ++i) {
      std::optional<std::string> parent;
      if (i > 0) parent = "n" + std::to_string(rng.uniform_int(0, i - 1));
      tree.push_back(node("n" + std::to_string(i), parent, rng.bernoulli(0.4)));
    }
    const auto chosen = select_elements_for_labeling(tree, t);
    EXPECT_LE(chosen.size(), 5u);
    LabelingSelector check(tree);
    for (const auto& x : chosen) {
      for (const auto& y : chosen) {
        if (&x == &y || x.declared_clickable) continue;
        EXPECT_FALSE(check.is_ancestor(check.index_of(x.element_id), check.index_of(y.element_id)));
      }
    }
  }
}

TEST(Selection, CycleThrows) {
  EXPECT_THROW(select_elements_for_labeling({node("a", "b", true), node("b", "a", true)}, 1), Error);
}

}  // namespace
}  // namespace tap::data
