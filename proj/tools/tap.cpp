#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tap/codec.hpp"
#include "tap/service.hpp"
#include "tap/synthetic.hpp"
#include "tap/train.hpp"

using nlohmann::json;
using namespace tap;

namespace {

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json metrics_json(const model::Metrics& m) {
  return {{"threshold", m.threshold},
          {"tp", m.confusion.tp},
          {"fp", m.confusion.fp},
          {"tn", m.confusion.tn},
          {"fn", m.confusion.fn},
          {"precision", optional_json(m.precision)},
          {"recall", optional_json(m.recall)},
          {"accuracy", optional_json(m.accuracy)},
          {"auc", optional_json(m.auc)}};
}

std::vector<ElementRef> all_refs(const data::Corpus& corpus) {
  std::vector<ElementRef> refs;
  for (const auto& e : data::labeled_elements(corpus)) refs.push_back(e.ref());
  return refs;
}

data::DatasetSplit load_or_make_split(const data::Corpus& corpus, const std::string& path, std::uint64_t seed) {
  if (!path.empty()) return data::split_from_json(codec::read_file(path));
  return data::make_split(data::labeled_elements(corpus), seed);
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

// Region rows from a manifest: {bbox, element_id?, view_type?}. With a
// screenshot id only that screen's rows are kept.
json regions_from_manifest(const std::string& path, const std::string& screenshot_id) {
  std::ifstream in(path);
  if (!in) throw Error("io_error", "cannot read " + path);
  json out = json::array();
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json row = json::parse(line, nullptr, false);
    if (row.is_discarded() || !row.is_object() || !row.contains("bbox")) {
      throw Error("malformed_manifest", path + ":" + std::to_string(n) + ": row needs a bbox");
    }
    if (!screenshot_id.empty() && row.value("screenshot_id", "") != screenshot_id) continue;
    json r = {{"bbox", row.at("bbox")}};
    if (row.contains("element_id")) r["element_id"] = row.at("element_id");
    if (row.contains("view_type")) r["view_type"] = row.at("view_type");
    out.push_back(std::move(r));
  }
  return out;
}

json request_json(const std::string& image_path, const BoundingBox& box) {
  return {{"image", codec::base64_encode(codec::read_file(image_path))},
          {"bbox", {box.x_min, box.y_min, box.x_max, box.y_max}},
          {"options", json::object()}};
}

// Unwraps an error body from the service into an exception.
json checked(const service::Response& r) {
  json j = json::parse(r.body);
  if (r.status != 200) {
    throw Error(j.value("code", "error"), j.value("message", "request failed"), j.value("field", ""));
  }
  return j;
}

void on_signal(int) { service::stop_server(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tappability prediction, attribution and example retrieval"};
  app.require_subcommand(1);
  app.set_config("--config", "", "TOML or INI file with option defaults");

  // data
  auto* data_cmd = app.add_subcommand("data", "Corpus ingest, splitting and synthetic screens");
  data_cmd->require_subcommand(1);

  std::string root, out, manifest = "manifest.jsonl", vocab_path;
  auto* ingest = data_cmd->add_subcommand("ingest", "Validate a corpus and write its normalized manifest");
  ingest->add_option("--root", root, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  ingest->add_option("--manifest", manifest, "Manifest file name inside root");
  ingest->add_option("--vocabulary", vocab_path, "View-type list, one per line")->check(CLI::ExistingFile);
  ingest->add_option("--out", out, "Normalized manifest output")->required();

  std::string corpus_dir, split_path;
  std::uint64_t seed = 0;
  bool by_screen = false;
  auto* split = data_cmd->add_subcommand("split", "Seeded 80/10/10 split of labeled elements");
  split->add_option("--corpus", corpus_dir, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  split->add_option("--seed", seed, "Shuffle seed");
  split->add_flag("--by-screen", by_screen, "Keep each screen's elements in one part");
  split->add_option("--out", out, "Split JSON output (stdout when omitted)");

  int n_screens = 100;
  auto* synth = data_cmd->add_subcommand("synth", "Write a synthetic corpus");
  synth->add_option("--n", n_screens, "Number of screens")->check(CLI::PositiveNumber);
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--out", out, "Output directory")->required();

  // model
  auto* model_cmd = app.add_subcommand("model", "Training, evaluation and prediction");
  model_cmd->require_subcommand(1);

  std::string preset = "desk", checkpoint, log_path;
  int epochs = 0;
  auto* train = model_cmd->add_subcommand("train", "Train a classifier");
  train->add_option("--corpus", corpus_dir, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  train->add_option("--preset", preset, "Training preset")->check(CLI::IsMember({"paper", "desk", "overfit"}));
  train->add_option("--seed", seed, "Initialization, shuffle and split seed");
  train->add_option("--split", split_path, "Split JSON (made from --seed when omitted)")->check(CLI::ExistingFile);
  train->add_option("--epochs", epochs, "Override the preset's epoch count");
  train->add_option("--out", checkpoint, "Checkpoint path")->required();
  train->add_option("--log", log_path, "Per-epoch JSON Lines log");

  std::string part = "test";
  double threshold = 0.5;
  auto* eval = model_cmd->add_subcommand("eval", "Metrics on a split part or the whole corpus");
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--corpus", corpus_dir)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", split_path, "Split JSON; whole corpus when omitted")->check(CLI::ExistingFile);
  eval->add_option("--part", part)->check(CLI::IsMember({"train", "validation", "test"}));
  eval->add_option("--threshold", threshold);

  std::string image_path, bbox_text;
  auto* predict = model_cmd->add_subcommand("predict", "Tappability of one region");
  predict->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  predict->add_option("--image", image_path)->required()->check(CLI::ExistingFile);
  predict->add_option("--bbox", bbox_text, "x0,y0,x1,y1 in image pixels")->required();

  // explain
  std::string regions_path, screenshot_id, out_prefix = "explain", index_dir, colormap = "blue_white_red";
  bool use_felzenszwalb = false;
  int steps = 128, k = 5;
  double area_fraction = 0.25;
  auto* explain = app.add_subcommand("explain", "Region-attribution heatmap for one prediction");
  explain->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  explain->add_option("--image", image_path)->required()->check(CLI::ExistingFile);
  explain->add_option("--bbox", bbox_text)->required();
  auto* regions_opt =
      explain->add_option("--regions", regions_path, "Manifest whose bboxes are the regions")->check(CLI::ExistingFile);
  explain->add_option("--screenshot-id", screenshot_id, "Keep only this screen's manifest rows");
  explain->add_flag("--felzenszwalb", use_felzenszwalb, "Segment the screenshot instead")->excludes(regions_opt);
  explain->add_option("--steps", steps, "Integration steps")->check(CLI::PositiveNumber);
  explain->add_option("--area-fraction", area_fraction, "Coverage of the merged region")->check(CLI::Range(0.0, 1.0));
  explain->add_option("--colormap", colormap)->check(CLI::IsMember({"blue_white_red", "gray"}));
  explain->add_option("--index", index_dir, "Also retrieve contrasting examples")->check(CLI::ExistingDirectory);
  explain->add_option("--k", k)->check(CLI::PositiveNumber);
  explain->add_option("--out-prefix", out_prefix);

  // index
  auto* index_cmd = app.add_subcommand("index", "Embedding index of a corpus");
  index_cmd->require_subcommand(1);
  double lower = 0.35, upper = 0.65;
  auto* build = index_cmd->add_subcommand("build", "Embed every corpus element");
  build->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  build->add_option("--corpus", corpus_dir)->required()->check(CLI::ExistingDirectory);
  build->add_option("--lower", lower, "Non-tappable below this probability");
  build->add_option("--upper", upper, "Tappable above this probability");
  build->add_option("--out", out)->required();

  auto* query = index_cmd->add_subcommand("query", "Contrasting neighbors of one region");
  query->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  query->add_option("--index", index_dir)->required()->check(CLI::ExistingDirectory);
  query->add_option("--image", image_path)->required()->check(CLI::ExistingFile);
  query->add_option("--bbox", bbox_text)->required();
  query->add_option("--k", k)->check(CLI::PositiveNumber);

  // serve
  service::ServiceConfig config;
  service::ServerOptions server;
  auto* serve = app.add_subcommand("serve", "HTTP JSON service");
  serve->add_option("--checkpoint", checkpoint)->envname("TAP_CHECKPOINT")->check(CLI::ExistingFile);
  serve->add_option("--index", index_dir)->envname("TAP_INDEX")->check(CLI::ExistingDirectory);
  serve->add_option("--corpus", corpus_dir, "Corpus for thumbnails")->envname("TAP_CORPUS")->check(CLI::ExistingDirectory);
  serve->add_option("--host", server.host)->envname("TAP_HOST");
  serve->add_option("--port", server.port)->envname("TAP_PORT")->check(CLI::Range(1, 65535));
  serve->add_option("--workers", server.workers, "HTTP worker threads")->envname("TAP_WORKERS")->check(CLI::PositiveNumber);
  serve->add_option("--static", server.static_dir, "Web UI directory served at /")->envname("TAP_STATIC");
  serve->add_option("--attribution-workers", config.attribution_workers)->envname("TAP_ATTRIBUTION_WORKERS");
  serve->add_option("--default-steps", config.default_steps)->envname("TAP_DEFAULT_STEPS");
  serve->add_option("--max-steps", config.max_steps)->envname("TAP_MAX_STEPS");
  serve->add_option("--default-k", config.default_k)->envname("TAP_DEFAULT_K");
  serve->add_option("--max-k", config.max_k)->envname("TAP_MAX_K");
  serve->add_option("--area-fraction", config.default_area_fraction)->envname("TAP_AREA_FRACTION");
  serve->add_option("--max-regions", config.max_regions)->envname("TAP_MAX_REGIONS");
  serve->add_option("--max-image-side", config.max_image_side)->envname("TAP_MAX_IMAGE_SIDE");
  serve->add_option("--max-image-bytes", config.max_image_bytes)->envname("TAP_MAX_IMAGE_BYTES");
  serve->add_option("--lower", config.cuts.lower, "Cut used when building an index from --corpus")->envname("TAP_LOWER");
  serve->add_option("--upper", config.cuts.upper)->envname("TAP_UPPER");
  serve->add_option("--colormap", config.colormap)->envname("TAP_COLORMAP");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*ingest) {
      const auto vocabulary =
          vocab_path.empty() ? data::ViewTypeVocabulary::android_default() : data::ViewTypeVocabulary::load(vocab_path);
      const data::Corpus corpus = data::ingest_corpus(root, manifest, vocabulary);
      codec::write_file_atomic(out, data::manifest_jsonl(corpus));
      for (const auto& r : corpus.rejections) {
        std::fprintf(stderr, "rejected line %d (%s/%s): %s\n", r.line, r.screenshot_id.c_str(), r.element_id.c_str(),
                     r.reason.c_str());
      }
      std::fprintf(stderr, "%zu screens, %zu elements, %zu rejected\n", corpus.screens.size(), corpus.element_count(),
                   corpus.rejections.size());
    } else if (*split) {
      const data::Corpus corpus = data::ingest_corpus(corpus_dir);
      const auto s = data::make_split(data::labeled_elements(corpus), seed,
                                      by_screen ? data::SplitMode::kScreen : data::SplitMode::kElement);
      if (out.empty()) {
        std::cout << data::split_to_json(s) << "\n";
      } else {
        codec::write_file_atomic(out, data::split_to_json(s));
      }
      std::fprintf(stderr, "train %zu, validation %zu, test %zu\n", s.train.size(), s.validation.size(), s.test.size());
    } else if (*synth) {
      data::write_corpus(data::generate_synthetic_corpus(n_screens, seed), out);
    } else if (*train) {
      const data::Corpus corpus = data::ingest_corpus(corpus_dir);
      const auto s = load_or_make_split(corpus, split_path, seed);
      model::TrainConfig tc = model::TrainConfig::preset_named(preset);
      tc.seed = seed;
      if (epochs > 0) {
        // Keep decay points proportional to the preset's schedule.
        std::vector<int> decay;
        for (int e : tc.decay_epochs) {
          const int d = static_cast<int>(static_cast<long long>(e) * epochs / tc.epochs);
          if (d >= 1 && d < epochs && (decay.empty() || d > decay.back())) decay.push_back(d);
        }
        tc.decay_epochs = std::move(decay);
        tc.epochs = epochs;
      }
      model::Classifier classifier(preset == "paper" ? nn::ArchConfig::paper() : nn::ArchConfig::desk(), seed);
      std::ofstream log;
      if (!log_path.empty()) log.open(log_path);
      model::TrainOptions options;
      options.checkpoint_path = checkpoint;
      options.on_epoch = [&](const model::EpochLog& e) {
        const json row = {{"epoch", e.epoch},
                          {"learning_rate", e.learning_rate},
                          {"train_loss", e.train_loss},
                          {"train_accuracy", e.train_accuracy},
                          {"validation_auc", optional_json(e.validation_auc)},
                          {"validation_precision", optional_json(e.validation_precision)},
                          {"validation_recall", optional_json(e.validation_recall)},
                          {"seconds", e.seconds}};
        std::fprintf(stderr, "%s\n", row.dump().c_str());
        if (log) log << row.dump() << "\n" << std::flush;
      };
      const auto result = model::train(classifier, corpus, s, tc, options);
      classifier.save(checkpoint);
      print({{"best_epoch", result.best_epoch},
             {"best_validation_auc", optional_json(result.best_validation_auc)},
             {"seconds", result.seconds},
             {"checkpoint", checkpoint},
             {"fingerprint", classifier.fingerprint()}});
    } else if (*eval) {
      const auto classifier = model::Classifier::load(checkpoint);
      const data::Corpus corpus = data::ingest_corpus(corpus_dir);
      std::vector<ElementRef> refs;
      if (split_path.empty()) {
        refs = all_refs(corpus);
      } else {
        const auto s = data::split_from_json(codec::read_file(split_path));
        refs = part == "train" ? s.train : part == "validation" ? s.validation : s.test;
      }
      json j = metrics_json(model::evaluate(classifier, corpus, refs, threshold));
      j["elements"] = refs.size();
      print(j);
    } else if (*predict) {
      const auto classifier = model::Classifier::load(checkpoint);
      const auto p = classifier.predict(load_png(image_path), parse_bbox(bbox_text));
      print({{"tap_probability", p.tap_probability}, {"decision", p.decision}});
    } else if (*explain) {
      service::ServiceConfig sc;
      sc.colormap = colormap;
      sc.max_steps = std::max(sc.max_steps, steps);
      sc.max_image_side = 1 << 15;
      sc.max_image_bytes = std::size_t{1} << 30;
      sc.max_regions = 1 << 30;
      sc.attribution_workers = 1;
      service::Service svc(sc);
      svc.set_model(std::make_shared<const model::Classifier>(model::Classifier::load(checkpoint)));
      if (!index_dir.empty()) {
        svc.set_index(std::make_shared<const retrieval::EmbeddingIndex>(retrieval::EmbeddingIndex::load(index_dir)));
      }
      json req = request_json(image_path, parse_bbox(bbox_text));
      req["options"] = {{"steps", steps}, {"k", k}, {"area_fraction", area_fraction}};
      if (use_felzenszwalb) {
        req["options"]["region_mode"] = "felzenszwalb";
      } else if (!regions_path.empty()) {
        req["options"]["regions"] = regions_from_manifest(regions_path, screenshot_id);
        req["options"]["region_mode"] = "ui_bbox";
      }
      json j = checked(svc.explain(req.dump()));
      codec::write_file_atomic(out_prefix + "_overlay.png", codec::base64_decode(j.at("heatmap_overlay_png").get<std::string>()));
      codec::write_file_atomic(out_prefix + "_filtered.png", codec::base64_decode(j.at("filtered_png").get<std::string>()));
      j.erase("heatmap_overlay_png");
      j.erase("filtered_png");
      codec::write_file_atomic(out_prefix + "_regions.json", j.dump(2) + "\n");
      for (const auto& w : j.at("warnings")) std::fprintf(stderr, "warning: %s\n", w.get<std::string>().c_str());
      std::fprintf(stderr, "p=%.4f, %d regions -> %s_{overlay,filtered}.png, %s_regions.json\n",
                   j.at("tap_probability").get<double>(), j.at("region_count").get<int>(), out_prefix.c_str(),
                   out_prefix.c_str());
    } else if (*build) {
      const auto classifier = model::Classifier::load(checkpoint);
      const data::Corpus corpus = data::ingest_corpus(corpus_dir);
      const retrieval::Cuts cuts{lower, upper};
      const auto index = retrieval::build_index(classifier, classifier.fingerprint(), corpus, cuts);
      index.save(out);
      std::fprintf(stderr, "%zu tappable, %zu non-tappable, %zu in the excluded band, %zu skipped\n",
                   index.tappable().size(), index.non_tappable().size(), index.excluded(), index.skipped.size());
    } else if (*query) {
      const auto classifier = model::Classifier::load(checkpoint);
      const auto index = retrieval::EmbeddingIndex::load(index_dir);
      const auto result =
          retrieval::explain_with_examples(classifier, classifier.fingerprint(), index, load_png(image_path),
                                           parse_bbox(bbox_text), k);
      const auto side = [](const std::vector<retrieval::Neighbor>& list) {
        json a = json::array();
        for (const auto& n : list) {
          a.push_back({{"screenshot_id", n.record.ref.screenshot_id},
                       {"element_id", n.record.ref.element_id},
                       {"bbox", {n.record.bbox.x_min, n.record.bbox.y_min, n.record.bbox.x_max, n.record.bbox.y_max}},
                       {"tap_probability", n.record.tap_probability},
                       {"distance", n.distance}});
        }
        return a;
      };
      print({{"tap_probability", result.prediction.tap_probability},
             {"decision", result.prediction.decision},
             {"tappable", side(result.neighbors.tappable)},
             {"non_tappable", side(result.neighbors.non_tappable)}});
    } else if (*serve) {
      config.validate();
      service::Service svc(config);
      if (!checkpoint.empty()) {
        svc.set_model(std::make_shared<const model::Classifier>(model::Classifier::load(checkpoint)));
      }
      std::shared_ptr<const data::Corpus> corpus;
      if (!corpus_dir.empty()) {
        corpus = std::make_shared<const data::Corpus>(data::ingest_corpus(corpus_dir));
        svc.set_corpus(corpus);
      }
      if (!index_dir.empty()) {
        svc.set_index(std::make_shared<const retrieval::EmbeddingIndex>(retrieval::EmbeddingIndex::load(index_dir)));
      } else if (corpus && svc.has_model()) {
        std::fprintf(stderr, "building index from %s\n", corpus_dir.c_str());
        svc.set_index(std::make_shared<const retrieval::EmbeddingIndex>(retrieval::build_index(
            model::Classifier::load(checkpoint), svc.fingerprint(), *corpus, config.cuts)));
      }
      if (!svc.has_model()) std::fprintf(stderr, "no checkpoint: predict and explain answer 503\n");
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      if (!service::run_server(svc, server)) {
        std::fprintf(stderr, "cannot bind %s:%d\n", server.host.c_str(), server.port);
        return 1;
      }
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", e.code().c_str(), e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
