#include "tap/train.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <numeric>

namespace tap::model {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Snapshot {
  std::vector<std::vector<float>> params;
  std::vector<std::vector<float>> buffers;
};

Snapshot snapshot(const nn::ResNet& net) {
  Snapshot s;
  for (const auto& p : net.params()) s.params.push_back(p.value);
  for (const auto& b : net.buffers()) s.buffers.push_back(b.value);
  return s;
}

void restore(nn::ResNet& net, const Snapshot& s) {
  for (std::size_t i = 0; i < s.params.size(); ++i) net.params()[i].value = s.params[i];
  for (std::size_t i = 0; i < s.buffers.size(); ++i) net.buffers()[i].value = s.buffers[i];
}

}  // namespace

PooledExamples::PooledExamples(const Classifier& model, const data::Corpus& corpus,
                               const std::vector<ElementRef>& refs)
    : refs_(refs) {
  const int ph = model.arch().pooled_height();
  const int pw = model.arch().pooled_width();
  height_ = ph;
  width_ = pw;
  plane_ = ph * pw;

  std::map<ElementRef, bool> labels;
  for (const auto& e : data::labeled_elements(corpus)) labels.emplace(e.ref(), e.majority_tappable);

  std::map<std::string, std::vector<int>> by_screen;
  for (int i = 0; i < static_cast<int>(refs_.size()); ++i) by_screen[refs_[i].screenshot_id].push_back(i);

  labels_.resize(refs_.size());
  screen_of_.resize(refs_.size());
  masks_.resize(refs_.size());
  for (const auto& [screen_id, members] : by_screen) {
    const data::ScreenRecord* screen = corpus.find_screen(screen_id);
    if (!screen) throw Error("unknown_element", "no screenshot " + screen_id + " in corpus");
    const LetterboxedScreen boxed = letterbox(*data::load_pixels(screen->screenshot));

    nn::Tensor rgb(3, 1, ph, pw);
    kernels::pool_interleaved_to_cnhw(boxed.rgb, kInputHeight, kInputWidth, 3, model.arch().input_pool, 1, 0,
                                      rgb.data);
    const int screen_index = static_cast<int>(screen_rgb_.size());
    screen_rgb_.push_back(std::move(rgb.data));

    std::map<std::string, const data::ElementAnnotation*> annotations;
    for (const auto& a : screen->annotations) annotations[a.element_id] = &a;
    for (int i : members) {
      const auto& ref = refs_[static_cast<std::size_t>(i)];
      auto label = labels.find(ref);
      auto ann = annotations.find(ref.element_id);
      if (label == labels.end() || ann == annotations.end()) {
        throw Error("unlabeled_element", ref.screenshot_id + "/" + ref.element_id + " has no complete label set");
      }
      const ModelInput input = encode_input(boxed, ann->second->bbox);
      nn::Tensor mask(1, 1, ph, pw);
      kernels::pool_interleaved_to_cnhw(input.mask_values(), kInputHeight, kInputWidth, 1, model.arch().input_pool,
                                        1, 0, mask.data);
      masks_[static_cast<std::size_t>(i)] = std::move(mask.data);
      labels_[static_cast<std::size_t>(i)] = label->second;
      screen_of_[static_cast<std::size_t>(i)] = screen_index;
    }
  }
}

nn::Tensor PooledExamples::gather(std::span<const int> indices) const {
  const int n = static_cast<int>(indices.size());
  nn::Tensor out(4, n, height_, width_);
  for (int b = 0; b < n; ++b) {
    const auto i = static_cast<std::size_t>(indices[static_cast<std::size_t>(b)]);
    const auto& rgb = screen_rgb_[static_cast<std::size_t>(screen_of_[i])];
    for (int c = 0; c < 3; ++c) {
      std::copy_n(rgb.begin() + static_cast<std::ptrdiff_t>(c) * plane_, plane_,
                  out.data.begin() + (static_cast<std::ptrdiff_t>(c) * n + b) * plane_);
    }
    std::copy_n(masks_[i].begin(), plane_, out.data.begin() + (static_cast<std::ptrdiff_t>(3) * n + b) * plane_);
  }
  return out;
}

std::vector<double> predict_probabilities(const Classifier& model, const PooledExamples& examples, int batch_size) {
  std::vector<double> out(static_cast<std::size_t>(examples.size()));
  std::vector<int> idx;
  for (int start = 0; start < examples.size(); start += batch_size) {
    const int end = std::min(examples.size(), start + batch_size);
    idx.resize(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto result = model.infer(examples.gather(idx));
    const int n = end - start;
    for (int b = 0; b < n; ++b) {
      out[static_cast<std::size_t>(start + b)] = tap_probability(result.logits.data[static_cast<std::size_t>(b)],
                                                                 result.logits.data[static_cast<std::size_t>(n + b)]);
    }
  }
  return out;
}

Metrics evaluate(const Classifier& model, const PooledExamples& examples, double threshold) {
  if (examples.size() == 0) throw Error("empty_test_set", "evaluation needs at least one element");
  const auto scores = predict_probabilities(model, examples);
  return compute_metrics(scores, examples.labels(), threshold);
}

Metrics evaluate(const Classifier& model, const data::Corpus& corpus, const std::vector<ElementRef>& refs,
                 double threshold) {
  return evaluate(model, PooledExamples(model, corpus, refs), threshold);
}

void sgd_step(std::vector<nn::Param>& params, const nn::Gradients& grads, nn::Gradients& velocity, double lr,
              double momentum, bool nesterov) {
  const float mu = static_cast<float>(momentum);
  const float rate = static_cast<float>(lr);
  for (std::size_t p = 0; p < params.size(); ++p) {
    float* w = params[p].value.data();
    const float* g = grads[p].data();
    float* v = velocity[p].data();
    const std::int64_t n = static_cast<std::int64_t>(params[p].value.size());
    if (nesterov) {
#pragma omp parallel for simd schedule(static) if (n > 65536)
      for (std::int64_t i = 0; i < n; ++i) {
        v[i] = mu * v[i] + g[i];
        w[i] -= rate * (g[i] + mu * v[i]);
      }
    } else {
#pragma omp parallel for simd schedule(static) if (n > 65536)
      for (std::int64_t i = 0; i < n; ++i) {
        v[i] = mu * v[i] + g[i];
        w[i] -= rate * v[i];
      }
    }
  }
}

TrainResult train(Classifier& model, const data::Corpus& corpus, const data::DatasetSplit& split,
                  const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (split.train.empty()) throw Error("empty_train_set", "training needs at least one element");
  const auto t0 = Clock::now();

  const PooledExamples train_set(model, corpus, split.train);
  std::optional<PooledExamples> val_set;
  if (!split.validation.empty()) val_set.emplace(model, corpus, split.validation);

  model.train_config = config;
  model.card.training_data = std::to_string(split.train.size()) + " train / " +
                             std::to_string(split.validation.size()) + " validation elements, split seed " +
                             std::to_string(split.seed);

  nn::ResNet& net = model.network();
  nn::Gradients grads = net.zero_gradients();
  nn::Gradients velocity = net.zero_gradients();
  Rng rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<int> order(static_cast<std::size_t>(train_set.size()));
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  std::optional<Snapshot> best;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto e0 = Clock::now();
    const double lr = config.learning_rate_at(epoch);
    rng.shuffle(std::span<int>(order));

    double loss_sum = 0.0;
    std::int64_t seen = 0, correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const int n = static_cast<int>(end - start);
      // Batch statistics of a single sample are degenerate.
      if (n < 2 && order.size() >= 2) continue;
      const nn::Tensor x = train_set.gather(std::span<const int>(order).subspan(start, static_cast<std::size_t>(n)));

      nn::Tape tape;
      const auto out = net.forward(x, nn::Mode::kTrain, &tape);
      nn::Tensor d_logits(2, n, 1, 1);
      double batch_loss = 0.0;
      for (int b = 0; b < n; ++b) {
        const double l0 = out.logits.data[static_cast<std::size_t>(b)];
        const double l1 = out.logits.data[static_cast<std::size_t>(n + b)];
        const bool y = train_set.label(order[start + static_cast<std::size_t>(b)]);
        const double m = std::max(l0, l1);
        const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
        batch_loss += lse - (y ? l1 : l0);
        const double p1 = std::exp(l1 - lse);
        d_logits.data[static_cast<std::size_t>(b)] = static_cast<float>(((1.0 - p1) - (y ? 0.0 : 1.0)) / n);
        d_logits.data[static_cast<std::size_t>(n + b)] = static_cast<float>((p1 - (y ? 1.0 : 0.0)) / n);
        correct += ((l1 > l0) == y);
      }
      if (!std::isfinite(batch_loss)) {
        throw Error("non_finite_loss", "non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch starting at " +
                                           std::to_string(start) + " (lr " + std::to_string(lr) + ")");
      }
      loss_sum += batch_loss;
      seen += n;

      for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0f);
      net.backward(tape, d_logits, nullptr, &grads, nullptr);
      net.update_running_stats(tape, static_cast<float>(config.bn_momentum));
      sgd_step(net.params(), grads, velocity, lr, config.momentum, config.nesterov);
    }

    EpochLog log;
    log.epoch = epoch + 1;
    log.learning_rate = lr;
    log.train_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    log.train_accuracy = seen ? 100.0 * static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
    if (val_set) {
      const Metrics m = evaluate(model, *val_set);
      log.validation_auc = m.auc;
      log.validation_precision = m.precision;
      log.validation_recall = m.recall;
      if (m.auc && (!result.best_validation_auc || *m.auc > *result.best_validation_auc)) {
        result.best_validation_auc = m.auc;
        result.best_epoch = epoch + 1;
        best = snapshot(net);
        model.card.epochs_run = epoch + 1;
        model.card.best_epoch = epoch + 1;
        model.card.best_validation_auc = m.auc;
        if (!options.checkpoint_path.empty()) model.save(options.checkpoint_path);
      }
    }
    log.seconds = seconds_since(e0);
    result.log.push_back(log);
    if (options.on_epoch) options.on_epoch(log);
  }

  if (best) {
    restore(net, *best);
  } else {
    result.best_epoch = config.epochs;
    model.card.best_epoch = config.epochs;
    model.card.best_validation_auc.reset();
  }
  model.card.epochs_run = config.epochs;
  if (!options.checkpoint_path.empty()) model.save(options.checkpoint_path);
  result.seconds = seconds_since(t0);
  return result;
}

}  // namespace tap::model
