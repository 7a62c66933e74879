#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tap/dataset.hpp"
#include "tap/metrics.hpp"
#include "tap/model.hpp"

namespace tap::model {

// Pooled model inputs for a set of labeled elements. Each screen is
// letterboxed and pooled once; masks are pooled per element.
class PooledExamples {
 public:
  // Throws Error{"element_vanishes"} for elements that collapse at model
  // resolution and Error{"unlabeled_element"} for refs without 5 votes.
  PooledExamples(const Classifier& model, const data::Corpus& corpus, const std::vector<ElementRef>& refs);

  int size() const { return static_cast<int>(refs_.size()); }
  const ElementRef& ref(int i) const { return refs_[static_cast<std::size_t>(i)]; }
  bool label(int i) const { return labels_[static_cast<std::size_t>(i)]; }
  std::vector<bool> labels() const { return labels_; }
  // Fills a [4, indices.size(), ph, pw] tensor.
  nn::Tensor gather(std::span<const int> indices) const;

 private:
  int height_ = 0;
  int width_ = 0;
  int plane_ = 0;
  std::vector<ElementRef> refs_;
  std::vector<bool> labels_;
  std::vector<int> screen_of_;
  std::vector<std::vector<float>> screen_rgb_;  // 3 x plane per screen
  std::vector<std::vector<float>> masks_;       // plane per element
};

// Tappable probabilities in inference mode.
std::vector<double> predict_probabilities(const Classifier& model, const PooledExamples& examples,
                                          int batch_size = 32);

Metrics evaluate(const Classifier& model, const PooledExamples& examples, double threshold = 0.5);
Metrics evaluate(const Classifier& model, const data::Corpus& corpus, const std::vector<ElementRef>& refs,
                 double threshold = 0.5);

struct EpochLog {
  int epoch = 0;  // 1-based
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;  // percent, from the training-mode passes
  std::optional<double> validation_auc;
  std::optional<double> validation_precision;
  std::optional<double> validation_recall;
  double seconds = 0.0;
};

struct TrainOptions {
  // When set, the best-validation checkpoint is written here as it improves.
  std::string checkpoint_path;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  std::optional<double> best_validation_auc;
  double seconds = 0.0;
};

// SGD with (Nesterov) momentum on softmax cross-entropy. Ends holding the
// weights from the epoch with the best validation AUC, or the final
// weights when the validation set cannot produce an AUC. Throws
// Error{"non_finite_loss"} if the loss diverges.
TrainResult train(Classifier& model, const data::Corpus& corpus, const data::DatasetSplit& split,
                  const TrainConfig& config, const TrainOptions& options = {});

// One optimizer step. velocity must match params in shape (zeros at start).
void sgd_step(std::vector<nn::Param>& params, const nn::Gradients& grads, nn::Gradients& velocity, double lr,
              double momentum, bool nesterov);

}  // namespace tap::model
