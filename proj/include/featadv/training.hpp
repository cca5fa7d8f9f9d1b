#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "featadv/dataset.hpp"
#include "featadv/models.hpp"

namespace featadv {

struct ClassifierTraining {
  int64_t epochs = 4;
  int64_t batch_size = 64;
  double learning_rate = 2e-3;
  uint64_t seed = 1;
  /// > 0 enables FGSM adversarial training with this L-inf radius.
  double adversarial_epsilon = 0.0;
  /// Keeps logits in a moderate range; without it the desk models become
  /// overconfident enough that no 1/16-area patch moves them.
  double label_smoothing = 0.1;
  double weight_decay = 1e-4;
};

/// Trains in place; returns held-out accuracy.
double train_classifier(Classifier& model, const LabeledImages& train, const LabeledImages& heldout,
                        const ClassifierTraining& options);

/// Fraction of `data` whose argmax matches the label.
double accuracy(Classifier& model, const LabeledImages& data);

struct GanTraining {
  int64_t iterations = 8000;
  int64_t batch_size = 64;
  double learning_rate = 2e-4;
  uint64_t seed = 7;
};

/// Class-conditional GAN training with the logistic (non-saturating) loss.
void train_gan(Generator& generator, Discriminator& discriminator, const LabeledImages& train,
               const GanTraining& options);

using ProgressFn = std::function<void(const std::string&)>;

/// Trains the full desk-scale suite and writes it under `dir`.
void train_model_suite(const std::filesystem::path& dir, const ProgressFn& progress = {});

}  // namespace featadv
