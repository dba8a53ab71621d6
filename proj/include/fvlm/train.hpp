#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <utility>

#include "fvlm/corpus.hpp"
#include "fvlm/models.hpp"

namespace fvlm {

enum class Direction { forward, reversed };

/// Schedule and optimizer settings. None of these come from the model
/// description; they are the usual per-sentence SGD recipe.
struct TrainConfig {
  double learning_rate = 0.5;
  double clip_norm = 5.0;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  /// Share of the training corpus held out when no validation set is given.
  double valid_fraction = 0.1;
  /// Learning rate multiplier applied when the validation metric stalls.
  double lr_decay = 0.5;
  /// Consecutive non-improving epochs before the decay applies.
  std::size_t patience = 2;
  bool shuffle = true;
  /// Step on the sentence's summed loss (mean gradient times position
  /// count) rather than its mean.
  bool sum_over_positions = true;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  /// Position-weighted training means over the epoch.
  double ce = 0.0;
  double mse = 0.0;
  double total = 0.0;
  double ppl = 0.0;
  /// Selection metric on the validation set (PPL, or MSE for the
  /// predictor); equals the training value when there is no validation set.
  double valid_metric = 0.0;
  double learning_rate = 0.0;
  bool improved = false;
};

struct StepLog {
  std::size_t epoch = 0;
  std::size_t sentence = 0;
  LossReport loss;
};

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(const StepLog&)> on_step;
};

/// Splits off the last fraction of sentences (at least one when fraction > 0
/// and the corpus has two or more sentences).
std::pair<Corpus, Corpus> split_validation(const Corpus& corpus, double fraction);

/// Baseline LM, or the reversed LM used as future-vector extractor when
/// direction == reversed (every sentence is reversed before training).
BaselineLm train_lm(const Corpus& train, const Corpus& valid, std::size_t vocab_size,
                    const LmConfig& config, const TrainConfig& train_config, Direction direction,
                    const TrainHooks& hooks = {});

/// MSE regression of the extractor's future vectors; the extractor is only
/// read. config.fv_dim must equal the extractor's top width.
FvPredictor train_fv_predictor(const Corpus& train, const Corpus& valid,
                               const BaselineLm& extractor, const LmConfig& config,
                               const TrainConfig& train_config, const TrainHooks& hooks = {});

/// CE training of the enhanced LM around a frozen predictor.
EnhancedLm train_enhanced(const Corpus& train, const Corpus& valid, const FvPredictor& predictor,
                          const LmConfig& config, const TrainConfig& train_config,
                          const TrainHooks& hooks = {});

/// Joint CE + lambda * MSE training. With extractor == nullptr the FV branch
/// gets no supervision (CE-only run).
MultiTaskLm train_mt(const Corpus& train, const Corpus& valid, std::size_t vocab_size,
                     const BaselineLm* extractor, const LmConfig& config,
                     const TrainConfig& train_config, const TrainHooks& hooks = {});

}  // namespace fvlm
