#include "fvlm/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "fvlm/error.hpp"

namespace fvlm {

namespace {

constexpr std::uint64_t kShuffleSalt = 0x9e3779b97f4a7c15ULL;

struct Totals {
  double ce = 0.0;
  double mse = 0.0;
  double total = 0.0;
  std::size_t positions = 0;

  void add(const LossReport& r) {
    const auto n = static_cast<double>(r.positions);
    ce += r.ce * n;
    mse += r.mse * n;
    total += r.total * n;
    positions += r.positions;
  }
  double mean_ce() const { return positions ? ce / static_cast<double>(positions) : 0.0; }
  double mean_mse() const { return positions ? mse / static_cast<double>(positions) : 0.0; }
  double mean_total() const { return positions ? total / static_cast<double>(positions) : 0.0; }
};

enum class Metric { perplexity, mse };

double metric_of(const Totals& t, Metric metric) {
  return metric == Metric::perplexity ? std::exp(t.mean_ce()) : t.mean_mse();
}

// Per-sentence SGD shared by every architecture. loss(model, seq, grads)
// evaluates one sentence and accumulates gradients when grads is non-null.
template <class Model, class LossFn>
Model run_training(Model model, const Corpus& train, const Corpus& valid,
                   const TrainConfig& cfg, Metric metric, const TrainHooks& hooks,
                   LossFn&& loss) {
  cfg.validate();
  if (train.empty()) throw ValidationError("training corpus is empty");

  Model grads = model.zeros_like();
  const ParamSet grad_views = grads.params();
  OptimizerState opt{cfg.learning_rate, cfg.clip_norm, 0.0};

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.seed ^ kShuffleSalt);

  Model best = model;
  double best_metric = std::numeric_limits<double>::infinity();
  std::size_t stalled = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.shuffle) std::shuffle(order.begin(), order.end(), rng);
    Totals epoch_totals;
    const ParamSet param_views = model.params();
    for (std::size_t k = 0; k < order.size(); ++k) {
      const std::size_t index = order[k];
      zero(grad_views);
      LossReport r = loss(model, train[index], &grads);
      if (!std::isfinite(r.total)) {
        throw TrainingError("training diverged: loss is " + std::to_string(r.total) +
                            " at epoch " + std::to_string(epoch) + ", sentence " +
                            std::to_string(index));
      }
      if (cfg.sum_over_positions) {
        const auto scale = static_cast<double>(r.positions);
        for (const auto& g : grad_views) {
          for (double& v : g.values) v *= scale;
        }
      }
      try {
        sgd_step(param_views, grad_views, opt);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                            ", sentence " + std::to_string(index));
      }
      epoch_totals.add(r);
      if (hooks.on_step) hooks.on_step(StepLog{epoch, index, r});
    }

    double current = metric_of(epoch_totals, metric);
    if (!valid.empty()) {
      Totals valid_totals;
      for (std::size_t k = 0; k < valid.size(); ++k) {
        valid_totals.add(loss(model, valid[k], nullptr));
      }
      current = metric_of(valid_totals, metric);
    }
    if (!std::isfinite(current)) {
      throw TrainingError("training diverged: validation metric is not finite at epoch " +
                          std::to_string(epoch));
    }

    EpochLog log;
    log.epoch = epoch;
    log.ce = epoch_totals.mean_ce();
    log.mse = epoch_totals.mean_mse();
    log.total = epoch_totals.mean_total();
    log.ppl = std::exp(log.ce);
    log.valid_metric = current;
    log.learning_rate = opt.learning_rate;
    log.improved = current < best_metric;
    if (log.improved) {
      best_metric = current;
      best = model;
      stalled = 0;
    } else if (++stalled >= cfg.patience) {
      opt.learning_rate *= cfg.lr_decay;
      stalled = 0;
    }
    if (hooks.on_epoch) hooks.on_epoch(log);
  }
  return best;
}

Corpus maybe_reverse(const Corpus& corpus, Direction direction) {
  if (direction == Direction::forward) return corpus;
  Corpus out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) out.push_back(reverse_sequence(s));
  return out;
}

void check_vocab(const Corpus& corpus, std::size_t vocab_size, const char* what) {
  for (std::size_t k = 0; k < corpus.size(); ++k) {
    try {
      validate(corpus[k], vocab_size);
    } catch (const ValidationError& e) {
      throw ValidationError(std::string(what) + " sentence " + std::to_string(k) + ": " + e.what());
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train config: learning rate must be positive");
  if (!(clip_norm > 0.0)) throw ConfigError("train config: clip norm must be positive");
  if (epochs == 0) throw ConfigError("train config: epochs must be positive");
  if (!(valid_fraction >= 0.0 && valid_fraction < 1.0)) {
    throw ConfigError("train config: valid fraction must be in [0, 1)");
  }
  if (patience == 0) throw ConfigError("train config: patience must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) {
    throw ConfigError("train config: lr decay must be in (0, 1]");
  }
}

std::pair<Corpus, Corpus> split_validation(const Corpus& corpus, double fraction) {
  if (!(fraction >= 0.0 && fraction < 1.0)) {
    throw ConfigError("valid fraction must be in [0, 1)");
  }
  std::size_t held = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(corpus.size())));
  if (fraction > 0.0 && held == 0 && corpus.size() >= 2) held = 1;
  const auto cut = corpus.begin() + static_cast<std::ptrdiff_t>(corpus.size() - held);
  return {Corpus(corpus.begin(), cut), Corpus(cut, corpus.end())};
}

BaselineLm train_lm(const Corpus& train, const Corpus& valid, std::size_t vocab_size,
                    const LmConfig& config, const TrainConfig& train_config, Direction direction,
                    const TrainHooks& hooks) {
  const ArchKind kind = direction == Direction::forward ? ArchKind::baseline : ArchKind::reversed;
  check_vocab(train, vocab_size, "training");
  check_vocab(valid, vocab_size, "validation");
  const Corpus train_seqs = maybe_reverse(train, direction);
  const Corpus valid_seqs = maybe_reverse(valid, direction);
  BaselineLm model = BaselineLm::create(vocab_size, config, kind, train_config.seed);
  return run_training(std::move(model), train_seqs, valid_seqs, train_config, Metric::perplexity,
                      hooks,
                      [](const BaselineLm& m, const TokenSequence& s, BaselineLm* g) {
                        return lm_loss(m, s, g);
                      });
}

FvPredictor train_fv_predictor(const Corpus& train, const Corpus& valid,
                               const BaselineLm& extractor, const LmConfig& config,
                               const TrainConfig& train_config, const TrainHooks& hooks) {
  if (config.fv_dim != extractor.stack.output_dim()) {
    throw ConfigError("fv_dim " + std::to_string(config.fv_dim) +
                      " does not match the extractor's top hidden width " +
                      std::to_string(extractor.stack.output_dim()));
  }
  const std::size_t n = extractor.vocab_size();
  check_vocab(train, n, "training");
  check_vocab(valid, n, "validation");
  FvPredictor model = FvPredictor::create(n, config, train_config.seed);
  return run_training(std::move(model), train, valid, train_config, Metric::mse, hooks,
                      [&extractor](const FvPredictor& m, const TokenSequence& s,
                                   FvPredictor* g) {
                        const auto z = extract_future_vectors(extractor, s);
                        return predictor_loss(m, s, z, g);
                      });
}

EnhancedLm train_enhanced(const Corpus& train, const Corpus& valid, const FvPredictor& predictor,
                          const LmConfig& config, const TrainConfig& train_config,
                          const TrainHooks& hooks) {
  const std::size_t n = predictor.vocab_size();
  check_vocab(train, n, "training");
  check_vocab(valid, n, "validation");
  EnhancedLm model = EnhancedLm::create(predictor, config, train_config.seed);
  // zeros_like() leaves the gradient's predictor empty, and params() never
  // exposes the predictor, so the optimizer cannot touch it.
  return run_training(std::move(model), train, valid, train_config, Metric::perplexity, hooks,
                      [](const EnhancedLm& m, const TokenSequence& s, EnhancedLm* g) {
                        return enhanced_loss(m, s, g);
                      });
}

MultiTaskLm train_mt(const Corpus& train, const Corpus& valid, std::size_t vocab_size,
                     const BaselineLm* extractor, const LmConfig& config,
                     const TrainConfig& train_config, const TrainHooks& hooks) {
  if (extractor) {
    if (config.fv_dim != extractor->stack.output_dim()) {
      throw ConfigError("fv_dim " + std::to_string(config.fv_dim) +
                        " does not match the extractor's top hidden width " +
                        std::to_string(extractor->stack.output_dim()));
    }
    if (extractor->vocab_size() != vocab_size) {
      throw ConfigError("extractor vocabulary size " + std::to_string(extractor->vocab_size()) +
                        " differs from " + std::to_string(vocab_size));
    }
  }
  check_vocab(train, vocab_size, "training");
  check_vocab(valid, vocab_size, "validation");
  MultiTaskLm model = MultiTaskLm::create(vocab_size, config, train_config.seed);
  const double lambda = config.lambda_mt;
  return run_training(std::move(model), train, valid, train_config, Metric::perplexity, hooks,
                      [extractor, lambda](const MultiTaskLm& m, const TokenSequence& s,
                                          MultiTaskLm* g) {
                        if (!extractor) return mt_loss(m, s, nullptr, lambda, g);
                        const auto z = extract_future_vectors(*extractor, s);
                        return mt_loss(m, s, &z, lambda, g);
                      });
}

}  // namespace fvlm
