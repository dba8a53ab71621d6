#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fvlm/corpus.hpp"
#include "fvlm/lstm.hpp"
#include "fvlm/math.hpp"

namespace fvlm {

enum class ArchKind : std::uint32_t {
  baseline = 0,
  reversed = 1,
  fv_predictor = 2,
  enhanced = 3,
  multitask = 4,
};

std::string_view to_string(ArchKind kind);
/// Accepts the CLI spellings: baseline, reversed, fv-predictor, enhanced, mt.
ArchKind parse_arch(std::string_view name);

struct LmConfig {
  std::size_t embed_dim = 300;
  std::size_t hidden_dim = 300;
  std::size_t num_layers = 3;
  std::size_t mt_shared_layers = 2;
  std::size_t mt_branch_layers = 1;
  double lambda_mt = 1.0;
  std::size_t fv_dim = 300;

  /// Throws ConfigError on zero widths or, for the multi-task model, a layer
  /// split that does not add up to num_layers.
  void validate(ArchKind kind) const;
  bool operator==(const LmConfig&) const = default;
};

using FutureVector = Vector;

struct SoftmaxHead {
  SoftmaxHead() = default;
  SoftmaxHead(std::size_t vocab_size, std::size_t input_dim) : w(vocab_size, input_dim), b(vocab_size) {}
  Matrix w;
  Vector b;
};

struct LinearHead {
  LinearHead() = default;
  LinearHead(std::size_t output_dim, std::size_t input_dim) : w(output_dim, input_dim), b(output_dim) {}
  Matrix w;
  Vector b;
};

/// Embedding, LSTM stack, softmax. Also serves as the reversed-order model
/// (kind == reversed) whose top layer supplies the future vectors.
struct BaselineLm {
  BaselineLm() = default;
  /// Zero parameters.
  BaselineLm(std::size_t vocab_size, const LmConfig& config, ArchKind kind = ArchKind::baseline);
  static BaselineLm create(std::size_t vocab_size, const LmConfig& config, ArchKind kind,
                           std::uint64_t seed);

  std::size_t vocab_size() const { return embedding.rows(); }
  ParamSet params();
  BaselineLm zeros_like() const;

  ArchKind kind = ArchKind::baseline;
  LmConfig config;
  Matrix embedding;
  LstmStack stack;
  SoftmaxHead head;
};

/// Embedding, LSTM stack, linear head regressing the next future vector.
struct FvPredictor {
  FvPredictor() = default;
  FvPredictor(std::size_t vocab_size, const LmConfig& config);
  static FvPredictor create(std::size_t vocab_size, const LmConfig& config, std::uint64_t seed);

  std::size_t vocab_size() const { return embedding.rows(); }
  std::size_t fv_dim() const { return head.b.size(); }
  ParamSet params();
  FvPredictor zeros_like() const;

  LmConfig config;
  Matrix embedding;
  LstmStack stack;
  LinearHead head;
};

/// LM whose layer-0 input is (embedding, predicted future vector). The
/// predictor is frozen: params() excludes it.
struct EnhancedLm {
  EnhancedLm() = default;
  EnhancedLm(FvPredictor predictor, const LmConfig& config);
  static EnhancedLm create(FvPredictor predictor, const LmConfig& config, std::uint64_t seed);

  std::size_t vocab_size() const { return embedding.rows(); }
  /// Trainable blocks only.
  ParamSet params();
  ParamSet predictor_params() { return predictor.params(); }
  /// Gradient container; its predictor is left empty.
  EnhancedLm zeros_like() const;

  FvPredictor predictor;
  LmConfig config;
  Matrix embedding;
  LstmStack stack;
  SoftmaxHead head;
};

/// Shared trunk reading (embedding, own previous prediction) feeding a word
/// branch (softmax) and a future-vector branch (linear).
struct MultiTaskLm {
  MultiTaskLm() = default;
  MultiTaskLm(std::size_t vocab_size, const LmConfig& config);
  static MultiTaskLm create(std::size_t vocab_size, const LmConfig& config, std::uint64_t seed);

  std::size_t vocab_size() const { return embedding.rows(); }
  std::size_t fv_dim() const { return fv_head.b.size(); }
  ParamSet params();
  MultiTaskLm zeros_like() const;

  LmConfig config;
  Matrix embedding;
  LstmStack trunk;
  LstmStack word_branch;
  SoftmaxHead word_head;
  LstmStack fv_branch;
  LinearHead fv_head;
};

using LanguageModel = std::variant<BaselineLm, EnhancedLm, MultiTaskLm>;

std::size_t vocab_size(const LanguageModel& model);
ArchKind kind_of(const LanguageModel& model);

// ---------------------------------------------------------------------------
// Losses

inline constexpr double kProbabilityFloor = 1e-30;

struct LossReport {
  double ce = 0.0;
  double mse = 0.0;
  /// ce + lambda * mse for the multi-task model, otherwise the trained loss.
  double total = 0.0;
  std::size_t positions = 0;
  /// Targets whose probability fell below kProbabilityFloor.
  std::size_t clamped = 0;
};

/// Mean over positions of -ln p_t[target_t]. Probabilities below
/// kProbabilityFloor are clamped and counted in *clamped.
double ce_loss(const std::vector<Vector>& predicted, const std::vector<TokenId>& targets,
               std::size_t* clamped = nullptr);

/// Mean over positions of (1/m) sum_j (y_j - z_j)^2.
double mse_loss(const std::vector<Vector>& predicted, const std::vector<Vector>& targets);

/// Next-token targets of a sequence: ids[1..].
std::vector<TokenId> targets_of(const TokenSequence& seq);

// ---------------------------------------------------------------------------
// Forward passes. For a sequence of T tokens all of these produce T-1
// outputs; output t is computed after consuming ids[0..t].

std::vector<Vector> lm_forward(const BaselineLm& model, const TokenSequence& seq);

/// Entry j is the extractor's top-layer h after reading ids[T-1] .. ids[j+1]
/// right to left, i.e. the future vector of the suffix starting at j+1.
std::vector<FutureVector> extract_future_vectors(const BaselineLm& extractor,
                                                 const TokenSequence& seq);

/// Entry t is the prediction y of the suffix starting at t+1.
std::vector<FutureVector> predict_future_vectors(const FvPredictor& predictor,
                                                 const TokenSequence& seq);

struct JointOutput {
  std::vector<Vector> probabilities;
  std::vector<FutureVector> future_vectors;
};

/// future_vectors[t] is the predictor output fed alongside ids[t].
JointOutput enhanced_forward(const EnhancedLm& model, const TokenSequence& seq);

/// future_vectors[t] is the prediction emitted at step t (fed back at t+1).
JointOutput mt_forward(const MultiTaskLm& model, const TokenSequence& seq);

std::vector<Vector> forward_probabilities(const LanguageModel& model, const TokenSequence& seq);

// ---------------------------------------------------------------------------
// Loss and gradient. When grads is non-null, gradients of the returned
// total are accumulated into it (shape from zeros_like()).

LossReport lm_loss(const BaselineLm& model, const TokenSequence& seq, BaselineLm* grads);

/// MSE against targets (from extract_future_vectors).
LossReport predictor_loss(const FvPredictor& model, const TokenSequence& seq,
                          const std::vector<FutureVector>& targets, FvPredictor* grads);

/// CE only; no gradient reaches the predictor.
LossReport enhanced_loss(const EnhancedLm& model, const TokenSequence& seq, EnhancedLm* grads);

/// CE + lambda * MSE. With targets == nullptr the FV branch is unsupervised
/// and the loss is CE alone. Gradients flow through the y feedback.
LossReport mt_loss(const MultiTaskLm& model, const TokenSequence& seq,
                   const std::vector<FutureVector>* targets, double lambda, MultiTaskLm* grads);

// ---------------------------------------------------------------------------
// Incremental inference.

/// Feeds one token at a time and returns the distribution over the next
/// token. Holds a reference to the model.
class LmRunner {
 public:
  explicit LmRunner(const LanguageModel& model);

  /// Back to the empty history.
  void reset();
  Vector feed(TokenId token);

 private:
  const LanguageModel* model_;
  std::vector<LstmState> main_;
  std::vector<LstmState> aux_;
  std::vector<LstmState> aux2_;
  Vector fv_;
};

/// Sum over predicted positions (including </s>) of ln p(next | history).
double score_sequence(const LanguageModel& model, const TokenSequence& seq);

/// Argmax continuation of history (which starts with <s>). <s> is never
/// proposed; ties go to the lowest id. Stops after emitting </s> (not
/// returned) or after max_len tokens.
std::vector<TokenId> greedy_continue(const LanguageModel& model,
                                     const std::vector<TokenId>& history, std::size_t max_len);

}  // namespace fvlm
