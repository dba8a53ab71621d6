#include "fvlm/models.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "fvlm/error.hpp"

namespace fvlm {

namespace {

constexpr double kInitScale = 0.08;

void init_params(ParamSet set, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  init_uniform(set, kInitScale, rng);
}

std::span<const double> embed(const Matrix& table, TokenId id) {
  if (id >= table.rows()) {
    throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of size " +
                          std::to_string(table.rows()));
  }
  return table.row(id);
}

void check_sequence(const TokenSequence& seq, std::size_t vocab_size) {
  validate(seq, vocab_size);
}

void append_head(ParamSet& out, const std::string& prefix, Matrix& w, Vector& b) {
  out.push_back(view(prefix + ".w", w));
  out.push_back(view(prefix + ".b", b));
}

// Softmax output layer: logits = W h + b.
Vector softmax_head(const SoftmaxHead& head, const Vector& h) {
  return softmax(affine(head.w, h, head.b));
}

// Every position of a sentence at once; entry t equals softmax_head(head, hs[t]).
std::vector<Vector> softmax_head_all(const SoftmaxHead& head, const std::vector<Vector>& hs) {
  std::vector<Vector> out = affine_all(head.w, hs, head.b);
  for (auto& logits : out) logits = softmax(logits);
  return out;
}

// Backward of mean CE over a sentence whose position t predicts targets[t].
// Returns dL/dh per position and accumulates head gradients.
std::vector<Vector> softmax_head_backward_all(const SoftmaxHead& head, const std::vector<Vector>& hs,
                                              const std::vector<Vector>& probs,
                                              const std::vector<TokenId>& targets, double scale,
                                              SoftmaxHead& grads) {
  std::vector<Vector> dlogits(probs.size());
  for (std::size_t t = 0; t < probs.size(); ++t) {
    dlogits[t] = Vector(probs[t].size());
    for (std::size_t k = 0; k < probs[t].size(); ++k) dlogits[t][k] = probs[t][k] * scale;
    dlogits[t][targets[t]] -= scale;
  }
  return affine_all_backward(head.w, hs, dlogits, grads.w, grads.b);
}

Vector linear_head_backward(const LinearHead& head, const Vector& h, const Vector& dy,
                            LinearHead& grads) {
  outer_acc(grads.w, dy.span(), h.span());
  axpy(1.0, dy.span(), grads.b.span());
  Vector dh(h.size());
  gemv_t_acc(head.w, dy.span(), dh.span());
  return dh;
}

double target_log_prob(const Vector& p, TokenId target, std::size_t* clamped) {
  double q = p[target];
  if (q < kProbabilityFloor) {
    q = kProbabilityFloor;
    if (clamped) ++*clamped;
  }
  return std::log(q);
}

// y = W h + b over the predictor, one step.
Vector predictor_step(const FvPredictor& model, TokenId token, std::vector<LstmState>& states,
                      StackCache* cache, Vector* top) {
  Vector h = stack_step(model.stack, embed(model.embedding, token), states, cache);
  Vector y = affine(model.head.w, h, model.head.b);
  if (top) *top = std::move(h);
  return y;
}

struct EnhancedStep {
  Vector input;
  Vector h;
  Vector p;
  Vector y;
  StackCache cache;
};

// Leaves out.p empty unless with_probs; sentence-level callers batch the
// output layer instead.
void enhanced_step(const EnhancedLm& model, TokenId token, std::vector<LstmState>& pred_states,
                   std::vector<LstmState>& states, EnhancedStep& out, bool keep_cache,
                   bool with_probs) {
  out.y = predictor_step(model.predictor, token, pred_states, nullptr, nullptr);
  auto e = embed(model.embedding, token);
  out.input = Vector(e.size() + out.y.size());
  std::copy(e.begin(), e.end(), out.input.begin());
  std::copy(out.y.begin(), out.y.end(), out.input.begin() + static_cast<std::ptrdiff_t>(e.size()));
  out.h = stack_step(model.stack, out.input.span(), states, keep_cache ? &out.cache : nullptr);
  if (with_probs) out.p = softmax_head(model.head, out.h);
}

struct MtStep {
  Vector input;
  Vector h;
  Vector v;
  Vector u;
  Vector p;
  Vector y;
  StackCache trunk, word, fv;
};

void mt_step(const MultiTaskLm& model, TokenId token, const Vector& y_prev,
             std::vector<LstmState>& trunk, std::vector<LstmState>& word,
             std::vector<LstmState>& fv, MtStep& out, bool keep_cache, bool with_probs) {
  auto e = embed(model.embedding, token);
  out.input = Vector(e.size() + y_prev.size());
  std::copy(e.begin(), e.end(), out.input.begin());
  std::copy(y_prev.begin(), y_prev.end(), out.input.begin() + static_cast<std::ptrdiff_t>(e.size()));
  out.h = stack_step(model.trunk, out.input.span(), trunk, keep_cache ? &out.trunk : nullptr);
  out.v = stack_step(model.word_branch, out.h.span(), word, keep_cache ? &out.word : nullptr);
  if (with_probs) out.p = softmax_head(model.word_head, out.v);
  out.u = stack_step(model.fv_branch, out.h.span(), fv, keep_cache ? &out.fv : nullptr);
  out.y = affine(model.fv_head.w, out.u, model.fv_head.b);
}

}  // namespace

std::string_view to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::baseline: return "baseline";
    case ArchKind::reversed: return "reversed";
    case ArchKind::fv_predictor: return "fv-predictor";
    case ArchKind::enhanced: return "enhanced";
    case ArchKind::multitask: return "mt";
  }
  return "unknown";
}

ArchKind parse_arch(std::string_view name) {
  for (auto kind : {ArchKind::baseline, ArchKind::reversed, ArchKind::fv_predictor,
                    ArchKind::enhanced, ArchKind::multitask}) {
    if (to_string(kind) == name) return kind;
  }
  throw ConfigError("unknown architecture '" + std::string(name) +
                    "' (expected baseline|reversed|fv-predictor|enhanced|mt)");
}

void LmConfig::validate(ArchKind kind) const {
  if (embed_dim == 0 || hidden_dim == 0 || num_layers == 0 || fv_dim == 0) {
    throw ConfigError("model config: embed_dim, hidden_dim, num_layers and fv_dim must be positive");
  }
  if (!(lambda_mt >= 0.0) || !std::isfinite(lambda_mt)) {
    throw ConfigError("model config: lambda_mt must be a finite non-negative number");
  }
  if (kind == ArchKind::multitask) {
    if (mt_shared_layers == 0 || mt_branch_layers == 0) {
      throw ConfigError("model config: mt_shared_layers and mt_branch_layers must be positive");
    }
    if (mt_shared_layers + mt_branch_layers != num_layers) {
      throw ConfigError("model config: mt_shared_layers (" + std::to_string(mt_shared_layers) +
                        ") + mt_branch_layers (" + std::to_string(mt_branch_layers) +
                        ") must equal num_layers (" + std::to_string(num_layers) + ")");
    }
  }
}

// --- BaselineLm -------------------------------------------------------------

BaselineLm::BaselineLm(std::size_t vocab_size, const LmConfig& cfg, ArchKind k)
    : kind(k), config(cfg) {
  if (k != ArchKind::baseline && k != ArchKind::reversed) {
    throw ConfigError("BaselineLm: kind must be baseline or reversed");
  }
  if (vocab_size == 0) throw ConfigError("BaselineLm: empty vocabulary");
  cfg.validate(k);
  embedding = Matrix(vocab_size, cfg.embed_dim);
  stack = LstmStack(cfg.embed_dim, cfg.hidden_dim, cfg.num_layers);
  head = SoftmaxHead(vocab_size, cfg.hidden_dim);
}

BaselineLm BaselineLm::create(std::size_t vocab_size, const LmConfig& cfg, ArchKind k,
                              std::uint64_t seed) {
  BaselineLm model(vocab_size, cfg, k);
  init_params(model.params(), seed);
  return model;
}

ParamSet BaselineLm::params() {
  ParamSet out;
  out.push_back(view("embedding", embedding));
  stack.append_params(out, "lstm");
  append_head(out, "softmax", head.w, head.b);
  return out;
}

BaselineLm BaselineLm::zeros_like() const {
  BaselineLm g;
  g.kind = kind;
  g.config = config;
  g.embedding = Matrix(embedding.rows(), embedding.cols());
  g.stack = stack.zeros_like();
  g.head = SoftmaxHead(head.w.rows(), head.w.cols());
  return g;
}

// --- FvPredictor ------------------------------------------------------------

FvPredictor::FvPredictor(std::size_t vocab_size, const LmConfig& cfg) : config(cfg) {
  if (vocab_size == 0) throw ConfigError("FvPredictor: empty vocabulary");
  cfg.validate(ArchKind::fv_predictor);
  embedding = Matrix(vocab_size, cfg.embed_dim);
  stack = LstmStack(cfg.embed_dim, cfg.hidden_dim, cfg.num_layers);
  head = LinearHead(cfg.fv_dim, cfg.hidden_dim);
}

FvPredictor FvPredictor::create(std::size_t vocab_size, const LmConfig& cfg, std::uint64_t seed) {
  FvPredictor model(vocab_size, cfg);
  init_params(model.params(), seed);
  return model;
}

ParamSet FvPredictor::params() {
  ParamSet out;
  out.push_back(view("embedding", embedding));
  stack.append_params(out, "lstm");
  append_head(out, "fv_head", head.w, head.b);
  return out;
}

FvPredictor FvPredictor::zeros_like() const {
  FvPredictor g;
  g.config = config;
  g.embedding = Matrix(embedding.rows(), embedding.cols());
  g.stack = stack.zeros_like();
  g.head = LinearHead(head.w.rows(), head.w.cols());
  return g;
}

// --- EnhancedLm -------------------------------------------------------------

EnhancedLm::EnhancedLm(FvPredictor pred, const LmConfig& cfg)
    : predictor(std::move(pred)), config(cfg) {
  cfg.validate(ArchKind::enhanced);
  if (cfg.fv_dim != predictor.fv_dim()) {
    throw ConfigError("EnhancedLm: fv_dim " + std::to_string(cfg.fv_dim) +
                      " does not match the predictor's output width " +
                      std::to_string(predictor.fv_dim()));
  }
  const std::size_t n = predictor.vocab_size();
  embedding = Matrix(n, cfg.embed_dim);
  stack = LstmStack(cfg.embed_dim + cfg.fv_dim, cfg.hidden_dim, cfg.num_layers);
  head = SoftmaxHead(n, cfg.hidden_dim);
}

EnhancedLm EnhancedLm::create(FvPredictor pred, const LmConfig& cfg, std::uint64_t seed) {
  EnhancedLm model(std::move(pred), cfg);
  init_params(model.params(), seed);
  return model;
}

ParamSet EnhancedLm::params() {
  ParamSet out;
  out.push_back(view("embedding", embedding));
  stack.append_params(out, "lstm");
  append_head(out, "softmax", head.w, head.b);
  return out;
}

EnhancedLm EnhancedLm::zeros_like() const {
  EnhancedLm g;
  g.config = config;
  g.embedding = Matrix(embedding.rows(), embedding.cols());
  g.stack = stack.zeros_like();
  g.head = SoftmaxHead(head.w.rows(), head.w.cols());
  return g;
}

// --- MultiTaskLm ------------------------------------------------------------

MultiTaskLm::MultiTaskLm(std::size_t vocab_size, const LmConfig& cfg) : config(cfg) {
  if (vocab_size == 0) throw ConfigError("MultiTaskLm: empty vocabulary");
  cfg.validate(ArchKind::multitask);
  embedding = Matrix(vocab_size, cfg.embed_dim);
  trunk = LstmStack(cfg.embed_dim + cfg.fv_dim, cfg.hidden_dim, cfg.mt_shared_layers);
  word_branch = LstmStack(cfg.hidden_dim, cfg.hidden_dim, cfg.mt_branch_layers);
  word_head = SoftmaxHead(vocab_size, cfg.hidden_dim);
  fv_branch = LstmStack(cfg.hidden_dim, cfg.hidden_dim, cfg.mt_branch_layers);
  fv_head = LinearHead(cfg.fv_dim, cfg.hidden_dim);
}

MultiTaskLm MultiTaskLm::create(std::size_t vocab_size, const LmConfig& cfg, std::uint64_t seed) {
  MultiTaskLm model(vocab_size, cfg);
  init_params(model.params(), seed);
  return model;
}

ParamSet MultiTaskLm::params() {
  ParamSet out;
  out.push_back(view("embedding", embedding));
  trunk.append_params(out, "trunk");
  word_branch.append_params(out, "word_branch");
  append_head(out, "softmax", word_head.w, word_head.b);
  fv_branch.append_params(out, "fv_branch");
  append_head(out, "fv_head", fv_head.w, fv_head.b);
  return out;
}

MultiTaskLm MultiTaskLm::zeros_like() const {
  MultiTaskLm g;
  g.config = config;
  g.embedding = Matrix(embedding.rows(), embedding.cols());
  g.trunk = trunk.zeros_like();
  g.word_branch = word_branch.zeros_like();
  g.word_head = SoftmaxHead(word_head.w.rows(), word_head.w.cols());
  g.fv_branch = fv_branch.zeros_like();
  g.fv_head = LinearHead(fv_head.w.rows(), fv_head.w.cols());
  return g;
}

std::size_t vocab_size(const LanguageModel& model) {
  return std::visit([](const auto& m) { return m.vocab_size(); }, model);
}

ArchKind kind_of(const LanguageModel& model) {
  if (const auto* b = std::get_if<BaselineLm>(&model)) return b->kind;
  if (std::holds_alternative<EnhancedLm>(model)) return ArchKind::enhanced;
  return ArchKind::multitask;
}

// --- Losses -----------------------------------------------------------------

double ce_loss(const std::vector<Vector>& predicted, const std::vector<TokenId>& targets,
               std::size_t* clamped) {
  if (predicted.size() != targets.size()) {
    throw ShapeError("ce_loss: " + std::to_string(predicted.size()) + " distributions for " +
                     std::to_string(targets.size()) + " targets");
  }
  if (predicted.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t t = 0; t < predicted.size(); ++t) {
    if (targets[t] >= predicted[t].size()) {
      throw ValidationError("ce_loss: target id " + std::to_string(targets[t]) +
                            " outside distribution of size " + std::to_string(predicted[t].size()));
    }
    total -= target_log_prob(predicted[t], targets[t], clamped);
  }
  return total / static_cast<double>(predicted.size());
}

double mse_loss(const std::vector<Vector>& predicted, const std::vector<Vector>& targets) {
  if (predicted.size() != targets.size()) {
    throw ShapeError("mse_loss: " + std::to_string(predicted.size()) + " predictions for " +
                     std::to_string(targets.size()) + " targets");
  }
  if (predicted.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t t = 0; t < predicted.size(); ++t) {
    const auto& y = predicted[t];
    const auto& z = targets[t];
    if (y.size() != z.size() || y.empty()) {
      throw ShapeError("mse_loss: prediction width " + std::to_string(y.size()) +
                       ", target width " + std::to_string(z.size()));
    }
    double s = 0.0;
    for (std::size_t j = 0; j < y.size(); ++j) s += (y[j] - z[j]) * (y[j] - z[j]);
    total += s / static_cast<double>(y.size());
  }
  return total / static_cast<double>(predicted.size());
}

std::vector<TokenId> targets_of(const TokenSequence& seq) {
  if (seq.ids.size() < 2) return {};
  return {seq.ids.begin() + 1, seq.ids.end()};
}

// --- Forward ----------------------------------------------------------------

std::vector<Vector> lm_forward(const BaselineLm& model, const TokenSequence& seq) {
  check_sequence(seq, model.vocab_size());
  auto states = model.stack.zero_states();
  std::vector<Vector> tops;
  tops.reserve(seq.size() - 1);
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
    tops.push_back(stack_step(model.stack, embed(model.embedding, seq.ids[t]), states, nullptr));
  }
  return softmax_head_all(model.head, tops);
}

std::vector<FutureVector> extract_future_vectors(const BaselineLm& extractor,
                                                 const TokenSequence& seq) {
  check_sequence(seq, extractor.vocab_size());
  const TokenSequence rev = reverse_sequence(seq);
  const std::size_t steps = seq.size() - 1;
  auto states = extractor.stack.zero_states();
  std::vector<FutureVector> out(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    // After reading rev[0..k] the extractor has seen the suffix starting at
    // original position T-1-k, which is entry T-2-k.
    out[steps - 1 - k] =
        stack_step(extractor.stack, embed(extractor.embedding, rev.ids[k]), states, nullptr);
  }
  return out;
}

std::vector<FutureVector> predict_future_vectors(const FvPredictor& predictor,
                                                 const TokenSequence& seq) {
  check_sequence(seq, predictor.vocab_size());
  auto states = predictor.stack.zero_states();
  std::vector<FutureVector> out;
  out.reserve(seq.size() - 1);
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
    out.push_back(predictor_step(predictor, seq.ids[t], states, nullptr, nullptr));
  }
  return out;
}

JointOutput enhanced_forward(const EnhancedLm& model, const TokenSequence& seq) {
  check_sequence(seq, model.vocab_size());
  auto pred_states = model.predictor.stack.zero_states();
  auto states = model.stack.zero_states();
  JointOutput out;
  std::vector<Vector> tops;
  EnhancedStep step;
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
    enhanced_step(model, seq.ids[t], pred_states, states, step, false, false);
    tops.push_back(std::move(step.h));
    out.future_vectors.push_back(std::move(step.y));
  }
  out.probabilities = softmax_head_all(model.head, tops);
  return out;
}

JointOutput mt_forward(const MultiTaskLm& model, const TokenSequence& seq) {
  check_sequence(seq, model.vocab_size());
  auto trunk = model.trunk.zero_states();
  auto word = model.word_branch.zero_states();
  auto fv = model.fv_branch.zero_states();
  Vector y_prev(model.fv_dim());
  JointOutput out;
  std::vector<Vector> tops;
  MtStep step;
  for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
    mt_step(model, seq.ids[t], y_prev, trunk, word, fv, step, false, false);
    y_prev = step.y;
    tops.push_back(std::move(step.v));
    out.future_vectors.push_back(std::move(step.y));
  }
  out.probabilities = softmax_head_all(model.word_head, tops);
  return out;
}

std::vector<Vector> forward_probabilities(const LanguageModel& model, const TokenSequence& seq) {
  if (const auto* b = std::get_if<BaselineLm>(&model)) return lm_forward(*b, seq);
  if (const auto* e = std::get_if<EnhancedLm>(&model)) return enhanced_forward(*e, seq).probabilities;
  return mt_forward(std::get<MultiTaskLm>(model), seq).probabilities;
}

// --- Loss and gradient ------------------------------------------------------

LossReport lm_loss(const BaselineLm& model, const TokenSequence& seq, BaselineLm* grads) {
  check_sequence(seq, model.vocab_size());
  const std::size_t steps = seq.size() - 1;
  const double scale = 1.0 / static_cast<double>(steps);
  auto states = model.stack.zero_states();
  std::vector<StackCache> caches(grads ? steps : 0);
  std::vector<Vector> tops(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    tops[t] = stack_step(model.stack, embed(model.embedding, seq.ids[t]), states,
                         grads ? &caches[t] : nullptr);
  }
  const std::vector<Vector> probs = softmax_head_all(model.head, tops);
  const std::vector<TokenId> targets = targets_of(seq);
  LossReport report;
  report.positions = steps;
  report.ce = ce_loss(probs, targets, &report.clamped);
  report.total = report.ce;
  if (!grads) return report;

  const auto dhs = softmax_head_backward_all(model.head, tops, probs, targets, scale, grads->head);
  StackCarry carry(model.stack);
  for (std::size_t t = steps; t-- > 0;) {
    Vector dx = stack_step_backward(model.stack, caches[t], dhs[t], carry, grads->stack);
    axpy(1.0, dx.span(), grads->embedding.row(seq.ids[t]));
  }
  return report;
}

LossReport predictor_loss(const FvPredictor& model, const TokenSequence& seq,
                          const std::vector<FutureVector>& targets, FvPredictor* grads) {
  check_sequence(seq, model.vocab_size());
  const std::size_t steps = seq.size() - 1;
  if (targets.size() != steps) {
    throw ShapeError("predictor_loss: " + std::to_string(targets.size()) +
                     " target vectors for " + std::to_string(steps) + " positions");
  }
  auto states = model.stack.zero_states();
  std::vector<StackCache> caches(grads ? steps : 0);
  std::vector<Vector> tops(steps);
  std::vector<Vector> ys(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    ys[t] = predictor_step(model, seq.ids[t], states, grads ? &caches[t] : nullptr, &tops[t]);
  }
  LossReport report;
  report.positions = steps;
  report.mse = mse_loss(ys, targets);
  report.total = report.mse;
  if (!grads) return report;

  const double scale = 2.0 / (static_cast<double>(model.fv_dim()) * static_cast<double>(steps));
  StackCarry carry(model.stack);
  for (std::size_t t = steps; t-- > 0;) {
    Vector dy(ys[t].size());
    for (std::size_t j = 0; j < dy.size(); ++j) dy[j] = scale * (ys[t][j] - targets[t][j]);
    Vector dh = linear_head_backward(model.head, tops[t], dy, grads->head);
    Vector dx = stack_step_backward(model.stack, caches[t], dh, carry, grads->stack);
    axpy(1.0, dx.span(), grads->embedding.row(seq.ids[t]));
  }
  return report;
}

LossReport enhanced_loss(const EnhancedLm& model, const TokenSequence& seq, EnhancedLm* grads) {
  check_sequence(seq, model.vocab_size());
  const std::size_t steps = seq.size() - 1;
  const double scale = 1.0 / static_cast<double>(steps);
  auto pred_states = model.predictor.stack.zero_states();
  auto states = model.stack.zero_states();
  std::vector<EnhancedStep> trace(steps);
  std::vector<Vector> tops(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    enhanced_step(model, seq.ids[t], pred_states, states, trace[t], grads != nullptr, false);
    tops[t] = trace[t].h;
  }
  const std::vector<Vector> probs = softmax_head_all(model.head, tops);
  const std::vector<TokenId> targets = targets_of(seq);
  LossReport report;
  report.positions = steps;
  report.ce = ce_loss(probs, targets, &report.clamped);
  report.total = report.ce;
  if (!grads) return report;

  const auto dhs = softmax_head_backward_all(model.head, tops, probs, targets, scale, grads->head);
  const std::size_t e = model.config.embed_dim;
  StackCarry carry(model.stack);
  for (std::size_t t = steps; t-- > 0;) {
    Vector dx = stack_step_backward(model.stack, trace[t].cache, dhs[t], carry, grads->stack);
    // The future-vector part of dx stops here: the predictor is frozen.
    axpy(1.0, dx.span().first(e), grads->embedding.row(seq.ids[t]));
  }
  return report;
}

LossReport mt_loss(const MultiTaskLm& model, const TokenSequence& seq,
                   const std::vector<FutureVector>* targets, double lambda, MultiTaskLm* grads) {
  check_sequence(seq, model.vocab_size());
  const std::size_t steps = seq.size() - 1;
  if (targets && targets->size() != steps) {
    throw ShapeError("mt_loss: " + std::to_string(targets->size()) + " target vectors for " +
                     std::to_string(steps) + " positions");
  }
  const std::size_t m = model.fv_dim();
  auto trunk = model.trunk.zero_states();
  auto word = model.word_branch.zero_states();
  auto fv = model.fv_branch.zero_states();
  Vector y_prev(m);
  std::vector<MtStep> trace(steps);
  std::vector<Vector> tops(steps);
  std::vector<Vector> ys(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    mt_step(model, seq.ids[t], y_prev, trunk, word, fv, trace[t], grads != nullptr, false);
    y_prev = trace[t].y;
    tops[t] = trace[t].v;
    ys[t] = trace[t].y;
  }
  const std::vector<Vector> probs = softmax_head_all(model.word_head, tops);
  const std::vector<TokenId> word_targets = targets_of(seq);
  LossReport report;
  report.positions = steps;
  report.ce = ce_loss(probs, word_targets, &report.clamped);
  report.mse = targets ? mse_loss(ys, *targets) : 0.0;
  report.total = report.ce + lambda * report.mse;
  if (!grads) return report;

  const double ce_scale = 1.0 / static_cast<double>(steps);
  const double mse_scale =
      targets ? lambda * 2.0 / (static_cast<double>(m) * static_cast<double>(steps)) : 0.0;
  const std::size_t e = model.config.embed_dim;
  StackCarry trunk_carry(model.trunk);
  StackCarry word_carry(model.word_branch);
  StackCarry fv_carry(model.fv_branch);
  const auto dvs =
      softmax_head_backward_all(model.word_head, tops, probs, word_targets, ce_scale, grads->word_head);
  // Gradient on y emitted at step t, arriving from the trunk input at t+1.
  Vector dy_next(m);
  for (std::size_t t = steps; t-- > 0;) {
    const auto& s = trace[t];
    Vector dh = stack_step_backward(model.word_branch, s.word, dvs[t], word_carry, grads->word_branch);

    Vector dy = dy_next;
    if (targets) {
      const auto& z = (*targets)[t];
      for (std::size_t j = 0; j < m; ++j) dy[j] += mse_scale * (s.y[j] - z[j]);
    }
    Vector du = linear_head_backward(model.fv_head, s.u, dy, grads->fv_head);
    Vector dh_fv = stack_step_backward(model.fv_branch, s.fv, du, fv_carry, grads->fv_branch);
    axpy(1.0, dh_fv.span(), dh.span());

    Vector dx = stack_step_backward(model.trunk, s.trunk, dh, trunk_carry, grads->trunk);
    axpy(1.0, dx.span().first(e), grads->embedding.row(seq.ids[t]));
    std::copy(dx.begin() + static_cast<std::ptrdiff_t>(e), dx.end(), dy_next.begin());
  }
  return report;
}

// --- Incremental inference --------------------------------------------------

LmRunner::LmRunner(const LanguageModel& model) : model_(&model) { reset(); }

void LmRunner::reset() {
  if (const auto* b = std::get_if<BaselineLm>(model_)) {
    main_ = b->stack.zero_states();
  } else if (const auto* e = std::get_if<EnhancedLm>(model_)) {
    main_ = e->stack.zero_states();
    aux_ = e->predictor.stack.zero_states();
  } else {
    const auto& mt = std::get<MultiTaskLm>(*model_);
    main_ = mt.trunk.zero_states();
    aux_ = mt.word_branch.zero_states();
    aux2_ = mt.fv_branch.zero_states();
    fv_ = Vector(mt.fv_dim());
  }
}

Vector LmRunner::feed(TokenId token) {
  if (const auto* b = std::get_if<BaselineLm>(model_)) {
    Vector h = stack_step(b->stack, embed(b->embedding, token), main_, nullptr);
    return softmax_head(b->head, h);
  }
  if (const auto* e = std::get_if<EnhancedLm>(model_)) {
    EnhancedStep step;
    enhanced_step(*e, token, aux_, main_, step, false, true);
    return std::move(step.p);
  }
  const auto& mt = std::get<MultiTaskLm>(*model_);
  MtStep step;
  mt_step(mt, token, fv_, main_, aux_, aux2_, step, false, true);
  fv_ = std::move(step.y);
  return std::move(step.p);
}

double score_sequence(const LanguageModel& model, const TokenSequence& seq) {
  validate(seq, vocab_size(model));
  const auto probs = forward_probabilities(model, seq);
  double total = 0.0;
  for (std::size_t t = 0; t < probs.size(); ++t) {
    total += target_log_prob(probs[t], seq.ids[t + 1], nullptr);
  }
  return total;
}

std::vector<TokenId> greedy_continue(const LanguageModel& model,
                                     const std::vector<TokenId>& history, std::size_t max_len) {
  if (history.empty() || history.front() != kBos) {
    throw ValidationError("greedy_continue: history must start with <s>");
  }
  const std::size_t n = vocab_size(model);
  for (TokenId id : history) {
    if (id >= n) throw ValidationError("greedy_continue: token id outside vocabulary");
  }
  LmRunner runner(model);
  Vector p;
  for (TokenId id : history) p = runner.feed(id);
  std::vector<TokenId> out;
  for (std::size_t step = 0; step < max_len; ++step) {
    TokenId best = kEos;
    for (TokenId k = kEos + 1; k < n; ++k) {
      if (p[k] > p[best]) best = k;
    }
    if (best == kEos) break;
    out.push_back(best);
    if (step + 1 < max_len) p = runner.feed(best);
  }
  return out;
}

}  // namespace fvlm
