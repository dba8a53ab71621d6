#include <cmath>

#include "data.hpp"
#include "doctest.h"
#include "fvlm/checkpoint.hpp"
#include "fvlm/error.hpp"
#include "fvlm/eval.hpp"
#include "fvlm/train.hpp"

using namespace fvlm;

namespace {

LmConfig config(std::size_t width, std::size_t layers = 1) {
  LmConfig c;
  c.embed_dim = width;
  c.hidden_dim = width;
  c.num_layers = layers;
  c.mt_shared_layers = layers > 1 ? layers - 1 : 1;
  c.mt_branch_layers = 1;
  c.fv_dim = width;
  return c;
}

TrainConfig schedule(std::size_t epochs, double lr = 0.5) {
  TrainConfig t;
  t.epochs = epochs;
  t.learning_rate = lr;
  t.lr_decay = 1.0;
  t.seed = 5;
  return t;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("split_validation takes the tail") {
  const Vocabulary v = testing::toy_vocabulary();
  const Corpus c = testing::toy_corpus(v);
  const auto [train, valid] = split_validation(c, 0.2);
  CHECK(train.size() == 8);
  CHECK(valid.size() == 2);
  CHECK(valid.front() == c[8]);
  CHECK(split_validation(c, 0.0).second.empty());
  CHECK(split_validation(c, 0.01).second.size() == 1);
  CHECK_THROWS_AS(split_validation(c, 1.0), ConfigError);
}

TEST_CASE("train config validation") {
  TrainConfig t;
  CHECK_NOTHROW(t.validate());
  t.learning_rate = 0.0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.epochs = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t = TrainConfig{};
  t.lr_decay = 1.5;
  CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("empty corpus is rejected") {
  CHECK_THROWS_AS(train_lm({}, {}, 10, config(4), schedule(1), Direction::forward), ValidationError);
}

TEST_CASE("overfit a single sentence") {
  const Vocabulary v = Vocabulary::from_words({"a", "b"});
  const Corpus c = {encode(v, "a b")};
  const BaselineLm m = train_lm(c, {}, v.size(), config(8), schedule(200), Direction::forward);
  const auto probs = lm_forward(m, c[0]);
  CHECK(probs[0][v.id("a")] > 0.99);
  CHECK(greedy_continue(m, {kBos, v.id("a")}, 10) == std::vector<TokenId>{v.id("b")});
}

TEST_CASE("toy corpus overfits below perplexity 1.2") {
  const Vocabulary v = testing::toy_vocabulary();
  const Corpus c = testing::toy_corpus(v);
  std::vector<double> ppl;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) { ppl.push_back(e.ppl); };
  const BaselineLm m = train_lm(c, {}, v.size(), config(32, 2), schedule(200), Direction::forward, hooks);
  CHECK(ppl.size() == 200);
  CHECK(perplexity(m, c).perplexity < 1.2);
}

TEST_CASE("reversed and forward models agree on a palindromic corpus") {
  const std::vector<std::string> lines = {"a b c b a", "d e d", "a c e c a", "b d b", "e a b a e"};
  const Vocabulary v = Vocabulary::build_from_lines(lines, 100);
  const Corpus c = encode_corpus(v, lines);
  const Corpus valid = {encode(v, "a e a"), encode(v, "c d c")};
  const BaselineLm fwd = train_lm(c, valid, v.size(), config(6), schedule(20), Direction::forward);
  const BaselineLm rev = train_lm(c, valid, v.size(), config(6), schedule(20), Direction::reversed);
  const double pf = perplexity(fwd, valid).perplexity;
  const double pr = perplexity(rev, valid).perplexity;
  CHECK(std::abs(pf - pr) <= 0.02 * pf);
}

TEST_CASE("predictor learns a deterministic language") {
  // Every prefix has exactly one continuation.
  const std::vector<std::string> lines = {"a1 b1 c1 d1", "a2 b2 c2", "a3 b3 c3 d3 e3", "a4 b4"};
  const Vocabulary v = Vocabulary::build_from_lines(lines, 100);
  const Corpus c = encode_corpus(v, lines);
  const BaselineLm ext = train_lm(c, {}, v.size(), config(8), schedule(30), Direction::reversed);
  TrainConfig t = schedule(400, 0.5);
  const FvPredictor p = train_fv_predictor(c, {}, ext, config(8), t);
  double mse = 0.0;
  for (const auto& seq : c) mse += predictor_loss(p, seq, extract_future_vectors(ext, seq), nullptr).mse;
  CHECK(mse / static_cast<double>(c.size()) < 0.01);
}

TEST_CASE("predictor width must match the extractor") {
  const Vocabulary v = testing::toy_vocabulary();
  const Corpus c = testing::toy_corpus(v);
  const BaselineLm ext = BaselineLm::create(v.size(), config(6), ArchKind::reversed, 1);
  LmConfig wrong = config(6);
  wrong.fv_dim = 5;
  CHECK_THROWS_AS(train_fv_predictor(c, {}, ext, wrong, schedule(1)), ConfigError);
}

TEST_CASE("enhanced training leaves the predictor untouched") {
  const Vocabulary v = testing::toy_vocabulary();
  const Corpus c = testing::toy_corpus(v);
  FvPredictor p = FvPredictor::create(v.size(), config(6), 3);
  const auto before = checksum(p.params());
  EnhancedLm e = train_enhanced(c, {}, p, config(6), schedule(2));
  CHECK(checksum(p.params()) == before);
  CHECK(checksum(e.predictor_params()) == before);
}

TEST_CASE("multi-task steps log CE plus weighted MSE, and lambda 0 is CE-only") {
  const Vocabulary v = testing::toy_vocabulary();
  const Corpus c = testing::toy_corpus(v);
  const BaselineLm ext = BaselineLm::create(v.size(), config(6, 2), ArchKind::reversed, 9);

  auto run = [&](double lambda, const BaselineLm* extractor) {
    LmConfig cfg = config(6, 2);
    cfg.lambda_mt = lambda;
    std::vector<LossReport> steps;
    TrainHooks hooks;
    hooks.on_step = [&](const StepLog& s) { steps.push_back(s.loss); };
    const MultiTaskLm m = train_mt(c, {}, v.size(), extractor, cfg, schedule(2), hooks);
    return std::pair{steps, serialize_checkpoint(m, 0)};
  };

  const auto [joint, joint_bytes] = run(1.0, &ext);
  REQUIRE(joint.size() == 2 * c.size());
  for (const auto& s : joint) CHECK(std::abs(s.total - (s.ce + s.mse)) <= 1e-10);

  const auto [zero, zero_bytes] = run(0.0, &ext);
  const auto [ce_only, ce_bytes] = run(0.0, nullptr);
  REQUIRE(zero.size() == ce_only.size());
  for (std::size_t k = 0; k < zero.size(); ++k) {
    CHECK(zero[k].total == zero[k].ce);
    CHECK(zero[k].ce == ce_only[k].ce);
  }
  CHECK(zero_bytes == ce_bytes);
}

TEST_CASE("training is deterministic for a seed") {
  const Vocabulary v = testing::toy_vocabulary();
  const Corpus c = testing::toy_corpus(v);
  const auto a = serialize_checkpoint(train_lm(c, {}, v.size(), config(6), schedule(2), Direction::forward), 1);
  const auto b = serialize_checkpoint(train_lm(c, {}, v.size(), config(6), schedule(2), Direction::forward), 1);
  CHECK(a == b);
  TrainConfig other = schedule(2);
  other.seed = 6;
  const auto d = serialize_checkpoint(train_lm(c, {}, v.size(), config(6), other, Direction::forward), 1);
  CHECK(a != d);
}

TEST_CASE("the best validation epoch is returned") {
  const Vocabulary v = testing::toy_vocabulary();
  const Corpus c = testing::toy_corpus(v);
  const auto [train, valid] = split_validation(c, 0.2);
  std::vector<EpochLog> logs;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) { logs.push_back(e); };
  const BaselineLm m = train_lm(train, valid, v.size(), config(6), schedule(6), Direction::forward, hooks);
  double best = logs.front().valid_metric;
  for (const auto& e : logs) best = std::min(best, e.valid_metric);
  CHECK(perplexity(m, valid).perplexity == doctest::Approx(best).epsilon(1e-9));
}

TEST_CASE("learning rate decays after stalled epochs") {
  const Vocabulary v = testing::toy_vocabulary();
  const Corpus c = testing::toy_corpus(v);
  const auto [train, valid] = split_validation(c, 0.2);
  TrainConfig t = schedule(12, 2.0);
  t.lr_decay = 0.5;
  t.patience = 1;
  std::vector<EpochLog> logs;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) { logs.push_back(e); };
  train_lm(train, valid, v.size(), config(6), t, Direction::forward, hooks);
  for (std::size_t k = 1; k < logs.size(); ++k) {
    if (logs[k - 1].improved) {
      CHECK(logs[k].learning_rate == logs[k - 1].learning_rate);
    } else {
      CHECK(logs[k].learning_rate == logs[k - 1].learning_rate * 0.5);
    }
  }
}

}  // TEST_SUITE
