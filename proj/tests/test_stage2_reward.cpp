#include <gtest/gtest.h>

#include <cmath>

#include "preftok/log.hpp"
#include "preftok/stage1_trainer.hpp"
#include "preftok/stage2_reward.hpp"
#include "support.hpp"

using namespace preftok;

namespace {

// Generator with an all-zero denoiser: eps_hat = 0, so the image loss is
// exactly ||noise||^2.
ToyGenerator null_generator(std::size_t image_dim, std::size_t dim_v, std::size_t dim_t) {
  ToyGenerator g;
  g.image_dim = image_dim;
  g.dim_v = dim_v;
  g.dim_t = dim_t;
  g.vocab = 64;
  g.seq_len = 8;
  g.denoiser = Matrix<double>(image_dim, image_dim + dim_v);
  g.text_head = Matrix<double>(g.seq_len * g.vocab, dim_t);
  return g;
}

TokenSequence tokens(std::initializer_list<std::uint32_t> t) { return TokenSequence{t}; }

CodebookStack<double> random_stack(std::size_t levels, std::size_t size, std::size_t dim,
                                   std::mt19937_64& rng) {
  auto s = CodebookStack<double>::zeros(levels, size, dim);
  for (auto& c : s.codes) c = support::random_matrix<double>(size, dim, rng);
  s.sync_ema_with_codes();
  return s;
}

std::vector<double> flatten(const std::vector<Matrix<double>>& ms) {
  std::vector<double> out;
  for (const auto& m : ms) out.insert(out.end(), m.storage().begin(), m.storage().end());
  return out;
}

void unflatten(std::span<const double> x, CodebookStack<double>& s) {
  std::size_t k = 0;
  for (auto& m : s.codes)
    for (auto& v : m.storage()) v = x[k++];
}

std::uint64_t stack_checksum(const CodebookStack<double>& s) {
  std::uint64_t h = 0;
  for (const auto& m : s.codes) h = checksum(m, h);
  return h;
}

}  // namespace

TEST(ClipSim, KnownValues) {
  const std::vector<double> a{1.0, 0.0}, b{0.0, 1.0}, c{1.0, 1.0};
  EXPECT_DOUBLE_EQ(clip_sim(a, a), 1.0);
  EXPECT_DOUBLE_EQ(clip_sim(a, b), 0.0);
  EXPECT_NEAR(clip_sim(a, c), 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(ClipSim, ZeroVectorWarns) {
  ScopedLogCapture capture;
  const std::vector<double> a{1.0, 2.0}, z{0.0, 0.0};
  EXPECT_EQ(clip_sim(a, z), 0.0);
  EXPECT_GT(capture.warnings(), 0);
}

TEST(PersonalizationReward, KnownValues) {
  const std::vector<double> g{1.0, 0.0};
  EXPECT_DOUBLE_EQ(personalization_reward(g, {g}), 1.0);
  EXPECT_DOUBLE_EQ(personalization_reward(g, {g, {-1.0, 0.0}}), 0.0);
  // cosines 1, 0.5, 0
  const std::vector<double> half{0.5, std::sqrt(3.0) / 2.0};
  EXPECT_NEAR(personalization_reward(g, {g, half, {0.0, 3.0}}), 0.5, 1e-15);
  EXPECT_THROW(personalization_reward(g, {}), Error);
}

TEST(RewardBundle, Weights) {
  const RewardBundle r{0.6, 0.2, 0.4, 0.5};
  EXPECT_DOUBLE_EQ(r.image_weight(), 0.8);
  EXPECT_DOUBLE_EQ(r.text_weight(), 0.4);
}

TEST(WeightedImageLoss, WeightTimesBase) {
  const auto gen = null_generator(2, 1, 1);
  auto stack = CodebookStack<double>::zeros(1, 1, 1);
  const std::vector<double> target{0.0, 0.0}, noise{1.0, 1.0};
  const RewardBundle r{0.7, 0.0, 0.0, 0.5};
  const auto l = weighted_image_loss(gen, stack, tokens({1}), tokens({1}), target, r, noise);
  EXPECT_DOUBLE_EQ(l.base_loss, 2.0);
  EXPECT_DOUBLE_EQ(l.weight, 0.7);
  EXPECT_NEAR(l.loss, 1.4, 1e-15);
}

TEST(WeightedImageLoss, ZeroWeightZeroGradient) {
  std::mt19937_64 rng(1);
  StageTwoConfig cfg;
  const auto gen = ToyGenerator::seeded(4, 6, cfg, 3);
  const auto stack = random_stack(2, 3, 4, rng);
  const auto target = support::random_vector(cfg.image_dim, rng);
  const auto l = weighted_image_loss(gen, stack, tokens({1, 2}), tokens({3, 1}), target,
                                     RewardBundle{0.0, 0.0, 0.0, 0.5}, 5);
  EXPECT_EQ(l.loss, 0.0);
  for (double g : flatten(l.grad)) EXPECT_EQ(g, 0.0);
}

TEST(WeightedImageLoss, FiniteDifferences) {
  std::mt19937_64 rng(2);
  StageTwoConfig cfg;
  const auto gen = ToyGenerator::seeded(8, 6, cfg, 4);
  auto stack = random_stack(3, 4, 8, rng);
  const auto target = support::random_vector(cfg.image_dim, rng);
  const auto noise = support::random_vector(cfg.image_dim, rng);
  const RewardBundle r{0.3, 0.1, -0.2, 0.5};
  const auto u = tokens({1, 4, 2}), i = tokens({3, 4, 2});
  const auto analytic = weighted_image_loss(gen, stack, u, i, target, r, noise);
  const auto numeric = support::numeric_gradient(
      [&](std::span<const double> x) {
        auto s = stack;
        unflatten(x, s);
        return weighted_image_loss(gen, s, u, i, target, r, noise).loss;
      },
      flatten(stack.codes));
  EXPECT_LT(support::relative_error(flatten(analytic.grad), numeric), 1e-4);
}

TEST(WeightedTextLoss, UniformLogitsGiveLogVocab) {
  const auto gen = null_generator(2, 1, 3);
  auto stack = CodebookStack<double>::zeros(1, 2, 3);
  const std::vector<std::uint32_t> ref{1, 5, 64, 2, 2, 9, 10, 33};
  const RewardBundle r{0.0, 1.0, 0.0, 0.5};
  const auto l = weighted_text_loss(gen, stack, tokens({1}), tokens({2}), ref, r);
  EXPECT_NEAR(l.base_loss, 8.0 * std::log(64.0), 1e-12);
  EXPECT_NEAR(l.loss, l.base_loss, 1e-12);
}

TEST(WeightedTextLoss, FiniteDifferences) {
  std::mt19937_64 rng(3);
  StageTwoConfig cfg;
  const auto gen = ToyGenerator::seeded(4, 8, cfg, 6);
  auto stack = random_stack(2, 3, 8, rng);
  std::vector<std::uint32_t> ref;
  for (std::uint32_t k = 0; k < cfg.seq_len; ++k) ref.push_back(1 + (k * 13) % 64);
  const RewardBundle r{0.1, 0.6, 0.2, 0.5};
  const auto u = tokens({2, 3}), i = tokens({1, 3});
  const auto analytic = weighted_text_loss(gen, stack, u, i, ref, r);
  const auto numeric = support::numeric_gradient(
      [&](std::span<const double> x) {
        auto s = stack;
        unflatten(x, s);
        return weighted_text_loss(gen, s, u, i, ref, r).loss;
      },
      flatten(stack.codes));
  EXPECT_LT(support::relative_error(flatten(analytic.grad), numeric), 1e-4);
}

TEST(WeightedTextLoss, SymbolOutOfRange) {
  const auto gen = null_generator(2, 1, 3);
  auto stack = CodebookStack<double>::zeros(1, 1, 3);
  const RewardBundle r{0.0, 1.0, 0.0, 0.5};
  std::vector<std::uint32_t> ref(8, 1);
  ref[3] = 65;
  EXPECT_THROW(weighted_text_loss(gen, stack, tokens({1}), tokens({1}), ref, r), Error);
  ref[3] = 0;
  EXPECT_THROW(weighted_text_loss(gen, stack, tokens({1}), tokens({1}), ref, r), Error);
  ref.pop_back();
  EXPECT_THROW(weighted_text_loss(gen, stack, tokens({1}), tokens({1}), ref, r), Error);
}

TEST(WeightedLosses, ScaleWithWeight) {
  std::mt19937_64 rng(4);
  StageTwoConfig cfg;
  const auto gen = ToyGenerator::seeded(4, 4, cfg, 8);
  const auto sv = random_stack(2, 3, 4, rng);
  const auto target = support::random_vector(cfg.image_dim, rng);
  const RewardBundle r1{0.2, 0.3, 0.1, 0.5}, r3{0.6, 0.9, 0.3, 0.5};
  const auto a = weighted_image_loss(gen, sv, tokens({1, 2}), tokens({3, 3}), target, r1, 11);
  const auto b = weighted_image_loss(gen, sv, tokens({1, 2}), tokens({3, 3}), target, r3, 11);
  EXPECT_NEAR(b.loss, 3.0 * a.loss, 1e-12);
  const auto ga = flatten(a.grad), gb = flatten(b.grad);
  for (std::size_t k = 0; k < ga.size(); ++k) EXPECT_NEAR(gb[k], 3.0 * ga[k], 1e-12);
  const std::vector<std::uint32_t> ref{1, 2, 3, 4, 5, 6, 7, 8};
  const auto ta = weighted_text_loss(gen, sv, tokens({1, 2}), tokens({3, 3}), ref, r1);
  const auto tb = weighted_text_loss(gen, sv, tokens({1, 2}), tokens({3, 3}), ref, r3);
  EXPECT_NEAR(tb.loss, 3.0 * ta.loss, 1e-12);
}

TEST(Ccs, KnownValues) {
  const std::vector<double> a{1.0, 2.0, 3.0}, b{0.0, 1.0, 0.0};
  EXPECT_DOUBLE_EQ(compute_ccs({{a, a}, {b, b}}), 1.0);
  EXPECT_DOUBLE_EQ(compute_ccs({{a, b}}), clip_sim(a, b));
  EXPECT_THROW(compute_ccs({}), Error);
}

TEST(Ccs, RandomPairsNearZero) {
  std::mt19937_64 rng(5);
  const std::size_t d = 16, n = 2000;
  std::vector<std::pair<std::vector<double>, std::vector<double>>> pairs;
  for (std::size_t k = 0; k < n; ++k)
    pairs.emplace_back(support::random_vector(d, rng), support::random_vector(d, rng));
  EXPECT_LT(std::abs(compute_ccs(pairs)), 3.0 / std::sqrt(double(d * n)));
}

TEST(TrainStage2, PinnedRewardsLeaveEverythingUnchanged) {
  auto planted = support::planted_stage2(3, 40, 20);
  planted.cfg.pin_rewards = true;
  planted.cfg.epochs = 2;
  const auto gen_before = checksum(planted.gen.denoiser) ^ checksum(planted.gen.text_head);
  const auto proj_before = checksum(planted.proj.image_proj) ^ checksum(planted.proj.text_proj);
  const auto run = train_stage2(planted.problem, planted.gen, planted.proj, planted.cfg);
  EXPECT_EQ(stack_checksum(run.problem.visual), stack_checksum(planted.problem.visual));
  EXPECT_EQ(stack_checksum(run.problem.text), stack_checksum(planted.problem.text));
  EXPECT_EQ(checksum(planted.gen.denoiser) ^ checksum(planted.gen.text_head), gen_before);
  EXPECT_EQ(checksum(planted.proj.image_proj) ^ checksum(planted.proj.text_proj), proj_before);
}

TEST(TrainStage2, TrainableParameterCount) {
  const auto planted = support::planted_stage2(1, 20, 10);
  EXPECT_EQ(planted.problem.trainable_parameters(), 4u * 8u * 16u + 4u * 8u * 32u);
}

TEST(TrainStage2, PlantedProblemImproves) {
  const auto planted = support::planted_stage2(2);
  const auto run = train_stage2(planted.problem, planted.gen, planted.proj, planted.cfg);
  const double before = run.epoch_rewards.front().objective;
  const double after = run.epoch_rewards.back().objective;
  EXPECT_GT(after, before + 0.1 * std::abs(before)) << before << " -> " << after;
}

TEST(TrainStage2, Deterministic) {
  const auto planted = support::planted_stage2(4, 40, 20);
  auto cfg = planted.cfg;
  cfg.epochs = 2;
  const auto a = train_stage2(planted.problem, planted.gen, planted.proj, cfg);
  const auto b = train_stage2(planted.problem, planted.gen, planted.proj, cfg);
  EXPECT_EQ(stack_checksum(a.problem.visual), stack_checksum(b.problem.visual));
  EXPECT_EQ(stack_checksum(a.problem.text), stack_checksum(b.problem.text));
}

TEST(BuildStage2Problem, FromTrainedModel) {
  const auto data = support::planted_clusters(6, {.users = 60, .items = 40, .per_user = 8});
  StageOneConfig c1;
  c1.codebook_size = 8;
  c1.epochs = 1;
  c1.batch_size = 64;
  const auto s1 = train_stage1(data.dataset, c1);
  StageTwoConfig c2;
  const auto gen = ToyGenerator::seeded(c1.dim_v, c1.dim_t, c2, 1);
  const auto proj = SharedSpaceProjector::seeded(c2.image_dim, c2.vocab, c2.shared_dim, 2);
  const auto p = build_stage2_problem(s1.model, gen, proj, c2);
  EXPECT_EQ(p.user_tokens_v.size(), 60u);
  EXPECT_EQ(p.item_tokens_t.size(), 40u);
  EXPECT_FALSE(p.train_pairs.empty());
  EXPECT_FALSE(p.heldout_pairs.empty());
  for (const auto& pair : p.train_pairs) {
    EXPECT_FALSE(p.history_v[pair.user].empty());
    EXPECT_LE(p.history_v[pair.user].size(), c2.history_cap);
  }
}
