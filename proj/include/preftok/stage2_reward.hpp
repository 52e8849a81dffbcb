#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "preftok/adam.hpp"
#include "preftok/config.hpp"
#include "preftok/gcn_encoder.hpp"
#include "preftok/log.hpp"
#include "preftok/losses.hpp"
#include "preftok/quantizer.hpp"
#include "preftok/stage1_trainer.hpp"

namespace preftok {

// Frozen token-conditioned generators.
//
// Image head: predicts noise from (noisy image ++ conditioning),
//   eps_hat = (x_t - D c) / sigma,
// i.e. the exact denoiser for images decoded as D c. Generation denoises the
// zero latent in one step (giving D c) and adds sampling spread.
//
// Text head: per-position logits A_t c over a vocabulary of V symbols for S
// positions. Generation samples each position from its softmax.
//
// The conditioning c is the mean of the 2L looked-up code vectors (L user
// slots then L item slots).
struct ToyGenerator {
  Matrix<double> denoiser;   // image_dim x (image_dim + dim_v)
  Matrix<double> text_head;  // (seq_len * vocab) x dim_t
  std::size_t image_dim = 0;
  std::size_t dim_v = 0;
  std::size_t dim_t = 0;
  std::size_t vocab = 0;
  std::size_t seq_len = 0;
  double noise_sigma = 0.1;

  static ToyGenerator seeded(std::size_t dim_v, std::size_t dim_t,
                             const StageTwoConfig& cfg, std::uint64_t seed) {
    ToyGenerator g;
    g.image_dim = cfg.image_dim;
    g.dim_v = dim_v;
    g.dim_t = dim_t;
    g.vocab = cfg.vocab;
    g.seq_len = cfg.seq_len;
    g.noise_sigma = cfg.noise_sigma;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dec(0.0, 1.0 / std::sqrt(static_cast<double>(dim_v)));
    g.denoiser = Matrix<double>(g.image_dim, g.image_dim + dim_v);
    for (std::size_t r = 0; r < g.image_dim; ++r) {
      g.denoiser(r, r) = 1.0 / g.noise_sigma;
      for (std::size_t c = 0; c < dim_v; ++c) {
        g.denoiser(r, g.image_dim + c) = -dec(rng) / g.noise_sigma;
      }
    }
    std::normal_distribution<double> head(0.0, 1.0 / std::sqrt(static_cast<double>(dim_t)));
    g.text_head = Matrix<double>(g.seq_len * g.vocab, dim_t);
    for (auto& v : g.text_head.storage()) v = head(rng);
    return g;
  }

  std::vector<double> predict_noise(std::span<const double> noisy,
                                    std::span<const double> cond) const {
    std::vector<double> out(image_dim, 0.0);
    for (std::size_t r = 0; r < image_dim; ++r) {
      const auto row = denoiser.row(r);
      double acc = 0.0;
      for (std::size_t c = 0; c < image_dim; ++c) acc += row[c] * noisy[c];
      for (std::size_t c = 0; c < dim_v; ++c) acc += row[image_dim + c] * cond[c];
      out[r] = acc;
    }
    return out;
  }

  // One-step denoise of the zero latent: x0 = x_t - sigma * eps_hat(x_t, c).
  std::vector<double> mean_image(std::span<const double> cond) const {
    const std::vector<double> zero(image_dim, 0.0);
    auto eps = predict_noise(zero, cond);
    for (auto& v : eps) v *= -noise_sigma;
    return eps;
  }

  Matrix<double> text_logits(std::span<const double> cond) const {
    Matrix<double> logits(seq_len, vocab);
    for (std::size_t k = 0; k < seq_len * vocab; ++k) {
      logits.storage()[k] = dot(text_head.row(k), cond);
    }
    return logits;
  }
};

inline std::vector<double> softmax_row(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    p[k] = std::exp(logits[k] - mx);
    z += p[k];
  }
  for (auto& v : p) v /= z;
  return p;
}

// Fixed projections of image-analog and text-analog outputs into one
// similarity space, with unit-norm columns.
struct SharedSpaceProjector {
  Matrix<double> image_proj;  // shared_dim x image_dim
  Matrix<double> text_proj;   // shared_dim x vocab

  static void normalize_columns(Matrix<double>& m) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      double n = 0.0;
      for (std::size_t r = 0; r < m.rows(); ++r) n += m(r, c) * m(r, c);
      n = std::sqrt(n);
      if (n == 0.0) continue;
      for (std::size_t r = 0; r < m.rows(); ++r) m(r, c) /= n;
    }
  }

  static SharedSpaceProjector seeded(std::size_t image_dim, std::size_t vocab,
                                     std::size_t shared_dim, std::uint64_t seed) {
    SharedSpaceProjector p{Matrix<double>(shared_dim, image_dim),
                           Matrix<double>(shared_dim, vocab)};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : p.image_proj.storage()) v = n(rng);
    for (auto& v : p.text_proj.storage()) v = n(rng);
    normalize_columns(p.image_proj);
    normalize_columns(p.text_proj);
    return p;
  }

  static SharedSpaceProjector identity(std::size_t dim) {
    SharedSpaceProjector p{Matrix<double>(dim, dim), Matrix<double>(dim, dim)};
    for (std::size_t k = 0; k < dim; ++k) p.image_proj(k, k) = p.text_proj(k, k) = 1.0;
    return p;
  }

  static std::vector<double> apply(const Matrix<double>& m, std::span<const double> x) {
    if (x.size() != m.cols()) {
      throw Error("projector expects width " + std::to_string(m.cols()) + ", got " +
                  std::to_string(x.size()));
    }
    std::vector<double> out(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) out[r] = dot(m.row(r), x);
    return out;
  }

  std::vector<double> project_image(std::span<const double> x) const {
    return apply(image_proj, x);
  }
  std::vector<double> project_text(std::span<const double> x) const {
    return apply(text_proj, x);
  }
};

// Cosine similarity of two shared-space vectors; 0 (with a warning) when
// either is the zero vector.
inline double clip_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error("clip_sim: width mismatch");
  const double na = std::sqrt(squared_norm(a));
  const double nb = std::sqrt(squared_norm(b));
  if (na == 0.0 || nb == 0.0) {
    log_warning("clip_sim: zero vector, similarity defined as 0");
    return 0.0;
  }
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

inline double personalization_reward(std::span<const double> generated,
                                     const std::vector<std::vector<double>>& history) {
  if (history.empty()) throw Error("personalization_reward: empty history");
  double sum = 0.0;
  for (const auto& h : history) sum += clip_sim(generated, h);
  return sum / static_cast<double>(history.size());
}

struct RewardBundle {
  double personal_v = 0.0;  // R_p^v
  double personal_t = 0.0;  // R_p^t
  double consistency = 0.0;  // R_crs
  double gamma = 0.5;

  double image_weight() const { return personal_v + gamma * consistency; }
  double text_weight() const { return personal_t + gamma * consistency; }
};

// Mean of the L user codes and L item codes.
inline std::vector<double> conditioning(const CodebookStack<double>& stack,
                                        const TokenSequence& user, const TokenSequence& item) {
  auto c = reconstruct(user, stack);
  const auto ci = reconstruct(item, stack);
  const double scale = 1.0 / static_cast<double>(user.size() + item.size());
  for (std::size_t k = 0; k < c.size(); ++k) c[k] = (c[k] + ci[k]) * scale;
  return c;
}

using CodebookGrad = std::vector<Matrix<double>>;

inline CodebookGrad zero_grad(const CodebookStack<double>& stack) {
  return CodebookGrad(stack.levels(), Matrix<double>(stack.size(), stack.dim));
}

namespace detail {

// Scatters d(loss)/d(conditioning) to the 2L looked-up codes.
inline void scatter_conditioning_grad(CodebookGrad& grad, std::span<const double> dcond,
                                      const TokenSequence& user, const TokenSequence& item) {
  const double scale = 1.0 / static_cast<double>(user.size() + item.size());
  for (const auto* tokens : {&user, &item}) {
    for (std::size_t l = 0; l < tokens->size(); ++l) {
      auto row = grad[l].row((*tokens)[l] - 1);
      for (std::size_t k = 0; k < row.size(); ++k) row[k] += scale * dcond[k];
    }
  }
}

}  // namespace detail

struct WeightedLoss {
  double loss = 0.0;       // weight * base
  double base_loss = 0.0;  // unweighted
  double weight = 0.0;
  CodebookGrad grad;       // d(loss)/d(codes), stack-shaped
};

// (R_p^v + gamma R_crs) * ||eps - eps_hat(target + sigma eps, c)||^2.
// The target (the current generation) and the rewards are constants.
inline WeightedLoss weighted_image_loss(const ToyGenerator& gen,
                                        const CodebookStack<double>& stack,
                                        const TokenSequence& user, const TokenSequence& item,
                                        std::span<const double> target,
                                        const RewardBundle& rewards,
                                        std::span<const double> noise) {
  if (target.size() != gen.image_dim || noise.size() != gen.image_dim) {
    throw Error("weighted_image_loss: image width mismatch");
  }
  const auto cond = conditioning(stack, user, item);
  std::vector<double> noisy(gen.image_dim);
  for (std::size_t k = 0; k < noisy.size(); ++k) {
    noisy[k] = target[k] + gen.noise_sigma * noise[k];
  }
  const auto eps_hat = gen.predict_noise(noisy, cond);
  WeightedLoss out;
  out.weight = rewards.image_weight();
  std::vector<double> diff(gen.image_dim);
  for (std::size_t k = 0; k < diff.size(); ++k) {
    diff[k] = noise[k] - eps_hat[k];
    out.base_loss += diff[k] * diff[k];
  }
  out.loss = out.weight * out.base_loss;
  out.grad = zero_grad(stack);
  if (out.weight == 0.0) return out;
  // d loss / d eps_hat = -2 w diff; eps_hat = ... + A_c cond.
  std::vector<double> dcond(gen.dim_v, 0.0);
  for (std::size_t r = 0; r < gen.image_dim; ++r) {
    const double up = -2.0 * out.weight * diff[r];
    const auto row = gen.denoiser.row(r);
    for (std::size_t c = 0; c < gen.dim_v; ++c) dcond[c] += up * row[gen.image_dim + c];
  }
  detail::scatter_conditioning_grad(out.grad, dcond, user, item);
  return out;
}

inline WeightedLoss weighted_image_loss(const ToyGenerator& gen,
                                        const CodebookStack<double>& stack,
                                        const TokenSequence& user, const TokenSequence& item,
                                        std::span<const double> target,
                                        const RewardBundle& rewards, std::uint64_t noise_seed) {
  std::mt19937_64 rng(noise_seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> noise(gen.image_dim);
  for (auto& v : noise) v = n(rng);
  return weighted_image_loss(gen, stack, user, item, target, rewards, noise);
}

// -(R_p^t + gamma R_crs) * sum_j log P(y_j | c). Reference symbols are
// 1-based in [1, V].
inline WeightedLoss weighted_text_loss(const ToyGenerator& gen,
                                       const CodebookStack<double>& stack,
                                       const TokenSequence& user, const TokenSequence& item,
                                       std::span<const std::uint32_t> reference,
                                       const RewardBundle& rewards) {
  if (reference.size() != gen.seq_len) {
    throw Error("weighted_text_loss: reference has " + std::to_string(reference.size()) +
                " symbols, expected " + std::to_string(gen.seq_len));
  }
  for (auto y : reference) {
    if (y < 1 || y > gen.vocab) {
      throw Error("weighted_text_loss: symbol " + std::to_string(y) + " outside [1, " +
                  std::to_string(gen.vocab) + "]");
    }
  }
  const auto cond = conditioning(stack, user, item);
  const auto logits = gen.text_logits(cond);
  WeightedLoss out;
  out.weight = rewards.text_weight();
  std::vector<double> dcond(gen.dim_t, 0.0);
  for (std::size_t j = 0; j < gen.seq_len; ++j) {
    const auto p = softmax_row(logits.row(j));
    const std::size_t y = reference[j] - 1;
    out.base_loss -= std::log(p[y]);
    if (out.weight == 0.0) continue;
    for (std::size_t v = 0; v < gen.vocab; ++v) {
      const double dlogit = out.weight * (p[v] - (v == y ? 1.0 : 0.0));
      if (dlogit == 0.0) continue;
      const auto row = gen.text_head.row(j * gen.vocab + v);
      for (std::size_t c = 0; c < gen.dim_t; ++c) dcond[c] += dlogit * row[c];
    }
  }
  out.loss = out.weight * out.base_loss;
  out.grad = zero_grad(stack);
  if (out.weight != 0.0) detail::scatter_conditioning_grad(out.grad, dcond, user, item);
  return out;
}

// Mean cross-modal similarity over (image, text) shared-space pairs.
inline double compute_ccs(
    const std::vector<std::pair<std::vector<double>, std::vector<double>>>& pairs) {
  if (pairs.empty()) throw Error("compute_ccs: empty batch");
  double sum = 0.0;
  for (const auto& [img, txt] : pairs) sum += clip_sim(img, txt);
  return sum / static_cast<double>(pairs.size());
}

struct UserItemPair {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
};

// Everything stage 2 needs: the codebooks it tunes, the frozen tokens, and
// per-user reward histories already projected into the shared space.
struct StageTwoProblem {
  CodebookStack<double> visual;
  CodebookStack<double> text;
  std::vector<TokenSequence> user_tokens_v, user_tokens_t;
  std::vector<TokenSequence> item_tokens_v, item_tokens_t;
  std::vector<std::vector<std::vector<double>>> history_v;  // per user
  std::vector<std::vector<std::vector<double>>> history_t;
  std::vector<UserItemPair> train_pairs;
  std::vector<UserItemPair> heldout_pairs;

  std::size_t trainable_parameters() const {
    return visual.parameter_count() + text.parameter_count();
  }
};

// Expected symbol histogram (mean softmax over positions).
inline std::vector<double> expected_text_feature(const ToyGenerator& gen,
                                                 std::span<const double> cond) {
  const auto logits = gen.text_logits(cond);
  std::vector<double> h(gen.vocab, 0.0);
  for (std::size_t j = 0; j < gen.seq_len; ++j) {
    const auto p = softmax_row(logits.row(j));
    for (std::size_t v = 0; v < gen.vocab; ++v) h[v] += p[v] / static_cast<double>(gen.seq_len);
  }
  return h;
}

inline std::vector<double> sampled_text_feature(const ToyGenerator& gen,
                                                std::span<const std::uint32_t> symbols) {
  std::vector<double> h(gen.vocab, 0.0);
  for (auto y : symbols) h[y - 1] += 1.0 / static_cast<double>(symbols.size());
  return h;
}

// Builds histories from the stage-1 checkpoint: each history entry is the
// generator's output conditioned on a train item's own codes (mean of its L
// looked-up codes), for the user's `history_cap` most recent train items.
// Users are assigned to the held-out set by a seeded shuffle.
inline StageTwoProblem build_stage2_problem(const StageOneModel& model,
                                            const ToyGenerator& gen,
                                            const SharedSpaceProjector& proj,
                                            const StageTwoConfig& cfg) {
  StageTwoProblem p;
  p.visual = model.visual.codebooks;
  p.text = model.text.codebooks;
  auto tokens_for = [](const ModalModel& mm, std::vector<TokenSequence>& users,
                       std::vector<TokenSequence>& items) {
    const auto final = propagate(mm.graph, mm.plan, mm.base);
    for (std::size_t u = 0; u < final.users.rows(); ++u) {
      users.push_back(quantize(std::span<const double>(final.users.row(u)), mm.codebooks).tokens);
    }
    for (std::size_t i = 0; i < final.items.rows(); ++i) {
      items.push_back(quantize(std::span<const double>(final.items.row(i)), mm.codebooks).tokens);
    }
  };
  tokens_for(model.visual, p.user_tokens_v, p.item_tokens_v);
  tokens_for(model.text, p.user_tokens_t, p.item_tokens_t);

  const std::size_t users = model.user_count();
  std::vector<std::vector<Interaction>> by_user(users);
  for (const auto& e : model.train.edges) by_user[e.user].push_back(e);
  p.history_v.resize(users);
  p.history_t.resize(users);
  const double inv_l = 1.0 / static_cast<double>(p.visual.levels());
  for (std::size_t u = 0; u < users; ++u) {
    auto& edges = by_user[u];
    std::sort(edges.begin(), edges.end(), [](const auto& a, const auto& b) {
      return std::tie(b.timestamp, b.item) < std::tie(a.timestamp, a.item);
    });
    if (edges.size() > cfg.history_cap) edges.resize(cfg.history_cap);
    for (const auto& e : edges) {
      auto cv = reconstruct(p.item_tokens_v[e.item], p.visual);
      auto ct = reconstruct(p.item_tokens_t[e.item], p.text);
      for (auto& v : cv) v *= inv_l;
      for (auto& v : ct) v *= inv_l;
      p.history_v[u].push_back(proj.project_image(gen.mean_image(cv)));
      p.history_t[u].push_back(proj.project_text(expected_text_feature(gen, ct)));
    }
  }

  std::vector<std::uint32_t> active;
  for (std::uint32_t u = 0; u < users; ++u) {
    if (!by_user[u].empty()) active.push_back(u);
  }
  std::mt19937_64 rng(cfg.seed ^ 0x68656c64ull);
  std::shuffle(active.begin(), active.end(), rng);
  const auto n_heldout = static_cast<std::size_t>(
      std::floor(cfg.heldout_fraction * static_cast<double>(active.size())));
  std::vector<bool> heldout(users, false);
  for (std::size_t k = 0; k < n_heldout; ++k) heldout[active[k]] = true;
  for (const auto& e : model.train.edges) {
    (heldout[e.user] ? p.heldout_pairs : p.train_pairs).push_back({e.user, e.item});
  }
  return p;
}

struct Generation {
  std::vector<double> image;                 // image-space sample
  std::vector<std::uint32_t> text;           // sampled symbols, 1-based
  std::vector<double> image_shared;
  std::vector<double> text_shared;
};

inline Generation generate(const ToyGenerator& gen, const SharedSpaceProjector& proj,
                           const StageTwoProblem& p, const UserItemPair& pair,
                           double sample_sigma, std::mt19937_64& rng) {
  Generation g;
  const auto cv = conditioning(p.visual, p.user_tokens_v[pair.user], p.item_tokens_v[pair.item]);
  const auto ct = conditioning(p.text, p.user_tokens_t[pair.user], p.item_tokens_t[pair.item]);
  g.image = gen.mean_image(cv);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : g.image) v += sample_sigma * n(rng);
  const auto logits = gen.text_logits(ct);
  for (std::size_t j = 0; j < gen.seq_len; ++j) {
    const auto probs = softmax_row(logits.row(j));
    std::discrete_distribution<std::uint32_t> pick(probs.begin(), probs.end());
    g.text.push_back(pick(rng) + 1);
  }
  g.image_shared = proj.project_image(g.image);
  g.text_shared = proj.project_text(sampled_text_feature(gen, g.text));
  return g;
}

inline RewardBundle compute_rewards(const StageTwoProblem& p, std::uint32_t user,
                                    std::span<const double> image_shared,
                                    std::span<const double> text_shared, double gamma) {
  RewardBundle r;
  r.gamma = gamma;
  r.personal_v = personalization_reward(image_shared, p.history_v[user]);
  r.personal_t = personalization_reward(text_shared, p.history_t[user]);
  r.consistency = clip_sim(image_shared, text_shared);
  return r;
}

struct RewardSummary {
  double personal_v = 0.0;
  double personal_t = 0.0;
  double consistency = 0.0;
  double objective = 0.0;  // mean of (R_p^v + R_p^t)/2 + gamma R_crs
};

// Noise-free evaluation: mean image and expected text histogram.
inline RewardSummary evaluate_rewards(const ToyGenerator& gen, const SharedSpaceProjector& proj,
                                      const StageTwoProblem& p,
                                      const std::vector<UserItemPair>& pairs, double gamma) {
  RewardSummary s;
  if (pairs.empty()) return s;
  for (const auto& pair : pairs) {
    const auto cv = conditioning(p.visual, p.user_tokens_v[pair.user], p.item_tokens_v[pair.item]);
    const auto ct = conditioning(p.text, p.user_tokens_t[pair.user], p.item_tokens_t[pair.item]);
    const auto img = proj.project_image(gen.mean_image(cv));
    const auto txt = proj.project_text(expected_text_feature(gen, ct));
    const auto r = compute_rewards(p, pair.user, img, txt, gamma);
    s.personal_v += r.personal_v;
    s.personal_t += r.personal_t;
    s.consistency += r.consistency;
  }
  const double n = static_cast<double>(pairs.size());
  s.personal_v /= n;
  s.personal_t /= n;
  s.consistency /= n;
  s.objective = 0.5 * (s.personal_v + s.personal_t) + gamma * s.consistency;
  return s;
}

struct RewardTraceRow {
  std::size_t step = 0;
  double personal_v = 0.0;
  double personal_t = 0.0;
  double consistency = 0.0;
  double loss_v = 0.0;
  double loss_t = 0.0;
};

inline void write_trace_row(std::ostream& out, const RewardTraceRow& r) {
  out << r.step << '\t' << r.personal_v << '\t' << r.personal_t << '\t' << r.consistency
      << '\t' << r.loss_v << '\t' << r.loss_t << '\n';
}

struct StageTwoRun {
  StageTwoProblem problem;
  std::vector<RewardSummary> epoch_rewards;  // [0] is before training
  std::vector<RewardTraceRow> trace;
};

// Reward-weighted fine-tuning of the codebook vectors only; generators,
// projector, tokens and histories stay fixed. Rewards are computed on the
// current sampled generation and enter the losses as constants.
inline StageTwoRun train_stage2(StageTwoProblem problem, const ToyGenerator& gen,
                                const SharedSpaceProjector& proj, const StageTwoConfig& cfg,
                                std::ostream* trace_out = nullptr) {
  StageTwoRun run;
  run.problem = std::move(problem);
  auto& p = run.problem;
  const auto& eval_pairs = p.heldout_pairs.empty() ? p.train_pairs : p.heldout_pairs;
  run.epoch_rewards.push_back(evaluate_rewards(gen, proj, p, eval_pairs, cfg.gamma));
  if (trace_out) {
    trace_out->precision(9);
    *trace_out << "step\tR_p_v\tR_p_t\tR_crs\tweighted_loss_v\tweighted_loss_t\n";
  }
  if (p.train_pairs.empty()) return run;

  std::vector<AdamState> adam_v(p.visual.levels()), adam_t(p.text.levels());
  std::vector<std::size_t> order(p.train_pairs.size());
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    auto shuffle_rng = step_rng(cfg.seed, epoch, 3);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      auto grad_v = zero_grad(p.visual);
      auto grad_t = zero_grad(p.text);
      auto rng = step_rng(cfg.seed, step, 4);
      RewardTraceRow row;
      row.step = step;
      for (std::size_t k = start; k < end; ++k) {
        const auto& pair = p.train_pairs[order[k]];
        const auto g = generate(gen, proj, p, pair, cfg.sample_sigma, rng);
        auto rewards = compute_rewards(p, pair.user, g.image_shared, g.text_shared, cfg.gamma);
        if (cfg.pin_rewards) rewards = RewardBundle{0.0, 0.0, 0.0, cfg.gamma};
        std::normal_distribution<double> n(0.0, 1.0);
        std::vector<double> noise(gen.image_dim);
        for (auto& v : noise) v = n(rng);
        const auto lv = weighted_image_loss(gen, p.visual, p.user_tokens_v[pair.user],
                                            p.item_tokens_v[pair.item], g.image, rewards, noise);
        const auto lt = weighted_text_loss(gen, p.text, p.user_tokens_t[pair.user],
                                           p.item_tokens_t[pair.item], g.text, rewards);
        for (std::size_t l = 0; l < grad_v.size(); ++l) {
          auto dst = grad_v[l].values();
          const auto src = lv.grad[l].values();
          for (std::size_t q = 0; q < dst.size(); ++q) dst[q] += inv_b * src[q];
        }
        for (std::size_t l = 0; l < grad_t.size(); ++l) {
          auto dst = grad_t[l].values();
          const auto src = lt.grad[l].values();
          for (std::size_t q = 0; q < dst.size(); ++q) dst[q] += inv_b * src[q];
        }
        row.personal_v += rewards.personal_v * inv_b;
        row.personal_t += rewards.personal_t * inv_b;
        row.consistency += rewards.consistency * inv_b;
        row.loss_v += lv.loss * inv_b;
        row.loss_t += lt.loss * inv_b;
      }
      for (std::size_t l = 0; l < p.visual.levels(); ++l) {
        adam_step(p.visual.codes[l], grad_v[l], adam_v[l], cfg.lr);
      }
      for (std::size_t l = 0; l < p.text.levels(); ++l) {
        adam_step(p.text.codes[l], grad_t[l], adam_t[l], cfg.lr);
      }
      if (trace_out) write_trace_row(*trace_out, row);
      run.trace.push_back(row);
      ++step;
    }
    run.epoch_rewards.push_back(evaluate_rewards(gen, proj, p, eval_pairs, cfg.gamma));
  }
  return run;
}

}  // namespace preftok
