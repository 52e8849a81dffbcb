#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "preftok/adam.hpp"
#include "preftok/config.hpp"
#include "preftok/data_ingest.hpp"
#include "preftok/dataset.hpp"
#include "preftok/gcn_encoder.hpp"
#include "preftok/log.hpp"
#include "preftok/losses.hpp"
#include "preftok/quantizer.hpp"

namespace preftok {

struct Triple {
  std::uint32_t user = 0;
  std::uint32_t pos = 0;
  std::uint32_t neg = 0;
  bool operator==(const Triple&) const = default;
};

struct TripleBatch {
  std::vector<Triple> triples;
  std::size_t size() const { return triples.size(); }
};

// Independent stream per (seed, step) so batches do not depend on how many
// random draws earlier steps consumed.
inline std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t step,
                                std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

class TripleSampler {
 public:
  TripleSampler(const InteractionSet& train, std::size_t item_count)
      : item_count_(item_count) {
    const std::size_t users = train.user_bound();
    positives_.resize(users);
    for (const auto& e : train.edges) {
      if (e.item >= item_count) {
        throw Error("sampler: item " + std::to_string(e.item) + " out of range");
      }
      positives_[e.user].push_back(e.item);
    }
    for (auto& p : positives_) {
      std::sort(p.begin(), p.end());
      p.erase(std::unique(p.begin(), p.end()), p.end());
    }
    for (std::size_t u = 0; u < users; ++u) {
      if (!positives_[u].empty() && positives_[u].size() >= item_count) {
        log_warning("user " + std::to_string(u) +
                    " interacted with every item; excluded from negative sampling");
        ++excluded_users_;
      }
    }
    for (const auto& e : train.edges) {
      if (positives_[e.user].size() < item_count) eligible_.push_back(e);
    }
  }

  bool is_positive(std::uint32_t user, std::uint32_t item) const {
    if (user >= positives_.size()) return false;
    const auto& p = positives_[user];
    return std::binary_search(p.begin(), p.end(), item);
  }

  const std::vector<std::uint32_t>& positives(std::uint32_t user) const {
    static const std::vector<std::uint32_t> kEmpty;
    return user < positives_.size() ? positives_[user] : kEmpty;
  }

  std::size_t eligible_edges() const { return eligible_.size(); }
  std::size_t excluded_users() const { return excluded_users_; }
  std::size_t item_count() const { return item_count_; }

  // Positives uniform over eligible train edges; each negative uniform over
  // the items its user has not interacted with.
  TripleBatch sample(std::size_t batch, std::uint64_t seed, std::uint64_t step) const {
    TripleBatch out;
    if (eligible_.empty()) return out;
    auto rng = step_rng(seed, step, 1);
    std::uniform_int_distribution<std::size_t> pick_edge(0, eligible_.size() - 1);
    std::uniform_int_distribution<std::uint32_t> pick_item(
        0, static_cast<std::uint32_t>(item_count_ - 1));
    out.triples.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& e = eligible_[pick_edge(rng)];
      std::uint32_t neg;
      do {
        neg = pick_item(rng);
      } while (is_positive(e.user, neg));
      out.triples.push_back({e.user, e.item, neg});
    }
    return out;
  }

 private:
  std::size_t item_count_;
  std::vector<std::vector<std::uint32_t>> positives_;
  std::vector<Interaction> eligible_;
  std::size_t excluded_users_ = 0;
};

inline TripleBatch sample_triples(const InteractionSet& train, std::size_t item_count,
                                  std::size_t batch, std::uint64_t seed,
                                  std::uint64_t step = 0) {
  return TripleSampler(train, item_count).sample(batch, seed, step);
}

struct ModalModel {
  ModalGraph graph;
  PropagationPlan plan;
  EmbeddingTable<double> base;
  CodebookStack<double> codebooks;
  AdamState adam_users;
  AdamState adam_items;
};

struct StageOneModel {
  StageOneConfig config;
  InteractionSet train;
  ModalModel visual;
  ModalModel text;
  MlpScorer scorer;
  AdamState adam_scorer;
  std::size_t step = 0;
  bool codebooks_ready = false;

  std::size_t user_count() const { return visual.graph.user_count; }
  std::size_t item_count() const { return visual.graph.item_count; }
  ModalModel& modal(Modality m) { return m == Modality::kVisual ? visual : text; }
  const ModalModel& modal(Modality m) const {
    return m == Modality::kVisual ? visual : text;
  }
};

inline ModalModel make_modal_model(const InteractionSet& train, Modality m,
                                   const FeatureMatrix& features, std::size_t user_count,
                                   const StageOneConfig& config, std::size_t dim,
                                   std::uint64_t seed) {
  if (features.cols() != dim) {
    throw Error(std::string("feature width for modality ") + modality_name(m) + " is " +
                std::to_string(features.cols()) + ", config expects " +
                std::to_string(dim));
  }
  ModalModel mm;
  mm.graph = build_modal_graph(train, m, features, user_count);
  mm.plan = PropagationPlan::build(mm.graph, config.layers);
  mm.base.users = init_user_embeddings<double>(features, mm.graph.user_count, seed);
  mm.base.items = features.cast<double>();
  mm.base.items_trainable = !config.freeze_items;
  mm.codebooks = CodebookStack<double>::zeros(config.levels, config.codebook_size, dim);
  return mm;
}

inline StageOneModel make_stage1_model(const Dataset& data, const StageOneConfig& config) {
  StageOneModel model;
  model.config = config;
  model.train = data.split.train;
  model.visual = make_modal_model(data.split.train, Modality::kVisual, data.features_v,
                                  data.user_count, config, config.dim_v, config.seed);
  model.text = make_modal_model(data.split.train, Modality::kText, data.features_t,
                                data.user_count, config, config.dim_t,
                                config.seed + 0x9e3779b97f4a7c15ull);
  model.scorer = MlpScorer::random(config.dim_t + config.dim_v, config.scorer_hidden(),
                                   config.seed + 0x51ed2701u);
  return model;
}

// Entities whose quantization enters the RQ loss and the EMA codebook update.
struct RqEntry {
  bool is_user = false;
  std::uint32_t id = 0;
};

inline std::vector<RqEntry> rq_entries(const TripleBatch& batch, bool include_users) {
  std::vector<RqEntry> out;
  out.reserve(batch.size() * 3);
  for (const auto& t : batch.triples) {
    if (include_users) out.push_back({true, t.user});
    out.push_back({false, t.pos});
    out.push_back({false, t.neg});
  }
  return out;
}

struct StageOneGradients {
  StageOneLosses losses;
  EmbeddingTable<double> grad_base_v;
  EmbeddingTable<double> grad_base_t;
  std::vector<double> grad_scorer;
  std::vector<CodeAssignment> assignments_v;
  std::vector<CodeAssignment> assignments_t;
  std::vector<std::vector<std::vector<double>>> recent_v;
  std::vector<std::vector<std::vector<double>>> recent_t;
};

namespace detail {

struct ModalForward {
  EmbeddingTable<double> final;
  std::vector<std::optional<QuantizationResult<double>>> users;
  std::vector<std::optional<QuantizationResult<double>>> items;

  const QuantizationResult<double>& get(const CodebookStack<double>& stack, bool user,
                                        std::uint32_t id) {
    auto& slot = user ? users[id] : items[id];
    if (!slot) {
      const auto row = user ? final.users.row(id) : final.items.row(id);
      slot = quantize(std::span<const double>(row), stack);
    }
    return *slot;
  }
};

inline ModalForward forward_modal(const ModalModel& mm) {
  ModalForward f;
  f.final = propagate(mm.graph, mm.plan, mm.base);
  f.users.resize(mm.graph.user_count);
  f.items.resize(mm.graph.item_count);
  return f;
}

inline std::span<const double> pick_vector(const ModalForward& f,
                                           const QuantizationResult<double>& q, bool user,
                                           std::uint32_t id, bool continuous) {
  if (continuous) return user ? f.final.users.row(id) : f.final.items.row(id);
  return q.reconstruction;
}

inline void add_to(std::span<double> dst, std::span<const double> src, double scale = 1.0) {
  for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += scale * src[k];
}

}  // namespace detail

// Loss values and gradients for one batch; does not mutate the model.
// Quantization is straight-through: d zhat / d z is the identity.
inline StageOneGradients stage1_forward_backward(const StageOneModel& model,
                                                 const TripleBatch& batch) {
  const auto& cfg = model.config;
  const std::size_t dv = cfg.dim_v;
  const std::size_t dt = cfg.dim_t;
  auto fv = detail::forward_modal(model.visual);
  auto ft = detail::forward_modal(model.text);

  StageOneGradients out;
  out.grad_base_v = {Matrix<double>(model.user_count(), dv),
                     Matrix<double>(model.item_count(), dv)};
  out.grad_base_t = {Matrix<double>(model.user_count(), dt),
                     Matrix<double>(model.item_count(), dt)};
  out.grad_scorer.assign(model.scorer.parameter_count(), 0.0);
  if (batch.size() == 0) return out;

  auto& gfv = out.grad_base_v;  // gradients w.r.t. propagated tables for now
  auto& gft = out.grad_base_t;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const bool cont = cfg.continuous_z;
  double bpr = 0.0, cm = 0.0;

  std::vector<double> zu(dt + dv), zi(dt + dv), zj(dt + dv);
  for (const auto& t : batch.triples) {
    const auto& qut = ft.get(model.text.codebooks, true, t.user);
    const auto& quv = fv.get(model.visual.codebooks, true, t.user);
    const auto& qit = ft.get(model.text.codebooks, false, t.pos);
    const auto& qiv = fv.get(model.visual.codebooks, false, t.pos);
    const auto& qjt = ft.get(model.text.codebooks, false, t.neg);
    const auto& qjv = fv.get(model.visual.codebooks, false, t.neg);

    const auto ut = detail::pick_vector(ft, qut, true, t.user, cont);
    const auto uv = detail::pick_vector(fv, quv, true, t.user, cont);
    const auto it = detail::pick_vector(ft, qit, false, t.pos, cont);
    const auto iv = detail::pick_vector(fv, qiv, false, t.pos, cont);
    const auto jt = detail::pick_vector(ft, qjt, false, t.neg, cont);
    const auto jv = detail::pick_vector(fv, qjv, false, t.neg, cont);

    // Concatenation order is text then visual.
    std::copy(ut.begin(), ut.end(), zu.begin());
    std::copy(uv.begin(), uv.end(), zu.begin() + dt);
    std::copy(it.begin(), it.end(), zi.begin());
    std::copy(iv.begin(), iv.end(), zi.begin() + dt);
    std::copy(jt.begin(), jt.end(), zj.begin());
    std::copy(jv.begin(), jv.end(), zj.begin() + dt);

    const auto b = bpr_loss(zu, zi, zj);
    bpr += b.loss * inv_b;
    const std::span<const double> gu(b.grad_user), gi(b.grad_pos), gj(b.grad_neg);
    detail::add_to(gft.users.row(t.user), gu.first(dt), inv_b);
    detail::add_to(gfv.users.row(t.user), gu.subspan(dt), inv_b);
    detail::add_to(gft.items.row(t.pos), gi.first(dt), inv_b);
    detail::add_to(gfv.items.row(t.pos), gi.subspan(dt), inv_b);
    detail::add_to(gft.items.row(t.neg), gj.first(dt), inv_b);
    detail::add_to(gfv.items.row(t.neg), gj.subspan(dt), inv_b);

    const auto c = cross_modal_loss(it, iv, jv, model.scorer);
    cm += c.loss * inv_b;
    const double w = cfg.beta * inv_b;
    detail::add_to(gft.items.row(t.pos), c.grad_text, w);
    detail::add_to(gfv.items.row(t.pos), c.grad_visual_pos, w);
    detail::add_to(gfv.items.row(t.neg), c.grad_visual_neg, w);
    detail::add_to(out.grad_scorer, c.grad_params, w);
  }

  const auto entries = rq_entries(batch, cfg.rq_users);
  double rq = 0.0;
  auto rq_modal = [&](detail::ModalForward& f, const CodebookStack<double>& stack,
                      EmbeddingTable<double>& grad, std::vector<CodeAssignment>& assign,
                      std::vector<std::vector<std::vector<double>>>& recent) {
    std::vector<QuantizationResult<double>> results;
    results.reserve(entries.size());
    for (const auto& e : entries) results.push_back(f.get(stack, e.is_user, e.id));
    const auto loss = rq_loss(results, cfg.alpha);
    rq += loss.total;
    recent.assign(stack.levels(), {});
    for (std::size_t k = 0; k < entries.size(); ++k) {
      const auto& e = entries[k];
      detail::add_to(e.is_user ? grad.users.row(e.id) : grad.items.row(e.id),
                     loss.grad_z[k]);
      for (std::size_t l = 0; l < stack.levels(); ++l) {
        const auto& r = results[k].residuals[l];
        assign.push_back({l, results[k].tokens[l], std::vector<double>(r.begin(), r.end())});
        recent[l].emplace_back(r.begin(), r.end());
      }
    }
  };
  rq_modal(fv, model.visual.codebooks, gfv, out.assignments_v, out.recent_v);
  rq_modal(ft, model.text.codebooks, gft, out.assignments_t, out.recent_t);

  out.losses = total_stage1_loss(bpr, rq, cm, cfg.beta);

  out.grad_base_v = propagate_backward(model.visual.graph, model.visual.plan, gfv);
  out.grad_base_t = propagate_backward(model.text.graph, model.text.plan, gft);
  if (cfg.freeze_items) {
    out.grad_base_v.items.fill(0.0);
    out.grad_base_t.items.fill(0.0);
  }
  return out;
}

inline void init_codebooks(StageOneModel& model, const TripleBatch& batch) {
  const auto entries = rq_entries(batch, true);
  for (auto m : {Modality::kVisual, Modality::kText}) {
    auto& mm = model.modal(m);
    const auto final = propagate(mm.graph, mm.plan, mm.base);
    std::vector<std::vector<double>> rows;
    rows.reserve(entries.size());
    for (const auto& e : entries) {
      const auto r = e.is_user ? final.users.row(e.id) : final.items.row(e.id);
      rows.emplace_back(r.begin(), r.end());
    }
    init_codebooks_from_batch(mm.codebooks, rows,
                              model.config.seed + (m == Modality::kVisual ? 11u : 13u));
  }
  model.codebooks_ready = true;
}

// One optimization step: Adam on base embeddings (items only when not
// frozen) and scorer, then EMA on codebooks and dead-code resets. A decay of
// exactly 1 freezes the codebooks.
inline StageOneLosses train_step(StageOneModel& model, const TripleBatch& batch) {
  const auto& cfg = model.config;
  if (!model.codebooks_ready) init_codebooks(model, batch);
  auto g = stage1_forward_backward(model, batch);
  if (!std::isfinite(g.losses.total)) {
    log_message(LogLevel::kError, "non-finite stage-1 loss at step " +
                                      std::to_string(model.step) + "; step skipped");
    ++model.step;
    return g.losses;
  }
  adam_step(model.visual.base.users, g.grad_base_v.users, model.visual.adam_users, cfg.lr);
  adam_step(model.text.base.users, g.grad_base_t.users, model.text.adam_users, cfg.lr);
  if (!cfg.freeze_items) {
    adam_step(model.visual.base.items, g.grad_base_v.items, model.visual.adam_items, cfg.lr);
    adam_step(model.text.base.items, g.grad_base_t.items, model.text.adam_items, cfg.lr);
  }
  adam_step(model.scorer.params(), std::span<const double>(g.grad_scorer),
            model.adam_scorer, cfg.lr);
  if (cfg.ema_decay < 1.0) {
    ema_update(model.visual.codebooks, g.assignments_v, cfg.ema_decay, cfg.ema_epsilon);
    ema_update(model.text.codebooks, g.assignments_t, cfg.ema_decay, cfg.ema_epsilon);
    reset_dead_codes(model.visual.codebooks, g.recent_v, cfg.dead_code_window,
                     cfg.seed ^ (model.step * 2 + 1));
    reset_dead_codes(model.text.codebooks, g.recent_t, cfg.dead_code_window,
                     cfg.seed ^ (model.step * 2 + 2));
  }
  ++model.step;
  return g.losses;
}

// Quantized (or continuous, per config) embeddings concatenated text then
// visual, for every user and item.
struct ScoringTables {
  Matrix<double> users;
  Matrix<double> items;
};

inline ScoringTables scoring_tables(const StageOneModel& model) {
  const std::size_t dv = model.config.dim_v, dt = model.config.dim_t;
  ScoringTables out{Matrix<double>(model.user_count(), dt + dv),
                    Matrix<double>(model.item_count(), dt + dv)};
  for (auto m : {Modality::kText, Modality::kVisual}) {
    const auto& mm = model.modal(m);
    const auto final = propagate(mm.graph, mm.plan, mm.base);
    const std::size_t offset = m == Modality::kText ? 0 : dt;
    auto fill = [&](const Matrix<double>& src, Matrix<double>& dst) {
      for (std::size_t r = 0; r < src.rows(); ++r) {
        const auto row = src.row(r);
        if (model.config.continuous_z || !model.codebooks_ready) {
          std::copy(row.begin(), row.end(), dst.row(r).begin() + offset);
        } else {
          const auto q = quantize(std::span<const double>(row), mm.codebooks);
          std::copy(q.reconstruction.begin(), q.reconstruction.end(),
                    dst.row(r).begin() + offset);
        }
      }
    };
    fill(final.users, out.users);
    fill(final.items, out.items);
  }
  return out;
}

// Mean over held-out positives of the fraction of sampled negatives scored
// below the positive (ties count half). Users without train positives are
// skipped. Negatives exclude the user's train positives and the held-out item.
inline double ranking_auc(const Matrix<double>& users, const Matrix<double>& items,
                          const InteractionSet& heldout, const TripleSampler& train,
                          std::size_t negatives, std::uint64_t seed) {
  auto rng = step_rng(seed, 0, 7);
  std::uniform_int_distribution<std::uint32_t> pick(
      0, static_cast<std::uint32_t>(items.rows() - 1));
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& e : heldout.edges) {
    const auto& pos = train.positives(e.user);
    if (pos.empty() || e.user >= users.rows() || e.item >= items.rows()) continue;
    if (pos.size() + 1 >= items.rows()) continue;
    const auto u = users.row(e.user);
    const double s_pos = dot(u, items.row(e.item));
    double below = 0.0;
    for (std::size_t n = 0; n < negatives; ++n) {
      std::uint32_t j;
      do {
        j = pick(rng);
      } while (j == e.item || train.is_positive(e.user, j));
      const double s_neg = dot(u, items.row(j));
      if (s_neg < s_pos) {
        below += 1.0;
      } else if (s_neg == s_pos) {
        below += 0.5;
      }
    }
    sum += below / static_cast<double>(negatives);
    ++count;
  }
  return count ? sum / static_cast<double>(count) : 0.5;
}

inline double evaluate_auc(const StageOneModel& model, const InteractionSet& heldout,
                           std::size_t negatives = 100, std::uint64_t seed = 7) {
  const auto tables = scoring_tables(model);
  const TripleSampler sampler(model.train, model.item_count());
  return ranking_auc(tables.users, tables.items, heldout, sampler, negatives, seed);
}

struct EpochSummary {
  std::size_t epoch = 0;
  StageOneLosses mean;   // mean over the epoch's training steps
  StageOneLosses probe;  // fixed probe batch evaluated after the epoch
};

struct StageOneRun {
  StageOneModel model;
  std::vector<EpochSummary> epochs;
};

// Per-step metrics line: step bpr rq cm total (tab separated).
inline void write_metrics_line(std::ostream& out, std::size_t step,
                               const StageOneLosses& l) {
  out << step << '\t' << l.bpr << '\t' << l.rq << '\t' << l.cm << '\t' << l.total << '\n';
}

using EpochCallback = std::function<void(const StageOneModel&, const EpochSummary&)>;

inline StageOneRun train_stage1(const Dataset& data, const StageOneConfig& config,
                                std::ostream* metrics = nullptr,
                                const EpochCallback& on_epoch = {}) {
  StageOneRun run{make_stage1_model(data, config), {}};
  auto& model = run.model;
  const TripleSampler sampler(data.split.train, data.item_count());
  if (sampler.eligible_edges() == 0) throw Error("no trainable interactions");
  const std::size_t steps_per_epoch =
      (sampler.eligible_edges() + config.batch_size - 1) / config.batch_size;
  const auto probe = sampler.sample(config.batch_size, config.seed ^ 0x70726f6265ull, 0);

  if (metrics) {
    metrics->precision(9);
    *metrics << "step\tbpr\trq\tcm\ttotal\n";
  }
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochSummary summary;
    summary.epoch = epoch;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const auto batch = sampler.sample(config.batch_size, config.seed, model.step);
      const auto step = model.step;
      const auto l = train_step(model, batch);
      if (metrics) write_metrics_line(*metrics, step, l);
      const double w = 1.0 / static_cast<double>(steps_per_epoch);
      summary.mean.bpr += l.bpr * w;
      summary.mean.rq += l.rq * w;
      summary.mean.cm += l.cm * w;
      summary.mean.total += l.total * w;
    }
    summary.probe = stage1_forward_backward(model, probe).losses;
    run.epochs.push_back(summary);
    if (on_epoch) on_epoch(model, summary);
  }
  return run;
}

}  // namespace preftok
