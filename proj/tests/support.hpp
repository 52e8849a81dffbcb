#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "preftok/dataset.hpp"
#include "preftok/matrix.hpp"
#include "preftok/stage1_trainer.hpp"
#include "preftok/stage2_reward.hpp"

namespace support {

using preftok::FeatureMatrix;
using preftok::InteractionSet;
using preftok::Matrix;

// Central differences of f around x, one coordinate at a time.
inline std::vector<double> numeric_gradient(const std::function<double(std::span<const double>)>& f,
                                            std::vector<double> x, double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double saved = x[k];
    x[k] = saved + h;
    const double up = f(x);
    x[k] = saved - h;
    const double down = f(x);
    x[k] = saved;
    g[k] = (up - down) / (2.0 * h);
  }
  return g;
}

// max |a-b| / max(max|b|, floor): relative error of a whole gradient vector.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                             double floor = 1e-8) {
  double diff = 0.0, scale = floor;
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    diff = std::max(diff, std::abs(analytic[k] - numeric[k]));
    scale = std::max(scale, std::abs(numeric[k]));
  }
  return diff / scale;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

template <typename Real>
Matrix<Real> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Matrix<Real> m(r, c);
  for (auto& x : m.storage()) x = static_cast<Real>(d(rng));
  return m;
}

struct PlantedData {
  preftok::Dataset dataset;
  std::vector<std::size_t> user_cluster;
  std::vector<std::size_t> item_cluster;
  InteractionSet all_edges;
};

struct PlantedOptions {
  std::size_t users = 500;
  std::size_t items = 300;
  std::size_t clusters = 8;
  std::size_t per_user = 20;
  double in_cluster = 0.85;
  double feature_noise = 0.5;
  std::size_t dim_v = 16;
  std::size_t dim_t = 32;
};

// Users and items carry a latent cluster; users mostly interact with items of
// their own cluster; item features are noisy cluster centers. Timestamps are
// random so every split sees every cluster.
inline PlantedData planted_clusters(std::uint64_t seed, const PlantedOptions& o = {}) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  PlantedData out;
  out.item_cluster.resize(o.items);
  out.user_cluster.resize(o.users);
  std::vector<std::vector<std::uint32_t>> members(o.clusters);
  for (std::size_t i = 0; i < o.items; ++i) {
    out.item_cluster[i] = i % o.clusters;
    members[i % o.clusters].push_back(static_cast<std::uint32_t>(i));
  }
  auto features = [&](std::size_t dim) {
    Matrix<double> centers(o.clusters, dim);
    for (auto& v : centers.storage()) v = n(rng);
    FeatureMatrix f(o.items, dim);
    for (std::size_t i = 0; i < o.items; ++i) {
      for (std::size_t j = 0; j < dim; ++j) {
        f(i, j) = static_cast<float>(centers(out.item_cluster[i], j) + o.feature_noise * n(rng));
      }
    }
    return f;
  };
  auto fv = features(o.dim_v);
  auto ft = features(o.dim_t);

  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::uint32_t> any_item(0, static_cast<std::uint32_t>(o.items - 1));
  std::uniform_int_distribution<std::int64_t> when(0, 1'000'000);
  for (std::size_t u = 0; u < o.users; ++u) {
    out.user_cluster[u] = u % o.clusters;
    const auto& own = members[out.user_cluster[u]];
    std::uniform_int_distribution<std::size_t> pick(0, own.size() - 1);
    std::vector<bool> taken(o.items, false);
    for (std::size_t k = 0; k < o.per_user; ++k) {
      std::uint32_t item;
      do {
        item = coin(rng) < o.in_cluster ? own[pick(rng)] : any_item(rng);
      } while (taken[item]);
      taken[item] = true;
      out.all_edges.edges.push_back({static_cast<std::uint32_t>(u), item, when(rng)});
    }
  }
  out.dataset = preftok::make_dataset(out.all_edges, std::move(fv), std::move(ft));
  out.dataset.user_count = o.users;
  return out;
}

// Items from a 2-level hierarchy (coarse x fine clusters) in both
// modalities; users each like one fine cluster.
inline PlantedData hierarchical_items(std::uint64_t seed, std::size_t coarse = 4,
                                      std::size_t fine = 3, std::size_t per_fine = 20,
                                      std::size_t users = 240, std::size_t dim_v = 16,
                                      std::size_t dim_t = 32) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  const std::size_t leaves = coarse * fine;
  const std::size_t items = leaves * per_fine;
  PlantedData out;
  out.item_cluster.resize(items);
  for (std::size_t i = 0; i < items; ++i) out.item_cluster[i] = i % leaves;
  auto features = [&](std::size_t dim) {
    Matrix<double> top(coarse, dim), leaf(leaves, dim);
    for (auto& v : top.storage()) v = 3.0 * n(rng);
    for (std::size_t f = 0; f < leaves; ++f) {
      for (std::size_t j = 0; j < dim; ++j) leaf(f, j) = top(f / fine, j) + 1.0 * n(rng);
    }
    FeatureMatrix m(items, dim);
    for (std::size_t i = 0; i < items; ++i) {
      for (std::size_t j = 0; j < dim; ++j) {
        m(i, j) = static_cast<float>(leaf(out.item_cluster[i], j) + 0.3 * n(rng));
      }
    }
    return m;
  };
  auto fv = features(dim_v);
  auto ft = features(dim_t);
  out.user_cluster.resize(users);
  std::uniform_int_distribution<std::int64_t> when(0, 1'000'000);
  std::uniform_int_distribution<std::size_t> pick(0, per_fine - 1);
  for (std::size_t u = 0; u < users; ++u) {
    out.user_cluster[u] = u % leaves;
    std::vector<bool> taken(per_fine, false);
    for (std::size_t k = 0; k < 8; ++k) {
      std::size_t slot;
      do {
        slot = pick(rng);
      } while (taken[slot]);
      taken[slot] = true;
      const auto item = static_cast<std::uint32_t>(slot * leaves + out.user_cluster[u]);
      out.all_edges.edges.push_back({static_cast<std::uint32_t>(u), item, when(rng)});
    }
  }
  out.dataset = preftok::make_dataset(out.all_edges, std::move(fv), std::move(ft));
  out.dataset.user_count = users;
  return out;
}

struct PlantedStageTwo {
  preftok::StageTwoProblem problem;
  preftok::ToyGenerator gen;
  preftok::SharedSpaceProjector proj;
  preftok::StageTwoConfig cfg;
};

// Users fall into `groups`; each group's reward history is generated from a
// hidden target conditioning vector, so the best codes for a group point
// along its target. Users of a group share their level-1 code, which lets
// tuning on train users carry over to held-out users.
inline PlantedStageTwo planted_stage2(std::uint64_t seed, std::size_t users = 100,
                                      std::size_t items = 60, std::size_t groups = 4) {
  PlantedStageTwo out;
  auto& cfg = out.cfg;
  cfg.seed = seed;
  cfg.lr = 1e-3;
  cfg.epochs = 20;
  cfg.history_cap = 8;
  const std::size_t levels = 4, size = 8, dim_v = 16, dim_t = 32;
  std::mt19937_64 rng(seed * 7919 + 1);
  out.gen = preftok::ToyGenerator::seeded(dim_v, dim_t, cfg, seed + 100);
  // Sharper text head so histograms differ between conditionings.
  for (auto& v : out.gen.text_head.storage()) v *= 3.0;
  out.proj = preftok::SharedSpaceProjector::seeded(cfg.image_dim, cfg.vocab, cfg.shared_dim,
                                                   seed + 200);
  auto& p = out.problem;
  p.visual = preftok::CodebookStack<double>::zeros(levels, size, dim_v);
  p.text = preftok::CodebookStack<double>::zeros(levels, size, dim_t);
  for (auto& c : p.visual.codes) c = random_matrix<double>(size, dim_v, rng, 0.5);
  for (auto& c : p.text.codes) c = random_matrix<double>(size, dim_t, rng, 0.5);
  p.visual.sync_ema_with_codes();
  p.text.sync_ema_with_codes();

  std::uniform_int_distribution<std::uint32_t> tok(1, static_cast<std::uint32_t>(size));
  auto random_tokens = [&] {
    preftok::TokenSequence t;
    for (std::size_t l = 0; l < levels; ++l) t.indices.push_back(tok(rng));
    return t;
  };
  std::vector<std::size_t> group(users);
  for (std::size_t u = 0; u < users; ++u) {
    group[u] = u % groups;
    auto tv = random_tokens(), tt = random_tokens();
    tv.indices[0] = tt.indices[0] = static_cast<std::uint32_t>(group[u] + 1);
    p.user_tokens_v.push_back(tv);
    p.user_tokens_t.push_back(tt);
  }
  for (std::size_t i = 0; i < items; ++i) {
    p.item_tokens_v.push_back(random_tokens());
    p.item_tokens_t.push_back(random_tokens());
  }
  std::vector<std::vector<double>> target_v, target_t;
  for (std::size_t g = 0; g < groups; ++g) {
    target_v.push_back(random_vector(dim_v, rng));
    target_t.push_back(random_vector(dim_t, rng, 0.5));
  }
  std::normal_distribution<double> n(0.0, 1.0);
  p.history_v.resize(users);
  p.history_t.resize(users);
  for (std::size_t u = 0; u < users; ++u) {
    for (std::size_t h = 0; h < cfg.history_cap; ++h) {
      auto cv = target_v[group[u]], ct = target_t[group[u]];
      for (auto& v : cv) v += 0.2 * n(rng);
      for (auto& v : ct) v += 0.1 * n(rng);
      p.history_v[u].push_back(out.proj.project_image(out.gen.mean_image(cv)));
      p.history_t[u].push_back(
          out.proj.project_text(preftok::expected_text_feature(out.gen, ct)));
    }
  }
  std::uniform_int_distribution<std::uint32_t> any_item(0, static_cast<std::uint32_t>(items - 1));
  const std::size_t heldout = users / 5;
  for (std::size_t u = 0; u < users; ++u) {
    for (int k = 0; k < 5; ++k) {
      const preftok::UserItemPair pair{static_cast<std::uint32_t>(u), any_item(rng)};
      (u < heldout ? p.heldout_pairs : p.train_pairs).push_back(pair);
    }
  }
  return out;
}

inline preftok::Dataset tiny_dataset(std::size_t users, std::size_t items, std::size_t dim_v,
                                     std::size_t dim_t,
                                     const std::vector<std::pair<std::uint32_t, std::uint32_t>>& edges,
                                     std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  preftok::Dataset d;
  std::int64_t t = 0;
  for (auto [u, i] : edges) d.split.train.edges.push_back({u, i, ++t});
  d.features_v = random_matrix<float>(items, dim_v, rng);
  d.features_t = random_matrix<float>(items, dim_t, rng);
  d.user_count = users;
  return d;
}

inline preftok::StageOneConfig tiny_config(std::size_t dim) {
  preftok::StageOneConfig c;
  c.dim_v = dim;
  c.dim_t = dim;
  c.levels = 2;
  c.codebook_size = 3;
  c.batch_size = 6;
  c.epochs = 1;
  c.lr = 1e-2;
  return c;
}

// Surrogate objective for the straight-through estimator: tokens and the
// offset zhat0 - z0 are frozen at the current point, so
//   S(base) = BPR(z + delta) + beta CM(z + delta) + alpha sum_l ||r^{l+1}(z)||^2
// is smooth in the base embeddings. Its gradient must equal the trainer's.
inline double surrogate_gradient_error() {
  using namespace preftok;
  const std::size_t d = 4;
  auto data = tiny_dataset(4, 5, d, d,
                           {{0, 0}, {0, 1}, {1, 1}, {1, 2}, {2, 3}, {3, 4}, {3, 0}}, 7);
  auto cfg = tiny_config(d);
  cfg.codebook_size = 3;
  auto model = make_stage1_model(data, cfg);
  const auto batch = TripleSampler(model.train, 5).sample(6, 3, 0);
  init_codebooks(model, batch);
  // Perturb codes so residuals are generic.
  std::mt19937_64 rng(8);
  for (auto* mm : {&model.visual, &model.text}) {
    for (auto& c : mm->codebooks.codes)
      for (auto& v : c.storage()) v += 0.05 * std::normal_distribution<double>(0, 1)(rng);
  }
  const auto g = stage1_forward_backward(model, batch);

  struct Frozen {
    EmbeddingTable<double> z0;
    std::vector<QuantizationResult<double>> users, items;
  };
  auto freeze = [&](const ModalModel& mm) {
    Frozen f;
    f.z0 = propagate(mm.graph, mm.plan, mm.base);
    for (std::size_t u = 0; u < f.z0.users.rows(); ++u)
      f.users.push_back(quantize(std::span<const double>(f.z0.users.row(u)), mm.codebooks));
    for (std::size_t i = 0; i < f.z0.items.rows(); ++i)
      f.items.push_back(quantize(std::span<const double>(f.z0.items.row(i)), mm.codebooks));
    return f;
  };
  const Frozen fv = freeze(model.visual), ft = freeze(model.text);

  auto surrogate = [&](const EmbeddingTable<double>& bv, const EmbeddingTable<double>& bt) {
    const auto zv = propagate(model.visual.graph, model.visual.plan, bv);
    const auto zt = propagate(model.text.graph, model.text.plan, bt);
    auto shifted = [](const Matrix<double>& z, const Matrix<double>& z0,
                      const QuantizationResult<double>& q, std::size_t r) {
      std::vector<double> out(z.cols());
      for (std::size_t j = 0; j < z.cols(); ++j) out[j] = q.reconstruction[j] + z(r, j) - z0(r, j);
      return out;
    };
    auto concat = [](std::vector<double> a, const std::vector<double>& b) {
      a.insert(a.end(), b.begin(), b.end());
      return a;
    };
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    double total = 0.0;
    for (const auto& t : batch.triples) {
      const auto ut = shifted(zt.users, ft.z0.users, ft.users[t.user], t.user);
      const auto uv = shifted(zv.users, fv.z0.users, fv.users[t.user], t.user);
      const auto it = shifted(zt.items, ft.z0.items, ft.items[t.pos], t.pos);
      const auto iv = shifted(zv.items, fv.z0.items, fv.items[t.pos], t.pos);
      const auto jt = shifted(zt.items, ft.z0.items, ft.items[t.neg], t.neg);
      const auto jv = shifted(zv.items, fv.z0.items, fv.items[t.neg], t.neg);
      total += inv_b * bpr_loss(concat(ut, uv), concat(it, iv), concat(jt, jv)).loss;
      total += cfg.beta * inv_b * cross_modal_loss(it, iv, jv, model.scorer).loss;
    }
    const auto entries = rq_entries(batch, cfg.rq_users);
    auto commit = [&](const EmbeddingTable<double>& z, const Frozen& f,
                      const CodebookStack<double>& stack) {
      double s = 0.0;
      for (const auto& e : entries) {
        const auto row = e.is_user ? z.users.row(e.id) : z.items.row(e.id);
        const auto& q = e.is_user ? f.users[e.id] : f.items[e.id];
        std::vector<double> r(row.begin(), row.end());
        for (std::size_t l = 0; l < stack.levels(); ++l) {
          const auto code = stack.code(l, q.tokens[l]);
          for (std::size_t j = 0; j < r.size(); ++j) r[j] -= code[j];
          s += cfg.alpha * squared_norm(std::span<const double>(r));
        }
      }
      return s / static_cast<double>(entries.size());
    };
    total += commit(zv, fv, model.visual.codebooks) + commit(zt, ft, model.text.codebooks);
    return total;
  };

  // Flatten all four base blocks.
  auto flatten = [](const EmbeddingTable<double>& v, const EmbeddingTable<double>& t) {
    std::vector<double> x;
    for (const auto* m : {&v.users, &v.items, &t.users, &t.items})
      x.insert(x.end(), m->storage().begin(), m->storage().end());
    return x;
  };
  const auto x0 = flatten(model.visual.base, model.text.base);
  const auto numeric = numeric_gradient(
      [&](std::span<const double> x) {
        auto bv = model.visual.base, bt = model.text.base;
        std::size_t o = 0;
        for (auto* m : {&bv.users, &bv.items, &bt.users, &bt.items}) {
          std::copy(x.begin() + o, x.begin() + o + m->size(), m->storage().begin());
          o += m->size();
        }
        return surrogate(bv, bt);
      },
      x0, 1e-6);
  const auto analytic = flatten(g.grad_base_v, g.grad_base_t);
  return relative_error(analytic, numeric);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("preftok_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace support
