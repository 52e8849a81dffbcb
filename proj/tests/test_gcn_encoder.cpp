#include <gtest/gtest.h>

#include <cmath>

#include "preftok/gcn_encoder.hpp"
#include "support.hpp"

using namespace preftok;

namespace {

ModalGraph graph_from(std::initializer_list<std::pair<std::uint32_t, std::uint32_t>> edges,
                      std::size_t users, std::size_t items) {
  InteractionSet set;
  std::int64_t t = 0;
  for (auto [u, i] : edges) set.edges.push_back({u, i, ++t});
  return build_modal_graph(set, Modality::kVisual, FeatureMatrix(items, 1), users);
}

ModalGraph random_graph(std::size_t users, std::size_t items, double density,
                        std::mt19937_64& rng) {
  InteractionSet set;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::int64_t t = 0;
  for (std::uint32_t u = 0; u < users; ++u) {
    for (std::uint32_t i = 0; i < items; ++i) {
      if (coin(rng) < density) set.edges.push_back({u, i, ++t});
    }
  }
  return build_modal_graph(set, Modality::kVisual, FeatureMatrix(items, 1), users);
}

EmbeddingTable<double> random_table(const ModalGraph& g, std::size_t d, std::mt19937_64& rng) {
  return {support::random_matrix<double>(g.user_count, d, rng),
          support::random_matrix<double>(g.item_count, d, rng)};
}

double inner(const EmbeddingTable<double>& a, const EmbeddingTable<double>& b) {
  return dot(a.users.values(), b.users.values()) + dot(a.items.values(), b.items.values());
}

// Dense (U+I)x(U+I) normalized adjacency with identity rows for isolated
// nodes; output = mean_{l<=J} A^l X.
Matrix<double> dense_propagate(const ModalGraph& g, const Matrix<double>& x, std::size_t layers) {
  const std::size_t n = g.user_count + g.item_count;
  Matrix<double> a(n, n);
  for (std::size_t u = 0; u < g.user_count; ++u) {
    if (g.user_items[u].empty()) a(u, u) = 1.0;
    for (auto i : g.user_items[u]) {
      const double w = 1.0 / std::sqrt(double(g.user_degree(u)) * double(g.item_degree(i)));
      a(u, g.user_count + i) = w;
      a(g.user_count + i, u) = w;
    }
  }
  for (std::size_t i = 0; i < g.item_count; ++i) {
    if (g.item_users[i].empty()) a(g.user_count + i, g.user_count + i) = 1.0;
  }
  Matrix<double> cur = x, acc = x;
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix<double> next(n, x.cols());
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t k = 0; k < n; ++k) {
        if (a(r, k) == 0.0) continue;
        for (std::size_t c = 0; c < x.cols(); ++c) next(r, c) += a(r, k) * cur(k, c);
      }
    }
    cur = next;
    for (std::size_t k = 0; k < acc.size(); ++k) acc.storage()[k] += cur.storage()[k];
  }
  for (auto& v : acc.storage()) v /= static_cast<double>(layers + 1);
  return acc;
}

}  // namespace

TEST(Propagate, SingleEdge) {
  const auto g = graph_from({{0, 0}}, 1, 1);
  EmbeddingTable<double> base{Matrix<double>(1, 2), Matrix<double>(1, 2)};
  base.items(0, 0) = 2.0;
  base.items(0, 1) = 4.0;
  const auto out = propagate(g, base, 1);
  EXPECT_DOUBLE_EQ(out.users(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(out.users(0, 1), 2.0);
}

TEST(Propagate, TwoItemsSqrtTwoCase) {
  const auto g = graph_from({{0, 0}, {0, 1}}, 1, 2);
  EmbeddingTable<double> base{Matrix<double>(1, 2), Matrix<double>(2, 2)};
  base.items(0, 0) = 1.0;
  base.items(1, 0) = 1.0;
  const auto out = propagate(g, base, 1);
  EXPECT_NEAR(out.users(0, 0), std::sqrt(2.0) / 2.0, 1e-15);
  EXPECT_EQ(out.users(0, 1), 0.0);
}

TEST(Propagate, ZeroLayersIsIdentity) {
  std::mt19937_64 rng(1);
  const auto g = random_graph(4, 5, 0.4, rng);
  const auto base = random_table(g, 3, rng);
  const auto out = propagate(g, base, 0);
  EXPECT_EQ(out.users, base.users);
  EXPECT_EQ(out.items, base.items);
  const auto back = propagate_backward(g, base, 0);
  EXPECT_EQ(back.users, base.users);
}

TEST(Propagate, IsolatedNodesKeepBase) {
  const auto g = graph_from({{0, 0}}, 2, 3);
  std::mt19937_64 rng(2);
  const auto base = random_table(g, 2, rng);
  const auto out = propagate(g, base, 2);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_EQ(out.users(1, j), base.users(1, j));
    EXPECT_EQ(out.items(2, j), base.items(2, j));
  }
}

TEST(Propagate, DimensionMismatch) {
  const auto g = graph_from({{0, 0}}, 1, 1);
  EmbeddingTable<double> bad{Matrix<double>(1, 2), Matrix<double>(1, 3)};
  EXPECT_THROW(propagate(g, bad, 1), Error);
  EmbeddingTable<double> rows{Matrix<double>(2, 2), Matrix<double>(1, 2)};
  EXPECT_THROW(propagate(g, rows, 1), Error);
}

TEST(Propagate, MatchesDenseOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto g = random_graph(1 + trial % 9, 1 + (trial * 7) % 11, 0.35, rng);
    const auto base = random_table(g, 3, rng);
    for (std::size_t layers : {0u, 1u, 2u, 3u}) {
      const auto out = propagate(g, base, layers);
      Matrix<double> x(g.user_count + g.item_count, 3);
      for (std::size_t u = 0; u < g.user_count; ++u)
        for (std::size_t c = 0; c < 3; ++c) x(u, c) = base.users(u, c);
      for (std::size_t i = 0; i < g.item_count; ++i)
        for (std::size_t c = 0; c < 3; ++c) x(g.user_count + i, c) = base.items(i, c);
      const auto ref = dense_propagate(g, x, layers);
      for (std::size_t u = 0; u < g.user_count; ++u)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out.users(u, c), ref(u, c), 1e-10);
      for (std::size_t i = 0; i < g.item_count; ++i)
        for (std::size_t c = 0; c < 3; ++c)
          EXPECT_NEAR(out.items(i, c), ref(g.user_count + i, c), 1e-10);
    }
  }
}

TEST(Propagate, Linearity) {
  std::mt19937_64 rng(4);
  const auto g = random_graph(6, 7, 0.4, rng);
  const auto e1 = random_table(g, 3, rng), e2 = random_table(g, 3, rng);
  const double a = 0.7, b = -1.3;
  EmbeddingTable<double> mix{Matrix<double>(6, 3), Matrix<double>(7, 3)};
  for (std::size_t k = 0; k < mix.users.size(); ++k)
    mix.users.storage()[k] = a * e1.users.storage()[k] + b * e2.users.storage()[k];
  for (std::size_t k = 0; k < mix.items.size(); ++k)
    mix.items.storage()[k] = a * e1.items.storage()[k] + b * e2.items.storage()[k];
  const auto p1 = propagate(g, e1, 2), p2 = propagate(g, e2, 2), pm = propagate(g, mix, 2);
  for (std::size_t k = 0; k < pm.users.size(); ++k)
    EXPECT_NEAR(pm.users.storage()[k], a * p1.users.storage()[k] + b * p2.users.storage()[k],
                1e-10);
  for (std::size_t k = 0; k < pm.items.size(); ++k)
    EXPECT_NEAR(pm.items.storage()[k], a * p1.items.storage()[k] + b * p2.items.storage()[k],
                1e-10);
  const auto b1 = propagate_backward(g, e1, 2), b2 = propagate_backward(g, e2, 2);
  const auto bm = propagate_backward(g, mix, 2);
  for (std::size_t k = 0; k < bm.users.size(); ++k)
    EXPECT_NEAR(bm.users.storage()[k], a * b1.users.storage()[k] + b * b2.users.storage()[k],
                1e-12);
}

TEST(PropagateBackward, AdjointIdentity) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto g = random_graph(8, 9, 0.3, rng);
    const auto e = random_table(g, 4, rng), grad = random_table(g, 4, rng);
    const double lhs = inner(propagate(g, e, 2), grad);
    const double rhs = inner(e, propagate_backward(g, grad, 2));
    EXPECT_NEAR(lhs, rhs, 1e-8);
  }
}

TEST(PropagateBackward, FiniteDifferences) {
  std::mt19937_64 rng(6);
  const auto g = random_graph(4, 5, 0.5, rng);
  const auto base = random_table(g, 3, rng);
  const auto weights = random_table(g, 3, rng);
  // Scalar loss: sum of w * out^2 (nonlinear in the output).
  auto loss = [&](const EmbeddingTable<double>& t) {
    const auto out = propagate(g, t, 2);
    double s = 0.0;
    for (std::size_t k = 0; k < out.users.size(); ++k)
      s += weights.users.storage()[k] * out.users.storage()[k] * out.users.storage()[k];
    for (std::size_t k = 0; k < out.items.size(); ++k)
      s += weights.items.storage()[k] * out.items.storage()[k] * out.items.storage()[k];
    return s;
  };
  const auto out = propagate(g, base, 2);
  EmbeddingTable<double> gout{Matrix<double>(4, 3), Matrix<double>(5, 3)};
  for (std::size_t k = 0; k < out.users.size(); ++k)
    gout.users.storage()[k] = 2.0 * weights.users.storage()[k] * out.users.storage()[k];
  for (std::size_t k = 0; k < out.items.size(); ++k)
    gout.items.storage()[k] = 2.0 * weights.items.storage()[k] * out.items.storage()[k];
  const auto analytic = propagate_backward(g, gout, 2);

  std::vector<double> flat(base.users.storage());
  flat.insert(flat.end(), base.items.storage().begin(), base.items.storage().end());
  const auto numeric = support::numeric_gradient(
      [&](std::span<const double> x) {
        EmbeddingTable<double> t = base;
        std::copy(x.begin(), x.begin() + 12, t.users.storage().begin());
        std::copy(x.begin() + 12, x.end(), t.items.storage().begin());
        return loss(t);
      },
      flat);
  std::vector<double> got(analytic.users.storage());
  got.insert(got.end(), analytic.items.storage().begin(), analytic.items.storage().end());
  EXPECT_LT(support::relative_error(got, numeric), 1e-4);
}

TEST(PropagationPlan, CoefficientsFinite) {
  std::mt19937_64 rng(7);
  const auto g = random_graph(10, 10, 0.2, rng);
  const auto plan = PropagationPlan::build(g, 2);
  for (const auto& row : plan.user_coeff)
    for (double c : row) EXPECT_TRUE(std::isfinite(c));
}
