#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "preftok/data_ingest.hpp"
#include "preftok/matrix.hpp"

namespace preftok {

template <typename Real>
struct EmbeddingTable {
  Matrix<Real> users;
  Matrix<Real> items;
  bool users_trainable = true;
  bool items_trainable = true;

  std::size_t dim() const { return users.cols(); }
};

// Per-edge normalization 1/sqrt(deg(u) deg(i)) and the layer count J.
// Zero-degree nodes have no edges and keep their base vector at every layer.
struct PropagationPlan {
  std::size_t layers = 2;
  std::vector<std::vector<double>> user_coeff;  // parallel to user_items
  std::vector<std::vector<double>> item_coeff;  // parallel to item_users

  static PropagationPlan build(const ModalGraph& g, std::size_t layers) {
    PropagationPlan plan;
    plan.layers = layers;
    plan.user_coeff.resize(g.user_count);
    plan.item_coeff.resize(g.item_count);
    for (std::size_t u = 0; u < g.user_count; ++u) {
      for (auto i : g.user_items[u]) {
        plan.user_coeff[u].push_back(
            1.0 / std::sqrt(static_cast<double>(g.user_degree(u)) *
                            static_cast<double>(g.item_degree(i))));
      }
    }
    for (std::size_t i = 0; i < g.item_count; ++i) {
      for (auto u : g.item_users[i]) {
        plan.item_coeff[i].push_back(
            1.0 / std::sqrt(static_cast<double>(g.user_degree(u)) *
                            static_cast<double>(g.item_degree(i))));
      }
    }
    return plan;
  }
};

namespace detail {

template <typename Real>
void check_table_shape(const ModalGraph& g, const EmbeddingTable<Real>& t) {
  if (t.users.rows() != g.user_count || t.items.rows() != g.item_count) {
    throw Error("embedding table has " + std::to_string(t.users.rows()) +
                " users / " + std::to_string(t.items.rows()) +
                " items, graph has " + std::to_string(g.user_count) + " / " +
                std::to_string(g.item_count));
  }
  if (t.users.cols() != t.items.cols()) {
    throw Error("user and item embedding widths differ: " +
                std::to_string(t.users.cols()) + " vs " +
                std::to_string(t.items.cols()));
  }
}

// Mean over layers 0..J of the normalized-adjacency powers applied to `base`.
// The normalized adjacency (with identity rows for isolated nodes) is
// symmetric, so this same routine is its own adjoint.
template <typename Real>
EmbeddingTable<Real> smooth(const ModalGraph& g, const PropagationPlan& plan,
                            const EmbeddingTable<Real>& base) {
  check_table_shape(g, base);
  const std::size_t d = base.users.cols();
  const std::size_t nu = g.user_count;
  const std::size_t ni = g.item_count;

  std::vector<double> cur_u(base.users.storage().begin(), base.users.storage().end());
  std::vector<double> cur_i(base.items.storage().begin(), base.items.storage().end());
  std::vector<double> acc_u = cur_u, acc_i = cur_i;
  std::vector<double> next_u(nu * d), next_i(ni * d);

  for (std::size_t layer = 0; layer < plan.layers; ++layer) {
    for (std::size_t u = 0; u < nu; ++u) {
      double* out = next_u.data() + u * d;
      const auto& nbrs = g.user_items[u];
      if (nbrs.empty()) {
        std::copy_n(cur_u.data() + u * d, d, out);
        continue;
      }
      std::fill_n(out, d, 0.0);
      for (std::size_t k = 0; k < nbrs.size(); ++k) {
        const double w = plan.user_coeff[u][k];
        const double* src = cur_i.data() + nbrs[k] * d;
        for (std::size_t j = 0; j < d; ++j) out[j] += w * src[j];
      }
    }
    for (std::size_t i = 0; i < ni; ++i) {
      double* out = next_i.data() + i * d;
      const auto& nbrs = g.item_users[i];
      if (nbrs.empty()) {
        std::copy_n(cur_i.data() + i * d, d, out);
        continue;
      }
      std::fill_n(out, d, 0.0);
      for (std::size_t k = 0; k < nbrs.size(); ++k) {
        const double w = plan.item_coeff[i][k];
        const double* src = cur_u.data() + nbrs[k] * d;
        for (std::size_t j = 0; j < d; ++j) out[j] += w * src[j];
      }
    }
    cur_u.swap(next_u);
    cur_i.swap(next_i);
    for (std::size_t k = 0; k < acc_u.size(); ++k) acc_u[k] += cur_u[k];
    for (std::size_t k = 0; k < acc_i.size(); ++k) acc_i[k] += cur_i[k];
  }

  const double scale = 1.0 / static_cast<double>(plan.layers + 1);
  EmbeddingTable<Real> out{Matrix<Real>(nu, d), Matrix<Real>(ni, d),
                           base.users_trainable, base.items_trainable};
  for (std::size_t k = 0; k < acc_u.size(); ++k) {
    out.users.storage()[k] = static_cast<Real>(acc_u[k] * scale);
  }
  for (std::size_t k = 0; k < acc_i.size(); ++k) {
    out.items.storage()[k] = static_cast<Real>(acc_i[k] * scale);
  }
  // Averaging J+1 copies of a vector can move it by an ulp; isolated nodes
  // return the base row exactly.
  for (std::size_t u = 0; u < nu; ++u) {
    if (g.user_items[u].empty()) std::copy_n(base.users.row(u).begin(), d, out.users.row(u).begin());
  }
  for (std::size_t i = 0; i < ni; ++i) {
    if (g.item_users[i].empty()) std::copy_n(base.items.row(i).begin(), d, out.items.row(i).begin());
  }
  return out;
}

}  // namespace detail

// LightGCN forward: final = mean_{l=0..J} h^(l), with
// h^(l+1)_u = sum_{i in N(u)} h^(l)_i / sqrt(deg u * deg i) and symmetrically
// for items.
template <typename Real>
EmbeddingTable<Real> propagate(const ModalGraph& g, const EmbeddingTable<Real>& base,
                               std::size_t layers) {
  return detail::smooth(g, PropagationPlan::build(g, layers), base);
}

template <typename Real>
EmbeddingTable<Real> propagate(const ModalGraph& g, const PropagationPlan& plan,
                               const EmbeddingTable<Real>& base) {
  return detail::smooth(g, plan, base);
}

// Gradient of any loss w.r.t. the base table, given its gradient w.r.t. the
// propagated table. The forward map is linear with a symmetric operator.
template <typename Real>
EmbeddingTable<Real> propagate_backward(const ModalGraph& g,
                                        const EmbeddingTable<Real>& grad_final,
                                        std::size_t layers) {
  return detail::smooth(g, PropagationPlan::build(g, layers), grad_final);
}

template <typename Real>
EmbeddingTable<Real> propagate_backward(const ModalGraph& g,
                                        const PropagationPlan& plan,
                                        const EmbeddingTable<Real>& grad_final) {
  return detail::smooth(g, plan, grad_final);
}

}  // namespace preftok
