#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "preftok/matrix.hpp"

namespace preftok {

// Code indices per level, 1-based: each entry lies in [1, K].
struct TokenSequence {
  std::vector<std::uint32_t> indices;

  std::size_t size() const { return indices.size(); }
  std::uint32_t operator[](std::size_t l) const { return indices[l]; }
  auto operator<=>(const TokenSequence&) const = default;
};

// L codebooks of K vectors in R^d, plus the per-code EMA statistics
// (cluster size N and vector sum m) and idle counters used for dead-code
// resets.
template <typename Real>
struct CodebookStack {
  std::size_t dim = 0;
  std::vector<Matrix<Real>> codes;
  std::vector<std::vector<double>> cluster_size;
  std::vector<Matrix<double>> code_sum;
  std::vector<std::vector<std::size_t>> idle_steps;

  static CodebookStack zeros(std::size_t levels, std::size_t size, std::size_t dim) {
    if (levels == 0 || size == 0 || dim == 0) {
      throw Error("codebook stack needs L, K, d >= 1");
    }
    CodebookStack s;
    s.dim = dim;
    for (std::size_t l = 0; l < levels; ++l) {
      s.codes.emplace_back(size, dim);
      s.cluster_size.emplace_back(size, 1.0);
      s.code_sum.emplace_back(size, dim);
      s.idle_steps.emplace_back(size, 0);
    }
    return s;
  }

  std::size_t levels() const { return codes.size(); }
  std::size_t size() const { return codes.empty() ? 0 : codes.front().rows(); }
  std::size_t parameter_count() const { return levels() * size() * dim; }

  std::span<const Real> code(std::size_t level, std::uint32_t token) const {
    return codes[level].row(token - 1);
  }

  // Resets EMA statistics to (N = 1, m = e) for every code.
  void sync_ema_with_codes() {
    for (std::size_t l = 0; l < levels(); ++l) {
      for (std::size_t k = 0; k < size(); ++k) {
        cluster_size[l][k] = 1.0;
        for (std::size_t j = 0; j < dim; ++j) code_sum[l](k, j) = codes[l](k, j);
        idle_steps[l][k] = 0;
      }
    }
  }
};

template <typename Real>
struct QuantizationResult {
  TokenSequence tokens;
  std::vector<std::vector<Real>> residuals;  // r^1 .. r^{L+1}
  std::vector<Real> reconstruction;
};

// Index of the nearest code (0-based); ties go to the lowest index.
template <typename Real, typename In>
std::size_t nearest_code(const Matrix<Real>& codebook, std::span<const In> r) {
  std::size_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < codebook.rows(); ++k) {
    const double dist = squared_distance(r, codebook.row(k));
    if (dist < best_dist) {
      best_dist = dist;
      best = k;
    }
  }
  return best;
}

template <typename Real, typename In>
QuantizationResult<Real> quantize(std::span<const In> z,
                                  const CodebookStack<Real>& stack) {
  if (z.size() != stack.dim) {
    throw Error("quantize: input width " + std::to_string(z.size()) +
                " != codebook width " + std::to_string(stack.dim));
  }
  if (!all_finite(z)) throw Error("quantize: non-finite input");

  QuantizationResult<Real> out;
  out.residuals.reserve(stack.levels() + 1);
  out.residuals.emplace_back(z.begin(), z.end());
  out.reconstruction.assign(stack.dim, Real(0));
  for (std::size_t l = 0; l < stack.levels(); ++l) {
    const auto& r = out.residuals.back();
    const std::size_t k = nearest_code(stack.codes[l], std::span<const Real>(r));
    out.tokens.indices.push_back(static_cast<std::uint32_t>(k + 1));
    const auto e = stack.codes[l].row(k);
    std::vector<Real> next(stack.dim);
    for (std::size_t j = 0; j < stack.dim; ++j) {
      next[j] = r[j] - e[j];
      out.reconstruction[j] += e[j];
    }
    out.residuals.push_back(std::move(next));
  }
  return out;
}

template <typename Real>
QuantizationResult<Real> quantize(const std::vector<Real>& z,
                                  const CodebookStack<Real>& stack) {
  return quantize(std::span<const Real>(z), stack);
}

// Sum of the looked-up codes of the first `levels` tokens.
template <typename Real>
std::vector<Real> reconstruct_prefix(const TokenSequence& tokens,
                                     const CodebookStack<Real>& stack,
                                     std::size_t levels) {
  if (tokens.size() != stack.levels()) {
    throw Error("token sequence length " + std::to_string(tokens.size()) +
                " != codebook levels " + std::to_string(stack.levels()));
  }
  std::vector<Real> out(stack.dim, Real(0));
  for (std::size_t l = 0; l < std::min(levels, stack.levels()); ++l) {
    const auto t = tokens[l];
    if (t < 1 || t > stack.size()) {
      throw Error("token " + std::to_string(t) + " at level " +
                  std::to_string(l + 1) + " outside [1, " +
                  std::to_string(stack.size()) + "]");
    }
    const auto e = stack.code(l, t);
    for (std::size_t j = 0; j < stack.dim; ++j) out[j] += e[j];
  }
  return out;
}

template <typename Real>
std::vector<Real> reconstruct(const TokenSequence& tokens,
                              const CodebookStack<Real>& stack) {
  return reconstruct_prefix(tokens, stack, stack.levels());
}

struct RqLoss {
  double total = 0.0;
  double codebook_term = 0.0;    // sum ||sg(r) - e||^2, monitoring only
  double commitment_term = 0.0;  // alpha * sum ||r - sg(e)||^2
  // d(total)/dz per batch element; only the commitment term contributes.
  std::vector<std::vector<double>> grad_z;
};

// Residual-quantization loss averaged over the batch. Codes receive no
// gradient here; they learn through ema_update.
template <typename Real>
RqLoss rq_loss(std::span<const QuantizationResult<Real>> batch, double alpha) {
  if (alpha < 0.0) throw Error("rq_loss: alpha must be >= 0");
  RqLoss out;
  if (batch.empty()) return out;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  out.grad_z.reserve(batch.size());
  for (const auto& q : batch) {
    const std::size_t levels = q.tokens.size();
    const std::size_t d = q.reconstruction.size();
    std::vector<double> g(d, 0.0);
    for (std::size_t l = 0; l < levels; ++l) {
      // r^l - e^l is exactly r^{l+1} by the residual recurrence.
      const auto& diff = q.residuals[l + 1];
      if (!all_finite(std::span<const Real>(diff))) {
        throw Error("rq_loss: non-finite residual");
      }
      const double sq = squared_norm(std::span<const Real>(diff));
      out.codebook_term += sq * inv_b;
      out.commitment_term += alpha * sq * inv_b;
      for (std::size_t j = 0; j < d; ++j) {
        g[j] += 2.0 * alpha * static_cast<double>(diff[j]) * inv_b;
      }
    }
    out.grad_z.push_back(std::move(g));
  }
  out.total = out.codebook_term + out.commitment_term;
  return out;
}

template <typename Real>
RqLoss rq_loss(const std::vector<QuantizationResult<Real>>& batch, double alpha) {
  return rq_loss(std::span<const QuantizationResult<Real>>(batch), alpha);
}

struct CodeAssignment {
  std::size_t level = 0;
  std::uint32_t token = 1;
  std::vector<double> residual;
};

// N <- decay*N + (1-decay)*count, m <- decay*m + (1-decay)*sum,
// e <- m / max(N, epsilon) for codes assigned this step. Unassigned codes
// keep e bit-for-bit and advance their idle counter.
template <typename Real>
void ema_update(CodebookStack<Real>& stack,
                std::span<const CodeAssignment> assignments, double decay,
                double epsilon = 1e-5) {
  if (!(decay > 0.0 && decay <= 1.0)) {
    throw Error("ema_update: decay must lie in (0, 1]");
  }
  const std::size_t levels = stack.levels();
  const std::size_t size = stack.size();
  const std::size_t d = stack.dim;
  std::vector<std::vector<double>> counts(levels, std::vector<double>(size, 0.0));
  std::vector<Matrix<double>> sums(levels, Matrix<double>(size, d));
  for (const auto& a : assignments) {
    if (a.level >= levels || a.token < 1 || a.token > size || a.residual.size() != d) {
      throw Error("ema_update: assignment out of range");
    }
    counts[a.level][a.token - 1] += 1.0;
    auto row = sums[a.level].row(a.token - 1);
    for (std::size_t j = 0; j < d; ++j) row[j] += a.residual[j];
  }
  for (std::size_t l = 0; l < levels; ++l) {
    for (std::size_t k = 0; k < size; ++k) {
      const double count = counts[l][k];
      auto& n = stack.cluster_size[l][k];
      n = decay * n + (1.0 - decay) * count;
      auto m = stack.code_sum[l].row(k);
      const auto s = sums[l].row(k);
      for (std::size_t j = 0; j < d; ++j) m[j] = decay * m[j] + (1.0 - decay) * s[j];
      if (count > 0.0) {
        const double denom = std::max(n, epsilon);
        auto e = stack.codes[l].row(k);
        for (std::size_t j = 0; j < d; ++j) e[j] = static_cast<Real>(m[j] / denom);
        stack.idle_steps[l][k] = 0;
      } else {
        ++stack.idle_steps[l][k];
      }
    }
  }
}

template <typename Real>
void ema_update(CodebookStack<Real>& stack,
                const std::vector<CodeAssignment>& assignments, double decay,
                double epsilon = 1e-5) {
  ema_update(stack, std::span<const CodeAssignment>(assignments), decay, epsilon);
}

// Re-seeds every code idle for at least `window` steps with a residual drawn
// uniformly from `recent[level]` (the latest batch's residuals at that
// level). Returns the number of codes reset.
template <typename Real>
std::size_t reset_dead_codes(CodebookStack<Real>& stack,
                             const std::vector<std::vector<std::vector<double>>>& recent,
                             std::size_t window, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::size_t reset = 0;
  for (std::size_t l = 0; l < stack.levels(); ++l) {
    if (l >= recent.size() || recent[l].empty()) continue;
    std::uniform_int_distribution<std::size_t> pick(0, recent[l].size() - 1);
    for (std::size_t k = 0; k < stack.size(); ++k) {
      if (stack.idle_steps[l][k] < window) continue;
      const auto& src = recent[l][pick(rng)];
      auto e = stack.codes[l].row(k);
      auto m = stack.code_sum[l].row(k);
      for (std::size_t j = 0; j < stack.dim; ++j) {
        e[j] = static_cast<Real>(src[j]);
        m[j] = static_cast<double>(e[j]);
      }
      stack.cluster_size[l][k] = 1.0;
      stack.idle_steps[l][k] = 0;
      ++reset;
    }
  }
  return reset;
}

// Greedy level-by-level initialization: level l's codes are K residuals
// sampled from the batch after quantizing with levels 1..l-1. Sampling is
// without replacement when the batch holds at least K rows.
template <typename Real>
void init_codebooks_from_batch(CodebookStack<Real>& stack,
                               const std::vector<std::vector<double>>& batch,
                               std::uint64_t seed) {
  if (batch.empty()) throw Error("codebook init needs a non-empty batch");
  std::mt19937_64 rng(seed);
  auto residuals = batch;
  const std::size_t size = stack.size();
  for (std::size_t l = 0; l < stack.levels(); ++l) {
    std::vector<std::size_t> order(residuals.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < size; ++k) {
      const auto& src = residuals[order[k % order.size()]];
      for (std::size_t j = 0; j < stack.dim; ++j) {
        stack.codes[l](k, j) = static_cast<Real>(src[j]);
      }
    }
    for (auto& r : residuals) {
      const auto k = nearest_code(stack.codes[l], std::span<const double>(r));
      const auto e = stack.codes[l].row(k);
      for (std::size_t j = 0; j < stack.dim; ++j) r[j] -= static_cast<double>(e[j]);
    }
  }
  stack.sync_ema_with_codes();
}

}  // namespace preftok
