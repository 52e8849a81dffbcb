#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "preftok/matrix.hpp"

namespace preftok {

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// -ln sigmoid(gap) == softplus(-gap)
inline double neg_log_sigmoid(double gap) { return softplus(-gap); }

struct BprLoss {
  double loss = 0.0;
  std::vector<double> grad_user;
  std::vector<double> grad_pos;
  std::vector<double> grad_neg;
};

// -ln sigmoid(u.i - u.j) for one (user, positive, negative) triple of
// concatenated quantized vectors.
inline BprLoss bpr_loss(std::span<const double> user, std::span<const double> pos,
                        std::span<const double> neg) {
  if (user.size() != pos.size() || user.size() != neg.size()) {
    throw Error("bpr_loss: vector widths differ");
  }
  const double gap = dot(user, pos) - dot(user, neg);
  BprLoss out;
  out.loss = neg_log_sigmoid(gap);
  const double dgap = -sigmoid(-gap);
  const std::size_t d = user.size();
  out.grad_user.resize(d);
  out.grad_pos.resize(d);
  out.grad_neg.resize(d);
  for (std::size_t k = 0; k < d; ++k) {
    out.grad_user[k] = dgap * (pos[k] - neg[k]);
    out.grad_pos[k] = dgap * user[k];
    out.grad_neg[k] = -dgap * user[k];
  }
  return out;
}

// Two affine layers with a softplus between them and a scalar output.
// Parameters live in one flat buffer: W1 (hidden x input, row-major), b1,
// w2, b2.
class MlpScorer {
 public:
  MlpScorer() = default;
  MlpScorer(std::size_t input, std::size_t hidden)
      : input_(input), hidden_(hidden), params_(hidden * input + 2 * hidden + 1, 0.0) {}

  static MlpScorer random(std::size_t input, std::size_t hidden, std::uint64_t seed) {
    MlpScorer s(input, hidden);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> w1(0.0, 1.0 / std::sqrt(static_cast<double>(input)));
    std::normal_distribution<double> w2(0.0, 1.0 / std::sqrt(static_cast<double>(hidden)));
    for (std::size_t k = 0; k < hidden * input; ++k) s.params_[k] = w1(rng);
    for (std::size_t k = 0; k < hidden; ++k) s.params_[s.w2_offset() + k] = w2(rng);
    return s;
  }

  std::size_t input() const { return input_; }
  std::size_t hidden() const { return hidden_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::size_t b1_offset() const { return hidden_ * input_; }
  std::size_t w2_offset() const { return b1_offset() + hidden_; }
  std::size_t b2_offset() const { return w2_offset() + hidden_; }

  double score(std::span<const double> x) const {
    check_input(x);
    double s = params_[b2_offset()];
    for (std::size_t h = 0; h < hidden_; ++h) {
      s += params_[w2_offset() + h] * softplus(pre_activation(x, h));
    }
    return s;
  }

  // Accumulates upstream * d(score)/d(params) into grad_params and
  // upstream * d(score)/dx into grad_x.
  void backward(std::span<const double> x, double upstream,
                std::span<double> grad_params, std::span<double> grad_x) const {
    check_input(x);
    grad_params[b2_offset()] += upstream;
    for (std::size_t h = 0; h < hidden_; ++h) {
      const double a = pre_activation(x, h);
      grad_params[w2_offset() + h] += upstream * softplus(a);
      const double da = upstream * params_[w2_offset() + h] * sigmoid(a);
      grad_params[b1_offset() + h] += da;
      const double* w = params_.data() + h * input_;
      double* gw = grad_params.data() + h * input_;
      for (std::size_t k = 0; k < input_; ++k) {
        gw[k] += da * x[k];
        grad_x[k] += da * w[k];
      }
    }
  }

 private:
  double pre_activation(std::span<const double> x, std::size_t h) const {
    const double* w = params_.data() + h * input_;
    double a = params_[b1_offset() + h];
    for (std::size_t k = 0; k < input_; ++k) a += w[k] * x[k];
    return a;
  }

  void check_input(std::span<const double> x) const {
    if (x.size() != input_) {
      throw Error("scorer expects input width " + std::to_string(input_) +
                  ", got " + std::to_string(x.size()));
    }
  }

  std::size_t input_ = 0;
  std::size_t hidden_ = 0;
  std::vector<double> params_;
};

struct CrossModalLoss {
  double loss = 0.0;
  std::vector<double> grad_text;
  std::vector<double> grad_visual_pos;
  std::vector<double> grad_visual_neg;
  std::vector<double> grad_params;
};

// -ln sigmoid(MLP(t_i ++ v_i) - MLP(t_i ++ v_neg)).
inline CrossModalLoss cross_modal_loss(std::span<const double> text,
                                       std::span<const double> visual_pos,
                                       std::span<const double> visual_neg,
                                       const MlpScorer& scorer) {
  if (visual_pos.size() != visual_neg.size()) {
    throw Error("cross_modal_loss: visual widths differ");
  }
  const std::size_t dt = text.size();
  const std::size_t dv = visual_pos.size();
  std::vector<double> x_pos(dt + dv), x_neg(dt + dv);
  std::copy(text.begin(), text.end(), x_pos.begin());
  std::copy(visual_pos.begin(), visual_pos.end(), x_pos.begin() + dt);
  std::copy(text.begin(), text.end(), x_neg.begin());
  std::copy(visual_neg.begin(), visual_neg.end(), x_neg.begin() + dt);

  const double gap = scorer.score(x_pos) - scorer.score(x_neg);
  CrossModalLoss out;
  out.loss = neg_log_sigmoid(gap);
  const double dgap = -sigmoid(-gap);

  out.grad_params.assign(scorer.parameter_count(), 0.0);
  std::vector<double> gx_pos(dt + dv, 0.0), gx_neg(dt + dv, 0.0);
  scorer.backward(x_pos, dgap, out.grad_params, gx_pos);
  scorer.backward(x_neg, -dgap, out.grad_params, gx_neg);

  out.grad_text.resize(dt);
  for (std::size_t k = 0; k < dt; ++k) out.grad_text[k] = gx_pos[k] + gx_neg[k];
  out.grad_visual_pos.assign(gx_pos.begin() + dt, gx_pos.end());
  out.grad_visual_neg.assign(gx_neg.begin() + dt, gx_neg.end());
  return out;
}

struct StageOneLosses {
  double bpr = 0.0;
  double rq = 0.0;
  double cm = 0.0;
  double total = 0.0;
};

// L = L_bpr + L_rq + beta * L_cm
inline StageOneLosses total_stage1_loss(double bpr, double rq, double cm, double beta) {
  return {bpr, rq, cm, bpr + rq + beta * cm};
}

}  // namespace preftok
