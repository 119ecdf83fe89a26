#pragma once

#include <vector>

#include "deltaprune/mixers.hpp"

namespace dp {

struct HeadGrads {
  Matrix w_q, w_k, w_v, w_beta, w_alpha, conv_q, conv_k, conv_v;
};

struct ParamGrads {
  std::vector<HeadGrads> heads;
  Matrix w_o;
};

ParamGrads zero_grads_like(const LayerParams& p);
void accumulate_grads(ParamGrads& into, const ParamGrads& from);
void scale_grads(ParamGrads& g, double s);

enum class LossKind { squared_error, cross_entropy };

// squared_error: L = sum (y - t)^2 over all entries.
// cross_entropy: rows of y are logits, rows of targets are distributions
// (typically one-hot); L = sum_t -<targets[t], log softmax(y[t])>.
struct LossSpec {
  LossKind kind = LossKind::squared_error;
  Matrix targets;
};

struct LossOut {
  double loss = 0.0;
  Matrix dy;
};
LossOut eval_loss(const Matrix& y, const LossSpec& loss);

// Reverse-mode through a taped forward: given dL/dY, produces dL/dX and all
// parameter gradients. The tape must come from layer_forward on `params`.
struct LayerBackwardOut {
  Matrix dx;
  ParamGrads grads;
};
LayerBackwardOut layer_backward_taped(const LayerParams& params, MixerVariant variant, const LayerTape& tape,
                                      const Matrix& dy);

// Forward + loss + backward in one call.
struct BackwardResult {
  double loss = 0.0;
  ParamGrads grads;
  Matrix dx;
};
BackwardResult layer_backward(const LayerParams& params, const Matrix& x, MixerVariant variant,
                              const LossSpec& loss);

// Condition number of the Jacobian of o = S W_q^T x with respect to vec(W_q),
// built column-by-column by evaluating the (linear) map on basis matrices.
// Equals kappa(S) analytically; computing it numerically cross-checks that.
double query_jacobian_condition(const Matrix& s, std::span<const double> x);

// Optimizers over a flat list of parameter tensors.
void sgd_update(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, double lr);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<Matrix> m, v;
  long long step = 0;
};

void adam_update(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, AdamState& state,
                 const AdamConfig& cfg);

}  // namespace dp
