#pragma once

#include <cstdint>
#include <vector>

#include "deltaprune/matrix.hpp"

namespace dp {

enum class MixerVariant { linear, delta, gated };

const char* variant_name(MixerVariant v);
MixerVariant variant_from_name(const std::string& name);

// Per-head dimensions. model_dim is the layer input width; key_dim/value_dim
// are the per-head state dimensions (state S_t is value_dim x key_dim).
struct HeadDims {
  int model_dim = 0;
  int key_dim = 0;
  int value_dim = 0;
  int num_heads = 1;
  int conv_len = 4;
};

// Projections are stored model_dim x width and applied as x^T W, i.e.
// Q = X * w_q for X with one token per row. Conv filters are one row per
// channel, newest tap first: out[t,c] = sum_j filter[c,j] * in[t-j,c].
struct HeadParams {
  Matrix w_q;     // model_dim x key_dim
  Matrix w_k;     // model_dim x key_dim
  Matrix w_v;     // model_dim x value_dim
  Matrix w_beta;  // model_dim x 1
  Matrix w_alpha; // model_dim x 1 (gated variant only; may be empty otherwise)
  Matrix conv_q;  // key_dim x conv_len
  Matrix conv_k;  // key_dim x conv_len
  Matrix conv_v;  // value_dim x conv_len
};

struct LayerParams {
  HeadDims dims;
  std::vector<HeadParams> heads;
  Matrix w_o;  // (num_heads * value_dim) x model_dim
  double rms_eps = 1e-6;
};

void validate_layer(const LayerParams& p);

double sigmoid(double x);
double silu(double x);

// Causal depthwise convolution; x is T x channels, filters channels x l.
Matrix conv1d_causal(const Matrix& x, const Matrix& filters);

// In-place row l2-normalization q <- q / sqrt(||q||^2 + eps).
void l2_normalize_rows(Matrix& m, double eps = 1e-8);

Matrix rms_norm_rows(const Matrix& m, double eps);

// One token of each recurrence; s is value_dim x key_dim, k/v are single
// token rows. beta (and alpha for gated) must lie in (0, 1].
Matrix delta_step(const Matrix& s, std::span<const double> k, std::span<const double> v, double beta);
Matrix gated_delta_step(const Matrix& s, std::span<const double> k, std::span<const double> v, double beta,
                        double alpha);
Matrix linear_attention_step(const Matrix& s, std::span<const double> k, std::span<const double> v);

struct RecurrenceResult {
  Matrix outputs;              // T x value_dim, o_t = S_t q_t
  Matrix final_state;          // value_dim x key_dim
  std::vector<Matrix> states;  // S_1..S_T when captured, else empty
  long long flops = 0;         // counted at the update/readout sites
};

RecurrenceResult linear_attention_recurrent(const Matrix& q, const Matrix& k, const Matrix& v,
                                            bool capture_states = false);
// Parallel (masked-product) form of the same map: O = (Q K^T . LowerTri) V.
Matrix linear_attention_parallel(const Matrix& q, const Matrix& k, const Matrix& v);
RecurrenceResult delta_rule_recurrent(const Matrix& q, const Matrix& k, const Matrix& v,
                                      std::span<const double> beta, bool capture_states = false);
RecurrenceResult gated_delta_recurrent(const Matrix& q, const Matrix& k, const Matrix& v,
                                       std::span<const double> beta, std::span<const double> alpha,
                                       bool capture_states = false);

// Closed-form per-token mixer cost (state update + readout only; projections
// and convolutions are excluded):
//   linear: 4*dv*dk     delta: 6*dv*dk + 2*dv     gated: 7*dv*dk + 2*dv
long long mixer_flops_per_step(MixerVariant v, int key_dim, int value_dim);

// Everything the backward pass needs, stored by layer_forward on request.
struct HeadTape {
  Matrix q_proj, q_conv, q_silu, q_norm, q_used;
  Matrix k_proj, k_conv, k_silu, k_norm, k_used;
  Matrix v_proj, v_conv, v_silu;
  std::vector<double> beta, alpha;
  std::vector<Matrix> states;  // S_0..S_T (T+1 entries)
  Matrix u;                    // T x value_dim, u_t = S_{t-1} k_t (delta/gated)
  Matrix outputs;              // T x value_dim
};

struct LayerTape {
  Matrix x;
  std::vector<HeadTape> heads;
  Matrix concat;                  // T x (num_heads*value_dim)
  std::vector<double> rms_scale;  // per-row 1/sqrt(mean sq + eps)
  Matrix concat_normed;
};

// Captured activations: q/k/v are post-convolution, post-SiLU and (by default)
// pre-l2-normalization — the capture point used for calibration statistics.
struct HeadActivations {
  Matrix q, k, v;
  std::vector<double> beta, alpha;
  std::vector<Matrix> states;
  Matrix outputs;
};

struct ForwardOptions {
  bool capture_states = false;
  bool capture_activations = false;
  bool capture_normalized = false;     // capture q/k after l2 normalization instead
  const Matrix* qk_transform = nullptr;  // orthogonal T applied jointly to q,k rows
};

struct ForwardResult {
  Matrix y;  // T x model_dim
  std::vector<HeadActivations> heads;
  long long mixer_flops = 0;
};

ForwardResult layer_forward(const LayerParams& params, const Matrix& x, MixerVariant variant,
                            const ForwardOptions& options = {}, LayerTape* tape = nullptr);

}  // namespace dp
