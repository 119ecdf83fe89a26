#include "deltaprune/mixers.hpp"

#include <cmath>
#include <string>

namespace dp {

namespace {
constexpr double kL2Eps = 1e-8;

void check_beta(double beta) {
  if (!(beta > 0.0 && beta <= 1.0)) throw std::invalid_argument("beta must lie in (0,1]");
}
void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw std::invalid_argument("alpha must lie in (0,1]");
}
}  // namespace

const char* variant_name(MixerVariant v) {
  switch (v) {
    case MixerVariant::linear: return "linear";
    case MixerVariant::delta: return "delta";
    case MixerVariant::gated: return "gated";
  }
  return "unknown";
}

MixerVariant variant_from_name(const std::string& name) {
  if (name == "linear") return MixerVariant::linear;
  if (name == "delta") return MixerVariant::delta;
  if (name == "gated") return MixerVariant::gated;
  throw std::invalid_argument("unknown mixer variant: " + name);
}

void validate_layer(const LayerParams& p) {
  const HeadDims& d = p.dims;
  if (d.model_dim < 1 || d.key_dim < 1 || d.value_dim < 1 || d.num_heads < 1 || d.conv_len < 1)
    throw shape_error("layer: dimensions must be positive");
  if (static_cast<int>(p.heads.size()) != d.num_heads) throw shape_error("layer: head count mismatch");
  for (const HeadParams& h : p.heads) {
    if (h.w_q.rows != d.model_dim || h.w_q.cols != d.key_dim) throw shape_error("layer: w_q shape");
    if (h.w_k.rows != d.model_dim || h.w_k.cols != d.key_dim) throw shape_error("layer: w_k shape");
    if (h.w_v.rows != d.model_dim || h.w_v.cols != d.value_dim) throw shape_error("layer: w_v shape");
    if (h.w_beta.rows != d.model_dim || h.w_beta.cols != 1) throw shape_error("layer: w_beta shape");
    if (h.w_alpha.data.size() != 0 && (h.w_alpha.rows != d.model_dim || h.w_alpha.cols != 1))
      throw shape_error("layer: w_alpha shape");
    if (h.conv_q.rows != d.key_dim || h.conv_q.cols != d.conv_len) throw shape_error("layer: conv_q shape");
    if (h.conv_k.rows != d.key_dim || h.conv_k.cols != d.conv_len) throw shape_error("layer: conv_k shape");
    if (h.conv_v.rows != d.value_dim || h.conv_v.cols != d.conv_len) throw shape_error("layer: conv_v shape");
  }
  if (p.w_o.rows != d.num_heads * d.value_dim || p.w_o.cols != d.model_dim) throw shape_error("layer: w_o shape");
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double silu(double x) { return x * sigmoid(x); }

Matrix conv1d_causal(const Matrix& x, const Matrix& filters) {
  if (x.cols != filters.rows) throw shape_error("conv1d_causal: channel mismatch");
  const int T = x.rows, C = x.cols, L = filters.cols;
  Matrix out(T, C);
  for (int t = 0; t < T; ++t) {
    const int jmax = std::min(L - 1, t);
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int j = 0; j <= jmax; ++j) acc += filters.at(c, j) * x.at(t - j, c);
      out.at(t, c) = acc;
    }
  }
  return out;
}

void l2_normalize_rows(Matrix& m, double eps) {
  for (int i = 0; i < m.rows; ++i) {
    auto r = m.row(i);
    double acc = 0.0;
    for (double v : r) acc += v * v;
    const double inv = 1.0 / std::sqrt(acc + eps);
    for (double& v : r) v *= inv;
  }
}

Matrix rms_norm_rows(const Matrix& m, double eps) {
  Matrix out = m;
  for (int i = 0; i < out.rows; ++i) {
    auto r = out.row(i);
    double acc = 0.0;
    for (double v : r) acc += v * v;
    const double inv = 1.0 / std::sqrt(acc / m.cols + eps);
    for (double& v : r) v *= inv;
  }
  return out;
}

Matrix delta_step(const Matrix& s, std::span<const double> k, std::span<const double> v, double beta) {
  check_beta(beta);
  if (static_cast<int>(k.size()) != s.cols || static_cast<int>(v.size()) != s.rows)
    throw shape_error("delta_step: dimension mismatch");
  Matrix out = s;
  // S' = S + beta (v - S k) k^T
  for (int i = 0; i < s.rows; ++i) {
    double u = 0.0;
    for (int j = 0; j < s.cols; ++j) u += s.at(i, j) * k[j];
    const double w = beta * (v[i] - u);
    for (int j = 0; j < s.cols; ++j) out.at(i, j) += w * k[j];
  }
  return out;
}

Matrix gated_delta_step(const Matrix& s, std::span<const double> k, std::span<const double> v, double beta,
                        double alpha) {
  check_beta(beta);
  check_alpha(alpha);
  if (static_cast<int>(k.size()) != s.cols || static_cast<int>(v.size()) != s.rows)
    throw shape_error("gated_delta_step: dimension mismatch");
  Matrix out(s.rows, s.cols);
  // S' = alpha S + beta (v - S k) k^T; the erase direction uses the un-decayed state.
  for (int i = 0; i < s.rows; ++i) {
    double u = 0.0;
    for (int j = 0; j < s.cols; ++j) u += s.at(i, j) * k[j];
    const double w = beta * (v[i] - u);
    for (int j = 0; j < s.cols; ++j) out.at(i, j) = alpha * s.at(i, j) + w * k[j];
  }
  return out;
}

Matrix linear_attention_step(const Matrix& s, std::span<const double> k, std::span<const double> v) {
  if (static_cast<int>(k.size()) != s.cols || static_cast<int>(v.size()) != s.rows)
    throw shape_error("linear_attention_step: dimension mismatch");
  Matrix out = s;
  for (int i = 0; i < s.rows; ++i)
    for (int j = 0; j < s.cols; ++j) out.at(i, j) += v[i] * k[j];
  return out;
}

namespace {

enum class StepKind { linear, delta, gated };

RecurrenceResult run_recurrence(StepKind kind, const Matrix& q, const Matrix& k, const Matrix& v,
                                std::span<const double> beta, std::span<const double> alpha, bool capture_states,
                                Matrix* u_out, std::vector<Matrix>* all_states) {
  if (q.rows != k.rows || q.rows != v.rows) throw shape_error("recurrence: token count mismatch");
  if (q.cols != k.cols) throw shape_error("recurrence: key width mismatch");
  const int T = q.rows, dk = q.cols, dv = v.cols;
  if (kind != StepKind::linear && static_cast<int>(beta.size()) != T)
    throw shape_error("recurrence: beta length mismatch");
  if (kind == StepKind::gated && static_cast<int>(alpha.size()) != T)
    throw shape_error("recurrence: alpha length mismatch");

  RecurrenceResult res;
  res.outputs = Matrix(T, dv);
  Matrix s(dv, dk);
  if (u_out) *u_out = Matrix(T, dv);
  if (all_states) {
    all_states->clear();
    all_states->push_back(s);  // S_0 = 0
  }

  for (int t = 0; t < T; ++t) {
    const auto kt = k.row(t);
    const auto vt = v.row(t);
    switch (kind) {
      case StepKind::linear:
        for (int i = 0; i < dv; ++i) {
          const double vi = vt[i];
          double* srow = s.data.data() + static_cast<size_t>(i) * dk;
          for (int j = 0; j < dk; ++j) srow[j] += vi * kt[j];
        }
        res.flops += 2LL * dv * dk;
        break;
      case StepKind::delta:
      case StepKind::gated: {
        check_beta(beta[t]);
        const double a = (kind == StepKind::gated) ? alpha[t] : 1.0;
        if (kind == StepKind::gated) check_alpha(a);
        for (int i = 0; i < dv; ++i) {
          double* srow = s.data.data() + static_cast<size_t>(i) * dk;
          double u = 0.0;
          for (int j = 0; j < dk; ++j) u += srow[j] * kt[j];
          if (u_out) u_out->at(t, i) = u;
          const double w = beta[t] * (vt[i] - u);
          if (kind == StepKind::gated) {
            for (int j = 0; j < dk; ++j) srow[j] = a * srow[j] + w * kt[j];
          } else {
            for (int j = 0; j < dk; ++j) srow[j] += w * kt[j];
          }
        }
        res.flops += (kind == StepKind::gated) ? (5LL * dv * dk + 2LL * dv) : (4LL * dv * dk + 2LL * dv);
        break;
      }
    }
    // Readout o_t = S_t q_t.
    const auto qt = q.row(t);
    for (int i = 0; i < dv; ++i) {
      const double* srow = s.data.data() + static_cast<size_t>(i) * dk;
      double acc = 0.0;
      for (int j = 0; j < dk; ++j) acc += srow[j] * qt[j];
      res.outputs.at(t, i) = acc;
    }
    res.flops += 2LL * dv * dk;
    if (capture_states) res.states.push_back(s);
    if (all_states) all_states->push_back(s);
  }
  res.final_state = std::move(s);
  return res;
}

}  // namespace

RecurrenceResult linear_attention_recurrent(const Matrix& q, const Matrix& k, const Matrix& v, bool capture_states) {
  return run_recurrence(StepKind::linear, q, k, v, {}, {}, capture_states, nullptr, nullptr);
}

Matrix linear_attention_parallel(const Matrix& q, const Matrix& k, const Matrix& v) {
  if (q.rows != k.rows || q.rows != v.rows) throw shape_error("parallel: token count mismatch");
  if (q.cols != k.cols) throw shape_error("parallel: key width mismatch");
  Matrix scores = matmul(q, transpose(k));  // T x T
  for (int i = 0; i < scores.rows; ++i)
    for (int j = i + 1; j < scores.cols; ++j) scores.at(i, j) = 0.0;  // causal mask (inclusive diagonal)
  return matmul(scores, v);
}

RecurrenceResult delta_rule_recurrent(const Matrix& q, const Matrix& k, const Matrix& v, std::span<const double> beta,
                                      bool capture_states) {
  return run_recurrence(StepKind::delta, q, k, v, beta, {}, capture_states, nullptr, nullptr);
}

RecurrenceResult gated_delta_recurrent(const Matrix& q, const Matrix& k, const Matrix& v, std::span<const double> beta,
                                       std::span<const double> alpha, bool capture_states) {
  return run_recurrence(StepKind::gated, q, k, v, beta, alpha, capture_states, nullptr, nullptr);
}

long long mixer_flops_per_step(MixerVariant v, int key_dim, int value_dim) {
  const long long dk = key_dim, dv = value_dim;
  switch (v) {
    case MixerVariant::linear: return 4 * dv * dk;
    case MixerVariant::delta: return 6 * dv * dk + 2 * dv;
    case MixerVariant::gated: return 7 * dv * dk + 2 * dv;
  }
  return 0;
}

ForwardResult layer_forward(const LayerParams& params, const Matrix& x, MixerVariant variant,
                            const ForwardOptions& options, LayerTape* tape) {
  validate_layer(params);
  if (x.cols != params.dims.model_dim) throw shape_error("layer_forward: input width mismatch");
  if (variant == MixerVariant::gated)
    for (const HeadParams& h : params.heads)
      if (h.w_alpha.data.empty()) throw shape_error("layer_forward: gated variant requires w_alpha");
  const Matrix* tf = options.qk_transform;
  if (tf && (tf->rows != params.dims.key_dim || tf->cols != params.dims.key_dim))
    throw shape_error("layer_forward: qk_transform must be key_dim x key_dim");

  const int T = x.rows;
  const int H = params.dims.num_heads;
  const int dv = params.dims.value_dim;

  ForwardResult res;
  Matrix concat(T, H * dv);
  if (tape) {
    tape->x = x;
    tape->heads.assign(static_cast<size_t>(H), HeadTape{});
  }
  if (options.capture_activations || options.capture_states) res.heads.resize(static_cast<size_t>(H));

  for (int h = 0; h < H; ++h) {
    const HeadParams& hp = params.heads[static_cast<size_t>(h)];
    Matrix q_proj = matmul(x, hp.w_q);
    Matrix k_proj = matmul(x, hp.w_k);
    Matrix v_proj = matmul(x, hp.w_v);
    Matrix q_conv = conv1d_causal(q_proj, hp.conv_q);
    Matrix k_conv = conv1d_causal(k_proj, hp.conv_k);
    Matrix v_conv = conv1d_causal(v_proj, hp.conv_v);
    Matrix q_silu = q_conv, k_silu = k_conv, v_silu = v_conv;
    for (double& t : q_silu.data) t = silu(t);
    for (double& t : k_silu.data) t = silu(t);
    for (double& t : v_silu.data) t = silu(t);

    Matrix q_norm = q_silu, k_norm = k_silu;
    l2_normalize_rows(q_norm, kL2Eps);
    l2_normalize_rows(k_norm, kL2Eps);

    // Optional joint orthogonal transform at the mixer boundary: rows q_t, k_t
    // become T q_t, T k_t, i.e. right-multiplication by T^T.
    Matrix q_used = tf ? matmul(q_norm, transpose(*tf)) : q_norm;
    Matrix k_used = tf ? matmul(k_norm, transpose(*tf)) : k_norm;

    std::vector<double> beta(static_cast<size_t>(T), 0.0);
    std::vector<double> alpha;
    if (variant != MixerVariant::linear) {
      for (int t = 0; t < T; ++t) beta[static_cast<size_t>(t)] = sigmoid(dot(x.row(t), hp.w_beta.data));
    }
    if (variant == MixerVariant::gated) {
      alpha.assign(static_cast<size_t>(T), 0.0);
      for (int t = 0; t < T; ++t) alpha[static_cast<size_t>(t)] = sigmoid(dot(x.row(t), hp.w_alpha.data));
    }

    const StepKind kind = (variant == MixerVariant::linear)   ? StepKind::linear
                          : (variant == MixerVariant::delta) ? StepKind::delta
                                                             : StepKind::gated;
    HeadTape* ht = tape ? &tape->heads[static_cast<size_t>(h)] : nullptr;
    Matrix u_store;
    std::vector<Matrix> all_states;
    const bool want_all_states = (tape != nullptr);
    RecurrenceResult rec =
        run_recurrence(kind, q_used, k_used, v_silu, beta, alpha, options.capture_states,
                       (ht && kind != StepKind::linear) ? &u_store : nullptr,
                       want_all_states ? &all_states : nullptr);
    res.mixer_flops += rec.flops;

    for (int t = 0; t < T; ++t)
      for (int i = 0; i < dv; ++i) concat.at(t, h * dv + i) = rec.outputs.at(t, i);

    if (options.capture_activations || options.capture_states) {
      HeadActivations& act = res.heads[static_cast<size_t>(h)];
      if (options.capture_activations) {
        act.q = options.capture_normalized ? q_norm : q_silu;
        act.k = options.capture_normalized ? k_norm : k_silu;
        act.v = v_silu;
        act.beta = beta;
        act.alpha = alpha;
        act.outputs = rec.outputs;
      }
      if (options.capture_states) act.states = std::move(rec.states);
    }
    if (ht) {
      ht->q_proj = std::move(q_proj);
      ht->q_conv = std::move(q_conv);
      ht->q_silu = std::move(q_silu);
      ht->q_norm = std::move(q_norm);
      ht->q_used = std::move(q_used);
      ht->k_proj = std::move(k_proj);
      ht->k_conv = std::move(k_conv);
      ht->k_silu = std::move(k_silu);
      ht->k_norm = std::move(k_norm);
      ht->k_used = std::move(k_used);
      ht->v_proj = std::move(v_proj);
      ht->v_conv = std::move(v_conv);
      ht->v_silu = std::move(v_silu);
      ht->beta = std::move(beta);
      ht->alpha = std::move(alpha);
      ht->states = std::move(all_states);
      ht->u = std::move(u_store);
      ht->outputs = std::move(rec.outputs);
    }
  }

  // RMSNorm over the concatenated head dimension, then the output projection.
  const int D = H * dv;
  Matrix normed(T, D);
  std::vector<double> rms_scale(static_cast<size_t>(T), 0.0);
  for (int t = 0; t < T; ++t) {
    double acc = 0.0;
    for (int j = 0; j < D; ++j) acc += concat.at(t, j) * concat.at(t, j);
    const double inv = 1.0 / std::sqrt(acc / D + params.rms_eps);
    rms_scale[static_cast<size_t>(t)] = inv;
    for (int j = 0; j < D; ++j) normed.at(t, j) = concat.at(t, j) * inv;
  }
  res.y = matmul(normed, params.w_o);
  if (tape) {
    tape->concat = std::move(concat);
    tape->rms_scale = std::move(rms_scale);
    tape->concat_normed = std::move(normed);
  }
  return res;
}

}  // namespace dp
