#include "deltaprune/grad.hpp"

#include <cmath>

#include "deltaprune/linalg.hpp"

namespace dp {

namespace {
constexpr double kL2Eps = 1e-8;  // must match the forward pass

double silu_grad(double z) {
  const double s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

// dL/dx for row-wise y = x / sqrt(||x||^2 + eps), given g = dL/dy.
void l2norm_backward_row(std::span<const double> x, std::span<const double> g, std::span<double> dx) {
  double sq = 0.0, gx = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    sq += x[i] * x[i];
    gx += g[i] * x[i];
  }
  const double r = 1.0 / std::sqrt(sq + kL2Eps);
  const double r3gx = r * r * r * gx;
  for (size_t i = 0; i < x.size(); ++i) dx[i] = r * g[i] - r3gx * x[i];
}

Matrix conv1d_backward_input(const Matrix& dout, const Matrix& filters) {
  const int T = dout.rows, C = dout.cols, L = filters.cols;
  Matrix din(T, C);
  for (int t = 0; t < T; ++t) {
    const int jmax = std::min(L - 1, t);
    for (int c = 0; c < C; ++c) {
      const double d = dout.at(t, c);
      if (d == 0.0) continue;
      for (int j = 0; j <= jmax; ++j) din.at(t - j, c) += filters.at(c, j) * d;
    }
  }
  return din;
}

Matrix conv1d_backward_filters(const Matrix& dout, const Matrix& input, int L) {
  const int T = dout.rows, C = dout.cols;
  Matrix df(C, L);
  for (int t = 0; t < T; ++t) {
    const int jmax = std::min(L - 1, t);
    for (int c = 0; c < C; ++c) {
      const double d = dout.at(t, c);
      if (d == 0.0) continue;
      for (int j = 0; j <= jmax; ++j) df.at(c, j) += d * input.at(t - j, c);
    }
  }
  return df;
}

}  // namespace

ParamGrads zero_grads_like(const LayerParams& p) {
  ParamGrads g;
  g.heads.resize(p.heads.size());
  for (size_t h = 0; h < p.heads.size(); ++h) {
    const HeadParams& hp = p.heads[h];
    HeadGrads& hg = g.heads[h];
    hg.w_q = Matrix(hp.w_q.rows, hp.w_q.cols);
    hg.w_k = Matrix(hp.w_k.rows, hp.w_k.cols);
    hg.w_v = Matrix(hp.w_v.rows, hp.w_v.cols);
    hg.w_beta = Matrix(hp.w_beta.rows, hp.w_beta.cols);
    hg.w_alpha = hp.w_alpha.data.empty() ? Matrix() : Matrix(hp.w_alpha.rows, hp.w_alpha.cols);
    hg.conv_q = Matrix(hp.conv_q.rows, hp.conv_q.cols);
    hg.conv_k = Matrix(hp.conv_k.rows, hp.conv_k.cols);
    hg.conv_v = Matrix(hp.conv_v.rows, hp.conv_v.cols);
  }
  g.w_o = Matrix(p.w_o.rows, p.w_o.cols);
  return g;
}

void accumulate_grads(ParamGrads& into, const ParamGrads& from) {
  auto acc = [](Matrix& a, const Matrix& b) {
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
  };
  for (size_t h = 0; h < into.heads.size(); ++h) {
    acc(into.heads[h].w_q, from.heads[h].w_q);
    acc(into.heads[h].w_k, from.heads[h].w_k);
    acc(into.heads[h].w_v, from.heads[h].w_v);
    acc(into.heads[h].w_beta, from.heads[h].w_beta);
    if (!into.heads[h].w_alpha.data.empty()) acc(into.heads[h].w_alpha, from.heads[h].w_alpha);
    acc(into.heads[h].conv_q, from.heads[h].conv_q);
    acc(into.heads[h].conv_k, from.heads[h].conv_k);
    acc(into.heads[h].conv_v, from.heads[h].conv_v);
  }
  acc(into.w_o, from.w_o);
}

void scale_grads(ParamGrads& g, double s) {
  auto sc = [s](Matrix& a) {
    for (double& v : a.data) v *= s;
  };
  for (HeadGrads& h : g.heads) {
    sc(h.w_q);
    sc(h.w_k);
    sc(h.w_v);
    sc(h.w_beta);
    if (!h.w_alpha.data.empty()) sc(h.w_alpha);
    sc(h.conv_q);
    sc(h.conv_k);
    sc(h.conv_v);
  }
  sc(g.w_o);
}

LossOut eval_loss(const Matrix& y, const LossSpec& loss) {
  if (!y.same_shape(loss.targets)) throw shape_error("eval_loss: target shape mismatch");
  LossOut out;
  out.dy = Matrix(y.rows, y.cols);
  if (loss.kind == LossKind::squared_error) {
    double acc = 0.0;
    for (size_t i = 0; i < y.data.size(); ++i) {
      const double d = y.data[i] - loss.targets.data[i];
      acc += d * d;
      out.dy.data[i] = 2.0 * d;
    }
    out.loss = acc;
    return out;
  }
  // Row-wise cross entropy with stable softmax.
  double acc = 0.0;
  for (int t = 0; t < y.rows; ++t) {
    double mx = y.at(t, 0);
    for (int c = 1; c < y.cols; ++c) mx = std::max(mx, y.at(t, c));
    double z = 0.0;
    for (int c = 0; c < y.cols; ++c) z += std::exp(y.at(t, c) - mx);
    const double logz = std::log(z) + mx;
    for (int c = 0; c < y.cols; ++c) {
      const double p = std::exp(y.at(t, c) - logz);
      const double tgt = loss.targets.at(t, c);
      acc -= tgt * (y.at(t, c) - logz);
      out.dy.at(t, c) = p - tgt;
    }
  }
  out.loss = acc;
  return out;
}

LayerBackwardOut layer_backward_taped(const LayerParams& params, MixerVariant variant, const LayerTape& tape,
                                      const Matrix& dy) {
  const HeadDims& d = params.dims;
  const int T = tape.x.rows;
  const int H = d.num_heads;
  const int dk = d.key_dim;
  const int dv = d.value_dim;
  const int D = H * dv;
  if (dy.rows != T || dy.cols != d.model_dim) throw shape_error("layer_backward: dy shape mismatch");

  LayerBackwardOut out;
  out.grads = zero_grads_like(params);
  out.dx = Matrix(T, d.model_dim);

  // Y = normed * w_o
  Matrix d_normed = matmul(dy, transpose(params.w_o));
  out.grads.w_o = matmul(transpose(tape.concat_normed), dy);

  // RMSNorm backward per row: dx = r*g - (r^3 / D) (g.x) x.
  Matrix d_concat(T, D);
  for (int t = 0; t < T; ++t) {
    const double r = tape.rms_scale[static_cast<size_t>(t)];
    double gx = 0.0;
    for (int j = 0; j < D; ++j) gx += d_normed.at(t, j) * tape.concat.at(t, j);
    const double coef = r * r * r * gx / D;
    for (int j = 0; j < D; ++j) d_concat.at(t, j) = r * d_normed.at(t, j) - coef * tape.concat.at(t, j);
  }

  for (int h = 0; h < H; ++h) {
    const HeadParams& hp = params.heads[static_cast<size_t>(h)];
    const HeadTape& ht = tape.heads[static_cast<size_t>(h)];
    HeadGrads& hg = out.grads.heads[static_cast<size_t>(h)];

    Matrix d_out(T, dv);
    for (int t = 0; t < T; ++t)
      for (int i = 0; i < dv; ++i) d_out.at(t, i) = d_concat.at(t, h * dv + i);

    // Recurrence backward; states[t] = S_{t-1}, states[t+1] = S_t.
    Matrix d_q_used(T, dk), d_k_used(T, dk), d_v_silu(T, dv);
    std::vector<double> d_beta(static_cast<size_t>(T), 0.0), d_alpha(static_cast<size_t>(T), 0.0);
    Matrix ds(dv, dk);
    for (int t = T - 1; t >= 0; --t) {
      const Matrix& s_t = ht.states[static_cast<size_t>(t + 1)];
      const Matrix& s_prev = ht.states[static_cast<size_t>(t)];
      const auto kt = ht.k_used.row(t);
      const auto qt = ht.q_used.row(t);
      // o_t = S_t q_t
      for (int j = 0; j < dk; ++j) {
        double acc = 0.0;
        for (int i = 0; i < dv; ++i) acc += s_t.at(i, j) * d_out.at(t, i);
        d_q_used.at(t, j) = acc;
      }
      for (int i = 0; i < dv; ++i) {
        const double g = d_out.at(t, i);
        if (g == 0.0) continue;
        for (int j = 0; j < dk; ++j) ds.at(i, j) += g * qt[j];
      }

      if (variant == MixerVariant::linear) {
        // S_t = S_{t-1} + v_t k_t^T
        for (int i = 0; i < dv; ++i) {
          double acc = 0.0;
          for (int j = 0; j < dk; ++j) acc += ds.at(i, j) * kt[j];
          d_v_silu.at(t, i) = acc;
        }
        const auto vt = ht.v_silu.row(t);
        for (int j = 0; j < dk; ++j) {
          double acc = 0.0;
          for (int i = 0; i < dv; ++i) acc += ds.at(i, j) * vt[i];
          d_k_used.at(t, j) += acc;
        }
        continue;  // ds carries unchanged
      }

      const double beta = ht.beta[static_cast<size_t>(t)];
      const double alpha = (variant == MixerVariant::gated) ? ht.alpha[static_cast<size_t>(t)] : 1.0;
      // S_t = alpha S_{t-1} + w k^T, w = beta (v - u), u = S_{t-1} k
      std::vector<double> dw(static_cast<size_t>(dv), 0.0);
      for (int i = 0; i < dv; ++i) {
        double acc = 0.0;
        for (int j = 0; j < dk; ++j) acc += ds.at(i, j) * kt[j];
        dw[static_cast<size_t>(i)] = acc;
      }
      // dk from the outer product: dk_j += sum_i ds_ij w_i
      for (int j = 0; j < dk; ++j) {
        double acc = 0.0;
        for (int i = 0; i < dv; ++i) {
          const double w_i = beta * (ht.v_silu.at(t, i) - ht.u.at(t, i));
          acc += ds.at(i, j) * w_i;
        }
        d_k_used.at(t, j) += acc;
      }
      if (variant == MixerVariant::gated) {
        double da = 0.0;
        for (int i = 0; i < dv; ++i)
          for (int j = 0; j < dk; ++j) da += ds.at(i, j) * s_prev.at(i, j);
        d_alpha[static_cast<size_t>(t)] = da;
      }
      double db = 0.0;
      for (int i = 0; i < dv; ++i) {
        const double diff = ht.v_silu.at(t, i) - ht.u.at(t, i);
        db += dw[static_cast<size_t>(i)] * diff;
        d_v_silu.at(t, i) = beta * dw[static_cast<size_t>(i)];
      }
      d_beta[static_cast<size_t>(t)] = db;
      // du = -beta dw; dS_{t-1} = alpha dS + du k^T; dk += S_{t-1}^T du
      if (variant == MixerVariant::gated)
        for (double& v : ds.data) v *= alpha;
      for (int i = 0; i < dv; ++i) {
        const double du = -beta * dw[static_cast<size_t>(i)];
        if (du == 0.0) continue;
        for (int j = 0; j < dk; ++j) ds.at(i, j) += du * kt[j];
      }
      for (int j = 0; j < dk; ++j) {
        double acc = 0.0;
        for (int i = 0; i < dv; ++i) acc += s_prev.at(i, j) * (-beta * dw[static_cast<size_t>(i)]);
        d_k_used.at(t, j) += acc;
      }
    }

    // The qk_transform hook is a forward-only testing aid; training never
    // sets it, so the tape's q_used must alias the normalized activations.
    if (ht.q_used.data != ht.q_norm.data)
      throw numeric_error("layer_backward: backward through qk_transform unsupported");
    const Matrix& d_q_norm = d_q_used;
    const Matrix& d_k_norm = d_k_used;

    // l2 normalization backward.
    Matrix d_q_silu(T, dk), d_k_silu(T, dk);
    for (int t = 0; t < T; ++t) {
      l2norm_backward_row(ht.q_silu.row(t), d_q_norm.row(t), d_q_silu.row(t));
      l2norm_backward_row(ht.k_silu.row(t), d_k_norm.row(t), d_k_silu.row(t));
    }

    // SiLU backward (v path gradients are wrt post-SiLU values).
    Matrix d_q_conv = d_q_silu, d_k_conv = d_k_silu, d_v_conv = d_v_silu;
    for (size_t i = 0; i < d_q_conv.data.size(); ++i) d_q_conv.data[i] *= silu_grad(ht.q_conv.data[i]);
    for (size_t i = 0; i < d_k_conv.data.size(); ++i) d_k_conv.data[i] *= silu_grad(ht.k_conv.data[i]);
    for (size_t i = 0; i < d_v_conv.data.size(); ++i) d_v_conv.data[i] *= silu_grad(ht.v_conv.data[i]);

    // Convolution backward.
    Matrix d_q_proj = conv1d_backward_input(d_q_conv, hp.conv_q);
    Matrix d_k_proj = conv1d_backward_input(d_k_conv, hp.conv_k);
    Matrix d_v_proj = conv1d_backward_input(d_v_conv, hp.conv_v);
    hg.conv_q = conv1d_backward_filters(d_q_conv, ht.q_proj, d.conv_len);
    hg.conv_k = conv1d_backward_filters(d_k_conv, ht.k_proj, d.conv_len);
    hg.conv_v = conv1d_backward_filters(d_v_conv, ht.v_proj, d.conv_len);

    // Projections.
    hg.w_q = matmul(transpose(tape.x), d_q_proj);
    hg.w_k = matmul(transpose(tape.x), d_k_proj);
    hg.w_v = matmul(transpose(tape.x), d_v_proj);
    Matrix dx_head = matmul(d_q_proj, transpose(hp.w_q));
    {
      Matrix tmp = matmul(d_k_proj, transpose(hp.w_k));
      for (size_t i = 0; i < dx_head.data.size(); ++i) dx_head.data[i] += tmp.data[i];
      tmp = matmul(d_v_proj, transpose(hp.w_v));
      for (size_t i = 0; i < dx_head.data.size(); ++i) dx_head.data[i] += tmp.data[i];
    }

    // Gate paths: beta = sigmoid(x w_beta); alpha = sigmoid(x w_alpha).
    if (variant != MixerVariant::linear) {
      for (int t = 0; t < T; ++t) {
        const double b = ht.beta[static_cast<size_t>(t)];
        const double dz = d_beta[static_cast<size_t>(t)] * b * (1.0 - b);
        if (dz != 0.0) {
          for (int j = 0; j < d.model_dim; ++j) {
            hg.w_beta.at(j, 0) += tape.x.at(t, j) * dz;
            dx_head.at(t, j) += hp.w_beta.at(j, 0) * dz;
          }
        }
      }
    }
    if (variant == MixerVariant::gated) {
      for (int t = 0; t < T; ++t) {
        const double a = ht.alpha[static_cast<size_t>(t)];
        const double dz = d_alpha[static_cast<size_t>(t)] * a * (1.0 - a);
        if (dz != 0.0) {
          for (int j = 0; j < d.model_dim; ++j) {
            hg.w_alpha.at(j, 0) += tape.x.at(t, j) * dz;
            dx_head.at(t, j) += hp.w_alpha.at(j, 0) * dz;
          }
        }
      }
    }

    for (size_t i = 0; i < out.dx.data.size(); ++i) out.dx.data[i] += dx_head.data[i];
  }
  return out;
}

BackwardResult layer_backward(const LayerParams& params, const Matrix& x, MixerVariant variant,
                              const LossSpec& loss) {
  LayerTape tape;
  ForwardResult fwd = layer_forward(params, x, variant, {}, &tape);
  LossOut lo = eval_loss(fwd.y, loss);
  LayerBackwardOut bw = layer_backward_taped(params, variant, tape, lo.dy);
  BackwardResult res;
  res.loss = lo.loss;
  res.grads = std::move(bw.grads);
  res.dx = std::move(bw.dx);
  return res;
}

double query_jacobian_condition(const Matrix& s, std::span<const double> x) {
  const int dv = s.rows, dk = s.cols;
  const int h = static_cast<int>(x.size());
  Matrix jac(dv, h * dk);
  // Column for basis matrix E_{ij}: map(E) = S E^T x = x_i * S[:, j].
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < dk; ++j)
      for (int r = 0; r < dv; ++r) jac.at(r, i * dk + j) = x[static_cast<size_t>(i)] * s.at(r, j);
  return condition_number(jac);
}

void sgd_update(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, double lr) {
  if (params.size() != grads.size()) throw shape_error("sgd_update: list size mismatch");
  for (size_t p = 0; p < params.size(); ++p) {
    Matrix& w = *params[p];
    const Matrix& g = *grads[p];
    if (!w.same_shape(g)) throw shape_error("sgd_update: grad shape mismatch");
    for (size_t i = 0; i < w.data.size(); ++i) w.data[i] -= lr * g.data[i];
  }
}

void adam_update(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads, AdamState& state,
                 const AdamConfig& cfg) {
  if (params.size() != grads.size()) throw shape_error("adam_update: list size mismatch");
  if (state.m.empty()) {
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const Matrix* p : params) {
      state.m.emplace_back(p->rows, p->cols);
      state.v.emplace_back(p->rows, p->cols);
    }
  }
  if (state.m.size() != params.size()) throw shape_error("adam_update: state size mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (size_t p = 0; p < params.size(); ++p) {
    Matrix& w = *params[p];
    const Matrix& g = *grads[p];
    Matrix& m = state.m[p];
    Matrix& v = state.v[p];
    if (!w.same_shape(g) || !w.same_shape(m)) throw shape_error("adam_update: shape mismatch");
    for (size_t i = 0; i < w.data.size(); ++i) {
      m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * g.data[i];
      v.data[i] = cfg.beta2 * v.data[i] + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      w.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace dp
