#include "deltaprune/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "deltaprune/rng.hpp"

namespace dp {

namespace {

Matrix init_weight(std::mt19937_64& rng, int rows, int cols, double sd) {
  return random_matrix(rng, rows, cols, sd);
}

LayerParams init_layer(const ToyConfig& cfg, std::mt19937_64& rng) {
  LayerParams p;
  p.dims = HeadDims{cfg.model_dim, cfg.key_dim, cfg.value_dim, cfg.num_heads, cfg.conv_len};
  p.rms_eps = cfg.rms_eps;
  const double proj_sd = 1.0 / std::sqrt(static_cast<double>(cfg.model_dim));
  const double conv_sd = 1.0 / std::sqrt(static_cast<double>(cfg.conv_len));
  for (int h = 0; h < cfg.num_heads; ++h) {
    HeadParams hp;
    hp.w_q = init_weight(rng, cfg.model_dim, cfg.key_dim, proj_sd);
    hp.w_k = init_weight(rng, cfg.model_dim, cfg.key_dim, proj_sd);
    hp.w_v = init_weight(rng, cfg.model_dim, cfg.value_dim, proj_sd);
    hp.w_beta = init_weight(rng, cfg.model_dim, 1, proj_sd);
    if (cfg.variant == MixerVariant::gated) hp.w_alpha = init_weight(rng, cfg.model_dim, 1, proj_sd);
    hp.conv_q = init_weight(rng, cfg.key_dim, cfg.conv_len, conv_sd);
    hp.conv_k = init_weight(rng, cfg.key_dim, cfg.conv_len, conv_sd);
    hp.conv_v = init_weight(rng, cfg.value_dim, cfg.conv_len, conv_sd);
    p.heads.push_back(std::move(hp));
  }
  p.w_o = init_weight(rng, cfg.num_heads * cfg.value_dim, cfg.model_dim,
                      1.0 / std::sqrt(static_cast<double>(cfg.num_heads * cfg.value_dim)));
  return p;
}

}  // namespace

ToyModel init_toy_model(const ToyConfig& cfg, uint64_t seed) {
  if (cfg.vocab < 2 || cfg.model_dim < 1 || cfg.num_layers < 1 || cfg.num_heads < 1 || cfg.key_dim < 1 ||
      cfg.value_dim < 1 || cfg.conv_len < 1)
    throw config_error("toy model: dimensions must be positive");
  std::mt19937_64 rng = make_rng(seed);
  ToyModel m;
  m.config = cfg;
  m.embedding = init_weight(rng, cfg.vocab, cfg.model_dim, 1.0);
  for (int l = 0; l < cfg.num_layers; ++l) m.layers.push_back(init_layer(cfg, rng));
  m.lm_head = init_weight(rng, cfg.model_dim, cfg.vocab, 1.0 / std::sqrt(static_cast<double>(cfg.model_dim)));
  return m;
}

RecallSequence gen_recall_sequence(const RecallSpec& spec, std::mt19937_64& rng) {
  const int P = spec.num_pairs;
  if (P < 1) throw config_error("gen_recall: numPairs must be >= 1");
  if (spec.vocab < 2 * P) throw config_error("gen_recall: vocab must be >= 2*numPairs");
  if (spec.seq_len < 2 * P + 1) throw config_error("gen_recall: seqLen must be >= 2*numPairs+1");

  // Sample 2P distinct tokens; first P are keys, last P are values. Keys and
  // values are disjoint, so writes keyed on value tokens never shadow a key.
  std::vector<int> pool(static_cast<size_t>(spec.vocab));
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < 2 * P; ++i) {
    std::uniform_int_distribution<int> d(i, spec.vocab - 1);
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(d(rng))]);
  }

  RecallSequence seq;
  seq.tokens.reserve(static_cast<size_t>(spec.seq_len));
  for (int i = 0; i < P; ++i) {
    seq.tokens.push_back(pool[static_cast<size_t>(i)]);      // key_i
    seq.tokens.push_back(pool[static_cast<size_t>(P + i)]);  // value_i
  }
  const int filler = pool[static_cast<size_t>(2 * P - 1)];  // last value token
  while (static_cast<int>(seq.tokens.size()) < spec.seq_len - 1) seq.tokens.push_back(filler);
  std::uniform_int_distribution<int> pick(0, P - 1);
  const int probe = pick(rng);
  seq.tokens.push_back(pool[static_cast<size_t>(probe)]);
  seq.target = pool[static_cast<size_t>(P + probe)];
  return seq;
}

std::vector<RecallSequence> gen_recall(const RecallSpec& spec, int count, uint64_t seed) {
  std::vector<RecallSequence> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::mt19937_64 rng = trial_rng(seed, static_cast<uint64_t>(i));
    out.push_back(gen_recall_sequence(spec, rng));
  }
  return out;
}

ModelGrads zero_model_grads(const ToyModel& m) {
  ModelGrads g;
  g.embedding = Matrix(m.embedding.rows, m.embedding.cols);
  for (const LayerParams& l : m.layers) g.layers.push_back(zero_grads_like(l));
  g.lm_head = Matrix(m.lm_head.rows, m.lm_head.cols);
  return g;
}

std::vector<Matrix*> collect_params(ToyModel& m) {
  std::vector<Matrix*> out;
  out.push_back(&m.embedding);
  for (LayerParams& l : m.layers) {
    for (HeadParams& h : l.heads) {
      out.push_back(&h.w_q);
      out.push_back(&h.w_k);
      out.push_back(&h.w_v);
      out.push_back(&h.w_beta);
      if (!h.w_alpha.data.empty()) out.push_back(&h.w_alpha);
      out.push_back(&h.conv_q);
      out.push_back(&h.conv_k);
      out.push_back(&h.conv_v);
    }
    out.push_back(&l.w_o);
  }
  out.push_back(&m.lm_head);
  return out;
}

std::vector<const Matrix*> collect_grads(const ModelGrads& g) {
  std::vector<const Matrix*> out;
  out.push_back(&g.embedding);
  for (const ParamGrads& l : g.layers) {
    for (const HeadGrads& h : l.heads) {
      out.push_back(&h.w_q);
      out.push_back(&h.w_k);
      out.push_back(&h.w_v);
      out.push_back(&h.w_beta);
      if (!h.w_alpha.data.empty()) out.push_back(&h.w_alpha);
      out.push_back(&h.conv_q);
      out.push_back(&h.conv_k);
      out.push_back(&h.conv_v);
    }
    out.push_back(&l.w_o);
  }
  out.push_back(&g.lm_head);
  return out;
}

Matrix model_forward(const ToyModel& m, const std::vector<int>& tokens, ModelTape* tape) {
  const int T = static_cast<int>(tokens.size());
  Matrix x(T, m.config.model_dim);
  for (int t = 0; t < T; ++t) {
    const int tok = tokens[static_cast<size_t>(t)];
    if (tok < 0 || tok >= m.config.vocab) throw config_error("model_forward: token out of range");
    std::copy(m.embedding.row(tok).begin(), m.embedding.row(tok).end(), x.row(t).begin());
  }
  if (tape) {
    tape->layer_inputs.clear();
    tape->layers.assign(m.layers.size(), LayerTape{});
  }
  for (size_t l = 0; l < m.layers.size(); ++l) {
    if (tape) tape->layer_inputs.push_back(x);
    ForwardResult fr = layer_forward(m.layers[l], x, m.config.variant, {}, tape ? &tape->layers[l] : nullptr);
    x = add(x, fr.y);  // residual connection
  }
  if (tape) tape->layer_inputs.push_back(x);
  return x;
}

double model_loss_and_grad(const ToyModel& m, const RecallSequence& seq, ModelGrads& grads) {
  ModelTape tape;
  Matrix x = model_forward(m, seq.tokens, &tape);
  const int T = x.rows;
  const int probe_row = T - 1;
  const int vocab = m.config.vocab;

  // Stable softmax cross-entropy at the probe position.
  std::vector<double> logits = matvec_transposed(m.lm_head, x.row(probe_row));
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double logz = std::log(z) + mx;
  const double loss = logz - logits[static_cast<size_t>(seq.target)];

  std::vector<double> dlogits(static_cast<size_t>(vocab));
  for (int c = 0; c < vocab; ++c)
    dlogits[static_cast<size_t>(c)] = std::exp(logits[static_cast<size_t>(c)] - logz) - (c == seq.target ? 1.0 : 0.0);

  // lm_head grad and gradient into the final hidden state.
  for (int j = 0; j < m.config.model_dim; ++j) {
    const double xv = x.at(probe_row, j);
    for (int c = 0; c < vocab; ++c) grads.lm_head.at(j, c) += xv * dlogits[static_cast<size_t>(c)];
  }
  Matrix dx(T, m.config.model_dim);
  for (int j = 0; j < m.config.model_dim; ++j) {
    double acc = 0.0;
    for (int c = 0; c < vocab; ++c) acc += m.lm_head.at(j, c) * dlogits[static_cast<size_t>(c)];
    dx.at(probe_row, j) = acc;
  }

  for (int l = static_cast<int>(m.layers.size()) - 1; l >= 0; --l) {
    LayerBackwardOut bw = layer_backward_taped(m.layers[static_cast<size_t>(l)], m.config.variant,
                                               tape.layers[static_cast<size_t>(l)], dx);
    accumulate_grads(grads.layers[static_cast<size_t>(l)], bw.grads);
    // Residual: dX_{l-1} = dX_l + d(layer output)/dX.
    for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += bw.dx.data[i];
  }
  for (int t = 0; t < T; ++t) {
    const int tok = seq.tokens[static_cast<size_t>(t)];
    for (int j = 0; j < m.config.model_dim; ++j) grads.embedding.at(tok, j) += dx.at(t, j);
  }
  return loss;
}

std::vector<double> probe_logits(const ToyModel& m, const std::vector<int>& tokens) {
  Matrix x = model_forward(m, tokens);
  return matvec_transposed(m.lm_head, x.row(x.rows - 1));
}

int argmax_lowest_tie(std::span<const double> v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
  return best;
}

double eval_recall(const ToyModel& m, const std::vector<RecallSequence>& eval_set) {
  if (eval_set.empty()) throw config_error("eval_recall: empty evaluation set");
  int correct = 0;
  for (const RecallSequence& s : eval_set) {
    const std::vector<double> logits = probe_logits(m, s.tokens);
    if (argmax_lowest_tie(logits) == s.target) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(eval_set.size());
}

TrainMetrics train_toy(ToyModel& m, const TrainConfig& cfg) {
  if (cfg.steps < 0 || cfg.batch < 1) throw config_error("train: bad steps/batch");
  const RecallSpec spec{m.config.vocab, m.config.num_pairs, m.config.seq_len};
  // Distinct seed domains for training stream vs evaluation set.
  const std::vector<RecallSequence> eval_set =
      gen_recall(spec, cfg.eval_sequences, splitmix64(cfg.seed ^ 0xe7a1u));

  AdamState opt;
  AdamConfig adam;
  adam.lr = cfg.lr;
  std::vector<Matrix*> params = collect_params(m);

  TrainMetrics metrics;
  uint64_t sample_counter = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    ModelGrads grads = zero_model_grads(m);
    double loss_acc = 0.0;
    for (int b = 0; b < cfg.batch; ++b) {
      std::mt19937_64 rng = trial_rng(cfg.seed, sample_counter++);
      const RecallSequence seq = gen_recall_sequence(spec, rng);
      loss_acc += model_loss_and_grad(m, seq, grads);
    }
    const double mean_loss = loss_acc / cfg.batch;
    if (!std::isfinite(mean_loss) || mean_loss > cfg.divergence_loss)
      throw numeric_error("train: loss diverged");
    ModelGrads scaled = std::move(grads);
    {
      const double inv = 1.0 / cfg.batch;
      for (double& v : scaled.embedding.data) v *= inv;
      for (ParamGrads& pl : scaled.layers) scale_grads(pl, inv);
      for (double& v : scaled.lm_head.data) v *= inv;
    }
    adam_update(params, collect_grads(scaled), opt, adam);

    TrainPoint pt;
    pt.step = step + 1;
    pt.loss = mean_loss;
    const bool eval_now = (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) || step + 1 == cfg.steps;
    if (eval_now) {
      pt.accuracy = eval_recall(m, eval_set);
      metrics.final_accuracy = pt.accuracy;
    }
    metrics.history.push_back(pt);
    metrics.steps_run = step + 1;
    if (eval_now && cfg.target_accuracy > 0.0 && pt.accuracy >= cfg.target_accuracy) break;
  }
  if (metrics.steps_run == 0) metrics.final_accuracy = eval_recall(m, eval_set);
  return metrics;
}

TrainMetrics recovery_finetune(ToyModel& m, TrainConfig cfg) {
  if (cfg.steps <= 0) cfg.steps = 500;
  return train_toy(m, cfg);
}

}  // namespace dp
