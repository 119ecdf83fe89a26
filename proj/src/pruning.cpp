#include "deltaprune/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "deltaprune/rng.hpp"

namespace dp {

namespace {
constexpr double kOrthTol = 1e-10;

void check_mode_shapes(const Matrix& w_q, const Matrix& w_k) {
  if (w_q.cols != w_k.cols || w_q.rows != w_k.rows)
    throw shape_error("channel scores: query/key weights must share a shape");
}

// Stacks the activation sides a selection mode consults: K above Q for joint.
Matrix stacked_side(const HeadCalibration& stats, SelectionMode mode) {
  switch (mode) {
    case SelectionMode::keys_only:
      return stats.captured_k;
    case SelectionMode::queries_only:
      return stats.captured_q;
    case SelectionMode::joint:
      break;
  }
  const Matrix& k = stats.captured_k;
  const Matrix& q = stats.captured_q;
  if (k.cols != q.cols) throw shape_error("calibration: key/query widths differ");
  Matrix m(k.rows + q.rows, k.cols);
  std::copy(k.data.begin(), k.data.end(), m.data.begin());
  std::copy(q.data.begin(), q.data.end(), m.data.begin() + k.data.size());
  return m;
}
}  // namespace

const char* mode_name(SelectionMode m) {
  switch (m) {
    case SelectionMode::joint: return "joint";
    case SelectionMode::keys_only: return "keys";
    case SelectionMode::queries_only: return "queries";
  }
  throw std::invalid_argument("mode_name: unknown mode");
}

SelectionMode mode_from_name(const std::string& name) {
  if (name == "joint") return SelectionMode::joint;
  if (name == "keys") return SelectionMode::keys_only;
  if (name == "queries") return SelectionMode::queries_only;
  throw config_error("unknown selection mode: " + name);
}

const char* strategy_name(PruneStrategy s) {
  switch (s) {
    case PruneStrategy::rand: return "rand";
    case PruneStrategy::l1: return "l1";
    case PruneStrategy::swanda: return "swanda";
    case PruneStrategy::grad: return "grad";
    case PruneStrategy::drrqr: return "drrqr";
    case PruneStrategy::pca: return "pca";
    case PruneStrategy::pca_adversarial: return "pca-adversarial";
  }
  throw std::invalid_argument("strategy_name: unknown strategy");
}

PruneStrategy strategy_from_name(const std::string& name) {
  if (name == "rand") return PruneStrategy::rand;
  if (name == "l1") return PruneStrategy::l1;
  if (name == "swanda") return PruneStrategy::swanda;
  if (name == "grad") return PruneStrategy::grad;
  if (name == "drrqr") return PruneStrategy::drrqr;
  if (name == "pca") return PruneStrategy::pca;
  if (name == "pca-adversarial") return PruneStrategy::pca_adversarial;
  throw config_error("unknown pruning strategy: " + name);
}

int retained_width(int d_k, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw config_error("compression ratio must lie in [0, 1)");
  if (d_k < 1) throw shape_error("retained_width: d_k must be positive");
  const long long w = std::llround((1.0 - ratio) * static_cast<double>(d_k));
  return static_cast<int>(std::max(1LL, w));
}

Matrix projection_matrix(std::span<const int> retained, int d_k) {
  Matrix p(static_cast<int>(retained.size()), d_k);
  for (size_t r = 0; r < retained.size(); ++r) {
    const int c = retained[r];
    if (c < 0 || c >= d_k) throw shape_error("projection_matrix: retained index out of range");
    if (r > 0 && retained[r - 1] >= c) throw shape_error("projection_matrix: indices must strictly increase");
    p.at(static_cast<int>(r), c) = 1.0;
  }
  return p;
}

std::vector<double> score_l1(const Matrix& w_q, const Matrix& w_k, SelectionMode mode) {
  check_mode_shapes(w_q, w_k);
  std::vector<double> s(static_cast<size_t>(w_q.cols), 0.0);
  for (int j = 0; j < w_q.cols; ++j) {
    double acc = 0.0;
    for (int i = 0; i < w_q.rows; ++i) {
      if (mode != SelectionMode::keys_only) acc += std::abs(w_q.at(i, j));
      if (mode != SelectionMode::queries_only) acc += std::abs(w_k.at(i, j));
    }
    s[static_cast<size_t>(j)] = acc;
  }
  return s;
}

std::vector<double> score_swanda(const Matrix& w_q, const Matrix& w_k, std::span<const double> input_norms,
                                 SelectionMode mode) {
  check_mode_shapes(w_q, w_k);
  if (static_cast<int>(input_norms.size()) != w_q.rows)
    throw shape_error("score_swanda: one input norm per weight row required");
  std::vector<double> s(static_cast<size_t>(w_q.cols), 0.0);
  for (int j = 0; j < w_q.cols; ++j) {
    double acc = 0.0;
    for (int i = 0; i < w_q.rows; ++i) {
      double mag = 0.0;
      if (mode != SelectionMode::keys_only) mag += std::abs(w_q.at(i, j));
      if (mode != SelectionMode::queries_only) mag += std::abs(w_k.at(i, j));
      acc += mag * input_norms[static_cast<size_t>(i)];
    }
    s[static_cast<size_t>(j)] = acc;
  }
  return s;
}

std::vector<double> score_grad(const HeadParams& head, const HeadGrads& grads, SelectionMode mode) {
  check_mode_shapes(head.w_q, head.w_k);
  if (grads.w_q.rows != head.w_q.rows || grads.w_q.cols != head.w_q.cols || grads.w_k.rows != head.w_k.rows ||
      grads.w_k.cols != head.w_k.cols)
    throw shape_error("score_grad: gradient shapes must match weights");
  if (!grads.w_q.all_finite() || !grads.w_k.all_finite()) throw numeric_error("score_grad: nonfinite gradients");
  std::vector<double> s(static_cast<size_t>(head.w_q.cols), 0.0);
  for (int j = 0; j < head.w_q.cols; ++j) {
    double acc = 0.0;
    for (int i = 0; i < head.w_q.rows; ++i) {
      if (mode != SelectionMode::keys_only) acc += std::abs(head.w_q.at(i, j) * grads.w_q.at(i, j));
      if (mode != SelectionMode::queries_only) acc += std::abs(head.w_k.at(i, j) * grads.w_k.at(i, j));
    }
    s[static_cast<size_t>(j)] = acc;
  }
  return s;
}

std::vector<int> top_k_indices(std::span<const double> scores, int k) {
  const int n = static_cast<int>(scores.size());
  if (k < 1 || k > n) throw shape_error("top_k_indices: k out of range");
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  // Descending by score; equal scores keep ascending index order.
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  order.resize(static_cast<size_t>(k));
  std::sort(order.begin(), order.end());
  return order;
}

std::vector<int> random_subset(int n, int k, std::mt19937_64& rng) {
  if (k < 1 || k > n) throw shape_error("random_subset: k out of range");
  std::vector<int> pool(static_cast<size_t>(n));
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> d(i, n - 1);
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(d(rng))]);
  }
  pool.resize(static_cast<size_t>(k));
  std::sort(pool.begin(), pool.end());
  return pool;
}

ModelCalibration collect_calibration(const ToyModel& m, const std::vector<RecallSequence>& seqs, int max_samples,
                                     bool use_normalized) {
  if (seqs.empty()) throw config_error("collect_calibration: empty calibration set");
  if (max_samples < 1) throw config_error("collect_calibration: max_samples must be >= 1");

  ModelCalibration calib;
  calib.grads = zero_model_grads(m);
  calib.layers.resize(m.layers.size());
  for (size_t l = 0; l < m.layers.size(); ++l) {
    LayerCalibration& lc = calib.layers[l];
    lc.heads.resize(m.layers[l].heads.size());
    lc.input_col_norms.assign(static_cast<size_t>(m.config.model_dim), 0.0);
  }

  int captured = 0;
  for (const RecallSequence& seq : seqs) {
    ModelTape tape;
    Matrix hidden = model_forward(m, seq.tokens, &tape);
    (void)hidden;
    ModelGrads g = zero_model_grads(m);
    (void)model_loss_and_grad(m, seq, g);
    calib.grads.embedding = add(calib.grads.embedding, g.embedding);
    for (size_t l = 0; l < g.layers.size(); ++l) accumulate_grads(calib.grads.layers[l], g.layers[l]);
    calib.grads.lm_head = add(calib.grads.lm_head, g.lm_head);

    const int take = std::min(static_cast<int>(seq.tokens.size()), max_samples - captured);
    for (size_t l = 0; l < m.layers.size(); ++l) {
      const LayerTape& lt = tape.layers[l];
      LayerCalibration& lc = calib.layers[l];
      for (int t = 0; t < lt.x.rows; ++t)
        for (int c = 0; c < lt.x.cols; ++c)
          lc.input_col_norms[static_cast<size_t>(c)] += lt.x.at(t, c) * lt.x.at(t, c);
      for (size_t h = 0; h < lt.heads.size(); ++h) {
        const HeadTape& ht = lt.heads[h];
        const Matrix& ksrc = use_normalized ? ht.k_norm : ht.k_silu;
        const Matrix& qsrc = use_normalized ? ht.q_norm : ht.q_silu;
        HeadCalibration& hc = lc.heads[h];
        if (hc.captured_k.rows == 0) {
          hc.captured_k = Matrix(0, ksrc.cols);
          hc.captured_q = Matrix(0, qsrc.cols);
        }
        for (int t = 0; t < take; ++t) {
          hc.captured_k.data.insert(hc.captured_k.data.end(), ksrc.row(t).begin(), ksrc.row(t).end());
          hc.captured_q.data.insert(hc.captured_q.data.end(), qsrc.row(t).begin(), qsrc.row(t).end());
          ++hc.captured_k.rows;
          ++hc.captured_q.rows;
        }
      }
    }
    captured = std::min(max_samples, captured + static_cast<int>(seq.tokens.size()));
  }
  for (LayerCalibration& lc : calib.layers)
    for (double& v : lc.input_col_norms) v = std::sqrt(v);
  calib.samples = captured;
  return calib;
}

std::vector<int> select_drrqr(const HeadCalibration& stats, SelectionMode mode, int width, double f) {
  Matrix m = stacked_side(stats, mode);
  if (m.rows < m.cols)
    throw config_error("select_drrqr: need at least d_k calibration rows");
  if (width == m.cols) {
    std::vector<int> all(static_cast<size_t>(width));
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  return srrqr_select(m, width, f);
}

Matrix pca_full_rotation(const HeadCalibration& stats, SelectionMode mode, bool adversarial,
                         std::vector<double>* variances) {
  Matrix m = stacked_side(stats, mode);
  if (m.rows < m.cols) throw config_error("pca: need at least d_k calibration rows");
  SvdVectors sv = svd_with_right_vectors(m);
  const int d = m.cols;
  // Eigenvalues of the empirical covariance are sigma^2 / N, already sorted
  // descending; right singular vectors are the principal directions.
  std::vector<double> eig(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < d; ++i) {
    const double s = sv.values[static_cast<size_t>(i)];
    eig[static_cast<size_t>(i)] = s * s / static_cast<double>(m.rows);
  }
  const double thresh = eig.front() * 1e-12;
  for (double& e : eig)
    if (e < thresh) e = 0.0;

  Matrix t(d, d);
  for (int r = 0; r < d; ++r) {
    const int src = adversarial ? d - 1 - r : r;  // ascending variance first when adversarial
    for (int c = 0; c < d; ++c) t.at(r, c) = sv.right_vectors.at(c, src);
  }
  if (variances) {
    variances->assign(static_cast<size_t>(d), 0.0);
    for (int r = 0; r < d; ++r) (*variances)[static_cast<size_t>(r)] = eig[static_cast<size_t>(adversarial ? d - 1 - r : r)];
  }
  return t;
}

PcaTransform pca_transform(const HeadCalibration& stats, SelectionMode mode, int width, bool adversarial) {
  Matrix full = pca_full_rotation(stats, mode, adversarial);
  if (width < 1 || width > full.rows) throw shape_error("pca_transform: width out of range");
  PcaTransform out;
  out.adversarial = adversarial;
  out.t = Matrix(width, full.cols);
  std::copy(full.data.begin(), full.data.begin() + static_cast<size_t>(width) * full.cols, out.t.data.begin());
  return out;
}

Matrix adapt_conv_filters(const Matrix& t, const Matrix& w) {
  if (t.rows != t.cols) throw shape_error("adapt_conv_filters: transform must be square");
  if (w.rows != t.cols) throw shape_error("adapt_conv_filters: one filter row per channel required");
  Matrix gram = matmul(t, transpose(t));
  for (int i = 0; i < gram.rows; ++i) gram.at(i, i) -= 1.0;
  if (max_abs(gram) > kOrthTol) throw shape_error("adapt_conv_filters: transform is not orthogonal");

  Matrix out(w.rows, w.cols);
  for (int k = 0; k < t.rows; ++k)
    for (int j = 0; j < w.cols; ++j) {
      double acc = 0.0;
      for (int m = 0; m < t.cols; ++m) acc += t.at(k, m) * t.at(k, m) * w.at(m, j);
      out.at(k, j) = acc;
    }
  return out;
}

bool shared_conv_commute_check(const Matrix& w, const Matrix& t, const Matrix& x, double tol) {
  if (t.rows != t.cols || t.cols != x.cols || w.rows != x.cols)
    throw shape_error("shared_conv_commute_check: incompatible shapes");
  const Matrix tt = transpose(t);
  const Matrix lhs = matmul(conv1d_causal(x, w), tt);
  const Matrix rhs = conv1d_causal(matmul(x, tt), w);
  return max_abs_diff(lhs, rhs) <= tol;
}

namespace {

std::vector<int> identity_indices(int n) {
  std::vector<int> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

std::vector<int> select_head(const ToyModel& m, const ModelCalibration& calib, const PruneOptions& opt, size_t layer,
                             size_t head, int width) {
  const HeadParams& hp = m.layers[layer].heads[head];
  const int d_k = hp.w_q.cols;
  if (width == d_k) return identity_indices(d_k);
  switch (opt.strategy) {
    case PruneStrategy::rand: {
      // One stream per (layer, head) so plans are seed-reproducible.
      std::mt19937_64 rng = trial_rng(opt.seed, (static_cast<uint64_t>(layer) << 16) | head);
      return random_subset(d_k, width, rng);
    }
    case PruneStrategy::l1:
      return top_k_indices(score_l1(hp.w_q, hp.w_k, opt.mode), width);
    case PruneStrategy::swanda:
      return top_k_indices(
          score_swanda(hp.w_q, hp.w_k, calib.layers[layer].input_col_norms, opt.mode), width);
    case PruneStrategy::grad:
      return top_k_indices(score_grad(hp, calib.grads.layers[layer].heads[head], opt.mode), width);
    case PruneStrategy::drrqr:
      return select_drrqr(calib.layers[layer].heads[head], opt.mode, width, opt.f);
    case PruneStrategy::pca:
    case PruneStrategy::pca_adversarial:
      // PCA retains the leading block of the rotated basis.
      return identity_indices(width);
  }
  throw std::invalid_argument("select_head: unknown strategy");
}

void validate_head_plan(const HeadPlan& plan, int d_k) {
  if (plan.retained.empty() || static_cast<int>(plan.retained.size()) > d_k)
    throw shape_error("pruning plan: retained set size out of range");
  for (size_t i = 0; i < plan.retained.size(); ++i) {
    const int c = plan.retained[i];
    if (c < 0 || c >= d_k) throw shape_error("pruning plan: retained index out of range");
    if (i > 0 && plan.retained[i - 1] >= c) throw shape_error("pruning plan: indices must strictly increase");
  }
}

}  // namespace

PruningPlan build_plan(const ToyModel& m, const ModelCalibration& calib, const PruneOptions& opt) {
  const bool needs_calib = opt.strategy == PruneStrategy::swanda || opt.strategy == PruneStrategy::grad ||
                           opt.strategy == PruneStrategy::drrqr || opt.strategy == PruneStrategy::pca ||
                           opt.strategy == PruneStrategy::pca_adversarial;
  if (needs_calib && calib.layers.size() != m.layers.size())
    throw config_error("build_plan: calibration does not match the model");
  PruningPlan plan;
  for (size_t l = 0; l < m.layers.size(); ++l) {
    LayerPlan lp;
    const int d_k = m.layers[l].dims.key_dim;
    const int width = retained_width(d_k, opt.ratio);
    for (size_t h = 0; h < m.layers[l].heads.size(); ++h) {
      HeadPlan hp;
      hp.strategy = opt.strategy;
      hp.mode = opt.mode;
      hp.retained = select_head(m, calib, opt, l, h, width);
      validate_head_plan(hp, d_k);
      lp.heads.push_back(std::move(hp));
    }
    plan.layers.push_back(std::move(lp));
  }
  return plan;
}

LayerParams apply_plan(const LayerParams& params, const LayerPlan& plan) {
  if (plan.heads.size() != params.heads.size())
    throw shape_error("apply_plan: one head plan per head required");
  const int width = static_cast<int>(plan.heads.front().retained.size());
  for (const HeadPlan& hp : plan.heads)
    if (static_cast<int>(hp.retained.size()) != width)
      throw shape_error("apply_plan: all heads of a layer must retain the same width");

  LayerParams out;
  out.dims = params.dims;
  out.dims.key_dim = width;
  out.rms_eps = params.rms_eps;
  out.w_o = params.w_o;
  for (size_t h = 0; h < params.heads.size(); ++h) {
    const HeadPlan& hp = plan.heads[h];
    validate_head_plan(hp, params.dims.key_dim);
    const HeadParams& src = params.heads[h];
    HeadParams dst;
    dst.w_q = slice_cols(src.w_q, hp.retained);
    dst.w_k = slice_cols(src.w_k, hp.retained);
    dst.conv_q = slice_rows(src.conv_q, hp.retained);
    dst.conv_k = slice_rows(src.conv_k, hp.retained);
    dst.w_v = src.w_v;
    dst.conv_v = src.conv_v;
    dst.w_beta = src.w_beta;
    dst.w_alpha = src.w_alpha;
    out.heads.push_back(std::move(dst));
  }
  validate_layer(out);
  return out;
}

PruneResult prune_model(const ToyModel& m, const ModelCalibration& calib, const PruneOptions& opt) {
  PruneResult result;
  result.model = m;

  const int d_k = m.config.key_dim;
  const int width = retained_width(d_k, opt.ratio);
  const bool is_pca = opt.strategy == PruneStrategy::pca || opt.strategy == PruneStrategy::pca_adversarial;

  if (is_pca && width < d_k) {
    // Rotate into the principal basis and compensate the depthwise filters;
    // the retained set then becomes the leading axis-aligned block.
    for (size_t l = 0; l < result.model.layers.size(); ++l) {
      LayerParams& layer = result.model.layers[l];
      for (size_t h = 0; h < layer.heads.size(); ++h) {
        const Matrix t = pca_full_rotation(calib.layers[l].heads[h], opt.mode,
                                           opt.strategy == PruneStrategy::pca_adversarial);
        HeadParams& head = layer.heads[h];
        const Matrix tt = transpose(t);
        head.w_q = matmul(head.w_q, tt);
        head.w_k = matmul(head.w_k, tt);
        head.conv_q = adapt_conv_filters(t, head.conv_q);
        head.conv_k = adapt_conv_filters(t, head.conv_k);
      }
    }
  }

  result.plan = build_plan(m, calib, opt);
  if (width < d_k) {
    for (size_t l = 0; l < result.model.layers.size(); ++l)
      result.model.layers[l] = apply_plan(result.model.layers[l], result.plan.layers[l]);
    result.model.config.key_dim = width;
  }
  return result;
}

std::string plan_to_json(const PruningPlan& plan) {
  nlohmann::json root;
  root["layers"] = nlohmann::json::array();
  for (const LayerPlan& lp : plan.layers) {
    nlohmann::json jl;
    jl["heads"] = nlohmann::json::array();
    for (const HeadPlan& hp : lp.heads) {
      nlohmann::json jh;
      jh["retained"] = hp.retained;
      jh["strategy"] = strategy_name(hp.strategy);
      jh["mode"] = mode_name(hp.mode);
      jl["heads"].push_back(std::move(jh));
    }
    root["layers"].push_back(std::move(jl));
  }
  return root.dump(2) + "\n";
}

PruningPlan plan_from_json(const std::string& text) {
  nlohmann::json root = nlohmann::json::parse(text);
  PruningPlan plan;
  for (const auto& jl : root.at("layers")) {
    LayerPlan lp;
    for (const auto& jh : jl.at("heads")) {
      HeadPlan hp;
      hp.retained = jh.at("retained").get<std::vector<int>>();
      hp.strategy = strategy_from_name(jh.at("strategy").get<std::string>());
      hp.mode = mode_from_name(jh.at("mode").get<std::string>());
      lp.heads.push_back(std::move(hp));
    }
    plan.layers.push_back(std::move(lp));
  }
  return plan;
}

}  // namespace dp
