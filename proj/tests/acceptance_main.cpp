// Acceptance gate: runs every shipping criterion at its stated trial budget
// and tolerance, prints one verdict line per criterion, and exits nonzero if
// any blocking criterion fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "deltaprune/grad.hpp"
#include "deltaprune/io.hpp"
#include "deltaprune/linalg.hpp"
#include "deltaprune/matrix.hpp"
#include "deltaprune/mixers.hpp"
#include "deltaprune/pruning.hpp"
#include "deltaprune/rank.hpp"
#include "deltaprune/rng.hpp"
#include "deltaprune/tasks.hpp"
#include "deltaprune/verify.hpp"

using namespace dp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(const char* pattern, ...) {
  va_list args;
  va_start(args, pattern);
  char buf[512];
  std::vsnprintf(buf, sizeof buf, pattern, args);
  va_end(args);
  return std::string(buf);
}

Outcome from_check(const CheckResult& c, double max_seconds = -1.0) {
  Outcome o;
  o.pass = c.passed && (max_seconds < 0.0 || c.seconds < max_seconds);
  o.detail = fmt("%lld trials, %lld violations, worst slack %.2e, %.2fs", c.trials, c.violations, c.worst_slack,
                 c.seconds);
  if (max_seconds > 0.0) o.detail += fmt(", budget %.0fs", max_seconds);
  return o;
}

// ---------------------------------------------------------------------------
// 1-7, 11: deterministic property suites over seeded random draws.

Outcome criterion_noise_amplification(const VerifyBudget& b) { return from_check(verify_theorem_snr(b), 10.0); }
Outcome criterion_kappa_bounds(const VerifyBudget& b) { return from_check(verify_kappa_bounds(b)); }

Outcome criterion_expected_bracket(const VerifyBudget& b) {
  Outcome o = from_check(verify_corollary_expected(b));
  // Closed-form directional-mean constant against hand-computed gamma values.
  const double e1 = std::fabs(mu_constant(1) - 0.7978845608028654);
  const double e2 = std::fabs(mu_constant(2) - 1.2533141373155003);
  const bool mu_ok = e1 <= 1e-10 && e2 <= 1e-10;
  o.pass = o.pass && mu_ok;
  o.detail += fmt("; mu errors %.1e / %.1e", e1, e2);
  return o;
}

Outcome criterion_sandwich(const VerifyBudget& b) { return from_check(verify_sandwich(b)); }
Outcome criterion_rank_bound(const VerifyBudget& b) { return from_check(verify_rank_bound(b)); }
Outcome criterion_invariance(const VerifyBudget& b) { return from_check(verify_mixer_invariance(b)); }
Outcome criterion_conv_commutation(const VerifyBudget& b) { return from_check(verify_conv_commutation(b)); }
Outcome criterion_pca_monotonicity(const VerifyBudget& b) { return from_check(verify_pca_monotonicity(b)); }

// ---------------------------------------------------------------------------
// 8: strong rank-revealing QR contract.

double sigma_min_of(const Matrix& m) {
  const std::vector<double> sv = svd_values(m);
  return sv.back();
}

Outcome criterion_srrqr() {
  auto rng = make_rng(88);
  long long trials = 0;
  long long violations = 0;
  double worst = std::numeric_limits<double>::infinity();

  // Contract on 50 random 8x12 problems at k=4, f=2.
  const int k = 4, n = 12;
  const double f = 2.0;
  const double factor = std::sqrt(1.0 + f * f * k * (n - k));
  for (int t = 0; t < 50; ++t) {
    Matrix m = random_matrix(rng, 8, n);
    SrrqrTrace trace;
    const std::vector<int> sel = srrqr_select(m, k, f, &trace);
    const double sk = svd_values(m)[static_cast<size_t>(k - 1)];
    const double smin = sigma_min_of(slice_cols(m, sel));
    ++trials;
    const double slack = smin - sk / factor + 1e-12;
    worst = std::min(worst, slack);
    if (slack < 0.0) ++violations;
    if (trace.final_rho_max > f * (1.0 + 1e-12)) ++violations;
    for (size_t i = 1; i < trace.abs_det_history.size(); ++i)
      if (trace.abs_det_history[i] < trace.abs_det_history[i - 1] * f * (1.0 - 1e-9)) ++violations;
  }

  // Brute force: the selected subset competes with the best of all subsets.
  std::function<void(int, int, std::vector<int>&, const Matrix&, double&)> enumerate =
      [&](int start, int remaining, std::vector<int>& pick, const Matrix& m, double& best) {
        if (remaining == 0) {
          best = std::max(best, sigma_min_of(slice_cols(m, pick)));
          return;
        }
        for (int c = start; c <= m.cols - remaining; ++c) {
          pick.push_back(c);
          enumerate(c + 1, remaining - 1, pick, m, best);
          pick.pop_back();
        }
      };
  for (int cols = 3; cols <= 6; ++cols) {
    for (int kk = 1; kk <= std::min(3, cols - 1); ++kk) {
      const double ff = std::sqrt(1.0 + f * f * kk * (cols - kk));
      for (int rep = 0; rep < 3; ++rep) {
        Matrix m = random_matrix(rng, cols + 2, cols);
        const std::vector<int> sel = srrqr_select(m, kk, f);
        double best = 0.0;
        std::vector<int> pick;
        enumerate(0, kk, pick, m, best);
        ++trials;
        const double slack = sigma_min_of(slice_cols(m, sel)) - best / ff + 1e-12;
        worst = std::min(worst, slack);
        if (slack < 0.0) ++violations;
      }
    }
  }

  Outcome o;
  o.pass = violations == 0;
  o.detail = fmt("%lld problems, %lld violations, worst slack %.2e", trials, violations, worst);
  return o;
}

// ---------------------------------------------------------------------------
// 9: analytic gradients vs central finite differences; query-map conditioning.

LayerParams gradcheck_layer(uint64_t seed, MixerVariant variant) {
  auto rng = make_rng(seed);
  LayerParams p;
  p.dims = HeadDims{4, 3, 2, 1, 2};
  HeadParams h;
  h.w_q = random_matrix(rng, 4, 3, 0.7);
  h.w_k = random_matrix(rng, 4, 3, 0.7);
  h.w_v = random_matrix(rng, 4, 2, 0.7);
  h.w_beta = random_matrix(rng, 4, 1, 0.7);
  if (variant == MixerVariant::gated) h.w_alpha = random_matrix(rng, 4, 1, 0.7);
  h.conv_q = random_matrix(rng, 3, 2, 0.7);
  h.conv_k = random_matrix(rng, 3, 2, 0.7);
  h.conv_v = random_matrix(rng, 2, 2, 0.7);
  p.heads.push_back(std::move(h));
  p.w_o = random_matrix(rng, 2, 4, 0.7);
  return p;
}

std::vector<Matrix*> layer_tensors(LayerParams& p) {
  std::vector<Matrix*> out;
  for (HeadParams& h : p.heads) {
    out.push_back(&h.w_q);
    out.push_back(&h.w_k);
    out.push_back(&h.w_v);
    out.push_back(&h.w_beta);
    if (!h.w_alpha.data.empty()) out.push_back(&h.w_alpha);
    out.push_back(&h.conv_q);
    out.push_back(&h.conv_k);
    out.push_back(&h.conv_v);
  }
  out.push_back(&p.w_o);
  return out;
}

std::vector<const Matrix*> grad_tensors(const ParamGrads& g, bool gated) {
  std::vector<const Matrix*> out;
  for (const HeadGrads& h : g.heads) {
    out.push_back(&h.w_q);
    out.push_back(&h.w_k);
    out.push_back(&h.w_v);
    out.push_back(&h.w_beta);
    if (gated) out.push_back(&h.w_alpha);
    out.push_back(&h.conv_q);
    out.push_back(&h.conv_k);
    out.push_back(&h.conv_v);
  }
  out.push_back(&g.w_o);
  return out;
}

double gradcheck_worst(uint64_t seed, MixerVariant variant) {
  LayerParams p = gradcheck_layer(seed, variant);
  auto rng = make_rng(seed ^ 0x517eull);
  Matrix x = random_matrix(rng, 4, 4, 0.8);
  LossSpec loss;
  loss.kind = LossKind::squared_error;
  loss.targets = random_matrix(rng, 4, 4, 0.8);

  const BackwardResult analytic = layer_backward(p, x, variant, loss);
  const bool gated = variant == MixerVariant::gated;
  std::vector<Matrix*> params = layer_tensors(p);
  std::vector<const Matrix*> grads = grad_tensors(analytic.grads, gated);

  const double h = 1e-5;
  double worst = 0.0;
  auto rel = [](double a, double b) { return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1.0}); };
  auto loss_at = [&]() { return eval_loss(layer_forward(p, x, variant).y, loss).loss; };

  for (size_t ti = 0; ti < params.size(); ++ti) {
    for (double& w : params[ti]->data) {
      const double saved = w;
      w = saved + h;
      const double up = loss_at();
      w = saved - h;
      const double down = loss_at();
      w = saved;
      const size_t idx = static_cast<size_t>(&w - params[ti]->data.data());
      worst = std::max(worst, rel((up - down) / (2.0 * h), grads[ti]->data[idx]));
    }
  }
  for (size_t i = 0; i < x.data.size(); ++i) {
    const double saved = x.data[i];
    x.data[i] = saved + h;
    const double up = loss_at();
    x.data[i] = saved - h;
    const double down = loss_at();
    x.data[i] = saved;
    worst = std::max(worst, rel((up - down) / (2.0 * h), analytic.dx.data[i]));
  }
  return worst;
}

Outcome criterion_gradients() {
  double worst = 0.0;
  for (uint64_t seed = 0; seed < 10; ++seed)
    for (MixerVariant v : {MixerVariant::linear, MixerVariant::delta, MixerVariant::gated})
      worst = std::max(worst, gradcheck_worst(1000 + seed * 13, v));

  // Conditioning of the query-projection Jacobian equals that of the state
  // itself (the identity holds for square states).
  auto rng = make_rng(77);
  double worst_kappa = 0.0;
  for (int t = 0; t < 10; ++t) {
    const int d = 2 + t % 4;
    Matrix s = random_matrix(rng, d, d);
    std::vector<double> x(static_cast<size_t>(2 + t % 3));
    for (double& v : x) v = randn(rng);
    const double kj = query_jacobian_condition(s, x);
    const double ks = condition_number(s);
    worst_kappa = std::max(worst_kappa, std::fabs(kj - ks) / ks);
  }

  Outcome o;
  o.pass = worst <= 1e-5 && worst_kappa <= 1e-8;
  o.detail = fmt("finite-difference worst rel err %.2e (tol 1e-5), kappa identity worst %.2e (tol 1e-8)", worst,
                 worst_kappa);
  return o;
}

// ---------------------------------------------------------------------------
// 10: rotation-compensated depthwise filters.

Matrix impulse_design(int channels, int conv_len) {
  const int T = conv_len * (channels + 2);
  Matrix x(T, channels);
  for (int c = 0; c < channels; ++c) x.at(conv_len * (c + 1), c) = 1.0;
  return x;
}

Outcome criterion_conv_adaptation() {
  auto rng = make_rng(101);

  // Per-lag algebraic identity against the explicit congruence diagonal.
  double worst_identity = 0.0;
  for (int t = 0; t < 50; ++t) {
    const int nch = 3 + t % 4;
    const int lags = 2 + t % 3;
    Matrix w = random_matrix(rng, nch, lags);
    Matrix tr = random_orthogonal(rng, nch);
    Matrix a = adapt_conv_filters(tr, w);
    for (int lag = 0; lag < lags; ++lag) {
      Matrix d(nch, nch);
      for (int c = 0; c < nch; ++c) d.at(c, c) = w.at(c, lag);
      const Matrix congruence = matmul(matmul(tr, d), transpose(tr));
      for (int c = 0; c < nch; ++c)
        worst_identity = std::max(worst_identity, std::fabs(a.at(c, lag) - congruence.at(c, c)));
    }
  }

  // Least-squares optimality on decorrelated data: a dense scan over each
  // diagonal filter entry, followed by one parabola fit, must land on the
  // adapted value.
  double worst_ls = 0.0;
  for (const auto& [channels, conv_len] : std::vector<std::pair<int, int>>{{3, 2}, {4, 3}}) {
    Matrix w = random_matrix(rng, channels, conv_len);
    Matrix tr = random_orthogonal(rng, channels);
    Matrix x = impulse_design(channels, conv_len);
    const Matrix target = matmul(conv1d_causal(x, w), transpose(tr));
    const Matrix x_rot = matmul(x, transpose(tr));
    Matrix adapted = adapt_conv_filters(tr, w);

    auto objective = [&](const Matrix& cand) {
      const Matrix diff = sub(conv1d_causal(x_rot, cand), target);
      double acc = 0.0;
      for (double v : diff.data) acc += v * v;
      return acc;
    };
    for (int c = 0; c < channels; ++c) {
      for (int j = 0; j < conv_len; ++j) {
        Matrix cand = adapted;
        const double center = adapted.at(c, j);
        double best_v = center, best_obj = std::numeric_limits<double>::infinity();
        for (int g = -200; g <= 200; ++g) {
          const double v = center + 0.01 * g;
          cand.at(c, j) = v;
          const double obj = objective(cand);
          if (obj < best_obj) {
            best_obj = obj;
            best_v = v;
          }
        }
        cand.at(c, j) = best_v - 0.01;
        const double f_left = objective(cand);
        cand.at(c, j) = best_v + 0.01;
        const double f_right = objective(cand);
        const double denom = f_left - 2.0 * best_obj + f_right;
        const double refined = denom > 0.0 ? best_v + 0.005 * (f_left - f_right) / denom : best_v;
        worst_ls = std::max(worst_ls, std::fabs(refined - adapted.at(c, j)));
      }
    }
  }

  Outcome o;
  o.pass = worst_identity <= 1e-12 && worst_ls <= 1e-6;
  o.detail = fmt("identity worst %.2e (tol 1e-12), grid-search worst %.2e (tol 1e-6)", worst_identity, worst_ls);
  return o;
}

// ---------------------------------------------------------------------------
// 12: end-to-end desk proxy over ten pruning seeds.

double sign_test_p(int wins, int decided) {
  // One-sided: P[Bin(decided, 1/2) >= wins].
  double p = 0.0;
  for (int i = wins; i <= decided; ++i) {
    const double log_comb = std::lgamma(decided + 1.0) - std::lgamma(i + 1.0) - std::lgamma(decided - i + 1.0);
    p += std::exp(log_comb - decided * std::log(2.0));
  }
  return std::min(p, 1.0);
}

Outcome criterion_end_to_end() {
  const auto start = std::chrono::steady_clock::now();
  ToyModel model = init_toy_model(ToyConfig{}, 1);
  TrainMetrics metrics = train_toy(model, TrainConfig{});
  const double trained_acc = metrics.final_accuracy;

  const RecallSpec spec{model.config.vocab, model.config.num_pairs, model.config.seq_len};
  const std::vector<RecallSequence> eval_set = gen_recall(spec, 256, splitmix64(777001));

  double sum_sel = 0.0, sum_rand = 0.0;
  int wins = 0, losses = 0, ties = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    // Normalized capture: selection statistics are the same l2-normalized
    // key/query rows the recurrence consumes, so column conditioning of the
    // captured matrix is the quantity the rank-revealing selection improves.
    const ModelCalibration calib =
        collect_calibration(model, gen_recall(spec, 32, splitmix64(0xca11b ^ seed)), 512, /*use_normalized=*/true);

    PruneOptions sel_opt;
    sel_opt.strategy = PruneStrategy::drrqr;
    sel_opt.ratio = 0.5;
    const double acc_sel = eval_recall(prune_model(model, calib, sel_opt).model, eval_set);

    PruneOptions rand_opt;
    rand_opt.strategy = PruneStrategy::rand;
    rand_opt.ratio = 0.5;
    rand_opt.seed = seed;
    const double acc_rand = eval_recall(prune_model(model, calib, rand_opt).model, eval_set);

    sum_sel += acc_sel;
    sum_rand += acc_rand;
    if (acc_sel > acc_rand)
      ++wins;
    else if (acc_sel < acc_rand)
      ++losses;
    else
      ++ties;
  }
  const double mean_sel = sum_sel / 10.0, mean_rand = sum_rand / 10.0;
  const int decided = wins + losses;
  const double p = decided > 0 ? sign_test_p(wins, decided) : 1.0;
  const double elapsed = seconds_since(start);

  Outcome o;
  o.pass = trained_acc >= 0.95 && mean_sel >= mean_rand && elapsed < 900.0;
  o.detail = fmt(
      "trained %.4f (need >= 0.95); at 50%% compression rank-revealing (joint, normalized statistics) "
      "mean %.4f vs random mean %.4f, wins %d / losses %d / ties %d, one-sided sign test p = %.3f, "
      "%.0fs of 900s budget",
      trained_acc, mean_sel, mean_rand, wins, losses, ties, p, elapsed);
  return o;
}

// ---------------------------------------------------------------------------
// 13: instruction accounting and measured speedup at half key width.

long long counted_flops(const ToyModel& m, const std::vector<int>& tokens) {
  Matrix x(static_cast<int>(tokens.size()), m.config.model_dim);
  for (size_t t = 0; t < tokens.size(); ++t)
    std::copy(m.embedding.row(tokens[t]).begin(), m.embedding.row(tokens[t]).end(), x.row(static_cast<int>(t)).begin());
  long long flops = 0;
  for (const LayerParams& layer : m.layers) {
    const ForwardResult fr = layer_forward(layer, x, m.config.variant);
    flops += fr.mixer_flops;
    x = add(x, fr.y);
  }
  return flops;
}

Outcome criterion_flops() {
  auto rng = make_rng(131);
  const int T = 64;
  bool exact = true;
  for (MixerVariant v : {MixerVariant::linear, MixerVariant::delta, MixerVariant::gated}) {
    for (int key_dim : {16, 8}) {  // full width and half width
      ToyConfig cfg;
      cfg.variant = v;
      cfg.key_dim = key_dim;
      cfg.seq_len = T;
      ToyModel m = init_toy_model(cfg, 5);
      std::vector<int> tokens(T);
      for (int& tok : tokens) tok = static_cast<int>(randu(rng, 0.0, cfg.vocab));
      const long long counted = counted_flops(m, tokens);
      const long long closed =
          static_cast<long long>(cfg.num_layers) * cfg.num_heads * T * mixer_flops_per_step(v, key_dim, cfg.value_dim);
      if (counted != closed) exact = false;
    }
  }

  // Wall-clock comparison, reported but non-blocking.
  ToyConfig full_cfg;
  ToyConfig half_cfg;
  half_cfg.key_dim = 8;
  std::vector<int> tokens(512);
  for (int& tok : tokens) tok = static_cast<int>(randu(rng, 0.0, full_cfg.vocab));
  auto median_time = [&](const ToyConfig& cfg) {
    ToyModel m = init_toy_model(cfg, 5);
    for (int i = 0; i < 3; ++i) (void)model_forward(m, tokens);
    std::vector<double> times;
    for (int i = 0; i < 5; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      (void)model_forward(m, tokens);
      times.push_back(seconds_since(t0));
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
  };
  const double speedup = median_time(full_cfg) / median_time(half_cfg);

  Outcome o;
  o.pass = exact;
  o.detail = fmt("counted == closed form at full and half width for all variants: %s; "
                 "wall-clock speedup at half width %.2fx (target 1.15x, reference 1.33x, non-blocking)",
                 exact ? "yes" : "NO", speedup);
  return o;
}

// ---------------------------------------------------------------------------
// 14: persistence and command-line determinism.

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in.good()) return {};
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

bool dirs_identical(const fs::path& a, const fs::path& b) {
  std::vector<std::string> names_a, names_b;
  for (const auto& e : fs::directory_iterator(a)) names_a.push_back(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(b)) names_b.push_back(e.path().filename().string());
  std::sort(names_a.begin(), names_a.end());
  std::sort(names_b.begin(), names_b.end());
  if (names_a != names_b) return false;
  for (const std::string& n : names_a)
    if (slurp(a / n) != slurp(b / n)) return false;
  return true;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DELTAPRUNE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

bool models_bitwise_equal(const ToyModel& a, const ToyModel& b) {
  if (a.embedding.data != b.embedding.data || a.lm_head.data != b.lm_head.data) return false;
  if (a.layers.size() != b.layers.size()) return false;
  for (size_t l = 0; l < a.layers.size(); ++l) {
    if (a.layers[l].w_o.data != b.layers[l].w_o.data) return false;
    for (size_t h = 0; h < a.layers[l].heads.size(); ++h) {
      const HeadParams& ha = a.layers[l].heads[h];
      const HeadParams& hb = b.layers[l].heads[h];
      if (ha.w_q.data != hb.w_q.data || ha.w_k.data != hb.w_k.data || ha.w_v.data != hb.w_v.data ||
          ha.w_beta.data != hb.w_beta.data || ha.w_alpha.data != hb.w_alpha.data ||
          ha.conv_q.data != hb.conv_q.data || ha.conv_k.data != hb.conv_k.data || ha.conv_v.data != hb.conv_v.data)
        return false;
    }
  }
  return true;
}

Outcome criterion_infrastructure() {
  const fs::path root = fs::temp_directory_path() / "deltaprune_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);

  // Checkpoint round-trip, bitwise, on the variant with the most tensors.
  ToyConfig cfg;
  cfg.vocab = 16;
  cfg.model_dim = 16;
  cfg.num_layers = 1;
  cfg.num_heads = 2;
  cfg.key_dim = 8;
  cfg.value_dim = 8;
  cfg.conv_len = 2;
  cfg.seq_len = 9;
  cfg.num_pairs = 2;
  cfg.variant = MixerVariant::gated;
  ToyModel m = init_toy_model(cfg, 21);
  save_checkpoint(m, root / "ckpt");
  const bool roundtrip = models_bitwise_equal(m, load_checkpoint(root / "ckpt"));

  // Seed-determinism of a full CLI training run, byte for byte.
  write_text_file(root / "run.json", R"({
  "model": {"vocab": 16, "modelDim": 16, "numLayers": 1, "numHeads": 1, "keyDim": 8,
            "valueDim": 8, "convLen": 2, "seqLen": 5, "numPairs": 1, "variant": "delta"},
  "train": {"steps": 300, "batch": 8, "lr": 0.01, "evalEvery": 100, "evalSequences": 64,
            "targetAccuracy": 0.995, "seed": 3},
  "spectrum": {"skip": 2}
}
)");
  const std::string cfg_arg = " --config " + (root / "run.json").string();
  const bool train_ok = run_cli("train" + cfg_arg + " --out " + (root / "a").string()) == 0 &&
                        run_cli("train" + cfg_arg + " --out " + (root / "b").string()) == 0;
  const bool deterministic = train_ok &&
                             slurp(root / "a" / "metrics.json") == slurp(root / "b" / "metrics.json") &&
                             dirs_identical(root / "a" / "checkpoint", root / "b" / "checkpoint");

  // Property-check subcommand exits clean at its default budget.
  const bool verify_ok = run_cli("verify --out " + (root / "v").string()) == 0;
  bool report_ok = false;
  if (verify_ok) {
    const nlohmann::json report = nlohmann::json::parse(read_text_file(root / "v" / "verify_report.json"));
    report_ok = report.at("allPassed").get<bool>();
  }

  Outcome o;
  o.pass = roundtrip && deterministic && verify_ok && report_ok;
  o.detail = fmt("checkpoint round-trip bitwise: %s; CLI train seed-deterministic: %s; verify exit 0: %s",
                 roundtrip ? "yes" : "NO", deterministic ? "yes" : "NO", (verify_ok && report_ok) ? "yes" : "NO");
  return o;
}

}  // namespace

int main() {
  const VerifyBudget budget;  // shipping budgets: 1000 draws x {4,8,16}, etc.
  struct Entry {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Entry> criteria = {
      {"noise-amplification-bounds", [&] { return criterion_noise_amplification(budget); }},
      {"condition-number-bounds", [&] { return criterion_kappa_bounds(budget); }},
      {"expected-error-bracket", [&] { return criterion_expected_bracket(budget); }},
      {"utilization-sandwich", [&] { return criterion_sandwich(budget); }},
      {"state-rank-bound", [&] { return criterion_rank_bound(budget); }},
      {"orthogonal-invariance", [&] { return criterion_invariance(budget); }},
      {"conv-slice-commutation", [&] { return criterion_conv_commutation(budget); }},
      {"srrqr-contract", [] { return criterion_srrqr(); }},
      {"gradient-engine", [] { return criterion_gradients(); }},
      {"conv-adaptation", [] { return criterion_conv_adaptation(); }},
      {"pca-monotonicity", [&] { return criterion_pca_monotonicity(budget); }},
      {"end-to-end-pruning-proxy", [] { return criterion_end_to_end(); }},
      {"flop-accounting", [] { return criterion_flops(); }},
      {"infrastructure", [] { return criterion_infrastructure(); }},
  };

  int failures = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    if (!o.pass) ++failures;
    std::printf("[%s] %02zu %s (%s)\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%s: %d of %zu criteria failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
