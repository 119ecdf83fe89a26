#include "deltaprune/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "deltaprune/linalg.hpp"
#include "deltaprune/mixers.hpp"
#include "deltaprune/pruning.hpp"
#include "deltaprune/rank.hpp"
#include "deltaprune/rng.hpp"

namespace dp {

namespace {

constexpr double kGammaReject = 1e-3;

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

void record(CheckResult& c, double slack) {
  if (c.trials == 0)
    c.worst_slack = slack;
  else
    c.worst_slack = std::min(c.worst_slack, slack);
  ++c.trials;
  if (slack < 0.0) ++c.violations;
}

void finish(CheckResult& c, const Stopwatch& sw) {
  c.passed = c.violations == 0;
  c.seconds = sw.seconds();
}

std::vector<double> randn_vec(std::mt19937_64& rng, int d) {
  std::vector<double> v(static_cast<size_t>(d));
  for (double& x : v) x = randn(rng);
  return v;
}

// Uniform draw from (0, 1]: gates of the recurrences exclude exact zero.
double rand_gate(std::mt19937_64& rng) { return 1.0 - randu(rng, 0.0, 1.0); }

// One accepted (S, q*, n) draw: rejects near-orthogonal queries and
// numerically zero readouts, matching the measurement's own guards.
struct SnrDraw {
  Matrix s;
  Amplification amp;
  double er = 0.0;
  double kappa = 0.0;
};
SnrDraw snr_draw(std::mt19937_64& rng, int d) {
  for (;;) {
    Matrix s = random_matrix(rng, d, d);
    std::vector<double> q = randn_vec(rng, d);
    std::vector<double> n = randn_vec(rng, d);
    try {
      Amplification amp = amplification_ratio(s, q, n);
      if (amp.gamma < kGammaReject) continue;
      const double kappa = condition_number(s);
      if (!std::isfinite(kappa)) continue;
      const double er = effective_rank(s);
      return SnrDraw{std::move(s), amp, er, kappa};
    } catch (const degenerate_input_error&) {
      continue;
    }
  }
}

uint64_t check_seed(const VerifyBudget& b, uint64_t tag) { return splitmix64(b.seed) ^ tag; }

}  // namespace

CheckResult verify_theorem_snr(const VerifyBudget& b) {
  Stopwatch sw;
  CheckResult c;
  c.name = "theorem-snr";
  const bool corrupt = b.sabotage == c.name;
  uint64_t counter = 0;
  for (int d : b.snr_dims) {
    for (long long i = 0; i < b.snr_trials; ++i) {
      std::mt19937_64 rng = trial_rng(check_seed(b, 0xA1), counter++);
      SnrDraw draw = snr_draw(rng, d);
      // Corrupted bound (self-test hook): shrink er a hundredfold so both
      // sides of the sandwich fail on ordinary draws.
      const double er = corrupt ? draw.er / 100.0 : draw.er;
      const double lower = draw.amp.delta / std::sqrt(er);
      const double upper = std::sqrt(er) / draw.amp.gamma;
      record(c, std::min(draw.amp.ratio - lower, upper - draw.amp.ratio));
    }
  }
  finish(c, sw);
  return c;
}

CheckResult verify_kappa_bounds(const VerifyBudget& b) {
  Stopwatch sw;
  CheckResult c;
  c.name = "kappa-bounds";
  uint64_t counter = 0;
  for (int d : b.snr_dims) {
    for (long long i = 0; i < b.snr_trials; ++i) {
      // Same tag and counter as theorem-snr: identical draws by construction.
      std::mt19937_64 rng = trial_rng(check_seed(b, 0xA1), counter++);
      SnrDraw draw = snr_draw(rng, d);
      record(c, std::min(draw.amp.ratio - 1.0 / draw.kappa, draw.kappa - draw.amp.ratio));
    }
  }
  finish(c, sw);
  return c;
}

CheckResult verify_corollary_expected(const VerifyBudget& b) {
  Stopwatch sw;
  CheckResult c;
  c.name = "expected-noise-bracket";
  const int d = b.corollary_dim;
  const double xi = b.corollary_xi;
  const double mu = mu_constant(d);
  for (int s_idx = 0; s_idx < b.corollary_states; ++s_idx) {
    std::mt19937_64 rng = trial_rng(check_seed(b, 0xC3), static_cast<uint64_t>(s_idx));
    // Well-conditioned state by construction: singular values in [0.5, 2].
    Matrix u = random_orthogonal(rng, d);
    Matrix v = random_orthogonal(rng, d);
    std::vector<double> sigma(static_cast<size_t>(d));
    for (double& x : sigma) x = randu(rng, 0.5, 2.0);
    std::sort(sigma.begin(), sigma.end(), std::greater<>());
    Matrix s(d, d);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) {
        double acc = 0.0;
        for (int k = 0; k < d; ++k) acc += u.at(i, k) * sigma[static_cast<size_t>(k)] * v.at(j, k);
        s.at(i, j) = acc;
      }

    // Unit query, rejecting near-orthogonality to the top direction.
    std::vector<double> q;
    Amplification amp;
    for (;;) {
      q = randn_vec(rng, d);
      const double nq = norm2(q);
      for (double& x : q) x /= nq;
      std::vector<double> probe = randn_vec(rng, d);
      amp = amplification_ratio(s, q, probe);
      if (amp.gamma >= kGammaReject) break;
    }
    const std::vector<double> sq = matvec(s, q);
    const double nsq = norm2(sq);

    double sum = 0.0, sum_sq = 0.0;
    for (int draw = 0; draw < b.corollary_draws; ++draw) {
      std::vector<double> n = randn_vec(rng, d);
      for (double& x : n) x *= xi;
      const double rel = norm2(matvec(s, n)) / nsq;
      sum += rel;
      sum_sq += rel * rel;
    }
    const double mean = sum / b.corollary_draws;
    const double var = std::max(0.0, sum_sq / b.corollary_draws - mean * mean);
    const double se = std::sqrt(var / b.corollary_draws);

    const double er = effective_rank(s);
    const double lower = std::sqrt(2.0 / (M_PI * er)) * xi;
    const double upper = std::sqrt(er) / amp.gamma * xi * mu;
    record(c, std::min(mean - (lower - 3.0 * se), (upper + 3.0 * se) - mean));
  }
  std::ostringstream note;
  note.precision(12);
  note << "mu(" << d << ")=" << mu;
  c.note = note.str();
  finish(c, sw);
  return c;
}

CheckResult verify_sandwich(const VerifyBudget& b) {
  Stopwatch sw;
  CheckResult c;
  c.name = "rank-sandwich";
  const int n = 12, d_k = 6, d_v = 5;
  for (int i = 0; i < b.sandwich_trials; ++i) {
    std::mt19937_64 rng = trial_rng(check_seed(b, 0xD4), static_cast<uint64_t>(i));
    for (;;) {
      Matrix k = random_matrix(rng, n, d_k);
      Matrix v = random_matrix(rng, n, d_v);
      const double kappa = condition_number(k);
      if (!std::isfinite(kappa)) continue;  // rank-deficient key draw
      QrcpResult qr = qrcp(k);
      Matrix v_par = matmul(qr.q, matmul(transpose(qr.q), v));
      if (frobenius_norm(v_par) < 1e-12) continue;  // values orthogonal to key span
      Matrix s = matmul(transpose(v), k);
      if (frobenius_norm(s) < 1e-12) continue;
      const double nu = effective_rank(v_par);
      record(c, effective_rank(s) - nu / (kappa * kappa));
      break;
    }
  }
  finish(c, sw);
  return c;
}

CheckResult verify_rank_bound(const VerifyBudget& b) {
  Stopwatch sw;
  CheckResult c;
  c.name = "state-rank-bound";
  const int d = 6, T = 10;
  for (int i = 0; i < b.rank_bound_trials; ++i) {
    std::mt19937_64 rng = trial_rng(check_seed(b, 0xE5), static_cast<uint64_t>(i));
    Matrix k = random_matrix(rng, T, d);
    Matrix v = random_matrix(rng, T, d);
    std::vector<double> beta(T), alpha(T);
    for (int t = 0; t < T; ++t) {
      beta[static_cast<size_t>(t)] = rand_gate(rng);
      alpha[static_cast<size_t>(t)] = rand_gate(rng);
    }
    RecurrenceResult rr = gated_delta_recurrent(random_matrix(rng, T, d), k, v, beta, alpha, true);
    for (int t = 1; t <= T; ++t) {
      std::vector<int> prefix(static_cast<size_t>(t));
      std::iota(prefix.begin(), prefix.end(), 0);
      const int rank_k = numeric_rank(slice_rows(k, prefix));
      const int rank_v = numeric_rank(slice_rows(v, prefix));
      const int bound = std::min(rank_k, rank_v);
      const int rank_s = numeric_rank(rr.states[static_cast<size_t>(t - 1)]);
      record(c, static_cast<double>(std::min(bound - rank_s, t - bound)));
    }
  }
  finish(c, sw);
  return c;
}

CheckResult verify_er_properties(const VerifyBudget& b) {
  Stopwatch sw;
  CheckResult c;
  c.name = "er-properties";
  for (int i = 0; i < b.er_trials; ++i) {
    std::mt19937_64 rng = trial_rng(check_seed(b, 0xF6), static_cast<uint64_t>(i));
    const int m = 2 + static_cast<int>(randu(rng, 0.0, 6.0));
    const int n = 2 + static_cast<int>(randu(rng, 0.0, 6.0));
    Matrix a = random_matrix(rng, m, n);
    const double er = effective_rank(a);
    double slack = std::numeric_limits<double>::infinity();

    // Transpose invariance.
    slack = std::min(slack, 1e-9 - std::abs(er - effective_rank(transpose(a))));
    // Orthogonal sandwich + nonzero scaling invariance.
    {
      Matrix u = random_orthogonal(rng, m);
      Matrix v = random_orthogonal(rng, n);
      const double scale_c = randu(rng, 0.5, 2.0) * (randu(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0);
      Matrix t = scale(matmul(u, matmul(a, transpose(v))), scale_c);
      slack = std::min(slack, 1e-9 - std::abs(er - effective_rank(t)));
    }
    // Range: 1 <= er <= rank <= min(m, n), and kappa^2 >= rank / er.
    const int rank = numeric_rank(a);
    slack = std::min(slack, er - 1.0);
    slack = std::min(slack, static_cast<double>(rank) - er + 1e-9);
    slack = std::min(slack, static_cast<double>(std::min(m, n) - rank));
    const double kappa = condition_number(a);
    if (std::isfinite(kappa)) slack = std::min(slack, kappa * kappa - static_cast<double>(rank) / er + 1e-9 * kappa * kappa);
    // Equal nonzero singular values attain er == rank.
    {
      const int r = 1 + static_cast<int>(randu(rng, 0.0, static_cast<double>(std::min(m, n))));
      Matrix u = random_orthogonal(rng, m);
      Matrix v = random_orthogonal(rng, n);
      Matrix flat(m, n);
      for (int ii = 0; ii < m; ++ii)
        for (int jj = 0; jj < n; ++jj) {
          double acc = 0.0;
          for (int kk = 0; kk < std::min(r, std::min(m, n)); ++kk) acc += u.at(ii, kk) * v.at(jj, kk);
          flat.at(ii, jj) = acc;
        }
      slack = std::min(slack, 1e-9 - std::abs(effective_rank(flat) - static_cast<double>(std::min(r, std::min(m, n)))));
    }
    record(c, slack);
  }
  finish(c, sw);
  return c;
}

CheckResult verify_stability(const VerifyBudget& b) {
  Stopwatch sw;
  CheckResult c;
  c.name = "stability-eigenvalues";
  const int d = 8;
  for (int i = 0; i < b.stability_trials; ++i) {
    std::mt19937_64 rng = trial_rng(check_seed(b, 0xB7), static_cast<uint64_t>(i));
    std::vector<double> k = randn_vec(rng, d);
    const double nk = norm2(k);
    for (double& x : k) x /= nk;
    // Every trial also exercises the full-erase endpoint beta = 1.
    for (const double beta : {rand_gate(rng), 1.0}) {
      Matrix m = Matrix::identity(d);
      for (int r = 0; r < d; ++r)
        for (int cc = 0; cc < d; ++cc) m.at(r, cc) -= beta * k[static_cast<size_t>(r)] * k[static_cast<size_t>(cc)];
      std::vector<double> sv = svd_values(m);
      const double err_top = d > 1 ? std::abs(sv.front() - 1.0) : 0.0;
      const double err_low = std::abs(sv.back() - (1.0 - beta));
      record(c, 1e-12 - std::max(err_top, err_low));
    }
  }
  finish(c, sw);
  return c;
}

namespace {

LayerParams random_layer(std::mt19937_64& rng, int model_dim, int d_k, int d_v, int heads, int conv_len,
                         bool with_alpha) {
  LayerParams p;
  p.dims = HeadDims{model_dim, d_k, d_v, heads, conv_len};
  for (int h = 0; h < heads; ++h) {
    HeadParams hp;
    hp.w_q = random_matrix(rng, model_dim, d_k);
    hp.w_k = random_matrix(rng, model_dim, d_k);
    hp.w_v = random_matrix(rng, model_dim, d_v);
    hp.w_beta = random_matrix(rng, model_dim, 1);
    if (with_alpha) hp.w_alpha = random_matrix(rng, model_dim, 1);
    hp.conv_q = random_matrix(rng, d_k, conv_len);
    hp.conv_k = random_matrix(rng, d_k, conv_len);
    hp.conv_v = random_matrix(rng, d_v, conv_len);
    p.heads.push_back(std::move(hp));
  }
  p.w_o = random_matrix(rng, heads * d_v, model_dim);
  return p;
}

}  // namespace

CheckResult verify_mixer_invariance(const VerifyBudget& b) {
  Stopwatch sw;
  CheckResult c;
  c.name = "mixer-orthogonal-invariance";
  const int model_dim = 10, d_k = 6, d_v = 5, heads = 2, conv_len = 3, tokens = 12;
  for (int i = 0; i < b.invariance_transforms; ++i) {
    std::mt19937_64 rng = trial_rng(check_seed(b, 0x31), static_cast<uint64_t>(i));
    LayerParams params = random_layer(rng, model_dim, d_k, d_v, heads, conv_len, true);
    Matrix x = random_matrix(rng, tokens, model_dim);
    const Matrix t = i == 0 ? Matrix::identity(d_k) : random_orthogonal(rng, d_k);
    for (MixerVariant variant : {MixerVariant::linear, MixerVariant::delta, MixerVariant::gated}) {
      Matrix base = layer_forward(params, x, variant).y;
      ForwardOptions opts;
      opts.qk_transform = &t;
      Matrix transformed = layer_forward(params, x, variant, opts).y;
      record(c, 1e-10 - rel_fro_diff(base, transformed));
    }
  }
  finish(c, sw);
  return c;
}

CheckResult verify_conv_commutation(const VerifyBudget& b) {
  Stopwatch sw;
  CheckResult c;
  c.name = "conv-slice-commutation";
  const int tokens = 10, d = 8, l = 4;
  for (int i = 0; i < b.conv_commute_trials; ++i) {
    std::mt19937_64 rng = trial_rng(check_seed(b, 0x42), static_cast<uint64_t>(i));
    Matrix x = random_matrix(rng, tokens, d);
    Matrix w = random_matrix(rng, d, l);
    const int width = 1 + static_cast<int>(randu(rng, 0.0, static_cast<double>(d)));
    std::vector<int> retained = random_subset(d, std::min(width, d), rng);
    Matrix p = projection_matrix(retained, d);
    Matrix pt = transpose(p);
    Matrix lhs = matmul(conv1d_causal(x, w), pt);
    Matrix rhs = conv1d_causal(matmul(x, pt), matmul(p, w));
    double slack = 1e-14 - max_abs_diff(lhs, rhs);

    // Shared filters commute with arbitrary orthogonal channel mixing.
    Matrix shared(d, l);
    for (int r = 0; r < d; ++r)
      for (int j = 0; j < l; ++j) shared.at(r, j) = w.at(0, j);
    slack = std::min(slack, shared_conv_commute_check(shared, random_orthogonal(rng, d), x, 1e-12) ? 0.0 : -1.0);
    record(c, slack);
  }
  finish(c, sw);
  return c;
}

CheckResult verify_pca_monotonicity(const VerifyBudget& b) {
  Stopwatch sw;
  CheckResult c;
  c.name = "pca-monotonicity";
  const int n = 40, d = 8;
  for (int i = 0; i < b.pca_trials; ++i) {
    std::mt19937_64 rng = trial_rng(check_seed(b, 0x53), static_cast<uint64_t>(i));
    Matrix k = random_matrix(rng, n, d);
    HeadCalibration stats;
    stats.captured_k = k;
    stats.captured_q = k;
    const double u_full = effective_rank(k) / static_cast<double>(d);
    for (int width = 1; width <= d; ++width) {
      PcaTransform t = pca_transform(stats, SelectionMode::keys_only, width, false);
      Matrix projected = matmul(k, transpose(t.t));
      const double u_proj = effective_rank(projected) / static_cast<double>(width);
      record(c, u_proj - u_full + 1e-12);
    }
  }
  finish(c, sw);
  return c;
}

bool VerifyReport::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

VerifyReport run_all_checks(const VerifyBudget& b) {
  VerifyReport r;
  r.checks.push_back(verify_theorem_snr(b));
  r.checks.push_back(verify_kappa_bounds(b));
  r.checks.push_back(verify_corollary_expected(b));
  r.checks.push_back(verify_sandwich(b));
  r.checks.push_back(verify_rank_bound(b));
  r.checks.push_back(verify_er_properties(b));
  r.checks.push_back(verify_stability(b));
  r.checks.push_back(verify_mixer_invariance(b));
  r.checks.push_back(verify_conv_commutation(b));
  r.checks.push_back(verify_pca_monotonicity(b));
  return r;
}

std::string report_to_json(const VerifyReport& r) {
  nlohmann::json root;
  root["checks"] = nlohmann::json::array();
  for (const CheckResult& c : r.checks) {
    nlohmann::json jc;
    jc["name"] = c.name;
    jc["trials"] = c.trials;
    jc["violations"] = c.violations;
    jc["worstSlack"] = c.worst_slack;
    jc["passed"] = c.passed;
    jc["seconds"] = c.seconds;
    if (!c.note.empty()) jc["note"] = c.note;
    root["checks"].push_back(std::move(jc));
  }
  root["allPassed"] = r.all_passed();
  return root.dump(2) + "\n";
}

std::string report_table(const VerifyReport& r) {
  std::ostringstream os;
  os << "check                            trials  violations  worst_slack      time\n";
  for (const CheckResult& c : r.checks) {
    std::ostringstream slack;
    slack.precision(3);
    slack << std::scientific << c.worst_slack;
    os << (c.passed ? "PASS " : "FAIL ");
    std::string name = c.name;
    name.resize(28, ' ');
    os << name << ' ';
    std::string t = std::to_string(c.trials);
    os << std::string(7 - std::min<size_t>(7, t.size()), ' ') << t << "  ";
    std::string v = std::to_string(c.violations);
    os << std::string(10 - std::min<size_t>(10, v.size()), ' ') << v << "  ";
    os << slack.str() << "  ";
    std::ostringstream secs;
    secs.precision(2);
    secs << std::fixed << c.seconds << "s";
    os << secs.str();
    if (!c.note.empty()) os << "  " << c.note;
    os << '\n';
  }
  return os.str();
}

}  // namespace dp
