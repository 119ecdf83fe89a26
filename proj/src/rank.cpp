#include "deltaprune/rank.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace dp {

namespace {
constexpr double kZeroFro = 1e-14;
}  // namespace

double effective_rank(const Matrix& s) {
  const double fro = frobenius_norm(s);
  if (fro < kZeroFro) throw zero_matrix_error("effective_rank: matrix is numerically zero");
  const double top = spectral_norm(s);
  return (fro * fro) / (top * top);
}

double rank_utilization(const Matrix& s, int d_k, int d_v) {
  if (d_k < 1 || d_v < 1) throw shape_error("rank_utilization: dimensions must be positive");
  return effective_rank(s) / static_cast<double>(std::min(d_k, d_v));
}

double mu_constant(int d) {
  if (d < 1) throw shape_error("mu_constant: dimension must be >= 1");
  const double half = 0.5 * static_cast<double>(d);
  return std::sqrt(2.0) * std::exp(std::lgamma(half + 0.5) - std::lgamma(half));
}

NoiseModel make_noise_model(double xi, int dim) {
  if (!(xi > 0.0)) throw shape_error("noise model: xi must be > 0");
  return NoiseModel{xi, dim, mu_constant(dim)};
}

Amplification amplification_ratio(const Matrix& s, std::span<const double> q_star, std::span<const double> n) {
  if (static_cast<int>(q_star.size()) != s.cols || static_cast<int>(n.size()) != s.cols)
    throw shape_error("amplification_ratio: query/noise length must equal state columns");
  if (frobenius_norm(s) < kZeroFro) throw zero_matrix_error("amplification_ratio: zero state");
  const double nq = norm2(q_star);
  const double nn = norm2(n);
  if (nq == 0.0 || nn == 0.0) throw degenerate_input_error("amplification_ratio: zero query or noise vector");

  SvdVectors sv = svd_with_right_vectors(s);
  const double sigma1 = sv.values.front();
  std::vector<double> sq = matvec(s, q_star);
  std::vector<double> sn = matvec(s, n);
  const double nsq = norm2(sq);
  if (nsq < 1e-10 * sigma1 * nq)
    throw degenerate_input_error("amplification_ratio: S q* is numerically zero");

  double dot_n = 0.0, dot_q = 0.0;
  for (int i = 0; i < s.cols; ++i) {
    const double w1 = sv.right_vectors.at(i, 0);
    dot_n += n[static_cast<size_t>(i)] * w1;
    dot_q += q_star[static_cast<size_t>(i)] * w1;
  }
  Amplification out;
  out.ratio = (norm2(sn) / nn) * (nq / nsq);
  out.delta = std::abs(dot_n) / nn;
  out.gamma = std::abs(dot_q) / nq;
  return out;
}

RankReport spectrum_over_tokens(const LayerParams& params, const Matrix& x, MixerVariant variant, int skip) {
  if (skip < 0 || skip >= x.rows)
    throw shape_error("spectrum_over_tokens: skip must lie in [0, T)");
  ForwardOptions opts;
  opts.capture_states = true;
  opts.capture_activations = true;
  opts.capture_normalized = true;
  ForwardResult fr = layer_forward(params, x, variant, opts);

  const int d_k = params.dims.key_dim;
  const int d_v = params.dims.value_dim;
  const double dmin = static_cast<double>(std::min(d_k, d_v));
  RankReport report;
  report.key_dim = d_k;
  report.value_dim = d_v;

  for (const HeadActivations& head : fr.heads) {
    HeadReport hr;
    double er_sum = 0.0;
    for (int t = skip; t < static_cast<int>(head.states.size()); ++t) {
      const Matrix& st = head.states[static_cast<size_t>(t)];
      if (frobenius_norm(st) < kZeroFro) {
        ++hr.tokens_skipped;
        continue;
      }
      TokenSpectrum ts;
      ts.token = t;
      ts.singular_values = svd_values(st);
      double sum_sq = 0.0;
      for (double sv : ts.singular_values) sum_sq += sv * sv;
      ts.effective_rank = sum_sq / (ts.singular_values.front() * ts.singular_values.front());
      ts.utilization = ts.effective_rank / dmin;
      er_sum += ts.effective_rank;
      hr.pooled_singular_values.insert(hr.pooled_singular_values.end(), ts.singular_values.begin(),
                                       ts.singular_values.end());
      hr.tokens.push_back(std::move(ts));
    }
    if (hr.tokens.empty())
      throw degenerate_input_error("spectrum_over_tokens: empty spectrum (all states numerically zero)");
    std::sort(hr.pooled_singular_values.begin(), hr.pooled_singular_values.end(), std::greater<>());
    hr.effective_rank = er_sum / static_cast<double>(hr.tokens.size());
    hr.utilization = hr.effective_rank / dmin;

    const Matrix& final_state = head.states.back();
    hr.kappa_s = frobenius_norm(final_state) < kZeroFro ? std::numeric_limits<double>::infinity()
                                                        : condition_number(final_state);
    std::vector<int> kept(static_cast<size_t>(head.k.rows - skip));
    std::iota(kept.begin(), kept.end(), skip);
    Matrix keys = slice_rows(head.k, kept);
    hr.kappa_k = frobenius_norm(keys) < kZeroFro ? std::numeric_limits<double>::infinity()
                                                 : condition_number(keys);
    report.heads.push_back(std::move(hr));
  }
  return report;
}

std::string spectra_csv(const RankReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "head,token,sigma_index,sigma_value\n";
  for (size_t h = 0; h < r.heads.size(); ++h)
    for (const TokenSpectrum& ts : r.heads[h].tokens)
      for (size_t i = 0; i < ts.singular_values.size(); ++i)
        os << h << ',' << ts.token << ',' << i << ',' << ts.singular_values[i] << '\n';
  return os.str();
}

std::string utilization_csv(const RankReport& r) {
  std::ostringstream os;
  os.precision(17);
  os << "head,token,utilization\n";
  for (size_t h = 0; h < r.heads.size(); ++h)
    for (const TokenSpectrum& ts : r.heads[h].tokens) os << h << ',' << ts.token << ',' << ts.utilization << '\n';
  return os.str();
}

}  // namespace dp
