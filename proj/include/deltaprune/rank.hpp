#pragma once

#include <span>
#include <string>
#include <vector>

#include "deltaprune/linalg.hpp"
#include "deltaprune/mixers.hpp"

namespace dp {

// Input rejected as degenerate for a spectral measurement.
struct degenerate_input_error : numeric_error {
  using numeric_error::numeric_error;
};

// er(S) = ||S||_F^2 / ||S||_2^2 = sum(sigma_i^2) / sigma_1^2.
// Lies in [1, rank(S)]; equals 1 iff rank-1, equals rank iff all nonzero
// singular values are equal. Throws zero_matrix_error when ||S||_F < 1e-14.
double effective_rank(const Matrix& s);

// u(S) = er(S) / min(d_k, d_v), in (0, 1] for a d_v x d_k state.
double rank_utilization(const Matrix& s, int d_k, int d_v);

// mu(d) = sqrt(2) * Gamma((d+1)/2) / Gamma(d/2), evaluated via lgamma.
// E||n|| = xi * mu(d) for isotropic Gaussian noise of std xi in d dims.
double mu_constant(int d);

// Isotropic Gaussian query-noise model.
struct NoiseModel {
  double xi = 0.0;  // per-coordinate std, > 0
  int dim = 0;
  double mu = 0.0;  // mu_constant(dim)
};
NoiseModel make_noise_model(double xi, int dim);

// Relative-error amplification of the readout o = S q under query noise:
//   ratio = (||S n|| / ||n||) * (||q*|| / ||S q*||)
// with delta = |n . w1| / ||n|| and gamma = |q* . w1| / ||q*||, where w1 is
// the top right singular vector of S. Satisfies
//   delta / sqrt(er(S)) <= ratio <= sqrt(er(S)) / gamma
// and 1/kappa(S) <= ratio <= kappa(S).
struct Amplification {
  double ratio = 0.0;
  double delta = 0.0;
  double gamma = 0.0;
};
// Throws zero_matrix_error for zero S, degenerate_input_error for zero q*/n
// or when ||S q*|| < 1e-10 * ||S||_2 * ||q*|| (readout numerically zero).
Amplification amplification_ratio(const Matrix& s, std::span<const double> q_star, std::span<const double> n);

// Spectrum of one state matrix at one token position.
struct TokenSpectrum {
  int token = 0;  // 0-based position of the token that produced the state
  std::vector<double> singular_values;  // descending
  double effective_rank = 0.0;
  double utilization = 0.0;
};

struct HeadReport {
  std::vector<TokenSpectrum> tokens;  // positions >= skip with nonzero state
  std::vector<double> pooled_singular_values;  // concatenated across tokens, descending
  double effective_rank = 0.0;  // arithmetic mean of per-token er
  double utilization = 0.0;     // effective_rank / min(d_k, d_v)
  double kappa_s = 0.0;         // condition number of the final state (+inf if zero)
  double kappa_k = 0.0;         // condition number of stacked normalized keys, positions >= skip
  int tokens_skipped = 0;       // positions >= skip dropped for a numerically zero state
};

struct RankReport {
  int key_dim = 0;
  int value_dim = 0;
  std::vector<HeadReport> heads;
};

// Runs layer_forward capturing per-token states and aggregates per-head
// spectra over positions >= skip. Throws shape_error when skip >= T (or
// skip < 0) and degenerate_input_error when every considered state is
// numerically zero ("empty spectrum").
RankReport spectrum_over_tokens(const LayerParams& params, const Matrix& x, MixerVariant variant, int skip);

// CSV rows `head,token,sigma_index,sigma_value` (with that header line).
std::string spectra_csv(const RankReport& r);
// CSV rows `head,token,utilization` (with that header line).
std::string utilization_csv(const RankReport& r);

}  // namespace dp
