#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deltaprune/matrix.hpp"

namespace dp {

// One executable property check: a deterministic-inequality or expectation
// property evaluated over a seeded trial budget.
struct CheckResult {
  std::string name;
  long long trials = 0;
  long long violations = 0;
  double worst_slack = 0.0;  // smallest margin observed; negative means violated
  bool passed = false;
  double seconds = 0.0;
  std::string note;
};

struct VerifyBudget {
  long long snr_trials = 1000;          // per dimension
  std::vector<int> snr_dims = {4, 8, 16};
  int corollary_states = 20;
  int corollary_draws = 10000;
  int corollary_dim = 4;
  double corollary_xi = 0.1;
  int sandwich_trials = 500;
  int rank_bound_trials = 200;
  int invariance_transforms = 50;
  int conv_commute_trials = 100;
  int pca_trials = 200;
  int er_trials = 200;
  int stability_trials = 100;
  uint64_t seed = 2024;
  std::string sabotage;  // name of a check whose bound gets corrupted (self-test)
};

// Relative-error amplification bounds ratio against sqrt(er)-scaled
// alignment quantities on random (S, q*, n).
CheckResult verify_theorem_snr(const VerifyBudget& b);
// Condition-number double bound 1/kappa <= ratio <= kappa on the same draws.
CheckResult verify_kappa_bounds(const VerifyBudget& b);
// Monte Carlo mean relative retrieval error against its closed-form bracket.
CheckResult verify_corollary_expected(const VerifyBudget& b);
// Lower bound er(V^T K) >= er(projected V) / kappa(K)^2.
CheckResult verify_sandwich(const VerifyBudget& b);
// rank(S_t) <= min(rank K_t, rank V_t) <= t along gated recurrences.
CheckResult verify_rank_bound(const VerifyBudget& b);
// effective-rank algebra: transpose/orthogonal/scale invariance, range, kappa relation.
CheckResult verify_er_properties(const VerifyBudget& b);
// Eigenstructure of the erase step I - beta k k^T for unit k.
CheckResult verify_stability(const VerifyBudget& b);
// Mixer outputs unchanged under joint orthogonal q/k transforms, all variants.
CheckResult verify_mixer_invariance(const VerifyBudget& b);
// Channel slicing and shared filters commute with depthwise convolution.
CheckResult verify_conv_commutation(const VerifyBudget& b);
// Rank utilization never drops when projecting onto top principal components.
CheckResult verify_pca_monotonicity(const VerifyBudget& b);

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool all_passed() const;
};

VerifyReport run_all_checks(const VerifyBudget& b);

std::string report_to_json(const VerifyReport& r);
std::string report_table(const VerifyReport& r);

}  // namespace dp
