#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "deltaprune/linalg.hpp"
#include "deltaprune/tasks.hpp"

namespace dp {

// Which activations/weights a score or selection consults.
enum class SelectionMode { joint, keys_only, queries_only };
const char* mode_name(SelectionMode m);
SelectionMode mode_from_name(const std::string& name);

enum class PruneStrategy { rand, l1, swanda, grad, drrqr, pca, pca_adversarial };
const char* strategy_name(PruneStrategy s);
PruneStrategy strategy_from_name(const std::string& name);

// d_k' = max(1, round((1 - ratio) * d_k)); ratio must lie in [0, 1).
int retained_width(int d_k, double ratio);

struct HeadPlan {
  std::vector<int> retained;  // strictly increasing channel indices
  PruneStrategy strategy = PruneStrategy::rand;
  SelectionMode mode = SelectionMode::joint;
};
struct LayerPlan {
  std::vector<HeadPlan> heads;
};
struct PruningPlan {
  std::vector<LayerPlan> layers;
};

// Axis-aligned semi-orthogonal projection: row r of the result is the
// standard basis vector e_{retained[r]} (exact zeros and ones, P P^T = I).
Matrix projection_matrix(std::span<const int> retained, int d_k);

// s_j = ||wQ[:,j]||_1 + ||wK[:,j]||_1, with one term dropped outside joint mode.
std::vector<double> score_l1(const Matrix& w_q, const Matrix& w_k, SelectionMode mode);

// s_j = sum_i (|wQ[i,j]| + |wK[i,j]|) * inputNorms[i] (mode drops one term);
// inputNorms[i] is the l2 norm of input feature i over the calibration tokens.
std::vector<double> score_swanda(const Matrix& w_q, const Matrix& w_k, std::span<const double> input_norms,
                                 SelectionMode mode);

// First-order saliency: s_j = sum_i |wQ[i,j] * gQ[i,j]| + |wK[i,j] * gK[i,j]|
// (mode drops one term). Throws numeric_error on nonfinite gradients.
std::vector<double> score_grad(const HeadParams& head, const HeadGrads& grads, SelectionMode mode);

// Indices of the k largest scores, ties broken toward the lowest index;
// result sorted ascending.
std::vector<int> top_k_indices(std::span<const double> scores, int k);
// k distinct indices drawn uniformly from {0..n-1}; result sorted ascending.
std::vector<int> random_subset(int n, int k, std::mt19937_64& rng);

// Per-head calibration activations captured at the post-conv/post-SiLU,
// pre-l2-normalization point (one row per calibration token).
struct HeadCalibration {
  Matrix captured_k;  // N x d_k
  Matrix captured_q;  // N x d_k
};
struct LayerCalibration {
  std::vector<HeadCalibration> heads;
  std::vector<double> input_col_norms;  // per input feature, over all calibration tokens
};
struct ModelCalibration {
  std::vector<LayerCalibration> layers;
  ModelGrads grads;  // loss gradients accumulated over the calibration set
  int samples = 0;   // captured rows per head
};

// Runs the model over the calibration sequences, capturing at most
// max_samples activation rows per head plus accumulated gradients.
ModelCalibration collect_calibration(const ToyModel& m, const std::vector<RecallSequence>& seqs,
                                     int max_samples = 512, bool use_normalized = false);

// Strong-RRQR channel selection on the stacked activation matrix
// (joint: K stacked above Q; otherwise the single side). Requires at least
// d_k captured rows; rank_deficient_error propagates from the factorization.
std::vector<int> select_drrqr(const HeadCalibration& stats, SelectionMode mode, int width, double f);

struct PcaTransform {
  Matrix t;  // width x d_k, rows orthonormal (T T^T = I within 1e-10)
  bool adversarial = false;
};

// Full d_k x d_k rotation whose rows are the eigenvectors of the empirical
// covariance of the selected activations, sorted by descending variance
// (ascending when adversarial, so the retained block is always the first
// rows). Eigenvalues below 1e-12 * max are reported as zero in `variances`.
Matrix pca_full_rotation(const HeadCalibration& stats, SelectionMode mode, bool adversarial,
                         std::vector<double>* variances = nullptr);
// First `width` rows of the full rotation.
PcaTransform pca_transform(const HeadCalibration& stats, SelectionMode mode, int width, bool adversarial);

// Energy-weighted filter adaptation for a rotated basis: W'[k,j] =
// sum_m t[k,m]^2 w[m,j]. Requires square t orthogonal within 1e-10.
Matrix adapt_conv_filters(const Matrix& t, const Matrix& w);

// True when conv(x, w) * T^T == conv(x * T^T, w) within tol — holds whenever
// every channel shares one filter (rows of w identical).
bool shared_conv_commute_check(const Matrix& w, const Matrix& t, const Matrix& x, double tol = 1e-12);

struct PruneOptions {
  PruneStrategy strategy = PruneStrategy::drrqr;
  SelectionMode mode = SelectionMode::joint;
  double ratio = 0.5;  // fraction of key/query channels removed, in [0, 1)
  double f = 2.0;      // strong-RRQR swap threshold
  uint64_t seed = 0;   // rand strategy only
};

// Selection only (no PCA rotation): per-head retained channel sets.
PruningPlan build_plan(const ToyModel& m, const ModelCalibration& calib, const PruneOptions& opt);

// Slices w_q/w_k columns and conv_q/conv_k rows down to the retained set;
// w_v, conv_v, w_beta, w_alpha, w_o are untouched. All heads of a layer must
// retain the same width.
LayerParams apply_plan(const LayerParams& params, const LayerPlan& plan);

struct PruneResult {
  ToyModel model;
  PruningPlan plan;
};

// Full pipeline. Ratio 0 returns an untouched copy with an identity plan
// (for every strategy, PCA included). PCA strategies rotate w_q/w_k into the
// principal basis, adapt the convolution filters, then slice the leading
// block; all other strategies score and slice in the original basis.
PruneResult prune_model(const ToyModel& m, const ModelCalibration& calib, const PruneOptions& opt);

// Serialization: {"layers":[{"heads":[{"retained":[...],"strategy":...,"mode":...}]}]}.
std::string plan_to_json(const PruningPlan& plan);
PruningPlan plan_from_json(const std::string& text);

}  // namespace dp
