#pragma once

#include <vector>

#include "deltaprune/matrix.hpp"

namespace dp {

// Requested factorization rank exceeds the numerical rank of the input.
struct rank_deficient_error : numeric_error {
  using numeric_error::numeric_error;
};

// An iteration failed to converge within its safety budget.
struct non_convergent_error : numeric_error {
  using numeric_error::numeric_error;
};

// Operation undefined on an (effectively) all-zero matrix.
struct zero_matrix_error : numeric_error {
  using numeric_error::numeric_error;
};

// Householder QR with greedy column pivoting: at each step the column of
// largest residual norm is chosen next; ties go to the lowest column index.
// q has orthonormal columns (m x min(m,n)), r is upper triangular
// (min(m,n) x n), and q * r reconstructs m with columns permuted by perm:
// (q*r)[:,j] == m[:,perm[j]].
struct QrcpResult {
  Matrix q;
  Matrix r;
  std::vector<int> perm;
};
QrcpResult qrcp(const Matrix& m);

// Singular values by one-sided Jacobi iteration (relative off-diagonal
// tolerance 1e-12), sorted descending, length min(rows, cols).
std::vector<double> svd_values(const Matrix& m);

// Singular values plus right singular vectors: right_vectors has one column
// per returned value, ordered to match. Column 0 is the top right singular
// vector. When rows >= cols all cols directions are returned (used for PCA).
struct SvdVectors {
  std::vector<double> values;
  Matrix right_vectors;  // cols x len(values)
};
SvdVectors svd_with_right_vectors(const Matrix& m);

// sigma_max / sigma_min. Returns +infinity when sigma_min < 1e-14 * sigma_max
// (numerically rank deficient). Throws zero_matrix_error on an all-zero input.
double condition_number(const Matrix& m);

// Number of singular values above rel_tol * sigma_max; 0 for the zero matrix.
int numeric_rank(const Matrix& m, double rel_tol = 1e-10);

double spectral_norm(const Matrix& m);

// State of the strong rank-revealing QR iteration on the pivoted factor
// R = [A B; 0 C] with A = r_factor[0:k,0:k]:
//   omega[i] = 1 / ||row i of inv(A)||_2   (smallest-singular-value proxies)
//   gamma[j] = ||column j of C||_2          (residual column norms)
struct SrrqrState {
  Matrix r_factor;         // min(m,n) x n, upper triangular
  std::vector<int> perm;   // length n, current column permutation of the input
  std::vector<double> omega;
  std::vector<double> gamma;
  int k = 0;
  double f = 2.0;
};

struct RhoMax {
  double rho = 0.0;
  int i = -1;  // row into A (selected-side index)
  int j = -1;  // column into C (rejected-side index)
};

struct SrrqrTrace {
  int swaps = 0;
  double final_rho_max = 0.0;
  std::vector<double> abs_det_history;  // |det A| after init and after each swap
};

SrrqrState srrqr_init(const Matrix& m, int k, double f);
// rho[i][j] = sqrt(U[i][j]^2 + (gamma[j]/omega[i])^2) with U = inv(A)*B;
// returns the global maximum (first encountered in row-major scan on ties).
RhoMax srrqr_rho_max(const SrrqrState& s);
double srrqr_abs_det(const SrrqrState& s);
// Performs one column swap (the global argmax of rho) and retriangularizes
// with Givens rotations. Returns false, changing nothing, once
// max rho <= f * (1 + 1e-12).
bool srrqr_step(SrrqrState& s);

// Column subset selection with the Gu-Eisenstat guarantee
// sigma_min(M[:,selected]) >= sigma_k(M) / sqrt(1 + f^2 * k * (n - k)).
// Returns k column indices of m, sorted ascending. Throws rank_deficient_error
// when sigma_k(m) <= 1e-12 * sigma_1(m), non_convergent_error if the swap
// count exceeds 10 * n * k.
std::vector<int> srrqr_select(const Matrix& m, int k, double f = 2.0, SrrqrTrace* trace = nullptr);

}  // namespace dp
