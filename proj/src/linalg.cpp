#include "deltaprune/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "deltaprune/rng.hpp"

namespace dp {

namespace {

constexpr double kJacobiTol = 1e-12;
constexpr int kJacobiMaxSweeps = 100;
constexpr double kSrrqrAcceptSlack = 1e-12;  // accept rho <= f * (1 + slack)

struct JacobiOut {
  std::vector<double> values;  // all column norms, sorted descending
  Matrix v;                    // accumulated right rotations, columns match values
};

// One-sided (Hestenes) Jacobi: orthogonalizes the columns of a working copy of
// m by plane rotations; the surviving column norms are the singular values and
// the accumulated rotations form the right singular vectors.
JacobiOut one_sided_jacobi(const Matrix& m, bool want_v) {
  Matrix a = m;
  const int n = a.cols;
  const int rows = a.rows;
  Matrix v = want_v ? Matrix::identity(n) : Matrix();

  auto col_dot = [&](int p, int q) {
    double acc = 0.0;
    for (int i = 0; i < rows; ++i) acc += a.at(i, p) * a.at(i, q);
    return acc;
  };

  // Columns whose norm has collapsed below roundoff relative to the matrix
  // scale carry no information: rotating them against larger columns injects
  // rounding noise bigger than the column itself, re-correlating the pair every
  // sweep and cycling forever. Freeze them instead; their reported values stay
  // at or below this floor, which every caller treats as numerically zero.
  double fro_sq = 0.0;
  for (int j = 0; j < n; ++j) fro_sq += col_dot(j, j);
  const double eps = std::numeric_limits<double>::epsilon();
  const double floor_sq = eps * eps * fro_sq;

  int sweep = 0;
  for (; sweep < kJacobiMaxSweeps; ++sweep) {
    int rotations = 0;
    for (int p = 0; p < n - 1; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double app = col_dot(p, p);
        const double aqq = col_dot(q, q);
        if (app <= floor_sq || aqq <= floor_sq) continue;
        const double apq = col_dot(p, q);
        if (std::fabs(apq) <= kJacobiTol * std::sqrt(app * aqq)) continue;
        const double zeta = (aqq - app) / (2.0 * apq);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double cs = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = cs * t;
        for (int i = 0; i < rows; ++i) {
          const double aip = a.at(i, p);
          const double aiq = a.at(i, q);
          a.at(i, p) = cs * aip - sn * aiq;
          a.at(i, q) = sn * aip + cs * aiq;
        }
        if (want_v) {
          for (int i = 0; i < n; ++i) {
            const double vip = v.at(i, p);
            const double viq = v.at(i, q);
            v.at(i, p) = cs * vip - sn * viq;
            v.at(i, q) = sn * vip + cs * viq;
          }
        }
        ++rotations;
      }
    }
    if (rotations == 0) break;
  }
  if (sweep == kJacobiMaxSweeps) throw non_convergent_error("svd: Jacobi sweeps exhausted");

  std::vector<double> norms(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) norms[static_cast<size_t>(j)] = std::sqrt(col_dot(j, j));
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int x, int y) { return norms[static_cast<size_t>(x)] > norms[static_cast<size_t>(y)]; });

  JacobiOut out;
  out.values.resize(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) out.values[static_cast<size_t>(j)] = norms[static_cast<size_t>(order[static_cast<size_t>(j)])];
  if (want_v) {
    out.v = Matrix(n, n);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < n; ++i) out.v.at(i, j) = v.at(i, order[static_cast<size_t>(j)]);
  }
  return out;
}

// In-place Givens rotation of rows r1 and r2 chosen to zero m(r2, col).
void givens_rows(Matrix& m, int r1, int r2, int col) {
  const double a = m.at(r1, col);
  const double b = m.at(r2, col);
  if (b == 0.0) return;
  const double h = std::hypot(a, b);
  const double c = a / h;
  const double s = b / h;
  for (int j = 0; j < m.cols; ++j) {
    const double x = m.at(r1, j);
    const double y = m.at(r2, j);
    m.at(r1, j) = c * x + s * y;
    m.at(r2, j) = -s * x + c * y;
  }
  m.at(r2, col) = 0.0;
}

// Rows of inv(A) for upper triangular A = r[0:k,0:k], by back substitution.
Matrix upper_tri_inverse(const Matrix& r, int k) {
  Matrix inv(k, k);
  for (int col = 0; col < k; ++col) {
    // solve A x = e_col
    for (int i = k - 1; i >= 0; --i) {
      double rhs = (i == col) ? 1.0 : 0.0;
      for (int j = i + 1; j < k; ++j) rhs -= r.at(i, j) * inv.at(j, col);
      const double d = r.at(i, i);
      if (d == 0.0) throw rank_deficient_error("srrqr: singular leading block");
      inv.at(i, col) = rhs / d;
    }
  }
  return inv;
}

void refresh_omega_gamma(SrrqrState& s) {
  const int k = s.k;
  const int n = s.r_factor.cols;
  const int rmin = s.r_factor.rows;
  const Matrix ainv = upper_tri_inverse(s.r_factor, k);
  s.omega.assign(static_cast<size_t>(k), 0.0);
  for (int i = 0; i < k; ++i) {
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += ainv.at(i, j) * ainv.at(i, j);
    s.omega[static_cast<size_t>(i)] = 1.0 / std::sqrt(acc);
  }
  s.gamma.assign(static_cast<size_t>(n - k), 0.0);
  for (int j = k; j < n; ++j) {
    double acc = 0.0;
    for (int i = k; i < rmin; ++i) acc += s.r_factor.at(i, j) * s.r_factor.at(i, j);
    s.gamma[static_cast<size_t>(j - k)] = std::sqrt(acc);
  }
}

// Move column `from` to position `to` (from < to), shifting the columns in
// between left by one; permutation updated alongside.
void cycle_cols_left(Matrix& m, std::vector<int>& perm, int from, int to) {
  for (int c = from; c < to; ++c) {
    for (int i = 0; i < m.rows; ++i) std::swap(m.at(i, c), m.at(i, c + 1));
    std::swap(perm[static_cast<size_t>(c)], perm[static_cast<size_t>(c + 1)]);
  }
}

// Move column `from` to position `to` (to < from), shifting the columns in
// between right by one.
void cycle_cols_right(Matrix& m, std::vector<int>& perm, int from, int to) {
  for (int c = from; c > to; --c) {
    for (int i = 0; i < m.rows; ++i) std::swap(m.at(i, c), m.at(i, c - 1));
    std::swap(perm[static_cast<size_t>(c)], perm[static_cast<size_t>(c - 1)]);
  }
}

}  // namespace

QrcpResult qrcp(const Matrix& m) {
  if (m.rows == 0 || m.cols == 0) throw shape_error("qrcp: empty matrix");
  const int rows = m.rows, n = m.cols;
  const int rmin = std::min(rows, n);
  Matrix a = m;
  std::vector<int> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<std::vector<double>> reflectors;  // Householder vectors, length rows-s each
  reflectors.reserve(static_cast<size_t>(rmin));

  for (int s = 0; s < rmin; ++s) {
    // Greedy pivot: column with the largest residual norm; strict comparison
    // keeps the lowest index on ties.
    int pivot = s;
    double best = -1.0;
    for (int j = s; j < n; ++j) {
      double acc = 0.0;
      for (int i = s; i < rows; ++i) acc += a.at(i, j) * a.at(i, j);
      if (acc > best) {
        best = acc;
        pivot = j;
      }
    }
    if (pivot != s) {
      for (int i = 0; i < rows; ++i) std::swap(a.at(i, s), a.at(i, pivot));
      std::swap(perm[static_cast<size_t>(s)], perm[static_cast<size_t>(pivot)]);
    }

    const double normx = std::sqrt(best);
    std::vector<double> v(static_cast<size_t>(rows - s), 0.0);
    if (normx > 0.0) {
      const double x0 = a.at(s, s);
      const double alpha = (x0 >= 0.0 ? -normx : normx);
      for (int i = s; i < rows; ++i) v[static_cast<size_t>(i - s)] = a.at(i, s);
      v[0] -= alpha;
      double vnorm2 = 0.0;
      for (double t : v) vnorm2 += t * t;
      if (vnorm2 > 0.0) {
        // Apply H = I - 2 v v^T / (v^T v) to the trailing block.
        for (int j = s; j < n; ++j) {
          double proj = 0.0;
          for (int i = s; i < rows; ++i) proj += v[static_cast<size_t>(i - s)] * a.at(i, j);
          const double coef = 2.0 * proj / vnorm2;
          for (int i = s; i < rows; ++i) a.at(i, j) -= coef * v[static_cast<size_t>(i - s)];
        }
      }
      a.at(s, s) = alpha;
      for (int i = s + 1; i < rows; ++i) a.at(i, s) = 0.0;
    }
    reflectors.push_back(std::move(v));
  }

  QrcpResult out;
  out.perm = std::move(perm);
  out.r = Matrix(rmin, n);
  for (int i = 0; i < rmin; ++i)
    for (int j = i; j < n; ++j) out.r.at(i, j) = a.at(i, j);

  // Q = H_0 H_1 ... H_{rmin-1} applied to the first rmin columns of I.
  out.q = Matrix(rows, rmin);
  for (int j = 0; j < rmin; ++j) out.q.at(j, j) = 1.0;
  for (int s = rmin - 1; s >= 0; --s) {
    const auto& v = reflectors[static_cast<size_t>(s)];
    double vnorm2 = 0.0;
    for (double t : v) vnorm2 += t * t;
    if (vnorm2 == 0.0) continue;
    for (int j = 0; j < rmin; ++j) {
      double proj = 0.0;
      for (int i = s; i < rows; ++i) proj += v[static_cast<size_t>(i - s)] * out.q.at(i, j);
      const double coef = 2.0 * proj / vnorm2;
      for (int i = s; i < rows; ++i) out.q.at(i, j) -= coef * v[static_cast<size_t>(i - s)];
    }
  }
  return out;
}

std::vector<double> svd_values(const Matrix& m) {
  if (m.rows == 0 || m.cols == 0) throw shape_error("svd_values: empty matrix");
  // Canonical orientation: iterate on the tall side so column count is min(m,n).
  const bool flip = m.rows < m.cols;
  JacobiOut out = one_sided_jacobi(flip ? transpose(m) : m, false);
  return out.values;  // length min(rows, cols) either way
}

SvdVectors svd_with_right_vectors(const Matrix& m) {
  if (m.rows == 0 || m.cols == 0) throw shape_error("svd: empty matrix");
  JacobiOut j = one_sided_jacobi(m, true);
  const int keep = (m.rows >= m.cols) ? m.cols : std::min(m.rows, m.cols);
  SvdVectors out;
  out.values.assign(j.values.begin(), j.values.begin() + keep);
  out.right_vectors = Matrix(m.cols, keep);
  for (int c = 0; c < keep; ++c)
    for (int i = 0; i < m.cols; ++i) out.right_vectors.at(i, c) = j.v.at(i, c);
  return out;
}

double condition_number(const Matrix& m) {
  if (frobenius_norm(m) == 0.0) throw zero_matrix_error("condition_number: zero matrix");
  const std::vector<double> sv = svd_values(m);
  const double smax = sv.front();
  if (smax == 0.0) throw zero_matrix_error("condition_number: zero spectrum");
  const double smin = sv.back();
  if (smin < 1e-14 * smax) return std::numeric_limits<double>::infinity();
  return smax / smin;
}

int numeric_rank(const Matrix& m, double rel_tol) {
  const std::vector<double> sv = svd_values(m);
  const double smax = sv.front();
  if (smax == 0.0) return 0;
  int r = 0;
  for (double s : sv)
    if (s > rel_tol * smax) ++r;
  return r;
}

double spectral_norm(const Matrix& m) { return svd_values(m).front(); }

SrrqrState srrqr_init(const Matrix& m, int k, double f) {
  if (k < 1 || k >= m.cols) throw shape_error("srrqr: need 1 <= k < cols");
  if (f < 1.0) throw std::invalid_argument("srrqr: f must be >= 1");
  const std::vector<double> sv = svd_values(m);
  if (static_cast<int>(sv.size()) < k || sv[static_cast<size_t>(k - 1)] <= 1e-12 * sv[0])
    throw rank_deficient_error("srrqr: sigma_k below rank threshold");

  QrcpResult qr = qrcp(m);
  SrrqrState s;
  s.r_factor = std::move(qr.r);
  s.perm = std::move(qr.perm);
  s.k = k;
  s.f = f;
  refresh_omega_gamma(s);
  return s;
}

RhoMax srrqr_rho_max(const SrrqrState& s) {
  const int k = s.k;
  const int n = s.r_factor.cols;
  const Matrix ainv = upper_tri_inverse(s.r_factor, k);
  RhoMax best;
  for (int i = 0; i < k; ++i) {
    const double inv_omega = 1.0 / s.omega[static_cast<size_t>(i)];  // = ||row i of inv(A)||
    for (int j = 0; j < n - k; ++j) {
      // U = inv(A) * B, computed entrywise.
      double u = 0.0;
      for (int t = 0; t < k; ++t) u += ainv.at(i, t) * s.r_factor.at(t, k + j);
      const double rho = std::hypot(u, s.gamma[static_cast<size_t>(j)] * inv_omega);
      if (rho > best.rho) {
        best.rho = rho;
        best.i = i;
        best.j = j;
      }
    }
  }
  return best;
}

double srrqr_abs_det(const SrrqrState& s) {
  double d = 1.0;
  for (int i = 0; i < s.k; ++i) d *= std::fabs(s.r_factor.at(i, i));
  return d;
}

bool srrqr_step(SrrqrState& s) {
  const RhoMax cand = srrqr_rho_max(s);
  if (cand.rho <= s.f * (1.0 + kSrrqrAcceptSlack)) return false;

  Matrix& r = s.r_factor;
  const int k = s.k;
  const int rmin = r.rows;

  // Stage 1: rotate the leaving column i to the block boundary (position k-1);
  // the intermediate columns shift left and a Givens per column restores the
  // triangle.
  if (cand.i < k - 1) {
    cycle_cols_left(r, s.perm, cand.i, k - 1);
    for (int c = cand.i; c < k - 1; ++c) givens_rows(r, c, c + 1, c);
  }

  // Stage 2: rotate the entering column k+j to the boundary (position k); the
  // shifted columns have strictly-superdiagonal profiles, so zeroing the
  // spike of column k bottom-up refills exactly their diagonals.
  const int src = k + cand.j;
  if (src > k) {
    cycle_cols_right(r, s.perm, src, k);
    const int bottom = std::min(src, rmin - 1);
    for (int a = bottom; a > k; --a) givens_rows(r, a - 1, a, k);
  }

  // Stage 3: adjacent swap across the boundary, one final rotation.
  for (int i = 0; i < rmin; ++i) std::swap(r.at(i, k - 1), r.at(i, k));
  std::swap(s.perm[static_cast<size_t>(k - 1)], s.perm[static_cast<size_t>(k)]);
  if (k < rmin) givens_rows(r, k - 1, k, k - 1);

  // The retriangularization above is structural; anything left below the
  // diagonal is roundoff dust. A large residual means a logic error.
  double worst = 0.0;
  for (int i = 1; i < rmin; ++i)
    for (int j = 0; j < std::min(i, r.cols); ++j) {
      worst = std::max(worst, std::fabs(r.at(i, j)));
      r.at(i, j) = 0.0;
    }
  if (worst > 1e-8 * std::max(1.0, max_abs(r)))
    throw numeric_error("srrqr: retriangularization left sub-diagonal mass");

  refresh_omega_gamma(s);
  return true;
}

std::vector<int> srrqr_select(const Matrix& m, int k, double f, SrrqrTrace* trace) {
  SrrqrState s = srrqr_init(m, k, f);
  const long long max_swaps = 10LL * m.cols * k;
  SrrqrTrace local;
  local.abs_det_history.push_back(srrqr_abs_det(s));
  long long swaps = 0;
  while (srrqr_step(s)) {
    ++swaps;
    local.abs_det_history.push_back(srrqr_abs_det(s));
    if (swaps > max_swaps) throw non_convergent_error("srrqr: swap budget exceeded");
  }
  local.swaps = static_cast<int>(swaps);
  local.final_rho_max = srrqr_rho_max(s).rho;
  if (trace) *trace = std::move(local);

  std::vector<int> selected(s.perm.begin(), s.perm.begin() + k);
  std::sort(selected.begin(), selected.end());
  return selected;
}

Matrix random_orthogonal(std::mt19937_64& rng, int n) {
  Matrix g = random_matrix(rng, n, n);
  QrcpResult qr = qrcp(g);
  // Fix signs so the factorization is unique-ish and Q is exactly orthogonal
  // up to roundoff regardless.
  Matrix q = qr.q;
  for (int j = 0; j < n; ++j) {
    if (qr.r.at(j, j) < 0.0)
      for (int i = 0; i < n; ++i) q.at(i, j) = -q.at(i, j);
  }
  return q;
}

}  // namespace dp
