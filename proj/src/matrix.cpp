#include "deltaprune/matrix.hpp"

#include <algorithm>
#include <cmath>

namespace dp {

namespace {
size_t checked_extent(int r, int c) {
  if (r < 0 || c < 0) throw shape_error("Matrix: negative dimensions");
  return static_cast<size_t>(r) * static_cast<size_t>(c);
}
}  // namespace

Matrix::Matrix(int r, int c) : rows(r), cols(c), data(checked_extent(r, c), 0.0) {}

Matrix::Matrix(int r, int c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != checked_extent(r, c)) throw shape_error("Matrix: data size does not match rows*cols");
  if (!all_finite()) throw numeric_error("Matrix: non-finite entry");
}

Matrix Matrix::identity(int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows_in) {
  if (rows_in.empty()) return Matrix();
  const int r = static_cast<int>(rows_in.size());
  const int c = static_cast<int>(rows_in[0].size());
  Matrix m(r, c);
  for (int i = 0; i < r; ++i) {
    if (static_cast<int>(rows_in[i].size()) != c) throw shape_error("from_rows: ragged rows");
    std::copy(rows_in[i].begin(), rows_in[i].end(), m.row(i).begin());
  }
  if (!m.all_finite()) throw numeric_error("from_rows: non-finite entry");
  return m;
}

bool Matrix::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw shape_error("matmul: inner dimensions differ");
  Matrix c(a.rows, b.cols);
  // i-k-j loop order: cache-friendly, and for each (i,j) the k index still
  // ascends, so the per-entry summation order matches the textbook definition.
  for (int i = 0; i < a.rows; ++i) {
    double* crow = c.data.data() + static_cast<size_t>(i) * c.cols;
    for (int k = 0; k < a.cols; ++k) {
      const double aik = a.at(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.data.data() + static_cast<size_t>(k) * b.cols;
      for (int j = 0; j < b.cols; ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (int i = 0; i < m.rows; ++i)
    for (int j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw shape_error("add: shape mismatch");
  Matrix c = a;
  for (size_t i = 0; i < c.data.size(); ++i) c.data[i] += b.data[i];
  return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw shape_error("sub: shape mismatch");
  Matrix c = a;
  for (size_t i = 0; i < c.data.size(); ++i) c.data[i] -= b.data[i];
  return c;
}

Matrix scale(const Matrix& a, double s) {
  Matrix c = a;
  for (double& v : c.data) v *= s;
  return c;
}

std::vector<double> matvec(const Matrix& m, std::span<const double> x) {
  if (static_cast<int>(x.size()) != m.cols) throw shape_error("matvec: length mismatch");
  std::vector<double> y(static_cast<size_t>(m.rows), 0.0);
  for (int i = 0; i < m.rows; ++i) {
    double acc = 0.0;
    const double* r = m.data.data() + static_cast<size_t>(i) * m.cols;
    for (int j = 0; j < m.cols; ++j) acc += r[j] * x[j];
    y[i] = acc;
  }
  return y;
}

std::vector<double> matvec_transposed(const Matrix& m, std::span<const double> x) {
  if (static_cast<int>(x.size()) != m.rows) throw shape_error("matvec_transposed: length mismatch");
  std::vector<double> y(static_cast<size_t>(m.cols), 0.0);
  for (int i = 0; i < m.rows; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* r = m.data.data() + static_cast<size_t>(i) * m.cols;
    for (int j = 0; j < m.cols; ++j) y[j] += xi * r[j];
  }
  return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw shape_error("dot: length mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double frobenius_norm(const Matrix& m) {
  double acc = 0.0;
  for (double v : m.data) acc += v * v;
  return std::sqrt(acc);
}

double max_abs(const Matrix& m) {
  double best = 0.0;
  for (double v : m.data) best = std::max(best, std::fabs(v));
  return best;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw shape_error("max_abs_diff: shape mismatch");
  double best = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) best = std::max(best, std::fabs(a.data[i] - b.data[i]));
  return best;
}

double rel_fro_diff(const Matrix& a, const Matrix& b) {
  const double ref = frobenius_norm(a);
  const double diff = frobenius_norm(sub(a, b));
  return diff / std::max(ref, 1e-300);
}

Matrix slice_cols(const Matrix& m, std::span<const int> idx) {
  Matrix out(m.rows, static_cast<int>(idx.size()));
  for (size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0 || idx[j] >= m.cols) throw shape_error("slice_cols: index out of range");
    for (int i = 0; i < m.rows; ++i) out.at(i, static_cast<int>(j)) = m.at(i, idx[j]);
  }
  return out;
}

Matrix slice_rows(const Matrix& m, std::span<const int> idx) {
  Matrix out(static_cast<int>(idx.size()), m.cols);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= m.rows) throw shape_error("slice_rows: index out of range");
    std::copy(m.row(idx[i]).begin(), m.row(idx[i]).end(), out.row(static_cast<int>(i)).begin());
  }
  return out;
}

void validate_finite(const Matrix& m, const std::string& what) {
  if (!m.all_finite()) throw numeric_error(what + ": non-finite entry");
}

}  // namespace dp
