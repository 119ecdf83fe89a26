#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dp {

// Thrown when operand shapes do not conform.
struct shape_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Thrown when an input is numerically unusable (NaN/Inf entries, empty spectra, ...).
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major matrix of doubles. Desk-scale: dimensions are ints, storage is
// a contiguous vector, rows are addressable as spans.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;  // row-major, size rows*cols

  Matrix() = default;
  Matrix(int r, int c);  // zero-initialized
  Matrix(int r, int c, std::vector<double> values);  // validates size and finiteness

  static Matrix identity(int n);
  static Matrix from_rows(const std::vector<std::vector<double>>& rows_in);

  double& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
  double at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }

  std::span<double> row(int i) { return {data.data() + static_cast<size_t>(i) * cols, static_cast<size_t>(cols)}; }
  std::span<const double> row(int i) const {
    return {data.data() + static_cast<size_t>(i) * cols, static_cast<size_t>(cols)};
  }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
  bool all_finite() const;
};

// C = A*B with the textbook summation order: for each output entry the k-index
// ascends, so results are bit-reproducible across runs.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);

// y = M x and y = M^T x for a row vector viewed as a span.
std::vector<double> matvec(const Matrix& m, std::span<const double> x);
std::vector<double> matvec_transposed(const Matrix& m, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);

// Relative Frobenius distance ||a-b||_F / max(||a||_F, tiny); used by tests and checks.
double rel_fro_diff(const Matrix& a, const Matrix& b);

Matrix slice_cols(const Matrix& m, std::span<const int> idx);
Matrix slice_rows(const Matrix& m, std::span<const int> idx);

void validate_finite(const Matrix& m, const std::string& what);

}  // namespace dp
