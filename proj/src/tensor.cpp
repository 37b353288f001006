#include "cellrefine/tensor.hpp"

#include <cmath>

namespace cellrefine {

// ikj loop order keeps the inner loop contiguous in both b and out.
void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.cols == b.rows);
    if (out.rows != a.rows || out.cols != b.cols) out = Matrix(a.rows, b.cols);
    out.zero();
    matmul_acc(a, b, out);
}

void matmul_acc(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.cols == b.rows && out.rows == a.rows && out.cols == b.cols);
    const int n = a.rows, k = a.cols, m = b.cols;
    for (int i = 0; i < n; ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b.row(p);
            for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.cols == b.cols);
    if (out.rows != a.rows || out.cols != b.rows) out = Matrix(a.rows, b.rows);
    out.zero();
    matmul_nt_acc(a, b, out);
}

void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.cols == b.cols && out.rows == a.rows && out.cols == b.rows);
    const int n = a.rows, k = a.cols, m = b.rows;
    for (int i = 0; i < n; ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (int j = 0; j < m; ++j) orow[j] += dot(arow, b.row(j), k);
    }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.rows == b.rows && out.rows == a.cols && out.cols == b.cols);
    const int n = a.rows, k = a.cols, m = b.cols;
    for (int p = 0; p < n; ++p) {
        const double* arow = a.row(p);
        const double* brow = b.row(p);
        for (int i = 0; i < k; ++i) {
            const double av = arow[i];
            if (av == 0.0) continue;
            double* orow = out.row(i);
            for (int j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
}

void add_row_bias(Matrix& m, const Matrix& bias) {
    assert(bias.rows == 1 && bias.cols == m.cols);
    for (int i = 0; i < m.rows; ++i) {
        double* row = m.row(i);
        for (int j = 0; j < m.cols; ++j) row[j] += bias.data[j];
    }
}

double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

double norm2(const double* a, int n) { return std::sqrt(dot(a, a, n)); }

void axpy(double alpha, const Matrix& x, Matrix& y) {
    assert(x.same_shape(y));
    for (size_t i = 0; i < x.data.size(); ++i) y.data[i] += alpha * x.data[i];
}

}  // namespace cellrefine
