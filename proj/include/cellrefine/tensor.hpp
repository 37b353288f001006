#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

#include "cellrefine/rng.hpp"

namespace cellrefine {

// Dense row-major matrix of doubles. A 1 x n or n x 1 Matrix doubles as a
// vector; helpers below treat the flat data() view uniformly.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, 0.0) {}
    Matrix(int r, int c, double fill)
        : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    double& at(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

    double* row(int r) { return data.data() + static_cast<size_t>(r) * cols; }
    const double* row(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    void zero() { std::fill(data.begin(), data.end(), 0.0); }

    void fill_normal(Rng& rng, double stddev) {
        for (auto& v : data) v = rng.normal(0.0, stddev);
    }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// out = a * b
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
// out = a * b^T
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out);
// out += a^T * b (gradient accumulation form)
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out);
// out += a * b
void matmul_acc(const Matrix& a, const Matrix& b, Matrix& out);
// out += a * b^T
void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& out);

void add_row_bias(Matrix& m, const Matrix& bias);  // bias is 1 x cols

double dot(const double* a, const double* b, int n);
double norm2(const double* a, int n);

void axpy(double alpha, const Matrix& x, Matrix& y);  // y += alpha * x

}  // namespace cellrefine
