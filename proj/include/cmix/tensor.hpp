#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <vector>

namespace cmix {

// Dense row-major matrix of doubles. Everything trains in double precision;
// the models here are desk-scale, so clarity and bit-reproducibility beat
// throughput.
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {}

    bool empty() const { return a.empty(); }
    size_t count() const { return a.size(); }

    double& operator()(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }

    double* row(int i) { return a.data() + static_cast<size_t>(i) * cols; }
    const double* row(int i) const { return a.data() + static_cast<size_t>(i) * cols; }

    void zero() { std::fill(a.begin(), a.end(), 0.0); }

    bool operator==(const Mat& o) const { return rows == o.rows && cols == o.cols && a == o.a; }
};

// out (+)= x (m×k) · w (k×n)
inline void matmul(const Mat& x, const Mat& w, Mat& out, bool accumulate = false) {
    assert(x.cols == w.rows && out.rows == x.rows && out.cols == w.cols);
    if (!accumulate) out.zero();
    for (int i = 0; i < x.rows; ++i) {
        const double* xr = x.row(i);
        double* outr = out.row(i);
        for (int k = 0; k < x.cols; ++k) {
            double xv = xr[k];
            if (xv == 0.0) continue;
            const double* wr = w.row(k);
            for (int j = 0; j < w.cols; ++j) outr[j] += xv * wr[j];
        }
    }
}

// out (+)= x (m×k) · wᵀ (n×k) → m×n
inline void matmul_nt(const Mat& x, const Mat& w, Mat& out, bool accumulate = false) {
    assert(x.cols == w.cols && out.rows == x.rows && out.cols == w.rows);
    for (int i = 0; i < x.rows; ++i) {
        const double* xr = x.row(i);
        double* outr = out.row(i);
        for (int j = 0; j < w.rows; ++j) {
            const double* wr = w.row(j);
            double s = 0.0;
            for (int k = 0; k < x.cols; ++k) s += xr[k] * wr[k];
            if (accumulate) outr[j] += s; else outr[j] = s;
        }
    }
}

// out (+)= xᵀ (m×k seen as k×m) · y (m×n) → k×n. The weight-gradient shape.
inline void matmul_tn(const Mat& x, const Mat& y, Mat& out, bool accumulate = true) {
    assert(x.rows == y.rows && out.rows == x.cols && out.cols == y.cols);
    if (!accumulate) out.zero();
    for (int i = 0; i < x.rows; ++i) {
        const double* xr = x.row(i);
        const double* yr = y.row(i);
        for (int k = 0; k < x.cols; ++k) {
            double xv = xr[k];
            if (xv == 0.0) continue;
            double* outr = out.row(k);
            for (int j = 0; j < y.cols; ++j) outr[j] += xv * yr[j];
        }
    }
}

// y.row(i) += b (b is 1×n)
inline void add_bias(Mat& y, const Mat& b) {
    assert(b.rows == 1 && b.cols == y.cols);
    for (int i = 0; i < y.rows; ++i) {
        double* yr = y.row(i);
        for (int j = 0; j < y.cols; ++j) yr[j] += b.row(0)[j];
    }
}

// db += column sums of dy
inline void bias_grad(const Mat& dy, Mat& db) {
    assert(db.rows == 1 && db.cols == dy.cols);
    for (int i = 0; i < dy.rows; ++i) {
        const double* r = dy.row(i);
        for (int j = 0; j < dy.cols; ++j) db.row(0)[j] += r[j];
    }
}

inline bool mat_finite(const Mat& m) {
    for (double v : m.a) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace cmix
