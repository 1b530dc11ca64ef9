// SPDX-License-Identifier: Apache-2.0
#include "nvib/kernels.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace nvib::kernels {

namespace {
// Below this many output elements the parallel loop is not worth the fork.
constexpr std::size_t kMinParallelWork = 16384;

inline const std::uint8_t* mask_row(const std::vector<std::uint8_t>& mask, int i, int cols) {
    if (mask.empty()) return nullptr;
    if (static_cast<int>(mask.size()) == cols) return mask.data();
    return mask.data() + static_cast<std::size_t>(i) * cols;
}

inline void softmax_one_row(const double* in, const std::uint8_t* keep, int cols, double* out,
                            bool* ok) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < cols; ++j)
        if (!keep || keep[j]) mx = std::max(mx, in[j]);
    if (!std::isfinite(mx)) {  // empty or fully degenerate row
        *ok = false;
        for (int j = 0; j < cols; ++j) out[j] = 0.0;
        return;
    }
    double denom = 0.0;
    for (int j = 0; j < cols; ++j) {
        if (!keep || keep[j]) {
            out[j] = std::exp(in[j] - mx);
            denom += out[j];
        } else {
            out[j] = 0.0;
        }
    }
    for (int j = 0; j < cols; ++j) out[j] /= denom;
}

inline void layer_norm_one_row(const double* x, const double* gain, const double* bias, int cols,
                               double eps, double* out, double* xh, double* istd) {
    double mean = 0.0;
    for (int j = 0; j < cols; ++j) mean += x[j];
    mean /= cols;
    double var = 0.0;
    for (int j = 0; j < cols; ++j) {
        const double d = x[j] - mean;
        var += d * d;
    }
    var /= cols;
    const double is = 1.0 / std::sqrt(var + eps);
    if (istd) *istd = is;
    for (int j = 0; j < cols; ++j) {
        const double h = (x[j] - mean) * is;
        if (xh) xh[j] = h;
        out[j] = gain[j] * h + bias[j];
    }
}
}  // namespace

void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.cols() == b.rows());
    const int m = a.rows(), k = a.cols(), n = b.cols();
    out = Matrix(m, n);
    const std::size_t work = static_cast<std::size_t>(m) * n * k;
#pragma omp parallel for schedule(static) if (work > kMinParallelWork)
    for (int i = 0; i < m; ++i) {
        const double* ar = a.row(i);
        double* orow = out.row(i);
        for (int l = 0; l < k; ++l) {
            const double av = ar[l];
            const double* br = b.row(l);
            for (int j = 0; j < n; ++j) orow[j] += av * br[j];
        }
    }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.cols() == b.cols());
    const int m = a.rows(), k = a.cols(), n = b.rows();
    out = Matrix(m, n);
    const std::size_t work = static_cast<std::size_t>(m) * n * k;
#pragma omp parallel for schedule(static) if (work > kMinParallelWork)
    for (int i = 0; i < m; ++i) {
        const double* ar = a.row(i);
        double* orow = out.row(i);
        for (int j = 0; j < n; ++j) {
            const double* br = b.row(j);
            double s = 0.0;
            for (int l = 0; l < k; ++l) s += ar[l] * br[l];
            orow[j] = s;
        }
    }
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.rows() == b.rows());
    const int m = a.cols(), k = a.rows(), n = b.cols();
    out = Matrix(m, n);
    const std::size_t work = static_cast<std::size_t>(m) * n * k;
#pragma omp parallel for schedule(static) if (work > kMinParallelWork)
    for (int i = 0; i < m; ++i) {
        double* orow = out.row(i);
        for (int l = 0; l < k; ++l) {
            const double av = a(l, i);
            const double* br = b.row(l);
            for (int j = 0; j < n; ++j) orow[j] += av * br[j];
        }
    }
}

void add(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.same_shape(b));
    out = Matrix(a.rows(), a.cols());
    const std::size_t nelem = a.size();
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
#pragma omp parallel for schedule(static) if (nelem > kMinParallelWork)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(nelem); ++i) po[i] = pa[i] + pb[i];
}

void hadamard(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.same_shape(b));
    out = Matrix(a.rows(), a.cols());
    const std::size_t nelem = a.size();
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
#pragma omp parallel for schedule(static) if (nelem > kMinParallelWork)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(nelem); ++i) po[i] = pa[i] * pb[i];
}

void axpy(double alpha, const Matrix& x, Matrix& y) {
    assert(x.same_shape(y));
    const std::size_t nelem = x.size();
    const double* px = x.data();
    double* py = y.data();
#pragma omp parallel for schedule(static) if (nelem > kMinParallelWork)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(nelem); ++i) py[i] += alpha * px[i];
}

void map_exp(const Matrix& a, Matrix& out) {
    out = Matrix(a.rows(), a.cols());
    const std::size_t nelem = a.size();
    const double* pa = a.data();
    double* po = out.data();
#pragma omp parallel for schedule(static) if (nelem > kMinParallelWork)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(nelem); ++i) po[i] = std::exp(pa[i]);
}

void map_log(const Matrix& a, Matrix& out) {
    out = Matrix(a.rows(), a.cols());
    const std::size_t nelem = a.size();
    const double* pa = a.data();
    double* po = out.data();
#pragma omp parallel for schedule(static) if (nelem > kMinParallelWork)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(nelem); ++i) po[i] = std::log(pa[i]);
}

int softmax_rows(const Matrix& logits, const std::vector<std::uint8_t>& mask, Matrix& out) {
    const int m = logits.rows(), n = logits.cols();
    assert(mask.empty() || static_cast<int>(mask.size()) == n ||
           static_cast<int>(mask.size()) == m * n);
    out = Matrix(m, n);
    int bad = -1;
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(m) * n > kMinParallelWork)
    for (int i = 0; i < m; ++i) {
        bool ok = true;
        softmax_one_row(logits.row(i), mask_row(mask, i, n), n, out.row(i), &ok);
        if (!ok) {
#pragma omp critical
            {
                if (bad < 0 || i < bad) bad = i;
            }
        }
    }
    return bad;
}

void layer_norm_rows(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps,
                     Matrix& out, Matrix* xhat, Matrix* inv_std) {
    const int m = x.rows(), n = x.cols();
    assert(gain.rows() == 1 && gain.cols() == n);
    assert(bias.rows() == 1 && bias.cols() == n);
    out = Matrix(m, n);
    if (xhat) *xhat = Matrix(m, n);
    if (inv_std) *inv_std = Matrix(m, 1);
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(m) * n > kMinParallelWork)
    for (int i = 0; i < m; ++i) {
        layer_norm_one_row(x.row(i), gain.row(0), bias.row(0), n, eps, out.row(i),
                           xhat ? xhat->row(i) : nullptr, inv_std ? &(*inv_std)(i, 0) : nullptr);
    }
}

namespace ref {

void matmul(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.cols() == b.rows());
    const int m = a.rows(), k = a.cols(), n = b.cols();
    out = Matrix(m, n);
    for (int i = 0; i < m; ++i) {
        const double* ar = a.row(i);
        double* orow = out.row(i);
        for (int l = 0; l < k; ++l) {
            const double av = ar[l];
            const double* br = b.row(l);
            for (int j = 0; j < n; ++j) orow[j] += av * br[j];
        }
    }
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.cols() == b.cols());
    const int m = a.rows(), k = a.cols(), n = b.rows();
    out = Matrix(m, n);
    for (int i = 0; i < m; ++i) {
        const double* ar = a.row(i);
        double* orow = out.row(i);
        for (int j = 0; j < n; ++j) {
            const double* br = b.row(j);
            double s = 0.0;
            for (int l = 0; l < k; ++l) s += ar[l] * br[l];
            orow[j] = s;
        }
    }
}

void matmul_tn(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.rows() == b.rows());
    const int m = a.cols(), k = a.rows(), n = b.cols();
    out = Matrix(m, n);
    for (int i = 0; i < m; ++i) {
        double* orow = out.row(i);
        for (int l = 0; l < k; ++l) {
            const double av = a(l, i);
            const double* br = b.row(l);
            for (int j = 0; j < n; ++j) orow[j] += av * br[j];
        }
    }
}

void add(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.same_shape(b));
    out = Matrix(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
}

void hadamard(const Matrix& a, const Matrix& b, Matrix& out) {
    assert(a.same_shape(b));
    out = Matrix(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
}

int softmax_rows(const Matrix& logits, const std::vector<std::uint8_t>& mask, Matrix& out) {
    const int m = logits.rows(), n = logits.cols();
    out = Matrix(m, n);
    for (int i = 0; i < m; ++i) {
        bool ok = true;
        softmax_one_row(logits.row(i), mask_row(mask, i, n), n, out.row(i), &ok);
        if (!ok) return i;
    }
    return -1;
}

void layer_norm_rows(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps,
                     Matrix& out, Matrix* xhat, Matrix* inv_std) {
    const int m = x.rows(), n = x.cols();
    out = Matrix(m, n);
    if (xhat) *xhat = Matrix(m, n);
    if (inv_std) *inv_std = Matrix(m, 1);
    for (int i = 0; i < m; ++i) {
        layer_norm_one_row(x.row(i), gain.row(0), bias.row(0), n, eps, out.row(i),
                           xhat ? xhat->row(i) : nullptr, inv_std ? &(*inv_std)(i, 0) : nullptr);
    }
}

}  // namespace ref

}  // namespace nvib::kernels
