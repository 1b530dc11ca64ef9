// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "nvib/matrix.hpp"

// Dense kernels used by the autodiff tape and the model forward passes.
// The default entry points parallelise over independent output rows with
// OpenMP; each output element is produced by exactly one thread with a
// serial inner loop, so results are bitwise identical to the serial
// reference implementations in kernels::ref regardless of thread count.
namespace nvib::kernels {

void set_threads(int n);
int max_threads();

// out = a * b
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
// out = a * b^T
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out);
// out = a^T * b
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& out);

void add(const Matrix& a, const Matrix& b, Matrix& out);
void hadamard(const Matrix& a, const Matrix& b, Matrix& out);
// y += alpha * x
void axpy(double alpha, const Matrix& x, Matrix& y);

void map_exp(const Matrix& a, Matrix& out);
void map_log(const Matrix& a, Matrix& out);

// Row-wise softmax. `mask` is empty (no masking), cols() long (column mask
// shared by all rows) or rows()*cols() long (full mask). Masked entries get
// weight exactly 0. A row whose unmasked set is empty is reported through
// the return value (index of first bad row, -1 if none).
int softmax_rows(const Matrix& logits, const std::vector<std::uint8_t>& mask, Matrix& out);

// Row-wise layer normalisation with learned gain/bias (both 1 x cols).
// xhat/inv_std are optional outputs consumed by the backward pass.
void layer_norm_rows(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps,
                     Matrix& out, Matrix* xhat, Matrix* inv_std);

// Serial reference implementations, kept for testing and benchmarking.
namespace ref {
void matmul(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& out);
void matmul_tn(const Matrix& a, const Matrix& b, Matrix& out);
void add(const Matrix& a, const Matrix& b, Matrix& out);
void hadamard(const Matrix& a, const Matrix& b, Matrix& out);
int softmax_rows(const Matrix& logits, const std::vector<std::uint8_t>& mask, Matrix& out);
void layer_norm_rows(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps,
                     Matrix& out, Matrix* xhat, Matrix* inv_std);
}  // namespace ref

}  // namespace nvib::kernels
