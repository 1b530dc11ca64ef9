// SPDX-License-Identifier: Apache-2.0
//
// Times the OpenMP kernels against the serial reference implementations
// and checks that the results agree bitwise.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include "nvib/kernels.hpp"
#include "nvib/matrix.hpp"
#include "nvib/rng.hpp"

using nvib::Matrix;
using nvib::Rng;

namespace {

Matrix random_matrix(int r, int c, Rng& rng) {
    Matrix m(r, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

template <typename F>
double time_ms(F&& f, int reps) {
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) f();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    return a.same_shape(b) &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

int main(int argc, char** argv) {
    int threads = nvib::kernels::max_threads();
    if (argc > 1) threads = std::atoi(argv[1]);
    nvib::kernels::set_threads(threads);

    Rng rng(7);
    const int reps = 5;
    std::printf("kernel benchmark, %d thread(s) vs serial reference\n", threads);
    std::printf("%-16s %8s %12s %12s %8s %s\n", "kernel", "size", "omp (ms)", "serial (ms)",
                "speedup", "bitwise");

    bool all_ok = true;
    for (int n : {64, 128, 256, 512}) {
        Matrix a = random_matrix(n, n, rng);
        Matrix b = random_matrix(n, n, rng);
        Matrix out_p, out_s;
        const double tp = time_ms([&] { nvib::kernels::matmul(a, b, out_p); }, reps);
        const double ts = time_ms([&] { nvib::kernels::ref::matmul(a, b, out_s); }, reps);
        const bool ok = bitwise_equal(out_p, out_s);
        all_ok = all_ok && ok;
        std::printf("%-16s %4dx%-4d %11.3f %12.3f %7.2fx %s\n", "matmul", n, n, tp, ts,
                    ts / tp, ok ? "yes" : "NO");
    }
    for (int n : {256, 1024}) {
        Matrix a = random_matrix(n, 256, rng);
        std::vector<std::uint8_t> mask;
        Matrix out_p, out_s;
        const double tp = time_ms([&] { nvib::kernels::softmax_rows(a, mask, out_p); }, reps);
        const double ts =
            time_ms([&] { nvib::kernels::ref::softmax_rows(a, mask, out_s); }, reps);
        const bool ok = bitwise_equal(out_p, out_s);
        all_ok = all_ok && ok;
        std::printf("%-16s %4dx%-4d %11.3f %12.3f %7.2fx %s\n", "softmax_rows", n, 256, tp, ts,
                    ts / tp, ok ? "yes" : "NO");
    }
    for (int n : {256, 1024}) {
        Matrix x = random_matrix(n, 256, rng);
        Matrix gain(1, 256, 1.0), bias(1, 256, 0.0);
        Matrix out_p, out_s;
        const double tp = time_ms(
            [&] { nvib::kernels::layer_norm_rows(x, gain, bias, 1e-5, out_p, nullptr, nullptr); },
            reps);
        const double ts = time_ms(
            [&] {
                nvib::kernels::ref::layer_norm_rows(x, gain, bias, 1e-5, out_s, nullptr, nullptr);
            },
            reps);
        const bool ok = bitwise_equal(out_p, out_s);
        all_ok = all_ok && ok;
        std::printf("%-16s %4dx%-4d %11.3f %12.3f %7.2fx %s\n", "layer_norm_rows", n, 256, tp,
                    ts, ts / tp, ok ? "yes" : "NO");
    }

    if (!all_ok) {
        std::printf("FAIL: parallel and serial kernels disagree\n");
        return 1;
    }
    return 0;
}
