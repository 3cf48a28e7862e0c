#pragma once

#include <cstddef>

namespace fdsim::kernels {

// Serial reference kernels. These are the plain triple-loop definitions,
// kept both as the fallback path and as the comparison target for the
// OpenMP kernels in tests and benchmarks.
namespace serial {

// c[m x n] = a[m x k] * b[k x n]
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);

// c[m x n] = a[k x m]^T * b[k x n]
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);

// c[m x n] = a[m x k] * b[n x k]^T
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);

}  // namespace serial

// OpenMP kernels. Parallelized over output rows; every output element is
// accumulated by exactly one thread in the same order as the serial
// reference, so results are bitwise identical.
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n);
void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);
void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n);

// Unfolds a zero-padded N x C x H x W input into a
// (N*Ho*Wo) x (C*K*K) matrix, Ho = H + 2*pad - K + 1.
void im2col(const double* input, double* cols,
            std::size_t n, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kernel, std::size_t pad);

// Adjoint of im2col: folds column gradients back onto the input layout,
// accumulating into `input_grad` (caller zeroes it).
void col2im(const double* cols, double* input_grad,
            std::size_t n, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kernel, std::size_t pad);

}  // namespace fdsim::kernels
