#include "fdsim/kernels.hpp"

#include <cstring>

namespace fdsim::kernels {

namespace serial {

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        std::memset(crow, 0, n * sizeof(double));
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        std::memset(crow, 0, n * sizeof(double));
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[p * m + i];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] = acc;
        }
    }
}

}  // namespace serial

void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        double* crow = c + static_cast<std::size_t>(i) * n;
        std::memset(crow, 0, n * sizeof(double));
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[static_cast<std::size_t>(i) * k + p];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        double* crow = c + static_cast<std::size_t>(i) * n;
        std::memset(crow, 0, n * sizeof(double));
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[p * m + static_cast<std::size_t>(i)];
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c,
               std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
        const double* arow = a + static_cast<std::size_t>(i) * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            c[static_cast<std::size_t>(i) * n + j] = acc;
        }
    }
}

void im2col(const double* input, double* cols,
            std::size_t n, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kernel, std::size_t pad) {
    const std::size_t ho = h + 2 * pad - kernel + 1;
    const std::size_t wo = w + 2 * pad - kernel + 1;
    const std::size_t row_len = c * kernel * kernel;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t img = 0; img < static_cast<std::ptrdiff_t>(n); ++img) {
        const double* in = input + static_cast<std::size_t>(img) * c * h * w;
        double* out = cols + static_cast<std::size_t>(img) * ho * wo * row_len;
        for (std::size_t y = 0; y < ho; ++y) {
            for (std::size_t x = 0; x < wo; ++x) {
                double* row = out + (y * wo + x) * row_len;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t ky = 0; ky < kernel; ++ky) {
                        const std::ptrdiff_t sy =
                            static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
                        for (std::size_t kx = 0; kx < kernel; ++kx) {
                            const std::ptrdiff_t sx =
                                static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad);
                            double v = 0.0;
                            if (sy >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
                                sx >= 0 && sx < static_cast<std::ptrdiff_t>(w)) {
                                v = in[(ch * h + static_cast<std::size_t>(sy)) * w +
                                       static_cast<std::size_t>(sx)];
                            }
                            row[(ch * kernel + ky) * kernel + kx] = v;
                        }
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, double* input_grad,
            std::size_t n, std::size_t c, std::size_t h, std::size_t w,
            std::size_t kernel, std::size_t pad) {
    const std::size_t ho = h + 2 * pad - kernel + 1;
    const std::size_t wo = w + 2 * pad - kernel + 1;
    const std::size_t row_len = c * kernel * kernel;
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t img = 0; img < static_cast<std::ptrdiff_t>(n); ++img) {
        const double* in = cols + static_cast<std::size_t>(img) * ho * wo * row_len;
        double* out = input_grad + static_cast<std::size_t>(img) * c * h * w;
        for (std::size_t y = 0; y < ho; ++y) {
            for (std::size_t x = 0; x < wo; ++x) {
                const double* row = in + (y * wo + x) * row_len;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    for (std::size_t ky = 0; ky < kernel; ++ky) {
                        const std::ptrdiff_t sy =
                            static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
                        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t kx = 0; kx < kernel; ++kx) {
                            const std::ptrdiff_t sx =
                                static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad);
                            if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(w)) continue;
                            out[(ch * h + static_cast<std::size_t>(sy)) * w +
                                static_cast<std::size_t>(sx)] +=
                                row[(ch * kernel + ky) * kernel + kx];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace fdsim::kernels
