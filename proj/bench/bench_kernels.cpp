// Timing comparison of the serial reference kernels against the OpenMP
// kernels, plus a bitwise equality check on each problem size.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <vector>

#include <omp.h>

#include "fdsim/kernels.hpp"
#include "fdsim/rng.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const auto& fn, int reps) {
    fn();  // warm up
    const auto start = Clock::now();
    for (int i = 0; i < reps; ++i) fn();
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count() / reps;
}

void bench_size(std::size_t m, std::size_t k, std::size_t n, int reps) {
    fdsim::Rng rng(42);
    std::vector<double> a(m * k), b(k * n), c_serial(m * n), c_omp(m * n);
    for (double& v : a) v = rng.gaussian();
    for (double& v : b) v = rng.gaussian();

    const double serial_ms = time_ms(
        [&] { fdsim::kernels::serial::matmul(a.data(), b.data(), c_serial.data(), m, k, n); },
        reps);
    const double omp_ms = time_ms(
        [&] { fdsim::kernels::matmul(a.data(), b.data(), c_omp.data(), m, k, n); }, reps);
    const bool bitwise = std::memcmp(c_serial.data(), c_omp.data(), m * n * sizeof(double)) == 0;

    std::printf("matmul %4zu x %4zu x %4zu  serial %8.3f ms  omp %8.3f ms  speedup %5.2fx  %s\n",
                m, k, n, serial_ms, omp_ms, serial_ms / omp_ms,
                bitwise ? "bitwise-equal" : "MISMATCH");
}

}  // namespace

int main() {
    std::printf("threads: %d\n", omp_get_max_threads());
    bench_size(64, 64, 64, 50);
    bench_size(128, 784, 64, 20);
    bench_size(256, 256, 256, 10);
    bench_size(512, 512, 512, 5);
    bench_size(1024, 256, 1024, 3);
    return 0;
}
