#pragma once

#include <cstdlib>
#include <unistd.h>

namespace ibcaps {

// OpenBLAS selects its compute kernels in a library constructor, before
// main() runs.  On some virtualized Xeons the CPU model string defeats the
// auto-detection and the generic SSE3 "Prescott" kernels are chosen even
// though AVX2+FMA are available, roughly halving sgemm throughput.  Pinning
// OPENBLAS_CORETYPE from inside the process is too late, so when the
// variable is unset and the host supports AVX2+FMA we set it and re-exec
// once.  The second exec sees the variable and falls through immediately.
// OPENBLAS_NUM_THREADS defaults to 1: the workloads here are sgemm calls on
// small-to-medium matrices from a single compute thread, where OpenBLAS
// thread fan-out only adds overhead.
inline void pin_blas_kernels(char** argv) {
#if defined(__x86_64__) && defined(__linux__)
    if (std::getenv("OPENBLAS_CORETYPE") == nullptr &&
        __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma")) {
        ::setenv("OPENBLAS_CORETYPE", "HASWELL", 1);
        if (std::getenv("OPENBLAS_NUM_THREADS") == nullptr)
            ::setenv("OPENBLAS_NUM_THREADS", "1", 1);
        ::execv("/proc/self/exe", argv);
        // If the exec fails we keep running with the detected kernels.
    }
#else
    (void)argv;
#endif
}

} // namespace ibcaps
