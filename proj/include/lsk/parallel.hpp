#pragma once

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace lsk {

/// Thread cap read from LSK_THREADS; 0 means "leave the runtime default".
inline int thread_cap_from_env() {
    const char* env = std::getenv("LSK_THREADS");
    if (env == nullptr || *env == '\0') return 0;
    try {
        int n = std::stoi(env);
        return n > 0 ? n : 0;
    } catch (...) {
        return 0;
    }
}

inline void set_num_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

inline int num_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline void apply_thread_env() { set_num_threads(thread_cap_from_env()); }

}  // namespace lsk
