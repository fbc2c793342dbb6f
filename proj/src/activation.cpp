// SPDX-License-Identifier: Apache-2.0
// Built with vectorised libm (see CMakeLists.txt); keep this file free of
// NaN/Inf-sensitive logic.
#include "activation.hpp"

#include <cmath>
#include <cstring>

namespace rmdlab::detail {

namespace {

constexpr std::size_t kLanes = 8;

// Every element goes through the same fixed-width block, so the vector exp is
// used for all of them regardless of how the caller's buffers are aligned
// (peeled scalar iterations would round differently and break bitwise
// reproducibility).
inline void block(const double* __restrict u, double* __restrict sig, double* __restrict out) {
    for (std::size_t i = 0; i < kLanes; ++i) {
        const double s = 1.0 / (1.0 + std::exp(-u[i]));
        sig[i] = s;
        out[i] = u[i] * s;
    }
}

}  // namespace

void silu_forward(const double* u, double* sig, double* out, std::size_t n) {
    alignas(64) double ub[kLanes], sb[kLanes], ob[kLanes];
    for (std::size_t i = 0; i < n; i += kLanes) {
        const std::size_t m = n - i < kLanes ? n - i : kLanes;
        std::memset(ub, 0, sizeof ub);
        std::memcpy(ub, u + i, m * sizeof(double));
        block(ub, sb, ob);
        std::memcpy(sig + i, sb, m * sizeof(double));
        std::memcpy(out + i, ob, m * sizeof(double));
    }
}

}  // namespace rmdlab::detail
