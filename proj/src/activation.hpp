// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace rmdlab::detail {

/// out = u * sigmoid(u); the sigmoid values are kept for the backward pass.
void silu_forward(const double* u, double* sig, double* out, std::size_t n);

}  // namespace rmdlab::detail
