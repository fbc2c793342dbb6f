// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "rmdlab/grid.hpp"

namespace rmdlab {

/// alpha * predicted + sqrt(1 - alpha^2) * gaussian.
ImageGrid mix_noise(const ImageGrid& predicted, const ImageGrid& gaussian, double alpha);

/// Upsample-and-renoise map shared by cascaded inference and distillation.
///
/// From a state x at noise level sigma with velocity prediction v:
///   clean  = x - sigma v                  (clean estimate)
///   noise  = x + (1 - sigma) v            (noise implied by the same prediction)
///   out    = (1 - sigma_to) U(clean) + sigma_to mix_noise(U(noise), eps, alpha)
/// eps must already have the target shape.
struct RenoiseResult {
    ImageGrid clean;            // at the source resolution
    ImageGrid upsampled_clean;  // U(clean)
    ImageGrid output;
};
RenoiseResult upsample_renoise(const ImageGrid& x, const ImageGrid& v, double sigma, double sigma_to, int target_res,
                               double alpha, const ImageGrid& eps);

/// Vector-Jacobian product of upsample_renoise's output w.r.t. x and v.
struct RenoiseGrad {
    ImageGrid state;
    ImageGrid velocity;
};
RenoiseGrad upsample_renoise_backward(const ImageGrid& upstream, double sigma, double sigma_to, double alpha,
                                      int source_h, int source_w);

}  // namespace rmdlab
