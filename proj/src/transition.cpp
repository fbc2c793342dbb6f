// SPDX-License-Identifier: Apache-2.0
#include "rmdlab/transition.hpp"

#include <cmath>
#include <stdexcept>

namespace rmdlab {

ImageGrid mix_noise(const ImageGrid& predicted, const ImageGrid& gaussian, double alpha) {
    require_same_shape(predicted, gaussian, "mix_noise");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("mix_noise: alpha must lie in [0,1]");
    // Exact endpoints: no 0 * x rounding when one side is switched off.
    if (alpha == 1.0) return predicted;
    if (alpha == 0.0) return gaussian;
    return lincomb(alpha, predicted, std::sqrt(1.0 - alpha * alpha), gaussian);
}

RenoiseResult upsample_renoise(const ImageGrid& x, const ImageGrid& v, double sigma, double sigma_to, int target_res,
                               double alpha, const ImageGrid& eps) {
    require_same_shape(x, v, "upsample_renoise");
    RenoiseResult r;
    r.clean = lincomb(1.0, x, -sigma, v);
    const ImageGrid noise = lincomb(1.0, x, 1.0 - sigma, v);
    r.upsampled_clean = bilinear_upsample(r.clean, target_res, target_res);
    const ImageGrid mixed = mix_noise(bilinear_upsample(noise, target_res, target_res), eps, alpha);
    r.output = lincomb(1.0 - sigma_to, r.upsampled_clean, sigma_to, mixed);
    return r;
}

RenoiseGrad upsample_renoise_backward(const ImageGrid& upstream, double sigma, double sigma_to, double alpha,
                                      int source_h, int source_w) {
    const ImageGrid h = bilinear_upsample_adjoint(upstream, source_h, source_w);
    // out = a U(x - sigma v) + b U(x + (1 - sigma) v) + const, a = 1 - sigma_to, b = sigma_to alpha
    const double a = 1.0 - sigma_to, b = sigma_to * alpha;
    RenoiseGrad g;
    g.state = (a + b) * h;
    g.velocity = (-a * sigma + b * (1.0 - sigma)) * h;
    return g;
}

}  // namespace rmdlab
