// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "rmdlab/grid.hpp"

namespace rmdlab {

/// One 3x3 "same" convolution. Nonlinear layers are followed by a
/// noise-level/class modulation (per-channel scale and offset) and SiLU.
struct LayerSpec {
    int in_channels = 1;
    int out_channels = 1;
    int dilation = 1;
    bool nonlinear = true;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetSpec {
    std::vector<LayerSpec> layers;
    int embed_dim = 16;   // even; sinusoidal sigma features
    int num_classes = 0;  // 0 = unconditional

    friend bool operator==(const NetSpec&, const NetSpec&) = default;
};

/// Single-channel denoiser: hidden layers of `channels` features with the
/// given dilations, then a linear 3x3 projection back to one channel.
NetSpec make_denoiser_spec(int channels, std::span<const int> dilations, int embed_dim, int num_classes);

/// Flat parameter-space vector (gradients, probe directions).
using GradientVector = std::vector<double>;

/// Activations retained by a forward pass for reverse-mode differentiation.
struct ForwardTape {
    GridShape input_shape{};
    int class_id = -1;
    std::vector<double> embedding;
    std::vector<ImageGrid> inputs;  // input of every layer
    std::vector<ImageGrid> pre;     // conv output (nonlinear layers only)
    std::vector<ImageGrid> act_in;  // modulated pre-activation (nonlinear layers only)
    std::vector<ImageGrid> gate;    // sigmoid(act_in)
    std::vector<std::vector<double>> scale;  // 1 + gamma per nonlinear layer
};

/// Fully-convolutional velocity predictor. One parameter vector serves every
/// spatial resolution.
class DenoiserNet {
public:
    explicit DenoiserNet(NetSpec spec);

    const NetSpec& spec() const { return spec_; }
    std::size_t param_count() const { return params_.size(); }
    std::span<const double> params() const { return params_; }
    std::span<double> params() { return params_; }

    void init_random(SeededRng& rng);

    ImageGrid forward(const ImageGrid& x, double sigma, std::optional<int> class_id,
                      ForwardTape* tape = nullptr) const;

    /// Accumulates d<out, upstream>/d(params) into `param_grad` and returns the
    /// input gradient.
    ImageGrid backward(const ForwardTape& tape, const ImageGrid& upstream, std::span<double> param_grad) const;

    struct Gradients {
        GradientVector params;
        ImageGrid input;
    };
    Gradients backward(const ImageGrid& x, double sigma, std::optional<int> class_id,
                       const ImageGrid& upstream) const;

    void save(const std::filesystem::path& path) const;
    static DenoiserNet load(const std::filesystem::path& path);

private:
    struct LayerOffsets {
        std::size_t weights;
        std::size_t bias;
        std::size_t modulation;  // 2*out x embed_dim, valid when nonlinear
    };

    std::vector<double> embed(double sigma, std::optional<int> class_id) const;

    NetSpec spec_;
    std::vector<LayerOffsets> offsets_;
    std::size_t class_offset_ = 0;
    std::vector<double> params_;
};

/// Sinusoidal features of sigma: sin/cos pairs over geometric frequencies.
std::vector<double> sigma_features(double sigma, int dim);

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 1.0;  // <= 0 disables clipping
};

struct StepReport {
    double grad_norm = 0.0;  // before clipping
    bool clipped = false;
    bool skipped = false;  // non-finite gradient
};

class AdamW {
public:
    AdamW(std::size_t n, AdamWConfig cfg);

    StepReport step(std::span<double> params, std::span<const double> grads);

    const AdamWConfig& config() const { return cfg_; }
    std::int64_t steps() const { return t_; }
    std::span<const double> first_moment() const { return m_; }
    std::span<const double> second_moment() const { return v_; }

private:
    AdamWConfig cfg_;
    std::vector<double> m_;
    std::vector<double> v_;
    std::int64_t t_ = 0;
};

double l2_norm(std::span<const double> v);

struct GradientCheckReport {
    double max_relative_error = 0.0;
    int probes = 0;
    bool passed = false;
};

/// Compares backward() with central finite differences of <forward(x), w> along
/// random parameter directions and random input directions.
GradientCheckReport gradient_check(const DenoiserNet& net, double tolerance, std::uint64_t seed = 7,
                                   int probes = 8, double h = 1e-4, GridShape shape = {1, 6, 6});

/// Same as gradient_check but with an externally supplied parameter gradient
/// (negative controls, custom backward implementations).
GradientCheckReport gradient_check_with(const DenoiserNet& net, const ImageGrid& x, double sigma,
                                        std::optional<int> class_id, const ImageGrid& weights,
                                        std::span<const double> param_grad, double tolerance,
                                        std::uint64_t seed = 7, int probes = 8, double h = 1e-4);

}  // namespace rmdlab
