// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmdlab/data.hpp"
#include "rmdlab/grid.hpp"
#include "rmdlab/net.hpp"

namespace rmdlab {

/// Rectified-flow interpolation (1 - sigma) x0 + sigma eps.
ImageGrid add_noise(const ImageGrid& x0, const ImageGrid& eps, double sigma);

struct LossAndGrad {
    double loss = 0.0;
    GradientVector grad;
};

/// Flow-matching loss for one image: sigma ~ U(0,1), eps ~ N(0,I), MSE between
/// the prediction and the velocity eps - x0.
LossAndGrad teacher_loss(const DenoiserNet& net, const ImageGrid& x0, std::optional<int> class_id, SeededRng& rng);

/// Same loss at a fixed (sigma, eps); used for validation and tests.
LossAndGrad teacher_loss_at(const DenoiserNet& net, const ImageGrid& x0, std::optional<int> class_id, double sigma,
                            const ImageGrid& eps, bool with_grad = true);

struct TeacherConfig {
    int low_steps = 1500;   // phase 1: low tier
    int high_steps = 4000;  // phase 2: high tier
    int batch = 16;
    AdamWConfig optim{1e-3, 0.9, 0.999, 1e-8, 0.0, 1.0};
    int validation_count = 96;  // held-out high-tier images for the validation loss
    double ema_decay = 0.999;   // weight average returned per phase; 0 = final iterate
};

struct TeacherLogRow {
    int phase = 1;  // 1 = low tier, 2 = high tier
    int step = 0;   // global step
    double loss = 0.0;
    double grad_norm = 0.0;
};

struct TeacherModel {
    DenoiserNet net;
    std::vector<int> trained_resolutions;
    std::vector<TeacherLogRow> log;
    // High-resolution validation loss at the end of each phase (NaN if the phase was skipped).
    double val_loss_after_low = 0.0;
    double val_loss_after_high = 0.0;
};

class TrainingDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Held-out high-resolution flow-matching loss with a fixed stratified sigma
/// grid and fixed noise: a deterministic function of (net, images, seed).
double validation_loss(const DenoiserNet& net, std::span<const ShapeSample> samples, std::uint64_t seed);

/// Two-phase curriculum: low tier first, then the curated high tier. The last
/// `validation_count` high-tier samples are held out.
TeacherModel train_teacher(const Dataset& dataset, const NetSpec& spec, const TeacherConfig& cfg, std::uint64_t seed);

void write_teacher_log(const std::filesystem::path& path, const std::vector<TeacherLogRow>& log);

/// N+1 sigmas 1, 1-1/N, ..., 1/N, 0.
std::vector<double> uniform_sigma_schedule(int steps);

/// Euler integration of the flow ODE from pure noise along `sigmas`
/// (strictly decreasing, starting at 1, ending at 0).
ImageGrid euler_sample(const DenoiserNet& net, std::optional<int> class_id, int resolution,
                       std::span<const double> sigmas, SeededRng& rng);

/// Class-balanced teacher samples: sample k has class k mod num_classes and
/// noise seed derive_seed(seed, k).
std::vector<ImageGrid> teacher_sample_set(const DenoiserNet& net, int count, int resolution, int steps,
                                          std::uint64_t seed);

}  // namespace rmdlab
