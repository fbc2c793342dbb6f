// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmdlab/cascade.hpp"
#include "rmdlab/grid.hpp"
#include "rmdlab/net.hpp"
#include "rmdlab/schedule.hpp"
#include "rmdlab/transition.hpp"

namespace rmdlab {

struct RmdConfig {
    std::vector<double> thresholds{-2.5};  // logSNR, K-1 entries
    std::vector<int> resolutions{8, 16};
    double flow_shift = 1.0;
    double t_max = 1000.0;
    int steps = 4;  // generator inference steps N
    double alpha = 0.2;
    double alpha_inference = 1.0;
    std::vector<double> lambda_r;       // per-stage weights; empty = 1 for every stage
    std::vector<double> stage_weights;  // stage sampling weights; empty = uniform
    double snr_clamp_lo = 1e-4;
    double snr_clamp_hi = 1e4;
    int warmup_steps = 50;
    int train_steps = 500;
    int batch = 8;
    double lr_generator = 2e-4;
    double lr_fake = 1e-3;
    double beta1 = 0.0;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    double clip_norm = 1.0;
    double huber_coeff = 0.00054;  // C = huber_coeff * sqrt(d)
    // false: distill with single-resolution states only (K = 1 at r_K); the
    // partition above is still used at inference.
    bool cross_resolution = true;
    int checkpoint_every = 0;  // 0 = only the final checkpoint

    int num_stages() const { return static_cast<int>(resolutions.size()); }
    double lambda(int stage) const;
    double stage_weight(int stage) const;
    /// Throws std::invalid_argument naming the offending key.
    void validate() const;
    /// Partition used for cascaded inference.
    TrajectoryPartition partition() const;
    /// Partition whose stages are distilled (single stage at r_K when
    /// cross_resolution is off).
    TrajectoryPartition training_partition() const;
};

enum class DistillPhase { warmup, full };

struct DistillState {
    DenoiserNet generator;
    DenoiserNet fake;
    AdamW opt_generator;
    AdamW opt_fake;
    std::int64_t step = 0;

    DistillPhase phase(const RmdConfig& cfg) const {
        return step < cfg.warmup_steps ? DistillPhase::warmup : DistillPhase::full;
    }
};

/// Generator and fake score both start as copies of the teacher.
DistillState init_distill_state(const DenoiserNet& teacher, const RmdConfig& cfg);

/// Cascaded run with G, recording every noisy state before its denoise step
/// together with the tapes needed to differentiate through it.
CascadeRun generate_cascade_states(const DenoiserNet& generator, std::optional<int> class_id,
                                   const TrajectoryPartition& p, int steps, double alpha_inference, SeededRng& rng);

/// Projects the state (x, sigma_state) to r_K and re-noises it at sigma_target.
/// The state's own velocity prediction is supplied so no extra forward pass is needed.
RenoiseResult upsample_transform(const ImageGrid& state, const ImageGrid& velocity, double sigma_state,
                                 double sigma_target, int final_resolution, double alpha, const ImageGrid& eps);
/// Convenience form that evaluates G at the state and draws eps from rng.
RenoiseResult upsample_transform(const DenoiserNet& generator, std::optional<int> class_id, const ImageGrid& state,
                                 double sigma_state, double sigma_target, int final_resolution, double alpha,
                                 SeededRng& rng);

/// sqrt(|r|^2 + C^2) - C and its gradient r / sqrt(|r|^2 + C^2).
double pseudo_huber(std::span<const double> r, double c);
std::vector<double> pseudo_huber_grad(std::span<const double> r, double c);
double huber_constant(double coeff, std::size_t dims);

struct GeneratorLoss {
    double loss = 0.0;
    ImageGrid grad;           // d loss / d x_high
    double residual_norm = 0.0;
};

/// Distribution-matching loss on x_high at noise level sigma. Clean-estimate
/// surrogates from fake and teacher are evaluated as constants; only x_high
/// receives gradient.
GeneratorLoss generator_loss(const ImageGrid& x_high, double sigma, const DenoiserNet& fake,
                             const DenoiserNet& teacher, std::optional<int> class_id, double huber_coeff = 0.00054);

double snr_weight(double sigma_stage, double lo, double hi);

struct FakeLoss {
    double loss = 0.0;
    GradientVector grad;
};

/// lambda_snr(sigma_stage) * |x - sigma fake(x, sigma) - clean_target|^2 / d.
FakeLoss fake_score_loss(const DenoiserNet& fake, const ImageGrid& x_high, double sigma,
                         const ImageGrid& clean_target, double sigma_stage, std::optional<int> class_id,
                         double clamp_lo = 1e-4, double clamp_hi = 1e4);

struct StageDraw {
    int stage = 1;
    Timestep shifted;  // uniform in the stage's shifted interval
    Timestep teacher;  // the same point mapped back to teacher space
};

/// Stage index from the configured weights (restricted to the first
/// max(1, floor(K/2)) stages during warm-up), then t uniform in its shifted interval.
StageDraw sample_stage_and_timestep(const TrajectoryPartition& p, DistillPhase phase,
                                    std::span<const double> stage_weights, SeededRng& rng);

struct StepLog {
    std::int64_t step = 0;
    DistillPhase phase = DistillPhase::warmup;
    int stage = 1;
    double t_shifted = 0.0;
    double t_teacher = 0.0;
    double generator_loss = 0.0;
    double fake_loss = 0.0;
    double generator_grad_norm = 0.0;
    double fake_grad_norm = 0.0;
};

class DistillDiverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Index of the recorded state used for a draw: the stage's state with the
/// smallest shifted timestep >= t, or the stage's first state.
std::size_t select_state(const CascadeRun& run, const StageDraw& draw);

/// One distillation iteration: cascade states, one (stage, t) draw, fake-score
/// update, then generator update through the cascade.
StepLog train_step(DistillState& state, const DenoiserNet& teacher, const TrajectoryPartition& train_partition,
                   const RmdConfig& cfg, std::span<const int> class_ids, SeededRng& rng);

struct DistillResult {
    DistillState state;
    std::vector<StepLog> log;
};

using CheckpointHook = std::function<void(const DistillState&)>;

DistillResult train(const DenoiserNet& teacher, const RmdConfig& cfg, std::uint64_t seed,
                    const CheckpointHook& on_checkpoint = {});

void write_distill_log(const std::filesystem::path& path, const std::vector<StepLog>& log);

}  // namespace rmdlab
