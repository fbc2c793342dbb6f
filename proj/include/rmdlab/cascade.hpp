// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "rmdlab/grid.hpp"
#include "rmdlab/net.hpp"
#include "rmdlab/schedule.hpp"

namespace rmdlab {

/// One step of the cascade plan: denoise at (stage, shifted timestep), then
/// either Euler-step to sigma_next within the stage or, on a transition,
/// upsample to next_resolution and re-noise at sigma_next.
struct CascadeStep {
    ScheduleEntry entry;
    bool transition = false;
    double sigma_next = 0.0;
    int next_resolution = 0;
};

/// Throws std::invalid_argument when N < K or when the schedule leaves a stage
/// without steps (the state machine could not visit it).
std::vector<CascadeStep> plan_cascade(const TrajectoryPartition& p, int steps);

struct TraceRecord {
    int step = 0;
    int stage = 1;
    double teacher_t = 0.0;
    double shifted_t = 0.0;
    double sigma = 0.0;
    int resolution = 0;
    bool transition = false;  // this step ends by moving to the next stage
};

struct InferenceTrace {
    std::vector<TraceRecord> records;
    GridShape final_shape{};
};

/// Throws std::logic_error naming the first violated invariant.
void validate_trace(const InferenceTrace& trace, const TrajectoryPartition& p, int steps);

void write_trace_csv(const std::filesystem::path& path, const InferenceTrace& trace);

struct CascadeParams {
    TrajectoryPartition partition;
    int steps = 4;
    double alpha_inference = 1.0;
    std::optional<int> class_id;
    std::uint64_t seed = 0;
};

/// Velocity predictor interface: (x, sigma, tape or null) -> v.
using VelocityFn = std::function<ImageGrid(const ImageGrid&, double, ForwardTape*)>;

/// Full record of a run, kept for reverse-mode differentiation.
struct CascadeRecord {
    CascadeStep plan;
    ImageGrid state;     // noisy state before the step
    ImageGrid velocity;  // prediction at that state
    ForwardTape tape;    // filled when tapes were requested
    ImageGrid noise;     // fresh Gaussian injected at a transition
};

struct CascadeRun {
    std::vector<CascadeRecord> steps;
    ImageGrid output;
    InferenceTrace trace;
    double alpha = 1.0;  // noise-mix weight used at transitions
};

/// Runs the multi-resolution state machine. Initial noise at r_1 and one fresh
/// Gaussian per transition are drawn from `rng` in step order.
CascadeRun run_cascade(const VelocityFn& predict, const TrajectoryPartition& p, int steps, double alpha,
                       SeededRng& rng, bool keep_tapes);
CascadeRun run_cascade(const DenoiserNet& net, const TrajectoryPartition& p, int steps, double alpha,
                       std::optional<int> class_id, SeededRng& rng, bool keep_tapes);

/// Backpropagates a gradient on the state entering step `upto` (or on the
/// final output when upto == steps.size()) to the generator parameters.
/// Requires a run recorded with tapes.
void backprop_cascade(const DenoiserNet& net, const CascadeRun& run, std::size_t upto, ImageGrid grad,
                      std::span<double> param_grad);

struct CascadeResult {
    ImageGrid image;
    InferenceTrace trace;
};

/// Distilled-generator inference; the trace is validated before returning.
CascadeResult infer(const DenoiserNet& generator, const CascadeParams& p);
/// Same state machine driven by the undistilled teacher (ablation control).
CascadeResult naive_cascade_infer(const DenoiserNet& teacher, const CascadeParams& p);

/// Class-balanced sample set: sample k has class k mod num_classes and seed
/// derive_seed(seed, k).
std::vector<ImageGrid> cascade_sample_set(const DenoiserNet& net, const TrajectoryPartition& p, int steps,
                                          double alpha, int count, std::uint64_t seed);

}  // namespace rmdlab
