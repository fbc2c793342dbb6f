// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace rmdlab {

/// Log signal-to-noise ratio of the rectified-flow interpolation.
struct LogSnr {
    double value = 0.0;
};

/// Fraction of noise in x_t = (1 - sigma) x0 + sigma eps. 1 is pure noise.
struct Sigma {
    double value = 0.0;
};

/// Continuous timestep in [0, t_max]; t = t_max * sigma.
struct Timestep {
    double value = 0.0;
};

struct TimestepInterval {
    Timestep lo;
    Timestep hi;

    bool contains(Timestep t) const { return t.value >= lo.value && t.value <= hi.value; }
    double width() const { return hi.value - lo.value; }
};

struct ResolutionStage {
    int index = 1;  // 1-based
    int resolution = 0;
    TimestepInterval teacher;
    TimestepInterval shifted;
};

struct TrajectoryPartition {
    std::vector<ResolutionStage> stages;
    std::vector<LogSnr> thresholds;
    double flow_shift = 1.0;
    double t_max = 1000.0;

    int num_stages() const { return static_cast<int>(stages.size()); }
    int final_resolution() const { return stages.back().resolution; }
    const ResolutionStage& stage(int index) const { return stages.at(static_cast<std::size_t>(index - 1)); }

    Sigma to_sigma(Timestep t) const { return {t.value / t_max}; }
    Timestep to_timestep(Sigma s) const { return {s.value * t_max}; }
};

struct StageTimestep {
    int stage = 1;
    Timestep shifted;
};

struct ScheduleEntry {
    int step = 0;
    int stage = 1;
    int resolution = 0;
    Timestep teacher;  // unshifted, after flow shift
    Timestep shifted;  // resolution-shifted timestep actually fed to the model
    Sigma sigma;       // sigma of the shifted timestep
};

// Scalar conversions.
Sigma logsnr_to_sigma(LogSnr l);
LogSnr sigma_to_logsnr(Sigma s);  // throws std::domain_error unless 0 < s < 1
LogSnr shift_logsnr(LogSnr l, int r_i, int r_k);
Sigma apply_flow_shift(double u, double shift);

/// Resolution shift applied to a noise level. Endpoints 0 and 1 are fixed
/// points; interior values go through the logSNR route.
Sigma shift_sigma(Sigma s, int r_i, int r_k);
/// Inverse of shift_sigma (student timestep back to teacher timestep).
Sigma unshift_sigma(Sigma s, int r_i, int r_k);

TrajectoryPartition build_partition(std::span<const LogSnr> thresholds, std::span<const int> resolutions,
                                    double flow_shift = 1.0, double t_max = 1000.0);

/// Stage whose teacher interval contains t. A boundary timestep belongs to
/// the earlier (noisier) stage.
int stage_of(Timestep t, const TrajectoryPartition& p);

StageTimestep map_timestep(Timestep t, const TrajectoryPartition& p);
Timestep unmap_timestep(int stage, Timestep shifted, const TrajectoryPartition& p);

/// N uniform fractions u_j = 1 - j/N, flow-shifted, then mapped to stages.
std::vector<ScheduleEntry> inference_schedule(int n_steps, const TrajectoryPartition& p);

/// Steps per stage for a given schedule (index 0 is stage 1).
std::vector<int> steps_per_stage(std::span<const ScheduleEntry> schedule, int num_stages);

}  // namespace rmdlab
