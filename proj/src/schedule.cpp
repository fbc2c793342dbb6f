// SPDX-License-Identifier: Apache-2.0
#include "rmdlab/schedule.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace rmdlab {

Sigma logsnr_to_sigma(LogSnr l) {
    if (std::isinf(l.value)) {
        return {l.value > 0 ? 0.0 : 1.0};
    }
    // 1 / (1 + exp(l/2)) written to stay accurate for large |l|.
    const double h = 0.5 * l.value;
    if (h >= 0) {
        const double e = std::exp(-h);
        return {e / (1.0 + e)};
    }
    return {1.0 / (1.0 + std::exp(h))};
}

LogSnr sigma_to_logsnr(Sigma s) {
    if (!(s.value > 0.0 && s.value < 1.0)) {
        throw std::domain_error("sigma_to_logsnr: sigma must lie strictly inside (0, 1), got " +
                                std::to_string(s.value));
    }
    return {2.0 * (std::log1p(-s.value) - std::log(s.value))};
}

LogSnr shift_logsnr(LogSnr l, int r_i, int r_k) {
    if (r_i <= 0 || r_k <= 0) {
        throw std::invalid_argument("shift_logsnr: resolutions must be positive");
    }
    if (r_i == r_k) {
        return l;
    }
    return {l.value + 2.0 * std::log(static_cast<double>(r_i) / static_cast<double>(r_k))};
}

Sigma apply_flow_shift(double u, double shift) {
    if (u < 0.0 || u > 1.0) {
        throw std::domain_error("apply_flow_shift: u must lie in [0, 1]");
    }
    if (shift < 1.0) {
        throw std::domain_error("apply_flow_shift: shift must be >= 1");
    }
    if (shift == 1.0) {
        return {u};
    }
    return {shift * u / (1.0 + (shift - 1.0) * u)};
}

Sigma shift_sigma(Sigma s, int r_i, int r_k) {
    if (r_i == r_k || s.value <= 0.0 || s.value >= 1.0) {
        return s;
    }
    return logsnr_to_sigma(shift_logsnr(sigma_to_logsnr(s), r_i, r_k));
}

Sigma unshift_sigma(Sigma s, int r_i, int r_k) {
    if (r_i == r_k || s.value <= 0.0 || s.value >= 1.0) {
        return s;
    }
    return logsnr_to_sigma(shift_logsnr(sigma_to_logsnr(s), r_k, r_i));
}

TrajectoryPartition build_partition(std::span<const LogSnr> thresholds, std::span<const int> resolutions,
                                    double flow_shift, double t_max) {
    if (resolutions.size() != thresholds.size() + 1) {
        throw std::invalid_argument("build_partition: need exactly one more resolution than thresholds");
    }
    for (std::size_t i = 0; i < resolutions.size(); ++i) {
        if (resolutions[i] <= 0) {
            throw std::invalid_argument("build_partition: resolutions must be positive");
        }
        if (i > 0 && resolutions[i] <= resolutions[i - 1]) {
            throw std::invalid_argument("build_partition: resolutions must be strictly increasing");
        }
    }
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
        if (!std::isfinite(thresholds[i].value)) {
            throw std::invalid_argument("build_partition: thresholds must be finite");
        }
        if (i > 0 && thresholds[i].value <= thresholds[i - 1].value) {
            throw std::invalid_argument("build_partition: thresholds must be strictly increasing in logSNR");
        }
    }
    if (flow_shift < 1.0) {
        throw std::invalid_argument("build_partition: flow_shift must be >= 1");
    }
    if (!(t_max > 0.0)) {
        throw std::invalid_argument("build_partition: t_max must be positive");
    }

    TrajectoryPartition p;
    p.thresholds.assign(thresholds.begin(), thresholds.end());
    p.flow_shift = flow_shift;
    p.t_max = t_max;

    // Boundary timesteps from the noisiest end: T_0 = t_max, T_K = 0.
    std::vector<double> bounds;
    bounds.push_back(t_max);
    for (const LogSnr& l : thresholds) {
        bounds.push_back(t_max * logsnr_to_sigma(l).value);
    }
    bounds.push_back(0.0);

    const int r_k = resolutions.back();
    for (std::size_t i = 0; i < resolutions.size(); ++i) {
        ResolutionStage st;
        st.index = static_cast<int>(i) + 1;
        st.resolution = resolutions[i];
        st.teacher = {{bounds[i + 1]}, {bounds[i]}};
        st.shifted = {p.to_timestep(shift_sigma(p.to_sigma(st.teacher.lo), st.resolution, r_k)),
                      p.to_timestep(shift_sigma(p.to_sigma(st.teacher.hi), st.resolution, r_k))};
        p.stages.push_back(st);
    }
    return p;
}

int stage_of(Timestep t, const TrajectoryPartition& p) {
    // Stage i owns (T_i, T_{i-1}]; stage 1 additionally owns t_max and the
    // last stage owns 0.
    int stage = 1;
    for (std::size_t k = 1; k < p.stages.size(); ++k) {
        if (t.value < p.stages[k - 1].teacher.lo.value) {
            stage = static_cast<int>(k) + 1;
        }
    }
    return stage;
}

StageTimestep map_timestep(Timestep t, const TrajectoryPartition& p) {
    if (t.value < 0.0 || t.value > p.t_max) {
        throw std::domain_error("map_timestep: timestep outside [0, t_max]");
    }
    const int stage = stage_of(t, p);
    const int r_i = p.stage(stage).resolution;
    return {stage, p.to_timestep(shift_sigma(p.to_sigma(t), r_i, p.final_resolution()))};
}

Timestep unmap_timestep(int stage, Timestep shifted, const TrajectoryPartition& p) {
    const int r_i = p.stage(stage).resolution;
    return p.to_timestep(unshift_sigma(p.to_sigma(shifted), r_i, p.final_resolution()));
}

std::vector<ScheduleEntry> inference_schedule(int n_steps, const TrajectoryPartition& p) {
    if (n_steps < p.num_stages()) {
        throw std::invalid_argument("inference_schedule: need at least one step per stage (N >= K)");
    }
    std::vector<ScheduleEntry> out;
    out.reserve(static_cast<std::size_t>(n_steps));
    for (int j = 0; j < n_steps; ++j) {
        const double u = 1.0 - static_cast<double>(j) / static_cast<double>(n_steps);
        const Timestep t = p.to_timestep(apply_flow_shift(u, p.flow_shift));
        const StageTimestep m = map_timestep(t, p);
        ScheduleEntry e;
        e.step = j;
        e.stage = m.stage;
        e.resolution = p.stage(m.stage).resolution;
        e.teacher = t;
        e.shifted = m.shifted;
        e.sigma = p.to_sigma(m.shifted);
        out.push_back(e);
    }
    return out;
}

std::vector<int> steps_per_stage(std::span<const ScheduleEntry> schedule, int num_stages) {
    std::vector<int> counts(static_cast<std::size_t>(num_stages), 0);
    for (const ScheduleEntry& e : schedule) {
        counts.at(static_cast<std::size_t>(e.stage - 1)) += 1;
    }
    return counts;
}

}  // namespace rmdlab
