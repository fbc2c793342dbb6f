// SPDX-License-Identifier: Apache-2.0
#include "rmdlab/cascade.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "rmdlab/parallel.hpp"
#include "rmdlab/transition.hpp"

namespace rmdlab {

std::vector<CascadeStep> plan_cascade(const TrajectoryPartition& p, int steps) {
    const std::vector<ScheduleEntry> sched = inference_schedule(steps, p);
    const int k = p.num_stages();
    if (sched.front().stage != 1 || sched.back().stage != k) {
        throw std::invalid_argument("schedule/partition inconsistency: the " + std::to_string(steps) +
                                    "-step schedule does not start in stage 1 and end in stage " + std::to_string(k));
    }
    std::vector<CascadeStep> plan(sched.size());
    for (std::size_t j = 0; j < sched.size(); ++j) {
        CascadeStep& s = plan[j];
        s.entry = sched[j];
        if (j + 1 == sched.size()) {
            s.sigma_next = 0.0;
            s.next_resolution = s.entry.resolution;
            continue;
        }
        const ScheduleEntry& next = sched[j + 1];
        if (next.stage != s.entry.stage && next.stage != s.entry.stage + 1) {
            throw std::invalid_argument("schedule/partition inconsistency: stage " +
                                        std::to_string(s.entry.stage + 1) + " receives no steps at N=" +
                                        std::to_string(steps));
        }
        // Membership of the next timestep in the current stage (boundary belongs to the earlier stage).
        s.transition = next.stage != s.entry.stage;
        s.sigma_next = next.sigma.value;
        s.next_resolution = next.resolution;
    }
    return plan;
}

void validate_trace(const InferenceTrace& trace, const TrajectoryPartition& p, int steps) {
    const auto& r = trace.records;
    auto fail = [](const std::string& what) { throw std::logic_error("inference trace invariant violated: " + what); };
    if (static_cast<int>(r.size()) != steps) fail("expected " + std::to_string(steps) + " records");
    int transitions = 0;
    for (std::size_t j = 0; j < r.size(); ++j) {
        if (r[j].transition) ++transitions;
        if (j + 1 < r.size()) {
            if (r[j + 1].resolution < r[j].resolution) fail("resolution decreased at step " + std::to_string(j));
            if (!r[j].transition && r[j + 1].resolution != r[j].resolution)
                fail("within-stage step changed resolution at step " + std::to_string(j));
            if (r[j].transition && r[j + 1].stage != r[j].stage + 1)
                fail("transition did not advance exactly one stage at step " + std::to_string(j));
            // Teacher-equivalent logSNR is decreasing in t, so t must strictly decrease.
            if (!(r[j + 1].teacher_t < r[j].teacher_t))
                fail("teacher-equivalent logSNR not increasing at step " + std::to_string(j));
        }
    }
    if (transitions != p.num_stages() - 1) fail("expected K-1 transitions");
    if (r.empty() || r.back().resolution != p.final_resolution() || r.back().transition)
        fail("final resolution differs from r_K");
    if (trace.final_shape.height != p.final_resolution() || trace.final_shape.width != p.final_resolution())
        fail("final sample shape differs from r_K");
}

void write_trace_csv(const std::filesystem::path& path, const InferenceTrace& trace) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << "step,stage,teacher_t,shifted_t,sigma,resolution,transition\n" << std::setprecision(10);
    for (const auto& r : trace.records)
        out << r.step << ',' << r.stage << ',' << r.teacher_t << ',' << r.shifted_t << ',' << r.sigma << ','
            << r.resolution << ',' << (r.transition ? 1 : 0) << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

CascadeRun run_cascade(const VelocityFn& predict, const TrajectoryPartition& p, int steps, double alpha,
                       SeededRng& rng, bool keep_tapes) {
    const std::vector<CascadeStep> plan = plan_cascade(p, steps);
    CascadeRun run;
    run.alpha = alpha;
    run.steps.reserve(plan.size());
    const int r1 = plan.front().entry.resolution;
    ImageGrid x = gaussian_noise(GridShape{1, r1, r1}, rng);
    for (const CascadeStep& s : plan) {
        CascadeRecord rec;
        rec.plan = s;
        rec.state = x;
        const double sigma = s.entry.sigma.value;
        rec.velocity = predict(x, sigma, keep_tapes ? &rec.tape : nullptr);
        if (s.transition) {
            rec.noise = gaussian_noise(GridShape{1, s.next_resolution, s.next_resolution}, rng);
            x = upsample_renoise(x, rec.velocity, sigma, s.sigma_next, s.next_resolution, alpha, rec.noise).output;
        } else {
            x.add_scaled(rec.velocity, -(sigma - s.sigma_next));
        }
        run.trace.records.push_back(TraceRecord{s.entry.step, s.entry.stage, s.entry.teacher.value,
                                                s.entry.shifted.value, sigma, s.entry.resolution, s.transition});
        run.steps.push_back(std::move(rec));
    }
    run.trace.final_shape = x.shape();
    run.output = std::move(x);
    return run;
}

CascadeRun run_cascade(const DenoiserNet& net, const TrajectoryPartition& p, int steps, double alpha,
                       std::optional<int> class_id, SeededRng& rng, bool keep_tapes) {
    const VelocityFn fn = [&](const ImageGrid& x, double sigma, ForwardTape* tape) {
        return net.forward(x, sigma, class_id, tape);
    };
    return run_cascade(fn, p, steps, alpha, rng, keep_tapes);
}

void backprop_cascade(const DenoiserNet& net, const CascadeRun& run, std::size_t upto, ImageGrid grad,
                      std::span<double> param_grad) {
    if (upto > run.steps.size()) throw std::out_of_range("backprop_cascade: step index past the end of the run");
    for (std::size_t j = upto; j-- > 0;) {
        const CascadeRecord& rec = run.steps[j];
        if (rec.tape.inputs.empty()) throw std::logic_error("backprop_cascade: run was recorded without tapes");
        const double sigma = rec.plan.entry.sigma.value;
        if (rec.plan.transition) {
            const RenoiseGrad g = upsample_renoise_backward(grad, sigma, rec.plan.sigma_next, run.alpha,
                                                            rec.state.height(), rec.state.width());
            grad = g.state;
            grad += net.backward(rec.tape, g.velocity, param_grad);
        } else {
            const ImageGrid upstream = -(sigma - rec.plan.sigma_next) * grad;
            grad += net.backward(rec.tape, upstream, param_grad);
        }
    }
}

CascadeResult infer(const DenoiserNet& generator, const CascadeParams& p) {
    SeededRng rng(p.seed);
    CascadeRun run = run_cascade(generator, p.partition, p.steps, p.alpha_inference, p.class_id, rng, false);
    validate_trace(run.trace, p.partition, p.steps);
    return CascadeResult{std::move(run.output), std::move(run.trace)};
}

CascadeResult naive_cascade_infer(const DenoiserNet& teacher, const CascadeParams& p) { return infer(teacher, p); }

std::vector<ImageGrid> cascade_sample_set(const DenoiserNet& net, const TrajectoryPartition& p, int steps,
                                          double alpha, int count, std::uint64_t seed) {
    plan_cascade(p, steps);  // fail fast on an inconsistent schedule
    std::vector<ImageGrid> out(static_cast<std::size_t>(count));
    const int classes = net.spec().num_classes;
    parallel_for(out.size(), [&](std::size_t k) {
        CascadeParams cp{p, steps, alpha, std::nullopt, derive_seed(seed, static_cast<std::uint64_t>(k))};
        if (classes > 0) cp.class_id = static_cast<int>(k % static_cast<std::size_t>(classes));
        out[k] = infer(net, cp).image;
    });
    return out;
}

}  // namespace rmdlab
