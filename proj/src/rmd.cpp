// SPDX-License-Identifier: Apache-2.0
#include "rmdlab/rmd.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "rmdlab/parallel.hpp"

namespace rmdlab {

namespace {

std::optional<int> as_class(int id) {
    if (id < 0) return std::nullopt;
    return id;
}

std::string tensor_stats(const char* name, const ImageGrid& g) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0;
    std::size_t bad = 0;
    for (double v : g.data()) {
        if (!std::isfinite(v)) {
            ++bad;
            continue;
        }
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        sum += v;
    }
    std::ostringstream os;
    os << name << " [" << g.channels() << "x" << g.height() << "x" << g.width() << "] min=" << lo << " max=" << hi
       << " mean=" << sum / std::max<double>(1.0, static_cast<double>(g.size() - bad)) << " non-finite=" << bad;
    return os.str();
}

void require(bool ok, const std::string& key, const std::string& why) {
    if (!ok) throw std::invalid_argument("rmd." + key + ": " + why);
}

}  // namespace

// ---- config ----

double RmdConfig::lambda(int stage) const {
    if (lambda_r.empty()) return 1.0;
    return lambda_r.at(static_cast<std::size_t>(stage - 1));
}

double RmdConfig::stage_weight(int stage) const {
    if (stage_weights.empty()) return 1.0;
    return stage_weights.at(static_cast<std::size_t>(stage - 1));
}

void RmdConfig::validate() const {
    const int k = num_stages();
    require(k >= 1, "resolutions", "need at least one resolution");
    require(static_cast<int>(thresholds.size()) == k - 1, "thresholds", "need exactly K-1 thresholds");
    require(lambda_r.empty() || static_cast<int>(lambda_r.size()) == k, "lambda_r", "need one weight per stage");
    for (double l : lambda_r) require(l > 0 && std::isfinite(l), "lambda_r", "weights must be positive");
    require(stage_weights.empty() || static_cast<int>(stage_weights.size()) == k, "stage_weights",
            "need one weight per stage");
    for (double w : stage_weights) require(w >= 0 && std::isfinite(w), "stage_weights", "weights must be >= 0");
    require(alpha >= 0 && alpha <= 1, "alpha", "must lie in [0,1]");
    require(alpha_inference >= 0 && alpha_inference <= 1, "alpha_inference", "must lie in [0,1]");
    require(snr_clamp_lo > 0 && snr_clamp_lo <= snr_clamp_hi, "snr_clamp_lo", "need 0 < lo <= hi");
    require(steps >= k, "steps", "need N >= K");
    require(warmup_steps >= 0 && train_steps >= 0, "train_steps", "must be >= 0");
    require(batch >= 1, "batch", "must be >= 1");
    require(lr_generator > 0 && lr_fake > 0, "lr_generator", "learning rates must be positive");
    require(huber_coeff > 0, "huber_coeff", "must be positive");
    partition();  // validates thresholds/resolutions/shift
    plan_cascade(partition(), steps);
    plan_cascade(training_partition(), steps);
}

TrajectoryPartition RmdConfig::partition() const {
    std::vector<LogSnr> th;
    for (double v : thresholds) th.push_back(LogSnr{v});
    return build_partition(th, resolutions, flow_shift, t_max);
}

TrajectoryPartition RmdConfig::training_partition() const {
    if (cross_resolution) return partition();
    const int rk = resolutions.back();
    return build_partition(std::span<const LogSnr>{}, std::span<const int>(&rk, 1), flow_shift, t_max);
}

DistillState init_distill_state(const DenoiserNet& teacher, const RmdConfig& cfg) {
    const AdamWConfig g{cfg.lr_generator, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay, cfg.clip_norm};
    const AdamWConfig f{cfg.lr_fake, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay, cfg.clip_norm};
    return DistillState{teacher, teacher, AdamW(teacher.param_count(), g), AdamW(teacher.param_count(), f), 0};
}

// ---- building blocks ----

CascadeRun generate_cascade_states(const DenoiserNet& generator, std::optional<int> class_id,
                                   const TrajectoryPartition& p, int steps, double alpha_inference, SeededRng& rng) {
    return run_cascade(generator, p, steps, alpha_inference, class_id, rng, true);
}

RenoiseResult upsample_transform(const ImageGrid& state, const ImageGrid& velocity, double sigma_state,
                                 double sigma_target, int final_resolution, double alpha, const ImageGrid& eps) {
    if (state.height() > final_resolution) throw std::invalid_argument("upsample_transform: state above r_K");
    return upsample_renoise(state, velocity, sigma_state, sigma_target, final_resolution, alpha, eps);
}

RenoiseResult upsample_transform(const DenoiserNet& generator, std::optional<int> class_id, const ImageGrid& state,
                                 double sigma_state, double sigma_target, int final_resolution, double alpha,
                                 SeededRng& rng) {
    const ImageGrid v = generator.forward(state, sigma_state, class_id);
    const ImageGrid eps = gaussian_noise(GridShape{1, final_resolution, final_resolution}, rng);
    return upsample_transform(state, v, sigma_state, sigma_target, final_resolution, alpha, eps);
}

double huber_constant(double coeff, std::size_t dims) { return coeff * std::sqrt(static_cast<double>(dims)); }

double pseudo_huber(std::span<const double> r, double c) {
    double n2 = 0.0;
    for (double v : r) n2 += v * v;
    // sqrt(n2 + c^2) - c, rearranged to avoid cancellation when n2 << c^2
    return n2 / (std::sqrt(n2 + c * c) + c);
}

std::vector<double> pseudo_huber_grad(std::span<const double> r, double c) {
    double n2 = 0.0;
    for (double v : r) n2 += v * v;
    const double inv = 1.0 / std::sqrt(n2 + c * c);
    std::vector<double> g(r.begin(), r.end());
    for (double& v : g) v *= inv;
    return g;
}

GeneratorLoss generator_loss(const ImageGrid& x_high, double sigma, const DenoiserNet& fake,
                             const DenoiserNet& teacher, std::optional<int> class_id, double huber_coeff) {
    // Clean estimates x0 = x - sigma v from both critics; treated as constants.
    const ImageGrid x0_fake = lincomb(1.0, x_high, -sigma, fake.forward(x_high, sigma, class_id));
    const ImageGrid x0_teacher = lincomb(1.0, x_high, -sigma, teacher.forward(x_high, sigma, class_id));
    // With the score surrogate s = x - x0 the target x + s_fake - s_teacher is
    // x + x0_teacher - x0_fake, so r = x - target = x0_fake - x0_teacher and a
    // descent step moves x toward the teacher's estimate.
    const ImageGrid r = x0_fake - x0_teacher;
    const double c = huber_constant(huber_coeff, x_high.size());
    GeneratorLoss out;
    out.loss = pseudo_huber(r.data(), c);
    out.grad = ImageGrid(x_high.shape(), pseudo_huber_grad(r.data(), c));
    out.residual_norm = std::sqrt(r.squared_norm());
    return out;
}

double snr_weight(double sigma_stage, double lo, double hi) {
    if (sigma_stage <= 0.0) return hi;
    if (sigma_stage >= 1.0) return lo;
    const double ratio = (1.0 - sigma_stage) / sigma_stage;
    return std::clamp(ratio * ratio, lo, hi);
}

FakeLoss fake_score_loss(const DenoiserNet& fake, const ImageGrid& x_high, double sigma,
                         const ImageGrid& clean_target, double sigma_stage, std::optional<int> class_id,
                         double clamp_lo, double clamp_hi) {
    require_same_shape(x_high, clean_target, "fake_score_loss");
    ForwardTape tape;
    const ImageGrid v = fake.forward(x_high, sigma, class_id, &tape);
    ImageGrid diff = lincomb(1.0, x_high, -sigma, v);  // predicted clean image
    diff -= clean_target;
    const double d = static_cast<double>(diff.size());
    const double lambda = snr_weight(sigma_stage, clamp_lo, clamp_hi);
    FakeLoss out;
    out.loss = lambda * diff.squared_norm() / d;
    out.grad.assign(fake.param_count(), 0.0);
    diff *= -sigma * 2.0 * lambda / d;  // d loss / d v
    fake.backward(tape, diff, out.grad);
    return out;
}

StageDraw sample_stage_and_timestep(const TrajectoryPartition& p, DistillPhase phase,
                                    std::span<const double> stage_weights, SeededRng& rng) {
    const int k = p.num_stages();
    const int allowed = phase == DistillPhase::warmup ? std::max(1, k / 2) : k;
    auto weight = [&](int i) { return stage_weights.empty() ? 1.0 : stage_weights[static_cast<std::size_t>(i - 1)]; };
    double total = 0.0;
    for (int i = 1; i <= allowed; ++i) total += weight(i);
    if (!(total > 0.0)) throw std::invalid_argument("stage sampling weights are all zero for the eligible stages");
    const double u = rng.uniform() * total;
    int stage = allowed;
    double acc = 0.0;
    for (int i = 1; i <= allowed; ++i) {
        acc += weight(i);
        if (u < acc) {
            stage = i;
            break;
        }
    }
    const TimestepInterval iv = p.stage(stage).shifted;
    StageDraw d;
    d.stage = stage;
    // (lo, hi]: never exactly the clean end of the stage
    d.shifted = Timestep{iv.hi.value - rng.uniform() * iv.width()};
    d.teacher = unmap_timestep(stage, d.shifted, p);
    return d;
}

std::size_t select_state(const CascadeRun& run, const StageDraw& draw) {
    std::optional<std::size_t> first, best;
    for (std::size_t j = 0; j < run.steps.size(); ++j) {
        const ScheduleEntry& e = run.steps[j].plan.entry;
        if (e.stage != draw.stage) continue;
        if (!first) first = j;
        if (e.shifted.value >= draw.shifted.value) best = j;  // shifted timesteps decrease along the run
    }
    if (!first) throw std::logic_error("cascade run has no state in stage " + std::to_string(draw.stage));
    return best.value_or(*first);
}

StepLog train_step(DistillState& state, const DenoiserNet& teacher, const TrajectoryPartition& train_partition,
                   const RmdConfig& cfg, std::span<const int> class_ids, SeededRng& rng) {
    const std::size_t nb = class_ids.size();
    if (nb == 0) throw std::invalid_argument("train_step: empty batch");
    const DistillPhase phase = state.phase(cfg);
    const StageDraw draw = sample_stage_and_timestep(train_partition, phase, cfg.stage_weights, rng);
    const int rk = train_partition.final_resolution();
    const double sigma_t = train_partition.to_sigma(draw.teacher).value;
    const double sigma_stage = train_partition.to_sigma(draw.shifted).value;
    const double lambda_r = cfg.cross_resolution ? cfg.lambda(draw.stage) : cfg.lambda(cfg.num_stages());
    std::vector<std::uint64_t> seeds(nb);
    for (auto& s : seeds) s = rng.next_u64();

    struct Sample {
        CascadeRun run;
        std::size_t index = 0;
        RenoiseResult transformed;
        FakeLoss fake;
        GeneratorLoss gen;
        GradientVector grad;
    };
    std::vector<Sample> samples(nb);
    const std::size_t np = state.generator.param_count();

    // Cascade states, projection to r_K, fake-score loss (targets detached from G).
    parallel_for(nb, [&](std::size_t b) {
        Sample& s = samples[b];
        SeededRng local(seeds[b]);
        const auto cls = as_class(class_ids[b]);
        s.run = generate_cascade_states(state.generator, cls, train_partition, cfg.steps, cfg.alpha_inference, local);
        s.index = select_state(s.run, draw);
        const CascadeRecord& rec = s.run.steps[s.index];
        const ImageGrid eps = gaussian_noise(GridShape{1, rk, rk}, local);
        s.transformed = upsample_transform(rec.state, rec.velocity, rec.plan.entry.sigma.value, sigma_t, rk,
                                           cfg.alpha, eps);
        s.fake = fake_score_loss(state.fake, s.transformed.output, sigma_t, s.transformed.upsampled_clean,
                                 sigma_stage, cls, cfg.snr_clamp_lo, cfg.snr_clamp_hi);
    });

    StepLog log;
    log.step = state.step;
    log.phase = phase;
    log.stage = draw.stage;
    log.t_shifted = draw.shifted.value;
    log.t_teacher = draw.teacher.value;

    GradientVector grad(np, 0.0);
    for (std::size_t b = 0; b < nb; ++b) {
        if (!std::isfinite(samples[b].fake.loss)) {
            throw DistillDiverged("fake-score loss non-finite at step " + std::to_string(state.step) + ": " +
                                  tensor_stats("x_t", samples[b].transformed.output) + "; " +
                                  tensor_stats("clean_target", samples[b].transformed.upsampled_clean));
        }
        log.fake_loss += samples[b].fake.loss / static_cast<double>(nb);
        for (std::size_t k = 0; k < np; ++k) grad[k] += samples[b].fake.grad[k] / static_cast<double>(nb);
    }
    log.fake_grad_norm = state.opt_fake.step(state.fake.params(), grad).grad_norm;

    // Generator update with the refreshed fake score.
    parallel_for(nb, [&](std::size_t b) {
        Sample& s = samples[b];
        const auto cls = as_class(class_ids[b]);
        s.gen = generator_loss(s.transformed.output, sigma_t, state.fake, teacher, cls, cfg.huber_coeff);
        if (!std::isfinite(s.gen.loss)) return;
        const CascadeRecord& rec = s.run.steps[s.index];
        ImageGrid upstream = (lambda_r / static_cast<double>(nb)) * s.gen.grad;
        const RenoiseGrad g = upsample_renoise_backward(upstream, rec.plan.entry.sigma.value, sigma_t, cfg.alpha,
                                                        rec.state.height(), rec.state.width());
        s.grad.assign(np, 0.0);
        ImageGrid g_state = g.state;
        g_state += state.generator.backward(rec.tape, g.velocity, s.grad);
        backprop_cascade(state.generator, s.run, s.index, std::move(g_state), s.grad);
    });

    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t b = 0; b < nb; ++b) {
        if (!std::isfinite(samples[b].gen.loss)) {
            throw DistillDiverged("generator loss non-finite at step " + std::to_string(state.step) + ": " +
                                  tensor_stats("x_t", samples[b].transformed.output));
        }
        log.generator_loss += lambda_r * samples[b].gen.loss / static_cast<double>(nb);
        for (std::size_t k = 0; k < np; ++k) grad[k] += samples[b].grad[k];
    }
    log.generator_grad_norm = state.opt_generator.step(state.generator.params(), grad).grad_norm;
    ++state.step;
    return log;
}

DistillResult train(const DenoiserNet& teacher, const RmdConfig& cfg, std::uint64_t seed,
                    const CheckpointHook& on_checkpoint) {
    cfg.validate();
    DistillResult result{init_distill_state(teacher, cfg), {}};
    const TrajectoryPartition partition = cfg.training_partition();
    SeededRng rng(derive_seed(seed, "distill/train"));
    const int classes = teacher.spec().num_classes;
    std::vector<int> batch(static_cast<std::size_t>(cfg.batch));
    result.log.reserve(static_cast<std::size_t>(cfg.train_steps));
    for (int s = 0; s < cfg.train_steps; ++s) {
        for (int& c : batch) c = classes > 0 ? rng.uniform_int(classes) : -1;
        result.log.push_back(train_step(result.state, teacher, partition, cfg, batch, rng));
        if (on_checkpoint && cfg.checkpoint_every > 0 && (s + 1) % cfg.checkpoint_every == 0 &&
            s + 1 < cfg.train_steps)
            on_checkpoint(result.state);
    }
    if (on_checkpoint) on_checkpoint(result.state);
    return result;
}

void write_distill_log(const std::filesystem::path& path, const std::vector<StepLog>& log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << "step,phase,stage,t_shifted,t_teacher,generator_loss,fake_loss,generator_grad_norm,fake_grad_norm\n"
        << std::setprecision(10);
    for (const auto& r : log)
        out << r.step << ',' << (r.phase == DistillPhase::warmup ? "warmup" : "full") << ',' << r.stage << ','
            << r.t_shifted << ',' << r.t_teacher << ',' << r.generator_loss << ',' << r.fake_loss << ','
            << r.generator_grad_norm << ',' << r.fake_grad_norm << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace rmdlab
