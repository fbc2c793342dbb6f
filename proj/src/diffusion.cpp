// SPDX-License-Identifier: Apache-2.0
#include "rmdlab/diffusion.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "rmdlab/parallel.hpp"

namespace rmdlab {

ImageGrid add_noise(const ImageGrid& x0, const ImageGrid& eps, double sigma) {
    require_same_shape(x0, eps, "add_noise");
    return lincomb(1.0 - sigma, x0, sigma, eps);
}

LossAndGrad teacher_loss_at(const DenoiserNet& net, const ImageGrid& x0, std::optional<int> class_id, double sigma,
                            const ImageGrid& eps, bool with_grad) {
    const ImageGrid xt = add_noise(x0, eps, sigma);
    ForwardTape tape;
    ImageGrid diff = net.forward(xt, sigma, class_id, with_grad ? &tape : nullptr);
    diff -= eps;
    diff += x0;  // prediction - (eps - x0)
    const double d = static_cast<double>(diff.size());
    LossAndGrad out;
    out.loss = diff.squared_norm() / d;
    if (with_grad) {
        out.grad.assign(net.param_count(), 0.0);
        diff *= 2.0 / d;
        net.backward(tape, diff, out.grad);
    }
    return out;
}

LossAndGrad teacher_loss(const DenoiserNet& net, const ImageGrid& x0, std::optional<int> class_id, SeededRng& rng) {
    const double sigma = rng.uniform();
    const ImageGrid eps = gaussian_noise(x0.shape(), rng);
    return teacher_loss_at(net, x0, class_id, sigma, eps, true);
}

double validation_loss(const DenoiserNet& net, std::span<const ShapeSample> samples, std::uint64_t seed) {
    if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
    const std::size_t n = samples.size();
    std::vector<double> losses(n);
    parallel_for(n, [&](std::size_t k) {
        SeededRng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
        const double sigma = (static_cast<double>(k) + 0.5) / static_cast<double>(n);
        const ImageGrid eps = gaussian_noise(samples[k].image.shape(), rng);
        losses[k] = teacher_loss_at(net, samples[k].image, samples[k].class_id, sigma, eps, false).loss;
    });
    double total = 0.0;
    for (double l : losses) total += l;
    return total / static_cast<double>(n);
}

namespace {

// Returns the exponential moving average of the phase's iterates (the raw
// weights when ema_decay is 0). The average restarts at every phase.
DenoiserNet train_phase(DenoiserNet& net, AdamW& opt, std::span<const ShapeSample> pool, int phase, int steps,
                        int batch, double ema_decay, int& global_step, SeededRng& rng,
                        std::vector<TeacherLogRow>& log) {
    DenoiserNet ema = net;
    if (steps <= 0) return ema;
    if (pool.empty()) throw std::invalid_argument("teacher phase " + std::to_string(phase) + " has no data");
    const std::size_t np = net.param_count();
    const std::size_t nb = static_cast<std::size_t>(batch);
    std::vector<std::size_t> picks(nb);
    std::vector<std::uint64_t> seeds(nb);
    std::vector<LossAndGrad> results(nb);
    GradientVector grad(np);
    for (int s = 0; s < steps; ++s) {
        for (std::size_t b = 0; b < nb; ++b) {
            picks[b] = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(pool.size())));
            seeds[b] = rng.next_u64();
        }
        parallel_for(nb, [&](std::size_t b) {
            SeededRng local(seeds[b]);
            results[b] = teacher_loss(net, pool[picks[b]].image, pool[picks[b]].class_id, local);
        });
        std::fill(grad.begin(), grad.end(), 0.0);
        double loss = 0.0;
        for (std::size_t b = 0; b < nb; ++b) {
            loss += results[b].loss;
            for (std::size_t k = 0; k < np; ++k) grad[k] += results[b].grad[k];
        }
        loss /= static_cast<double>(nb);
        for (double& g : grad) g /= static_cast<double>(nb);
        if (!std::isfinite(loss)) {
            std::ostringstream os;
            os << "teacher training diverged at phase " << phase << " step " << global_step << ": loss=" << loss
               << ", grad norm=" << l2_norm(grad);
            throw TrainingDiverged(os.str());
        }
        const StepReport rep = opt.step(net.params(), grad);
        const auto p = net.params();
        auto e = ema.params();
        for (std::size_t k = 0; k < np; ++k) e[k] = ema_decay * e[k] + (1.0 - ema_decay) * p[k];
        log.push_back(TeacherLogRow{phase, global_step, loss, rep.grad_norm});
        ++global_step;
    }
    return ema;
}

}  // namespace

TeacherModel train_teacher(const Dataset& dataset, const NetSpec& spec, const TeacherConfig& cfg, std::uint64_t seed) {
    if (cfg.batch < 1) throw std::invalid_argument("teacher.batch must be >= 1");
    if (cfg.low_steps < 0 || cfg.high_steps < 0) throw std::invalid_argument("teacher step budgets must be >= 0");
    if (!(cfg.ema_decay >= 0.0 && cfg.ema_decay < 1.0)) throw std::invalid_argument("teacher.ema_decay must lie in [0, 1)");
    const std::size_t nval = std::min<std::size_t>(static_cast<std::size_t>(std::max(cfg.validation_count, 0)),
                                                   dataset.high.size() / 2);
    std::span<const ShapeSample> high(dataset.high);
    std::span<const ShapeSample> train_high = high.first(high.size() - nval);
    std::span<const ShapeSample> val = high.last(nval);
    const std::uint64_t val_seed = derive_seed(seed, "teacher/validation");

    TeacherModel model{DenoiserNet(spec), {}, {}, std::numeric_limits<double>::quiet_NaN(),
                       std::numeric_limits<double>::quiet_NaN()};
    SeededRng init(derive_seed(seed, "teacher/init"));
    model.net.init_random(init);
    AdamW opt(model.net.param_count(), cfg.optim);
    SeededRng rng(derive_seed(seed, "teacher/train"));
    int step = 0;

    if (cfg.low_steps > 0) {
        const DenoiserNet avg =
            train_phase(model.net, opt, dataset.low, 1, cfg.low_steps, cfg.batch, cfg.ema_decay, step, rng, model.log);
        model.trained_resolutions.push_back(dataset.params.low_res);
        model.val_loss_after_low = validation_loss(avg, val, val_seed);
        if (cfg.high_steps == 0) model.net = avg;
    }
    if (cfg.high_steps > 0) {
        model.net = train_phase(model.net, opt, train_high, 2, cfg.high_steps, cfg.batch, cfg.ema_decay, step, rng,
                                model.log);
        model.trained_resolutions.push_back(dataset.params.high_res);
        model.val_loss_after_high = validation_loss(model.net, val, val_seed);
    }
    return model;
}

void write_teacher_log(const std::filesystem::path& path, const std::vector<TeacherLogRow>& log) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << "step,phase,loss,grad_norm\n" << std::setprecision(10);
    for (const auto& r : log) out << r.step << ',' << r.phase << ',' << r.loss << ',' << r.grad_norm << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<double> uniform_sigma_schedule(int steps) {
    if (steps < 1) throw std::invalid_argument("sampling steps must be >= 1");
    std::vector<double> s(static_cast<std::size_t>(steps) + 1);
    for (int j = 0; j <= steps; ++j) s[static_cast<std::size_t>(j)] = 1.0 - static_cast<double>(j) / steps;
    return s;
}

ImageGrid euler_sample(const DenoiserNet& net, std::optional<int> class_id, int resolution,
                       std::span<const double> sigmas, SeededRng& rng) {
    if (sigmas.size() < 2 || sigmas.front() != 1.0 || sigmas.back() != 0.0)
        throw std::invalid_argument("sigma schedule must run from 1 to 0");
    for (std::size_t j = 1; j < sigmas.size(); ++j)
        if (!(sigmas[j] < sigmas[j - 1])) throw std::invalid_argument("sigma schedule must be strictly decreasing");
    ImageGrid x = gaussian_noise(GridShape{1, resolution, resolution}, rng);
    for (std::size_t j = 0; j + 1 < sigmas.size(); ++j) {
        const ImageGrid v = net.forward(x, sigmas[j], class_id);
        x.add_scaled(v, -(sigmas[j] - sigmas[j + 1]));
    }
    return x;
}

std::vector<ImageGrid> teacher_sample_set(const DenoiserNet& net, int count, int resolution, int steps,
                                          std::uint64_t seed) {
    const std::vector<double> sigmas = uniform_sigma_schedule(steps);
    const int classes = net.spec().num_classes;
    std::vector<ImageGrid> out(static_cast<std::size_t>(count));
    parallel_for(out.size(), [&](std::size_t k) {
        SeededRng rng(derive_seed(seed, static_cast<std::uint64_t>(k)));
        std::optional<int> cls;
        if (classes > 0) cls = static_cast<int>(k % static_cast<std::size_t>(classes));
        out[k] = euler_sample(net, cls, resolution, sigmas, rng);
    });
    return out;
}

}  // namespace rmdlab
