// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "rmdlab/diffusion.hpp"
#include "rmdlab/rmd.hpp"
#include "test_util.hpp"

using namespace rmdlab;
using rmdlab::testing::random_grid;
using rmdlab::testing::small_net;

namespace {

RmdConfig toy_config() {
    RmdConfig c;
    c.thresholds = {sigma_to_logsnr({0.502}).value};
    c.resolutions = {8, 16};
    c.steps = 4;
    return c;
}

double directional_fd(DenoiserNet& net, const std::vector<double>& dir, double h, const auto& f) {
    std::vector<double> p0(net.params().begin(), net.params().end());
    for (std::size_t i = 0; i < p0.size(); ++i) net.params()[i] = p0[i] + h * dir[i];
    const double fp = f(net);
    for (std::size_t i = 0; i < p0.size(); ++i) net.params()[i] = p0[i] - h * dir[i];
    const double fm = f(net);
    std::copy(p0.begin(), p0.end(), net.params().begin());
    return (fp - fm) / (2 * h);
}

std::vector<double> unit_dir(std::size_t n, std::uint64_t seed) {
    SeededRng rng(seed);
    std::vector<double> d(n);
    double s = 0.0;
    for (double& v : d) {
        v = rng.normal();
        s += v * v;
    }
    for (double& v : d) v /= std::sqrt(s);
    return d;
}

}  // namespace

TEST(Rmd, SnrWeight) {
    EXPECT_DOUBLE_EQ(snr_weight(0.5, 1e-4, 1e4), 1.0);
    EXPECT_NEAR(snr_weight(0.9, 1e-4, 1e4), 1.0 / 81.0, 1e-15);
    EXPECT_NEAR(snr_weight(0.9, 1e-4, 1e4), 0.01235, 1e-5);
    EXPECT_DOUBLE_EQ(snr_weight(1e-6, 1e-4, 1e4), 1e4);
    EXPECT_DOUBLE_EQ(snr_weight(0.999999, 1e-4, 1e4), 1e-4);
}

TEST(Rmd, PseudoHuberRegimes) {
    const std::size_t d = 256;
    const double c = huber_constant(0.00054, d);
    EXPECT_NEAR(c, 0.00054 * 16.0, 1e-18);
    const std::vector<double> dir = unit_dir(d, 3);
    auto scaled = [&](double norm) {
        std::vector<double> r(dir);
        for (double& v : r) v *= norm;
        return r;
    };
    for (double n : {c / 10, c / 100, c / 1000}) {
        const double quad = n * n / (2 * c);
        EXPECT_NEAR(pseudo_huber(scaled(n), c) / quad, 1.0, 0.01) << n;
    }
    for (double n : {100 * c, 1000 * c}) {
        // Slope of the loss along |r|, and the norm of its gradient, are both ~1.
        const double slope = (pseudo_huber(scaled(n * 1.001), c) - pseudo_huber(scaled(n * 0.999), c)) / (0.002 * n);
        EXPECT_NEAR(slope, 1.0, 0.01);
        const auto g = pseudo_huber_grad(scaled(n), c);
        double gn = 0.0;
        for (double v : g) gn += v * v;
        EXPECT_NEAR(std::sqrt(gn), 1.0, 0.01);
        EXPECT_NEAR(pseudo_huber(scaled(n), c), std::sqrt(n * n + c * c) - c, 1e-12 * n);
    }
}

TEST(Rmd, PseudoHuberGradientMatchesFiniteDifferences) {
    std::vector<double> r{0.3, -0.1, 0.02, 0.5};
    const double c = 0.05;
    const auto g = pseudo_huber_grad(r, c);
    for (std::size_t i = 0; i < r.size(); ++i) {
        auto rp = r, rm = r;
        rp[i] += 1e-6;
        rm[i] -= 1e-6;
        EXPECT_NEAR((pseudo_huber(rp, c) - pseudo_huber(rm, c)) / 2e-6, g[i], 1e-8);
    }
}

TEST(Rmd, GeneratorLossVanishesWhenFakeEqualsTeacher) {
    const DenoiserNet t = small_net(1);
    const ImageGrid x = random_grid({1, 16, 16}, 2);
    const auto l = generator_loss(x, 0.6, t, t, 1);
    EXPECT_EQ(l.loss, 0.0);
    EXPECT_EQ(l.residual_norm, 0.0);
    for (double v : l.grad.data()) EXPECT_EQ(v, 0.0);
}

TEST(Rmd, GeneratorLossStopGradient) {
    DenoiserNet fake = small_net(1), teacher = small_net(2);
    const ImageGrid x = random_grid({1, 8, 8}, 3);
    const double sigma = 0.55;
    const auto l = generator_loss(x, sigma, fake, teacher, 0, 0.05);
    // Frozen-difference objective: PH(x' - sg(x - r)) with r from the critics at x.
    const ImageGrid x0f = x - sigma * fake.forward(x, sigma, 0);
    const ImageGrid x0t = x - sigma * teacher.forward(x, sigma, 0);
    const ImageGrid target = x - (x0f - x0t);
    const double c = huber_constant(0.05, x.size());
    EXPECT_NEAR(l.loss, pseudo_huber((x - target).data(), c), 1e-14);
    double full_mismatch = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        ImageGrid xp = x, xm = x;
        xp.data()[i] += 1e-6;
        xm.data()[i] -= 1e-6;
        const double frozen = (pseudo_huber((xp - target).data(), c) - pseudo_huber((xm - target).data(), c)) / 2e-6;
        EXPECT_NEAR(l.grad.data()[i], frozen, 1e-7);
        // Differentiating through the critics gives something else (negative control).
        const double full =
            (generator_loss(xp, sigma, fake, teacher, 0, 0.05).loss - generator_loss(xm, sigma, fake, teacher, 0, 0.05).loss) /
            2e-6;
        full_mismatch = std::max(full_mismatch, std::abs(full - frozen));
    }
    EXPECT_GT(full_mismatch, 1e-3);
    // Perturbing the critics changes the value; the gradient stays the frozen one at the new residual.
    fake.params()[0] += 0.1;
    const auto l2 = generator_loss(x, sigma, fake, teacher, 0, 0.05);
    EXPECT_NE(l2.loss, l.loss);
}

TEST(Rmd, GeneratorDescentMovesTowardTeacherEstimate) {
    const DenoiserNet fake = small_net(5), teacher = small_net(6);
    const ImageGrid x = random_grid({1, 16, 16}, 7);
    const double sigma = 0.5;
    const auto l = generator_loss(x, sigma, fake, teacher, 2);
    const ImageGrid x0f = x - sigma * fake.forward(x, sigma, 2);
    const ImageGrid x0t = x - sigma * teacher.forward(x, sigma, 2);
    // -grad is parallel to x0_teacher - x0_fake.
    const ImageGrid toward = x0t - x0f;
    const double cosine = -dot(l.grad, toward) / std::sqrt(l.grad.squared_norm() * toward.squared_norm());
    EXPECT_NEAR(cosine, 1.0, 1e-12);
}

TEST(Rmd, FakeScoreLoss) {
    // Constant-velocity fake (v = b): a perfect predictor for target x - sigma b.
    NetSpec spec;
    spec.layers = {LayerSpec{1, 1, 1, false}};
    spec.embed_dim = 4;
    DenoiserNet fake(spec);
    for (double& p : fake.params()) p = 0.0;
    fake.params()[9] = 0.25;
    const ImageGrid x = random_grid({1, 8, 8}, 1);
    const ImageGrid target = lincomb(1.0, x, -0.4 * 0.25, ImageGrid({1, 8, 8}, 1.0));
    EXPECT_NEAR(fake_score_loss(fake, x, 0.4, target, 0.5, std::nullopt).loss, 0.0, 1e-28);

    // lambda_snr scaling and parameter gradient.
    DenoiserNet net = small_net(3);
    const ImageGrid tgt = random_grid({1, 8, 8}, 2);
    const auto a = fake_score_loss(net, x, 0.4, tgt, 0.5, 1);
    const auto b = fake_score_loss(net, x, 0.4, tgt, 0.9, 1);
    EXPECT_NEAR(b.loss, a.loss / 81.0, 1e-12 * a.loss);
    const auto dir = unit_dir(net.param_count(), 9);
    const double fd = directional_fd(net, dir, 1e-5, [&](const DenoiserNet& n) {
        return fake_score_loss(n, x, 0.4, tgt, 0.5, 1).loss;
    });
    double an = 0.0;
    for (std::size_t i = 0; i < dir.size(); ++i) an += dir[i] * a.grad[i];
    EXPECT_NEAR(an, fd, 1e-5 * std::max(1.0, std::abs(fd)));
}

TEST(Rmd, UpsampleTransformSingleResolutionIsForwardDiffusion) {
    const ImageGrid x = random_grid({1, 16, 16}, 1), v = random_grid({1, 16, 16}, 2), eps = random_grid({1, 16, 16}, 3);
    const auto r = upsample_transform(x, v, 0.8, 0.3, 16, 0.0, eps);
    const ImageGrid expect = add_noise(x - 0.8 * v, eps, 0.3);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(r.output.data()[i], expect.data()[i], 1e-14);
    EXPECT_THROW(upsample_transform(x, v, 0.8, 0.3, 8, 0.0, eps), std::invalid_argument);
}

TEST(Rmd, StageSamplingWarmupAndFrequencies) {
    const auto p2 = toy_config().partition();
    SeededRng rng(5);
    for (int i = 0; i < 2000; ++i) {
        const auto d = sample_stage_and_timestep(p2, DistillPhase::warmup, {}, rng);
        ASSERT_EQ(d.stage, 1);
    }
    // Uniform weights: chi-square with one degree of freedom (p = 0.001 critical value 10.83).
    auto chi2 = [&](std::vector<double> w) {
        int counts[2] = {0, 0};
        const int n = 10000;
        for (int i = 0; i < n; ++i) {
            const auto d = sample_stage_and_timestep(p2, DistillPhase::full, w, rng);
            ++counts[d.stage - 1];
            const auto iv = p2.stage(d.stage).shifted;
            EXPECT_GT(d.shifted.value, iv.lo.value);
            EXPECT_LE(d.shifted.value, iv.hi.value);
            EXPECT_NEAR(d.teacher.value, unmap_timestep(d.stage, d.shifted, p2).value, 1e-9);
        }
        const double tot = w.empty() ? 2.0 : w[0] + w[1];
        double x2 = 0.0;
        for (int k = 0; k < 2; ++k) {
            const double e = n * (w.empty() ? 1.0 : w[static_cast<std::size_t>(k)]) / tot;
            x2 += (counts[k] - e) * (counts[k] - e) / e;
        }
        return x2;
    };
    EXPECT_LT(chi2({}), 10.83);
    EXPECT_LT(chi2({1.0, 3.0}), 10.83);

    // K=3 warms up on stage 1 only; K=4 on stages 1-2.
    const std::vector<LogSnr> th3{{-4.0}, {-1.0}};
    const auto p3 = build_partition(th3, std::vector<int>{4, 8, 16});
    for (int i = 0; i < 500; ++i) EXPECT_EQ(sample_stage_and_timestep(p3, DistillPhase::warmup, {}, rng).stage, 1);
    const std::vector<LogSnr> th4{{-5.0}, {-3.0}, {-1.0}};
    const auto p4 = build_partition(th4, std::vector<int>{2, 4, 8, 16});
    int max_stage = 0;
    for (int i = 0; i < 500; ++i)
        max_stage = std::max(max_stage, sample_stage_and_timestep(p4, DistillPhase::warmup, {}, rng).stage);
    EXPECT_EQ(max_stage, 2);
    // K=1 still has something to sample during warm-up.
    const auto p1 = build_partition(std::vector<LogSnr>{}, std::vector<int>{16});
    EXPECT_EQ(sample_stage_and_timestep(p1, DistillPhase::warmup, {}, rng).stage, 1);
}

TEST(Rmd, SelectState) {
    const auto p = toy_config().partition();
    SeededRng rng(1);
    const CascadeRun run = generate_cascade_states(small_net(1), 0, p, 4, 1.0, rng);
    // Shifted timesteps: 1000, ~857 (stage 1); 500, 250 (stage 2).
    EXPECT_EQ(select_state(run, StageDraw{1, {950.0}, {}}), 0u);
    EXPECT_EQ(select_state(run, StageDraw{1, {857.0}, {}}), 1u);
    EXPECT_EQ(select_state(run, StageDraw{1, {855.0}, {}}), 1u);
    EXPECT_EQ(select_state(run, StageDraw{2, {400.0}, {}}), 2u);
    EXPECT_EQ(select_state(run, StageDraw{2, {100.0}, {}}), 3u);
    EXPECT_EQ(select_state(run, StageDraw{2, {600.0}, {}}), 2u);  // above the stage's first state
}

TEST(Rmd, ConfigValidationAndPartitions) {
    RmdConfig c = toy_config();
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.training_partition().num_stages(), 2);
    c.cross_resolution = false;
    EXPECT_EQ(c.training_partition().num_stages(), 1);
    EXPECT_EQ(c.training_partition().final_resolution(), 16);
    EXPECT_EQ(c.partition().num_stages(), 2);
    c = toy_config();
    c.alpha = 1.5;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = toy_config();
    c.thresholds = {};
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = toy_config();
    c.thresholds = {-2.5};  // N=2: one step per stage
    c.steps = 2;
    EXPECT_NO_THROW(c.validate());
    c.lambda_r = {1.0, 2.0};
    EXPECT_DOUBLE_EQ(c.lambda(2), 2.0);
}

// Gradient of the generator loss w.r.t. G's parameters through the recorded
// cascade prefix, the projection to r_K, and the frozen critics.
TEST(Rmd, EndToEndGradientMatchesFiniteDifferences) {
    DenoiserNet gen = small_net(11);
    const DenoiserNet fake = small_net(12), teacher = small_net(13);
    const auto p = toy_config().partition();
    const double alpha = 0.2, alpha_inf = 0.7, sigma_t = 0.45;
    const ImageGrid eps = random_grid({1, 16, 16}, 99);
    const int cls = 1;

    for (std::size_t j = 0; j < 4; ++j) {
        auto x_high = [&](const DenoiserNet& g) {
            SeededRng rng(4242);
            const CascadeRun run = generate_cascade_states(g, cls, p, 4, alpha_inf, rng);
            const CascadeRecord& rec = run.steps[j];
            return upsample_transform(rec.state, rec.velocity, rec.plan.entry.sigma.value, sigma_t, 16, alpha, eps)
                .output;
        };
        SeededRng rng(4242);
        const CascadeRun run = generate_cascade_states(gen, cls, p, 4, alpha_inf, rng);
        const CascadeRecord& rec = run.steps[j];
        const double sj = rec.plan.entry.sigma.value;
        const auto tr = upsample_transform(rec.state, rec.velocity, sj, sigma_t, 16, alpha, eps);
        const auto gl = generator_loss(tr.output, sigma_t, fake, teacher, cls);
        // The critics' surrogates are constants: differentiate PH(x' - sg(x - r)).
        const ImageGrid r = sigma_t * (teacher.forward(tr.output, sigma_t, cls) - fake.forward(tr.output, sigma_t, cls));
        const ImageGrid target = tr.output - r;
        const double c = huber_constant(0.00054, target.size());
        EXPECT_NEAR(pseudo_huber((tr.output - target).data(), c), gl.loss, 1e-12);
        auto loss_of = [&](const DenoiserNet& g) { return pseudo_huber((x_high(g) - target).data(), c); };
        const RenoiseGrad rg = upsample_renoise_backward(gl.grad, sj, sigma_t, alpha, rec.state.height(),
                                                         rec.state.width());
        std::vector<double> grad(gen.param_count(), 0.0), grad_local(gen.param_count(), 0.0);
        ImageGrid gs = rg.state;
        gs += gen.backward(rec.tape, rg.velocity, grad);
        gen.backward(rec.tape, rg.velocity, grad_local);  // same step, no prefix
        backprop_cascade(gen, run, j, gs, grad);

        double worst = 0.0, worst_local = 0.0;
        for (int k = 0; k < 6; ++k) {
            const auto dir = unit_dir(gen.param_count(), 1000 + k);
            const double fd = directional_fd(gen, dir, 1e-5, loss_of);
            double an = 0.0, an_local = 0.0;
            for (std::size_t i = 0; i < dir.size(); ++i) {
                an += dir[i] * grad[i];
                an_local += dir[i] * grad_local[i];
            }
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            worst = std::max(worst, std::abs(fd - an) / denom);
            worst_local = std::max(worst_local, std::abs(fd - an_local) / denom);
        }
        EXPECT_LT(worst, 1e-3) << "state " << j;
        // Dropping the cascade prefix must be detectable for every state after the first.
        if (j > 0) { EXPECT_GT(worst_local, 1e-2) << "state " << j; }
    }
}

TEST(Rmd, TrainingIsDeterministicAndRespectsWarmup) {
    const DenoiserNet teacher = small_net(21);
    RmdConfig c = toy_config();
    c.train_steps = 60;
    c.warmup_steps = 20;
    c.batch = 2;
    const auto a = train(teacher, c, 3);
    const auto b = train(teacher, c, 3);
    EXPECT_TRUE(std::equal(a.state.generator.params().begin(), a.state.generator.params().end(),
                           b.state.generator.params().begin()));
    EXPECT_TRUE(std::equal(a.state.fake.params().begin(), a.state.fake.params().end(),
                           b.state.fake.params().begin()));
    ASSERT_EQ(a.log.size(), 60u);
    int late_stage2 = 0;
    for (const auto& r : a.log) {
        EXPECT_EQ(r.phase, r.step < 20 ? DistillPhase::warmup : DistillPhase::full);
        if (r.step < 20) EXPECT_EQ(r.stage, 1);
        else if (r.stage == 2) ++late_stage2;
        EXPECT_TRUE(std::isfinite(r.generator_loss));
        EXPECT_TRUE(std::isfinite(r.fake_loss));
    }
    EXPECT_GT(late_stage2, 0);
    EXPECT_EQ(a.state.step, 60);
    // The generator moved away from the teacher.
    EXPECT_FALSE(std::equal(teacher.params().begin(), teacher.params().end(), a.state.generator.params().begin()));
}

TEST(Rmd, CheckpointHookCadence) {
    RmdConfig c = toy_config();
    c.train_steps = 7;
    c.warmup_steps = 0;
    c.batch = 1;
    c.checkpoint_every = 3;
    std::vector<std::int64_t> seen;
    train(small_net(2), c, 1, [&](const DistillState& s) { seen.push_back(s.step); });
    EXPECT_EQ(seen, (std::vector<std::int64_t>{3, 6, 7}));
}

TEST(Rmd, NonFiniteStateRaisesDivergence) {
    DenoiserNet teacher = small_net(2);
    RmdConfig c = toy_config();
    c.batch = 1;
    DistillState st = init_distill_state(teacher, c);
    for (double& v : st.generator.params()) v = std::numeric_limits<double>::quiet_NaN();
    SeededRng rng(1);
    const std::vector<int> cls{0};
    try {
        train_step(st, teacher, c.partition(), c, cls, rng);
        FAIL() << "expected DistillDiverged";
    } catch (const DistillDiverged& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
    }
}
