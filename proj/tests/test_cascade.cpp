// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "rmdlab/cascade.hpp"
#include "test_util.hpp"

using namespace rmdlab;
using rmdlab::testing::small_net;

namespace {

TrajectoryPartition toy_partition() {
    const std::vector<LogSnr> th{sigma_to_logsnr({0.502})};
    return build_partition(th, std::vector<int>{8, 16});
}

std::vector<int> resolutions_of(const InferenceTrace& t) {
    std::vector<int> r;
    for (const auto& rec : t.records) r.push_back(rec.resolution);
    return r;
}

// t = t_max is pure noise: logSNR -inf.
double teacher_logsnr(double t, const TrajectoryPartition& p) {
    return t >= p.t_max ? -INFINITY : sigma_to_logsnr(p.to_sigma({t})).value;
}

}  // namespace

TEST(Cascade, SingleStageHasNoTransitions) {
    const auto p = build_partition(std::vector<LogSnr>{}, std::vector<int>{16});
    const auto r = infer(small_net(1), CascadeParams{p, 4, 1.0, 0, 5});
    EXPECT_EQ(resolutions_of(r.trace), (std::vector<int>{16, 16, 16, 16}));
    for (const auto& rec : r.trace.records) EXPECT_FALSE(rec.transition);
    EXPECT_EQ(r.image.shape(), (GridShape{1, 16, 16}));
}

TEST(Cascade, TwoPlusTwoSchedule) {
    const auto r = infer(small_net(1), CascadeParams{toy_partition(), 4, 1.0, 1, 5});
    EXPECT_EQ(resolutions_of(r.trace), (std::vector<int>{8, 8, 16, 16}));
    std::vector<bool> tr;
    for (const auto& rec : r.trace.records) tr.push_back(rec.transition);
    EXPECT_EQ(tr, (std::vector<bool>{false, true, false, false}));
    EXPECT_EQ(std::lround(r.trace.records[1].shifted_t), 857);
    EXPECT_EQ(r.trace.final_shape, (GridShape{1, 16, 16}));
}

TEST(Cascade, ConstantVelocityTransitionsAreExact) {
    const double b = 0.4;
    const VelocityFn oracle = [&](const ImageGrid& x, double, ForwardTape*) { return ImageGrid(x.shape(), b); };
    for (int steps : {2, 4, 7}) {
        SeededRng rng(31), ref(31);
        const CascadeRun run = run_cascade(oracle, toy_partition(), steps, 1.0, rng, false);
        ImageGrid x0 = gaussian_noise({1, 8, 8}, ref);
        for (double& v : x0.data()) v -= b;
        const ImageGrid expect = bilinear_upsample(x0, 16, 16);
        for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(run.output.data()[i], expect.data()[i], 1e-12);
    }
}

TEST(Cascade, DeterministicUnderFixedSeed) {
    const DenoiserNet net = small_net(3);
    const auto a = infer(net, CascadeParams{toy_partition(), 4, 0.7, 2, 99});
    const auto b = infer(net, CascadeParams{toy_partition(), 4, 0.7, 2, 99});
    const auto c = infer(net, CascadeParams{toy_partition(), 4, 0.7, 2, 100});
    EXPECT_EQ(a.image, b.image);
    EXPECT_NE(a.image, c.image);
}

TEST(Cascade, AlphaSweepStaysFinite) {
    const DenoiserNet net = small_net(4);
    for (double a : {0.0, 0.5, 1.0}) {
        const auto r = infer(net, CascadeParams{toy_partition(), 4, a, 0, 7});
        EXPECT_TRUE(r.image.all_finite());
        EXPECT_LT(std::sqrt(r.image.squared_norm() / r.image.size()), 10.0);
    }
}

TEST(Cascade, NaiveCascadeMatchesStructure) {
    const auto a = infer(small_net(1), CascadeParams{toy_partition(), 4, 1.0, 0, 3});
    const auto b = naive_cascade_infer(small_net(2), CascadeParams{toy_partition(), 4, 1.0, 0, 3});
    ASSERT_EQ(a.trace.records.size(), b.trace.records.size());
    for (std::size_t j = 0; j < a.trace.records.size(); ++j) {
        EXPECT_EQ(a.trace.records[j].transition, b.trace.records[j].transition);
        EXPECT_EQ(a.trace.records[j].resolution, b.trace.records[j].resolution);
    }
    EXPECT_EQ(b.image.shape(), (GridShape{1, 16, 16}));
}

TEST(Cascade, InconsistentScheduleIsRejected) {
    // Stage 2 spans sigma 0.768..0.777; the 4-step grid jumps over it.
    const std::vector<LogSnr> th{{-2.5}, {-2.4}};
    const auto p = build_partition(th, std::vector<int>{4, 8, 16});
    try {
        plan_cascade(p, 4);
        FAIL() << "expected invalid_argument";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("inconsistency"), std::string::npos);
    }
    EXPECT_THROW(plan_cascade(toy_partition(), 1), std::invalid_argument);
}

TEST(Cascade, TraceValidatorCatchesViolations) {
    const auto p = toy_partition();
    const auto good = infer(small_net(1), CascadeParams{p, 4, 1.0, 0, 3}).trace;
    EXPECT_NO_THROW(validate_trace(good, p, 4));
    auto bad = good;
    bad.records[3].resolution = 8;
    EXPECT_THROW(validate_trace(bad, p, 4), std::logic_error);
    bad = good;
    bad.records[1].transition = false;
    EXPECT_THROW(validate_trace(bad, p, 4), std::logic_error);
    bad = good;
    bad.records[2].teacher_t = bad.records[1].teacher_t + 1;
    EXPECT_THROW(validate_trace(bad, p, 4), std::logic_error);
    EXPECT_THROW(validate_trace(good, p, 5), std::logic_error);
}

TEST(Cascade, RandomConfigurationsSatisfyStateMachineInvariants) {
    SeededRng rng(2025);
    int valid = 0, rejected = 0;
    while (valid < 100) {
        const int k = 1 + rng.uniform_int(3);
        const int n = k + rng.uniform_int(9 - k);
        std::vector<LogSnr> th;
        double l = rng.uniform(-6.0, -2.0);
        for (int i = 0; i + 1 < k; ++i) {
            th.push_back({l});
            l += rng.uniform(0.5, 5.0);
        }
        std::vector<int> res;
        for (int i = 0; i < k; ++i) res.push_back(4 << i);
        const auto p = build_partition(th, res, rng.uniform(1.0, 4.0));
        try {
            plan_cascade(p, n);
        } catch (const std::invalid_argument&) {
            ++rejected;
            continue;
        }
        ++valid;
        const DenoiserNet net = small_net(static_cast<std::uint64_t>(valid), 4);
        const CascadeParams cp{p, n, rng.uniform(), rng.uniform_int(3), rng.next_u64()};
        const auto a = infer(net, cp);
        const auto b = infer(net, cp);
        EXPECT_EQ(a.image, b.image);
        int transitions = 0;
        for (std::size_t j = 0; j < a.trace.records.size(); ++j) {
            const auto& r = a.trace.records[j];
            transitions += r.transition ? 1 : 0;
            if (j > 0) { EXPECT_GT(teacher_logsnr(r.teacher_t, p), teacher_logsnr(a.trace.records[j - 1].teacher_t, p)); }
        }
        EXPECT_EQ(transitions, k - 1);
        EXPECT_EQ(a.trace.records.back().resolution, res.back());
        EXPECT_EQ(a.image.height(), res.back());
    }
    EXPECT_EQ(valid, 100);
    RecordProperty("rejected_configurations", rejected);
}

TEST(Cascade, SampleSetDeterministic) {
    const DenoiserNet net = small_net(6);
    const auto a = cascade_sample_set(net, toy_partition(), 4, 1.0, 5, 8);
    const auto b = cascade_sample_set(net, toy_partition(), 4, 1.0, 5, 8);
    ASSERT_EQ(a.size(), 5u);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
    const auto one = infer(net, CascadeParams{toy_partition(), 4, 1.0, 1, derive_seed(8, std::uint64_t{4})});
    EXPECT_EQ(a[4], one.image);
}

TEST(Cascade, BackpropRequiresTapes) {
    SeededRng rng(1);
    const DenoiserNet net = small_net(1);
    const CascadeRun run = run_cascade(net, toy_partition(), 4, 1.0, 0, rng, false);
    std::vector<double> g(net.param_count());
    EXPECT_THROW(backprop_cascade(net, run, 2, ImageGrid({1, 16, 16}), g), std::logic_error);
    EXPECT_THROW(backprop_cascade(net, run, 9, ImageGrid({1, 16, 16}), g), std::out_of_range);
}

TEST(Cascade, TraceCsv) {
    const auto dir = rmdlab::testing::scratch_dir("trace");
    const auto r = infer(small_net(1), CascadeParams{toy_partition(), 4, 1.0, 0, 3});
    write_trace_csv(dir / "t.csv", r.trace);
    const std::string s = rmdlab::testing::slurp(dir / "t.csv");
    EXPECT_EQ(s.rfind("step,stage,teacher_t,shifted_t,sigma,resolution,transition\n", 0), 0u);
    EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 5);
}
