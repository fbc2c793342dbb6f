// SPDX-License-Identifier: Apache-2.0
// Acceptance suite: one PASS/FAIL line per criterion. Usage: rmdlab_acceptance [work_dir]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rmdlab/cascade.hpp"
#include "rmdlab/config.hpp"
#include "rmdlab/evalsuite.hpp"
#include "rmdlab/pipeline.hpp"
#include "rmdlab/rmd.hpp"
#include "rmdlab/schedule.hpp"
#include "rmdlab/transition.hpp"

namespace fs = std::filesystem;
using namespace rmdlab;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

ImageGrid random_grid(GridShape shape, std::uint64_t seed) {
    SeededRng rng(seed);
    return gaussian_noise(shape, rng);
}

DenoiserNet random_net(const NetSpec& spec, std::uint64_t seed) {
    DenoiserNet net(spec);
    SeededRng rng(seed);
    net.init_random(rng);
    return net;
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

RmdConfig toy_rmd() { return preset("toy-default").rmd; }

// 1. Resolution-shifted anchors and unshifted grids.
Outcome schedule_anchors() {
    auto sched = [](const char* name) {
        const RunConfig c = preset(name);
        return inference_schedule(c.rmd.steps, c.rmd.partition());
    };
    const auto sdxl = sched("sdxl-like"), sd35 = sched("sd35-like"), wan = sched("wan-like");
    bool ok = std::lround(sdxl[1].teacher.value) == 750 && std::lround(sdxl[1].shifted.value) == 857;
    ok = ok && std::lround(sd35[1].shifted.value) == 947;
    const double sd35_teacher[] = {1000, 900, 750, 500};
    for (int j = 0; j < 4; ++j) ok = ok && std::abs(sd35[static_cast<std::size_t>(j)].teacher.value - sd35_teacher[j]) < 1e-9;
    ok = ok && std::abs(std::lround(wan[1].shifted.value) - 974) <= 1 && std::abs(std::lround(wan[2].shifted.value) - 937) <= 1;
    const double wan_teacher[] = {1000, 962, 909, 834, 716, 505};
    double wan_dev = 0.0;
    for (int j = 0; j < 6; ++j)
        wan_dev = std::max(wan_dev, std::abs(wan[static_cast<std::size_t>(j)].teacher.value - wan_teacher[j]));
    ok = ok && wan_dev <= 6.0;
    return {ok, "SDXL 750->" + fmt(sdxl[1].shifted.value, 5) + ", SD3.5 900->" + fmt(sd35[1].shifted.value, 5) +
                    ", Wan 962->" + fmt(wan[1].shifted.value, 5) + " 909->" + fmt(wan[2].shifted.value, 5) +
                    ", Wan unshifted max deviation " + fmt(wan_dev, 3)};
}

// 2. Analytic speedup accounting.
Outcome speedups() {
    const CostEntry img{40, 1024, 1024};
    const std::vector<CostEntry> img_m{{2, 512, 512}, {2, 1024, 1024}};
    const CostEntry vid{50, 720, 1280};
    const std::vector<CostEntry> vid_m{{3, 480, 832}, {3, 720, 1280}};
    const double sd35 = cost_model_speedup(img, 2.0, img_m, 1.0);
    const double sdxl2 = cost_model_speedup(img, 2.0, img_m, 2.0);
    const double w1 = cost_model_speedup(vid, 2.0, vid_m, 1.0), w2 = cost_model_speedup(vid, 2.0, vid_m, 2.0);
    const bool ok = std::abs(sd35 - 32.0) < 1e-9 && sd35 <= 33.4 && 33.4 <= sdxl2 && std::abs(w1 - 23.3) < 0.05 &&
                    std::abs(w2 - 28.0) < 0.1 && w1 < 25.6 && 25.6 < w2;
    return {ok, "SD3.5/SDXL g=1 " + fmt(sd35) + " (SDXL g=2 " + fmt(sdxl2) + " brackets 33.4), Wan g=1 " + fmt(w1) +
                    " g=2 " + fmt(w2) + " bracket 25.6"};
}

// 3. Denoiser and full-chain gradients, upsampling adjoint.
Outcome gradients() {
    const NetSpec spec = preset("toy-default").net.spec(kNumShapeClasses);
    const DenoiserNet probe = random_net(spec, 5);
    const auto rep = gradient_check(probe, 1e-4, 11, 8, 1e-4, {1, 8, 8});
    const auto rep16 = gradient_check(probe, 1e-4, 12, 8, 1e-4, {1, 16, 16});

    // Cascade states -> upsample_transform -> generator loss, directional derivatives.
    DenoiserNet gen = random_net(spec, 21);
    const DenoiserNet fake = random_net(spec, 22), teacher = random_net(spec, 23);
    const auto p = toy_rmd().partition();
    const double alpha = 0.2, alpha_inf = 1.0, sigma_t = 0.45;
    const ImageGrid eps = random_grid({1, 16, 16}, 99);
    double chain_err = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
        auto x_high = [&](const DenoiserNet& g) {
            SeededRng rng(4242);
            const CascadeRun run = generate_cascade_states(g, 1, p, 4, alpha_inf, rng);
            const CascadeRecord& rec = run.steps[j];
            return upsample_transform(rec.state, rec.velocity, rec.plan.entry.sigma.value, sigma_t, 16, alpha, eps)
                .output;
        };
        SeededRng rng(4242);
        const CascadeRun run = generate_cascade_states(gen, 1, p, 4, alpha_inf, rng);
        const CascadeRecord& rec = run.steps[j];
        const double sj = rec.plan.entry.sigma.value;
        const ImageGrid x = upsample_transform(rec.state, rec.velocity, sj, sigma_t, 16, alpha, eps).output;
        const auto gl = generator_loss(x, sigma_t, fake, teacher, 1);
        // Stop-gradient: the critics' surrogates are frozen at x, so the objective is PH(x' - sg(x - r)).
        const ImageGrid target = x - sigma_t * (teacher.forward(x, sigma_t, 1) - fake.forward(x, sigma_t, 1));
        const double c = huber_constant(0.00054, x.size());
        auto loss_of = [&](const DenoiserNet& g) { return pseudo_huber((x_high(g) - target).data(), c); };
        const RenoiseGrad rg = upsample_renoise_backward(gl.grad, sj, sigma_t, alpha, rec.state.height(),
                                                         rec.state.width());
        std::vector<double> grad(gen.param_count(), 0.0);
        ImageGrid gs = rg.state;
        gs += gen.backward(rec.tape, rg.velocity, grad);
        backprop_cascade(gen, run, j, gs, grad);
        for (int k = 0; k < 4; ++k) {
            const auto dir = unit_dir(gen.param_count(), 1000 + 10 * j + k);
            std::vector<double> p0(gen.params().begin(), gen.params().end());
            const double h = 1e-5;
            for (std::size_t i = 0; i < p0.size(); ++i) gen.params()[i] = p0[i] + h * dir[i];
            const double fp = loss_of(gen);
            for (std::size_t i = 0; i < p0.size(); ++i) gen.params()[i] = p0[i] - h * dir[i];
            const double fm = loss_of(gen);
            std::copy(p0.begin(), p0.end(), gen.params().begin());
            const double fd = (fp - fm) / (2 * h);
            double an = 0.0;
            for (std::size_t i = 0; i < dir.size(); ++i) an += dir[i] * grad[i];
            chain_err = std::max(chain_err, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
        }
    }

    // <U x, y> = <x, U^T y>.
    double adj_err = 0.0;
    const int sizes[][4] = {{8, 8, 16, 16}, {5, 7, 12, 9}, {4, 4, 16, 16}};
    for (int i = 0; i < 3; ++i) {
        const auto& s = sizes[i];
        const ImageGrid x = random_grid({1, s[0], s[1]}, 40 + i), y = random_grid({1, s[2], s[3]}, 50 + i);
        const double lhs = dot(bilinear_upsample(x, s[2], s[3]), y);
        const double rhs = dot(x, bilinear_upsample_adjoint(y, s[0], s[1]));
        adj_err = std::max(adj_err, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
    }
    const bool ok = probe.param_count() <= 10000 && rep.passed && rep16.passed && chain_err < 1e-3 && adj_err < 1e-10;
    return {ok, std::to_string(probe.param_count()) + " params; denoiser max rel err " +
                    fmt(std::max(rep.max_relative_error, rep16.max_relative_error), 3) + " (<1e-4), chain " +
                    fmt(chain_err, 3) + " (<1e-3), adjoint " + fmt(adj_err, 3) + " (<1e-10)"};
}

double teacher_logsnr(double t, const TrajectoryPartition& p) {
    return t >= p.t_max ? -INFINITY : sigma_to_logsnr(p.to_sigma({t})).value;
}

// 4. State-machine invariants on random configurations.
Outcome state_machine() {
    SeededRng rng(2025);
    int valid = 0, rejected = 0, violations = 0;
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
            ++rejected;  // grid skips a stage entirely
            continue;
        }
        ++valid;
        DenoiserNet net(make_denoiser_spec(4, std::vector<int>{1, 2}, 8, 3));
        SeededRng init(static_cast<std::uint64_t>(valid));
        net.init_random(init);
        const CascadeParams cp{p, n, rng.uniform(), rng.uniform_int(3), rng.next_u64()};
        const auto a = infer(net, cp), b = infer(net, cp);
        bool ok = a.image == b.image && a.image.height() == res.back() && a.trace.records.back().resolution == res.back();
        int transitions = 0;
        for (std::size_t j = 0; j < a.trace.records.size(); ++j) {
            transitions += a.trace.records[j].transition ? 1 : 0;
            if (j > 0 && !(teacher_logsnr(a.trace.records[j].teacher_t, p) >
                           teacher_logsnr(a.trace.records[j - 1].teacher_t, p)))
                ok = false;
        }
        ok = ok && transitions == k - 1;
        try {
            validate_trace(a.trace, p, n);
        } catch (const std::logic_error&) {
            ok = false;
        }
        if (!ok) ++violations;
    }
    return {violations == 0, std::to_string(valid) + " configurations, " + std::to_string(violations) +
                                 " violations (" + std::to_string(rejected) + " inconsistent plans rejected up front)"};
}

// 5. Noise mixing.
Outcome noise_mix() {
    SeededRng r1(101), r2(202);
    const ImageGrid p = gaussian_noise({1, 1000, 1000}, r1), g = gaussian_noise({1, 1000, 1000}, r2);
    bool ok = mix_noise(p, g, 0.0) == g && mix_noise(p, g, 1.0) == p;
    double worst = 0.0;
    for (double a : {0.0, 0.2, 0.5, 0.8, 1.0}) {
        const ImageGrid m = mix_noise(p, g, a);
        const double mean = m.mean();
        const double var = m.squared_norm() / static_cast<double>(m.size()) - mean * mean;
        worst = std::max(worst, std::abs(var - 1.0));
    }
    ok = ok && worst < 0.01;
    return {ok, "endpoints exact, max |var-1| over 1e6 draws " + fmt(worst, 3)};
}

// 8. Warm-up gating.
Outcome warmup_audit() {
    RmdConfig c = toy_rmd();
    c.train_steps = 120;
    c.warmup_steps = 40;
    c.batch = 2;
    DenoiserNet teacher(make_denoiser_spec(6, std::vector<int>{1, 2}, 8, 3));
    SeededRng init(21);
    teacher.init_random(init);
    const auto res = train(teacher, c, 3);
    int early2 = 0, late[2] = {0, 0};
    for (const auto& r : res.log) {
        if (r.step < c.warmup_steps) early2 += r.stage == 2 ? 1 : 0;
        else ++late[r.stage - 1];
    }
    auto chi2 = [](const int* counts) {
        const double e = (counts[0] + counts[1]) / 2.0;
        return ((counts[0] - e) * (counts[0] - e) + (counts[1] - e) * (counts[1] - e)) / e;
    };
    // Larger sample straight from the sampler.
    SeededRng rng(9);
    const auto p = c.partition();
    int big[2] = {0, 0}, big_warm2 = 0;
    for (int i = 0; i < 20000; ++i) {
        ++big[sample_stage_and_timestep(p, DistillPhase::full, {}, rng).stage - 1];
        big_warm2 += sample_stage_and_timestep(p, DistillPhase::warmup, {}, rng).stage == 2 ? 1 : 0;
    }
    const bool ok = early2 == 0 && late[1] > 0 && chi2(late) < 10.83 && big_warm2 == 0 && chi2(big) < 10.83;
    return {ok, "stage-2 draws before warm-up " + std::to_string(early2) + ", after " + std::to_string(late[1]) + "/" +
                    std::to_string(late[0] + late[1]) + " (chi2 " + fmt(chi2(late), 3) + "); sampler chi2 " +
                    fmt(chi2(big), 3) + " on 20000 draws (crit 10.83)"};
}

// 9. Pseudo-Huber regimes.
Outcome huber_regimes() {
    const std::size_t d = 256;
    const double c = huber_constant(0.00054, d);
    const auto dir = unit_dir(d, 3);
    auto scaled = [&](double n) {
        std::vector<double> r(dir);
        for (double& v : r) v *= n;
        return r;
    };
    double quad_err = 0.0, lin_err = 0.0;
    for (double n : {c / 10, c / 100, c / 1000}) quad_err = std::max(quad_err, std::abs(pseudo_huber(scaled(n), c) / (n * n / (2 * c)) - 1));
    for (double n : {100 * c, 1000 * c}) {
        const double slope = (pseudo_huber(scaled(n * 1.001), c) - pseudo_huber(scaled(n * 0.999), c)) / (0.002 * n);
        lin_err = std::max(lin_err, std::abs(slope - 1));
    }
    const bool ok = std::abs(c - 0.00054 * std::sqrt(256.0)) < 1e-18 && quad_err < 0.01 && lin_err < 0.01;
    return {ok, "C=" + fmt(c) + ", quadratic rel err " + fmt(quad_err, 3) + ", linear slope err " + fmt(lin_err, 3)};
}

void run_pipeline(const RunConfig& cfg, const fs::path& dir, std::ostream& log, bool rm_off) {
    cmd_gen_data(cfg, dir, log);
    cmd_train_teacher(cfg, dir, log);
    cmd_distill(cfg, dir, log);
    if (rm_off) {
        RunConfig off = cfg;
        apply_setting(off, "rmd.run_name", "rmd-off");
        apply_setting(off, "rmd.cross_resolution", "false");
        cmd_distill(off, dir, log);
    }
}

// 6 and 7 share one full toy-default pipeline.
std::pair<Outcome, Outcome> desk_scale(const fs::path& work) {
    const fs::path dir = work / "toy-default";
    fs::remove_all(dir);
    RunConfig cfg = preset("toy-default");
    std::ostringstream log;
    run_pipeline(cfg, dir, log, true);
    const EvalSummary s = cmd_eval(cfg, dir, log);
    std::cout << log.str();
    const double w = s.null_width;
    const double null_ref = std::max(std::abs(s.teacher_halves_mmd), w);
    Outcome six{s.teacher_lowres_mmd >= 3 * null_ref,
                "MMD2(teacher 8x8 up, 16x16) " + fmt(s.teacher_lowres_mmd) + " vs 3 x max(|halves| " +
                    fmt(s.teacher_halves_mmd) + ", null width " + fmt(w) + ")"};
    const double off = s.rm_off_mmd.value_or(NAN);
    Outcome seven{s.rm_off_mmd.has_value() && s.naive_mmd - s.rmd_mmd >= 2 * w && off - s.rmd_mmd >= 2 * w,
                  "RMD " + fmt(s.rmd_mmd) + ", naive " + fmt(s.naive_mmd) + ", RM-off " + fmt(off) +
                      ", required margin 2 x " + fmt(w)};
    return {six, seven};
}

std::string strip_wall_clock(const std::string& text) {
    std::istringstream in(text);
    std::string line, out;
    while (std::getline(in, line))
        if (line.rfind("wall_seconds", 0) != 0) out += line + "\n";
    return out;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        if (e.path().filename() == "manifest.txt") bytes = strip_wall_clock(bytes);
        files[fs::relative(e.path(), root).string()] = std::move(bytes);
    }
    return files;
}

// 10. Two identical tiny runs.
Outcome reproducibility(const fs::path& work) {
    const std::string text =
        "preset = toy-default\n"
        "data.high_count = 96\ndata.low_count = 96\n"
        "teacher.low_steps = 20\nteacher.high_steps = 20\nteacher.validation_count = 16\n"
        "rmd.train_steps = 12\nrmd.warmup_steps = 4\nrmd.batch = 2\nrmd.checkpoint_every = 5\n"
        "eval.samples = 16\neval.permutations = 20\neval.teacher_steps = 4\nsample.count = 6\n";
    const RunConfig cfg = parse_config(text, RunConfig{});
    std::vector<std::map<std::string, std::string>> snaps;
    std::vector<std::string> logs;
    // Both runs use the same output path (logs name it); the first is moved aside afterwards.
    const fs::path dir = work / "repro", first = work / "repro-first";
    fs::remove_all(dir);
    fs::remove_all(first);
    for (int run = 0; run < 2; ++run) {
        std::ostringstream log;
        run_pipeline(cfg, dir, log, true);
        cmd_sample(cfg, dir, {}, log);
        cmd_eval(cfg, dir, log);
        snaps.push_back(snapshot(dir));
        logs.push_back(log.str());
        if (run == 0) fs::rename(dir, first);
    }
    std::vector<std::string> differ;
    for (const auto& [k, v] : snaps[0]) {
        const auto it = snaps[1].find(k);
        if (it == snaps[1].end() || it->second != v) differ.push_back(k);
    }
    if (snaps[0].size() != snaps[1].size()) differ.push_back("<file set>");
    if (logs[0] != logs[1]) differ.push_back("<log>");
    int ckpts = 0, csvs = 0;
    for (const auto& [k, v] : snaps[0]) {
        ckpts += k.ends_with(".ckpt") ? 1 : 0;
        csvs += k.ends_with(".csv") ? 1 : 0;
    }
    const bool ok = differ.empty() && ckpts >= 4 && snaps[0].count("eval/report.csv") && snaps[0].count("samples/trace.csv");
    std::string detail = std::to_string(snaps[0].size()) + " files (" + std::to_string(ckpts) + " checkpoints, " +
                         std::to_string(csvs) + " CSVs incl. trace and report) and logs compared";
    for (const auto& d : differ) detail += "; differs: " + d;
    return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "rmdlab_acceptance";
    fs::create_directories(work);
    std::map<int, std::pair<std::string, Outcome>> results;
    auto run = [&](int id, const std::string& name, const std::function<Outcome()>& f) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = f();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        o.detail += " [" + fmt(secs, 3) + " s]";
        results[id] = {name, o};
    };
    run(1, "schedule anchors", schedule_anchors);
    run(2, "speedup accounting", speedups);
    run(3, "gradient checks", gradients);
    run(4, "cascade state machine", state_machine);
    run(5, "noise mix", noise_mix);
    std::pair<Outcome, Outcome> desk;
    run(6, "cross-resolution gap", [&] {
        desk = desk_scale(work);
        return desk.first;
    });
    run(7, "RMD vs naive and RM-off", [&] {
        if (desk.second.detail.empty()) return Outcome{false, "pipeline did not complete"};
        return desk.second;
    });
    run(8, "warm-up gating", warmup_audit);
    run(9, "pseudo-Huber regimes", huber_regimes);
    run(10, "reproducibility", [&] { return reproducibility(work); });

    int failed = 0;
    for (const auto& [id, r] : results) {
        std::cout << (r.second.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << r.first << " -- "
                  << r.second.detail << "\n";
        failed += r.second.pass ? 0 : 1;
    }
    std::cout << (failed ? "acceptance: " + std::to_string(failed) + " criteria failed" : "acceptance: all criteria passed")
              << std::endl;
    return failed ? 1 : 0;
}
