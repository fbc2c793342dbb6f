// SPDX-License-Identifier: Apache-2.0
#include "rmdlab/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "rmdlab/cascade.hpp"
#include "rmdlab/data.hpp"
#include "rmdlab/diffusion.hpp"
#include "rmdlab/rmd.hpp"
#include "rmdlab/schedule.hpp"

namespace fs = std::filesystem;

namespace rmdlab {

namespace {

constexpr const char* kVersion = "rmdlab 0.1.0";

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

void require_file(const fs::path& p, const std::string& what, const std::string& how) {
    if (!fs::exists(p)) throw MissingPrerequisite(what + " not found at " + p.string() + " (run `" + how + "` first)");
}

DenoiserNet load_teacher(const RunLayout& layout) {
    require_file(layout.teacher_checkpoint(), "teacher checkpoint", "rmdlab train-teacher");
    return DenoiserNet::load(layout.teacher_checkpoint());
}

void check_resolutions(const RunConfig& cfg) {
    if (cfg.rmd.resolutions.back() != cfg.data.high_res || cfg.rmd.resolutions.front() < 1)
        throw std::invalid_argument("schedule.resolutions: the last resolution (" +
                                    std::to_string(cfg.rmd.resolutions.back()) + ") must equal data.high_res (" +
                                    std::to_string(cfg.data.high_res) + ") to distill or sample at desk scale");
}

std::vector<ImageGrid> upsample_all(const std::vector<ImageGrid>& in, int res) {
    std::vector<ImageGrid> out;
    out.reserve(in.size());
    for (const auto& im : in) out.push_back(bilinear_upsample(im, res, res));
    return out;
}

void add_stats_rows(std::vector<ReportRow>& rows, const std::string& method, const std::vector<ImageGrid>& set) {
    const SummaryStats s = summary_stats(set);
    rows.push_back({method, "mean_intensity", s.mean_intensity});
    rows.push_back({method, "pixel_variance", s.pixel_variance});
    rows.push_back({method, "edge_energy", s.edge_energy});
    for (std::size_t b = 0; b < 4; ++b) rows.push_back({method, "spectrum_bin" + std::to_string(b), s.radial_spectrum[b]});
}

}  // namespace

void write_run_metadata(const fs::path& dir, const RunConfig& cfg, const std::string& command, double seconds) {
    fs::create_directories(dir);
    const std::string text = cfg.serialize();
    {
        std::ofstream out(dir / "config.txt", std::ios::trunc);
        out << text;
        if (!out) throw std::runtime_error("cannot write " + (dir / "config.txt").string());
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "manifest.txt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::ofstream out(dir / "manifest.txt", std::ios::trunc);
    out << "version = " << kVersion << "\n"
        << "command = " << command << "\n"
        << "config_hash = " << hex64(fnv1a64(text)) << "\n"
        << "seed = " << cfg.seed << "\n"
        << "wall_seconds = " << std::fixed << std::setprecision(3) << seconds << "\n";
    for (const auto& f : files) {
        const std::string bytes = read_file(f);
        out << "file = " << f.filename().string() << " " << bytes.size() << " " << hex64(fnv1a64(bytes)) << "\n";
    }
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
}

void cmd_gen_data(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
    const auto t0 = Clock::now();
    DatasetParams p = cfg.data;
    p.seed = derive_seed(cfg.seed, "data");
    const Dataset ds = gen_dataset(p);
    const RunLayout layout{out};
    write_dataset(layout.data(), ds);
    write_contact_sheet(layout.data() / "high_tier.pgm", images_of(ds.high));
    write_contact_sheet(layout.data() / "low_tier.pgm", images_of(ds.low));
    write_run_metadata(layout.data(), cfg, "gen-data", seconds_since(t0));
    log << "gen-data: " << ds.high.size() << " high-tier and " << ds.low.size() << " low-tier samples -> "
        << layout.data().string() << "\n";
}

void cmd_train_teacher(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
    const auto t0 = Clock::now();
    const RunLayout layout{out};
    require_file(layout.data() / "high.rmdd", "dataset", "rmdlab gen-data");
    require_file(layout.data() / "low.rmdd", "dataset", "rmdlab gen-data");
    const Dataset ds = read_dataset(layout.data());
    const TeacherModel model =
        train_teacher(ds, cfg.net.spec(kNumShapeClasses), cfg.teacher, derive_seed(cfg.seed, "teacher"));
    fs::create_directories(layout.teacher());
    model.net.save(layout.teacher_checkpoint());
    write_teacher_log(layout.teacher() / "train_log.csv", model.log);
    {
        std::ofstream v(layout.teacher() / "validation.csv", std::ios::trunc);
        v << "checkpoint,high_res_validation_loss\n" << std::setprecision(10)
          << "after_low_phase," << model.val_loss_after_low << "\n"
          << "after_high_phase," << model.val_loss_after_high << "\n";
    }
    write_run_metadata(layout.teacher(), cfg, "train-teacher", seconds_since(t0));
    log << "train-teacher: " << model.log.size() << " steps, high-res validation loss " << model.val_loss_after_low
        << " (after low phase) -> " << model.val_loss_after_high << " (after high phase)\n";
}

void cmd_distill(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
    const auto t0 = Clock::now();
    check_resolutions(cfg);
    const RunLayout layout{out};
    const DenoiserNet teacher = load_teacher(layout);
    const fs::path dir = layout.distill(cfg.run_name);
    fs::create_directories(dir);
    const DistillResult res = train(teacher, cfg.rmd, derive_seed(cfg.seed, "distill"), [&](const DistillState& s) {
        s.generator.save(dir / "generator.ckpt");
        s.fake.save(dir / "fake.ckpt");
    });
    write_distill_log(dir / "train_log.csv", res.log);
    write_run_metadata(dir, cfg, "distill", seconds_since(t0));
    double g = 0.0;
    const std::size_t tail = std::min<std::size_t>(res.log.size(), 20);
    for (std::size_t i = res.log.size() - tail; i < res.log.size(); ++i) g += res.log[i].generator_loss;
    log << "distill[" << cfg.run_name << "]: " << res.log.size() << " steps"
        << (cfg.rmd.cross_resolution ? "" : " (single-resolution states)") << ", final generator loss (mean of last "
        << tail << ") " << (tail ? g / static_cast<double>(tail) : 0.0) << "\n";
}

void cmd_sample(const RunConfig& cfg, const fs::path& out, const fs::path& checkpoint, std::ostream& log) {
    const auto t0 = Clock::now();
    check_resolutions(cfg);
    const RunLayout layout{out};
    const fs::path ckpt = checkpoint.empty() ? layout.generator_checkpoint(cfg.run_name) : checkpoint;
    require_file(ckpt, "generator checkpoint", "rmdlab distill");
    const DenoiserNet net = DenoiserNet::load(ckpt);
    const TrajectoryPartition part = cfg.rmd.partition();
    const fs::path dir = layout.samples();
    fs::create_directories(dir);
    const std::uint64_t seed = derive_seed(cfg.seed, "sample");
    std::vector<ImageGrid> images;
    std::ofstream stats(dir / "samples.csv", std::ios::trunc);
    stats << "index,class,mean,min,max\n" << std::setprecision(10);
    for (int k = 0; k < cfg.sample_count; ++k) {
        const int cls = cfg.sample_class >= 0 ? cfg.sample_class : k % kNumShapeClasses;
        CascadeParams cp{part, cfg.rmd.steps, cfg.rmd.alpha_inference, cls,
                         derive_seed(seed, static_cast<std::uint64_t>(k))};
        CascadeResult r = infer(net, cp);
        if (k == 0) write_trace_csv(dir / "trace.csv", r.trace);
        const auto d = r.image.data();
        stats << k << ',' << cls << ',' << r.image.mean() << ',' << *std::min_element(d.begin(), d.end()) << ','
              << *std::max_element(d.begin(), d.end()) << '\n';
        images.push_back(std::move(r.image));
    }
    stats.close();
    write_contact_sheet(dir / "grid.pgm", images, cfg.sample_count);
    write_run_metadata(dir, cfg, "sample", seconds_since(t0));
    log << "sample: " << images.size() << " images from " << ckpt.string() << " -> " << dir.string() << "\n";
}

EvalSummary cmd_eval(const RunConfig& cfg, const fs::path& out, std::ostream& log) {
    const auto t0 = Clock::now();
    check_resolutions(cfg);
    const RunLayout layout{out};
    const DenoiserNet teacher = load_teacher(layout);
    require_file(layout.generator_checkpoint(cfg.run_name), "generator checkpoint", "rmdlab distill");
    const DenoiserNet generator = DenoiserNet::load(layout.generator_checkpoint(cfg.run_name));
    std::optional<DenoiserNet> rm_off;
    if (!cfg.eval.rm_off_run.empty() && fs::exists(layout.generator_checkpoint(cfg.eval.rm_off_run)))
        rm_off = DenoiserNet::load(layout.generator_checkpoint(cfg.eval.rm_off_run));

    const int n = cfg.eval.samples;
    const int hi = cfg.data.high_res, lo = cfg.data.low_res;
    const TrajectoryPartition part = cfg.rmd.partition();
    const int steps = cfg.rmd.steps;
    const double a_inf = cfg.rmd.alpha_inference;

    const auto ref_a = teacher_sample_set(teacher, n, hi, cfg.eval.teacher_steps, derive_seed(cfg.seed, "eval/ref-a"));
    const auto ref_b = teacher_sample_set(teacher, n, hi, cfg.eval.teacher_steps, derive_seed(cfg.seed, "eval/ref-b"));
    const auto teacher_low = upsample_all(
        teacher_sample_set(teacher, n, lo, cfg.eval.teacher_steps, derive_seed(cfg.seed, "eval/teacher-low")), hi);
    // Matched seeds and classes across every cascade arm.
    const std::uint64_t arm_seed = derive_seed(cfg.seed, "eval/arms");
    const auto rmd_set = cascade_sample_set(generator, part, steps, a_inf, n, arm_seed);
    const auto naive_set = cascade_sample_set(teacher, part, steps, a_inf, n, arm_seed);
    std::vector<ImageGrid> rm_off_set;
    if (rm_off) rm_off_set = cascade_sample_set(*rm_off, part, steps, a_inf, n, arm_seed);

    std::vector<ImageGrid> pooled(ref_a);
    pooled.insert(pooled.end(), ref_b.begin(), ref_b.end());
    const double h = median_bandwidth(pooled);
    const auto null = mmd_permutation_null(ref_a, ref_b, h, cfg.eval.permutations, derive_seed(cfg.seed, "eval/null"));

    EvalSummary s;
    s.null_width = null_width(null);
    s.teacher_halves_mmd = mmd_rbf(ref_b, ref_a, h);
    s.teacher_lowres_mmd = mmd_rbf(teacher_low, ref_a, h);
    s.rmd_mmd = mmd_rbf(rmd_set, ref_a, h);
    s.naive_mmd = mmd_rbf(naive_set, ref_a, h);
    if (rm_off) s.rm_off_mmd = mmd_rbf(rm_off_set, ref_a, h);

    std::optional<std::vector<ImageGrid>> data_high;
    if (fs::exists(layout.data() / "high.rmdd")) {
        Dataset ds = read_dataset(layout.data());
        std::vector<ImageGrid> d = images_of(ds.high);
        if (static_cast<int>(d.size()) > n) d.resize(static_cast<std::size_t>(n));
        if (d.size() >= 2) data_high = std::move(d);
    }

    auto& rows = s.rows;
    rows.push_back({"null", "bandwidth", h});
    rows.push_back({"null", "permutation_width_95", s.null_width});
    rows.push_back({"null", "permutations", static_cast<double>(cfg.eval.permutations)});
    rows.push_back({"null", "samples_per_set", static_cast<double>(n)});
    auto arm = [&](const std::string& name, const std::vector<ImageGrid>& set, double mmd_teacher) {
        rows.push_back({name, "mmd2_teacher", mmd_teacher});
        if (data_high) rows.push_back({name, "mmd2_dataset", mmd_rbf(set, *data_high, h)});
        add_stats_rows(rows, name, set);
    };
    arm("teacher_highres_b", ref_b, s.teacher_halves_mmd);
    arm("teacher_lowres_upsampled", teacher_low, s.teacher_lowres_mmd);
    arm("student_cascade", rmd_set, s.rmd_mmd);
    arm("naive_cascade", naive_set, s.naive_mmd);
    if (rm_off) arm("rm_off_cascade", rm_off_set, *s.rm_off_mmd);
    add_stats_rows(rows, "teacher_highres_a", ref_a);

    const fs::path dir = layout.eval();
    fs::create_directories(dir);
    write_report_csv(dir / "report.csv", rows);
    write_contact_sheet(dir / "teacher_highres.pgm", ref_a);
    write_contact_sheet(dir / "teacher_lowres_upsampled.pgm", teacher_low);
    write_contact_sheet(dir / "student_cascade.pgm", rmd_set);
    write_contact_sheet(dir / "naive_cascade.pgm", naive_set);
    if (rm_off) write_contact_sheet(dir / "rm_off_cascade.pgm", rm_off_set);
    write_run_metadata(dir, cfg, "eval", seconds_since(t0));

    log << std::setprecision(5) << "eval: MMD^2 to teacher reference (null width " << s.null_width << ")\n"
        << "  teacher halves           " << s.teacher_halves_mmd << "\n"
        << "  teacher 8x8 upsampled    " << s.teacher_lowres_mmd << "\n"
        << "  student cascade          " << s.rmd_mmd << "\n"
        << "  naive cascade            " << s.naive_mmd << "\n";
    if (rm_off) log << "  rm-off cascade           " << *s.rm_off_mmd << "\n";
    return s;
}

void cmd_schedule(const RunConfig& cfg, std::ostream& os, bool csv) {
    const TrajectoryPartition p = cfg.rmd.partition();
    const auto sched = inference_schedule(cfg.rmd.steps, p);
    auto logsnr = [](double sigma) -> std::string {
        if (sigma >= 1.0) return "-inf";
        if (sigma <= 0.0) return "inf";
        std::ostringstream o;
        o << std::fixed << std::setprecision(4) << sigma_to_logsnr(Sigma{sigma}).value;
        return o.str();
    };
    if (csv) {
        os << "step,stage,resolution,teacher_t,timestep,sigma,logsnr\n" << std::setprecision(10);
        for (const auto& e : sched)
            os << e.step << ',' << e.stage << ',' << e.resolution << ',' << e.teacher.value << ',' << e.shifted.value
               << ',' << e.sigma.value << ',' << logsnr(e.sigma.value) << '\n';
        return;
    }
    os << "preset " << cfg.preset << ": K=" << p.num_stages() << ", N=" << cfg.rmd.steps
       << ", flow shift " << p.flow_shift << ", T_max " << p.t_max << "\n";
    for (const auto& st : p.stages)
        os << "  stage " << st.index << " @" << st.resolution << ": teacher [" << std::fixed << std::setprecision(1)
           << st.teacher.lo.value << ", " << st.teacher.hi.value << "], shifted [" << st.shifted.lo.value << ", "
           << st.shifted.hi.value << "]\n";
    os << std::setw(5) << "step" << std::setw(7) << "stage" << std::setw(12) << "resolution" << std::setw(11)
       << "teacher_t" << std::setw(10) << "timestep" << std::setw(9) << "sigma" << std::setw(10) << "logSNR" << "\n";
    for (const auto& e : sched)
        os << std::setw(5) << e.step << std::setw(7) << e.stage << std::setw(12) << e.resolution << std::setw(11)
           << std::setprecision(1) << e.teacher.value << std::setw(10) << std::setprecision(0) << e.shifted.value
           << std::setw(9) << std::setprecision(4) << e.sigma.value << std::setw(10) << logsnr(e.sigma.value) << "\n";
    os << "timesteps: [";
    for (std::size_t i = 0; i < sched.size(); ++i)
        os << (i ? ", " : "") << std::llround(sched[i].shifted.value) << " (" << std::llround(sched[i].teacher.value)
           << ")";
    os << "]\n";
    os.unsetf(std::ios::floatfield);
}

void cmd_cost(std::ostream& os) {
    struct Row {
        const char* name;
        CostEntry base;
        double cfg;
        std::vector<CostEntry> method;
        const char* reported;
    };
    const std::vector<Row> rows = {
        {"SDXL", {40, 1024, 1024}, 2.0, {{2, 512, 512}, {2, 1024, 1024}}, "33.4x"},
        {"SD3.5", {40, 1024, 1024}, 2.0, {{2, 512, 512}, {2, 1024, 1024}}, "32.0x"},
        {"Wan2.1", {50, 720, 1280}, 2.0, {{3, 480, 832}, {3, 720, 1280}}, "25.6x"},
    };
    os << std::left << std::setw(8) << "model" << std::right << std::setw(14) << "speedup g=1" << std::setw(14)
       << "speedup g=2" << std::setw(10) << "reported" << "\n";
    for (const auto& r : rows)
        os << std::left << std::setw(8) << r.name << std::right << std::fixed << std::setprecision(2) << std::setw(14)
           << cost_model_speedup(r.base, r.cfg, r.method, 1.0) << std::setw(14)
           << cost_model_speedup(r.base, r.cfg, r.method, 2.0) << std::setw(10) << r.reported << "\n";
    os.unsetf(std::ios::floatfield);
}

}  // namespace rmdlab
