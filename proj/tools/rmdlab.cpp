// SPDX-License-Identifier: Apache-2.0
// Command-line front end: one subcommand per pipeline stage.
#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <sstream>

#include "rmdlab/config.hpp"
#include "rmdlab/diffusion.hpp"
#include "rmdlab/pipeline.hpp"
#include "rmdlab/rmd.hpp"

namespace {

template <class T>
std::string join(const std::vector<T>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
    return os.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rmdlab: cross-resolution distribution matching distillation at desk scale"};
    app.require_subcommand(1);

    std::string config_path, preset_name = "toy-default", out = "run";
    std::optional<std::uint64_t> seed;
    std::vector<std::string> sets;
    app.add_option("--config", config_path, "Config file (key.path = value lines)");
    app.add_option("--preset", preset_name, "Base preset: toy-default, sdxl-like, sd35-like, wan-like")
        ->capture_default_str();
    app.add_option("--seed", seed, "Root seed (overrides the config)");
    app.add_option("--out", out, "Run directory")->capture_default_str();
    app.add_option("--set", sets, "Override one config key: --set rmd.alpha=0.5 (repeatable)");

    auto* gen = app.add_subcommand("gen-data", "Generate the two-tier shape dataset");
    auto* teach = app.add_subcommand("train-teacher", "Train the teacher (low tier, then high tier)");
    auto* dist = app.add_subcommand("distill", "Distill the few-step cascaded generator");
    auto* samp = app.add_subcommand("sample", "Cascaded sampling from a generator checkpoint");
    auto* eval = app.add_subcommand("eval", "MMD report: student vs naive cascade vs teacher");
    auto* sched = app.add_subcommand("schedule", "Print the timestep/resolution schedule");
    auto* cost = app.add_subcommand("cost", "Analytic speedup table");

    std::string checkpoint;
    std::optional<int> sample_class, sample_count;
    std::optional<double> alpha_inf;
    samp->add_option("--checkpoint", checkpoint, "Generator checkpoint (default: <out>/<run_name>/generator.ckpt)");
    samp->add_option("--class", sample_class, "Class id (0 disc, 1 rectangle, 2 cross; default: all)");
    samp->add_option("--count", sample_count, "Number of samples");
    samp->add_option("--alpha", alpha_inf, "Inference noise-mix weight");

    std::optional<std::vector<double>> thresholds;
    std::optional<std::vector<int>> resolutions;
    std::optional<double> flow_shift, t_max;
    std::optional<int> steps;
    bool csv = false;
    sched->add_option("--thresholds", thresholds, "logSNR thresholds")->delimiter(',');
    sched->add_option("--resolutions", resolutions, "Stage resolutions")->delimiter(',');
    sched->add_option("--flow-shift", flow_shift, "Flow shift s >= 1");
    sched->add_option("--t-max", t_max, "Maximum timestep");
    for (auto* sc : {samp, sched}) sc->add_option("--steps", steps, "Inference steps N");
    sched->add_flag("--csv", csv, "Emit CSV");

    CLI11_PARSE(app, argc, argv);

    try {
        rmdlab::RunConfig cfg = rmdlab::preset(preset_name);
        if (!config_path.empty()) cfg = rmdlab::load_config(config_path, cfg);
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
            rmdlab::apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
        }
        if (seed) cfg.seed = *seed;
        if (thresholds) rmdlab::apply_setting(cfg, "schedule.thresholds", join(*thresholds));
        if (resolutions) rmdlab::apply_setting(cfg, "schedule.resolutions", join(*resolutions));
        if (flow_shift) cfg.rmd.flow_shift = *flow_shift;
        if (t_max) cfg.rmd.t_max = *t_max;
        if (steps) cfg.rmd.steps = *steps;
        if (sample_class) cfg.sample_class = *sample_class;
        if (sample_count) cfg.sample_count = *sample_count;
        if (alpha_inf) cfg.rmd.alpha_inference = *alpha_inf;

        if (*cost) {
            rmdlab::cmd_cost(std::cout);
            return 0;
        }
        if (*sched) {
            cfg.rmd.validate();
            rmdlab::cmd_schedule(cfg, std::cout, csv);
            return 0;
        }
        rmdlab::validate_config(cfg);
        if (*gen) rmdlab::cmd_gen_data(cfg, out, std::cout);
        if (*teach) rmdlab::cmd_train_teacher(cfg, out, std::cout);
        if (*dist) rmdlab::cmd_distill(cfg, out, std::cout);
        if (*samp) rmdlab::cmd_sample(cfg, out, checkpoint, std::cout);
        if (*eval) rmdlab::cmd_eval(cfg, out, std::cout);
    } catch (const rmdlab::MissingPrerequisite& e) {
        std::cerr << "error: missing prerequisite: " << e.what() << "\n";
        return 3;
    } catch (const rmdlab::TrainingDiverged& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const rmdlab::DistillDiverged& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: invalid configuration: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
