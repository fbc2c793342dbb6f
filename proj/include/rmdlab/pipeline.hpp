// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rmdlab/config.hpp"
#include "rmdlab/evalsuite.hpp"

namespace rmdlab {

/// A required upstream artifact is missing.
class MissingPrerequisite : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Artifact layout under a run directory.
struct RunLayout {
    std::filesystem::path root;

    std::filesystem::path data() const { return root / "data"; }
    std::filesystem::path teacher() const { return root / "teacher"; }
    std::filesystem::path teacher_checkpoint() const { return teacher() / "teacher.ckpt"; }
    std::filesystem::path distill(const std::string& run_name) const { return root / run_name; }
    std::filesystem::path generator_checkpoint(const std::string& run_name) const {
        return distill(run_name) / "generator.ckpt";
    }
    std::filesystem::path samples() const { return root / "samples"; }
    std::filesystem::path eval() const { return root / "eval"; }
};

/// Writes config.txt and manifest.txt (config hash, file inventory with sizes
/// and FNV-1a hashes, wall-clock seconds) into `dir`.
void write_run_metadata(const std::filesystem::path& dir, const RunConfig& cfg, const std::string& command,
                        double seconds);

void cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
void cmd_train_teacher(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
void cmd_distill(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);
/// checkpoint: empty = the run's distilled generator.
void cmd_sample(const RunConfig& cfg, const std::filesystem::path& out, const std::filesystem::path& checkpoint,
                std::ostream& log);

struct EvalSummary {
    std::vector<ReportRow> rows;
    double null_width = 0.0;
    double teacher_halves_mmd = 0.0;
    double rmd_mmd = 0.0;
    double naive_mmd = 0.0;
    std::optional<double> rm_off_mmd;
    double teacher_lowres_mmd = 0.0;  // teacher 8x8 samples upsampled vs teacher 16x16
};
EvalSummary cmd_eval(const RunConfig& cfg, const std::filesystem::path& out, std::ostream& log);

void cmd_schedule(const RunConfig& cfg, std::ostream& os, bool csv);
void cmd_cost(std::ostream& os);

}  // namespace rmdlab
