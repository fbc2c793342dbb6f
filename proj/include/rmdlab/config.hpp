// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "rmdlab/data.hpp"
#include "rmdlab/diffusion.hpp"
#include "rmdlab/net.hpp"
#include "rmdlab/rmd.hpp"

namespace rmdlab {

struct NetConfig {
    int channels = 16;
    std::vector<int> dilations{1, 2, 4, 1};
    int embed_dim = 16;

    NetSpec spec(int num_classes) const;
};

struct EvalConfig {
    int samples = 256;         // per set; the teacher reference uses two disjoint sets of this size
    int permutations = 200;    // permutation-null draws
    int teacher_steps = 32;    // Euler steps for teacher reference samples
    std::string rm_off_run = "rmd-off";  // optional second distillation run to include in the report
};

/// Every tunable, addressable as "section.key = value" in a config file.
struct RunConfig {
    std::uint64_t seed = 1;
    std::string preset = "toy-default";
    DatasetParams data;
    NetConfig net;
    TeacherConfig teacher;
    RmdConfig rmd;
    std::string run_name = "rmd";  // distillation output directory under the run directory
    EvalConfig eval;
    int sample_count = 24;
    int sample_class = -1;  // -1: class-balanced

    /// "key = value" lines in a fixed key order; the config hash is taken over this text.
    std::string serialize() const;
    std::uint64_t hash() const;
};

/// Names accepted by preset().
std::vector<std::string> preset_names();
/// Throws std::invalid_argument for an unknown name.
RunConfig preset(std::string_view name);

/// Applies one "key = value" assignment; throws std::invalid_argument with the
/// key path for unknown keys or unparsable values.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);
/// Parses a config file on top of `base`. Blank lines and '#' comments are ignored.
RunConfig parse_config(std::string_view text, RunConfig base);
RunConfig load_config(const std::filesystem::path& path, RunConfig base);
/// Rejects inconsistent settings with the offending key path.
void validate_config(const RunConfig& cfg);

std::vector<std::string> config_keys();

}  // namespace rmdlab
