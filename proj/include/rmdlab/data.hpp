// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rmdlab/grid.hpp"

namespace rmdlab {

enum class ShapeClass : int { disc = 0, rectangle = 1, cross = 2 };
inline constexpr int kNumShapeClasses = 3;

enum class Tier : int { low = 0, high = 1 };

/// Shape placement in normalised canvas coordinates ([0,1] on both axes).
struct Pose {
    double center_x = 0.5;
    double center_y = 0.5;
    double size = 0.5;       // extent along the longer side, fraction of the canvas
    double intensity = 1.0;  // foreground value on a zero background
};

/// Anti-aliased render (4x4 supersampling per pixel).
ImageGrid render_shape(int class_id, const Pose& pose, int resolution);

struct ShapeSample {
    ImageGrid image;
    int class_id = 0;
    Tier tier = Tier::high;
    double quality_jitter = 0.0;  // per-sample pixel-noise std actually applied (0 for the high tier)
};

struct DatasetParams {
    int high_count = 2048;
    int low_count = 4096;
    int high_res = 16;
    int low_res = 8;
    double size_min = 0.45;
    double size_max = 0.85;
    double intensity_min = 0.5;
    double intensity_max = 1.0;
    // Low-tier corruption; every term is multiplied by jitter_scale.
    double jitter_scale = 1.0;
    double noise_std_max = 0.15;
    double blur_prob = 0.5;
    double intensity_jitter = 0.2;
    double haze_max = 0.1;
    std::uint64_t seed = 1;

    void validate() const;  // throws std::invalid_argument naming the offending key
};

struct Dataset {
    DatasetParams params;
    std::vector<ShapeSample> high;
    std::vector<ShapeSample> low;
};

Pose sample_pose(SeededRng& rng, const DatasetParams& p);
/// Clean low-resolution render of `pose` followed by the low-tier corruption.
ShapeSample corrupt_low_tier(int class_id, const Pose& pose, const DatasetParams& p, SeededRng& rng);

Dataset gen_dataset(const DatasetParams& params);

/// Per-tier binary files: "<dir>/high.rmdd" and "<dir>/low.rmdd".
void write_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset read_dataset(const std::filesystem::path& dir);

struct TierFileInfo {
    Tier tier = Tier::high;
    int count = 0;
    int height = 0;
    int width = 0;
    std::size_t record_size = 0;
    std::size_t data_offset = 0;
    std::array<int, kNumShapeClasses> class_counts{};
};
TierFileInfo read_tier_header(const std::filesystem::path& file);

std::vector<ImageGrid> images_of(const std::vector<ShapeSample>& samples);

}  // namespace rmdlab
