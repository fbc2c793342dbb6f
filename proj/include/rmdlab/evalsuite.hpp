// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rmdlab/grid.hpp"

namespace rmdlab {

struct SampleSet {
    std::vector<ImageGrid> images;
    std::string provenance;  // teacher-highres, student-cascade, naive-cascade, dataset-high, ...

    /// Throws unless every image has the same shape.
    GridShape shape() const;
};

/// Median of pairwise Euclidean distances between the flattened images.
double median_bandwidth(std::span<const ImageGrid> images);

/// Unbiased MMD^2 with k(a,b) = exp(-|a-b|^2 / (2 h^2)).
double mmd_rbf(std::span<const ImageGrid> a, std::span<const ImageGrid> b, double bandwidth);
double mmd_rbf(const SampleSet& a, const SampleSet& b, double bandwidth);

/// MMD^2 values under random relabellings of the pooled sets (a, b).
std::vector<double> mmd_permutation_null(std::span<const ImageGrid> a, std::span<const ImageGrid> b,
                                         double bandwidth, int permutations, std::uint64_t seed);
/// 95th percentile of |null|: the smallest MMD^2 distinguishable from noise.
double null_width(std::span<const double> null_values, double quantile = 0.95);

struct SummaryStats {
    double mean_intensity = 0.0;
    double pixel_variance = 0.0;
    double edge_energy = 0.0;  // mean |finite difference| over both axes
    std::array<double, 4> radial_spectrum{};  // power fractions, low -> high frequency
};

SummaryStats summary_stats(std::span<const ImageGrid> images);

struct CostEntry {
    int steps = 1;
    int height = 1;
    int width = 1;
};

/// base.steps * cfg * pixels(base)^gamma / sum(steps * pixels^gamma).
double cost_model_speedup(const CostEntry& base, double cfg_multiplier, std::span<const CostEntry> method,
                          double gamma);

struct ReportRow {
    std::string method;
    std::string metric;
    double value = 0.0;
};

void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows);

/// Contact sheet of the first `count` images.
void write_contact_sheet(const std::filesystem::path& path, std::span<const ImageGrid> images, int count = 24,
                         int columns = 8);

}  // namespace rmdlab
