// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace rmdlab {

struct GridShape {
    int channels = 1;
    int height = 1;
    int width = 1;

    std::size_t size() const {
        return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
               static_cast<std::size_t>(width);
    }
    std::size_t plane() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
    friend bool operator==(const GridShape&, const GridShape&) = default;
};

/// Channel-major, row-major raster of doubles.
class ImageGrid {
public:
    ImageGrid() = default;
    explicit ImageGrid(GridShape shape, double fill = 0.0);
    ImageGrid(GridShape shape, std::vector<double> data);

    const GridShape& shape() const { return shape_; }
    int channels() const { return shape_.channels; }
    int height() const { return shape_.height; }
    int width() const { return shape_.width; }
    std::size_t size() const { return data_.size(); }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    std::span<const double> channel(int c) const;
    std::span<double> channel(int c);

    double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
    double at(int c, int y, int x) const { return data_[index(c, y, x)]; }

    double mean() const;
    double sum() const;
    double squared_norm() const;
    bool all_finite() const;

    ImageGrid& operator+=(const ImageGrid& other);
    ImageGrid& operator-=(const ImageGrid& other);
    ImageGrid& operator*=(double s);
    /// this += s * other
    ImageGrid& add_scaled(const ImageGrid& other, double s);

    friend bool operator==(const ImageGrid&, const ImageGrid&) = default;

private:
    std::size_t index(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * shape_.height + static_cast<std::size_t>(y)) * shape_.width +
               static_cast<std::size_t>(x);
    }

    GridShape shape_{};
    std::vector<double> data_;
};

ImageGrid operator+(ImageGrid a, const ImageGrid& b);
ImageGrid operator-(ImageGrid a, const ImageGrid& b);
ImageGrid operator*(double s, ImageGrid a);
/// a*x + b*y
ImageGrid lincomb(double a, const ImageGrid& x, double b, const ImageGrid& y);
double dot(const ImageGrid& a, const ImageGrid& b);
void require_same_shape(const ImageGrid& a, const ImageGrid& b, const char* what);

/// Portable seeded generator: std::mt19937_64 (its output sequence is fixed
/// by the standard), 53-bit uniform doubles, Box-Muller normals. Standard
/// library distributions are avoided because their output is
/// implementation-defined.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n).
    int uniform_int(int n);
    double normal();

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);
/// Per-purpose child seed: splitmix64(root ^ fnv1a64(label)).
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index);

ImageGrid gaussian_noise(GridShape shape, SeededRng& rng);

/// Half-pixel-centre bilinear interpolation (align_corners = false), edge clamped.
ImageGrid bilinear_upsample(const ImageGrid& x, int target_h, int target_w);
/// Transpose of bilinear_upsample: maps a target-sized grid back to source size.
ImageGrid bilinear_upsample_adjoint(const ImageGrid& y, int source_h, int source_w);

/// Mean over factor x factor blocks.
ImageGrid area_downsample(const ImageGrid& x, int factor);

/// Binary PGM (1 channel) or PPM (3 channels). Values in [lo, hi] map to
/// 0..255; a sidecar "<path>.txt" records the range.
void write_pnm(const std::filesystem::path& path, const ImageGrid& img, double lo = 0.0, double hi = 1.0);
/// Tiles single-channel images into a contact sheet with one-pixel gutters.
ImageGrid tile_grid(std::span<const ImageGrid> images, int columns, double gutter_value = 0.0);

}  // namespace rmdlab
