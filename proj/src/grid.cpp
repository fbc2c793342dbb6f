// SPDX-License-Identifier: Apache-2.0
#include "rmdlab/grid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>

namespace rmdlab {

ImageGrid::ImageGrid(GridShape shape, double fill) : shape_(shape), data_(shape.size(), fill) {
    if (shape.channels <= 0 || shape.height <= 0 || shape.width <= 0) {
        throw std::invalid_argument("ImageGrid: dimensions must be positive");
    }
}

ImageGrid::ImageGrid(GridShape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (shape.channels <= 0 || shape.height <= 0 || shape.width <= 0) {
        throw std::invalid_argument("ImageGrid: dimensions must be positive");
    }
    if (data_.size() != shape.size()) {
        throw std::invalid_argument("ImageGrid: data length does not match shape");
    }
}

std::span<const double> ImageGrid::channel(int c) const {
    return std::span<const double>(data_).subspan(static_cast<std::size_t>(c) * shape_.plane(), shape_.plane());
}

std::span<double> ImageGrid::channel(int c) {
    return std::span<double>(data_).subspan(static_cast<std::size_t>(c) * shape_.plane(), shape_.plane());
}

double ImageGrid::sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
}

double ImageGrid::mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }

double ImageGrid::squared_norm() const {
    double s = 0.0;
    for (double v : data_) s += v * v;
    return s;
}

bool ImageGrid::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_same_shape(const ImageGrid& a, const ImageGrid& b, const char* what) {
    if (!(a.shape() == b.shape())) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch");
    }
}

ImageGrid& ImageGrid::operator+=(const ImageGrid& other) {
    require_same_shape(*this, other, "ImageGrid::operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

ImageGrid& ImageGrid::operator-=(const ImageGrid& other) {
    require_same_shape(*this, other, "ImageGrid::operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

ImageGrid& ImageGrid::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

ImageGrid& ImageGrid::add_scaled(const ImageGrid& other, double s) {
    require_same_shape(*this, other, "ImageGrid::add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
    return *this;
}

ImageGrid operator+(ImageGrid a, const ImageGrid& b) { return a += b; }
ImageGrid operator-(ImageGrid a, const ImageGrid& b) { return a -= b; }
ImageGrid operator*(double s, ImageGrid a) { return a *= s; }

ImageGrid lincomb(double a, const ImageGrid& x, double b, const ImageGrid& y) {
    require_same_shape(x, y, "lincomb");
    ImageGrid out(x.shape());
    auto o = out.data();
    auto xs = x.data();
    auto ys = y.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = a * xs[i] + b * ys[i];
    return out;
}

double dot(const ImageGrid& a, const ImageGrid& b) {
    require_same_shape(a, b, "dot");
    double s = 0.0;
    auto as = a.data();
    auto bs = b.data();
    for (std::size_t i = 0; i < as.size(); ++i) s += as[i] * bs[i];
    return s;
}

double SeededRng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

int SeededRng::uniform_int(int n) {
    if (n <= 0) {
        throw std::invalid_argument("SeededRng::uniform_int: n must be positive");
    }
    // Rejection sampling keeps the draw unbiased and portable.
    const std::uint64_t range = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = (~std::uint64_t{0} / range) * range;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return static_cast<int>(v % range);
}

double SeededRng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : bytes) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t derive_seed(std::uint64_t root, std::string_view label) { return splitmix64(root ^ fnv1a64(label)); }

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t index) {
    return splitmix64(splitmix64(root) + index);
}

ImageGrid gaussian_noise(GridShape shape, SeededRng& rng) {
    ImageGrid out(shape);
    for (double& v : out.data()) v = rng.normal();
    return out;
}

namespace {

struct Tap {
    int i0;
    int i1;
    double w1;  // weight of i1; i0 gets 1 - w1
};

std::vector<Tap> bilinear_taps(int src, int dst) {
    std::vector<Tap> taps(static_cast<std::size_t>(dst));
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (int d = 0; d < dst; ++d) {
        double s = (d + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(src - 1));
        const int i0 = static_cast<int>(std::floor(s));
        const int i1 = std::min(i0 + 1, src - 1);
        taps[static_cast<std::size_t>(d)] = {i0, i1, s - i0};
    }
    return taps;
}

}  // namespace

ImageGrid bilinear_upsample(const ImageGrid& x, int target_h, int target_w) {
    if (target_h < x.height() || target_w < x.width()) {
        throw std::invalid_argument("bilinear_upsample: target must not be smaller than the source");
    }
    if (target_h == x.height() && target_w == x.width()) {
        return x;
    }
    const auto ty = bilinear_taps(x.height(), target_h);
    const auto tx = bilinear_taps(x.width(), target_w);
    ImageGrid out({x.channels(), target_h, target_w});
    for (int c = 0; c < x.channels(); ++c) {
        for (int y = 0; y < target_h; ++y) {
            const Tap& a = ty[static_cast<std::size_t>(y)];
            for (int xx = 0; xx < target_w; ++xx) {
                const Tap& b = tx[static_cast<std::size_t>(xx)];
                const double top = (1.0 - b.w1) * x.at(c, a.i0, b.i0) + b.w1 * x.at(c, a.i0, b.i1);
                const double bot = (1.0 - b.w1) * x.at(c, a.i1, b.i0) + b.w1 * x.at(c, a.i1, b.i1);
                out.at(c, y, xx) = (1.0 - a.w1) * top + a.w1 * bot;
            }
        }
    }
    return out;
}

ImageGrid bilinear_upsample_adjoint(const ImageGrid& y, int source_h, int source_w) {
    if (y.height() < source_h || y.width() < source_w) {
        throw std::invalid_argument("bilinear_upsample_adjoint: source must not be larger than the target");
    }
    if (y.height() == source_h && y.width() == source_w) {
        return y;
    }
    const auto ty = bilinear_taps(source_h, y.height());
    const auto tx = bilinear_taps(source_w, y.width());
    ImageGrid out({y.channels(), source_h, source_w});
    for (int c = 0; c < y.channels(); ++c) {
        for (int yy = 0; yy < y.height(); ++yy) {
            const Tap& a = ty[static_cast<std::size_t>(yy)];
            for (int xx = 0; xx < y.width(); ++xx) {
                const Tap& b = tx[static_cast<std::size_t>(xx)];
                const double g = y.at(c, yy, xx);
                out.at(c, a.i0, b.i0) += (1.0 - a.w1) * (1.0 - b.w1) * g;
                out.at(c, a.i0, b.i1) += (1.0 - a.w1) * b.w1 * g;
                out.at(c, a.i1, b.i0) += a.w1 * (1.0 - b.w1) * g;
                out.at(c, a.i1, b.i1) += a.w1 * b.w1 * g;
            }
        }
    }
    return out;
}

ImageGrid area_downsample(const ImageGrid& x, int factor) {
    if (factor <= 0 || x.height() % factor != 0 || x.width() % factor != 0) {
        throw std::invalid_argument("area_downsample: dimensions must be divisible by the factor");
    }
    if (factor == 1) {
        return x;
    }
    const int h = x.height() / factor;
    const int w = x.width() / factor;
    const double inv = 1.0 / (factor * factor);
    ImageGrid out({x.channels(), h, w});
    for (int c = 0; c < x.channels(); ++c) {
        for (int y = 0; y < h; ++y) {
            for (int xx = 0; xx < w; ++xx) {
                double s = 0.0;
                for (int dy = 0; dy < factor; ++dy) {
                    for (int dx = 0; dx < factor; ++dx) {
                        s += x.at(c, y * factor + dy, xx * factor + dx);
                    }
                }
                out.at(c, y, xx) = s * inv;
            }
        }
    }
    return out;
}

void write_pnm(const std::filesystem::path& path, const ImageGrid& img, double lo, double hi) {
    if (img.channels() != 1 && img.channels() != 3) {
        throw std::invalid_argument("write_pnm: only 1 or 3 channels are supported");
    }
    if (!(hi > lo)) {
        throw std::invalid_argument("write_pnm: empty value range");
    }
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("write_pnm: cannot open " + path.string());
    }
    out << (img.channels() == 1 ? "P5" : "P6") << '\n' << img.width() << ' ' << img.height() << "\n255\n";
    for (int y = 0; y < img.height(); ++y) {
        for (int x = 0; x < img.width(); ++x) {
            for (int c = 0; c < img.channels(); ++c) {
                const double v = std::clamp((img.at(c, y, x) - lo) / (hi - lo), 0.0, 1.0);
                out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
            }
        }
    }
    if (!out) {
        throw std::runtime_error("write_pnm: write failed for " + path.string());
    }
    std::ofstream side(path.string() + ".txt");
    side << "lo=" << lo << "\nhi=" << hi << "\nchannels=" << img.channels() << "\nheight=" << img.height()
         << "\nwidth=" << img.width() << '\n';
}

ImageGrid tile_grid(std::span<const ImageGrid> images, int columns, double gutter_value) {
    if (images.empty() || columns <= 0) {
        throw std::invalid_argument("tile_grid: need at least one image and a positive column count");
    }
    const int h = images.front().height();
    const int w = images.front().width();
    const int n = static_cast<int>(images.size());
    const int cols = std::min(columns, n);
    const int rows = (n + cols - 1) / cols;
    ImageGrid sheet({1, rows * (h + 1) + 1, cols * (w + 1) + 1}, gutter_value);
    for (int i = 0; i < n; ++i) {
        const ImageGrid& im = images[static_cast<std::size_t>(i)];
        if (im.height() != h || im.width() != w || im.channels() != 1) {
            throw std::invalid_argument("tile_grid: images must share a single-channel shape");
        }
        const int oy = 1 + (i / cols) * (h + 1);
        const int ox = 1 + (i % cols) * (w + 1);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) sheet.at(0, oy + y, ox + x) = im.at(0, y, x);
        }
    }
    return sheet;
}

}  // namespace rmdlab
